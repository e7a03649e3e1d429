"""Synthetic therapy sessions with exact ground truth.

A session alternates child and therapist turns separated by silences.  Both
speakers say words from a small synthetic lexicon; the child's words form the
prompt.  Every stream is generated from that one timeline:

* acoustic features, sampled in feature space from per-phone-state Gaussians
  shifted by a per-speaker offset (20 MFCC-like columns and pov/logf0/dlogf0);
* audio, harmonic tones for speech and a faint dither for silence;
* ultrasound frames: a static image plus independent pixel noise that is
  strong while the child talks and weak otherwise, a slow sinusoidal
  deformation and a class-specific blob encoding the current articulation.

All randomness flows from ``numpy.random.Generator`` instances seeded from
the config, so a seed always reproduces the same session bit for bit.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .diarizer import TurnTranscript
from .acoustic_features import FRAME_LENGTH_S, FRAME_SHIFT_S, PITCH_COLUMNS, FeatureMatrix, save_features
from .session_io import (FRAME_SHAPE, AudioTrack, Prompt, Segment, SegmentLabeling, Session,
                         UltrasoundSequence, quantize_pcm16, save_segments, save_session)
from .errors import ValidationError

NUM_MFCC = 20
FEATURE_LABELS = tuple(f"mfcc_{i}" for i in range(NUM_MFCC)) + PITCH_COLUMNS
PHONE_NAMES = ("p", "t", "k", "a", "i", "u", "s", "m", "l", "o")
SILENCE_PHONE = "sil"
STAGES = ("baseline", "mid", "post", "maintenance")
MANIFEST_FIELDS = ("session_id", "speaker_id", "stage", "ultrasound_path",
                   "audio_or_feature_path", "segments_path", "prompt_path")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    duration_s: float = 5.0
    fps: float = 121.2
    sync_offset_s: float = 0.05
    sample_rate: int = 16000
    frame_shift_s: float = FRAME_SHIFT_S
    # turn process, in words per turn and 10 ms frames of silence
    child_words: tuple = (1, 2)
    therapist_words: tuple = (1, 3)
    gap_frames: tuple = (15, 45)
    edge_frames: tuple = (10, 30)
    p_child_first: float = 0.5
    noise_prob: float = 0.0
    state_frames: tuple = (2, 5)
    # ultrasound
    sigma_child: float = 0.1
    sigma_therapist: float = 0.01
    deformation_amp: float = 0.04
    deformation_hz: float = 3.0
    blob_amp: float = 0.25
    num_classes: int = 11
    # acoustic feature space
    emission_seed: int = 1234
    num_phones: int = 8
    num_words: int = 16
    word_phones: tuple = (2, 4)
    phone_spread: float = 2.0
    speaker_spread: float = 1.5
    feature_noise: float = 1.0
    f0_child: float = 280.0
    f0_therapist: float = 170.0
    # audio
    speech_amp: float = 0.1
    dither: float = 1e-5

    def __post_init__(self):
        if not self.sigma_child > self.sigma_therapist >= 0:
            raise ValidationError("need sigma_child > sigma_therapist >= 0")
        if self.duration_s <= 0 or self.fps <= 0 or self.sample_rate <= 0:
            raise ValidationError("durations and rates must be positive")
        if not 0 <= self.sync_offset_s < self.duration_s:
            raise ValidationError("sync offset must lie inside the session")
        for name in ("p_child_first", "noise_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be a probability")
        for name in ("child_words", "therapist_words", "gap_frames", "edge_frames",
                     "state_frames", "word_phones"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"{name} must be a positive (low, high) range")
        if self.num_phones > len(PHONE_NAMES):
            raise ValidationError(f"at most {len(PHONE_NAMES)} phones")
        if self.num_classes < 2:
            raise ValidationError("need at least two articulation classes")


@dataclass(frozen=True, eq=False)
class World:
    """Everything shared by all sessions generated from one emission seed."""

    phones: tuple
    lexicon: dict
    state_means: np.ndarray      # (num_phones + 1, 3, NUM_MFCC); last row is silence
    speaker_offset: dict
    noise_mean: np.ndarray
    phone_class: dict
    blob_centers: np.ndarray     # (num_classes, 2) scan-line, echo


@lru_cache(maxsize=8)
def _world(emission_seed, num_phones, num_words, word_phones, phone_spread,
           speaker_spread, num_classes):
    rng = np.random.default_rng(emission_seed)
    phones = PHONE_NAMES[:num_phones]
    means = rng.normal(0.0, phone_spread, size=(num_phones + 1, 3, NUM_MFCC))
    means[-1] = rng.normal(0.0, phone_spread, size=NUM_MFCC)   # silence: one flat target
    means[-1, :, 0] = -3.0 * phone_spread
    offsets = {"child": rng.normal(0.0, speaker_spread, NUM_MFCC),
               "therapist": rng.normal(0.0, speaker_spread, NUM_MFCC)}
    noise_mean = rng.normal(0.0, phone_spread, NUM_MFCC)
    lexicon = {}
    while len(lexicon) < num_words:
        n = int(rng.integers(word_phones[0], word_phones[1] + 1))
        pron = tuple(phones[i] for i in rng.integers(0, num_phones, n))
        name = "".join(pron)
        if name not in lexicon:
            lexicon[name] = pron
    lexicon = dict(sorted(lexicon.items()))
    phone_class = {p: 1 + i % (num_classes - 1) for i, p in enumerate(phones)}
    rows = rng.uniform(8, FRAME_SHAPE[0] - 8, num_classes)
    cols = rng.uniform(40, FRAME_SHAPE[1] - 40, num_classes)
    return World(phones, lexicon, means, offsets, noise_mean, phone_class,
                 np.column_stack([rows, cols]))


def world_for(config):
    return _world(config.emission_seed, config.num_phones, config.num_words,
                  tuple(config.word_phones), config.phone_spread, config.speaker_spread,
                  config.num_classes)


@dataclass(frozen=True, eq=False)
class Timeline:
    """Per acoustic frame: token, word instance, phone and HMM state."""

    tokens: np.ndarray
    word_index: np.ndarray
    phone: np.ndarray          # index into world.phones, -1 for none
    state: np.ndarray
    words: tuple               # (word, speaker, start_frame, end_frame)


@dataclass(frozen=True, eq=False)
class SynthSession:
    session: Session
    transcript: TurnTranscript
    features: FeatureMatrix
    words: SegmentLabeling          # the child's words on the audio clock
    articulation: np.ndarray        # class per ultrasound frame
    timeline: Timeline
    lexicon: dict


def _word_frames(rng, pron, world, config):
    phones, states = [], []
    lo, hi = config.state_frames
    for p in pron:
        pi = world.phones.index(p)
        for s in range(3):
            d = int(rng.integers(lo, hi + 1))
            phones.extend([pi] * d)
            states.extend([s] * d)
    return phones, states


def _timeline(rng, config, world):
    N = int(round(config.duration_s / config.frame_shift_s))
    tokens = ["silence"] * N
    word_index = [-1] * N
    phone = [-1] * N
    state = [-1] * N
    words = []
    vocab = list(world.lexicon)
    pos = int(rng.integers(config.edge_frames[0], config.edge_frames[1] + 1))
    tail = config.edge_frames[0]
    speaker = "child" if rng.random() < config.p_child_first else "therapist"
    turns = 0
    while True:
        rng_words = config.child_words if speaker == "child" else config.therapist_words
        n_words = int(rng.integers(rng_words[0], rng_words[1] + 1))
        chunk = []
        for _ in range(n_words):
            w = vocab[int(rng.integers(len(vocab)))]
            ph, st = _word_frames(rng, world.lexicon[w], world, config)
            chunk.append((w, ph, st))
        length = sum(len(ph) for _, ph, _ in chunk)
        if pos + length + tail > N:
            if turns == 0:
                raise ValidationError(
                    f"a {length}-frame turn does not fit in {config.duration_s} s")
            break
        for w, ph, st in chunk:
            start = pos
            for f, (p, s) in enumerate(zip(ph, st)):
                tokens[pos + f] = speaker
                word_index[pos + f] = len(words)
                phone[pos + f] = p
                state[pos + f] = s
            pos += len(ph)
            words.append((w, speaker, start, pos))
        turns += 1
        gap = int(rng.integers(config.gap_frames[0], config.gap_frames[1] + 1))
        if config.noise_prob and rng.random() < config.noise_prob and gap >= 12:
            burst = int(rng.integers(5, gap - 5))
            at = pos + (gap - burst) // 2
            for f in range(at, min(at + burst, N)):
                tokens[f] = "noise"
        pos += gap
        speaker = "therapist" if speaker == "child" else "child"
    return Timeline(np.array(tokens, dtype=object), np.array(word_index),
                    np.array(phone), np.array(state), tuple(words))


def _features(rng, tl, config, world):
    N = tl.tokens.size
    X = np.empty((N, NUM_MFCC + 3))
    noise = rng.normal(0.0, config.feature_noise, size=(N, NUM_MFCC))
    sil = world.state_means[-1, 0]
    for f in range(N):
        tok = tl.tokens[f]
        if tok in ("child", "therapist"):
            X[f, :NUM_MFCC] = world.state_means[tl.phone[f], tl.state[f]] + world.speaker_offset[tok]
        elif tok == "noise":
            X[f, :NUM_MFCC] = world.noise_mean
        else:
            X[f, :NUM_MFCC] = sil
    X[:, :NUM_MFCC] += noise
    speech = np.isin(tl.tokens, ("child", "therapist"))
    f0 = np.where(tl.tokens == "child", config.f0_child,
                  np.where(tl.tokens == "therapist", config.f0_therapist, 150.0))
    pov_mean = np.where(speech, 0.85, np.where(tl.tokens == "noise", 0.3, 0.15))
    X[:, NUM_MFCC] = np.clip(pov_mean + rng.normal(0, 0.05, N), 0.0, 1.0)
    X[:, NUM_MFCC + 1] = np.log(f0) + rng.normal(0, 0.05, N)
    X[:, NUM_MFCC + 2] = rng.normal(0, 0.01, N)
    return FeatureMatrix(X, FEATURE_LABELS, config.frame_shift_s, FRAME_LENGTH_S)


def _audio(rng, tl, config):
    sr = config.sample_rate
    n = int(round(config.duration_s * sr))
    frame = np.minimum((np.arange(n) / sr / config.frame_shift_s).astype(np.int64),
                       tl.tokens.size - 1)
    tok = tl.tokens[frame]
    f0 = np.where(tok == "child", config.f0_child,
                  np.where(tok == "therapist", config.f0_therapist, 0.0))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    harm = sum(np.sin(h * phase) / h for h in (1, 2, 3))
    speech = (tok == "child") | (tok == "therapist")
    x = np.where(speech, config.speech_amp * harm / 1.5, 0.0)
    x = x + np.where(speech, 0.005, config.dither) * rng.standard_normal(n)
    x = np.where(tok == "noise", 0.05 * rng.standard_normal(n), x)
    return quantize_pcm16(x)


def _blob(center, shape=FRAME_SHAPE, sd=(5.0, 30.0)):
    r = np.arange(shape[0])[:, None]
    c = np.arange(shape[1])[None, :]
    return np.exp(-0.5 * (((r - center[0]) / sd[0]) ** 2 + ((c - center[1]) / sd[1]) ** 2))


def _ultrasound(rng, tl, config, world):
    T = int(np.floor((config.duration_s - config.sync_offset_s) * config.fps))
    t = config.sync_offset_s + np.arange(T) / config.fps
    f = np.minimum((t / config.frame_shift_s).astype(np.int64), tl.tokens.size - 1)
    child = tl.tokens[f] == "child"
    classes = np.where(child, [world.phone_class.get(world.phones[p], 0) if p >= 0 else 0
                               for p in tl.phone[f]], 0).astype(np.int64)
    # smooth static background and a fixed deformation pattern
    r = np.linspace(0, 1, FRAME_SHAPE[0])[:, None]
    c = np.linspace(0, 1, FRAME_SHAPE[1])[None, :]
    ph = rng.uniform(0, 2 * np.pi, 4)
    base = (0.45 + 0.1 * np.sin(2 * np.pi * r * 1.5 + ph[0]) * np.cos(2 * np.pi * c * 2 + ph[1])
            + 0.05 * np.sin(2 * np.pi * (r + c) * 3 + ph[2])).astype(np.float32)
    bend = np.sin(2 * np.pi * (r * 0.7 + c * 1.3) + ph[3]).astype(np.float32)
    blobs = np.stack([np.zeros(FRAME_SHAPE)] + [_blob(world.blob_centers[k])
                                                for k in range(1, config.num_classes)])
    blobs = blobs.astype(np.float32)
    sigma = np.where(child, config.sigma_child, config.sigma_therapist).astype(np.float32)
    deform = np.where(child, config.deformation_amp
                      * np.sin(2 * np.pi * config.deformation_hz * t), 0.0).astype(np.float32)
    frames = rng.standard_normal((T,) + FRAME_SHAPE, dtype=np.float32)
    frames *= sigma[:, None, None]
    frames += base
    frames += deform[:, None, None] * bend
    frames += np.float32(config.blob_amp) * blobs[classes]
    np.clip(frames, 0.0, 1.0, out=frames)
    raw = np.rint(frames * 255.0).astype(np.uint8)
    del frames
    return UltrasoundSequence.from_bytes(raw, config.fps, config.sync_offset_s), classes


def word_labeling(tl, frame_shift_s, speaker="child"):
    return SegmentLabeling(tuple(
        Segment(round(s * frame_shift_s, 9), round(e * frame_shift_s, 9), w)
        for w, spk, s, e in tl.words if spk == speaker))


def generate_session(config, session_id="synth", speaker_id="spk0", stage=None):
    """One synthetic session and its ground truth."""
    world = world_for(config)
    rng = np.random.default_rng(config.seed)
    r_tl, r_feat, r_audio, r_us = rng.spawn(4)
    tl = _timeline(r_tl, config, world)
    feats = _features(r_feat, tl, config, world)
    audio = AudioTrack(_audio(r_audio, tl, config), config.sample_rate)
    us, classes = _ultrasound(r_us, tl, config, world)
    ref = SegmentLabeling.from_frame_labels(tl.tokens, config.frame_shift_s)
    transcript = TurnTranscript.from_labeling(session_id, ref, keep=("child", "therapist", "noise"))
    words = word_labeling(tl, config.frame_shift_s)
    prompt_words = tuple(s.label for s in words) or (next(iter(world.lexicon)),)
    prompt = Prompt(prompt_words, session_id, speaker_id, stage)
    session = Session(us, audio, prompt, ref)
    return SynthSession(session, transcript, feats, words, classes, tl, world.lexicon)


def generate_features_only(config):
    """Timeline and acoustic features without audio or ultrasound (cheap)."""
    world = world_for(config)
    rng = np.random.default_rng(config.seed)
    r_tl, r_feat, _, _ = rng.spawn(4)
    tl = _timeline(r_tl, config, world)
    return tl, _features(r_feat, tl, config, world)


def generate_word_utterance(config, words=None, pause_frames=(0, 15)):
    """Child-only utterance: silence, the words (with optional pauses), silence.

    Returns ``(features, word_labeling, words)``.
    """
    world = world_for(config)
    rng = np.random.default_rng(config.seed)
    vocab = list(world.lexicon)
    if words is None:
        n = int(rng.integers(config.child_words[0], config.child_words[1] + 2))
        words = [vocab[int(i)] for i in rng.integers(0, len(vocab), n)]
    tokens, phone, state, spans = [], [], [], []
    lead = int(rng.integers(config.edge_frames[0], config.edge_frames[1] + 1))
    tokens += ["silence"] * lead
    phone += [-1] * lead
    state += [-1] * lead
    for i, w in enumerate(words):
        if w not in world.lexicon:
            raise ValidationError(f"{w!r} is not in the synthetic lexicon")
        if i:
            gap = int(rng.integers(pause_frames[0], pause_frames[1] + 1))
            tokens += ["silence"] * gap
            phone += [-1] * gap
            state += [-1] * gap
        ph, st = _word_frames(rng, world.lexicon[w], world, config)
        spans.append((w, "child", len(tokens), len(tokens) + len(ph)))
        tokens += ["child"] * len(ph)
        phone += ph
        state += st
    trail = int(rng.integers(config.edge_frames[0], config.edge_frames[1] + 1))
    tokens += ["silence"] * trail
    phone += [-1] * trail
    state += [-1] * trail
    tl = Timeline(np.array(tokens, dtype=object), np.full(len(tokens), -1),
                  np.array(phone), np.array(state), tuple(spans))
    feats = _features(rng, tl, config, world)
    return feats, word_labeling(tl, config.frame_shift_s), list(words)


# ---------------------------------------------------------------------------
# corpus on disk

def session_seeds(seed, n):
    """Independent per-session seeds derived from one corpus seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def save_lexicon(lexicon, path):
    with open(path, "w", encoding="utf-8") as fh:
        for w, pron in lexicon.items():
            fh.write(f"{w}\t{' '.join(pron)}\n")


def write_synth_session(synth, out_dir):
    """Write all files of one synthetic session; returns the manifest row."""
    sid = synth.session.session_id
    stem = os.path.join(out_dir, sid)
    try:
        paths = save_session(synth.session, stem)
        save_features(synth.features, stem + ".feats")
        save_segments(synth.words, stem + ".words")
        with open(stem + ".turns", "w", encoding="utf-8") as fh:
            fh.write(" ".join(synth.transcript.tokens) + "\n")
        np.savetxt(stem + ".artic", synth.articulation, fmt="%d")
    except OSError as exc:
        raise OSError(f"failed writing session {sid!r} under {out_dir}: {exc}") from exc
    rel = lambda p: os.path.relpath(p, out_dir)
    prompt = synth.session.prompt
    return {
        "session_id": sid,
        "speaker_id": prompt.speaker_id,
        "stage": prompt.session_stage or "",
        "ultrasound_path": rel(paths["ultrasound"]),
        "audio_or_feature_path": rel(paths["audio"]),
        "segments_path": rel(paths["segments"]),
        "prompt_path": rel(paths["prompt"]),
    }


def generate_corpus(config, n_sessions, out_dir, num_speakers=4):
    """Write ``n_sessions`` sessions plus ``manifest.csv`` and ``lexicon.txt``."""
    if n_sessions < 1:
        raise ValidationError("n_sessions must be at least 1")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, s in enumerate(session_seeds(config.seed, n_sessions)):
        cfg = replace(config, seed=s)
        synth = generate_session(cfg, f"s{i:03d}", f"spk{i % num_speakers}",
                                 STAGES[i % len(STAGES)])
        rows.append(write_synth_session(synth, out_dir))
    save_lexicon(world_for(config).lexicon, os.path.join(out_dir, "lexicon.txt"))
    manifest = os.path.join(out_dir, "manifest.csv")
    tmp = manifest + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, manifest)
    return manifest

