"""Session data model and on-disk formats.

A recorded session bundles a raw ultrasound sequence, the synchronised audio
track, the prompt shown to the child and, optionally, a reference labelling.

Disk formats
------------
* ultrasound: headerless unsigned 8-bit raster, frame-major then scan-line
  major (``T x 63 x 412`` bytes), plus a ``key=value`` sidecar parameter file.
* audio: PCM WAV (16-bit written, 16/32-bit int or float read).
* segments: one ``start<TAB>end<TAB>label`` line per segment, 3 decimals.
* prompt: UTF-8 text, whitespace separated words.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import DimensionError, FormatError, ParseError, ValidationError

NUM_SCANLINES = 63
NUM_ECHOES = 412
FRAME_SHAPE = (NUM_SCANLINES, NUM_ECHOES)
DEFAULT_FPS = 121.2
DEFAULT_SAMPLE_RATE = 16000

SPEAKER_LABELS = ("child", "therapist", "silence", "noise")
NONSPEECH_LABELS = frozenset({"silence", "sil", "noise", "inactive"})

# the corpus' own .param files use these names
_PARAM_ALIASES = {
    "framespersec": "fps",
    "fps": "fps",
    "timeinsecsoffirstframe": "sync_offset_s",
    "sync_offset_s": "sync_offset_s",
    "numvectors": "num_scanlines",
    "num_scanlines": "num_scanlines",
    "pixpervector": "num_echoes",
    "num_echoes": "num_echoes",
}


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class UltrasoundSequence:
    """Stack of raw ultrasound frames on their own clock.

    ``frames`` has shape ``(T, 63, 412)`` with echo intensities in [0, 1].
    ``sync_offset_s`` is the amount of audio preceding the first frame.
    """

    frames: np.ndarray
    fps: float = DEFAULT_FPS
    sync_offset_s: float = 0.0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.dtype not in (np.float32, np.float64):
            frames = frames.astype(np.float32)
        if frames.ndim != 3 or frames.shape[1:] != FRAME_SHAPE:
            raise DimensionError(
                f"ultrasound frames must be T x {NUM_SCANLINES} x {NUM_ECHOES}, "
                f"got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValidationError("ultrasound sequence needs at least one frame")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if not self.sync_offset_s >= 0:
            raise ValidationError(
                f"sync_offset_s must be non-negative, got {self.sync_offset_s}")
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "fps", float(self.fps))
        object.__setattr__(self, "sync_offset_s", float(self.sync_offset_s))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def duration_s(self):
        return len(self) / self.fps

    @classmethod
    def from_bytes(cls, raw, fps=DEFAULT_FPS, sync_offset_s=0.0):
        raw = np.asarray(raw, dtype=np.uint8)
        return cls(raw.astype(np.float32) / np.float32(255.0), fps, sync_offset_s)

    def to_bytes(self):
        return np.rint(np.clip(self.frames, 0.0, 1.0) * 255.0).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, UltrasoundSequence):
            return NotImplemented
        return (self.fps == other.fps and self.sync_offset_s == other.sync_offset_s
                and np.array_equal(self.frames, other.frames))


@dataclass(frozen=True, eq=False)
class AudioTrack:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValidationError("audio must be a non-empty mono signal")
        if not self.sample_rate > 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, AudioTrack):
            return NotImplemented
        return (self.sample_rate == other.sample_rate
                and np.array_equal(self.samples, other.samples))


@dataclass(frozen=True)
class Prompt:
    target_words: tuple
    session_id: str = ""
    speaker_id: str = ""
    session_stage: str | None = None

    def __post_init__(self):
        words = tuple(self.target_words)
        if not words:
            raise ValidationError("prompt must contain at least one target word")
        if any(not w or any(c.isspace() for c in w) for w in words):
            raise ValidationError(f"invalid prompt word in {words!r}")
        object.__setattr__(self, "target_words", words)

    def oov_words(self, lexicon):
        """Prompt words absent from ``lexicon`` (any mapping of words)."""
        return [w for w in self.target_words if w not in lexicon]


class Segment(NamedTuple):
    start_s: float
    end_s: float
    label: str

    @property
    def duration(self):
        return self.end_s - self.start_s


@dataclass(frozen=True)
class SegmentLabeling:
    """Sorted, non-overlapping timed segments."""

    segments: tuple = ()

    def __post_init__(self):
        segs = tuple(Segment(float(s), float(e), str(l)) for s, e, l in self.segments)
        for i, seg in enumerate(segs):
            if not seg.start_s < seg.end_s:
                raise ValidationError(f"segment {i} has start >= end: {seg}")
            if not seg.label or any(c.isspace() for c in seg.label):
                raise ValidationError(f"segment {i} has an invalid label {seg.label!r}")
        for a, b in zip(segs, segs[1:]):
            if b.start_s < a.start_s:
                raise ValidationError(f"segments not sorted: {a} before {b}")
            if b.start_s < a.end_s:
                raise ValidationError(f"overlapping segments: {a} and {b}")
        object.__setattr__(self, "segments", segs)

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def __getitem__(self, i):
        return self.segments[i]

    @property
    def labels(self):
        return [s.label for s in self.segments]

    @property
    def start_s(self):
        return self.segments[0].start_s if self.segments else 0.0

    @property
    def end_s(self):
        return self.segments[-1].end_s if self.segments else 0.0

    def total(self, label):
        return sum(s.duration for s in self.segments if s.label == label)

    def filter(self, keep):
        """Segments whose label satisfies ``keep`` (a predicate or a label set)."""
        if not callable(keep):
            allowed = set(keep)
            keep = allowed.__contains__
        return SegmentLabeling(tuple(s for s in self.segments if keep(s.label)))

    def relabel(self, mapping):
        return SegmentLabeling(tuple(
            Segment(s.start_s, s.end_s, mapping.get(s.label, s.label))
            for s in self.segments))

    def merged(self):
        """Coalesce touching segments that carry the same label."""
        out = []
        for seg in self.segments:
            if out and out[-1].label == seg.label and out[-1].end_s == seg.start_s:
                out[-1] = Segment(out[-1].start_s, seg.end_s, seg.label)
            else:
                out.append(seg)
        return SegmentLabeling(tuple(out))

    def tiles(self, start_s, end_s, tol=1e-9):
        """True when the segments cover ``[start_s, end_s]`` without gaps."""
        if not self.segments:
            return False
        if abs(self.segments[0].start_s - start_s) > tol:
            return False
        if abs(self.segments[-1].end_s - end_s) > tol:
            return False
        return all(abs(a.end_s - b.start_s) <= tol
                   for a, b in zip(self.segments, self.segments[1:]))

    def label_at(self, t_s, default=None):
        for seg in self.segments:
            if seg.start_s <= t_s < seg.end_s:
                return seg.label
        return default

    def to_frame_labels(self, num_frames, frame_shift_s, default="silence"):
        """Label of each frame ``i``, sampled at the frame midpoint."""
        labels = np.full(num_frames, default, dtype=object)
        mids = (np.arange(num_frames) + 0.5) * frame_shift_s
        for seg in self.segments:
            lo = np.searchsorted(mids, seg.start_s, side="left")
            hi = np.searchsorted(mids, seg.end_s, side="left")
            labels[lo:hi] = seg.label
        return labels

    @classmethod
    def from_frame_labels(cls, labels, frame_shift_s, start_s=0.0, end_s=None):
        """Collapse per-frame labels into runs; frame ``i`` covers
        ``[start + i*shift, start + (i+1)*shift)``.  ``end_s`` stretches the
        final run to the end of the analysed span."""
        labels = list(labels)
        segs = []
        i = 0
        n = len(labels)
        while i < n:
            j = i
            while j + 1 < n and labels[j + 1] == labels[i]:
                j += 1
            # rounding keeps k * shift free of binary noise (4.85, not 4.8500000000000005)
            segs.append(Segment(round(start_s + i * frame_shift_s, 9),
                                round(start_s + (j + 1) * frame_shift_s, 9), str(labels[i])))
            i = j + 1
        if segs and end_s is not None and end_s > segs[-1].start_s:
            last = segs[-1]
            segs[-1] = Segment(last.start_s, end_s, last.label)
        return cls(tuple(segs))


@dataclass(frozen=True, eq=False)
class Session:
    ultrasound: UltrasoundSequence
    audio: AudioTrack
    prompt: Prompt
    reference: SegmentLabeling | None = None

    SPAN_SLACK_S = 0.5

    def __post_init__(self):
        us, au = self.ultrasound, self.audio
        if au.duration_s < us.sync_offset_s:
            raise ValidationError(
                f"audio ({au.duration_s:.3f} s) is shorter than the sync offset "
                f"({us.sync_offset_s:.3f} s)")
        if us.duration_s > au.duration_s + self.SPAN_SLACK_S:
            raise ValidationError(
                f"ultrasound span {us.duration_s:.3f} s exceeds audio duration "
                f"{au.duration_s:.3f} s by more than {self.SPAN_SLACK_S} s")

    @property
    def session_id(self):
        return self.prompt.session_id

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return (self.ultrasound == other.ultrasound and self.audio == other.audio
                and self.prompt == other.prompt and self.reference == other.reference)


def ultrasound_frame_at(seq, t_s):
    """Index of the ultrasound frame shown at audio time ``t_s``.

    Uses round-half-to-even and clamps to the valid frame range.
    """
    if t_s < 0:
        raise ValueError(f"time must be non-negative, got {t_s}")
    idx = int(np.rint((t_s - seq.sync_offset_s) * seq.fps))
    return min(max(idx, 0), len(seq) - 1)


# ---------------------------------------------------------------------------
# segments

def format_segments(labeling):
    return "".join(f"{s.start_s:.3f}\t{s.end_s:.3f}\t{s.label}\n"
                   for s in sorted(labeling, key=lambda s: s.start_s))


def save_segments(labeling, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_segments(labeling))


def parse_segments(text):
    segs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        try:
            start, end = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric time in {line!r}", lineno) from None
        if not (math.isfinite(start) and math.isfinite(end)):
            raise ParseError(f"non-finite time in {line!r}", lineno)
        if not start < end:
            raise ParseError(f"start {start} is not before end {end}", lineno)
        segs.append(Segment(start, end, parts[2].strip()))
    segs.sort(key=lambda s: (s.start_s, s.end_s))
    for a, b in zip(segs, segs[1:]):
        if b.start_s < a.end_s:
            raise ValidationError(f"overlapping segments: {tuple(a)} and {tuple(b)}")
    return SegmentLabeling(tuple(segs))


def load_segments(path):
    with open(path, encoding="utf-8") as fh:
        return parse_segments(fh.read())


# ---------------------------------------------------------------------------
# ultrasound + sidecar parameters

def read_params(path):
    """Read a ``key=value`` sidecar file into a dict of canonical keys."""
    params = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {line!r}", lineno)
            key, value = (p.strip() for p in line.split("=", 1))
            canon = _PARAM_ALIASES.get(key.lower())
            if canon is None:
                continue
            try:
                params[canon] = float(value)
            except ValueError:
                raise FormatError(f"parameter {key!r} is not numeric: {value!r}") from None
    return params


def write_params(path, fps, sync_offset_s):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"fps={fps!r}\n")
        fh.write(f"sync_offset_s={sync_offset_s!r}\n")
        fh.write(f"num_scanlines={NUM_SCANLINES}\n")
        fh.write(f"num_echoes={NUM_ECHOES}\n")


def save_ultrasound(seq, path, param_path=None):
    seq.to_bytes().tofile(path)
    write_params(param_path or _default_param_path(path), seq.fps, seq.sync_offset_s)


def _default_param_path(path):
    return os.path.splitext(path)[0] + ".param"


def load_ultrasound(path, param_path=None, fps=None, sync_offset_s=None):
    """Load a raw ultrasound file.

    Sidecar values win; ``fps`` / ``sync_offset_s`` are fallbacks for keys the
    sidecar does not provide.
    """
    param_path = param_path or _default_param_path(path)
    params = read_params(param_path) if os.path.exists(param_path) else {}
    scan = int(params.get("num_scanlines", NUM_SCANLINES))
    echoes = int(params.get("num_echoes", NUM_ECHOES))
    if (scan, echoes) != FRAME_SHAPE:
        raise DimensionError(
            f"frame geometry {scan}x{echoes} in {param_path}, expected "
            f"{NUM_SCANLINES}x{NUM_ECHOES}")
    fps = params.get("fps", fps)
    sync = params.get("sync_offset_s", sync_offset_s)
    if fps is None:
        raise FormatError(f"fps missing from {param_path} and not supplied")
    if sync is None:
        raise FormatError(f"sync_offset_s missing from {param_path} and not supplied")
    raw = np.fromfile(path, dtype=np.uint8)
    frame_bytes = NUM_SCANLINES * NUM_ECHOES
    if raw.size == 0 or raw.size % frame_bytes:
        expected = max(1, round(raw.size / frame_bytes)) * frame_bytes
        raise DimensionError(
            f"{path}: {raw.size} bytes is not a whole number of "
            f"{NUM_SCANLINES}x{NUM_ECHOES} frames (expected a multiple of "
            f"{frame_bytes}, e.g. {expected})")
    return UltrasoundSequence.from_bytes(
        raw.reshape(-1, NUM_SCANLINES, NUM_ECHOES), fps, sync)


# ---------------------------------------------------------------------------
# audio, prompt

def save_audio(audio, path):
    pcm = np.rint(np.clip(audio.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    wavfile.write(path, audio.sample_rate, pcm)


def quantize_pcm16(samples):
    """Samples as they read back from a 16-bit WAV."""
    pcm = np.rint(np.clip(samples, -1.0, 32767 / 32768) * 32768)
    return pcm / 32768.0


def load_audio(path):
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise FormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    return AudioTrack(samples, rate)


def save_prompt(prompt, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(prompt.target_words) + "\n")


def load_prompt(path, session_id="", speaker_id="", session_stage=None):
    with open(path, encoding="utf-8") as fh:
        words = fh.read().split()
    if not words:
        raise FormatError(f"{path}: prompt file contains no words")
    return Prompt(tuple(words), session_id, speaker_id, session_stage)


# ---------------------------------------------------------------------------

def load_session(paths, meta=None):
    """Load a :class:`Session` from a mapping of file paths.

    ``paths`` keys: ``ultrasound``, ``audio``, ``prompt`` (required) and
    ``param``, ``segments`` (optional).  ``meta`` may carry ``fps``,
    ``sync_offset_s``, ``session_id``, ``speaker_id`` and ``stage``.
    """
    meta = dict(meta or {})
    for key in ("ultrasound", "audio", "prompt"):
        if not paths.get(key):
            raise FormatError(f"session path set is missing {key!r}")
    us = load_ultrasound(paths["ultrasound"], paths.get("param"),
                         fps=meta.get("fps"), sync_offset_s=meta.get("sync_offset_s"))
    audio = load_audio(paths["audio"])
    prompt = load_prompt(paths["prompt"], meta.get("session_id", ""),
                         meta.get("speaker_id", ""), meta.get("stage"))
    ref = load_segments(paths["segments"]) if paths.get("segments") else None
    return Session(us, audio, prompt, ref)


def save_session(session, stem):
    """Write a session next to ``stem`` and return the path set."""
    paths = {
        "ultrasound": stem + ".ult",
        "param": stem + ".param",
        "audio": stem + ".wav",
        "prompt": stem + ".txt",
    }
    save_ultrasound(session.ultrasound, paths["ultrasound"], paths["param"])
    save_audio(session.audio, paths["audio"])
    save_prompt(session.prompt, paths["prompt"])
    if session.reference is not None:
        paths["segments"] = stem + ".seg"
        save_segments(session.reference, paths["segments"])
    return paths


def iter_runs(values: Sequence) -> Iterable[tuple[int, int, object]]:
    """Yield ``(start, stop, value)`` for runs of equal consecutive values."""
    n = len(values)
    i = 0
    while i < n:
        j = i + 1
        while j < n and values[j] == values[i]:
            j += 1
        yield i, j, values[i]
        i = j
