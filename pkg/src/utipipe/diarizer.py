"""Child / therapist speaker diarization.

Three families of systems:

* threshold baselines on frame log-energy (VAD) and its fusion with tongue
  activity (VAD+ETA);
* an ergodic HMM-GMM over speaker tokens, flat-started from turn-level
  transcripts and refined by embedded Baum-Welch;
* semi-supervised retraining of that HMM on its own hypotheses.

All systems finish with the same label post-processing.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import hmm
from .errors import (DegenerateTrainingError, DimensionError, FormatError,
                     SynchronizationError, ValidationError)
from .session_io import Segment, SegmentLabeling

log = logging.getLogger(__name__)

TOKENS = ("child", "therapist", "silence", "noise")
SPEAKERS = ("child", "therapist")
FILLERS = ("silence", "noise")

VAD_THRESHOLD = 7.0
# frame energies are computed on [-1, 1] samples; this rescales them to the
# 16-bit integer range the threshold of 7 was defined on
VAD_OFFSET = 2.0 * np.log(32768.0)
ETA_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# threshold baselines

def _runs_to_labeling(labels, frame_shift_s, total_duration_s=None):
    return SegmentLabeling.from_frame_labels(labels, frame_shift_s, 0.0, total_duration_s)


def vad_decisions(energy, threshold=VAD_THRESHOLD, offset=VAD_OFFSET, mean_scale=0.0):
    """Per-frame speech flags: ``energy + offset >= threshold + mean_scale * mean``."""
    e = np.asarray(energy, dtype=np.float64) + offset
    if e.size == 0:
        raise ValidationError("energy sequence is empty")
    return e >= threshold + mean_scale * e.mean()


def vad_segments(energy, threshold=VAD_THRESHOLD, frame_shift_s=0.01, offset=VAD_OFFSET,
                 mean_scale=0.0, total_duration_s=None):
    """Energy VAD as a ``speech`` / ``silence`` labelling."""
    speech = vad_decisions(energy, threshold, offset, mean_scale)
    labels = np.where(speech, "speech", "silence")
    return _runs_to_labeling(labels, frame_shift_s, total_duration_s)


def vad_diarize(energy, threshold=VAD_THRESHOLD, frame_shift_s=0.01, **kwargs):
    """VAD-only baseline: every detected speech frame is attributed to the child."""
    return vad_segments(energy, threshold, frame_shift_s, **kwargs).relabel(
        {"speech": "child"})


def vad_eta_diarize(energy, eta_feature, vad_threshold=VAD_THRESHOLD,
                    eta_threshold=ETA_THRESHOLD, frame_shift_s=0.01,
                    offset=VAD_OFFSET, mean_scale=0.0, total_duration_s=None):
    """Below the VAD threshold is silence; above it, tongue activity at or
    over ``eta_threshold`` marks the child, anything else the therapist."""
    energy = np.asarray(energy, dtype=np.float64)
    eta_feature = np.asarray(eta_feature, dtype=np.float64)
    if energy.shape != eta_feature.shape:
        raise SynchronizationError(
            f"energy has {energy.size} frames but ETA feature has {eta_feature.size}")
    speech = vad_decisions(energy, vad_threshold, offset, mean_scale)
    labels = np.where(~speech, "silence",
                      np.where(eta_feature >= eta_threshold, "child", "therapist"))
    return _runs_to_labeling(labels, frame_shift_s, total_duration_s)


# ---------------------------------------------------------------------------
# post-processing

def _is_speech(label):
    return label not in FILLERS


def _postprocess_pass(segs, merge_gap_s, min_dur_s):
    # merge same-label speech separated only by a short silence
    out = []
    for seg in segs:
        if out and seg.label == out[-1].label and (
                out[-1].end_s == seg.start_s
                or (_is_speech(seg.label) and seg.start_s - out[-1].end_s < merge_gap_s)):
            # touching, or separated by an unlabelled gap that counts as silence
            out[-1] = Segment(out[-1].start_s, seg.end_s, seg.label)
            continue
        if (len(out) >= 2 and _is_speech(seg.label) and out[-1].label == "silence"
                and out[-2].label == seg.label and out[-1].end_s == seg.start_s
                and out[-2].end_s == out[-1].start_s
                and out[-1].duration < merge_gap_s):
            out.pop()
            out[-1] = Segment(out[-1].start_s, seg.end_s, seg.label)
            continue
        out.append(seg)
    # drop short speech
    res = []
    for seg in out:
        if _is_speech(seg.label) and seg.duration < min_dur_s:
            seg = Segment(seg.start_s, seg.end_s, "silence")
        if res and res[-1].label == seg.label and res[-1].end_s == seg.start_s:
            res[-1] = Segment(res[-1].start_s, seg.end_s, seg.label)
        else:
            res.append(seg)
    return res


def postprocess(labeling, merge_gap_s=0.1, min_dur_s=0.05):
    """Merge same-label speech across silences shorter than ``merge_gap_s``,
    then relabel speech shorter than ``min_dur_s`` as silence.

    The merge/drop pass is repeated until nothing changes, which makes the
    result idempotent; for inputs where one pass suffices the output is that
    of a single pass.
    """
    segs = list(labeling.segments)
    while True:
        new = _postprocess_pass(segs, merge_gap_s, min_dur_s)
        if new == segs:
            return SegmentLabeling(tuple(new))
        segs = new


# ---------------------------------------------------------------------------
# ergodic HMM-GMM

@dataclass(frozen=True)
class TurnTranscript:
    utterance_id: str
    tokens: tuple

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if not tokens:
            raise ValidationError(f"transcript {self.utterance_id!r} is empty")
        bad = [t for t in tokens if t not in TOKENS]
        if bad:
            raise ValidationError(f"unknown tokens {bad} in {self.utterance_id!r}")
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def from_labeling(cls, utterance_id, labeling, keep=SPEAKERS):
        """Speaker turns of a labelling, consecutive repeats collapsed."""
        toks = []
        for seg in labeling:
            if seg.label in keep and (not toks or toks[-1] != seg.label):
                toks.append(seg.label)
        return cls(utterance_id, tuple(toks))


@dataclass
class DiarizerConfig:
    tokens: tuple = TOKENS
    num_states: int = 5
    max_components: int = 32
    iterations: int = 10
    split_start: int = 2
    split_epsilon: float = 0.2
    min_split_occupancy: float = 20.0
    var_floor_ratio: float = 1e-3
    init_loop: float = 0.9
    edge_silence_frames: int = 5
    retrain_iterations: int = 4
    seed: int = 0


class ErgodicHmm:
    """Speaker tokens as left-to-right chains joined by an ergodic token loop."""

    def __init__(self, tokens, num_states, pdfs, inter, priors, feature_labels=None):
        self.tokens = tuple(tokens)
        self.num_states = int(num_states)
        self.pdfs = pdfs
        self.inter = np.asarray(inter, dtype=np.float64)
        self.priors = np.asarray(priors, dtype=np.float64)
        self.feature_labels = tuple(feature_labels) if feature_labels else None
        self.log_likelihoods = []
        n = len(self.tokens)
        if len(pdfs) != n * self.num_states:
            raise DimensionError(f"{len(pdfs)} pdfs for {n} tokens x {num_states} states")
        if self.inter.shape != (n, n) or self.priors.shape != (n,):
            raise DimensionError("transition matrix / priors do not match token count")
        if not np.allclose(self.inter.sum(axis=1), 1.0, atol=1e-8):
            raise ValidationError("inter-token rows must sum to 1")
        if not np.isclose(self.priors.sum(), 1.0, atol=1e-8):
            raise ValidationError("token priors must sum to 1")
        if np.any(self.inter <= 0):
            raise ValidationError("ergodic loop needs every token-to-token transition > 0")

    @property
    def dim(self):
        return self.pdfs.dim

    def pdf_id(self, token, state):
        return self.tokens.index(token) * self.num_states + state

    def unit(self, token):
        i = self.tokens.index(token)
        return hmm.Unit(token, tuple(range(i * self.num_states, (i + 1) * self.num_states)))

    def gmm(self, token, state):
        return self.pdfs.gmms[self.pdf_id(token, state)]

    def copy(self):
        m = ErgodicHmm(self.tokens, self.num_states, self.pdfs.copy(), self.inter.copy(),
                       self.priors.copy(), self.feature_labels)
        m.log_likelihoods = list(self.log_likelihoods)
        return m

    def decoding_graph(self):
        n, k = len(self.tokens), self.num_states
        S = n * k
        loops = self.pdfs.loop_prob
        trans = np.zeros((S, S))
        init = np.zeros(S)
        for i in range(n):
            base = i * k
            for s in range(k):
                trans[base + s, base + s] = loops[base + s]
                if s < k - 1:
                    trans[base + s, base + s + 1] = 1.0 - loops[base + s]
            last = base + k - 1
            for j in range(n):
                trans[last, j * k] += (1.0 - loops[last]) * self.inter[i, j]
            init[base] = self.priors[i]
        return hmm.Graph(np.arange(S), trans, init, np.ones(S),
                         np.repeat(np.arange(n), k), list(self.tokens),
                         np.tile(np.arange(k), n))

    def training_graph(self, transcript):
        fillers = [self.unit(t) for t in FILLERS if t in self.tokens]
        slots = []
        if fillers:
            slots.append((fillers, True))
        for tok in transcript.tokens:
            if tok not in self.tokens:
                raise ValidationError(f"token {tok!r} not modelled")
            slots.append(([self.unit(tok)], False))
            if fillers:
                slots.append((fillers, True))
        return hmm.build_chain_graph(slots, self.pdfs.loop_prob)


def _check_features(model, features):
    X = features.rows if hasattr(features, "rows") else np.asarray(features)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise DimensionError(
            f"features have {X.shape[-1]} dims, model expects {model.dim}")
    if (model.feature_labels and hasattr(features, "column_labels")
            and tuple(features.column_labels) != model.feature_labels):
        raise DimensionError(
            f"feature columns {features.column_labels} differ from the model's "
            f"{model.feature_labels}")
    return X


def decode_path(model, features):
    X = _check_features(model, features)
    graph = model.decoding_graph()
    return hmm.viterbi(graph, model.pdfs.score(X))


def decode(model, features, total_duration_s=None):
    """Viterbi over the ergodic token loop, collapsed to token segments."""
    path, _ = decode_path(model, features)
    shift = getattr(features, "frame_shift_s", 0.01)
    tokens = [model.tokens[i // model.num_states] for i in path]
    return SegmentLabeling.from_frame_labels(tokens, shift, 0.0, total_duration_s)


def _flat_start(config, X_all, feature_labels, edge_frames=None):
    mean = X_all.mean(axis=0)
    var = X_all.var(axis=0)
    var = np.where(var > 0, var, 1.0)
    n = len(config.tokens)
    P = n * config.num_states
    gmms = [hmm.DiagGmm.single(mean, var) for _ in range(P)]
    if edge_frames is not None and "silence" in config.tokens:
        # recordings open and close in silence: seed that filler there
        i = config.tokens.index("silence")
        v = np.maximum(edge_frames.var(axis=0), config.var_floor_ratio * var)
        for s in range(config.num_states):
            gmms[i * config.num_states + s] = hmm.DiagGmm.single(edge_frames.mean(axis=0), v)
    pdfs = hmm.GmmPdfSet(gmms, np.full(P, config.init_loop))
    inter = np.full((n, n), 1.0 / n)
    priors = np.full(n, 1.0 / n)
    return ErgodicHmm(config.tokens, config.num_states, pdfs, inter, priors, feature_labels)


def _estimate_token_transitions(model, utterances):
    """Add-one smoothed token bigram and initial counts from Viterbi alignments."""
    n = len(model.tokens)
    big = np.ones((n, n))
    first = np.ones(n)
    for X, graph in utterances:
        path, _ = hmm.viterbi(graph, model.pdfs.score(X)[:, graph.state_pdf])
        runs = [model.tokens.index(lab) for _, _, lab in hmm.collapse_path(graph, path)]
        first[runs[0]] += 1
        for a, b in zip(runs, runs[1:]):
            big[a, b] += 1
    return big / big.sum(axis=1, keepdims=True), first / first.sum()


def train_ergodic(data, config=None, init_model=None):
    """Embedded Baum-Welch training from ``(FeatureMatrix, TurnTranscript)`` pairs.

    Without ``init_model`` the model is flat-started: every state a single
    Gaussian at the global mean and variance, except that the silence filler
    is seeded from the first and last ``edge_silence_frames`` frames of each
    utterance (0 disables this).  Gaussians grow by binary
    splitting of the heaviest components (one split round per iteration
    from ``split_start`` on) up to ``max_components``.  A split is accepted
    only if the corpus likelihood does not drop; otherwise the perturbation is
    halved, and after a few halvings the split is skipped.  The per-iteration
    corpus log-likelihoods are kept in ``model.log_likelihoods``.
    """
    config = config or DiarizerConfig()
    data = list(data)
    if not data:
        raise ValidationError("no training data")
    X_all = np.concatenate([np.asarray(f.rows) for f, _ in data])
    labels = getattr(data[0][0], "column_labels", None)

    if init_model is None:
        present = {t for _, tr in data for t in tr.tokens}
        for tok in SPEAKERS:
            if tok in config.tokens and tok not in present:
                raise DegenerateTrainingError(
                    f"token {tok!r} does not occur in any training transcript")
        k = config.edge_silence_frames
        edges = None
        if k > 0:
            edges = np.concatenate([np.concatenate([np.asarray(f.rows)[:k],
                                                    np.asarray(f.rows)[-k:]]) for f, _ in data])
        model = _flat_start(config, X_all, labels, edges)
        max_components = config.max_components
    else:
        model = init_model.copy()
        model.log_likelihoods = []
        max_components = max(g.num_components for g in model.pdfs.gmms)

    var = X_all.var(axis=0)
    var_floor = config.var_floor_ratio * np.where(var > 0, var, 1.0)
    for f, _ in data:
        _check_features(model, f)

    def graphs(pdfs):
        m = ErgodicHmm(model.tokens, model.num_states, pdfs, model.inter, model.priors,
                       model.feature_labels)
        return [m.training_graph(tr) for _, tr in data]

    grow = init_model is None
    result = hmm.train_embedded(
        model.pdfs, [np.asarray(f.rows) for f, _ in data], graphs, config.iterations,
        var_floor, max_components if grow else 1, config.split_start,
        config.split_epsilon, config.min_split_occupancy, log=log)
    if init_model is None:
        occ = result.initial_occupancy
        for tok in {t for _, tr in data for t in tr.tokens}:
            i = model.tokens.index(tok)
            if occ[i * model.num_states:(i + 1) * model.num_states].sum() <= 0:
                raise DegenerateTrainingError(f"token {tok!r} has zero occupancy")
    model = ErgodicHmm(model.tokens, model.num_states, result.pdfs, model.inter,
                       model.priors, model.feature_labels)
    utts, history = result.utterances, result.history
    inter, priors = _estimate_token_transitions(model, utts)
    model = ErgodicHmm(model.tokens, model.num_states, model.pdfs, inter, priors,
                       model.feature_labels)
    model.log_likelihoods = history
    return model


def semi_supervised_retrain(model, unlabeled, config=None, labeled=()):
    """Decode unlabeled utterances, turn the hypotheses into transcripts and
    continue EM from ``model`` on labeled plus hypothesised data."""
    config = config or DiarizerConfig()
    unlabeled = list(unlabeled)
    if not unlabeled:
        raise ValidationError("no unlabeled data")
    data = list(labeled)
    for i, feats in enumerate(unlabeled):
        hyp = decode(model, feats)
        toks = TurnTranscript.from_labeling(f"hyp{i}", hyp, keep=SPEAKERS + ("noise",))
        if not toks.tokens:
            continue
        data.append((feats, toks))
    if not data:
        return model.copy()
    cfg = replace(config, iterations=config.retrain_iterations)
    return train_ergodic(data, cfg, init_model=model)


def frame_accuracy(model, data):
    """Fraction of frames whose decoded token equals the reference token."""
    hits = total = 0
    for feats, ref_labels in data:
        path, _ = decode_path(model, feats)
        hyp = np.array([model.tokens[i // model.num_states] for i in path])
        ref = np.asarray(ref_labels)
        hits += int(np.sum(hyp == ref))
        total += ref.size
    return hits / total


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"UTIERGH\x00"
_VERSION = 1


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def save_model(model, path):
    n = len(model.tokens)
    labels = model.feature_labels or ()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", _VERSION))
        fh.write(struct.pack("<III", n, model.num_states, model.dim))
        for t in model.tokens:
            fh.write(_pack_str(t))
        fh.write(struct.pack("<I", len(labels)))
        for l in labels:
            fh.write(_pack_str(l))
        for g in model.pdfs.gmms:
            fh.write(struct.pack("<I", g.num_components))
            fh.write(g.weights.astype("<f8").tobytes())
            fh.write(g.means.astype("<f8").tobytes())
            fh.write(g.variances.astype("<f8").tobytes())
        fh.write(model.pdfs.loop_prob.astype("<f8").tobytes())
        fh.write(model.inter.astype("<f8").tobytes())
        fh.write(model.priors.astype("<f8").tobytes())


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def floats(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_model(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(len(_MAGIC)) != _MAGIC:
        raise FormatError(f"{path}: not a diarizer model file")
    (version,) = r.unpack("<I")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    n, k, dim = r.unpack("<III")
    tokens = [r.string() for _ in range(n)]
    (nl,) = r.unpack("<I")
    labels = [r.string() for _ in range(nl)]
    gmms = []
    for _ in range(n * k):
        (K,) = r.unpack("<I")
        w = r.floats(K)
        mu = r.floats(K * dim).reshape(K, dim)
        var = r.floats(K * dim).reshape(K, dim)
        gmms.append(hmm.DiagGmm(w, mu, var))
    loops = r.floats(n * k)
    inter = r.floats(n * n).reshape(n, n)
    priors = r.floats(n)
    return ErgodicHmm(tokens, k, hmm.GmmPdfSet(gmms, loops), inter, priors, labels or None)
