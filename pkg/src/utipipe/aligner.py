"""Prompt-constrained word alignment, multimodal feature augmentation and
posterior-interpolation system combination.

Words are aligned by Viterbi through a linear graph: optional silence, the
first prompt word's phones, optional silence, the next word, and so on.
Each phone (and silence) is a 3-state left-to-right monophone HMM whose
emissions are either diagonal GMMs or scaled likelihoods from a
feedforward classifier (state posterior divided by state prior).  Two
classifier systems can be combined by interpolating their state posteriors.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from . import hmm
from .acoustic_features import FeatureMatrix
from .errors import AlignmentFailure, DimensionError, ParseError, ValidationError
from .eta import nearest_index
from .metrics import wer
from .session_io import NONSPEECH_LABELS, Segment, SegmentLabeling

log = logging.getLogger(__name__)

SILENCE = "sil"
STATES_PER_PHONE = 3
CONTEXT_MODES = ("symmetric", "left", "total")


# ---------------------------------------------------------------------------
# lexicon


@dataclass(frozen=True, eq=False)
class Lexicon:
    entries: dict
    silence: str = SILENCE
    inventory: tuple = None

    def __post_init__(self):
        entries = {str(w): tuple(p) for w, p in self.entries.items()}
        used = sorted({p for pron in entries.values() for p in pron})
        inventory = tuple(self.inventory) if self.inventory else tuple(used)
        for w, pron in entries.items():
            if not pron:
                raise ValidationError(f"word {w!r} has an empty pronunciation")
            missing = [p for p in pron if p not in inventory]
            if missing:
                raise ValidationError(f"word {w!r} uses phones {missing} outside the inventory")
            if self.silence in pron:
                raise ValidationError(f"word {w!r} uses the reserved silence phone")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "inventory", inventory)

    @property
    def words(self):
        return tuple(sorted(self.entries))

    def __contains__(self, word):
        return word in self.entries

    def __len__(self):
        return len(self.entries)

    def pronunciation(self, word):
        try:
            return self.entries[word]
        except KeyError:
            raise ValidationError(f"out-of-vocabulary word {word!r}") from None


def load_lexicon(path, silence=SILENCE):
    """``word<TAB>phone phone ...`` lines; blank lines and ``#`` comments skipped."""
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].split():
                raise ParseError(f"{path}: expected 'word<TAB>phones'", n)
            if parts[0] in entries:
                raise ParseError(f"{path}: duplicate entry {parts[0]!r}", n)
            entries[parts[0]] = tuple(parts[1].split())
    return Lexicon(entries, silence)


def save_lexicon(lexicon, path):
    with open(path, "w", encoding="utf-8") as fh:
        for w in lexicon.words:
            fh.write(f"{w}\t{' '.join(lexicon.entries[w])}\n")


# ---------------------------------------------------------------------------
# emissions


@dataclass(frozen=True, eq=False)
class PosteriorMatrix:
    values: np.ndarray
    classes: tuple = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"posteriors must be a matrix, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValidationError("posterior entries must lie in [0, 1]")
        if v.size and np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-6:
            raise ValidationError("posterior rows must sum to 1")
        classes = tuple(self.classes) if self.classes is not None else tuple(range(v.shape[1]))
        if len(classes) != v.shape[1]:
            raise DimensionError(f"{len(classes)} class names for {v.shape[1]} columns")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "classes", classes)

    @property
    def shape(self):
        return self.values.shape


def interpolate_posteriors(pA, pB, alpha):
    """``alpha * pA + (1 - alpha) * pB`` row by row."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if pA.shape != pB.shape:
        raise DimensionError(f"posterior shapes differ: {pA.shape} vs {pB.shape}")
    if pA.classes != pB.classes:
        raise ValidationError("posterior class orderings differ")
    return PosteriorMatrix(alpha * pA.values + (1.0 - alpha) * pB.values, pA.classes)


@dataclass(eq=False)
class MlpClassifier:
    """One-hidden-layer rectifier network over standardized inputs."""

    mean: np.ndarray
    scale: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dim(self):
        return self.w1.shape[0]

    def posteriors(self, X):
        X = np.asarray(getattr(X, "rows", X), dtype=np.float64)
        if X.shape[1] != self.dim:
            raise DimensionError(f"features have {X.shape[1]} dims, classifier expects {self.dim}")
        h = np.maximum((X - self.mean) / self.scale @ self.w1 + self.b1, 0.0)
        return np.exp(log_softmax(h @ self.w2 + self.b2, axis=1))


def train_mlp(X, y, num_classes, hidden=64, epochs=30, batch_size=128, learning_rate=0.05,
              momentum=0.9, weight_decay=1e-4, seed=0):
    """Minibatch SGD with momentum on cross-entropy."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - mean) / scale
    D = X.shape[1]
    p = {"w1": rng.uniform(-1, 1, (D, hidden)) * np.sqrt(6.0 / D), "b1": np.zeros(hidden),
         "w2": rng.uniform(-1, 1, (hidden, num_classes)) * np.sqrt(6.0 / hidden),
         "b2": np.zeros(num_classes)}
    vel = {k: np.zeros_like(v) for k, v in p.items()}
    for _ in range(epochs):
        order = rng.permutation(y.size)
        for s in range(0, y.size, batch_size):
            b = order[s:s + batch_size]
            z1 = Z[b] @ p["w1"] + p["b1"]
            h = np.maximum(z1, 0.0)
            d = np.exp(log_softmax(h @ p["w2"] + p["b2"], axis=1))
            d[np.arange(b.size), y[b]] -= 1.0
            d /= b.size
            g = {"w2": h.T @ d, "b2": d.sum(0)}
            dh = (d @ p["w2"].T) * (z1 > 0)
            g["w1"] = Z[b].T @ dh
            g["b1"] = dh.sum(0)
            for k in p:
                if k.startswith("w"):
                    g[k] = g[k] + weight_decay * p[k]
                vel[k] = momentum * vel[k] - learning_rate * g[k]
                p[k] = p[k] + vel[k]
    return MlpClassifier(mean, scale, p["w1"], p["b1"], p["w2"], p["b2"])


class PosteriorEmissions:
    """Scaled likelihoods ``log p(state | x) - log p(state)`` from a classifier."""

    def __init__(self, classifier, priors, loop_prob):
        self.classifier = classifier
        self.priors = np.asarray(priors, dtype=np.float64)
        self.loop_prob = np.asarray(loop_prob, dtype=np.float64)

    @property
    def dim(self):
        return self.classifier.dim

    def __len__(self):
        return self.priors.size

    def posteriors(self, X):
        return PosteriorMatrix(self.classifier.posteriors(X))

    def score(self, X):
        return scaled_loglik(self.posteriors(X).values, self.priors)


def scaled_loglik(post, priors):
    with np.errstate(divide="ignore"):
        return np.log(post) - np.log(priors)[None, :]


class CombinedEmissions:
    """Interpolated posteriors of two classifier systems.

    Scores a pair ``(X_a, X_b)`` of frame-synchronous feature matrices.  State
    priors are interpolated with the same weight, so ``alpha = 1`` reproduces
    system A and ``alpha = 0`` system B exactly.
    """

    def __init__(self, a, b, alpha):
        if len(a) != len(b):
            raise DimensionError(f"systems have {len(a)} and {len(b)} states")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.a, self.b, self.alpha = a, b, float(alpha)
        self.priors = alpha * a.priors + (1.0 - alpha) * b.priors
        self.loop_prob = alpha * a.loop_prob + (1.0 - alpha) * b.loop_prob

    def __len__(self):
        return len(self.a)

    def posteriors(self, X):
        Xa, Xb = X
        return interpolate_posteriors(self.a.posteriors(Xa), self.b.posteriors(Xb), self.alpha)

    def score(self, X):
        return scaled_loglik(self.posteriors(X).values, self.priors)


# ---------------------------------------------------------------------------
# monophone model


class MonophoneModel:
    """3-state left-to-right HMM per phone plus a silence model."""

    def __init__(self, phones, emissions, silence=SILENCE):
        self.phones = tuple(phones)
        self.silence = silence
        if silence not in self.phones:
            self.phones = self.phones + (silence,)
        self.emissions = emissions
        if len(emissions) != len(self.phones) * STATES_PER_PHONE:
            raise DimensionError(f"{len(emissions)} pdfs for {len(self.phones)} phones")
        loops = np.asarray(emissions.loop_prob)
        if np.any(loops <= 0) or np.any(loops >= 1):
            raise ValidationError("self-loop probabilities must lie in (0, 1)")

    @property
    def num_pdfs(self):
        return len(self.phones) * STATES_PER_PHONE

    @property
    def state_names(self):
        return tuple(f"{p}_{s}" for p in self.phones for s in range(STATES_PER_PHONE))

    def pdf_ids(self, phone):
        try:
            i = self.phones.index(phone)
        except ValueError:
            raise ValidationError(f"phone {phone!r} is not modelled") from None
        return tuple(range(i * STATES_PER_PHONE, (i + 1) * STATES_PER_PHONE))

    def word_unit(self, word, pron):
        return hmm.Unit(word, tuple(p for ph in pron for p in self.pdf_ids(ph)))

    def silence_unit(self):
        return hmm.Unit(self.silence, self.pdf_ids(self.silence))

    def with_emissions(self, emissions):
        return MonophoneModel(self.phones, emissions, self.silence)


@dataclass(frozen=True, eq=False)
class AlignGraph:
    """The linear prompt graph, independent of any particular model."""

    words: tuple
    pronunciations: tuple
    optional_silence: bool = True

    @property
    def num_word_states(self):
        return STATES_PER_PHONE * sum(len(p) for p in self.pronunciations)

    @property
    def num_silence_positions(self):
        return len(self.words) + 1 if self.optional_silence else 0

    def slots(self, model):
        sil = [model.silence_unit()]
        slots = [(sil, True)] if self.optional_silence else []
        for w, pron in zip(self.words, self.pronunciations):
            slots.append(([model.word_unit(w, pron)], False))
            if self.optional_silence:
                slots.append((sil, True))
        return slots

    def to_graph(self, model):
        return hmm.build_chain_graph(self.slots(model), model.emissions.loop_prob)


def build_align_graph(prompt, lexicon, optional_silence=True):
    """Linear graph: [sil] w1 [sil] w2 ... [sil], each word as its phones."""
    words = tuple(getattr(prompt, "target_words", prompt))
    if not words:
        raise ValidationError("cannot align an empty prompt")
    prons = tuple(lexicon.pronunciation(w) for w in words)
    return AlignGraph(words, prons, optional_silence)


def _rows(features):
    if isinstance(features, tuple):
        return tuple(_rows(f) for f in features)
    return np.asarray(features.rows if hasattr(features, "rows") else features, dtype=np.float64)


def _num_frames(X):
    return X[0].shape[0] if isinstance(X, tuple) else X.shape[0]


def _slice(X, a, b):
    return tuple(x[a:b] for x in X) if isinstance(X, tuple) else X[a:b]


def _shift(features):
    f = features[0] if isinstance(features, tuple) else features
    return getattr(f, "frame_shift_s", 0.01)


def align_path(features, graph, model):
    X = _rows(features)
    g = graph.to_graph(model) if isinstance(graph, AlignGraph) else graph
    T = _num_frames(X)
    need = hmm.min_path_length(g)
    if need is None or T < need:
        raise AlignmentFailure(f"{T} frames cannot cover the prompt graph "
                               f"(needs at least {need})")
    path, score = hmm.viterbi(g, model.emissions.score(X)[:, g.state_pdf])
    return g, path, score


def force_align(features, graph, model, kept=None, frame_shift_s=None):
    """Word (and silence) segments from the best path through ``graph``.

    ``kept`` maps rows of ``features`` to frame indices on the original
    clock (see :func:`mask_therapist`); segments are split wherever the kept
    frames are not contiguous.  Frame ``i`` spans ``[i*shift, (i+1)*shift)``.
    """
    shift = frame_shift_s or _shift(features)
    g, path, _ = align_path(features, graph, model)
    T = path.size
    kept = np.arange(T) if kept is None else np.asarray(kept)
    if kept.size != T:
        raise DimensionError(f"kept-frame map has {kept.size} entries for {T} frames")
    segs = []
    for start, stop, label in hmm.collapse_path(g, path):
        a = start
        for i in range(start + 1, stop + 1):
            if i == stop or kept[i] != kept[i - 1] + 1:
                segs.append(Segment(kept[a] * shift, (kept[i - 1] + 1) * shift, label))
                a = i
    return SegmentLabeling(tuple(segs))


def aligned_words(labeling, silence=SILENCE):
    return [s.label for s in labeling if s.label != silence and s.label not in NONSPEECH_LABELS]


# ---------------------------------------------------------------------------
# therapist masking and embedding augmentation


def mask_therapist(features, diarization, label="therapist"):
    """Drop frames whose midpoint falls inside a ``label`` segment.

    Returns ``(reduced, kept)`` where ``kept[i]`` is the original index of
    reduced row ``i``.  When every frame is removed ``reduced`` is ``None``.
    """
    T = features.num_frames
    mids = (np.arange(T) + 0.5) * features.frame_shift_s
    drop = np.zeros(T, dtype=bool)
    for seg in diarization:
        if seg.label == label:
            drop |= (mids >= seg.start_s) & (mids < seg.end_s)
    kept = np.flatnonzero(~drop)
    if kept.size == T:
        return features, kept
    if kept.size == 0:
        log.warning("therapist masking removed every frame")
        return None, kept
    return features.take(kept), kept


def context_offsets(context, mode="symmetric"):
    if mode not in CONTEXT_MODES:
        raise ValidationError(f"context mode must be one of {CONTEXT_MODES}, got {mode!r}")
    if context < 0:
        raise ValidationError("context must be non-negative")
    if mode == "symmetric":
        return np.arange(-context, context + 1)
    if mode == "left":
        return np.arange(-context, 1)
    if context < 1:
        raise ValidationError("'total' context needs at least one frame")
    return np.arange(context) - context // 2


def augment_with_embeddings(features, emb, context=4, mode="symmetric"):
    """Append ultrasound embeddings at several acoustic-frame offsets.

    For acoustic frame ``i`` and offset ``o`` the embedding of the ultrasound
    frame nearest to the midpoint of frame ``i + o`` is used; positions past
    either end replicate the edge embedding.
    """
    if len(emb) == 0:
        raise ValidationError("empty embedding sequence")
    offsets = context_offsets(context, mode)
    shift = features.frame_shift_s
    T = features.num_frames
    mids = (np.arange(T) + 0.5) * shift
    blocks, labels = [features.rows], list(features.column_labels)
    times = emb.times
    for o in offsets:
        idx = nearest_index(times, mids + o * shift)
        blocks.append(emb.values[idx])
        labels.extend(f"emb{o:+d}_{k}" for k in range(emb.values.shape[1]))
    return FeatureMatrix(np.hstack(blocks), tuple(labels), shift, features.frame_length_s)


# ---------------------------------------------------------------------------
# training


@dataclass
class AlignerConfig:
    iterations: int = 8
    max_components: int = 1
    split_start: int = 3
    split_epsilon: float = 0.2
    min_split_occupancy: float = 20.0
    var_floor_ratio: float = 1e-3
    init_loop: float = 0.5
    mlp_hidden: int = 64
    mlp_epochs: int = 20
    mlp_learning_rate: float = 0.05
    seed: int = 0


def train_monophone(data, lexicon, config=None):
    """Flat-start embedded EM from ``(features, words)`` pairs."""
    config = config or AlignerConfig()
    data = list(data)
    if not data:
        raise ValidationError("no training data")
    X = [_rows(f) for f, _ in data]
    X_all = np.concatenate(X)
    mean, var = X_all.mean(axis=0), X_all.var(axis=0)
    var = np.where(var > 0, var, 1.0)
    phones = tuple(lexicon.inventory) + (lexicon.silence,)
    P = len(phones) * STATES_PER_PHONE
    pdfs = hmm.GmmPdfSet([hmm.DiagGmm.single(mean, var) for _ in range(P)],
                         np.full(P, config.init_loop))
    model = MonophoneModel(phones, pdfs, lexicon.silence)
    graphs = [build_align_graph(words, lexicon) for _, words in data]

    def make_graphs(p):
        m = model.with_emissions(p)
        return [g.to_graph(m) for g in graphs]

    result = hmm.train_embedded(pdfs, X, make_graphs, config.iterations,
                                config.var_floor_ratio * var, config.max_components,
                                config.split_start, config.split_epsilon,
                                config.min_split_occupancy, log=log)
    model = model.with_emissions(result.pdfs)
    model.log_likelihoods = result.history
    return model


def state_targets(model, data, lexicon):
    """Per-frame pdf ids from forced alignment with ``model``."""
    out = []
    for feats, words in data:
        g, path, _ = align_path(feats, build_align_graph(words, lexicon), model)
        out.append(g.state_pdf[path])
    return out


def train_posterior_system(model, data, targets, config=None, seed=None):
    """Classifier emissions trained on frame-level state targets.

    ``data`` holds the features this system sees (acoustic or augmented);
    priors are add-one smoothed target frequencies.
    """
    config = config or AlignerConfig()
    X = np.concatenate([_rows(f) for f in data])
    y = np.concatenate(targets)
    P = model.num_pdfs
    clf = train_mlp(X, y, P, hidden=config.mlp_hidden, epochs=config.mlp_epochs,
                    learning_rate=config.mlp_learning_rate,
                    seed=config.seed if seed is None else seed)
    counts = np.bincount(y, minlength=P) + 1.0
    return model.with_emissions(PosteriorEmissions(clf, counts / counts.sum(),
                                                   model.emissions.loop_prob))


def combine(model_a, model_b, alpha):
    return model_a.with_emissions(CombinedEmissions(model_a.emissions, model_b.emissions, alpha))


# ---------------------------------------------------------------------------
# decoding within oracle word boundaries


@dataclass
class OracleDecodeResult:
    words: list                     # hypothesis per reference segment; None on failure
    reference: list
    failures: list = field(default_factory=list)

    def wer_pair(self, skip_failed=False):
        """``(ref, hyp)`` word lists; failed segments either become deletions
        or, with ``skip_failed``, drop out of both lists."""
        ref, hyp = [], []
        for r, h in zip(self.reference, self.words):
            if h is None:
                if not skip_failed:
                    ref.append(r)
                continue
            ref.append(r)
            hyp.append(h)
        return ref, hyp


def oracle_decode(features, boundaries, vocabulary, lexicon, model):
    """Best vocabulary word for every reference word segment.

    Each candidate is scored by Viterbi through its own phone chain (a
    uniform prior over words, so the acoustic score alone decides).  Ties go
    to the lexicographically first word.
    """
    vocab = sorted(set(vocabulary))
    if not vocab:
        raise ValidationError("empty decoding vocabulary")
    X = _rows(features)
    shift = _shift(features)
    T = _num_frames(X)
    graphs = {w: build_align_graph([w], lexicon, optional_silence=False).to_graph(model)
              for w in vocab}
    min_len = {w: hmm.min_path_length(g) for w, g in graphs.items()}
    words, ref, failures = [], [], []
    for k, seg in enumerate(s for s in boundaries if s.label not in NONSPEECH_LABELS):
        a = int(round(seg.start_s / shift))
        b = min(T, int(round(seg.end_s / shift)))
        ref.append(seg.label)
        if b <= a:
            failures.append(k)
            words.append(None)
            continue
        ll = model.emissions.score(_slice(X, a, b))
        best, best_score = None, -np.inf
        for w in vocab:
            if b - a < min_len[w]:
                continue
            g = graphs[w]
            try:
                _, score = hmm.viterbi(g, ll[:, g.state_pdf])
            except AlignmentFailure:
                continue
            if score > best_score:
                best, best_score = w, score
        if best is None:
            failures.append(k)
        words.append(best)
    return OracleDecodeResult(words, ref, failures)


def alpha_sweep(model_a, model_b, utterances, lexicon, vocabulary, path=None,
                alphas=tuple(np.round(np.linspace(0, 1, 11), 10))):
    """WER of the interpolated system for each alpha; optionally written as CSV.

    ``utterances`` are ``(features_a, features_b, boundaries)`` triples.
    """
    rows = []
    for alpha in alphas:
        model = combine(model_a, model_b, float(alpha))
        S = I = D = N = 0
        for fa, fb, bounds in utterances:
            res = oracle_decode((fa, fb), bounds, vocabulary, lexicon, model)
            ref, hyp = res.wer_pair()
            _, s, i, d = wer(ref, hyp)
            S, I, D, N = S + s, I + i, D + d, N + len(ref)
        rows.append({"alpha": float(alpha), "wer": 100.0 * (S + I + D) / N,
                     "sub": S, "ins": I, "del": D, "words": N})
    if path is not None:
        tmp = str(path) + ".tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "wer", "sub", "ins", "del", "words"])
            for r in rows:
                w.writerow([f"{r['alpha']:.2f}", f"{r['wer']:.4f}", r["sub"], r["ins"],
                            r["del"], r["words"]])
        os.replace(tmp, path)
    return rows
