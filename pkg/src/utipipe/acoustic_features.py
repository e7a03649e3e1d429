"""Frame-synchronous acoustic features and multimodal feature assembly."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, rfft, irfft

from .errors import (DimensionError, FormatError, InsufficientDataError,
                     SynchronizationError, ValidationError)

FRAME_SHIFT_S = 0.010
FRAME_LENGTH_S = 0.025
ENERGY_FLOOR = 1e-10
PRE_EMPHASIS = 0.97
NUM_MEL_FILTERS = 23
MEL_LOW_HZ = 20.0

PITCH_MIN_HZ = 60.0
PITCH_MAX_HZ = 400.0
PITCH_WINDOW_S = 0.040
PITCH_COLUMNS = ("pov", "logf0", "dlogf0")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    rows: np.ndarray
    column_labels: tuple
    frame_shift_s: float = FRAME_SHIFT_S
    frame_length_s: float = FRAME_LENGTH_S

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        labels = tuple(str(c) for c in self.column_labels)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise DimensionError(f"feature matrix needs shape (T>=1, D), got {rows.shape}")
        if len(labels) != rows.shape[1]:
            raise DimensionError(
                f"{len(labels)} column labels for {rows.shape[1]} columns")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate column labels in {labels}")
        if not np.all(np.isfinite(rows)):
            raise ValidationError("feature matrix contains non-finite values")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "column_labels", labels)

    @property
    def num_frames(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]

    def column(self, label):
        return self.rows[:, self.column_labels.index(label)]

    def select(self, labels):
        idx = [self.column_labels.index(l) for l in labels]
        return FeatureMatrix(self.rows[:, idx], tuple(labels),
                             self.frame_shift_s, self.frame_length_s)

    def take(self, index):
        return FeatureMatrix(self.rows[np.asarray(index)], self.column_labels,
                             self.frame_shift_s, self.frame_length_s)

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (self.column_labels == other.column_labels
                and self.frame_shift_s == other.frame_shift_s
                and self.frame_length_s == other.frame_length_s
                and np.array_equal(self.rows, other.rows))


# ---------------------------------------------------------------------------
# framing

def num_frames(num_samples, frame_len, frame_shift):
    if num_samples < frame_len:
        return 0
    return (num_samples - frame_len) // frame_shift + 1


def frame_signal(x, frame_len, frame_shift):
    n = num_frames(x.size, frame_len, frame_shift)
    if n == 0:
        raise InsufficientDataError(
            f"audio has {x.size} samples, shorter than one {frame_len}-sample window")
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(n)[:, None]
    return x[idx]


def _frame_params(sample_rate, shift_s=FRAME_SHIFT_S, length_s=FRAME_LENGTH_S):
    return int(round(length_s * sample_rate)), int(round(shift_s * sample_rate))


def frame_log_energy(audio, frame_shift_s=FRAME_SHIFT_S, frame_length_s=FRAME_LENGTH_S):
    """``log(sum x^2 + 1e-10)`` per frame, on the MFCC frame clock."""
    L, S = _frame_params(audio.sample_rate, frame_shift_s, frame_length_s)
    frames = frame_signal(audio.samples, L, S)
    return np.log(np.einsum("ij,ij->i", frames, frames) + ENERGY_FLOOR)


# ---------------------------------------------------------------------------
# MFCC

def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(num_filters, nfft, sample_rate, low_hz=MEL_LOW_HZ, high_hz=None):
    """Triangular filters on the mel scale, shape ``(num_filters, nfft//2 + 1)``.

    Returns the weights and the filter center frequencies in Hz.
    """
    high_hz = sample_rate / 2.0 if high_hz is None else high_hz
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_filters + 2))
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges[1:-1]


def _power_spectrum(audio, frame_shift_s, frame_length_s):
    L, S = _frame_params(audio.sample_rate, frame_shift_s, frame_length_s)
    x = audio.samples
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - PRE_EMPHASIS * x[:-1]
    frames = frame_signal(emph, L, S) * np.hamming(L)
    nfft = 1 << (L - 1).bit_length()
    power = np.abs(rfft(frames, n=nfft, axis=1)) ** 2
    return power, nfft


def mel_energies(audio, num_filters=NUM_MEL_FILTERS, frame_shift_s=FRAME_SHIFT_S,
                 frame_length_s=FRAME_LENGTH_S):
    power, nfft = _power_spectrum(audio, frame_shift_s, frame_length_s)
    weights, _ = mel_filterbank(num_filters, nfft, audio.sample_rate)
    return power @ weights.T


def compute_mfcc(audio, num_coeffs=20, num_filters=NUM_MEL_FILTERS,
                 frame_shift_s=FRAME_SHIFT_S, frame_length_s=FRAME_LENGTH_S):
    """MFCCs: pre-emphasis, Hamming window, power FFT, mel bank, log, DCT-II.

    The DCT is orthonormal except for coefficient 0, which is the mean
    log-mel energy so that digital silence sits exactly at ``log(1e-10)``.
    """
    if num_coeffs > num_filters:
        raise ValidationError(
            f"num_coeffs={num_coeffs} exceeds the {num_filters} mel filters")
    logmel = np.log(np.maximum(
        mel_energies(audio, num_filters, frame_shift_s, frame_length_s), ENERGY_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :num_coeffs]
    ceps[:, 0] /= np.sqrt(num_filters)
    return FeatureMatrix(ceps, tuple(f"mfcc_{i}" for i in range(num_coeffs)),
                         frame_shift_s, frame_length_s)


# ---------------------------------------------------------------------------
# pitch

def nccf_frames(audio, min_hz=PITCH_MIN_HZ, max_hz=PITCH_MAX_HZ,
                frame_shift_s=FRAME_SHIFT_S, frame_length_s=FRAME_LENGTH_S,
                window_s=PITCH_WINDOW_S):
    """Normalised cross-correlation per frame and lag.

    Each analysis window is centred on the matching MFCC frame.  Returns
    ``(nccf, lags)`` with ``nccf`` of shape ``(T, len(lags))``.
    """
    sr = audio.sample_rate
    L, S = _frame_params(sr, frame_shift_s, frame_length_s)
    T = num_frames(audio.samples.size, L, S)
    if T == 0:
        raise InsufficientDataError("audio is shorter than one analysis frame")
    W = int(round(window_s * sr))
    min_lag = int(np.floor(sr / max_hz))
    max_lag = int(np.ceil(sr / min_hz))
    lags = np.arange(min_lag, max_lag + 1)
    x = audio.samples - audio.samples.mean()
    pad = W // 2 + max_lag + L
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    starts = pad + np.arange(T) * S + L // 2 - W // 2
    span = W + max_lag
    seg = xp[starts[:, None] + np.arange(span)[None, :]]
    head = seg[:, :W]
    nfft = 1 << (span + W - 1).bit_length()
    num = irfft(np.conj(rfft(head, nfft, axis=1)) * rfft(seg, nfft, axis=1), nfft, axis=1)
    num = num[:, lags]
    c = np.concatenate([np.zeros((T, 1)), np.cumsum(seg * seg, axis=1)], axis=1)
    e0 = c[:, W][:, None]
    e_lag = c[:, lags + W] - c[:, lags]
    denom = np.sqrt(e0 * e_lag)
    nccf = np.where(denom > 1e-12, num / np.maximum(denom, 1e-300), 0.0)
    return np.clip(nccf, -1.0, 1.0), lags


def _track_lags(nccf, lags, octave_bias=0.1, jump_cost=0.5):
    """Viterbi over candidate lags: local cost favours high, short-lag NCCF
    peaks, transitions penalise jumps in log-lag."""
    weight = 1.0 - octave_bias * lags / lags[-1]
    local = 1.0 - np.maximum(nccf, 0.0) * weight[None, :]
    loglag = np.log(lags)
    trans = jump_cost * np.abs(loglag[:, None] - loglag[None, :])
    T, K = local.shape
    cost = local[0].copy()
    back = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        total = cost[:, None] + trans
        back[t] = np.argmin(total, axis=0)
        cost = total[back[t], np.arange(K)] + local[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmin(cost))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def _refine_lag(row, k, lag):
    # parabolic interpolation around the chosen peak
    if 0 < k < row.size - 1:
        a, b, c = row[k - 1], row[k], row[k + 1]
        den = a - 2 * b + c
        if den < 0:
            return lag + 0.5 * (a - c) / den
    return float(lag)


def compute_pitch(audio, voicing_threshold=0.5, **kwargs):
    """Three pitch columns per 10 ms frame: ``pov``, ``logf0``, ``dlogf0``.

    ``pov`` is the normalised autocorrelation at the tracked lag (a
    probability-of-voicing surrogate).  Unvoiced frames take ``logf0``
    interpolated from voiced neighbours.
    """
    nccf, lags = nccf_frames(audio, **kwargs)
    path = _track_lags(nccf, lags)
    T = nccf.shape[0]
    pov = np.clip(nccf[np.arange(T), path], 0.0, 1.0)
    f0 = np.array([audio.sample_rate / _refine_lag(nccf[t], path[t], lags[path[t]])
                   for t in range(T)])
    logf0 = np.log(f0)
    voiced = pov >= voicing_threshold
    if voiced.any() and not voiced.all():
        t = np.arange(T)
        logf0 = np.interp(t, t[voiced], logf0[voiced])
    elif not voiced.any():
        logf0 = np.full(T, np.log(150.0))
    dlogf0 = np.gradient(logf0) if T > 1 else np.zeros(1)
    shift = kwargs.get("frame_shift_s", FRAME_SHIFT_S)
    length = kwargs.get("frame_length_s", FRAME_LENGTH_S)
    return FeatureMatrix(np.column_stack([pov, logf0, dlogf0]), PITCH_COLUMNS, shift, length)


# ---------------------------------------------------------------------------
# assembly and export

def assemble_features(parts, max_gap=2):
    """Column-wise concatenation of feature parts on one frame clock.

    ``parts`` holds :class:`FeatureMatrix` objects or ``(label, values)``
    pairs for single-column per-frame sequences.  All parts are truncated to
    the shortest one.
    """
    if not parts:
        raise ValueError("nothing to assemble")
    mats = []
    for p in parts:
        if isinstance(p, FeatureMatrix):
            mats.append(p)
        else:
            label, values = p
            mats.append(FeatureMatrix(np.asarray(values, dtype=np.float64)[:, None],
                                      (label,), parts[0].frame_shift_s
                                      if isinstance(parts[0], FeatureMatrix)
                                      else FRAME_SHIFT_S))
    ref = mats[0]
    for m in mats[1:]:
        if not np.isclose(m.frame_shift_s, ref.frame_shift_s, rtol=0, atol=1e-12):
            raise SynchronizationError(
                f"frame shift mismatch: {ref.column_labels[0]}.. at {ref.frame_shift_s} s "
                f"vs {m.column_labels[0]}.. at {m.frame_shift_s} s")
    lengths = [m.num_frames for m in mats]
    if max(lengths) - min(lengths) > max_gap:
        raise SynchronizationError(
            f"part lengths {lengths} differ by more than {max_gap} frames")
    T = min(lengths)
    labels = tuple(l for m in mats for l in m.column_labels)
    if len(set(labels)) != len(labels):
        dup = sorted({l for l in labels if labels.count(l) > 1})
        raise ValidationError(f"column label collision: {dup}")
    rows = np.concatenate([m.rows[:T] for m in mats], axis=1)
    return FeatureMatrix(rows, labels, ref.frame_shift_s, ref.frame_length_s)


def save_features_csv(fm, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(fm.column_labels) + "\n")
        for row in fm.rows:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def load_features_csv(path, frame_shift_s=FRAME_SHIFT_S, frame_length_s=FRAME_LENGTH_S):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    return FeatureMatrix(rows, tuple(header), frame_shift_s, frame_length_s)


_MAT_HEADER = struct.Struct("<II")


def write_matrix(path, rows):
    """Binary matrix: little-endian ``uint32 rows, uint32 cols`` then float32."""
    rows = np.asarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise DimensionError("binary matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_MAT_HEADER.pack(*rows.shape))
        fh.write(np.ascontiguousarray(rows).tobytes())


def read_matrix(path):
    with open(path, "rb") as fh:
        head = fh.read(_MAT_HEADER.size)
        if len(head) != _MAT_HEADER.size:
            raise FormatError(f"{path}: truncated matrix header")
        n, d = _MAT_HEADER.unpack(head)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * d:
        raise DimensionError(f"{path}: header says {n}x{d}, found {data.size} values")
    return data.reshape(n, d).astype(np.float64)


def save_features(fm, path):
    """Binary matrix plus a one-line ``.cols`` sidecar with labels and clock."""
    write_matrix(path, fm.rows)
    with open(path + ".cols", "w", encoding="utf-8") as fh:
        fh.write(f"{fm.frame_shift_s!r} {fm.frame_length_s!r} " + " ".join(fm.column_labels) + "\n")


def load_features(path):
    rows = read_matrix(path)
    try:
        with open(path + ".cols", encoding="utf-8") as fh:
            parts = fh.read().split()
        shift, length, labels = float(parts[0]), float(parts[1]), tuple(parts[2:])
    except FileNotFoundError:
        shift, length = FRAME_SHIFT_S, FRAME_LENGTH_S
        labels = tuple(f"f{i}" for i in range(rows.shape[1]))
    return FeatureMatrix(rows, labels, shift, length)
