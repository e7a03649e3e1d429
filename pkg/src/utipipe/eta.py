"""Estimated tongue activity (ETA).

For every position of a sliding window over the ultrasound frames, take the
temporal variance of each echo return and average it over the whole frame.
Fast tongue movement changes the image quickly and shows up as high ETA;
while the child is quiet (or the therapist is talking) the image barely moves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ValidationError
from .session_io import SegmentLabeling, Segment

DEFAULT_WINDOW_S = 0.16
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class EtaSignal:
    values: np.ndarray
    window_s: float = DEFAULT_WINDOW_S
    hop_frames: int = 1
    fps: float = 121.2
    start_offset_s: float = 0.0
    normalized: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValidationError("ETA needs a non-empty 1-D value array")
        if not np.all(np.isfinite(values)):
            raise ValidationError("ETA values must be finite")
        if self.normalized:
            if values.min() < 0 or values.max() > 1:
                raise ValidationError("normalized ETA values must lie in [0, 1]")
        elif values.min() < 0:
            raise ValidationError("raw ETA values must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    @property
    def step_s(self):
        return self.hop_frames / self.fps

    @property
    def centers(self):
        """Audio-clock time of every window center."""
        return self.start_offset_s + np.arange(self.values.size) * self.step_s

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t_center_s,value\n")
            for t, v in zip(self.centers, self.values):
                fh.write(f"{t:.6f},{v:.9g}\n")


def window_frames(window_s, fps):
    return int(np.rint(window_s * fps))


def compute_eta(seq, window_s=DEFAULT_WINDOW_S, hop_frames=1):
    """Mean over echo returns of the per-return population variance.

    Returns one value per window position; the window spans
    ``W = round(window_s * fps)`` frames and advances ``hop_frames`` at a time.
    """
    frames = seq.frames
    T = frames.shape[0]
    W = window_frames(window_s, seq.fps)
    if W < 2:
        raise ValidationError(f"window of {window_s} s is {W} frame(s); need at least 2")
    if hop_frames < 1:
        raise ValidationError(f"hop_frames must be >= 1, got {hop_frames}")
    if T < W:
        raise InsufficientDataError(
            f"sequence has T={T} frames, shorter than the window W={W}")

    starts = np.arange(0, T - W + 1, hop_frames)
    x = seq.frames.reshape(T, -1).astype(np.float64)
    P = x.shape[1]
    # centring per echo return keeps the two sums below well conditioned
    x -= x.mean(axis=0)
    # sum over returns of sum_w x^2: cumulative per-frame energies
    energy = np.concatenate([[0.0], np.cumsum(np.einsum("ij,ij->i", x, x))])
    sum_sq = energy[starts + W] - energy[starts]
    # sum over returns of (sum_w x)^2: running window sums
    norm_sq = np.empty(starts.size)
    window = x[:W].sum(axis=0)
    pos = 0
    for i, s in enumerate(starts):
        while pos < s:
            window += x[pos + W] - x[pos]
            pos += 1
        norm_sq[i] = window @ window
    total = np.maximum(sum_sq / W - norm_sq / (W * W), 0.0)
    values = total / P
    return EtaSignal(values, window_s, hop_frames, seq.fps,
                     seq.sync_offset_s + (W - 1) / (2.0 * seq.fps), False)


def normalize_unity(sig):
    """Per-utterance min-max scaling to [0, 1]; constant signals map to zeros."""
    if sig.normalized:
        raise ValidationError("ETA signal is already normalized")
    v = sig.values
    lo, hi = v.min(), v.max()
    out = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    return EtaSignal(out, sig.window_s, sig.hop_frames, sig.fps,
                     sig.start_offset_s, True)


def _require_normalized(sig):
    if not sig.normalized:
        raise ValidationError("expected a unity-normalized ETA signal")


def eta_activity(sig, threshold=DEFAULT_THRESHOLD):
    """Tongue activity detection: ``value >= threshold`` is active."""
    _require_normalized(sig)
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    active = sig.values >= threshold
    centers = sig.centers
    half = sig.step_s / 2.0
    # one shared boundary per change point so neighbours never overlap
    edges = np.round(np.append(centers - half, centers[-1] + half), 9)
    change = np.flatnonzero(np.diff(active.astype(np.int8))) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [active.size]])
    segs = [Segment(float(edges[a]), float(edges[b]), "active" if active[a] else "inactive")
            for a, b in zip(starts, ends)]
    return SegmentLabeling(tuple(segs))


def nearest_index(centers, times):
    """Index of the nearest center for each time; ties go to the earlier one."""
    centers = np.asarray(centers, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    right = np.clip(np.searchsorted(centers, times, side="left"), 0, centers.size - 1)
    left = np.clip(right - 1, 0, centers.size - 1)
    take_left = np.abs(times - centers[left]) <= np.abs(centers[right] - times)
    return np.where(take_left, left, right)


def eta_frame_feature(sig, frame_shift_s, num_frames, frame_offset_s=None):
    """Resample ETA onto an acoustic frame clock by nearest window center.

    Acoustic frame ``i`` sits at ``frame_offset_s + i * frame_shift_s``; the
    default offset puts it at the middle of ``[i*shift, (i+1)*shift)``.
    """
    _require_normalized(sig)
    if num_frames <= 0:
        raise ValueError("num_frames must be positive")
    if frame_offset_s is None:
        frame_offset_s = frame_shift_s / 2.0
    times = frame_offset_s + np.arange(num_frames) * frame_shift_s
    return sig.values[nearest_index(sig.centers, times)]
