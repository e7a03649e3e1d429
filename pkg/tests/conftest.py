import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from utipipe.session_io import FRAME_SHAPE, Segment, SegmentLabeling, UltrasoundSequence
from utipipe.synthgen import SynthConfig


@pytest.fixture(scope="session")
def synth_config():
    return SynthConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_sequence(rng, T, fps=121.2, sync=0.0):
    return UltrasoundSequence(rng.random((T,) + FRAME_SHAPE, dtype=np.float32), fps, sync)


def random_labeling(rng, labels=("child", "therapist", "silence"), n=None, ms=True,
                    gaps=True, start=0.0):
    """Sorted, non-overlapping segments on a millisecond grid."""
    n = n or int(rng.integers(1, 8))
    t = start
    segs = []
    for _ in range(n):
        if gaps and rng.random() < 0.3:
            t += int(rng.integers(1, 300)) / 1000.0
        d = int(rng.integers(10, 800)) / 1000.0
        segs.append(Segment(round(t, 3), round(t + d, 3), str(rng.choice(labels))))
        t = round(t + d, 3)
    return SegmentLabeling(tuple(segs))


def small_synth(**kw):
    return replace(SynthConfig(), **kw)


def vad_eta_hypothesis(session, post=True):
    """VAD+ETA diarization of an in-memory session at default settings."""
    from utipipe.acoustic_features import frame_log_energy
    from utipipe.diarizer import postprocess, vad_eta_diarize
    from utipipe.eta import compute_eta, eta_frame_feature, normalize_unity

    energy = frame_log_energy(session.audio)
    eta = eta_frame_feature(normalize_unity(compute_eta(session.ultrasound)), 0.01, energy.size)
    hyp = vad_eta_diarize(energy, eta, total_duration_s=session.audio.duration_s)
    return postprocess(hyp) if post else hyp


def eta_token_means(session):
    """Mean raw ETA over windows centred in child and in therapist speech."""
    from utipipe.eta import compute_eta

    sig = compute_eta(session.ultrasound)
    labels = session.reference.to_frame_labels(int(np.ceil(session.audio.duration_s / 0.01)), 0.01)
    idx = np.minimum((sig.centers / 0.01).astype(int), labels.size - 1)
    at = labels[idx]
    return sig.values[at == "child"].mean(), sig.values[at == "therapist"].mean()
