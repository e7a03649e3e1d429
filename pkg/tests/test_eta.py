import numpy as np
import pytest

from conftest import random_sequence
from oracles import eta_bruteforce
from utipipe.errors import InsufficientDataError, ValidationError
from utipipe.eta import (EtaSignal, compute_eta, eta_activity, eta_frame_feature,
                         nearest_index, normalize_unity, window_frames)
from utipipe.session_io import FRAME_SHAPE, UltrasoundSequence


def test_constant_frames_give_zero():
    seq = UltrasoundSequence(np.full((40,) + FRAME_SHAPE, 0.3, np.float32))
    sig = compute_eta(seq)
    assert np.all(sig.values == 0.0)


def test_hand_variance_example():
    # values (0, 3, 0) at every pixel: population variance 2
    frames = np.zeros((3,) + FRAME_SHAPE, np.float32)
    frames[1] = 3.0
    seq = UltrasoundSequence(frames, fps=3 / 0.16)
    sig = compute_eta(seq)
    assert window_frames(0.16, seq.fps) == 3
    np.testing.assert_allclose(sig.values, [2.0], rtol=1e-12)


def test_matches_bruteforce(rng):
    seq = random_sequence(rng, 50)
    sig = compute_eta(seq, hop_frames=3)
    W = window_frames(0.16, seq.fps)
    np.testing.assert_allclose(sig.values, eta_bruteforce(seq.frames, W, 3), rtol=1e-10)


def test_pixel_permutation_invariance(rng):
    seq = random_sequence(rng, 30)
    perm = rng.permutation(np.prod(FRAME_SHAPE))
    shuffled = seq.frames.reshape(30, -1)[:, perm].reshape(seq.frames.shape)
    a = compute_eta(seq).values
    b = compute_eta(UltrasoundSequence(shuffled, seq.fps)).values
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_window_center_timing(rng):
    seq = random_sequence(rng, 30, fps=100.0, sync=0.2)
    sig = compute_eta(seq)
    W = 16
    assert len(sig) == 30 - W + 1
    assert sig.centers[0] == pytest.approx(0.2 + (W - 1) / 200.0)
    assert sig.step_s == pytest.approx(0.01)


def test_too_short_and_bad_window(rng):
    with pytest.raises(InsufficientDataError):
        compute_eta(random_sequence(rng, 5))
    with pytest.raises(ValidationError):
        compute_eta(random_sequence(rng, 30), window_s=0.001)


def test_normalize_examples():
    out = normalize_unity(EtaSignal([2.0, 4.0, 6.0]))
    np.testing.assert_allclose(out.values, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(normalize_unity(EtaSignal([5.0, 5.0, 5.0])).values, 0.0)
    with pytest.raises(ValidationError):
        normalize_unity(out)


def test_normalize_range(rng):
    out = normalize_unity(EtaSignal(rng.random(100) * 7))
    assert out.values.min() == 0.0 and out.values.max() == 1.0


def test_activity_examples():
    zero = EtaSignal(np.zeros(5), fps=100.0, normalized=True)
    lab = eta_activity(zero)
    assert lab.labels == ["inactive"]
    sig = EtaSignal([0.0, 1.0, 1.0, 0.0], fps=100.0, normalized=True)
    active = [s for s in eta_activity(sig) if s.label == "active"]
    assert len(active) == 1
    assert active[0].duration == pytest.approx(0.02)
    assert active[0].start_s == pytest.approx(sig.centers[1] - 0.005)
    assert eta_activity(sig, threshold=0.0).labels == ["active"]


def test_frame_feature_identity_clock():
    sig = EtaSignal(np.linspace(0, 1, 20), fps=100.0, normalized=True, start_offset_s=0.005)
    np.testing.assert_array_equal(eta_frame_feature(sig, 0.01, 20), sig.values)


def test_frame_feature_constant():
    sig = EtaSignal(np.full(50, 0.25), fps=121.2, normalized=True)
    np.testing.assert_array_equal(eta_frame_feature(sig, 0.01, 37), 0.25)


def test_frame_feature_nearest_center(rng):
    sig = EtaSignal(rng.random(200), fps=121.2, normalized=True, start_offset_s=0.07)
    feat = eta_frame_feature(sig, 0.01, 150)
    centers = sig.centers
    for i in range(150):
        t = 0.005 + i * 0.01
        d = np.abs(centers - t)
        j = int(np.flatnonzero(d == d.min())[0])   # earliest on ties
        assert feat[i] == sig.values[j]


def test_nearest_index_tie_goes_left():
    assert nearest_index([0.0, 1.0], [0.5])[0] == 0
    assert nearest_index([0.0, 1.0], [-3.0, 7.0]).tolist() == [0, 1]
