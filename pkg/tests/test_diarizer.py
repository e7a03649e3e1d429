import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_labeling
from utipipe.acoustic_features import FeatureMatrix
from utipipe.diarizer import (VAD_OFFSET, DiarizerConfig, TurnTranscript, decode,
                              frame_accuracy, load_model, postprocess, save_model,
                              semi_supervised_retrain, train_ergodic, vad_diarize,
                              vad_eta_diarize, vad_segments)
from utipipe.errors import (DegenerateTrainingError, DimensionError, SynchronizationError,
                            ValidationError)
from utipipe.session_io import Segment, SegmentLabeling
from utipipe.synthgen import SynthConfig, generate_features_only

ABOVE, BELOW = 9.0 - VAD_OFFSET, 5.0 - VAD_OFFSET


def L(*triples):
    return SegmentLabeling(tuple(Segment(s, e, l) for s, e, l in triples))


def test_vad_all_silence():
    lab = vad_segments(np.full(30, BELOW))
    assert lab.labels == ["silence"]
    assert lab.segments[0].end_s == pytest.approx(0.3)


def test_vad_single_run():
    lab = vad_segments([BELOW, ABOVE, ABOVE, BELOW])
    speech = [s for s in lab if s.label == "speech"]
    assert len(speech) == 1 and speech[0].duration == pytest.approx(0.02)


def test_vad_offset_scale():
    # digital silence scores far below the threshold, full-scale speech far above
    assert np.log(1e-10) + VAD_OFFSET < -2
    assert np.log(400 * 0.1 ** 2) + VAD_OFFSET > 7


def test_vad_only_labels_child():
    assert set(vad_diarize([BELOW, ABOVE, ABOVE]).labels) == {"silence", "child"}


def test_vad_eta_rules():
    lab = vad_eta_diarize([BELOW, ABOVE, ABOVE], [0.9, 0.8, 0.3])
    assert lab.labels == ["silence", "child", "therapist"]
    with pytest.raises(SynchronizationError):
        vad_eta_diarize([ABOVE] * 3, [0.9] * 2)


def test_fusion_degenerates_to_vad():
    rng = np.random.default_rng(0)
    e = np.where(rng.random(80) < 0.5, ABOVE, BELOW)
    fused = vad_eta_diarize(e, np.ones(80))
    assert fused == vad_diarize(e)


def test_postprocess_merge():
    out = postprocess(L((0, 1.0, "child"), (1.0, 1.05, "silence"), (1.05, 2.0, "child")))
    assert out == L((0, 2.0, "child"))


def test_postprocess_keeps_long_gap():
    lab = L((0, 1.0, "child"), (1.0, 1.2, "silence"), (1.2, 2.0, "child"))
    assert postprocess(lab) == lab


def test_postprocess_drops_short():
    assert postprocess(L((0, 0.03, "therapist"))).labels == ["silence"]


def test_postprocess_merges_across_unlabelled_gap():
    assert postprocess(L((0, 1.0, "child"), (1.05, 2.0, "child"))) == L((0, 2.0, "child"))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_postprocess_idempotent(seed):
    rng = np.random.default_rng(seed)
    lab = random_labeling(rng, labels=("child", "therapist", "silence", "noise"),
                          n=int(rng.integers(1, 12)))
    once = postprocess(lab)
    assert postprocess(once) == once


def test_transcript_validation():
    with pytest.raises(ValidationError):
        TurnTranscript("u", ())
    with pytest.raises(ValidationError):
        TurnTranscript("u", ("child", "dog"))
    tr = TurnTranscript.from_labeling("u", L((0, 1, "child"), (1, 2, "silence"), (2, 3, "child"),
                                             (3, 4, "therapist")))
    assert tr.tokens == ("child", "therapist")


def test_single_token_ml_mean():
    rng = np.random.default_rng(4)
    feats = [FeatureMatrix(rng.normal(3.0, 2.0, (n, 3)), ["a", "b", "c"]) for n in (40, 55, 70)]
    cfg = DiarizerConfig(tokens=("child",), num_states=1, max_components=1, iterations=3)
    model = train_ergodic([(f, TurnTranscript("u", ("child",))) for f in feats], cfg)
    X = np.concatenate([f.rows for f in feats])
    np.testing.assert_allclose(model.gmm("child", 0).means[0], X.mean(axis=0), atol=1e-6)


def test_empty_and_missing_token():
    with pytest.raises(ValidationError):
        train_ergodic([])
    f = FeatureMatrix(np.zeros((20, 2)), ["a", "b"])
    with pytest.raises(DegenerateTrainingError, match="therapist"):
        train_ergodic([(f, TurnTranscript("u", ("child",)))])


def _data(n, seed=0, **kw):
    out = []
    for i in range(n):
        cfg = SynthConfig(seed=seed + i, **kw)
        tl, feats = generate_features_only(cfg)
        ref = SegmentLabeling.from_frame_labels(tl.tokens, 0.01)
        out.append((feats, TurnTranscript.from_labeling(f"u{i}", ref), tl.tokens))
    return out


@pytest.fixture(scope="module")
def trained():
    data = _data(12)
    cfg = DiarizerConfig(max_components=2, iterations=6)
    model = train_ergodic([(f, t) for f, t, _ in data], cfg)
    return model, data


def test_training_monotone_and_accurate(trained):
    model, data = trained
    h = np.array(model.log_likelihoods)
    assert np.all(np.diff(h) >= -1e-6 * np.abs(h[:-1]))
    assert frame_accuracy(model, [(f, tok) for f, _, tok in data]) >= 0.99
    np.testing.assert_allclose(model.decoding_graph().trans.sum(axis=1), 1.0, atol=1e-8)


def test_decode_dimension_check(trained):
    model, _ = trained
    with pytest.raises(DimensionError):
        decode(model, FeatureMatrix(np.zeros((10, 3)), ["a", "b", "c"]))


def test_decode_samples_of_one_token(trained):
    model, _ = trained
    rng = np.random.default_rng(9)
    g = model.gmm("therapist", 2)
    X = g.means[0] + rng.normal(size=(30, model.dim)) * np.sqrt(g.variances[0])
    feats = FeatureMatrix(X, model.feature_labels)
    assert decode(model, feats).labels == ["therapist"]


def test_model_roundtrip(tmp_path, trained):
    model, data = trained
    save_model(model, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    f = data[0][0]
    assert decode(back, f) == decode(model, f)
    np.testing.assert_array_equal(back.inter, model.inter)


def test_bad_model_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"nope")
    with pytest.raises(Exception, match="junk.bin"):
        load_model(p)


def test_retrain_without_child_keeps_child_model(trained):
    model, _ = trained
    # short therapist-first sessions that end before the child answers
    unlabeled = []
    for seed in (500, 504, 506):
        tl, feats = generate_features_only(SynthConfig(seed=seed, duration_s=2.0,
                                                       p_child_first=0.0))
        assert "child" not in tl.tokens
        assert "child" not in decode(model, feats).labels
        unlabeled.append(feats)
    new = semi_supervised_retrain(model, unlabeled, DiarizerConfig(retrain_iterations=2))
    for s in range(model.num_states):
        a, b = model.gmm("child", s), new.gmm("child", s)
        np.testing.assert_allclose(a.means, b.means, atol=1e-8)
        np.testing.assert_allclose(a.variances, b.variances, atol=1e-8)


def test_retrain_deterministic(trained):
    model, _ = trained
    unlabeled = [f for f, _, _ in _data(3, seed=700)]
    cfg = DiarizerConfig(retrain_iterations=2)
    a = semi_supervised_retrain(model, unlabeled, cfg)
    b = semi_supervised_retrain(model, unlabeled, cfg)
    for ga, gb in zip(a.pdfs.gmms, b.pdfs.gmms):
        np.testing.assert_array_equal(ga.means, gb.means)
