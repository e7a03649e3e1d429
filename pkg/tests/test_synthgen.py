import csv
import os

import numpy as np
import pytest

from conftest import eta_token_means
from utipipe.cli import read_manifest
from utipipe.errors import ValidationError
from utipipe.eta import compute_eta
from utipipe.session_io import load_segments, load_session
from utipipe.synthgen import (MANIFEST_FIELDS, SynthConfig, generate_corpus,
                              generate_features_only, generate_session, generate_word_utterance,
                              session_seeds, world_for)


@pytest.fixture(scope="module")
def synth():
    return generate_session(SynthConfig(seed=3))


def test_same_seed_bit_identical(synth):
    again = generate_session(SynthConfig(seed=3))
    assert again.session == synth.session
    np.testing.assert_array_equal(again.features.rows, synth.features.rows)
    np.testing.assert_array_equal(again.articulation, synth.articulation)
    assert again.transcript == synth.transcript


def test_different_seed_differs(synth):
    other = generate_session(SynthConfig(seed=4))
    assert other.session.reference != synth.session.reference


def test_zero_therapist_variance_without_child_gives_zero_eta():
    cfg = SynthConfig(seed=11, duration_s=2.0, p_child_first=0.0, sigma_therapist=0.0)
    s = generate_session(cfg)
    assert "child" not in s.session.reference.labels
    assert np.all(compute_eta(s.session.ultrasound).values == 0.0)


def test_child_eta_exceeds_therapist(synth):
    child, therapist = eta_token_means(synth.session)
    assert child > 10 * therapist


def test_pixel_variance_contract():
    for seed in range(5):
        s = generate_session(SynthConfig(seed=seed))
        us = s.session.ultrasound
        t = us.sync_offset_s + np.arange(us.frames.shape[0]) / us.fps
        lab = np.array([s.session.reference.label_at(x, "silence") for x in t])
        frames = us.frames.astype(np.float64)
        var = lambda m: frames[m].var(axis=0).mean()
        assert var(lab == "child") > var(lab == "therapist")


def test_reference_tiles_session(synth):
    ref = synth.session.reference
    assert ref.tiles(0.0, SynthConfig().duration_s)
    assert set(ref.labels) <= {"child", "therapist", "silence", "noise"}


def test_words_inside_child_turns(synth):
    ref = synth.session.reference
    for w in synth.words:
        assert ref.label_at((w.start_s + w.end_s) / 2) == "child"
    assert list(synth.session.prompt.target_words) == synth.words.labels


def test_articulation_labels_per_frame(synth):
    assert synth.articulation.shape == (synth.session.ultrasound.frames.shape[0],)
    assert synth.articulation.min() >= 0
    assert synth.articulation.max() < SynthConfig().num_classes


def test_features_follow_timeline():
    tl, feats = generate_features_only(SynthConfig(seed=2))
    assert feats.num_frames == tl.tokens.size
    s = generate_session(SynthConfig(seed=2))
    np.testing.assert_array_equal(feats.rows, s.features.rows)


def test_word_utterance_words_and_clock():
    feats, lab, words = generate_word_utterance(SynthConfig(seed=5))
    assert lab.labels == words
    assert lab.end_s < feats.num_frames * 0.01
    lex = world_for(SynthConfig()).lexicon
    with pytest.raises(ValidationError):
        generate_word_utterance(SynthConfig(seed=5), words=["notaword"])
    assert all(w in lex for w in words)


def test_invalid_configs():
    with pytest.raises(ValidationError):
        SynthConfig(sigma_child=0.01, sigma_therapist=0.1)
    with pytest.raises(ValidationError):
        SynthConfig(duration_s=0.0)
    with pytest.raises(ValidationError):
        SynthConfig(p_child_first=1.5)
    with pytest.raises(ValidationError, match="does not fit"):
        generate_session(SynthConfig(duration_s=0.3, sync_offset_s=0.0))


def test_session_seeds_independent_and_stable():
    a = session_seeds(7, 5)
    assert a == session_seeds(7, 5)
    assert len(set(a)) == 5
    assert session_seeds(7, 3) == a[:3]


def test_corpus_roundtrip(tmp_path):
    manifest = generate_corpus(SynthConfig(seed=1, duration_s=3.0), 3, str(tmp_path))
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and list(rows[0]) == list(MANIFEST_FIELDS)
    assert os.path.exists(tmp_path / "lexicon.txt")
    loaded = read_manifest(manifest)
    for i, row in enumerate(loaded):
        paths = {"ultrasound": row["ultrasound_path"], "audio": row["audio_or_feature_path"],
                 "prompt": row["prompt_path"], "segments": row["segments_path"]}
        sess = load_session(paths, {"session_id": row["session_id"]})
        assert sess.reference.tiles(0.0, 3.0)
        assert sess.ultrasound.frames.shape[0] > 0
        seed = session_seeds(1, 3)[i]
        want = generate_session(SynthConfig(seed=seed, duration_s=3.0))
        assert sess.ultrasound == want.session.ultrasound
        assert load_segments(row["stem"] + ".words") == want.words
    assert {r["speaker_id"] for r in rows} == {"spk0", "spk1", "spk2"}


def test_corpus_needs_a_session(tmp_path):
    with pytest.raises(ValidationError):
        generate_corpus(SynthConfig(), 0, str(tmp_path))
