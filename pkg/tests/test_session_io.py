import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_labeling
from utipipe.errors import DimensionError, ParseError, ValidationError
from utipipe.session_io import (FRAME_SHAPE, AudioTrack, Prompt, Segment, SegmentLabeling,
                                UltrasoundSequence, format_segments, load_segments,
                                load_session, load_ultrasound, parse_segments, read_params,
                                save_segments, save_session, save_ultrasound,
                                ultrasound_frame_at, write_params)
from utipipe.synthgen import generate_session


def test_raw_file_size_arithmetic(tmp_path):
    raw = np.zeros((3,) + FRAME_SHAPE, dtype=np.uint8)
    raw[0, 0, 0] = 255
    path = tmp_path / "a.ult"
    raw.tofile(path)
    write_params(tmp_path / "a.param", 121.2, 0.0)
    seq = load_ultrasound(str(path))
    assert len(seq) == 3
    assert seq.frames[0, 0, 0] == 1.0
    assert seq.frames[1, 5, 5] == 0.0


def test_truncated_raw_file_names_sizes(tmp_path):
    path = tmp_path / "bad.ult"
    np.zeros(63 * 412 + 7, dtype=np.uint8).tofile(path)
    write_params(tmp_path / "bad.param", 100.0, 0.0)
    with pytest.raises(DimensionError, match="25956"):
        load_ultrasound(str(path))


def test_params_accept_corpus_names(tmp_path):
    p = tmp_path / "x.param"
    p.write_text("NumVectors=63\nPixPerVector=412\nFramesPerSec=121.5\n"
                 "TimeInSecsOfFirstFrame=0.2\n")
    meta = read_params(str(p))
    assert meta["fps"] == pytest.approx(121.5)
    assert meta["sync_offset_s"] == pytest.approx(0.2)


def test_ultrasound_roundtrip(tmp_path, rng):
    raw = rng.integers(0, 256, (4,) + FRAME_SHAPE, dtype=np.uint8)
    seq = UltrasoundSequence.from_bytes(raw, 100.0, 0.25)
    save_ultrasound(seq, str(tmp_path / "u.ult"))
    assert load_ultrasound(str(tmp_path / "u.ult")) == seq
    np.testing.assert_array_equal(seq.to_bytes(), raw)


def test_bad_frame_shape():
    with pytest.raises(DimensionError):
        UltrasoundSequence(np.zeros((2, 62, 412)))


def test_segment_format_line():
    lab = SegmentLabeling((Segment(0.0, 1.0, "child"),))
    assert format_segments(lab) == "0.000\t1.000\tchild\n"


def test_overlap_rejected_on_load(tmp_path):
    p = tmp_path / "s.seg"
    p.write_text("0\t2\tchild\n1\t3\ttherapist\n")
    with pytest.raises(ValidationError, match="overlap"):
        load_segments(str(p))


def test_parse_error_has_line_number():
    with pytest.raises(ParseError) as err:
        parse_segments("0\t1\tchild\n0.5 oops\n")
    assert err.value.line_number == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_segments_roundtrip(tmp_path_factory, seed):
    lab = random_labeling(np.random.default_rng(seed))
    path = tmp_path_factory.mktemp("seg") / "x.seg"
    save_segments(lab, str(path))
    back = load_segments(str(path))
    assert back.labels == lab.labels
    for a, b in zip(back, lab):
        assert abs(a.start_s - b.start_s) <= 0.001 and abs(a.end_s - b.end_s) <= 0.001


def test_frame_at_origin_rounding_and_clamp():
    seq = UltrasoundSequence(np.zeros((20,) + FRAME_SHAPE, np.float32), 100.0, 0.0)
    assert ultrasound_frame_at(seq, 0.0) == 0
    # 0.105 s is 10.5 frames; the half goes to the even neighbour
    assert ultrasound_frame_at(seq, 0.105) == 10
    assert ultrasound_frame_at(seq, 0.114) == 11
    assert ultrasound_frame_at(seq, 50.0) == 19
    shifted = UltrasoundSequence(np.zeros((5,) + FRAME_SHAPE, np.float32), 100.0, 0.3)
    assert ultrasound_frame_at(shifted, 0.3) == 0


def test_labeling_invariants():
    with pytest.raises(ValidationError):
        SegmentLabeling((Segment(1.0, 1.0, "child"),))
    with pytest.raises(ValidationError):
        SegmentLabeling((Segment(1.0, 2.0, "child"), Segment(0.0, 0.5, "child")))


def test_frame_label_roundtrip():
    labels = ["silence"] * 3 + ["child"] * 4 + ["therapist"] * 2
    lab = SegmentLabeling.from_frame_labels(labels, 0.01)
    assert lab.labels == ["silence", "child", "therapist"]
    assert list(lab.to_frame_labels(9, 0.01)) == labels
    assert lab.tiles(0.0, 0.09)


def test_prompt_validation():
    with pytest.raises(ValidationError):
        Prompt(())
    p = Prompt(("cat", "dog"))
    assert p.oov_words({"cat"}) == ["dog"]


def test_session_roundtrip(tmp_path, synth_config):
    synth = generate_session(synth_config, "s1", "spk1", "baseline")
    paths = save_session(synth.session, str(tmp_path / "s1"))
    back = load_session(paths, {"session_id": "s1", "speaker_id": "spk1", "stage": "baseline"})
    assert back == synth.session


def test_session_span_check(rng):
    us = UltrasoundSequence(np.zeros((300,) + FRAME_SHAPE, np.float32), 100.0)
    from utipipe.session_io import Session
    with pytest.raises(ValidationError):
        Session(us, AudioTrack(np.zeros(16000)), Prompt(("a",)))
