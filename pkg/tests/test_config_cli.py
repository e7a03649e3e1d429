import csv

import numpy as np
import pytest

from utipipe.acoustic_features import read_matrix, write_matrix
from utipipe.cli import build_parser, main
from utipipe.config import KEYS, RunConfig, load_config, parse_config_text
from utipipe.errors import ParseError, ValidationError


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults():
    cfg = RunConfig()
    assert cfg["vad.threshold"] == 7.0
    assert cfg["eta.threshold"] == 0.5
    assert cfg["eta.window_s"] == 0.16
    assert cfg["post.merge_gap_s"] == 0.1 and cfg["post.min_dur_s"] == 0.05
    assert cfg["eval.collar_s"] == 0.1
    assert cfg["align.context"] == 4
    assert cfg["combine.alpha"] in (0.6, 0.7)


def test_unknown_key_rejected():
    with pytest.raises(ValidationError, match="unknown"):
        RunConfig({"vad.treshold": 7})
    with pytest.raises(ValidationError):
        load_config(overrides=["nope.key=1"])


def test_range_and_type_checks():
    with pytest.raises(ValidationError):
        RunConfig({"eta.threshold": "1.5"})
    with pytest.raises(ValidationError):
        RunConfig({"align.context": "four"})
    with pytest.raises(ValidationError):
        RunConfig({"combine.alphas": "0.5,1.2"})
    assert RunConfig({"eta.normalize": "off"})["eta.normalize"] is False


def test_sections_and_comments():
    pairs = parse_config_text("# c\n[vad]\nthreshold = 6.5  # lower\neta.threshold=0.4\n")
    assert [(n, v) for n, v, _ in pairs] == [("vad.threshold", "6.5"), ("eta.threshold", "0.4")]
    with pytest.raises(ParseError):
        parse_config_text("just words")


def test_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("vad.threshold = 6\neta.threshold = 0.3\n")
    cfg = load_config(str(path), ["eta.threshold=0.7"])
    assert cfg["vad.threshold"] == 6.0
    assert cfg["eta.threshold"] == 0.7
    assert cfg["post.min_dur_s"] == 0.05


def test_bad_config_file_names_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("vad.threshold = 6\nmystery = 1\n")
    with pytest.raises(ParseError) as info:
        load_config(str(path))
    assert "line 2" in str(info.value) or ":2" in str(info.value)


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--n", "1", "--out", str(tmp_path), "--set", "bogus=1"])
    assert info.value.code == 2


def test_help_lists_every_key(capsys):
    for cmd in (["--help"], ["diarize", "--help"], ["eval", "--help"]):
        with pytest.raises(SystemExit) as info:
            main(cmd)
        assert info.value.code == 0
        out = capsys.readouterr().out
        for k in KEYS:
            assert k.name in out
    assert "vad.threshold = 7" in build_parser().format_help()


def test_processing_error_exits_1(tmp_path, capsys):
    code = main(["diarize", "vad", "--manifest", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "h")])
    assert code == 1
    assert "diarize" in capsys.readouterr().err


def test_failing_session_named(tmp_path, capsys):
    d = tmp_path / "d"
    assert main(["synth", "--n", "2", "--out", str(d), "--set", "synth.duration_s=2"]) == 0
    (d / "s001.wav").write_bytes(b"RIFFjunk")
    code = main(["diarize", "vad", "--manifest", str(d / "manifest.csv"), "--out",
                 str(tmp_path / "h")])
    err = capsys.readouterr().err
    assert code == 1 and "s001" in err and "diarize vad" in err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--n", "3", "--out", str(d / "d"), "--set", "synth.duration_s=4"]) == 0
    return d


def test_pipeline_smoke(corpus):
    d, h = corpus / "d", corpus / "h"
    assert main(["diarize", "vad-eta", "--manifest", str(d / "manifest.csv"),
                 "--out", str(h)]) == 0
    out = corpus / "report.csv"
    assert main(["eval", "diar", "--ref", str(d), "--hyp", str(h), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert "der" in rows[0]
    assert [r["utt"] for r in rows] == ["s000", "s001", "s002", "ALL"]
    assert all(0.0 <= float(r["der"]) < 100.0 for r in rows)


def test_eval_group_by_stage(corpus):
    d, h = corpus / "d", corpus / "h"
    main(["diarize", "vad-eta", "--manifest", str(d / "manifest.csv"), "--out", str(h)])
    out = corpus / "by_stage.csv"
    assert main(["eval", "diar", "--ref", str(d), "--hyp", str(h), "--out", str(out),
                 "--group-by", "stage"]) == 0
    rows = read_csv(out)
    stages = [r["stage"] for r in rows]
    assert stages == sorted({r["stage"] for r in read_csv(d / "manifest.csv")})
    assert len(rows) == 3


def test_eta_traces_and_combine(corpus, tmp_path):
    d = corpus / "d"
    assert main(["eta", "--manifest", str(d / "manifest.csv"), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "s000.eta.csv")
    vals = np.array([float(r["value"]) for r in rows])
    assert vals.min() == 0.0 and vals.max() == 1.0
    a, b = tmp_path / "a.post", tmp_path / "b.post"
    write_matrix(str(a), np.array([[0.2, 0.8], [0.5, 0.5]]))
    write_matrix(str(b), np.array([[0.6, 0.4], [1.0, 0.0]]))
    assert main(["combine", "--a", str(a), "--b", str(b), "--alpha", "0.5",
                 "--out", str(tmp_path / "c.post")]) == 0
    np.testing.assert_allclose(read_matrix(str(tmp_path / "c.post")), [[0.4, 0.6], [0.75, 0.25]])


def test_jobs_must_be_positive(corpus):
    with pytest.raises(SystemExit) as info:
        main(["eta", "--manifest", "x", "--out", "y", "--jobs", "0"])
    assert info.value.code == 2


def test_parallel_matches_serial(corpus, tmp_path):
    d = corpus / "d"
    for jobs, out in ((1, "one"), (3, "three")):
        assert main(["diarize", "vad-eta", "--manifest", str(d / "manifest.csv"),
                     "--out", str(tmp_path / out), "--jobs", str(jobs)]) == 0
    for sid in ("s000", "s001", "s002"):
        assert ((tmp_path / "one" / f"{sid}.seg").read_bytes()
                == (tmp_path / "three" / f"{sid}.seg").read_bytes())


@pytest.mark.slow
def test_full_command_chain(tmp_path):
    d = tmp_path / "d"
    small_cnn = ["--set", "cnn.c1=2", "--set", "cnn.c2=3", "--set", "cnn.h1=16",
                 "--set", "cnn.h2=8", "--set", "cnn.epochs=1", "--set", "cnn.frame_stride=8"]
    fast = ["--set", "diarizer.max_components=2", "--set", "diarizer.iterations=4",
            "--set", "align.mlp_epochs=3"]
    m = str(d / "manifest.csv")
    steps = [
        ["synth", "--n", "4", "--out", str(d), "--set", "synth.duration_s=4"],
        ["train-diarizer", "--manifest", m, "--out", str(tmp_path / "diar.bin"),
         "--unlabeled", m] + fast,
        ["diarize", "hmm", "--manifest", m, "--model", str(tmp_path / "diar.bin"),
         "--out", str(tmp_path / "hmm")],
        ["train-embedder", "--manifest", m, "--out", str(tmp_path / "cnn.bin")] + small_cnn,
        ["embed", "--manifest", m, "--model", str(tmp_path / "cnn.bin"),
         "--out", str(tmp_path / "emb")],
        ["decode-oracle", "--manifest", m, "--out", str(tmp_path / "dec"),
         "--embeddings", str(tmp_path / "emb")] + fast,
        ["eval", "diar", "--ref", str(d), "--hyp", str(tmp_path / "hmm"),
         "--out", str(tmp_path / "hmm.csv")],
        ["eval", "wer", "--ref", str(d), "--hyp", str(tmp_path / "dec"),
         "--out", str(tmp_path / "wer.csv"), "--group-by", "speaker"],
        ["report", str(tmp_path / "hmm.csv"), str(tmp_path / "wer.csv"),
         "--out", str(tmp_path / "summary.csv")],
    ]
    for step in steps:
        assert main(step) == 0, step[0]
    assert float(read_csv(tmp_path / "hmm.csv")[-1]["der"]) < 20.0
    sweep = read_csv(tmp_path / "dec" / "sweep.csv")
    assert len(sweep) == 11
    assert {r["system"] for r in read_csv(tmp_path / "summary.csv")} == {"hmm", "wer"}
    post = read_matrix(str(tmp_path / "dec" / "s000.postA"))
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-5)
