"""Command-line entry point: ``utipipe <command> ...``.

Exit status is 0 on success, 2 on a usage error and 1 when processing
fails; the diagnostic names the stage and the input that failed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import aligner, diarizer, embedder, metrics, synthgen
from .acoustic_features import (assemble_features, compute_mfcc, compute_pitch,
                                frame_log_energy, load_features, read_matrix, write_matrix)
from .config import describe_keys, load_config
from .errors import FormatError, UtipipeError, ValidationError
from .eta import compute_eta, eta_frame_feature, nearest_index, normalize_unity
from .session_io import load_audio, load_prompt, load_segments, load_ultrasound, save_segments

log = logging.getLogger("utipipe")


class StageError(Exception):
    def __init__(self, stage, source, cause):
        super().__init__(f"{stage} failed on {source}: {cause}")


# ---------------------------------------------------------------------------
# corpus helpers


def read_manifest(path):
    """Manifest rows with every ``*_path`` resolved against the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(synthgen.MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: manifest lacks columns {sorted(missing)}")
        rows = []
        for row in reader:
            row = dict(row)
            for k in list(row):
                if k.endswith("_path") and row[k]:
                    row[k] = os.path.join(base, row[k])
            row["stem"] = os.path.splitext(row["ultrasound_path"])[0]
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: manifest lists no sessions")
    return rows


def _manifest_in(directory):
    path = directory if directory.endswith(".csv") else os.path.join(directory, "manifest.csv")
    return read_manifest(path)


def _run(jobs, fn, rows, stage):
    def guarded(row):
        try:
            return fn(row)
        except (UtipipeError, OSError, ValueError, ArithmeticError) as exc:
            raise StageError(stage, row.get("session_id", "?"), exc) from exc

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(guarded, rows))
    return [guarded(r) for r in rows]


def _ultrasound(row):
    return load_ultrasound(row["ultrasound_path"])


def _audio_path(row):
    p = row["audio_or_feature_path"]
    return p if p.endswith(".wav") else row["stem"] + ".wav"


def _eta_feature(row, cfg, num_frames):
    sig = compute_eta(_ultrasound(row), cfg["eta.window_s"])
    if cfg["eta.normalize"]:
        return eta_frame_feature(normalize_unity(sig), 0.01, num_frames)
    times = (np.arange(num_frames) + 0.5) * 0.01
    return sig.values[nearest_index(sig.centers, times)]


def acoustic_features(row, cfg, kind=None):
    kind = kind or cfg["diarizer.features"]
    if kind == "feats":
        return load_features(row["stem"] + ".feats")
    audio = load_audio(_audio_path(row))
    return assemble_features([compute_mfcc(audio), compute_pitch(audio)])


def _ref_words(row):
    return load_segments(row["stem"] + ".words")


def _out_path(out_dir, row, suffix):
    return os.path.join(out_dir, row["session_id"] + suffix)


def _write_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    config = synthgen.SynthConfig(
        seed=args.seed, duration_s=cfg["synth.duration_s"],
        sigma_child=cfg["synth.sigma_child"], sigma_therapist=cfg["synth.sigma_therapist"],
        num_words=cfg["synth.num_words"], num_classes=cfg["synth.num_classes"],
        feature_noise=cfg["synth.feature_noise"], noise_prob=cfg["synth.noise_prob"])
    try:
        path = synthgen.generate_corpus(config, args.n, args.out, args.num_speakers)
    except (UtipipeError, OSError) as exc:
        raise StageError("synth", args.out, exc) from exc
    print(path)


def cmd_eta(args, cfg):
    rows = read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)

    def one(row):
        sig = compute_eta(_ultrasound(row), cfg["eta.window_s"])
        if cfg["eta.normalize"]:
            sig = normalize_unity(sig)
        sig.to_csv(_out_path(args.out, row, ".eta.csv"))

    _run(args.jobs, one, rows, "eta")


def cmd_diarize(args, cfg):
    rows = read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    model = diarizer.load_model(args.model) if args.method == "hmm" else None
    if args.method == "hmm" and model is None:
        raise StageError("diarize", args.method, "an --model is required")

    def one(row):
        audio = load_audio(_audio_path(row))
        dur = audio.duration_s
        if args.method == "hmm":
            feats = _diarizer_features(row, cfg)
            hyp = diarizer.decode(model, feats, dur)
        else:
            energy = frame_log_energy(audio)
            if args.method == "vad":
                hyp = diarizer.vad_diarize(energy, cfg["vad.threshold"], 0.01,
                                           total_duration_s=dur)
            else:
                eta = _eta_feature(row, cfg, energy.size)
                hyp = diarizer.vad_eta_diarize(energy, eta, cfg["vad.threshold"],
                                               cfg["eta.threshold"], 0.01,
                                               total_duration_s=dur)
        hyp = diarizer.postprocess(hyp, cfg["post.merge_gap_s"], cfg["post.min_dur_s"])
        save_segments(hyp, _out_path(args.out, row, ".seg"))

    _run(args.jobs, one, rows, f"diarize {args.method}")


def _diarizer_features(row, cfg):
    feats = acoustic_features(row, cfg)
    if cfg["diarizer.use_eta"]:
        eta = _eta_feature(row, cfg, feats.num_frames)
        feats = assemble_features([feats, ("eta", eta)])
    return feats


def _diarizer_config(cfg, seed):
    return diarizer.DiarizerConfig(
        num_states=cfg["diarizer.num_states"], max_components=cfg["diarizer.max_components"],
        iterations=cfg["diarizer.iterations"],
        edge_silence_frames=cfg["diarizer.edge_silence_frames"],
        retrain_iterations=cfg["diarizer.retrain_iterations"], seed=seed)


def cmd_train_diarizer(args, cfg):
    rows = read_manifest(args.manifest)

    def one(row):
        ref = load_segments(row["segments_path"])
        tr = diarizer.TurnTranscript.from_labeling(
            row["session_id"], ref, keep=diarizer.SPEAKERS + ("noise",))
        return _diarizer_features(row, cfg), tr

    data = _run(args.jobs, one, rows, "train-diarizer")
    dcfg = _diarizer_config(cfg, args.seed)
    try:
        model = diarizer.train_ergodic(data, dcfg)
        if args.unlabeled:
            extra = read_manifest(args.unlabeled)
            feats = _run(args.jobs, lambda r: _diarizer_features(r, cfg), extra,
                         "train-diarizer")
            model = diarizer.semi_supervised_retrain(model, feats, dcfg, labeled=data)
    except UtipipeError as exc:
        raise StageError("train-diarizer", args.manifest, exc) from exc
    diarizer.save_model(model, args.out)


def _cnn_config(cfg, seed):
    return embedder.CnnConfig(
        input_shape=(cfg["cnn.input_rows"], cfg["cnn.input_cols"]), c1=cfg["cnn.c1"],
        k1=cfg["cnn.k1"], c2=cfg["cnn.c2"], k2=cfg["cnn.k2"], h1=cfg["cnn.h1"],
        h2=cfg["cnn.h2"], num_classes=cfg["cnn.num_classes"],
        embedding_post_activation=cfg["cnn.post_activation"],
        input_center=cfg["cnn.input_center"], seed=seed)


def _speaker_means(rows, shape):
    """Mean frame (block-averaged to ``shape``) of every speaker."""
    sums, counts = {}, {}
    for row in rows:
        seq = _ultrasound(row)
        spk = row["speaker_id"]
        small = embedder.downsample(seq.frames, shape)
        sums[spk] = sums.get(spk, 0.0) + small.sum(axis=0)
        counts[spk] = counts.get(spk, 0) + small.shape[0]
    return {s: sums[s] / counts[s] for s in sums}


def cmd_train_embedder(args, cfg):
    rows = read_manifest(args.manifest)
    ccfg = _cnn_config(cfg, args.seed)
    means = _speaker_means(rows, ccfg.input_shape)
    xs, ys = [], []
    for row in rows:
        try:
            frames = embedder.downsample(_ultrasound(row).frames, ccfg.input_shape)
            labels = np.loadtxt(row["stem"] + ".artic", dtype=np.int64, ndmin=1)
        except (OSError, UtipipeError, ValueError) as exc:
            raise StageError("train-embedder", row["session_id"], exc) from exc
        if labels.size != frames.shape[0]:
            raise StageError("train-embedder", row["session_id"],
                             f"{labels.size} labels for {frames.shape[0]} frames")
        idx = np.arange(0, frames.shape[0], cfg["cnn.frame_stride"])
        xs.append(embedder.input_stacks(frames, means[row["speaker_id"]], idx))
        ys.append(labels[idx])
    X, y = np.concatenate(xs), np.concatenate(ys)
    if y.max() >= ccfg.num_classes:
        raise StageError("train-embedder", args.manifest,
                         f"label {y.max()} exceeds cnn.num_classes={ccfg.num_classes}")
    params, hist = embedder.train(embedder.init_params(ccfg), X, y, cfg["cnn.learning_rate"],
                                  cfg["cnn.epochs"], cfg["cnn.batch_size"], args.seed)
    log.info("embedder losses: %s", " ".join(f"{h:.4f}" for h in hist))
    embedder.save_params(params, args.out)


def save_embeddings(emb, path):
    write_matrix(path, emb.values)
    _write_atomic(path + ".clock", f"{emb.fps!r} {emb.sync_offset_s!r}\n")


def load_embeddings(path):
    values = read_matrix(path)
    with open(path + ".clock", encoding="utf-8") as fh:
        fps, offset = (float(v) for v in fh.read().split())
    return embedder.EmbeddingSequence(values, fps, offset)


def cmd_embed(args, cfg):
    rows = read_manifest(args.manifest)
    params = embedder.load_params(args.model)
    means = _speaker_means(rows, params.config.input_shape)
    os.makedirs(args.out, exist_ok=True)

    def one(row):
        seq = _ultrasound(row)
        emb = embedder.extract_embeddings(params, seq, means[row["speaker_id"]])
        save_embeddings(emb, _out_path(args.out, row, ".emb"))

    _run(args.jobs, one, rows, "embed")


def _lexicon(args):
    path = args.lexicon or os.path.join(os.path.dirname(os.path.abspath(args.manifest)),
                                        "lexicon.txt")
    return aligner.load_lexicon(path)


def _align_inputs(args, cfg, rows):
    """Acoustic features, therapist-masked features, kept map and prompt per session."""

    def one(row):
        feats = acoustic_features(row, cfg)
        prompt = load_prompt(row["prompt_path"])
        if cfg["align.mask_therapist"]:
            diar = (load_segments(_out_path(args.diarization, row, ".seg"))
                    if args.diarization else load_segments(row["segments_path"]))
            masked, kept = aligner.mask_therapist(feats, diar)
            if masked is None:
                raise ValidationError("every frame was masked as therapist speech")
        else:
            masked, kept = feats, np.arange(feats.num_frames)
        return feats, masked, kept, list(prompt.target_words)

    return _run(args.jobs, one, rows, "align")


def _aligner_config(cfg, seed):
    return aligner.AlignerConfig(iterations=cfg["align.iterations"],
                                 max_components=cfg["align.max_components"],
                                 mlp_hidden=cfg["align.mlp_hidden"],
                                 mlp_epochs=cfg["align.mlp_epochs"], seed=seed)


def cmd_align(args, cfg):
    rows = read_manifest(args.manifest)
    lex = _lexicon(args)
    inputs = _align_inputs(args, cfg, rows)
    try:
        model = aligner.train_monophone([(m, w) for _, m, _, w in inputs], lex,
                                        _aligner_config(cfg, args.seed))
    except UtipipeError as exc:
        raise StageError("align", args.manifest, exc) from exc
    os.makedirs(args.out, exist_ok=True)

    def one(pair):
        row, (feats, masked, kept, words) = pair
        graph = aligner.build_align_graph(words, lex)
        lab = aligner.force_align(masked, graph, model, kept, feats.frame_shift_s)
        save_segments(lab, _out_path(args.out, row, ".words"))

    _run(args.jobs, one, [_Pair(r, i) for r, i in zip(rows, inputs)], "align")


class _Pair(tuple):
    """(row, payload) that still answers ``get('session_id')`` for diagnostics."""

    def __new__(cls, row, payload):
        return super().__new__(cls, (row, payload))

    def get(self, key, default=None):
        return self[0].get(key, default)


def cmd_decode_oracle(args, cfg):
    rows = read_manifest(args.manifest)
    lex = _lexicon(args)
    inputs = _align_inputs(args, cfg, rows)
    acfg = _aligner_config(cfg, args.seed)
    train = [(m, w) for _, m, _, w in inputs]
    try:
        gmm = aligner.train_monophone(train, lex, acfg)
        targets = aligner.state_targets(gmm, train, lex)
        sys_a = aligner.train_posterior_system(gmm, [m for m, _ in train], targets, acfg)
        sys_b = None
        if args.embeddings:
            aug_full, aug_masked = [], []
            for row, (feats, _, kept, _) in zip(rows, inputs):
                emb = load_embeddings(_out_path(args.embeddings, row, ".emb"))
                full = aligner.augment_with_embeddings(feats, emb, cfg["align.context"],
                                                       cfg["align.context_mode"])
                aug_full.append(full)
                aug_masked.append(full.take(kept))
            sys_b = aligner.train_posterior_system(gmm, aug_masked, targets, acfg,
                                                   seed=args.seed + 1)
    except UtipipeError as exc:
        raise StageError("decode-oracle", args.manifest, exc) from exc
    os.makedirs(args.out, exist_ok=True)
    vocab = lex.words
    bounds = [_ref_words(r) for r in rows]
    if sys_b is None:
        model = sys_a
        streams = [feats for feats, _, _, _ in inputs]
    else:
        model = aligner.combine(sys_a, sys_b, cfg["combine.alpha"])
        streams = [(feats, aug) for (feats, _, _, _), aug in zip(inputs, aug_full)]
        utts = [(s[0], s[1], b) for s, b in zip(streams, bounds)]
        aligner.alpha_sweep(sys_a, sys_b, utts, lex, vocab, os.path.join(args.out, "sweep.csv"),
                            cfg["combine.alphas"])
    for row, stream, b in zip(rows, streams, bounds):
        try:
            res = aligner.oracle_decode(stream, b, vocab, lex, model)
        except UtipipeError as exc:
            raise StageError("decode-oracle", row["session_id"], exc) from exc
        hyp = " ".join(w if w is not None else "<fail>" for w in res.words)
        _write_atomic(_out_path(args.out, row, ".hyp.txt"), hyp + "\n")
        fa = stream[0] if isinstance(stream, tuple) else stream
        write_matrix(_out_path(args.out, row, ".postA"), sys_a.emissions.posteriors(fa.rows).values)
        if sys_b is not None:
            write_matrix(_out_path(args.out, row, ".postB"),
                         sys_b.emissions.posteriors(stream[1].rows).values)


def cmd_combine(args, cfg):
    alpha = cfg["combine.alpha"] if args.alpha is None else args.alpha
    try:
        pa = aligner.PosteriorMatrix(read_matrix(args.a))
        pb = aligner.PosteriorMatrix(read_matrix(args.b))
        out = aligner.interpolate_posteriors(pa, pb, alpha)
    except (UtipipeError, OSError, ValueError) as exc:
        raise StageError("combine", f"{args.a} + {args.b}", exc) from exc
    write_matrix(args.out, out.values)


def _hyp_words(path):
    with open(path, encoding="utf-8") as fh:
        return [w for w in fh.read().split() if w != "<fail>"]


def cmd_eval(args, cfg):
    rows = _manifest_in(args.ref)
    collar = cfg["eval.collar_s"]
    target = cfg["eval.target"]
    group_key = {"stage": "stage", "speaker": "speaker_id", None: None}[args.group_by]

    def one(row):
        c = {}
        if args.kind == "diar":
            ref = load_segments(row["segments_path"])
            hyp = load_segments(_out_path(args.hyp, row, ".seg"))
            c["det"] = metrics.detection_counts(ref, hyp, target, collar)
            c["der"] = metrics.der_counts(ref, hyp, collar)
        elif args.kind == "align":
            ref = _ref_words(row)
            hyp = load_segments(_out_path(args.hyp, row, ".words"))
            c["det"] = metrics.alignment_counts(ref, hyp, collar)
        else:
            ref = [s.label for s in _ref_words(row)]
            hyp = _hyp_words(_out_path(args.hyp, row, ".hyp.txt"))
            _, s, i, d = metrics.wer(ref, hyp)
            c["wer"] = np.array([s + i + d, len(ref)])
        return c

    counts = _run(args.jobs, one, rows, f"eval {args.kind}")
    if group_key:
        groups = sorted({r[group_key] for r in rows})
        out = []
        for g in groups:
            sel = [c for r, c in zip(rows, counts) if r[group_key] == g]
            row = _score_row(g, _sum_counts(sel))
            row[args.group_by] = g
            out.append(row)
    else:
        out = [_score_row(r["session_id"], c) for r, c in zip(rows, counts)]
        out.append(_score_row("ALL", _sum_counts(counts)))
    metrics.write_report(out, args.out, args.group_by)


def _sum_counts(counts):
    total = {}
    for c in counts:
        for k, v in c.items():
            total[k] = total[k] + v if k in total else v.copy()
    return total


def _score_row(name, c):
    row = {"utt": name}
    if "det" in c:
        try:
            s = metrics.prf_from_counts(c["det"])
            row.update(precision=s.precision, recall=s.recall, f1=s.f1)
        except metrics.UndefinedMetricError:
            pass
    if "der" in c:
        try:
            d = metrics.der_from_counts(c["der"])
            row.update(der=d.der, conf=d.confusion, miss=d.missed, fa=d.false_alarm)
        except metrics.UndefinedMetricError:
            pass
    if "wer" in c:
        row["wer"] = 100.0 * float(c["wer"][0]) / float(c["wer"][1])
    return row


def cmd_report(args, cfg):
    out = []
    for path in args.inputs:
        name = os.path.splitext(os.path.basename(path))[0]
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise StageError("report", path, exc) from exc
        picked = [r for r in rows if r.get("utt") == "ALL"] or rows
        for r in picked:
            r = {k: v for k, v in r.items() if k in metrics.REPORT_FIELDS}
            r["system"] = name
            out.append(r)
    metrics.write_report(out, args.out, "system")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    keys = describe_keys()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="sessions processed concurrently")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="utipipe", description="Audio + ultrasound analysis of speech-therapy sessions.",
        epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True, help="number of sessions")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--num-speakers", type=int, default=4)

    p = add("eta", cmd_eta, "write ETA traces as CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("diarize", cmd_diarize, "child/therapist diarization")
    p.add_argument("method", choices=("vad", "vad-eta", "hmm"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="HMM diarizer model (method hmm)")

    p = add("train-diarizer", cmd_train_diarizer, "train the ergodic HMM-GMM diarizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--unlabeled", help="manifest of sessions for semi-supervised retraining")

    p = add("train-embedder", cmd_train_embedder, "train the ultrasound CNN")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="parameter file")

    p = add("embed", cmd_embed, "extract ultrasound embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    for name, func, text in (("align", cmd_align, "prompt-constrained word alignment"),
                             ("decode-oracle", cmd_decode_oracle,
                              "word decoding within reference word boundaries")):
        p = add(name, func, text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--lexicon", help="lexicon file (default: lexicon.txt by the manifest)")
        p.add_argument("--diarization", help="folder of diarization .seg files used for "
                                             "therapist masking (default: reference)")
        if name == "decode-oracle":
            p.add_argument("--embeddings", help="folder of .emb files for the second system")

    p = add("combine", cmd_combine, "interpolate two posterior matrices")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score hypotheses against references")
    p.add_argument("kind", choices=("diar", "align", "wer"))
    p.add_argument("--ref", required=True, help="reference corpus folder (with manifest.csv)")
    p.add_argument("--hyp", required=True, help="hypothesis folder")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--group-by", choices=("stage", "speaker"))

    p = add("report", cmd_report, "collect corpus rows of several reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", default="summary.csv")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        cfg = load_config(args.config, args.set)
    except (UtipipeError, OSError) as exc:
        parser.error(f"bad configuration: {exc}")
    try:
        args.func(args, cfg)
    except StageError as exc:
        print(f"utipipe: error: {exc}", file=sys.stderr)
        return 1
    except (UtipipeError, OSError) as exc:
        print(f"utipipe: error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
