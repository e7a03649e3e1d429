"""Run configuration: a flat set of typed, range-checked ``section.key`` values.

Values are layered: built-in defaults, then an optional config file, then
``--set key=value`` overrides.  The file format is ``key = value`` lines,
optionally grouped under ``[section]`` headers; ``#`` starts a comment.
Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    help: str
    low: float = None
    high: float = None
    choices: tuple = None


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


KEYS = (
    # synthetic corpus
    Key("synth.duration_s", float, 5.0, "session length in seconds", 0.5, 600),
    Key("synth.sigma_child", float, 0.1, "pixel noise sd while the child talks", 0, 1),
    Key("synth.sigma_therapist", float, 0.01, "pixel noise sd otherwise", 0, 1),
    Key("synth.num_words", int, 16, "synthetic vocabulary size", 1, 10000),
    Key("synth.num_classes", int, 11, "articulation classes", 2, 100),
    Key("synth.feature_noise", float, 1.0, "sd of feature-space noise", 0, 100),
    Key("synth.noise_prob", float, 0.0, "chance of a noise burst in a gap", 0, 1),
    # ETA
    Key("eta.window_s", float, 0.16, "ETA window length in seconds", 0.0, 10.0),
    Key("eta.threshold", float, 0.5, "activity threshold on normalized ETA", 0, 1),
    Key("eta.normalize", bool, True, "unity-normalize ETA before use"),
    # baselines and post-processing
    Key("vad.threshold", float, 7.0, "log-energy VAD threshold"),
    Key("post.merge_gap_s", float, 0.1, "merge same-label segments closer than this", 0, 10),
    Key("post.min_dur_s", float, 0.05, "relabel speech shorter than this as silence", 0, 10),
    # HMM diarizer
    Key("diarizer.features", str, "feats", "hmm input: synthetic .feats or mfcc from audio",
        choices=("feats", "mfcc")),
    Key("diarizer.use_eta", bool, False, "append normalized ETA as a feature column"),
    Key("diarizer.num_states", int, 5, "states per speaker token", 1, 20),
    Key("diarizer.max_components", int, 32, "Gaussians per state", 1, 4096),
    Key("diarizer.iterations", int, 10, "embedded EM iterations", 0, 1000),
    Key("diarizer.edge_silence_frames", int, 5,
        "frames at each utterance edge that seed the silence model (0 = pure flat start)", 0, 1000),
    Key("diarizer.retrain_iterations", int, 4, "EM iterations when retraining", 0, 1000),
    # CNN
    Key("cnn.input_rows", int, 21, "rows after block-averaging the 63-line frames", 4, 63),
    Key("cnn.input_cols", int, 103, "columns after block-averaging 412 returns", 4, 412),
    Key("cnn.c1", int, 16, "first conv layer channels", 1, 512),
    Key("cnn.k1", int, 5, "first conv kernel size", 1, 15),
    Key("cnn.c2", int, 32, "second conv layer channels", 1, 512),
    Key("cnn.k2", int, 5, "second conv kernel size", 1, 15),
    Key("cnn.h1", int, 256, "first dense layer width", 1, 8192),
    Key("cnn.h2", int, 64, "second dense layer width", 1, 8192),
    Key("cnn.num_classes", int, 11, "articulation classes", 2, 1000),
    Key("cnn.epochs", int, 5, "training epochs", 1, 10000),
    Key("cnn.batch_size", int, 32, "minibatch size", 1, 100000),
    Key("cnn.learning_rate", float, 0.01, "SGD step size", 0, 10),
    Key("cnn.frame_stride", int, 4, "use every n-th ultrasound frame for training", 1, 1000),
    Key("cnn.input_center", float, 0.5, "intensity subtracted from every input channel", 0, 1),
    Key("cnn.post_activation", bool, False, "take the embedding after the rectifier"),
    # alignment and combination
    Key("align.iterations", int, 8, "monophone EM iterations", 0, 1000),
    Key("align.max_components", int, 1, "Gaussians per monophone state", 1, 1024),
    Key("align.context", int, 4, "embedding context in acoustic frames", 0, 100),
    Key("align.context_mode", str, "symmetric", "how the context is laid out",
        choices=("symmetric", "left", "total")),
    Key("align.mask_therapist", bool, True, "drop frames diarized as therapist"),
    Key("align.mlp_hidden", int, 64, "hidden units of the posterior classifiers", 1, 8192),
    Key("align.mlp_epochs", int, 20, "classifier training epochs", 1, 10000),
    Key("combine.alpha", float, 0.6, "weight of system A in posterior interpolation", 0, 1),
    Key("combine.alphas", tuple, _floats("0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"),
        "alpha grid for the sweep"),
    # evaluation
    Key("eval.collar_s", float, 0.1, "collar around reference boundaries", 0, 10),
    Key("eval.target", str, "child", "label scored by detection precision/recall"),
)

KEY_INDEX = {k.name: k for k in KEYS}


def _parse_value(key, text):
    text = str(text).strip()
    try:
        if key.kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key.kind is tuple:
            return _floats(text)
        return key.kind(text)
    except ValueError:
        raise ValidationError(
            f"{key.name}: cannot parse {text!r} as {key.kind.__name__}") from None


def _check(key, value):
    vals = value if isinstance(value, tuple) else (value,)
    for v in vals:
        if key.choices and v not in key.choices:
            raise ValidationError(f"{key.name}: {v!r} is not one of {key.choices}")
        if key.low is not None and v < key.low:
            raise ValidationError(f"{key.name}: {v} is below {key.low}")
        if key.high is not None and v > key.high:
            raise ValidationError(f"{key.name}: {v} is above {key.high}")
    if key.name == "combine.alphas" and any(not 0 <= v <= 1 for v in vals):
        raise ValidationError("combine.alphas: every alpha must lie in [0, 1]")
    return value


class RunConfig:
    """Resolved configuration; read values with ``cfg["section.key"]``."""

    def __init__(self, values=None):
        self._values = {k.name: k.default for k in KEYS}
        for name, value in (values or {}).items():
            self.set(name, value)

    def set(self, name, value):
        key = KEY_INDEX.get(name)
        if key is None:
            raise ValidationError(f"unknown config key {name!r}")
        if isinstance(value, str):
            value = _parse_value(key, value)
        self._values[name] = _check(key, value)

    def __getitem__(self, name):
        return self._values[name]

    def as_dict(self):
        return dict(self._values)

    def section(self, prefix):
        return {k.split(".", 1)[1]: v for k, v in self._values.items()
                if k.startswith(prefix + ".")}


def parse_config_text(text, source="<config>"):
    """``key = value`` pairs from config text, in order."""
    pairs = []
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected 'key = value'", n)
        name, value = (s.strip() for s in line.split("=", 1))
        if section and "." not in name:
            name = f"{section}.{name}"
        pairs.append((name, value, n))
    return pairs


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        for name, value, n in parse_config_text(text, path):
            try:
                cfg.set(name, value)
            except ValidationError as exc:
                raise ParseError(f"{path}: {exc}", n) from None
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        name, value = item.split("=", 1)
        cfg.set(name.strip(), value.strip())
    return cfg


def describe_keys():
    """Help text listing every key with its default."""
    lines = ["configuration keys (set with --set key=value or a --config file):"]
    for k in KEYS:
        d = k.default
        if isinstance(d, tuple):
            d = ",".join(f"{v:g}" for v in d)
        lines.append(f"  {k.name} = {d}    {k.help}")
    return "\n".join(lines)
