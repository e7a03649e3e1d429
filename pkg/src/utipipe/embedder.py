"""Ultrasound embeddings from a small convolutional network.

The network sees eight channels per frame: the frame, its three left and
three right neighbours, and the speaker's mean frame.  Two convolution and
max-pooling stages feed three dense layers, the last of which is 8 units
wide; that layer is the embedding.  A softmax layer on top predicts an
articulation class, which is what the network is trained on.

Everything (forward pass, backpropagation, SGD) is plain numpy.  Frames can
be block-averaged down to ``CnnConfig.input_shape`` before they reach the
network, which keeps training tractable on a CPU.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax

from .errors import DimensionError, DivergenceError, FormatError, ValidationError
from .session_io import FRAME_SHAPE

NUM_CHANNELS = 8
CONTEXT = 3
EMBED_DIM = 8
LAYERS = ("conv1", "conv2", "fc1", "fc2", "emb", "out")


@dataclass(frozen=True)
class CnnConfig:
    input_shape: tuple = FRAME_SHAPE
    c1: int = 16
    k1: int = 5
    c2: int = 32
    k2: int = 5
    h1: int = 256
    h2: int = 64
    embed_dim: int = EMBED_DIM
    num_classes: int = 11
    embedding_post_activation: bool = False
    input_center: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.embed_dim != EMBED_DIM:
            raise ValidationError(f"the embedding layer must have {EMBED_DIM} units")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be at least 2")
        sizes = (self.c1, self.k1, self.c2, self.k2, self.h1, self.h2) + self.input_shape
        if min(sizes) < 1:
            raise ValidationError("all layer sizes must be positive")
        if min(self.conv2_out_shape) < 1:
            raise ValidationError(f"input {self.input_shape} is too small for the kernels")

    @classmethod
    def small(cls, **overrides):
        """A few thousand parameters; used for gradient checks and tests."""
        base = dict(input_shape=(12, 16), c1=2, k1=3, c2=3, k2=3, h1=16, h2=12, num_classes=4)
        base.update(overrides)
        return cls(**base)

    @property
    def conv1_out_shape(self):
        H, W = self.input_shape
        return ((H - self.k1 + 1) // 2, (W - self.k1 + 1) // 2)

    @property
    def conv2_out_shape(self):
        H, W = self.conv1_out_shape
        return ((H - self.k2 + 1) // 2, (W - self.k2 + 1) // 2)

    @property
    def flat_size(self):
        H, W = self.conv2_out_shape
        return self.c2 * H * W

    def shapes(self):
        return {
            "conv1_w": (self.c1, NUM_CHANNELS, self.k1, self.k1), "conv1_b": (self.c1,),
            "conv2_w": (self.c2, self.c1, self.k2, self.k2), "conv2_b": (self.c2,),
            "fc1_w": (self.flat_size, self.h1), "fc1_b": (self.h1,),
            "fc2_w": (self.h1, self.h2), "fc2_b": (self.h2,),
            "emb_w": (self.h2, self.embed_dim), "emb_b": (self.embed_dim,),
            "out_w": (self.embed_dim, self.num_classes), "out_b": (self.num_classes,),
        }


@dataclass(eq=False)
class CnnParams:
    config: CnnConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.shapes()
        if set(self.tensors) != set(shapes):
            raise ValidationError(f"expected tensors {sorted(shapes)}, got {sorted(self.tensors)}")
        for name, shape in shapes.items():
            t = np.asarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise ValidationError(f"{name} has non-finite values")
            self.tensors[name] = t

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def num_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        return CnnParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def zeros(cls, config):
        return cls(config, {k: np.zeros(s) for k, s in config.shapes().items()})


def init_params(config):
    """Fan-in scaled uniform weights, zero biases, fixed by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            lim = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-lim, lim, shape)
    return CnnParams(config, tensors)


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    values: np.ndarray
    fps: float
    sync_offset_s: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != EMBED_DIM:
            raise DimensionError(f"embeddings must be T x {EMBED_DIM}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("embeddings must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    @property
    def times(self):
        return self.sync_offset_s + np.arange(len(self)) / self.fps


# ---------------------------------------------------------------------------
# inputs

def speaker_mean(sequences):
    """Element-wise mean over every frame of every sequence of one speaker."""
    if not sequences:
        raise ValidationError("speaker_mean needs at least one sequence")
    shape = sequences[0].frames.shape[1:]
    total = np.zeros(shape)
    count = 0
    for seq in sequences:
        if seq.frames.shape[1:] != shape:
            raise DimensionError(f"frame dims {seq.frames.shape[1:]} differ from {shape}")
        total += seq.frames.sum(axis=0, dtype=np.float64)
        count += seq.frames.shape[0]
    return total / count


def downsample(frames, shape):
    """Area-average the trailing two axes of ``frames`` down to ``shape``."""
    frames = np.asarray(frames, dtype=np.float64)
    H, W = frames.shape[-2:]
    h, w = shape
    if (h, w) == (H, W):
        return frames
    if h > H or w > W:
        raise DimensionError(f"cannot downsample {H}x{W} to larger {h}x{w}")
    rows = np.linspace(0, H, h + 1).astype(int)[:-1]
    cols = np.linspace(0, W, w + 1).astype(int)[:-1]
    out = np.add.reduceat(frames, rows, axis=-2)
    out = np.add.reduceat(out, cols, axis=-1)
    nr = np.diff(np.append(rows, H))
    nc = np.diff(np.append(cols, W))
    return out / np.outer(nr, nc)


def _stack_indices(T, t):
    return np.clip(np.arange(t - CONTEXT, t + CONTEXT + 1), 0, T - 1)


def build_input_stack(seq, t, mean_frame):
    """Channels ``[t-3 .. t+3, mean]``; neighbours past either end repeat the
    edge frame."""
    frames = seq.frames if hasattr(seq, "frames") else np.asarray(seq)
    T = frames.shape[0]
    if not 0 <= t < T:
        raise IndexError(f"frame index {t} outside [0, {T})")
    mean_frame = np.asarray(mean_frame, dtype=np.float64)
    if mean_frame.shape != frames.shape[1:]:
        raise DimensionError(f"mean frame {mean_frame.shape} vs frames {frames.shape[1:]}")
    out = np.empty((NUM_CHANNELS,) + frames.shape[1:])
    out[:NUM_CHANNELS - 1] = frames[_stack_indices(T, t)]
    out[-1] = mean_frame
    return out


def input_stacks(frames, mean_frame, indices=None):
    """Input tensors for many frame indices at once (N x 8 x H x W)."""
    T = frames.shape[0]
    indices = np.arange(T) if indices is None else np.asarray(indices)
    idx = np.clip(indices[:, None] + np.arange(-CONTEXT, CONTEXT + 1)[None, :], 0, T - 1)
    out = np.empty((indices.size, NUM_CHANNELS) + frames.shape[1:])
    out[:, :NUM_CHANNELS - 1] = frames[idx]
    out[:, -1] = mean_frame
    return out


# ---------------------------------------------------------------------------
# layers

def _conv_forward(x, w, b):
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))       # N C Ho Wo k k
    out = np.einsum("nchwij,fcij->nfhw", win, w, optimize=True)
    return out + b[None, :, None, None], win


def _conv_backward(dout, win, x_shape, w):
    k = w.shape[-1]
    dw = np.einsum("nchwij,nfhw->fcij", win, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros(x_shape)
    Ho, Wo = dout.shape[2:]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + Ho, j:j + Wo] += np.einsum("nfhw,fc->nchw", dout, w[:, :, i, j],
                                                      optimize=True)
    return dx, dw, db


def _pool_forward(x):
    N, C, H, W = x.shape
    h, w = H // 2, W // 2
    blocks = x[:, :, :2 * h, :2 * w].reshape(N, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(N, C, h, w, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape):
    N, C, H, W = x_shape
    h, w = dout.shape[2:]
    blocks = np.zeros((N, C, h, w, 4))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(N, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * h, 2 * w)
    dx = np.zeros(x_shape)
    dx[:, :, :2 * h, :2 * w] = blocks
    return dx


def _relu(x):
    return np.maximum(x, 0.0)


def _check_input(params, x):
    cfg = params.config
    expect = (NUM_CHANNELS,) + cfg.input_shape
    if x.shape[1:] != expect:
        raise DimensionError(f"conv1: input shape {x.shape[1:]} does not match {expect}")


def _forward(params, x):
    p = params.tensors
    # intensities live in [0, 1]; centering them keeps the rectifiers alive
    x = x - params.config.input_center
    cache = {"x": x}
    z1, cache["win1"] = _conv_forward(x, p["conv1_w"], p["conv1_b"])
    a1 = _relu(z1)
    cache["z1"] = z1
    h1, cache["arg1"] = _pool_forward(a1)
    cache["a1_shape"] = a1.shape
    cache["h1"] = h1
    z2, cache["win2"] = _conv_forward(h1, p["conv2_w"], p["conv2_b"])
    a2 = _relu(z2)
    cache["z2"] = z2
    h2, cache["arg2"] = _pool_forward(a2)
    cache["a2_shape"] = a2.shape
    flat = h2.reshape(h2.shape[0], -1)
    cache["h2_shape"] = h2.shape
    cache["flat"] = flat
    z3 = flat @ p["fc1_w"] + p["fc1_b"]
    a3 = _relu(z3)
    z4 = a3 @ p["fc2_w"] + p["fc2_b"]
    a4 = _relu(z4)
    z5 = a4 @ p["emb_w"] + p["emb_b"]
    a5 = _relu(z5)
    logits = a5 @ p["out_w"] + p["out_b"]
    cache.update(z3=z3, a3=a3, z4=z4, a4=a4, z5=z5, a5=a5)
    return logits, cache


def forward_batch(params, x):
    """Posteriors (N x classes) and embeddings (N x 8) for a batch of inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"conv1: expected N x 8 x H x W input, got {x.shape}")
    _check_input(params, x)
    logits, cache = _forward(params, x)
    post = np.exp(log_softmax(logits, axis=1))
    emb = cache["a5"] if params.config.embedding_post_activation else cache["z5"]
    return post, emb


def forward(params, x):
    """Class posteriors and the 8-dim embedding for one 8 x H x W input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"conv1: expected an 8 x H x W input, got {x.shape}")
    post, emb = forward_batch(params, x[None])
    return post[0], emb[0]


def loss_and_grad(params, x, labels):
    """Mean cross-entropy and its gradient w.r.t. every tensor."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_input(params, x)
    if labels.shape != (x.shape[0],):
        raise DimensionError(f"{x.shape[0]} inputs but labels of shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= params.config.num_classes:
        raise ValidationError(f"labels must lie in [0, {params.config.num_classes})")
    p = params.tensors
    N = x.shape[0]
    logits, c = _forward(params, x)
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(N), labels].mean()
    g = {}
    d = np.exp(logp)
    d[np.arange(N), labels] -= 1.0
    d /= N
    g["out_w"] = c["a5"].T @ d
    g["out_b"] = d.sum(0)
    d = (d @ p["out_w"].T) * (c["z5"] > 0)
    g["emb_w"] = c["a4"].T @ d
    g["emb_b"] = d.sum(0)
    d = (d @ p["emb_w"].T) * (c["z4"] > 0)
    g["fc2_w"] = c["a3"].T @ d
    g["fc2_b"] = d.sum(0)
    d = (d @ p["fc2_w"].T) * (c["z3"] > 0)
    g["fc1_w"] = c["flat"].T @ d
    g["fc1_b"] = d.sum(0)
    d = (d @ p["fc1_w"].T).reshape(c["h2_shape"])
    d = _pool_backward(d, c["arg2"], c["a2_shape"]) * (c["z2"] > 0)
    d, g["conv2_w"], g["conv2_b"] = _conv_backward(d, c["win2"], c["h1"].shape, p["conv2_w"])
    d = _pool_backward(d, c["arg1"], c["a1_shape"]) * (c["z1"] > 0)
    _, g["conv1_w"], g["conv1_b"] = _conv_backward(d, c["win1"], x.shape, p["conv1_w"])
    return float(loss), g


def train_step(params, batch, learning_rate):
    """One SGD step on ``batch`` (inputs, labels); returns the new parameters
    and the loss before the update."""
    x, labels = batch
    loss, grads = loss_and_grad(params, x, labels)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}; reduce the learning rate "
                              f"(currently {learning_rate})")
    new = {k: v - learning_rate * grads[k] for k, v in params.tensors.items()}
    return CnnParams(params.config, new), loss


def train(params, inputs, labels, learning_rate=0.05, epochs=10, batch_size=32, seed=0):
    """Minibatch SGD over shuffled epochs; returns params and per-epoch loss."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for s in range(0, order.size, batch_size):
            b = order[s:s + batch_size]
            params, loss = train_step(params, (inputs[b], labels[b]), learning_rate)
            total += loss * b.size
        history.append(total / order.size)
    return params, history


# ---------------------------------------------------------------------------
# gradient verification

def check_gradients(loss_fn, tensors, grads, epsilon=1e-4, num_checks=200, seed=0):
    """Max relative error between ``grads`` and central differences of
    ``loss_fn(tensors)`` over a random subsample of parameters."""
    rng = np.random.default_rng(seed)
    names = sorted(tensors)
    sizes = np.array([tensors[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=min(num_checks, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        name = names[k]
        idx = np.unravel_index(flat - (bounds[k] - sizes[k]), tensors[name].shape)
        t = tensors[name]
        orig = t[idx]
        t[idx] = orig + epsilon
        up = loss_fn(tensors)
        t[idx] = orig - epsilon
        down = loss_fn(tensors)
        t[idx] = orig
        fd = (up - down) / (2 * epsilon)
        bp = grads[name][idx]
        worst = max(worst, abs(fd - bp) / max(abs(fd), abs(bp), 1e-8))
    return worst


def gradient_check(params, x, label, epsilon=1e-4, num_checks=200, seed=0):
    """Finite-difference check of backpropagation on one example."""
    x = np.asarray(x, dtype=np.float64)[None]
    labels = np.array([label])
    work = params.copy()
    _, grads = loss_and_grad(work, x, labels)

    def loss_fn(_):
        return loss_and_grad(work, x, labels)[0]

    return check_gradients(loss_fn, work.tensors, grads, epsilon, num_checks, seed)


# ---------------------------------------------------------------------------
# extraction

def prepare_frames(seq, config):
    return downsample(seq.frames, config.input_shape)


def extract_embeddings(params, seq, mean_frame, batch_size=64):
    """The 8-dim embedding at every ultrasound frame."""
    cfg = params.config
    frames = prepare_frames(seq, cfg)
    mean_small = downsample(np.asarray(mean_frame), cfg.input_shape)
    T = frames.shape[0]
    out = np.empty((T, EMBED_DIM))
    for s in range(0, T, batch_size):
        idx = np.arange(s, min(T, s + batch_size))
        _, out[idx] = forward_batch(params, input_stacks(frames, mean_small, idx))
    return EmbeddingSequence(out, seq.fps, seq.sync_offset_s)


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"UTICNN\x00\x00"
_VERSION = 1


def save_params(params, path):
    cfg = asdict(params.config)
    cfg["input_shape"] = list(cfg["input_shape"])
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for name in LAYERS:
            for suffix in ("_w", "_b"):
                fh.write(params[name + suffix].astype("<f4").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise FormatError(f"{path}: not a CNN parameter file")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        cfg = json.loads(data[16:16 + n].decode("utf-8"))
        config = CnnConfig(**cfg)
    except (ValueError, TypeError, ValidationError) as exc:
        raise FormatError(f"{path}: bad config block ({exc})") from exc
    pos = 16 + n
    tensors = {}
    for name in LAYERS:
        for suffix in ("_w", "_b"):
            key = name + suffix
            shape = config.shapes()[key]
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise FormatError(f"{path}: truncated at tensor {key}")
            tensors[key] = np.frombuffer(data, "<f4", count, pos).astype(np.float64).reshape(shape)
            pos += 4 * count
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return CnnParams(config, tensors)
