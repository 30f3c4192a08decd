"""Small differentiable classifier with hand-written reverse mode.

Architecture: an optional single valid-padding convolution, then dense
hidden layers with ReLU, then a final linear layer producing logits.  The
activation vector entering the final layer is the penultimate feature
vector used by the detector.

Parameters live in a flat list of blocks ``[W0, b0, W1, b1, ...]``.  All
arithmetic is carried out in float64; inputs may be float32.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError, InputError, NumericError

CHECKPOINT_MAGIC = b"ADSH"
CHECKPOINT_VERSION = 1

LOSS_TAGS = ("xent", "cw", "sq")


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int

    def __str__(self) -> str:
        return f"conv{self.filters}x{self.kernel}"


LayerSpec = Union[int, ConvSpec]


def parse_layer(token: str) -> LayerSpec:
    """Parse ``"64"`` or ``"conv8x3"`` into a layer descriptor."""
    token = token.strip().lower()
    if token.startswith("conv"):
        try:
            filters, kernel = token[4:].split("x")
            return ConvSpec(int(filters), int(kernel))
        except ValueError:
            raise ConfigError(f"bad convolution descriptor {token!r}") from None
    try:
        return int(token)
    except ValueError:
        raise ConfigError(f"bad layer descriptor {token!r}") from None


@dataclass(frozen=True)
class NetConfig:
    input_dims: tuple[int, int, int]
    hidden_layers: tuple[LayerSpec, ...] = ()
    num_classes: int = 2
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.input_dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigError(f"input_dims must be (height, width, channels) >= 1, got {self.input_dims}")
        object.__setattr__(self, "input_dims", dims)
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        for pos, layer in enumerate(self.hidden_layers):
            if isinstance(layer, ConvSpec):
                if pos != 0:
                    raise ConfigError("only one convolution layer is supported and it must come first")
                if layer.filters < 1 or layer.kernel < 1:
                    raise ConfigError(f"bad convolution layer {layer}")
                if layer.kernel > min(dims[0], dims[1]):
                    raise ConfigError(f"kernel {layer.kernel} larger than input {dims[:2]}")
            elif isinstance(layer, (int, np.integer)) and not isinstance(layer, bool):
                if layer < 1:
                    raise ConfigError(f"layer width must be >= 1, got {layer}")
            else:
                raise ConfigError(f"bad layer descriptor {layer!r}")

    @property
    def input_size(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "hidden_layers": [str(l) if isinstance(l, ConvSpec) else int(l) for l in self.hidden_layers],
            "num_classes": self.num_classes,
            "activation": self.activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        layers = tuple(parse_layer(str(l)) for l in d.get("hidden_layers", []))
        return cls(
            input_dims=tuple(d["input_dims"]),
            hidden_layers=layers,
            num_classes=int(d["num_classes"]),
            activation=d.get("activation", "relu"),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class Batch:
    """Inputs in [0, 1] with shape ``(B, H, W, C)``.

    ``y`` holds integer labels (true or pseudo); ``targets`` is only used by
    the squared-error loss.
    """

    x: np.ndarray
    y: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class DiffNet:
    config: NetConfig
    params: list[np.ndarray] = field(repr=False)

    @property
    def feature_dim(self) -> int:
        for layer in reversed(self.config.hidden_layers):
            if isinstance(layer, int):
                return int(layer)
            h, w, _ = self.config.input_dims
            return (h - layer.kernel + 1) * (w - layer.kernel + 1) * layer.filters
        return self.config.input_size

    def copy(self) -> "DiffNet":
        return DiffNet(self.config, [p.copy() for p in self.params])


def _layer_shapes(config: NetConfig) -> list[tuple[str, tuple, tuple]]:
    h, w, c = config.input_dims
    shapes = []
    width = config.input_size
    for layer in config.hidden_layers:
        if isinstance(layer, ConvSpec):
            k = layer.kernel
            shapes.append(("conv", (k, k, c, layer.filters), (layer.filters,)))
            width = (h - k + 1) * (w - k + 1) * layer.filters
        else:
            shapes.append(("dense", (width, layer), (layer,)))
            width = layer
    shapes.append(("out", (width, config.num_classes), (config.num_classes,)))
    return shapes


def build_net(config: NetConfig) -> DiffNet:
    """Initialise weights uniformly in ``±1/sqrt(fan_in)``, biases at zero."""
    rng = np.random.default_rng(config.seed)
    params = []
    for _, wshape, bshape in _layer_shapes(config):
        fan_in = int(np.prod(wshape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=wshape))
        params.append(np.zeros(bshape))
    return DiffNet(config, params)


def _check_inputs(net: DiffNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    dims = net.config.input_dims
    if x.ndim == 2 and x.shape[1] == net.config.input_size:
        x = x.reshape((x.shape[0],) + dims)
    if x.ndim != 4 or x.shape[1:] != dims:
        raise InputError(f"expected inputs of shape (B, {dims[0]}, {dims[1]}, {dims[2]}), got {x.shape}")
    if x.shape[0] < 1:
        raise InputError("empty batch")
    return x


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    # (B, Ho, Wo, C, k, k) -> (B, Ho, Wo, k, k, C)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3)


def _forward(net: DiffNet, x: np.ndarray):
    kinds = _layer_shapes(net.config)
    cache = []
    a = x
    for li, (kind, _, _) in enumerate(kinds):
        W, b = net.params[2 * li], net.params[2 * li + 1]
        if kind == "conv":
            k = W.shape[0]
            cols = _patches(a, k)
            B, Ho, Wo = cols.shape[:3]
            cols2 = cols.reshape(B * Ho * Wo, -1)
            pre = cols2 @ W.reshape(-1, W.shape[-1]) + b
            out = np.maximum(pre, 0.0).reshape(B, -1)
            cache.append((kind, a, cols2, pre, (B, Ho, Wo)))
            a = out
        else:
            a2 = a.reshape(a.shape[0], -1)
            pre = a2 @ W + b
            if kind == "dense":
                cache.append((kind, a2, None, pre, None))
                a = np.maximum(pre, 0.0)
            else:
                cache.append((kind, a2, None, None, None))
                return pre, a2, cache
    raise AssertionError("unreachable")


def _backward(net: DiffNet, cache, dlogits: np.ndarray, want_params=True, want_input=True):
    grads: list[Optional[np.ndarray]] = [None] * len(net.params)
    delta = dlogits
    dx = None
    for li in range(len(cache) - 1, -1, -1):
        kind, a_in, cols, pre, geo = cache[li]
        W = net.params[2 * li]
        if kind == "out":
            if want_params:
                grads[2 * li] = a_in.T @ delta
                grads[2 * li + 1] = delta.sum(axis=0)
            delta = delta @ W.T
        elif kind == "dense":
            delta = delta * (pre > 0)
            if want_params:
                grads[2 * li] = a_in.T @ delta
                grads[2 * li + 1] = delta.sum(axis=0)
            if li == 0 and not want_input:
                break
            delta = delta @ W.T
        else:
            B, Ho, Wo = geo
            F = W.shape[-1]
            dpre = delta.reshape(B * Ho * Wo, F) * (pre > 0)
            if want_params:
                grads[2 * li] = (cols.T @ dpre).reshape(W.shape)
                grads[2 * li + 1] = dpre.sum(axis=0)
            if want_input:
                k = W.shape[0]
                C = W.shape[2]
                dcols = (dpre @ W.reshape(-1, F).T).reshape(B, Ho, Wo, k, k, C)
                dx = np.zeros_like(a_in)
                for i in range(k):
                    for j in range(k):
                        dx[:, i:i + Ho, j:j + Wo, :] += dcols[:, :, :, i, j, :]
            delta = None
            break
    if dx is None and want_input and delta is not None:
        dx = delta
    return grads, dx


def forward(net: DiffNet, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, features)`` for a batch or raw input array."""
    if isinstance(x, Batch):
        x = x.x
    logits, feats, _ = _forward(net, _check_inputs(net, x))
    return logits, feats


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    if labels is None:
        raise InputError("labels required for this loss")
    y = np.asarray(labels)
    if y.shape != (n_rows,):
        raise InputError(f"expected {n_rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be integers")
    bad = np.flatnonzero((y < 0) | (y >= n_classes))
    if bad.size:
        raise InputError(f"label {int(y[bad[0]])} at index {int(bad[0])} outside [0, {n_classes})")
    return y.astype(np.int64)


def cw_margin(logits: np.ndarray, labels) -> np.ndarray:
    """``z_y - max_{j != y} z_j`` for every row."""
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, z.shape[0], z.shape[1])
    rows = np.arange(z.shape[0])
    other = z.copy()
    other[rows, y] = -np.inf
    return z[rows, y] - other.max(axis=1)


def per_sample_loss(logits: np.ndarray, batch: Batch, loss: str = "xent", kappa: float = 0.0):
    """Per-row losses and their gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    n, c = z.shape
    rows = np.arange(n)
    if loss == "xent":
        y = _check_labels(batch.y, n, c)
        logp = log_softmax(z)
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return -logp[rows, y], d
    if loss == "cw":
        y = _check_labels(batch.y, n, c)
        other = z.copy()
        other[rows, y] = -np.inf
        j = other.argmax(axis=1)
        margin = z[rows, y] - z[rows, j]
        active = margin > -kappa
        d = np.zeros_like(z)
        d[rows, y] = active
        d[rows, j] -= active
        return np.maximum(margin, -kappa), d
    if loss == "sq":
        if batch.targets is None:
            raise InputError("squared-error loss needs real-valued targets")
        t = np.asarray(batch.targets, dtype=np.float64).reshape(n, c)
        r = z - t
        return (r ** 2).sum(axis=1), 2.0 * r
    raise InputError(f"unknown loss tag {loss!r}; expected one of {LOSS_TAGS}")


def xent_loss(logits: np.ndarray, labels) -> float:
    """Mean cross-entropy computed through the max-shifted log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
        labels = np.atleast_1d(labels)
    losses, _ = per_sample_loss(z, Batch(x=np.empty((z.shape[0], 0)), y=np.asarray(labels)), "xent")
    return float(losses.mean())


def loss_value(net: DiffNet, batch: Batch, loss: str = "xent") -> float:
    logits, _ = forward(net, batch.x)
    losses, _ = per_sample_loss(logits, batch, loss)
    return float(losses.mean())


def param_gradient(net: DiffNet, batch: Batch, loss: str = "xent") -> list[np.ndarray]:
    """Gradient of the batch-mean loss w.r.t. every parameter block."""
    x = _check_inputs(net, batch.x)
    logits, _, cache = _forward(net, x)
    _, d = per_sample_loss(logits, batch, loss)
    grads, _ = _backward(net, cache, d / x.shape[0], want_params=True, want_input=False)
    return grads


def value_and_param_gradient(net: DiffNet, batch: Batch, loss: str = "xent") -> tuple[float, list[np.ndarray]]:
    x = _check_inputs(net, batch.x)
    logits, _, cache = _forward(net, x)
    losses, d = per_sample_loss(logits, batch, loss)
    grads, _ = _backward(net, cache, d / x.shape[0], want_params=True, want_input=False)
    return float(losses.mean()), grads


def input_gradient(net: DiffNet, batch: Batch, loss: str = "xent") -> np.ndarray:
    """Gradient of each sample's own loss w.r.t. its pixels.

    Rows are independent, so this equals ``B`` times the gradient of the
    batch mean.  The result has the same shape as ``batch.x``.
    """
    x = _check_inputs(net, batch.x)
    logits, _, cache = _forward(net, x)
    _, d = per_sample_loss(logits, batch, loss)
    _, dx = _backward(net, cache, d, want_params=False, want_input=True)
    return dx.reshape(np.shape(batch.x))


def sgd_step(net: DiffNet, grads: Sequence[np.ndarray], lr: float) -> DiffNet:
    if not lr >= 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if len(grads) != len(net.params):
        raise InputError(f"expected {len(net.params)} gradient blocks, got {len(grads)}")
    new = []
    for i, (p, g) in enumerate(zip(net.params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise InputError(f"gradient block {i} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {i}")
        new.append(p - lr * g)
    return DiffNet(net.config, new)


def predict(net: DiffNet, x, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    x = np.asarray(x)
    out = []
    for s in range(0, x.shape[0], batch_size):
        logits, _ = forward(net, x[s:s + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def features(net: DiffNet, x, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``forward``: returns ``(logits, features)`` for all rows."""
    x = np.asarray(x)
    ls, fs = [], []
    for s in range(0, x.shape[0], batch_size):
        logits, feats = forward(net, x[s:s + batch_size])
        ls.append(logits)
        fs.append(feats)
    return np.concatenate(ls), np.concatenate(fs)


# -- checkpoint I/O ---------------------------------------------------------

def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def net_to_bytes(net: DiffNet) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(net.params)))
    for p in net.params:
        flat = np.ascontiguousarray(p, dtype="<f4").ravel()
        buf.write(struct.pack("<I", flat.size))
        buf.write(flat.tobytes())
    return buf.getvalue()


def net_from_bytes(data: bytes) -> DiffNet:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated network checkpoint")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a network checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    try:
        config = NetConfig.from_dict(json.loads(take(clen)))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"corrupt network config: {exc}") from None
    (nblocks,) = struct.unpack("<I", take(4))
    shapes = [s for _, w, b in _layer_shapes(config) for s in (w, b)]
    if nblocks != len(shapes):
        raise FormatError(f"checkpoint has {nblocks} blocks, config implies {len(shapes)}")
    params = []
    for shape in shapes:
        (size,) = struct.unpack("<I", take(4))
        if size != int(np.prod(shape)):
            raise FormatError(f"block length {size} does not match shape {shape}")
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64)
        params.append(arr.reshape(shape))
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint")
    return DiffNet(config, params)


def save_net(net: DiffNet, path) -> str:
    """Write the checkpoint atomically and return its sha256 hex digest."""
    data = net_to_bytes(net)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load_net(path) -> DiffNet:
    with open(path, "rb") as fh:
        return net_from_bytes(fh.read())


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
