"""Layer stacks for the CNN and CLDNN recognizers, with hand-written backprop.

Activations are (batch, time, channels). Every layer is mask-aware: padded
frames beyond a sample's valid length are held at zero after each block, so
a padded batch gives the same results on valid frames as unpadded samples.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ctc import LATIN, Alphabet

KINDS = ("conv1d", "batchnorm", "relu", "tanh", "maxpool2", "dropout", "blstm", "dense", "softmax")
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
DROPOUT_RATE = 0.3


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int | None = None
    kernel: int | None = None
    units: int | None = None
    rate: float | None = None
    momentum: float | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv1d" and (not self.filters or not self.kernel or self.kernel < 1):
            raise ValueError("conv1d needs filters >= 1 and kernel >= 1")
        if self.kind == "dropout" and not (self.rate is not None and 0 <= self.rate < 1):
            raise ValueError("dropout rate must be in [0, 1)")
        if self.kind in ("blstm", "dense") and not (self.units and self.units >= 1):
            raise ValueError(f"{self.kind} needs units >= 1")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_channels: int = 13
    output_classes: int = 53

    def __post_init__(self):
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("last layer must be softmax")
        if feature_sizes(self)[-1] != self.output_classes:
            raise ValueError("layer before softmax must produce output_classes features")

    @property
    def n_pools(self) -> int:
        return sum(1 for l in self.layers if l.kind == "maxpool2")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "output_classes": self.output_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], tuple(LayerSpec(**l) for l in d["layers"]),
                   d["input_channels"], d["output_classes"])


def conv_block(filters: int, kernel: int, rate: float = DROPOUT_RATE) -> list[LayerSpec]:
    return [
        LayerSpec("conv1d", filters=filters, kernel=kernel),
        LayerSpec("batchnorm", momentum=BN_MOMENTUM, epsilon=BN_EPSILON),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        LayerSpec("dropout", rate=rate),
    ]


def dense_head(hidden: int, classes: int, rate: float = DROPOUT_RATE) -> list[LayerSpec]:
    return [
        LayerSpec("dense", units=hidden),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=rate),
        LayerSpec("dense", units=classes),
        LayerSpec("softmax"),
    ]


def build_model(name: str, output_classes: int = 53, input_channels: int = 13) -> ModelSpec:
    """The two recognizer architectures: ``cnn`` and ``cldnn``."""
    if name == "cnn":
        layers = []
        for f, k in ((1024, 5), (512, 3), (256, 3), (128, 3)):
            layers += conv_block(f, k)
        layers += dense_head(100, output_classes)
    elif name == "cldnn":
        layers = []
        for f, k in ((512, 5), (256, 3), (128, 3)):
            layers += conv_block(f, k)
        for _ in range(2):
            layers += [LayerSpec("blstm", units=64), LayerSpec("dropout", rate=DROPOUT_RATE)]
        layers += dense_head(100, output_classes)
    else:
        raise ValueError(f"unknown model {name!r}; expected 'cnn' or 'cldnn'")
    return ModelSpec(name, tuple(layers), input_channels, output_classes)


def feature_sizes(spec: ModelSpec) -> list[int]:
    """Channel count entering each layer, plus the final output size."""
    sizes = [spec.input_channels]
    c = spec.input_channels
    for layer in spec.layers:
        if layer.kind == "conv1d":
            c = layer.filters
        elif layer.kind == "blstm":
            c = 2 * layer.units
        elif layer.kind == "dense":
            c = layer.units
        sizes.append(c)
    return sizes


def layer_name(index: int, layer: LayerSpec) -> str:
    return f"{index:02d}_{layer.kind}"


def param_shapes(spec: ModelSpec) -> dict[str, dict[str, tuple[int, ...]]]:
    """``{"trainable": {name: shape}, "state": {name: shape}}`` in layer order."""
    trainable: dict[str, tuple[int, ...]] = {}
    state: dict[str, tuple[int, ...]] = {}
    sizes = feature_sizes(spec)
    for i, layer in enumerate(spec.layers):
        n, cin = layer_name(i, layer), sizes[i]
        if layer.kind == "conv1d":
            trainable[f"{n}/kernel"] = (layer.kernel, cin, layer.filters)
            trainable[f"{n}/bias"] = (layer.filters,)
        elif layer.kind == "batchnorm":
            trainable[f"{n}/gamma"] = (cin,)
            trainable[f"{n}/beta"] = (cin,)
            state[f"{n}/moving_mean"] = (cin,)
            state[f"{n}/moving_var"] = (cin,)
        elif layer.kind == "blstm":
            u = layer.units
            for d in ("fw", "bw"):
                trainable[f"{n}/{d}/kernel"] = (cin, 4 * u)
                trainable[f"{n}/{d}/recurrent"] = (u, 4 * u)
                trainable[f"{n}/{d}/bias"] = (4 * u,)
        elif layer.kind == "dense":
            trainable[f"{n}/kernel"] = (cin, layer.units)
            trainable[f"{n}/bias"] = (layer.units,)
    return {"trainable": trainable, "state": state}


def param_count(spec: ModelSpec) -> int:
    """Number of trainable scalars (batchnorm running statistics excluded)."""
    return sum(int(np.prod(s)) for s in param_shapes(spec)["trainable"].values())


def output_length(spec: ModelSpec, length):
    """Sequence length after the pooling layers; works on ints and integer arrays."""
    if np.any(np.asarray(length) < 2 ** spec.n_pools):
        raise ValueError(f"input length must be at least {2 ** spec.n_pools} frames")
    out = length
    for _ in range(spec.n_pools):
        out = out // 2
    return out


@dataclass
class ParameterStore:
    trainable: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.trainable.items()},
            {k: v.copy() for k, v in self.state.items()},
        )

    @property
    def dtype(self):
        return next(iter(self.trainable.values())).dtype


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _orthogonal(rng, rows, cols, dtype):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Glorot-uniform kernels, orthogonal recurrent kernels, zero biases (forget gate 1)."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(spec)
    tr: dict[str, np.ndarray] = {}
    for name, shape in shapes["trainable"].items():
        leaf = name.rsplit("/", 1)[1]
        if leaf == "kernel" and len(shape) == 3:
            k, cin, cout = shape
            tr[name] = _glorot(rng, shape, k * cin, k * cout, dtype)
        elif leaf == "kernel":
            tr[name] = _glorot(rng, shape, shape[0], shape[1], dtype)
        elif leaf == "recurrent":
            tr[name] = _orthogonal(rng, shape[0], shape[1], dtype)
        elif leaf == "gamma":
            tr[name] = np.ones(shape, dtype)
        elif leaf == "bias" and "_blstm/" in name:
            u = shape[0] // 4
            b = np.zeros(shape, dtype)
            b[u:2 * u] = 1.0  # gate order i, f, g, o
            tr[name] = b
        else:
            tr[name] = np.zeros(shape, dtype)
    st = {}
    for name, shape in shapes["state"].items():
        st[name] = (np.ones if name.endswith("moving_var") else np.zeros)(shape, dtype)
    return ParameterStore(tr, st)


@dataclass
class Batch:
    values: np.ndarray  # (B, T, 13), zero beyond valid_lengths
    valid_lengths: np.ndarray  # (B,)
    labels: list[np.ndarray]  # class indices, no blanks
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.valid_lengths = np.asarray(self.valid_lengths, dtype=np.int64)
        if np.any(self.valid_lengths > self.values.shape[1]):
            raise ValueError("valid length exceeds padded length")

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], labels=None, words=None, dtype=np.float32):
        lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
        vals = np.zeros((len(arrays), int(lengths.max()), arrays[0].shape[1]), dtype=dtype)
        for i, a in enumerate(arrays):
            vals[i, : a.shape[0]] = a
        return cls(vals, lengths, list(labels) if labels is not None else [], list(words or []))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _time_mask(lengths, n_frames, dtype):
    return (np.arange(n_frames)[None, :] < lengths[:, None]).astype(dtype)


# ---------------------------------------------------------------- layer kernels

def _conv_forward(x, w, b):
    k = w.shape[0]
    left = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (left, k - 1 - left), (0, 0)))
    B, T, C = x.shape
    cols = sliding_window_view(xp, k, axis=1)  # (B, T, C, k)
    cols = cols.transpose(0, 1, 3, 2).reshape(B * T, k * C)
    out = cols @ w.reshape(k * C, -1)
    out += b
    return out.reshape(B, T, -1), cols


def _conv_backward(dout, cols, w, x_shape, need_dx):
    k, C, F = w.shape
    B, T, _ = x_shape
    d2 = dout.reshape(B * T, F)
    dw = (cols.T @ d2).reshape(k, C, F)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(k * C, F).T).reshape(B, T, k, C)
    left = (k - 1) // 2
    dxp = np.zeros((B, T + k - 1, C), dtype=dout.dtype)
    for j in range(k):
        dxp[:, j: j + T] += dcols[:, :, j]
    return dxp[:, left: left + T], dw, db


def _lstm_direction(xw, u_mat, mask, reverse):
    """Run one LSTM direction over precomputed input projections ``xw`` (B, T, 4u)."""
    B, T, four_u = xw.shape
    u = four_u // 4
    dtype = xw.dtype
    h = np.zeros((B, u), dtype)
    c = np.zeros((B, u), dtype)
    hs = np.zeros((B, T, u), dtype)
    cache = []
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = xw[:, t] + h @ u_mat
        i = _sigmoid(z[:, :u])
        f = _sigmoid(z[:, u: 2 * u])
        g = np.tanh(z[:, 2 * u: 3 * u])
        o = _sigmoid(z[:, 3 * u:])
        c_raw = f * c + i * g
        tc = np.tanh(c_raw)
        m = mask[:, t, None]
        cache.append((t, h, c, i, f, g, o, tc))
        c = m * c_raw
        h = m * (o * tc)
        hs[:, t] = h
    return hs, cache


def _lstm_direction_backward(dhs, cache, u_mat, mask):
    B, T, u = dhs.shape
    dtype = dhs.dtype
    dz_all = np.zeros((B, T, 4 * u), dtype)
    du = np.zeros_like(u_mat)
    dh_next = np.zeros((B, u), dtype)
    dc_next = np.zeros((B, u), dtype)
    for t, h_prev, c_prev, i, f, g, o, tc in reversed(cache):
        m = mask[:, t, None]
        dh_raw = m * (dhs[:, t] + dh_next)
        dc_raw = m * dc_next + dh_raw * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc_raw * g * i * (1.0 - i),
            dc_raw * c_prev * f * (1.0 - f),
            dc_raw * i * (1.0 - g * g),
            dh_raw * tc * o * (1.0 - o),
        ], axis=1)
        dz_all[:, t] = dz
        du += h_prev.T @ dz
        dh_next = dz @ u_mat.T
        dc_next = dc_raw * f
    return dz_all, du


def _dropout_keep(seed, layer_index, lengths, n_frames, n_channels, rate, dtype):
    """Inverted-dropout multipliers drawn per sample over its valid frames only.

    Drawing per sample keeps the masks independent of how much padding the batch has.
    """
    keep = np.zeros((len(lengths), n_frames, n_channels), dtype)
    scale = 1.0 / (1.0 - rate)
    for b, n in enumerate(lengths):
        rng = np.random.default_rng([seed, layer_index, b])
        keep[b, :n] = rng.random((int(n), n_channels), dtype=np.float32) >= rate
    keep *= scale
    return keep


# ---------------------------------------------------------------- forward / backward

def forward(spec: ModelSpec, params: ParameterStore, batch: Batch, mode: str = "eval", seed: int = 0):
    """Per-frame log-distributions ``(B, T', classes)`` and a cache for ``backward``.

    In train mode, batchnorm uses statistics over valid frames and the updated
    running statistics are returned in ``cache["state_updates"]`` (not applied).
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    train = mode == "train"
    dtype = params.dtype
    lengths = batch.valid_lengths.copy()
    output_length(spec, lengths)  # raises on short inputs
    x = np.ascontiguousarray(batch.values, dtype=dtype)
    mask = _time_mask(lengths, x.shape[1], dtype)
    x = x * mask[:, :, None]
    P = params.trainable
    caches = []
    updates = {}
    for li, layer in enumerate(spec.layers):
        n = layer_name(li, layer)
        c: dict = {"mask": mask}
        if layer.kind == "conv1d":
            # same-padding only matches the unpadded sample if padded frames are zero
            x = x * mask[:, :, None]
            c["x_shape"] = x.shape
            x, c["cols"] = _conv_forward(x, P[f"{n}/kernel"], P[f"{n}/bias"])
        elif layer.kind == "batchnorm":
            gamma, beta = P[f"{n}/gamma"], P[f"{n}/beta"]
            eps = layer.epsilon if layer.epsilon is not None else BN_EPSILON
            B, T, C = x.shape
            flat_mask = mask.reshape(-1)
            if train:
                count = flat_mask.sum()
                mean = (flat_mask @ x.reshape(-1, C)) / count
                xc = x - mean
                var = (flat_mask @ (xc * xc).reshape(-1, C)) / count
                mom = layer.momentum if layer.momentum is not None else BN_MOMENTUM
                updates[f"{n}/moving_mean"] = (mom * params.state[f"{n}/moving_mean"] + (1 - mom) * mean).astype(dtype)
                updates[f"{n}/moving_var"] = (mom * params.state[f"{n}/moving_var"] + (1 - mom) * var).astype(dtype)
                c["count"] = count
            else:
                mean, var = params.state[f"{n}/moving_mean"], params.state[f"{n}/moving_var"]
                xc = x - mean
            inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
            xhat = xc
            xhat *= inv_std
            c.update(xhat=xhat, inv_std=inv_std)
            # padded frames are left unmasked here; the following pool or conv masks them
            x = xhat * gamma
            x += beta
        elif layer.kind == "relu":
            c["pos"] = x > 0
            x = np.maximum(x, 0)
        elif layer.kind == "tanh":
            x = np.tanh(x)
            c["y"] = x
        elif layer.kind == "maxpool2":
            B, T, C = x.shape
            T2 = T // 2
            even, odd = x[:, 0: 2 * T2: 2], x[:, 1: 2 * T2: 2]
            c["second"] = odd > even
            c["in_shape"] = x.shape
            lengths = lengths // 2
            mask = _time_mask(lengths, T2, dtype)
            c["out_mask"] = mask
            x = np.maximum(even, odd)
            x *= mask[:, :, None]
        elif layer.kind == "dropout":
            if train and layer.rate > 0:
                c["keep"] = _dropout_keep(seed, li, lengths, x.shape[1], x.shape[2], layer.rate, dtype)
                x = x * c["keep"]
        elif layer.kind == "blstm":
            outs = []
            c["x"] = x
            for d, rev in (("fw", False), ("bw", True)):
                xw = x @ P[f"{n}/{d}/kernel"] + P[f"{n}/{d}/bias"]
                hs, c[d] = _lstm_direction(xw, P[f"{n}/{d}/recurrent"], mask, rev)
                outs.append(hs)
            x = np.concatenate(outs, axis=2)
        elif layer.kind == "dense":
            c["x"] = x
            x = x @ P[f"{n}/kernel"] + P[f"{n}/bias"]
        elif layer.kind == "softmax":
            shifted = x - x.max(axis=2, keepdims=True)
            x = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
            c["log_probs"] = x
        caches.append(c)
    cache = {"mode": mode, "layers": caches, "output_lengths": lengths, "state_updates": updates}
    return x, cache


def backward(spec: ModelSpec, params: ParameterStore, cache: dict, grad_log_probs: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every trainable parameter, given d loss / d log_probs."""
    if cache.get("mode") != "train":
        raise ValueError("backward needs the cache of a train-mode forward pass")
    P = params.trainable
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    out_mask = _time_mask(cache["output_lengths"], grad_log_probs.shape[1], params.dtype)
    dx = np.asarray(grad_log_probs, dtype=params.dtype) * out_mask[:, :, None]
    first_weighted = next(i for i, l in enumerate(spec.layers) if l.kind in ("conv1d", "blstm", "dense"))
    for li in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[li]
        n = layer_name(li, layer)
        c = cache["layers"][li]
        need_dx = li > first_weighted
        if layer.kind == "softmax":
            p = np.exp(c["log_probs"])
            dx = dx - p * dx.sum(axis=2, keepdims=True)
        elif layer.kind == "dense":
            x = c["x"]
            grads[f"{n}/kernel"] = x.reshape(-1, x.shape[2]).T @ dx.reshape(-1, dx.shape[2])
            grads[f"{n}/bias"] = dx.sum(axis=(0, 1))
            dx = dx @ P[f"{n}/kernel"].T if need_dx else None
        elif layer.kind == "blstm":
            x = c["x"]
            u = layer.units
            dx_total = np.zeros_like(x) if need_dx else None
            x2 = x.reshape(-1, x.shape[2])
            for j, d in enumerate(("fw", "bw")):
                dz, du = _lstm_direction_backward(dx[:, :, j * u:(j + 1) * u], c[d], P[f"{n}/{d}/recurrent"], c["mask"])
                dz2 = dz.reshape(-1, 4 * u)
                grads[f"{n}/{d}/kernel"] = x2.T @ dz2
                grads[f"{n}/{d}/bias"] = dz2.sum(axis=0)
                grads[f"{n}/{d}/recurrent"] = du
                if need_dx:
                    dx_total += dz @ P[f"{n}/{d}/kernel"].T
            dx = dx_total
        elif layer.kind == "dropout":
            if "keep" in c:
                dx = dx * c["keep"]
        elif layer.kind == "maxpool2":
            B, T, C = c["in_shape"]
            dx = dx * c["out_mask"][:, :, None]
            full = np.zeros((B, T, C), dtype=dx.dtype)
            T2 = T // 2
            second = c["second"]
            to_odd = dx * second
            full[:, 1: 2 * T2: 2] = to_odd
            full[:, 0: 2 * T2: 2] = dx - to_odd
            dx = full
        elif layer.kind == "relu":
            dx = dx * c["pos"]
        elif layer.kind == "tanh":
            dx = dx * (1.0 - c["y"] ** 2)
        elif layer.kind == "batchnorm":
            B, T, C = dx.shape
            dy = dx * c["mask"][:, :, None]
            xhat = c["xhat"]
            ones = np.ones(B * T, dtype=dy.dtype)
            gamma = P[f"{n}/gamma"]
            sum_dy = ones @ dy.reshape(-1, C)
            sum_dy_xhat = ones @ (dy * xhat).reshape(-1, C)
            grads[f"{n}/gamma"] = sum_dy_xhat
            grads[f"{n}/beta"] = sum_dy
            count = c["count"]
            # padded frames of dx are nonzero here; the conv below masks its output gradient
            scale = gamma * c["inv_std"]
            dx = xhat * (-scale * sum_dy_xhat / count)
            dx += dy * scale
            dx -= scale * sum_dy / count
        elif layer.kind == "conv1d":
            dx = dx * c["mask"][:, :, None]
            dx, grads[f"{n}/kernel"], grads[f"{n}/bias"] = _conv_backward(
                dx, c["cols"], P[f"{n}/kernel"], c["x_shape"], need_dx)
    return grads


def apply_state_updates(params: ParameterStore, cache: dict) -> None:
    for k, v in cache["state_updates"].items():
        params.state[k] = v


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "imupen-checkpoint"
CHECKPOINT_VERSION = 1


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
            "data": base64.b64encode(le.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype("<" + d["dtype"])).reshape(d["shape"]).copy()


def save_checkpoint(path: str | Path, spec: ModelSpec, params: ParameterStore,
                    alphabet: Alphabet = LATIN, meta: dict | None = None) -> None:
    """JSON container: model spec, alphabet string, and base64 little-endian arrays.

    Keys are written sorted, so identical parameters give identical bytes.
    """
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": spec.to_dict(),
        "alphabet": alphabet.characters,
        "meta": meta or {},
        "trainable": {k: _encode_array(v) for k, v in params.trainable.items()},
        "state": {k: _encode_array(v) for k, v in params.state.items()},
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, ParameterStore, Alphabet, dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    spec = ModelSpec.from_dict(blob["model"])
    shapes = param_shapes(spec)
    # restore layer order, which sorted JSON keys lose
    tr = {k: _decode_array(blob["trainable"][k]) for k in shapes["trainable"]}
    st = {k: _decode_array(blob["state"][k]) for k in shapes["state"]}
    return spec, ParameterStore(tr, st), Alphabet(blob["alphabet"]), blob.get("meta", {})
