"""Desk-scale feed-forward networks in plain numpy.

Networks are flat ordered lists of layer specs with explicit parameter
tensors, so the forward pass, reverse-mode gradients, and activation taps
are all straightforward array code. Convolutions run through im2col and a
single GEMM in float64; their input gradients use the dilated-correlation
form so no scatter-adds are needed.

Checkpoints use the RSCK binary format: magic "RSCK", 32-bit parameter
payload, and a JSON trailer holding the architecture, width, seed, epoch.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ShapeError,
    TruncatedError,
    ValidationError,
    VersionError,
)

CHECKPOINT_MAGIC = b"RSCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class AvgPool:
    kernel: int  # non-overlapping, stride = kernel


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class ResidualAdd:
    source: int  # index of an earlier layer whose output is added


def _spec_to_json(spec) -> dict:
    if isinstance(spec, Dense):
        return {"kind": "dense", "in": spec.in_features, "out": spec.out_features}
    if isinstance(spec, Conv2d):
        return {
            "kind": "conv2d",
            "in": spec.in_channels,
            "out": spec.out_channels,
            "k": spec.kernel,
            "stride": spec.stride,
            "pad": spec.pad,
        }
    if isinstance(spec, Relu):
        return {"kind": "relu"}
    if isinstance(spec, AvgPool):
        return {"kind": "avgpool", "k": spec.kernel}
    if isinstance(spec, Flatten):
        return {"kind": "flatten"}
    if isinstance(spec, ResidualAdd):
        return {"kind": "residual_add", "source": spec.source}
    raise ConfigError(f"unknown layer spec {spec!r}")


def _spec_from_json(d: dict):
    kind = d.get("kind")
    if kind == "dense":
        return Dense(d["in"], d["out"])
    if kind == "conv2d":
        return Conv2d(d["in"], d["out"], d["k"], d["stride"], d["pad"])
    if kind == "relu":
        return Relu()
    if kind == "avgpool":
        return AvgPool(d["k"])
    if kind == "flatten":
        return Flatten()
    if kind == "residual_add":
        return ResidualAdd(d["source"])
    raise ConfigError(f"unknown layer kind {kind!r}")


def infer_shapes(layers, input_shape) -> list:
    """Per-layer output shapes; raises ShapeError on any incompatibility."""
    shapes = []
    cur = tuple(input_shape)
    for i, spec in enumerate(layers):
        if isinstance(spec, Dense):
            if len(cur) != 1 or cur[0] != spec.in_features:
                raise ShapeError(f"layer {i}: Dense expects ({spec.in_features},), got {cur}")
            cur = (spec.out_features,)
        elif isinstance(spec, Conv2d):
            if len(cur) != 3 or cur[0] != spec.in_channels:
                raise ShapeError(f"layer {i}: Conv2d expects {spec.in_channels} channels, got {cur}")
            c, h, w = cur
            k, s, p = spec.kernel, spec.stride, spec.pad
            if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
                raise ShapeError(f"layer {i}: Conv2d geometry does not divide {cur}")
            cur = (spec.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif isinstance(spec, AvgPool):
            if len(cur) != 3:
                raise ShapeError(f"layer {i}: AvgPool expects (c,h,w), got {cur}")
            c, h, w = cur
            if h % spec.kernel or w % spec.kernel:
                raise ShapeError(f"layer {i}: AvgPool {spec.kernel} does not divide {cur}")
            cur = (c, h // spec.kernel, w // spec.kernel)
        elif isinstance(spec, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(spec, ResidualAdd):
            if not 0 <= spec.source < i:
                raise ShapeError(f"layer {i}: ResidualAdd source {spec.source} must precede it")
            if shapes[spec.source] != cur:
                raise ShapeError(
                    f"layer {i}: ResidualAdd source shape {shapes[spec.source]} != {cur}"
                )
        elif isinstance(spec, Relu):
            pass
        else:
            raise ConfigError(f"unknown layer spec {spec!r}")
        shapes.append(cur)
    return shapes


@dataclass
class NetworkGraph:
    """Ordered layers + parameter tensors + tap points."""

    layers: list
    input_shape: tuple
    params: list = None
    width_factor: int = 1
    taps: tuple = ()
    arch: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.output_shapes = infer_shapes(self.layers, self.input_shape)
        if not self.taps:
            self.taps = tuple(range(len(self.layers)))
        for t in self.taps:
            if not 0 <= t < len(self.layers):
                raise ValidationError(f"tap index {t} out of range")
        if self.params is not None:
            _check_params(self.layers, self.params)


def _check_params(layers, params):
    if len(params) != len(layers):
        raise ValidationError("params list must align with layers")
    for i, (spec, p) in enumerate(zip(layers, params)):
        for arr in p.values():
            if not np.isfinite(arr).all():
                raise ValidationError(f"layer {i} has non-finite parameters")


@dataclass
class Batch:
    """Labeled image batch; inputs in [0,1], shape (n, c, h, w)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise ShapeError(f"batch inputs must be (n,c,h,w), got {self.inputs.shape}")
        if len(self.labels) != self.inputs.shape[0]:
            raise ShapeError("labels length must match batch size")
        if self.inputs.size and (self.inputs.min() < -1e-9 or self.inputs.max() > 1 + 1e-9):
            raise ValidationError("batch inputs must lie in [0,1]")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def batch_arrays(batch):
    """Accept a Batch or a raw (inputs) array; return (inputs, labels)."""
    if isinstance(batch, Batch):
        return batch.inputs, batch.labels
    inputs = np.asarray(batch, dtype=np.float64)
    return inputs, np.zeros(inputs.shape[0], dtype=np.int64)


def layer_names(net: NetworkGraph) -> list:
    kinds = {
        Dense: "dense", Conv2d: "conv", Relu: "relu",
        AvgPool: "avgpool", Flatten: "flatten", ResidualAdd: "add",
    }
    return [f"{i:02d}_{kinds[type(s)]}" for i, s in enumerate(net.layers)]


# ---------------------------------------------------------------------------
# initialization


def init_params(net: NetworkGraph, seed: int) -> list:
    """Fan-in scaled Gaussian weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in net.layers:
        if isinstance(spec, Dense):
            std = np.sqrt(2.0 / spec.in_features)
            params.append({
                "w": rng.normal(0.0, std, (spec.in_features, spec.out_features)),
                "b": np.zeros(spec.out_features),
            })
        elif isinstance(spec, Conv2d):
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            std = np.sqrt(2.0 / fan_in)
            params.append({
                "w": rng.normal(0.0, std, (spec.out_channels, spec.in_channels,
                                           spec.kernel, spec.kernel)),
                "b": np.zeros(spec.out_channels),
            })
        else:
            params.append({})
    return params


# ---------------------------------------------------------------------------
# conv helpers
#
# Spatial tensors are NHWC internally: im2col windows over NHWC memory copy
# near-sequentially (innermost kernel-row x channel runs are contiguous) and
# both conv GEMMs produce their outputs already in layout, which is where a
# channel-first implementation loses most of its time.


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    out[:, pad : pad + h, pad : pad + w, :] = x
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """NHWC window matrix: (n*oh*ow, k*k*c) with (row, col, channel) order."""
    x = _pad_hw(x, pad)
    n, h, w, c = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, oh, ow, k, k, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    cols = np.ascontiguousarray(win).reshape(n * oh * ow, k * k * c)
    return cols, oh, ow


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    n, h, w, c = g.shape
    out = np.zeros((n, (h - 1) * stride + 1, (w - 1) * stride + 1, c))
    out[:, ::stride, ::stride, :] = g
    return out


def _conv_forward(spec: Conv2d, p: dict, x: np.ndarray):
    k = spec.kernel
    cols, oh, ow = _im2col(x, k, spec.stride, spec.pad)
    # weight matrix in window order: [(row*k + col)*c_in + ci, c_out]
    wm = p["w"].transpose(2, 3, 1, 0).reshape(k * k * spec.in_channels, -1)
    out = (cols @ wm + p["b"]).reshape(x.shape[0], oh, ow, spec.out_channels)
    return out, (cols, x.shape)


def _conv_backward(spec: Conv2d, p: dict, cache, g: np.ndarray, need_param: bool):
    cols, x_shape = cache
    n, h, w, ci = x_shape
    k, s, pad = spec.kernel, spec.stride, spec.pad
    co = spec.out_channels
    gm = g.reshape(-1, co)
    grads = None
    if need_param:
        dw = (cols.T @ gm).reshape(k, k, ci, co).transpose(3, 2, 0, 1)
        grads = {"w": dw, "b": gm.sum(axis=0)}
    # input gradient as a correlation of the (dilated) cotangent with the
    # spatially flipped kernels
    gd = _dilate(g, s)
    pb = k - 1 - pad
    if pb > 0:
        gd = _pad_hw(gd, pb)
    elif pb < 0:
        gd = gd[:, -pb:pb, -pb:pb, :]
    cols_b, bh, bw = _im2col(gd, k, 1, 0)
    wb = p["w"][:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * co, ci)
    dx = (cols_b @ wb).reshape(n, bh, bw, ci)
    return dx, grads


# ---------------------------------------------------------------------------
# forward / backward


def _flatten_act(a: np.ndarray) -> np.ndarray:
    """Collapse spatial dimensions channel-major: runtime NHWC -> (n, c*h*w)."""
    if a.ndim == 4:
        return _to_nchw(a).reshape(a.shape[0], -1)
    return a.reshape(a.shape[0], -1)


def _run_forward(net: NetworkGraph, x: np.ndarray, want_cache: bool):
    if x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"batch shape {x.shape[1:]} does not match net input {net.input_shape}"
        )
    if net.params is None:
        raise ValidationError("network has no parameters; call init_params first")
    outs = []
    caches = [] if want_cache else None
    cur = _to_nhwc(x) if x.ndim == 4 else x
    for spec, p in zip(net.layers, net.params):
        cache = None
        if isinstance(spec, Dense):
            cache = cur
            cur = cur @ p["w"] + p["b"]
        elif isinstance(spec, Conv2d):
            cur, cache = _conv_forward(spec, p, cur)
        elif isinstance(spec, Relu):
            cache = cur > 0
            cur = np.maximum(cur, 0.0)
        elif isinstance(spec, AvgPool):
            k = spec.kernel
            n, h, w, c = cur.shape
            cache = cur.shape
            cur = cur.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))
        elif isinstance(spec, Flatten):
            cache = cur.shape
            cur = _flatten_act(cur)
        elif isinstance(spec, ResidualAdd):
            cur = cur + outs[spec.source]
        outs.append(cur)
        if want_cache:
            caches.append(cache)
    return outs, caches


def forward(net: NetworkGraph, batch, taps=None):
    """Run the net; returns (logits, {layer_index: flattened activation}).

    Deterministic and side-effect free for fixed parameters. A spatial final
    output comes back in (n, c, h, w) layout.
    """
    inputs, _ = batch_arrays(batch)
    outs, _ = _run_forward(net, np.asarray(inputs, dtype=np.float64), False)
    tapped = {}
    if taps:
        for t in taps:
            tapped[t] = _flatten_act(outs[t])
    final = outs[-1]
    if final.ndim == 4:
        final = _to_nchw(final)
    return final, tapped


def forward_cache(net: NetworkGraph, inputs: np.ndarray):
    """Forward pass retaining everything `backward` needs."""
    outs, caches = _run_forward(net, np.asarray(inputs, dtype=np.float64), True)
    return outs[-1], (outs, caches)


def backward(
    net: NetworkGraph,
    fw_state,
    dlogits: np.ndarray,
    need_param_grads: bool = True,
    need_input_grad: bool = True,
):
    """Reverse-mode gradients from a logits cotangent.

    Returns (param_grads, input_grad); either half may be None when not
    requested. Residual connections accumulate into their source layer.
    """
    outs, caches = fw_state
    n_layers = len(net.layers)
    gout = [None] * n_layers
    gout[n_layers - 1] = dlogits
    param_grads = [None] * n_layers if need_param_grads else None
    dx_input = None

    def send(idx, g):
        if idx < 0:
            nonlocal dx_input
            if need_input_grad:
                dx_input = g if dx_input is None else dx_input + g
            return
        gout[idx] = g if gout[idx] is None else gout[idx] + g

    for i in range(n_layers - 1, -1, -1):
        g = gout[i]
        if g is None:
            continue
        spec = net.layers[i]
        p = net.params[i]
        cache = caches[i]
        if isinstance(spec, Dense):
            if need_param_grads:
                param_grads[i] = {"w": cache.T @ g, "b": g.sum(axis=0)}
            send(i - 1, g @ p["w"].T)
        elif isinstance(spec, Conv2d):
            dx, grads = _conv_backward(spec, p, cache, g, need_param_grads)
            if need_param_grads:
                param_grads[i] = grads
            send(i - 1, dx)
        elif isinstance(spec, Relu):
            send(i - 1, g * cache)
        elif isinstance(spec, AvgPool):
            k = spec.kernel
            send(i - 1, np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k))
        elif isinstance(spec, Flatten):
            if len(cache) == 4:
                n, h, w, c = cache
                # invert the channel-major flatten back to runtime NHWC
                send(i - 1, g.reshape(n, c, h, w).transpose(0, 2, 3, 1))
            else:
                send(i - 1, g.reshape(cache))
        elif isinstance(spec, ResidualAdd):
            send(i - 1, g)
            send(spec.source, g)
        if need_param_grads and param_grads[i] is None:
            param_grads[i] = {}
    if dx_input is not None and dx_input.ndim == 4:
        dx_input = _to_nchw(dx_input)
    return param_grads, dx_input


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its logits gradient."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def loss_and_grad(
    net: NetworkGraph,
    batch: Batch,
    need_param_grads: bool = True,
    need_input_grad: bool = True,
):
    """Mean cross-entropy plus gradients w.r.t. parameters and inputs."""
    inputs, labels = batch_arrays(batch)
    if labels.size and labels.max() >= net.output_shapes[-1][0]:
        raise ValidationError("label exceeds class count")
    logits, state = forward_cache(net, inputs)
    loss, dlogits = cross_entropy(logits, labels)
    param_grads, dx = backward(net, state, dlogits, need_param_grads, need_input_grad)
    return loss, param_grads, dx


def predict(net: NetworkGraph, inputs: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Argmax class predictions, evaluated in chunks."""
    inputs = np.asarray(inputs, dtype=np.float64)
    preds = []
    for s in range(0, inputs.shape[0], chunk):
        logits, _ = forward(net, inputs[s : s + chunk])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


# ---------------------------------------------------------------------------
# presets


def make_network(
    arch: str,
    input_shape=(1, 16, 16),
    classes: int = 4,
    width_factor: int = 1,
    seed: int | None = None,
) -> NetworkGraph:
    """Build a named desk architecture; seeds parameters when `seed` given.

    "mlp-3": three dense+relu layers on flattened input.
    "miniresnet": stem conv, three equal-width residual stages of two convs
    each (skip spanning both convs), average-pool downsampling between
    stages, global average pool, dense head. Channel count is 8 * width.
    """
    c, h, w = input_shape
    if arch == "mlp-3":
        d = int(np.prod(input_shape))
        hidden = 64 * width_factor
        layers = [
            Flatten(),
            Dense(d, hidden), Relu(),
            Dense(hidden, hidden), Relu(),
            Dense(hidden, classes),
        ]
    elif arch == "miniresnet":
        ch = 8 * width_factor
        if h % 4 or w % 4:
            raise ConfigError("miniresnet needs input sides divisible by 4")
        layers = [Conv2d(c, ch, 3, 1, 1), Relu()]  # stem: idx 0,1

        def stage(entry_idx):
            return [
                Conv2d(ch, ch, 3, 1, 1), Relu(),
                Conv2d(ch, ch, 3, 1, 1), ResidualAdd(entry_idx), Relu(),
            ]

        layers += stage(1)            # idx 2..6
        layers += [AvgPool(2)]        # idx 7
        layers += stage(7)            # idx 8..12
        layers += [AvgPool(2)]        # idx 13
        layers += stage(13)           # idx 14..18
        layers += [AvgPool(h // 4), Flatten(), Dense(ch, classes)]  # idx 19..21
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    net = NetworkGraph(
        layers, input_shape, width_factor=width_factor, arch=arch, seed=seed
    )
    if seed is not None:
        net.params = init_params(net, seed)
    return net


def stage_taps(net: NetworkGraph) -> list:
    """Representative tap per residual stage (end-of-stage relu), in order.

    For non-residual nets, falls back to the relu taps.
    """
    idx = [
        i
        for i, s in enumerate(net.layers)
        if isinstance(s, Relu) and i > 0 and isinstance(net.layers[i - 1], ResidualAdd)
    ]
    if idx:
        return idx
    return [i for i, s in enumerate(net.layers) if isinstance(s, Relu)]


def stage_tap_span(net: NetworkGraph) -> int:
    """Tap-index span of one residual stage; the default long-range lag."""
    idx = stage_taps(net)
    if len(idx) >= 2:
        return idx[1] - idx[0]
    return max(1, len(net.layers) // 3)


# ---------------------------------------------------------------------------
# checkpoints (RSCK)


def save_checkpoint(net: NetworkGraph, path, epoch: int | str = "final") -> None:
    """Write layer specs + parameters to an RSCK file (32-bit payload)."""
    if net.params is None:
        raise ValidationError("cannot checkpoint a network without parameters")
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    tensors = []
    for i, p in enumerate(net.params):
        for key in sorted(p):
            tensors.append((f"{i}.{key}", p[key]))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    trailer = {
        "arch": net.arch,
        "width": net.width_factor,
        "seed": net.seed,
        "epoch": epoch,
        "input_shape": list(net.input_shape),
        "taps": list(net.taps),
        "layers": [_spec_to_json(s) for s in net.layers],
    }
    tb = json.dumps(trailer, sort_keys=True).encode("utf-8")
    offset = sum(len(p) for p in parts)
    parts.append(struct.pack("<I", len(tb)))
    parts.append(tb)
    parts.append(struct.pack("<Q", offset))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> NetworkGraph:
    """Read an RSCK file; parameters widen to float64."""
    from .activations import _Reader  # same bounds-checked cursor

    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    if len(buf) < 4:
        raise TruncatedError("file shorter than magic")
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError("not an RSCK file")
    (version,) = rd.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported RSCK version {version}")
    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}Q")
        need = int(np.prod(shape)) * 4 if ndim else 4
        if rd.pos + need > len(buf):
            raise TruncatedError(f"tensor {name!r} payload past end of file")
        tensors[name] = (
            np.frombuffer(rd.take(need), dtype="<f4").reshape(shape).astype(np.float64)
        )
    (trailer_len,) = rd.unpack("<I")
    try:
        trailer = json.loads(rd.take(trailer_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedError(f"trailer is not valid JSON: {exc}") from exc
    layers = [_spec_from_json(d) for d in trailer["layers"]]
    net = NetworkGraph(
        layers,
        tuple(trailer["input_shape"]),
        width_factor=trailer.get("width", 1),
        taps=tuple(trailer.get("taps", ())),
        arch=trailer.get("arch", ""),
        seed=trailer.get("seed"),
    )
    params = []
    for i in range(len(layers)):
        p = {}
        for key in ("b", "w"):
            if f"{i}.{key}" in tensors:
                p[key] = tensors[f"{i}.{key}"]
        params.append(p)
    net.params = params
    return net


def round_params_f32(net: NetworkGraph) -> NetworkGraph:
    """Copy of the net with parameters rounded through float32.

    Matches exactly what save_checkpoint + load_checkpoint would produce, so
    activations recorded from the copy replay bit-identically from disk.
    """
    clone = NetworkGraph(
        net.layers,
        net.input_shape,
        width_factor=net.width_factor,
        taps=net.taps,
        arch=net.arch,
        seed=net.seed,
    )
    clone.params = [
        {k: v.astype(np.float32).astype(np.float64) for k, v in p.items()}
        for p in net.params
    ]
    return clone
