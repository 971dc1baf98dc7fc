"""Minimal feed-forward network runtime.

Everything is float64 numpy, deterministic, and single-threaded by design:
training runs here are small, and bit-identical reruns matter more than
throughput. Layers are plain descriptors; parameters live in a list of dicts
aligned with the layer sequence, so forward/backward stay pure functions.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dense", "Conv2D", "MaxPool", "Relu", "Sigmoid", "Softmax", "Flatten",
    "NetworkSpec", "AdamState", "ParamFileError",
    "init_params", "forward", "backward", "init_adam", "adam_step",
    "save_params", "load_params", "gradient_check", "num_parameters",
]

PARAM_MAGIC = b"BSNP"
PARAM_VERSION = 1


class ParamFileError(ValueError):
    """Raised when a parameter file is missing, corrupt, or mismatched."""


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class Conv2D:
    """Valid-padding 2-d convolution, square kernel."""
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    """Non-overlapping window max pool; trailing rows/cols that do not fill
    a window are dropped."""
    window: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class Softmax:
    """Softmax over the last axis."""


@dataclass(frozen=True)
class Flatten:
    pass


def _layer_name(layer):
    return type(layer).__name__


def _out_shape(layer, shape, index):
    """Shape of one layer's output given its input shape; raises on misfit."""
    name = _layer_name(layer)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ValueError(
                f"layer {index} (Dense): expects 1-d input, got {shape}; insert Flatten")
        if shape[0] != layer.n_in:
            raise ValueError(
                f"layer {index} (Dense): expects {layer.n_in} features, got {shape[0]}")
        return (layer.n_out,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise ValueError(f"layer {index} (Conv2D): expects (C,H,W) input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise ValueError(
                f"layer {index} (Conv2D): expects {layer.in_channels} channels, got {c}")
        if layer.kernel < 1 or layer.stride < 1:
            raise ValueError(f"layer {index} (Conv2D): kernel and stride must be >= 1")
        if h < layer.kernel or w < layer.kernel:
            raise ValueError(
                f"layer {index} (Conv2D): kernel {layer.kernel} exceeds input {h}x{w}")
        oh = (h - layer.kernel) // layer.stride + 1
        ow = (w - layer.kernel) // layer.stride + 1
        return (layer.out_channels, oh, ow)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ValueError(f"layer {index} (MaxPool): expects (C,H,W) input, got {shape}")
        c, h, w = shape
        if layer.window < 1 or h < layer.window or w < layer.window:
            raise ValueError(
                f"layer {index} (MaxPool): window {layer.window} does not fit input {h}x{w}")
        return (c, h // layer.window, w // layer.window)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, (Relu, Sigmoid, Softmax)):
        return shape
    raise ValueError(f"layer {index}: unknown layer type {name}")


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape plus an ordered layer sequence; validated on construction."""
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if any(d < 1 for d in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")
        self.shapes()  # raises with layer index on any mismatch

    def shapes(self):
        """Per-layer output shapes, index 0 = input shape."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            out.append(_out_shape(layer, out[-1], i))
        return out

    @property
    def output_shape(self):
        return self.shapes()[-1]

    def canonical(self):
        parts = ["in=" + "x".join(str(d) for d in self.input_shape)]
        for layer in self.layers:
            if isinstance(layer, Dense):
                parts.append(f"Dense({layer.n_in},{layer.n_out})")
            elif isinstance(layer, Conv2D):
                parts.append(
                    f"Conv2D({layer.in_channels},{layer.out_channels},"
                    f"k{layer.kernel},s{layer.stride})")
            elif isinstance(layer, MaxPool):
                parts.append(f"MaxPool({layer.window})")
            else:
                parts.append(_layer_name(layer))
        return "|".join(parts)

    def fingerprint(self):
        return hashlib.sha256(self.canonical().encode()).digest()[:16]


def _param_shapes(spec):
    """List aligned with layers: dict of array name -> shape (empty if none)."""
    out = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            out.append({"w": (layer.n_out, layer.n_in), "b": (layer.n_out,)})
        elif isinstance(layer, Conv2D):
            out.append({
                "w": (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                "b": (layer.out_channels,),
            })
        else:
            out.append({})
    return out


def init_params(spec, rng):
    """Seeded uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    params = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            a = np.sqrt(6.0 / (layer.n_in + layer.n_out))
            params.append({
                "w": rng.uniform(-a, a, size=(layer.n_out, layer.n_in)),
                "b": np.zeros(layer.n_out),
            })
        elif isinstance(layer, Conv2D):
            k = layer.kernel
            fan_in = layer.in_channels * k * k
            fan_out = layer.out_channels * k * k
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params.append({
                "w": rng.uniform(-a, a, size=(layer.out_channels, layer.in_channels, k, k)),
                "b": np.zeros(layer.out_channels),
            })
        else:
            params.append({})
    return params


def num_parameters(params):
    return sum(int(a.size) for p in params for a in p.values())


def _im2col(x, kernel, stride):
    # x: (N, C, H, W) -> cols (N, OH, OW, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]          # (N, C, OH, OW, k, k)
    win = win.transpose(0, 2, 3, 1, 4, 5)              # (N, OH, OW, C, k, k)
    n, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win).reshape(n, oh, ow, -1)


def forward(spec, params, x):
    """Run the network. Accepts one sample (spec.input_shape) or a batch with
    a leading axis. Returns (output, cache); pass the cache to backward().
    Read-only with respect to params."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        xb, single = x[None], True
    elif x.ndim == len(spec.input_shape) + 1 and x.shape[1:] == spec.input_shape:
        xb, single = x, False
    else:
        raise ValueError(f"input shape {x.shape} does not match spec {spec.input_shape}")

    steps = []
    h = xb
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            y = h @ params[i]["w"].T + params[i]["b"]
            steps.append(("dense", h))
        elif isinstance(layer, Conv2D):
            cols = _im2col(h, layer.kernel, layer.stride)
            n, oh, ow, _ = cols.shape
            wmat = params[i]["w"].reshape(layer.out_channels, -1)
            y = cols.reshape(n * oh * ow, -1) @ wmat.T + params[i]["b"]
            y = y.reshape(n, oh, ow, layer.out_channels).transpose(0, 3, 1, 2)
            steps.append(("conv", (cols, h.shape)))
        elif isinstance(layer, MaxPool):
            w = layer.window
            n, c, hh, ww = h.shape
            ho, wo = hh // w, ww // w
            blocks = h[:, :, :ho * w, :wo * w].reshape(n, c, ho, w, wo, w)
            blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, w * w)
            idx = blocks.argmax(axis=-1)
            y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
            steps.append(("pool", (idx, h.shape)))
        elif isinstance(layer, Relu):
            y = np.maximum(h, 0.0)
            steps.append(("relu", h))
        elif isinstance(layer, Sigmoid):
            z = np.clip(h, -60.0, 60.0)
            y = 1.0 / (1.0 + np.exp(-z))
            steps.append(("sigmoid", y))
        elif isinstance(layer, Softmax):
            z = h - h.max(axis=-1, keepdims=True)
            e = np.exp(z)
            y = e / e.sum(axis=-1, keepdims=True)
            steps.append(("softmax", y))
        elif isinstance(layer, Flatten):
            y = h.reshape(h.shape[0], -1)
            steps.append(("flatten", h.shape))
        h = y
    cache = {"spec": spec, "params": params, "steps": steps, "single": single}
    return (h[0] if single else h), cache


def backward(cache, grad_out):
    """Backpropagate an upstream gradient through a cached forward pass.

    Returns (param_grads, grad_input) where param_grads mirrors the params
    structure (gradients summed over the batch).
    """
    spec, params = cache["spec"], cache["params"]
    g = np.asarray(grad_out, dtype=np.float64)
    if cache["single"]:
        g = g[None]
    grads = [{} for _ in spec.layers]
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        kind, saved = cache["steps"][i]
        if kind == "dense":
            x = saved
            grads[i]["w"] = g.T @ x
            grads[i]["b"] = g.sum(axis=0)
            g = g @ params[i]["w"]
        elif kind == "conv":
            cols, in_shape = saved
            n, oh, ow, ck2 = cols.shape
            oc = layer.out_channels
            g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
            wmat = params[i]["w"].reshape(oc, -1)
            grads[i]["w"] = (g2.T @ cols.reshape(n * oh * ow, ck2)).reshape(params[i]["w"].shape)
            grads[i]["b"] = g2.sum(axis=0)
            dcols = (g2 @ wmat).reshape(n, oh, ow, in_shape[1], layer.kernel, layer.kernel)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)  # (N, C, OH, OW, k, k)
            dx = np.zeros(in_shape)
            s = layer.stride
            for a in range(layer.kernel):
                for b in range(layer.kernel):
                    dx[:, :, a:a + s * oh:s, b:b + s * ow:s] += dcols[:, :, :, :, a, b]
            g = dx
        elif kind == "pool":
            idx, in_shape = saved
            w = layer.window
            n, c, hh, ww = in_shape
            ho, wo = hh // w, ww // w
            blocks = np.zeros((n, c, ho, wo, w * w))
            np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
            blocks = blocks.reshape(n, c, ho, wo, w, w).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros(in_shape)
            dx[:, :, :ho * w, :wo * w] = blocks.reshape(n, c, ho * w, wo * w)
            g = dx
        elif kind == "relu":
            g = g * (saved > 0)
        elif kind == "sigmoid":
            y = saved
            g = g * y * (1.0 - y)
        elif kind == "softmax":
            y = saved
            g = y * (g - (g * y).sum(axis=-1, keepdims=True))
        elif kind == "flatten":
            g = g.reshape(saved)
    if cache["single"]:
        g = g[0]
    return grads, g


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params, lr):
    return AdamState(
        lr=lr,
        m=[{k: np.zeros_like(a) for k, a in p.items()} for p in params],
        v=[{k: np.zeros_like(a) for k, a in p.items()} for p in params],
    )


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns new params; mutates state.
    Rejects non-finite gradients, naming the offending layer."""
    if len(grads) != len(params):
        raise ValueError("gradient structure does not match parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if set(p) != set(g):
            raise ValueError(f"layer {i}: gradient keys {set(g)} != parameter keys {set(p)}")
        for k, a in g.items():
            if a.shape != p[k].shape:
                raise ValueError(f"layer {i}: gradient {k} shape {a.shape} != {p[k].shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"layer {i}: non-finite gradient in {k}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        new = {}
        for k, a in p.items():
            m = state.m[i][k] = state.beta1 * state.m[i][k] + (1.0 - state.beta1) * g[k]
            v = state.v[i][k] = state.beta2 * state.v[i][k] + (1.0 - state.beta2) * g[k] ** 2
            new[k] = a - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append(new)
    return out


def save_params(path, spec, params):
    """Binary parameter file: magic, version, spec fingerprint, shaped float64
    arrays in layer order, sha256 trailer. Little-endian throughout."""
    expect = _param_shapes(spec)
    arrays = []
    for i, shapes in enumerate(expect):
        for k in sorted(shapes):
            a = params[i][k]
            if a.shape != shapes[k]:
                raise ValueError(f"layer {i}: {k} shape {a.shape} != spec {shapes[k]}")
            arrays.append(np.ascontiguousarray(a, dtype="<f8"))
    blob = bytearray()
    blob += PARAM_MAGIC
    blob += struct.pack("<I", PARAM_VERSION)
    blob += spec.fingerprint()
    blob += struct.pack("<I", len(arrays))
    for a in arrays:
        blob += struct.pack("<I", a.ndim)
        blob += struct.pack(f"<{a.ndim}I", *a.shape)
        blob += a.tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_params(path, spec):
    """Inverse of save_params; validates magic, fingerprint, checksum, and
    shapes against spec before building anything."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ParamFileError(f"cannot read parameter file {path}: {e}") from e
    if len(blob) < 4 + 4 + 16 + 4 + 32:
        raise ParamFileError(f"{path}: truncated parameter file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ParamFileError(f"{path}: checksum mismatch, file is corrupted")
    if body[:4] != PARAM_MAGIC:
        raise ParamFileError(f"{path}: bad magic {body[:4]!r}, not a parameter file")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != PARAM_VERSION:
        raise ParamFileError(f"{path}: unsupported version {version}")
    fp = body[8:24]
    if fp != spec.fingerprint():
        raise ParamFileError(
            f"{path}: network mismatch: file fingerprint {fp.hex()} != "
            f"{spec.fingerprint().hex()} for spec {spec.canonical()}")
    (n_arrays,) = struct.unpack_from("<I", body, 24)
    expect = _param_shapes(spec)
    want = [(i, k, shapes[k]) for i, shapes in enumerate(expect) for k in sorted(shapes)]
    if n_arrays != len(want):
        raise ParamFileError(f"{path}: {n_arrays} arrays, spec needs {len(want)}")
    off = 28
    params = [{} for _ in spec.layers]
    for i, k, shape in want:
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        if dims != shape:
            raise ParamFileError(f"{path}: layer {i} {k} shape {dims} != spec {shape}")
        count = int(np.prod(dims))
        end = off + 8 * count
        if end > len(body):
            raise ParamFileError(f"{path}: truncated array data")
        params[i][k] = np.frombuffer(body[off:end], dtype="<f8").reshape(dims).copy()
        off = end
    if off != len(body):
        raise ParamFileError(f"{path}: {len(body) - off} trailing bytes")
    return params


def gradient_check(spec, params, x, loss_fn, perturbation=1e-6, max_coords=None, rng=None):
    """Max relative error between backprop and central finite differences.

    loss_fn maps the network output to (scalar, grad_wrt_output) and must be
    deterministic. Error metric per coordinate:
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    max_coords caps the coordinates checked per parameter array (seeded by rng);
    None checks every coordinate.
    """
    y, cache = forward(spec, params, x)
    _, gy = loss_fn(y)
    grads, _ = backward(cache, gy)
    h = float(perturbation)
    worst = 0.0
    for i, p in enumerate(params):
        for k, a in p.items():
            flat = a.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                if rng is None:
                    raise ValueError("max_coords requires an rng")
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            gflat = grads[i][k].reshape(-1)
            for c in coords:
                keep = flat[c]
                flat[c] = keep + h
                lp, _ = loss_fn(forward(spec, params, x)[0])
                flat[c] = keep - h
                lm, _ = loss_fn(forward(spec, params, x)[0])
                flat[c] = keep
                num = (lp - lm) / (2.0 * h)
                ana = gflat[c]
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
                if rel > worst:
                    worst = rel
    return worst
