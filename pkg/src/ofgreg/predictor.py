"""A small 3D encoder-decoder that maps (fixed, moving) to a displacement field.

Forward and backward passes are written out by hand on numpy arrays laid out
channel-first, ``(C, X, Y, Z)``. Training code only relies on ``predict``,
``backward`` and ``adam_update_params``, so any other model exposing the same
three calls can be dropped in.

Checkpoint format (little-endian)::

    magic "OFGP", u32 version,
    u32 levels, u32 n_channels, u32 channels[n_channels], f32 leaky slope,
    u32 parameter count, f32 parameters in layout order
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field as dc_field
from itertools import product
from pathlib import Path

import numpy as np

from ofgreg.data import FormatError
from ofgreg.volume import DisplacementField, ScalarVolume
from ofgreg.warp import interp_matrix

CKPT_MAGIC = b"OFGP"
CKPT_VERSION = 1
IN_CHANNELS = 2


@dataclass(frozen=True)
class Architecture:
    levels: int = 2
    channels: tuple[int, ...] = (8, 16)
    slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        # stored as f32 in checkpoints; keep the in-memory value identical
        object.__setattr__(self, "slope", float(np.float32(self.slope)))
        if self.levels < 0 or not self.channels or min(self.channels) < 1:
            raise ValueError("need levels >= 0 and at least one positive channel count")

    def width(self, level: int) -> int:
        return self.channels[min(level, len(self.channels) - 1)]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in their fixed storage order."""
        out = []

        def conv(name, cin, cout, k=3):
            out.append((f"{name}.w", (cout, cin, k, k, k)))
            out.append((f"{name}.b", (cout,)))

        conv("stem", IN_CHANNELS, self.width(0))
        for l in range(1, self.levels + 1):
            conv(f"down{l}", self.width(l - 1), self.width(l))
        for l in range(self.levels - 1, -1, -1):
            conv(f"up{l}", self.width(l + 1) + self.width(l), self.width(l))
        conv("head", self.width(0), 3, k=1)
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())


@dataclass
class PredictorParams:
    arch: Architecture
    tensors: "OrderedDict[str, np.ndarray]"

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    @classmethod
    def from_flat(cls, arch: Architecture, flat: np.ndarray, dtype=np.float32) -> "PredictorParams":
        flat = np.asarray(flat)
        if flat.size != arch.n_params:
            raise ValueError(f"expected {arch.n_params} parameters, got {flat.size}")
        tensors, pos = OrderedDict(), 0
        for name, shape in arch.layout():
            n = int(np.prod(shape))
            tensors[name] = flat[pos:pos + n].reshape(shape).astype(dtype)
            pos += n
        return cls(arch, tensors)

    def astype(self, dtype) -> "PredictorParams":
        return PredictorParams(self.arch, OrderedDict((k, v.astype(dtype)) for k, v in self.tensors.items()))

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.arch, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def zeros_like(self, dtype=None) -> "PredictorParams":
        return PredictorParams(self.arch, OrderedDict(
            (k, np.zeros(v.shape, dtype=dtype or v.dtype)) for k, v in self.tensors.items()))


def init_params(arch: Architecture = Architecture(), seed: int = 0, dtype=np.float32) -> PredictorParams:
    """He-uniform hidden layers, zero biases, and a head scaled to 1e-5 (near-identity start)."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in arch.layout():
        if name.startswith("head"):
            tensors[name] = rng.uniform(-1e-5, 1e-5, shape).astype(dtype)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return PredictorParams(arch, tensors)


# ---------------------------------------------------------------- layers

def _out_dims(dims, stride):
    return tuple((n - 1) // stride + 1 for n in dims)


def im2col(x: np.ndarray, k: int, stride: int = 1) -> np.ndarray:
    """Column matrix of shape (Cin * k^3, n_out) for a zero-padded 'same' convolution."""
    p = k // 2
    cin = x.shape[0]
    ox, oy, oz = _out_dims(x.shape[1:], stride)
    if k == 1 and stride == 1:
        return x.reshape(cin, -1)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    cols = np.empty((cin, k, k, k, ox, oy, oz), dtype=x.dtype)
    for a, b, c in product(range(k), repeat=3):
        cols[:, a, b, c] = xp[:, a:a + stride * ox:stride, b:b + stride * oy:stride, c:c + stride * oz:stride]
    return cols.reshape(cin * k**3, -1)


def col2im(cols: np.ndarray, in_shape, k: int, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    p = k // 2
    cin = in_shape[0]
    ox, oy, oz = _out_dims(in_shape[1:], stride)
    if k == 1 and stride == 1:
        return cols.reshape(in_shape)
    cols = cols.reshape(cin, k, k, k, ox, oy, oz)
    dxp = np.zeros((cin,) + tuple(n + 2 * p for n in in_shape[1:]), dtype=cols.dtype)
    for a, b, c in product(range(k), repeat=3):
        dxp[:, a:a + stride * ox:stride, b:b + stride * oy:stride, c:c + stride * oz:stride] += cols[:, a, b, c]
    return dxp[:, p:-p, p:-p, p:-p]


def _shift_sum(y: np.ndarray, k: int, cout: int, dims) -> np.ndarray:
    """out(q) = sum_d y_d(q + d): combine per-offset responses of a stride-1 conv."""
    p = k // 2
    y = y.reshape((cout, k, k, k) + tuple(dims))
    out = np.zeros((cout,) + tuple(dims), dtype=y.dtype)
    nx, ny, nz = dims
    for a, b, c in product(range(k), repeat=3):
        dx, dy, dz = a - p, b - p, c - p
        out[:, max(0, -dx):nx - max(0, dx), max(0, -dy):ny - max(0, dy), max(0, -dz):nz - max(0, dz)] += \
            y[:, a, b, c, max(0, dx):nx - max(0, -dx), max(0, dy):ny - max(0, -dy), max(0, dz):nz - max(0, -dz)]
    return out


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, cols=None) -> np.ndarray:
    """Zero-padded 'same' convolution (cross-correlation); stride subsamples the output."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[-1]
    dims = _out_dims(x.shape[1:], stride)
    if stride == 1 and k > 1:
        # one GEMM against the unshifted input, then shift-and-add the k^3 responses
        wt = np.ascontiguousarray(np.moveaxis(w, 1, -1)).reshape(-1, cin)
        out = _shift_sum(wt @ x.reshape(cin, -1), k, cout, dims)
        out += b.reshape(-1, 1, 1, 1)
        return out
    if cols is None:
        cols = im2col(x, k, stride)
    out = w.reshape(cout, -1) @ cols
    out += b.reshape(-1, 1)
    return out.reshape((cout,) + dims)


def conv3d_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray, stride: int = 1, cols=None,
                    need_dx: bool = True):
    """Returns (dx, dw, db) for :func:`conv3d`; dx is None when not requested."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[-1]
    g = gout.reshape(cout, -1)
    db = g.sum(axis=1)
    if stride == 1 and k > 1:
        # columns of the output gradient; offsets come out mirrored
        cols_g = im2col(gout, k, 1)
        m = (cols_g @ x.reshape(cin, -1).T).reshape(cout, k, k, k, cin)
        dw = np.moveaxis(m[:, ::-1, ::-1, ::-1], -1, 1).copy()
        dx = None
        if need_dx:
            wf = np.moveaxis(w[:, :, ::-1, ::-1, ::-1], 1, 0).reshape(cin, -1)
            dx = (wf @ cols_g).reshape(x.shape)
        return dx, dw, db
    if cols is None:
        cols = im2col(x, k, stride)
    dw = (g @ cols.T).reshape(w.shape)
    dx = col2im(w.reshape(cout, -1).T @ g, x.shape, k, stride) if need_dx else None
    return dx, dw, db


def leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_backward(pre, g, slope):
    return np.where(pre > 0, g, slope * g)


def _upsample_mats(src_dims, dst_dims, dtype):
    return [interp_matrix(s, d).astype(dtype) for s, d in zip(src_dims, dst_dims)]


def upsample(x: np.ndarray, dst_dims, mats=None) -> np.ndarray:
    mats = mats or _upsample_mats(x.shape[1:], dst_dims, x.dtype)
    return np.einsum("cijk,ai,bj,dk->cabd", x, *mats, optimize=True)


def upsample_backward(g: np.ndarray, mats) -> np.ndarray:
    return np.einsum("cabd,ai,bj,dk->cijk", g, *mats, optimize=True)


# ---------------------------------------------------------------- model

@dataclass
class ForwardCache:
    arch: Architecture
    dims: tuple[int, int, int]
    x: np.ndarray
    inputs: dict = dc_field(default_factory=dict)  # layer name -> conv input
    cols: dict = dc_field(default_factory=dict)  # layer name -> im2col matrix
    pre: dict = dc_field(default_factory=dict)  # layer name -> pre-activation
    mats: dict = dc_field(default_factory=dict)  # decoder level -> upsample matrices


def _check_dims(dims, levels):
    step = 2 ** levels
    if any(d % step for d in dims):
        raise ValueError(f"grid dims {dims} must be divisible by 2**levels = {step}")


def predict_array(params: PredictorParams, f: np.ndarray, m: np.ndarray):
    arch, t = params.arch, params.tensors
    dtype = t["head.w"].dtype
    dims = tuple(f.shape)
    _check_dims(dims, arch.levels)
    x = np.stack([f, m]).astype(dtype)
    cache = ForwardCache(arch, dims, x)

    def layer(name, inp, stride=1, act=True):
        cache.inputs[name] = inp
        cols = None
        if stride > 1:
            cols = cache.cols[name] = im2col(inp, t[f"{name}.w"].shape[-1], stride)
        z = conv3d(inp, t[f"{name}.w"], t[f"{name}.b"], stride, cols)
        if not act:
            return z
        cache.pre[name] = z
        return leaky(z, arch.slope)

    skips = [layer("stem", x)]
    for l in range(1, arch.levels + 1):
        skips.append(layer(f"down{l}", skips[-1], stride=2))
    d = skips[-1]
    for l in range(arch.levels - 1, -1, -1):
        mats = _upsample_mats(d.shape[1:], skips[l].shape[1:], dtype)
        cache.mats[l] = mats
        d = layer(f"up{l}", np.concatenate([upsample(d, None, mats), skips[l]]))
    u = layer("head", d, act=False)
    return u, cache


def backward_array(params: PredictorParams, cache: ForwardCache, gu: np.ndarray) -> PredictorParams:
    arch, t = params.arch, params.tensors
    if cache.arch != arch or gu.shape != (3,) + cache.dims:
        raise ValueError("forward cache does not match these parameters / field gradient")
    dtype = t["head.w"].dtype
    grads = params.zeros_like()
    g = np.asarray(gu, dtype=dtype)

    def layer_back(name, g_out, stride=1, act=True, need_dx=True):
        if act:
            g_out = leaky_backward(cache.pre[name], g_out, arch.slope)
        dx, dw, db = conv3d_backward(cache.inputs[name], t[f"{name}.w"], g_out, stride,
                                     cache.cols.get(name), need_dx)
        grads.tensors[f"{name}.w"] = dw
        grads.tensors[f"{name}.b"] = db
        return dx

    g = layer_back("head", g, act=False)
    skip_grads = [None] * (arch.levels + 1)
    for l in range(arch.levels):
        g_cat = layer_back(f"up{l}", g)
        c_up = arch.width(l + 1)
        skip_grads[l] = g_cat[c_up:]
        g = upsample_backward(g_cat[:c_up], cache.mats[l])
    # g is now the gradient of the deepest encoder output
    for l in range(arch.levels, 0, -1):
        if skip_grads[l] is not None:
            g = g + skip_grads[l]
        g = layer_back(f"down{l}", g, stride=2)
    if skip_grads[0] is not None:
        g = g + skip_grads[0]
    layer_back("stem", g, need_dx=False)
    return grads


def predict(params: PredictorParams, fixed: ScalarVolume, moving: ScalarVolume):
    """Predicted displacement field and the cache needed by :func:`backward`."""
    if fixed.grid.dims != moving.grid.dims:
        raise ValueError("fixed and moving images must share a grid")
    u, cache = predict_array(params, fixed.data, moving.data)
    return DisplacementField(fixed.grid, u), cache


def backward(params: PredictorParams, cache: ForwardCache, field_grad: DisplacementField) -> PredictorParams:
    return backward_array(params, cache, field_grad.data)


# ---------------------------------------------------------------- training update

@dataclass
class AdamState:
    m: PredictorParams
    v: PredictorParams
    t: int = 0

    @classmethod
    def for_params(cls, params: PredictorParams) -> "AdamState":
        return cls(params.zeros_like(np.float64), params.zeros_like(np.float64), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_update_params(params: PredictorParams, grads: PredictorParams, state: AdamState,
                       lr: float = 1e-4, weight_decay: float = 0.0,
                       beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with decoupled weight decay; returns (new params, new state)."""
    for name, g in grads.tensors.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
    t = state.t + 1
    bc1, bc2 = 1.0 - beta1**t, 1.0 - beta2**t
    new_p, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, p in params.tensors.items():
        g = grads.tensors[name].astype(np.float64)
        m = beta1 * state.m.tensors[name] + (1.0 - beta1) * g
        v = beta2 * state.v.tensors[name] + (1.0 - beta2) * g * g
        q = p.astype(np.float64) * (1.0 - lr * weight_decay)
        q = q - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p[name] = q.astype(p.dtype)
        new_m[name], new_v[name] = m, v
    arch = params.arch
    return PredictorParams(arch, new_p), AdamState(PredictorParams(arch, new_m), PredictorParams(arch, new_v), t)


sgd_adam_update = adam_update_params


# ---------------------------------------------------------------- checkpoints

def save_params(path, params: PredictorParams):
    arch = params.arch
    head = struct.pack("<4sIII", CKPT_MAGIC, CKPT_VERSION, arch.levels, len(arch.channels))
    head += struct.pack(f"<{len(arch.channels)}I", *arch.channels)
    head += struct.pack("<fI", arch.slope, arch.n_params)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(params.flat().astype("<f4").tobytes())


def load_params(path) -> PredictorParams:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"truncated checkpoint header: expected at least 16 bytes, got {len(raw)}", path, len(raw))
    magic, version, levels, n_ch = struct.unpack_from("<4sIII", raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", path, 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    head_len = 16 + 4 * n_ch + 8
    if n_ch > 64 or len(raw) < head_len:
        raise FormatError(f"truncated checkpoint header: expected {head_len} bytes, got {len(raw)}", path, len(raw))
    channels = struct.unpack_from(f"<{n_ch}I", raw, 16)
    slope, count = struct.unpack_from("<fI", raw, 16 + 4 * n_ch)
    try:
        arch = Architecture(levels, channels, float(slope))
    except ValueError as err:
        raise FormatError(f"invalid architecture: {err}", path, 8) from None
    if count != arch.n_params:
        raise FormatError(f"parameter count {count} does not match architecture ({arch.n_params})", path, head_len - 4)
    expected = head_len + 4 * count
    if len(raw) != expected:
        raise FormatError(f"size mismatch: expected {expected} bytes, got {len(raw)}", path, min(len(raw), expected))
    flat = np.frombuffer(raw, dtype="<f4", offset=head_len)
    return PredictorParams.from_flat(arch, flat, np.float32)
