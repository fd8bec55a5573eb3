"""Dense float tensors with reverse-mode automatic differentiation.

Small deliberately: row-major numpy buffers, float32 by default, and only
the operations the sequence models in this package need. Gradients are
accumulated by walking the recorded operation graph in reverse topological
order. Broadcasting is restricted to what the models use (per-channel
affine parameters, per-example scalar coefficients).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import NumericalError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; distinct streams never collide."""
    return np.random.Generator(np.random.Philox(key=(np.uint64(seed) << np.uint64(16)) + np.uint64(stream)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._op = "leaf"
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # operator sugar; scalars stay python floats so float32 never promotes
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data, op, parents):
    """Create a result tensor; returns (tensor, record_backward)."""
    rec = _grad_enabled and any(p.requires_grad for p in parents)
    t = Tensor(data, dtype=data.dtype)
    t.requires_grad = rec
    if rec:
        t._op = op
        t._parents = parents
    return t, rec


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def topo_order(root: Tensor):
    """Operation nodes reachable from root, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor):
    """Reverse-mode sweep from a scalar output; visits each node once."""
    if out.data.size != 1:
        raise ValueError("backward requires a scalar output")
    out.grad = np.ones_like(out.data)
    for node in reversed(topo_order(out)):
        if node._bwd is not None:
            node._bwd(node.grad)


def trace(root: Tensor):
    """Recorded graph as (op, parent_ids, node_id) in topological order."""
    return [(n._op, tuple(id(p) for p in n._parents), id(n)) for n in topo_order(root)]


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    out, rec = _node(a.data + b.data, "add", (a, b))
    if rec:
        def _bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        out._bwd = _bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out, rec = _node(a.data - b.data, "sub", (a, b))
    if rec:
        def _bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))
        out._bwd = _bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out, rec = _node(a.data * b.data, "mul", (a, b))
    if rec:
        def _bwd(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        out._bwd = _bwd
    return out


def _scale(a: Tensor, c: float) -> Tensor:
    out, rec = _node(a.data * c, "scale", (a,))
    if rec:
        out._bwd = lambda g: _accum(a, g * c)
    return out


def _shift(a: Tensor, c: float) -> Tensor:
    out, rec = _node(a.data + c, "shift", (a,))
    if rec:
        out._bwd = lambda g: _accum(a, g)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out, rec = _node(ad @ bd, "matmul", (a, b))
    if rec:
        def _bwd(g):
            if a.requires_grad:
                _accum(a, g @ np.swapaxes(bd, -1, -2))
            if b.requires_grad:
                if bd.ndim == 2:
                    k, n = bd.shape
                    _accum(b, ad.reshape(-1, k).T @ g.reshape(-1, n))
                else:
                    _accum(b, np.swapaxes(ad, -1, -2) @ g)
        out._bwd = _bwd
    return out


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out, rec = _node(np.swapaxes(a.data, ax1, ax2), "swap_axes", (a,))
    if rec:
        out._bwd = lambda g: _accum(a, np.swapaxes(g, ax1, ax2))
    return out


def transpose_last2(a: Tensor) -> Tensor:
    return swap_axes(a, -1, -2)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out, rec = _node(a.data.reshape(shape), "reshape", (a,))
    if rec:
        out._bwd = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    n_frames = {p.data.shape[-2] for p in parts if p.data.ndim >= 2}
    if len(n_frames) > 1:
        raise ValueError(f"concat_channels frame counts differ: {sorted(n_frames)}")
    out, rec = _node(np.concatenate([p.data for p in parts], axis=-1), "concat", tuple(parts))
    if rec:
        widths = [p.data.shape[-1] for p in parts]
        def _bwd(g):
            off = 0
            for p, w in zip(parts, widths):
                _accum(p, g[..., off:off + w])
                off += w
        out._bwd = _bwd
    return out


def slice_frames(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.data.shape[-2]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"frame slice [{start}:{stop}] outside 0..{n}")
    out, rec = _node(np.ascontiguousarray(a.data[..., start:stop, :]), "slice_frames", (a,))
    if rec:
        def _bwd(g):
            buf = np.zeros_like(a.data)
            buf[..., start:stop, :] = g
            _accum(a, buf)
        out._bwd = _bwd
    return out


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    c = a.data.shape[-1]
    if not (0 <= start <= stop <= c):
        raise ValueError(f"channel slice [{start}:{stop}] outside 0..{c}")
    out, rec = _node(np.ascontiguousarray(a.data[..., start:stop]), "slice_channels", (a,))
    if rec:
        def _bwd(g):
            buf = np.zeros_like(a.data)
            buf[..., start:stop] = g
            _accum(a, buf)
        out._bwd = _bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each feature vector (last axis), then apply a per-channel affine."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out, rec = _node(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias))
    if rec:
        def _bwd(g):
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
            _accum(bias, _unbroadcast(g, bias.data.shape))
            if x.requires_grad:
                gh = g * gain.data
                _accum(x, inv * (gh - gh.mean(axis=-1, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))
        out._bwd = _bwd
    return out


def adain(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Replace per-channel statistics over the frame axis with given affine targets."""
    xd = x.data
    mu = xd.mean(axis=-2, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out, rec = _node(xhat * scale.data + shift.data, "adain", (x, scale, shift))
    if rec:
        def _bwd(g):
            _accum(scale, _unbroadcast(g * xhat, scale.data.shape))
            _accum(shift, _unbroadcast(g, shift.data.shape))
            if x.requires_grad:
                gh = g * scale.data
                _accum(x, inv * (gh - gh.mean(axis=-2, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-2, keepdims=True)))
        out._bwd = _bwd
    return out


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out, rec = _node(x.data * s, "silu", (x,))
    if rec:
        out._bwd = lambda g: _accum(x, g * s * (1.0 + x.data * (1.0 - s)))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out, rec = _node(y, "softmax", (x,))
    if rec:
        out._bwd = lambda g: _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return out


def mean(x: Tensor) -> Tensor:
    out, rec = _node(np.asarray(x.data.mean(), dtype=x.data.dtype), "mean", (x,))
    if rec:
        out._bwd = lambda g: _accum(x, np.full_like(x.data, g / x.data.size))
    return out


def mean_frames(x: Tensor) -> Tensor:
    """Average over the frame axis; (..., N, C) -> (..., C)."""
    n = x.data.shape[-2]
    out, rec = _node(x.data.mean(axis=-2), "mean_frames", (x,))
    if rec:
        out._bwd = lambda g: _accum(x, np.broadcast_to(g[..., None, :] / n, x.data.shape).copy())
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shapes differ: {a.data.shape} vs {b.data.shape}")
    r = a.data - b.data
    out, rec = _node(np.asarray((r * r).mean(), dtype=r.dtype), "mse", (a, b))
    if rec:
        def _bwd(g):
            d = (2.0 / r.size) * g * r
            _accum(a, d)
            _accum(b, -d)
        out._bwd = _bwd
    return out


def huber(a: Tensor, b: Tensor, delta: float) -> Tensor:
    """Mean Huber penalty of a - b: quadratic inside |r| < delta, linear outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = a.data - b.data
    absr = np.abs(r)
    per = np.where(absr < delta, 0.5 * r * r, delta * (absr - 0.5 * delta))
    out, rec = _node(np.asarray(per.mean(), dtype=r.dtype), "huber", (a, b))
    if rec:
        def _bwd(g):
            d = g * np.clip(r, -delta, delta) / r.size
            _accum(a, d)
            _accum(b, -d)
        out._bwd = _bwd
    return out


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out, rec = _node(table.data[ids], "embedding", (table,))
    if rec:
        def _bwd(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            _accum(table, buf)
        out._bwd = _bwd
    return out


def unfold_frames(x: Tensor, kernel: int, stride: int, pad: int = 0) -> Tensor:
    """Sliding frame windows: (..., N, C) -> (..., N_out, kernel*C)."""
    xd = x.data
    if pad:
        width = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
        xd = np.pad(xd, width)
    n = xd.shape[-2]
    if n < kernel:
        raise ValueError(f"{n} frames shorter than kernel {kernel}")
    n_out = (n - kernel) // stride + 1
    cols = [xd[..., k:k + (n_out - 1) * stride + 1:stride, :] for k in range(kernel)]
    data = np.concatenate(cols, axis=-1)
    out, rec = _node(np.ascontiguousarray(data), "unfold", (x,))
    if rec:
        c = x.data.shape[-1]
        def _bwd(g):
            buf = np.zeros_like(xd)
            for k in range(kernel):
                buf[..., k:k + (n_out - 1) * stride + 1:stride, :] += g[..., k * c:(k + 1) * c]
            if pad:
                buf = buf[..., pad:buf.shape[-2] - pad, :]
            _accum(x, buf)
        out._bwd = _bwd
    return out


def repeat_frames(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the frame axis."""
    out, rec = _node(np.repeat(x.data, factor, axis=-2), "repeat", (x,))
    if rec:
        def _bwd(g):
            shp = g.shape[:-2] + (x.data.shape[-2], factor, g.shape[-1])
            _accum(x, g.reshape(shp).sum(axis=-2))
        out._bwd = _bwd
    return out


def detach(x: Tensor) -> Tensor:
    return x.detach()


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update applied in place; None grads count as zero."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint file format

CKPT_MAGIC = b"SHEGCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict):
    """Write named float32 arrays as a flat little-endian binary file."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    from .errors import DataError

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes after last tensor")
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_gradient(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar f at x, element by element."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def gradient_check(fn, arrays, h: float = 1e-3, min_mag: float = 1e-2):
    """Compare autodiff gradients of scalar fn(*tensors) against central differences.

    Runs in float64 regardless of the default dtype. Returns the worst
    relative error over entries whose reference magnitude exceeds min_mag.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*tensors)
    backward(out)
    worst = 0.0
    for i, (t, a) in enumerate(zip(tensors, arrays)):
        def f(x, i=i):
            probe = [Tensor(arr, dtype=np.float64) for arr in arrays]
            probe[i] = Tensor(x, dtype=np.float64)
            with no_grad():
                return float(fn(*probe).data)
        ref = numeric_gradient(f, a.copy(), h)
        got = t.grad if t.grad is not None else np.zeros_like(a)
        mask = np.abs(ref) > min_mag
        if mask.any():
            rel = np.abs(got - ref)[mask] / np.abs(ref)[mask]
            worst = max(worst, float(rel.max()))
    return worst
