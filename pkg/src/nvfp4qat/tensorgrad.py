"""Small reverse-mode autodiff over numpy arrays.

Ops executed while a :class:`Tape` is active are recorded in execution order;
``Tape.backward`` replays them in reverse. Only the operators the segmentation
models need are provided. Convolutions are lowered to ``im2col`` + a matrix
product so a quantized linear kernel can stand in for the matmul.
"""

from __future__ import annotations

import json
import math
import threading
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_local = threading.local()
_DEBUG = False


def set_debug(flag: bool) -> None:
    """Check every op output for non-finite values."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def Parameter(data, name: str | None = None) -> Tensor:
    arr = np.array(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=True, name=name)


class Tape:
    """Ordered op record for one forward/backward pass.

    Use as a context manager; a tape can run ``backward`` once.
    """

    def __init__(self):
        self._records: list = []
        self._produced: set = set()
        self.params: dict = {}  # id -> leaf tensor requiring grad
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents, backward) -> None:
        for p in parents:
            if p.requires_grad and id(p) not in self._produced:
                self.params.setdefault(id(p), p)
        self._records.append((out, parents, backward))
        self._produced.add(id(out))
        out._tape = self

    def backward(self, loss: Tensor) -> dict:
        """Populate ``.grad`` on every leaf that fed the loss; returns {tensor name or id: grad}."""
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; record a new one")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + gp if k in grads else gp
        result = {}
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = np.asarray(g, dtype=p.data.dtype).reshape(p.shape)
            p.grad = g if p.grad is None else p.grad + g
            result[p.name if p.name is not None else k] = p.grad
        return result


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def record_op(data, parents, backward, op: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns parent grads."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), backward)
    return out


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a = _t(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return record_op(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "mul")
    av, bv = a.data, b.data
    return record_op(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * v2 * v))
    out = 0.5 * v * (1.0 + t)

    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * d,)

    return record_op(out, (x,), back, "gelu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op(y, (x,), back, "softmax")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return record_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),), "mean")


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def roll(x: Tensor, shifts, axes) -> Tensor:
    neg = tuple(-s for s in shifts)
    return record_op(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, neg, axes),), "roll")


def concat(tensors, axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return record_op(np.ascontiguousarray(x.data[idx]), (x,), back, "getitem")


def patchify(x: Tensor, p: int) -> Tensor:
    """(N, C, H, W) -> (N, H/p * W/p, C*p*p), patches in row-major order."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"patchify: spatial size {(h, w)} not divisible by patch {p}")
    y = reshape(x, (n, c, h // p, p, w // p, p))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (n, (h // p) * (w // p), c * p * p))


def unpatchify(x: Tensor, p: int, c: int, h: int, w: int) -> Tensor:
    n = x.shape[0]
    y = reshape(x, (n, h // p, w // p, c, p, p))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (n, c, h, w))


def window_partition(x: Tensor, ws: int) -> Tensor:
    """(N, H, W, C) -> (N * H/ws * W/ws, ws*ws, C)."""
    n, h, w, c = x.shape
    if h % ws or w % ws:
        raise ValueError(f"window_partition: grid {(h, w)} not divisible by window {ws}")
    y = reshape(x, (n, h // ws, ws, w // ws, ws, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (n * (h // ws) * (w // ws), ws * ws, c))


def window_reverse(x: Tensor, ws: int, h: int, w: int) -> Tensor:
    n = x.shape[0] // ((h // ws) * (w // ws))
    c = x.shape[-1]
    y = reshape(x, (n, h // ws, w // ws, ws, ws, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (n, h, w, c))


def window_shift(x: Tensor, shift: int) -> Tensor:
    """Cyclic shift of an (N, H, W, C) grid by ``-shift`` on both spatial axes."""
    return roll(x, (-shift, -shift), (1, 2))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D ``b`` (any leading dims on ``a``) or equal-rank batches."""
    a, b = _t(a), _t(b)
    av, bv = a.data, b.data
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul: shape mismatch {av.shape} @ {bv.shape}")
    if bv.ndim == 2:
        def back(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        if av.shape[:-2] != bv.shape[:-2]:
            raise ValueError(f"matmul: batch dims differ {av.shape} @ {bv.shape}")

        def back(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return record_op(av @ bv, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, kernel=None) -> Tensor:
    """``x @ w (+ b)`` over the last axis; ``kernel`` swaps in a quantized product."""
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = kernel(x2, w) if kernel is not None else matmul(x2, w)
    if x.ndim != 2:
        y = reshape(y, lead + (w.shape[1],))
    return add(y, b) if b is not None else y


def _im2col_array(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im_array(cols: np.ndarray, padded_shape, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    g = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += g[..., i, j].transpose(0, 3, 1, 2)
    return out


def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def im2col(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"im2col: kernel {k} too large for input {x.shape}")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    pshape = xp.shape

    def back(g):
        gp = _col2im_array(g, pshape, k, stride, ho, wo)
        if padding:
            gp = gp[:, :, padding:-padding, padding:-padding]
        return (gp,)

    return record_op(_im2col_array(xp, k, stride, ho, wo), (x,), back, "im2col")


def col2im(cols: Tensor, n: int, c: int, h: int, w: int, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Scatter-add (N*h*w, c*k*k) patches into (N, c, Ho, Wo); adjoint of :func:`im2col`."""
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    full = _col2im_array(cols.data, (n, c, hf, wf), k, stride, h, w)
    out = full[:, :, padding:hf - padding, padding:wf - padding] if padding else full

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        return (_im2col_array(gp, k, stride, h, w),)

    return record_op(np.ascontiguousarray(out), (cols,), back, "col2im")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           kernel=None) -> Tensor:
    """w: (Cout, Cin, k, k). Lowered to im2col @ w.reshape(Cout, -1).T."""
    n, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    if cin != c:
        raise ValueError(f"conv2d: input channels {c} != weight channels {cin}")
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(wd, k, stride, padding)
    cols = im2col(x, k, stride, padding)
    wm = transpose(reshape(w, (cout, cin * k * k)), (1, 0))
    y = linear(cols, wm, None, kernel)
    y = transpose(reshape(y, (n, ho, wo, cout)), (0, 3, 1, 2))
    assert y.shape == (n, cout, ho, wo)
    return add(y, reshape(b, (1, cout, 1, 1))) if b is not None else y


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
                     kernel=None) -> Tensor:
    """w: (Cin, Cout, k, k). Output size (H-1)*stride - 2*padding + k."""
    n, c, h, wd = x.shape
    cin, cout, k, _ = w.shape
    if cin != c:
        raise ValueError(f"conv_transpose2d: input channels {c} != weight channels {cin}")
    xm = reshape(transpose(x, (0, 2, 3, 1)), (n * h * wd, c))
    cols = linear(xm, reshape(w, (cin, cout * k * k)), None, kernel)
    y = col2im(cols, n, cout, h, wd, k, stride, padding)
    return add(y, reshape(b, (1, cout, 1, 1))) if b is not None else y


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    gv = gamma.data
    d = v.shape[-1]

    def back(g):
        dxhat = g * gv
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = g.reshape(-1, d)
        return dx, (red * xhat.reshape(-1, d)).sum(0), red.sum(0)

    return record_op(xhat * gv + beta.data, (x, gamma, beta), back, "layernorm")


class BatchNormState:
    """Running statistics for :func:`batchnorm2d` (momentum 0.1, eps 1e-5)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    v = x.data
    c = v.shape[1]
    shp = (1, c, 1, 1)
    if training:
        n = v.size // c
        mu = v.mean(axis=(0, 2, 3))
        var = v.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
        unbiased = var * n / max(n - 1, 1)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mu, var = state.running_mean.astype(v.dtype), state.running_var.astype(v.dtype)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(v.dtype)
    xhat = (v - mu.reshape(shp)) * inv.reshape(shp)
    gv = gamma.data.reshape(shp)
    out = xhat * gv + beta.data.reshape(shp)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gv
        if training:
            n = v.size // c
            dx = inv.reshape(shp) / n * (n * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                         - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = dxhat * inv.reshape(shp)
        return dx, dgamma, dbeta

    return record_op(out, (x, gamma, beta), back, "batchnorm2d")


# --------------------------------------------------------------------------
# testing + persistence helpers
# --------------------------------------------------------------------------


def gradcheck(fn, arrays, eps: float = 1e-3, max_coords: int | None = 64, directions: int = 2, seed: int = 0,
              fd_dtype=np.float64):
    """Central-difference check of ``fn(*tensors) -> scalar Tensor``.

    The analytic gradient is taken at the arrays' own dtype; the finite
    differences are evaluated in ``fd_dtype`` so FP32 cancellation does not
    swamp the oracle. Checks up to ``max_coords`` sampled coordinates per input
    plus ``directions`` random directional derivatives over all inputs jointly
    and returns the worst norm-wise relative error.
    """
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.array(a, copy=True), requires_grad=True) for a in arrays]
    arrays = [np.array(a, dtype=fd_dtype or np.asarray(a).dtype) for a in arrays]

    def value(arrs):
        return float(fn(*[Tensor(a) for a in arrs]).data)

    with Tape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    def rel(a, n):
        a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        return float(np.linalg.norm(a - n) / denom)

    worst = 0.0
    for idx, arr in enumerate(arrays):
        flat_n = arr.size
        coords = np.arange(flat_n) if max_coords is None or flat_n <= max_coords else \
            rng.choice(flat_n, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for j, ci in enumerate(coords):
            pert = [a.copy() for a in arrays]
            pert[idx].reshape(-1)[ci] += eps
            fp = value(pert)
            pert[idx].reshape(-1)[ci] -= 2 * eps
            fm = value(pert)
            num[j] = (fp - fm) / (2 * eps)
        worst = max(worst, rel(analytic[idx].reshape(-1)[coords], num))
    for _ in range(directions):
        dirs = [rng.standard_normal(a.shape).astype(a.dtype) for a in arrays]
        norm = math.sqrt(sum(float((d.astype(np.float64) ** 2).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        fp = value([a + eps * d for a, d in zip(arrays, dirs)])
        fm = value([a - eps * d for a, d in zip(arrays, dirs)])
        num = (fp - fm) / (2 * eps)
        ana = sum(float((g.astype(np.float64) * d).sum()) for g, d in zip(analytic, dirs))
        worst = max(worst, rel([ana], [num]))
    return worst


def save_checkpoint(directory, tensors: dict, config: dict | None = None) -> Path:
    """JSON manifest plus one little-endian FP32 blob per named array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(tensors.items()):
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4")
        fname = f"t{i:04d}.bin"
        (directory / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "file": fname})
    manifest = {"format": "nvfp4qat-checkpoint/1", "tensors": entries, "config": config or {}}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for e in manifest["tensors"]:
        raw = (directory / e["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        out[e["name"]] = arr.reshape(e["shape"])
    return out, manifest.get("config", {})
