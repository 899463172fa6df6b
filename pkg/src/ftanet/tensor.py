"""A small dense-tensor library with reverse-mode automatic differentiation.

Only the operations FTANet needs are provided. Every op takes and returns
:class:`Tensor` objects backed by numpy arrays; the dtype of the inputs is
preserved, so the same graph runs in float32 for training and float64 for
gradient checking.

Spatial ops use a channels-last layout and accept optional leading batch
axes: ``conv1d`` expects ``(..., L, Cin)`` and ``conv2d`` expects
``(H, W, Cin)`` or ``(N, H, W, Cin)``.
"""
from __future__ import annotations

import os
import struct
from collections.abc import Callable, Sequence

import numpy as np

from .errors import CorruptFileError, ShapeError, UnsupportedVersionError

BCE_EPS = 1e-7


class Tensor:
    """A node in the computation graph.

    ``grad`` is only populated on leaf tensors created with
    ``requires_grad=True``; it accumulates across :func:`backward` calls
    until cleared with :func:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of several same-shape tensors."""
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("add_n needs tensors of identical shape")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def backward(g):
        return tuple(g for _ in tensors)

    return _make(out, tensors, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    # np.maximum lets NaN through so corrupt inputs surface as a non-finite loss
    return _make(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalise along ``axis`` (max-shifted for stability)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(y, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    y = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return _make(y, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def index(x: Tensor, i: int, axis: int) -> Tensor:
    """Select position ``i`` along ``axis``, dropping that axis."""
    def backward(g):
        out = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = i
        out[tuple(sl)] = g
        return (out,)

    return _make(np.take(x.data, i, axis=axis), (x,), backward)


def row_avg_pool(s: Tensor) -> Tensor:
    """Mean over the time axis of ``(..., F, T, C)``, giving ``(..., F, C)``."""
    return mean(s, axis=-2)


def col_avg_pool(s: Tensor) -> Tensor:
    """Mean over the frequency axis of ``(..., F, T, C)``, giving ``(..., T, C)``."""
    return mean(s, axis=-3)


def global_avg_pool(s: Tensor) -> Tensor:
    """Mean over both spatial axes of ``(..., F, T, C)``, giving ``(..., C)``."""
    return mean(s, axis=(-3, -2))


# ----------------------------------------------------------------------
# linear algebra and convolutions
# ----------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, w.shape[1]).sum(axis=0)

    return _make(y, parents, backward)


def conv1d(x: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation.

    ``x`` is ``(..., L, Cin)``, ``k`` is ``(K, Cin, Cout)`` with odd ``K``
    and the result is ``(..., L, Cout)``.
    """
    if k.ndim != 3 or x.ndim < 2:
        raise ShapeError("conv1d expects x (..., L, Cin) and k (K, Cin, Cout)")
    K, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if K % 2 != 1:
        raise ShapeError("conv1d: kernel length must be odd")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({cout},)")
    lead = x.shape[:-2]
    L = x.shape[-2]
    p = K // 2
    xb = x.data.reshape((-1, L, cin))
    xp = np.zeros((xb.shape[0], L + 2 * p, cin), dtype=x.dtype)
    xp[:, p:p + L] = xb
    y = np.zeros((xb.shape[0], L, cout), dtype=np.result_type(x.dtype, k.dtype))
    for i in range(K):
        y += xp[:, i:i + L] @ k.data[i]
    if bias is not None:
        y += bias.data
    parents = (x, k) if bias is None else (x, k, bias)

    def backward(g):
        gb3 = g.reshape((-1, L, cout))
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(K):
                gxp[:, i:i + L] += gb3 @ k.data[i].T
            gx = gxp[:, p:p + L].reshape(x.shape)
        if k.requires_grad:
            g2 = gb3.reshape(-1, cout)
            gk = np.stack([xp[:, i:i + L].reshape(-1, cin).T @ g2 for i in range(K)])
        if bias is None:
            return gx, gk
        return gx, gk, gb3.sum(axis=(0, 1))

    return _make(y.reshape(lead + (L, cout)), parents, backward)


def _conv2d_same(x4, k, bias_data):
    """Stride-1 same-padded conv on a batch; returns output and padded input.

    The padded input is flattened over (row, column) so that each kernel
    offset reads one contiguous slice; the output is computed on the padded
    width and cropped.
    """
    N, H, W, cin = x4.shape
    Kh, Kw, _, cout = k.shape
    ph, pw = Kh // 2, Kw // 2
    Wp = W + 2 * pw
    Hp = H + 2 * ph + 1  # one spare row so the last offset stays in range
    xp = np.zeros((N, Hp, Wp, cin), dtype=x4.dtype)
    xp[:, ph:ph + H, pw:pw + W] = x4
    xf = xp.reshape(N, Hp * Wp, cin)
    L = H * Wp
    yf = np.zeros((N, L, cout), dtype=np.result_type(x4.dtype, k.dtype))
    for i in range(Kh):
        for j in range(Kw):
            s = i * Wp + j
            yf += xf[:, s:s + L] @ k[i, j]
    y = yf.reshape(N, H, Wp, cout)[:, :, :W]
    if bias_data is not None:
        y = y + bias_data
    return np.ascontiguousarray(y), xf


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride=(1, 1)) -> Tensor:
    """2-D cross-correlation, channels last.

    Stride ``(1, 1)`` zero-pads to keep the spatial size (odd kernels
    only). Larger strides use no padding and give
    ``floor((H - Kh) / sh) + 1`` rows (likewise for columns).
    """
    if k.ndim != 4 or x.ndim not in (3, 4):
        raise ShapeError("conv2d expects x (H, W, Cin) or (N, H, W, Cin) and k (Kh, Kw, Cin, Cout)")
    Kh, Kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d: stride must be positive")
    batched = x.ndim == 4
    x4 = x.data if batched else x.data[None]
    N, H, W, _ = x4.shape
    parents = (x, k) if bias is None else (x, k, bias)
    bias_data = None if bias is None else bias.data

    if (sh, sw) == (1, 1):
        if Kh % 2 != 1 or Kw % 2 != 1:
            raise ShapeError("conv2d: same padding needs odd kernel sizes")
        y, xf = _conv2d_same(x4, k.data, bias_data)
        ph, pw = Kh // 2, Kw // 2
        Wp = W + 2 * pw
        Hp = H + 2 * ph + 1
        L = H * Wp

        def backward(g):
            g4 = g if batched else g[None]
            gf = np.zeros((N, H, Wp, cout), dtype=g4.dtype)
            gf[:, :, :W] = g4
            gf = gf.reshape(N, L, cout)
            gx = gk = None
            if x.requires_grad:
                gxf = np.zeros((N, Hp * Wp, cin), dtype=g4.dtype)
                for i in range(Kh):
                    for j in range(Kw):
                        s = i * Wp + j
                        gxf[:, s:s + L] += gf @ k.data[i, j].T
                gx = gxf.reshape(N, Hp, Wp, cin)[:, ph:ph + H, pw:pw + W]
                gx = np.ascontiguousarray(gx if batched else gx[0])
            if k.requires_grad:
                gk = np.empty_like(k.data)
                for i in range(Kh):
                    for j in range(Kw):
                        s = i * Wp + j
                        gk[i, j] = np.matmul(xf[:, s:s + L].transpose(0, 2, 1), gf).sum(axis=0)
            if bias is None:
                return gx, gk
            return gx, gk, g4.sum(axis=(0, 1, 2))

        return _make(y if batched else y[0], parents, backward)

    if Kh > H or Kw > W:
        raise ShapeError(f"conv2d: kernel {Kh}x{Kw} larger than input {H}x{W}")
    Ho = (H - Kh) // sh + 1
    Wo = (W - Kw) // sw + 1

    def window(arr, i, j):
        return arr[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]

    y = np.zeros((N, Ho, Wo, cout), dtype=np.result_type(x4.dtype, k.dtype))
    for i in range(Kh):
        for j in range(Kw):
            y += window(x4, i, j) @ k.data[i, j]
    if bias_data is not None:
        y += bias_data

    def backward(g):
        g4 = g if batched else g[None]
        gx = gk = None
        if x.requires_grad:
            gx4 = np.zeros_like(x4)
            for i in range(Kh):
                for j in range(Kw):
                    window(gx4, i, j)[...] += g4 @ k.data[i, j].T
            gx = gx4 if batched else gx4[0]
        if k.requires_grad:
            g2 = g4.reshape(-1, cout)
            gk = np.empty_like(k.data)
            for i in range(Kh):
                for j in range(Kw):
                    gk[i, j] = window(x4, i, j).reshape(-1, cin).T @ g2
        if bias is None:
            return gx, gk
        return gx, gk, g4.sum(axis=(0, 1, 2))

    return _make(y if batched else y[0], parents, backward)


# ----------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------

def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross entropy, with ``pred`` clamped to ``[eps, 1 - eps]``.

    The gradient is zero where the clamp is active.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"bce_loss: prediction {pred.shape} vs target {target.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    n = pred.data.size
    loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean()
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def backward(g):
        dp = (p - target) / (p * (1.0 - p)) / n
        return (g * dp * inside,)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


def zero_grad(params) -> None:
    for t in params.values() if isinstance(params, dict) else params:
        t.grad = None


# ----------------------------------------------------------------------
# parameters and optimiser
# ----------------------------------------------------------------------

ModelParams = dict  # ordered name -> Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class AdamState:
    """First/second moment estimates and the step counter."""

    def __init__(self, params: ModelParams):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place.

    Parameters missing from ``grads`` (or with a ``None`` gradient) are
    treated as having zero gradient.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if name not in state.m:
            raise ShapeError(f"adam: no optimiser state for {name!r}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adam: shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        p.data = p.data - step


_PARAM_MAGIC = b"FTAN"
_PARAM_VERSION = 1


def params_to_bytes(params: ModelParams) -> bytes:
    out = [_PARAM_MAGIC, struct.pack("<II", _PARAM_VERSION, len(params))]
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"parameter {name!r} is not finite")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


def params_from_bytes(raw: bytes) -> ModelParams:
    def need(pos, n):
        if pos + n > len(raw):
            raise CorruptFileError("model file is truncated")

    need(0, 12)
    if raw[:4] != _PARAM_MAGIC:
        raise CorruptFileError(f"bad magic {raw[:4]!r}, not a model file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _PARAM_VERSION:
        raise UnsupportedVersionError(f"unsupported model file version {version}")
    pos = 12
    params: ModelParams = {}
    for _ in range(count):
        need(pos, 2)
        (n_name,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(pos, n_name + 1)
        name = raw[pos:pos + n_name].decode("utf-8")
        pos += n_name
        ndim = raw[pos]
        pos += 1
        need(pos, 4 * ndim)
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(pos, nbytes)
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos)
        pos += nbytes
        if name in params:
            raise CorruptFileError(f"duplicate tensor name {name!r}")
        params[name] = Tensor(data.reshape(dims).astype(np.float32), requires_grad=True)
    if pos != len(raw):
        raise CorruptFileError(f"{len(raw) - pos} trailing bytes after last tensor")
    return params


def save_params(params: ModelParams, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
