"""Dense tensors with reverse-mode differentiation.

Each operation records its inputs and a closure that maps the output
gradient to input gradients.  ``Tensor.backward`` walks the recorded graph
once in reverse topological order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if CHECK_FINITE and not np.all(np.isfinite(pg)):
                    raise FloatingPointError(f"non-finite gradient flowing out of '{node.op}'")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _make(data, parents, backward, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")
    live = tuple(p for p in parents)
    if not any(_needs_grad(p) for p in live):
        return Tensor(data, op=op)
    return Tensor(data, _parents=live, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x)
    return _make(out, (a,), lambda g: (g / (1 + np.exp(-x)),), "softplus")


# --------------------------------------------------------------------------
# reductions and shape

def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, dtype=np.float64).astype(a.dtype)
    n = a.data.size // max(out.size, 1)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _make(out, (a,), back, "reduce_mean")


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), back, "reduce_sum")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), back, "slice")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), back, "matmul")


# --------------------------------------------------------------------------
# convolution and pooling (layout: batch, channels, time)

def _im2col(xp: np.ndarray, k: int, stride: int, l_out: int) -> np.ndarray:
    B, C, _ = xp.shape
    s0, s1, s2 = xp.strides
    # (B, L_out, C, K) view; copied so the matmul sees contiguous memory
    view = as_strided(xp, shape=(B, l_out, C, k), strides=(s0, stride * s2, s1, s2), writeable=False)
    return np.ascontiguousarray(view).reshape(B, l_out, C * k)


def conv1d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, C_in, L) with kernels (C_out, C_in, K)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, L = x.shape
    C_out, C_in, K = w.shape
    if C_in != C:
        raise ValueError(f"conv1d expects {C_in} input channels, got {C}")
    l_out = (L + 2 * pad - K) // stride + 1
    if l_out < 1:
        raise ValueError("conv1d input shorter than the kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    cols = _im2col(xp, K, stride, l_out)
    wm = w.data.reshape(C_out, C * K)
    out = cols @ wm.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def back(g):
        gt = g.transpose(0, 2, 1)  # (B, L_out, C_out)
        gw = (gt.reshape(-1, C_out).T @ cols.reshape(-1, C * K)).reshape(w.shape)
        dcols = (gt @ wm).reshape(B, l_out, C, K)
        gxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for k in range(K):
            gxp[:, :, k: k + span: stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, pad: pad + L] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, parents, back, "conv1d")


def adaptive_mean_pool_time(x, out_size: int = 1) -> Tensor:
    """Average (B, C, L) over ``out_size`` near-equal time bins -> (B, C, out_size)."""
    x = as_tensor(x)
    L = x.shape[-1]
    starts = [(i * L) // out_size for i in range(out_size)]
    ends = [-(-((i + 1) * L) // out_size) for i in range(out_size)]
    out = np.stack([x.data[..., s:e].mean(axis=-1) for s, e in zip(starts, ends)], axis=-1)

    def back(g):
        gx = np.zeros_like(x.data)
        for i, (s, e) in enumerate(zip(starts, ends)):
            gx[..., s:e] += g[..., i: i + 1] / (e - s)
        return (gx,)

    return _make(out, (x,), back, "adaptive_mean_pool_time")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    out = np.repeat(x.data, factor, axis=-1)
    return _make(out, (x,),
                 lambda g: (g.reshape(*g.shape[:-1], x.shape[-1], factor).sum(axis=-1),),
                 "upsample_nearest")


# --------------------------------------------------------------------------
# recurrent cell

def _sig(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def gru_cell_step(x, h, w_x, w_h, b_x, b_h) -> Tensor:
    """One GRU step; gate blocks of the weights are ordered (reset, update, new).

    r = s(x Wr + h Ur + b),  u = s(x Wu + h Uu + b),
    n = tanh(x Wn + bn + r * (h Un + cn)),  h' = (1 - u) * n + u * h
    """
    x, h, w_x, w_h, b_x, b_h = map(as_tensor, (x, h, w_x, w_h, b_x, b_h))
    H = h.shape[-1]
    gx = x.data @ w_x.data + b_x.data
    gh = h.data @ w_h.data + b_h.data
    r = _sig(gx[:, :H] + gh[:, :H])
    u = _sig(gx[:, H:2 * H] + gh[:, H:2 * H])
    hn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * hn)
    out = (1 - u) * n + u * h.data

    def back(g):
        dn = g * (1 - u)
        du = g * (h.data - n)
        dh = g * u
        dan = dn * (1 - n * n)
        dr = dan * hn
        dar = dr * r * (1 - r)
        dau = du * u * (1 - u)
        dgx = np.concatenate([dar, dau, dan], axis=1)
        dgh = np.concatenate([dar, dau, dan * r], axis=1)
        dx = dgx @ w_x.data.T
        dh = dh + dgh @ w_h.data.T
        return dx, dh, x.data.T @ dgx, h.data.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0)

    return _make(out, (x, h, w_x, w_h, b_x, b_h), back, "gru_cell_step")
