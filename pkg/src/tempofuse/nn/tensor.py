"""Reverse-mode automatic differentiation over numpy arrays.

Each operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order, accumulates ``.grad`` on leaves that require it, and then
releases the graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Backward called on a graph that was already consumed or never recorded."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Callable | None = None, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self._consumed = False
        self.name = name

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise GraphError("backward called twice on the same graph; run the forward pass again")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad (no recorded graph)")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward without an explicit gradient needs a scalar, "
                                 f"got shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
            # Release the interior graph; leaves keep their accumulated .grad.
            node._parents = ()
            node._backward = None
            node._consumed = True

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise & shape ops ---------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _result(a.data.mean(), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a 2-D ``b``; ``a`` may carry leading batch axes."""
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- convolution ---------------------------------------------------------------

def _out_len(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ValueError(f"kernel {k} does not fit input length {n} with padding {pad}")
    return out


def _conv2d_shift(x: Tensor, w: Tensor, b: Tensor | None, padding: int) -> Tensor:
    # Stride-1 path. In the flattened padded input [C, N*Hp*Wp], kernel offset
    # (i, j) is a constant column shift of i*Wp + j, so the convolution is a sum
    # of kh*kw GEMMs over shifted views with no im2col copy. Outputs are
    # computed on the padded grid and the valid corner is cropped out.
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x.data.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, -1)
    m = xf.shape[1]
    span = (kh - 1) * wp + (kw - 1)
    length = m - span
    offsets = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    # [kh, kw, O, C] so every per-offset weight matrix is BLAS-contiguous.
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
    wkt = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
    yf = np.zeros((o, m), dtype=x.dtype)
    tmp = np.empty((o, length), dtype=x.dtype)
    for i, j, off in offsets:
        np.matmul(wk[i, j], xf[:, off:off + length], out=tmp)
        yf[:, :length] += tmp
    out = yf.reshape(o, n, hp, wp)[:, :, :ho, :wo]
    if b is not None:
        out = out + b.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gf = np.zeros((o, n, hp, wp), dtype=g.dtype)
        gf[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gf = gf.reshape(o, -1)[:, :length]
        gw = gb = gx = None
        if w.requires_grad:
            gw = np.empty((kh, kw, o, c), dtype=w.dtype)
            for i, j, off in offsets:
                gw[i, j] = gf @ xf[:, off:off + length].T
            gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
        if b is not None and b.requires_grad:
            gb = gf.sum(axis=1)
        if x.requires_grad:
            dxf = np.zeros((c, m), dtype=x.dtype)
            tmp_x = np.empty((c, length), dtype=x.dtype)
            for i, j, off in offsets:
                np.matmul(wkt[i, j], gf, out=tmp_x)
                dxf[:, off:off + length] += tmp_x
            gx = dxf.reshape(c, n, hp, wp)[:, :, padding:padding + h, padding:padding + wd]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def _conv2d_stacked(x: Tensor, w: Tensor, b: Tensor | None, padding: int) -> Tensor:
    # Stride-1 path for very few input channels: the shifted views of the flat
    # padded input are stacked into one [kh*kw*C, L] matrix and a single GEMM
    # replaces kh*kw thin ones.
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x.data.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, -1)
    m = xf.shape[1]
    length = m - ((kh - 1) * wp + (kw - 1))
    offs = [i * wp + j for i in range(kh) for j in range(kw)]
    def cols():
        st = np.empty((len(offs), c, length), dtype=x.dtype)
        for k, off in enumerate(offs):
            st[k] = xf[:, off:off + length]
        return st.reshape(-1, length)
    wm = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(o, -1)
    yf = np.empty((o, m), dtype=x.dtype)
    np.matmul(wm, cols(), out=yf[:, :length])
    out = yf.reshape(o, n, hp, wp)[:, :, :ho, :wo]
    if b is not None:
        out = out + b.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    def backward(g):
        gf = np.zeros((o, n, hp, wp), dtype=g.dtype)
        gf[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gf = gf.reshape(o, -1)[:, :length]
        gw = gb = gx = None
        if w.requires_grad:
            gw = (gf @ cols().T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
            gw = np.ascontiguousarray(gw)
        if b is not None and b.requires_grad:
            gb = gf.sum(axis=1)
        if x.requires_grad:
            dc = (wm.T @ gf).reshape(len(offs), c, length)
            dxf = np.zeros((c, m), dtype=x.dtype)
            for k, off in enumerate(offs):
                dxf[:, off:off + length] += dc[k]
            gx = dxf.reshape(c, n, hp, wp)[:, :, padding:padding + h, padding:padding + wd]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: [N, C, H, W], ``w``: [O, C, kh, kw]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weights {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_len(h, kh, stride, padding), _out_len(wd, kw, stride, padding)
    if stride == 1:
        if c == 1:
            return _conv2d_stacked(x, w, b, padding)
        return _conv2d_shift(x, w, b, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # Channels-first copy so each kernel offset is a strided view over [C, N, H, W].
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))

    def im2col():
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        return cols.reshape(c * kh * kw, n * ho * wo)

    wm = w.data.reshape(o, -1)
    out = (wm @ im2col()).reshape(o, n, ho, wo)
    if b is not None:
        out += b.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gt @ im2col().T).reshape(w.shape) if w.requires_grad else None
        gb = gt.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gt).reshape(c, kh, kw, n, ho, wo)
            dxt = np.zeros_like(xt)
            for i in range(kh):
                for j in range(kw):
                    dxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = dxt.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + wd]
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation. ``x``: [N, C, T], ``w``: [O, C, k]."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {x.shape}, weights {w.shape}")
    n, c, t = x.shape
    o, _, k = w.shape
    to = _out_len(t, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2))  # [C, N, T]

    def im2col():
        cols = np.empty((c, k, n, to), dtype=x.dtype)
        for i in range(k):
            cols[:, i] = xt[:, :, i:i + stride * to:stride]
        return cols.reshape(c * k, n * to)

    wm = w.data.reshape(o, -1)
    out = (wm @ im2col()).reshape(o, n, to)
    if b is not None:
        out += b.data[:, None, None]
    out = out.transpose(1, 0, 2)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(o, -1)
        gw = (gt @ im2col().T).reshape(w.shape) if w.requires_grad else None
        gb = gt.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gt).reshape(c, k, n, to)
            dxt = np.zeros_like(xt)
            for i in range(k):
                dxt[:, :, i:i + stride * to:stride] += dcols[:, i]
            gx = dxt.transpose(1, 0, 2)
            if padding:
                gx = gx[:, :, padding:padding + t]
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward)


# -- normalization ---------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over every axis except 1.

    In training mode the batch statistics are used and the running buffers
    are updated in place (``running = (1 - momentum) * running + momentum * batch``,
    unbiased variance). In eval mode the running buffers are used unchanged.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        m = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = xd.size // xd.shape[1]
            gx = (invstd / m).reshape(bshape) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


# -- pooling -----------------------------------------------------------------------

def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool{size} needs spatial extent >= {size}, got {h}x{w}")
    crop = x.data[:, :, :ho * size, :wo * size]
    win = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = (
            gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size))
        return (gx,)

    return _result(out, (x,), backward)


def global_maxpool(x: Tensor) -> Tensor:
    """Max over every axis after the channel axis: [N, C, ...] -> [N, C]."""
    n, c = x.shape[:2]
    flat = x.data.reshape(n, c, -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        return (gf.reshape(shape),)

    return _result(out, (x,), backward)


def adaptive_mean_matrix(length: int, out_len: int, dtype=np.float64) -> np.ndarray:
    """``[length, out_len]`` averaging matrix; bin ``i`` spans ``floor(i*L/n) .. ceil((i+1)*L/n)``."""
    if length < 1 or out_len < 1:
        raise ValueError(f"bad adaptive pooling lengths {length} -> {out_len}")
    p = np.zeros((length, out_len), dtype=dtype)
    for i in range(out_len):
        lo = (i * length) // out_len
        hi = -((-(i + 1) * length) // out_len)
        p[lo:hi, i] = 1.0 / (hi - lo)
    return p


def mean_pool(x: Tensor, out_len: int) -> Tensor:
    """Adaptive average pooling of the last axis to ``out_len`` bins."""
    p = adaptive_mean_matrix(x.shape[-1], out_len, x.dtype)
    return _result(x.data @ p, (x,), lambda g: (g @ p.T,))


# -- output layers ------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy needs [N, K] logits and N labels, "
                         f"got {logits.shape} and {labels.shape}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes: {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
