"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

A ``Var`` wraps an ndarray and records the closure that routes its output
gradient back to its parents.  ``backward()`` on a scalar runs the tape in
reverse topological order.  Broadcasting follows numpy rules; gradients are
summed back over broadcast axes.

Kept deliberately small: only the operations the training losses need
(elementwise arithmetic, exp/log/erf, relu/softplus, reductions, matmul,
strided conv2d, nearest-neighbour upsampling, index take/pick, stop-gradient),
plus an Adam optimizer and a central-finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special


class Var:
    """Node in the reverse-mode tape."""

    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, _parents=(), _bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._bw = _bw

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    # -- graph execution ---------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._bw is not None:
                node._bw(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sumv(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
    return list(reversed(order))


def _acc(v: Var, g: np.ndarray) -> None:
    if v.grad is None:
        v.grad = np.zeros_like(v.data)
    v.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = Var(a.data + b.data, (a, b))

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    out._bw = bw
    return out


def mul(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = Var(a.data * b.data, (a, b))

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    out._bw = bw
    return out


def div(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = Var(a.data / b.data, (a, b))

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._bw = bw
    return out


def power(a, p: float) -> Var:
    a = wrap(a)
    p = float(p)
    out = Var(a.data**p, (a,))

    def bw(g):
        _acc(a, g * p * a.data ** (p - 1.0))

    out._bw = bw
    return out


def exp(a) -> Var:
    a = wrap(a)
    e = np.exp(a.data)
    out = Var(e, (a,))

    def bw(g):
        _acc(a, g * e)

    out._bw = bw
    return out


def log(a) -> Var:
    a = wrap(a)
    out = Var(np.log(a.data), (a,))

    def bw(g):
        _acc(a, g / a.data)

    out._bw = bw
    return out


def erf(a) -> Var:
    a = wrap(a)
    out = Var(_special.erf(a.data), (a,))
    coeff = 2.0 / np.sqrt(np.pi)

    def bw(g):
        _acc(a, g * coeff * np.exp(-a.data * a.data))

    out._bw = bw
    return out


def relu(a) -> Var:
    a = wrap(a)
    mask = a.data > 0.0
    out = Var(np.where(mask, a.data, 0.0), (a,))

    def bw(g):
        _acc(a, g * mask)

    out._bw = bw
    return out


def softplus(a) -> Var:
    """Numerically stable ``log(1 + exp(x))`` with sigmoid gradient."""
    a = wrap(a)
    x = a.data
    out = Var(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), (a,))
    sig = _special.expit(x)

    def bw(g):
        _acc(a, g * sig)

    out._bw = bw
    return out


def clamp_min(a, floor: float) -> Var:
    """Elementwise ``max(a, floor)`` with a constant floor; gradient passes where a > floor."""
    a = wrap(a)
    mask = a.data > floor
    out = Var(np.where(mask, a.data, floor), (a,))

    def bw(g):
        _acc(a, g * mask)

    out._bw = bw
    return out


def stop_grad(a) -> Var:
    a = wrap(a)
    return Var(a.data.copy())


# -- reductions and shaping ------------------------------------------------


def sumv(a, axis=None, keepdims=False) -> Var:
    a = wrap(a)
    out = Var(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape).copy())

    out._bw = bw
    return out


def reshape(a, shape) -> Var:
    a = wrap(a)
    out = Var(a.data.reshape(shape), (a,))

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    out._bw = bw
    return out


def transpose(a, axes=None) -> Var:
    a = wrap(a)
    out = Var(a.data.transpose(axes), (a,))
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _acc(a, g.transpose(inv))

    out._bw = bw
    return out


def matmul(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs >= 2-D operands")
    out = Var(a.data @ b.data, (a, b))

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))

    out._bw = bw
    return out


def take_axis(a, idx, axis: int) -> Var:
    """Select rows along ``axis`` by a 1-D integer index (repeats allowed)."""
    a = wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("take_axis expects a 1-D index")
    out = Var(np.take(a.data, idx, axis=axis), (a,))

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        ga = np.moveaxis(a.grad, axis, 0)
        np.add.at(ga, idx, np.moveaxis(g, axis, 0))

    out._bw = bw
    return out


def pick(a, rows, cols) -> Var:
    """Select ``a[rows[i], cols[i]]`` from a 2-D array, returning a vector."""
    a = wrap(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2:
        raise ValueError("pick expects a 2-D operand")
    out = Var(a.data[rows, cols], (a,))

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, cols), g)

    out._bw = bw
    return out


# -- structured ops for the conv networks ---------------------------------


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Var:
    """2-D convolution on (N, C, H, W) with square kernel, zero padding."""
    x, w, b = wrap(x), wrap(w), wrap(b)
    N, C, H, W = x.data.shape
    Co, Ci, kh, kw = w.data.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Ci}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d output would be empty for input {H}x{W}")

    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + Ho * stride : stride, kj : kj + Wo * stride : stride]
    cols2 = cols.reshape(N, C * kh * kw, Ho * Wo)
    w2 = w.data.reshape(Co, C * kh * kw)
    y = np.matmul(w2, cols2) + b.data.reshape(1, Co, 1)
    out = Var(y.reshape(N, Co, Ho, Wo), (x, w, b))

    def bw(g):
        g2 = g.reshape(N, Co, Ho * Wo)
        gw = np.einsum("ncl,nkl->ck", g2, cols2).reshape(w.data.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, g2).reshape(N, C, kh, kw, Ho, Wo)
        gxp = np.zeros((N, C, Hp, Wp), dtype=np.float64)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki : ki + Ho * stride : stride, kj : kj + Wo * stride : stride] += gcols[:, :, ki, kj]
        gx = gxp[:, :, pad : Hp - pad, pad : Wp - pad] if pad else gxp
        _acc(x, gx)
        _acc(w, gw)
        _acc(b, gb)

    out._bw = bw
    return out


def upsample2(x) -> Var:
    """Nearest-neighbour 2x upsampling of (N, C, H, W)."""
    x = wrap(x)
    N, C, H, W = x.data.shape
    out = Var(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,))

    def bw(g):
        _acc(x, g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))

    out._bw = bw
    return out


# -- optimizer -------------------------------------------------------------


class Adam:
    """Adam with bias correction; betas default to (0.9, 0.999)."""

    def __init__(self, params: Sequence[Var], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.b1, self.b2
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1**self.t)
            vhat = v / (1.0 - b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckFailure:
    param: int
    coord: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    checked: int
    max_rel_err: float
    failures: list[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    loss_fn: Callable[[], Var],
    params: Sequence[Var],
    rng: np.random.Generator,
    n_coords: int = 200,
    h: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call and be
    deterministic (freeze any noise before calling).  ``n_coords`` coordinates
    are sampled across all parameters.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    chosen = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradCheckReport(checked=len(chosen), max_rel_err=0.0)
    for flat in chosen:
        pi = int(np.searchsorted(offsets, flat, side="right")) - 1
        local = int(flat - offsets[pi])
        coord = np.unravel_index(local, params[pi].data.shape)
        base = params[pi].data[coord]
        params[pi].data[coord] = base + h
        f_plus = loss_fn().item()
        params[pi].data[coord] = base - h
        f_minus = loss_fn().item()
        params[pi].data[coord] = base
        fd = (f_plus - f_minus) / (2.0 * h)
        ad = float(analytic[pi][coord])
        denom = max(abs(ad), abs(fd))
        err = abs(ad - fd) / denom if denom > 0 else 0.0
        report.max_rel_err = max(report.max_rel_err, err)
        if abs(ad - fd) > atol and err > rtol:
            report.failures.append(GradCheckFailure(pi, tuple(int(c) for c in coord), ad, fd, err))
    return report
