"""Minimal dense-tensor reverse-mode automatic differentiation on numpy.

Tensors wrap row-major numpy arrays. Every operation that sees at least one
gradient-requiring input records a backward closure; ``Tensor.backward`` walks
the recorded graph in reverse topological order and accumulates gradients into
``.grad``. Training code runs in float32; gradient verification is expected to
run in float64 (see ``grad_check``).

Broadcasting follows numpy's trailing-axis rules. Backward passes undo
broadcasts by summing over the expanded axes, so parameter gradients always
match parameter shapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericalError(RuntimeError):
    """A non-finite value or unusable numeric configuration was detected."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (forward-only mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_bw", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._inputs = ()
        self._bw = None
        self.name = name

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{nm})"

    # -- graph --------------------------------------------------------------
    def backward(self, grad=None):
        """Backpropagate from this tensor; default seed requires a scalar."""
        if not self.requires_grad and not self._inputs:
            raise RuntimeError("backward() on a tensor that is not part of a graph")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit seed needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, inputs, bw) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._bw = bw
    else:
        out.requires_grad = False
        out._inputs = ()
        out._bw = None
    return out


def _acc(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were expanded by broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a.dtype)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, -g)

    return _node(-a.data, (a,), bw)


# -- elementwise unary ------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.data.dtype.type(0))

    def bw(g):
        _acc(a, g * mask)

    return _node(out_data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _acc(a, g * out_data)

    return _node(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bw(g):
        _acc(a, g / a.data)

    return _node(out_data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    out_data = out_data.astype(a.dtype, copy=False)

    def bw(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        _acc(a, g * (0.5 / out_data))

    return _node(out_data, (a,), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    out_data = a.data**p

    def bw(g):
        _acc(a, g * (p * a.data ** (p - 1)))

    return _node(out_data, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _acc(a, g * mask)

    return _node(out_data, (a,), bw)


# -- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False) * np.ones(1, a.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(gg, a.shape).copy())

    return _node(np.asarray(out_data), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.shape))

    return _node(out_data, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = a.data.transpose(axes)

    def bw(g):
        if axes is None:
            _acc(a, g.transpose())
        else:
            _acc(a, g.transpose(np.argsort(axes)))

    return _node(out_data, (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _acc(t, g[tuple(sl)])
            start += n

    return _node(out_data, tuple(tensors), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _acc(a, full)

    return _node(out_data, (a,), bw)


# -- matmul -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul expects rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions disagree for {a.shape} @ {b.shape}") from None

    def bw(g):
        _acc(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        _acc(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _node(out_data, (a, b), bw)


# -- stable softmax family ----------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - dot))

    return _node(out_data.astype(a.dtype, copy=False), (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def bw(g):
        _acc(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out_data.astype(a.dtype, copy=False), (a,), bw)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out_data = out_k if keepdims else np.squeeze(out_k, axis=axis)
    soft = e / s

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _acc(a, soft * gg)

    return _node(np.asarray(out_data, dtype=a.dtype), (a,), bw)


# -- layer norm ---------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize ``x`` along ``axis`` to zero mean / unit variance, then apply
    a per-element affine along that axis. ``gain``/``bias`` must be rank-1 with
    length ``x.shape[axis]``."""
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match axis length {n}"
        )
    ax = axis % x.data.ndim
    mu = x.data.mean(axis=ax, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    # reshape gain/bias so the affine lands on `axis`
    bshape = [1] * x.data.ndim
    bshape[ax] = n
    gdat = gain.data.reshape(bshape)
    bdat = bias.data.reshape(bshape)
    out_data = (xhat * gdat + bdat).astype(x.dtype, copy=False)

    def bw(g):
        other_axes = tuple(i for i in range(x.data.ndim) if i != ax)
        _acc(gain, (g * xhat).sum(axis=other_axes).reshape(gain.shape))
        _acc(bias, g.sum(axis=other_axes).reshape(bias.shape))
        dxhat = g * gdat
        m1 = dxhat.mean(axis=ax, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=ax, keepdims=True)
        _acc(x, inv * (dxhat - m1 - xhat * m2))

    return _node(out_data, (x, gain, bias), bw)


# -- 1-d convolution ----------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (C_in, T) with kernels ``w`` (C_out, C_in, K)."""
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects (C_in,T) and (C_out,C_in,K), got {x.shape}, {w.shape}")
    c_in, t_in = x.shape
    c_out, c_in_w, k = w.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv1d: channel mismatch between input {x.shape} and kernel {w.shape}")
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {t_in} too short for kernel {k} at stride {stride}")
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    out_data = np.zeros((c_out, t_out), dtype=x.dtype)
    for kk in range(k):
        seg = xp[:, kk : kk + stride * t_out : stride]
        out_data += w.data[:, :, kk] @ seg
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {b.shape} does not match {c_out} channels")
        out_data += b.data[:, None]

    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        if b is not None:
            _acc(b, g.sum(axis=1))
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for kk in range(k):
            seg = xp[:, kk : kk + stride * t_out : stride]
            dw[:, :, kk] = g @ seg.T
            dxp[:, kk : kk + stride * t_out : stride] += w.data[:, :, kk].T @ g
        _acc(w, dw)
        _acc(x, dxp[:, padding : padding + t_in] if padding else dxp)

    return _node(out_data, inputs, bw)


# -- gradient verification ----------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    skipped: bool = False
    max_rel_err: float = 0.0
    worst_index: int | None = None


@dataclass
class GradCheckReport:
    tol: float
    entries: dict[str, GradCheckEntry] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(e.skipped or e.max_rel_err <= self.tol for e in self.entries.values())

    @property
    def max_rel_err(self) -> float:
        errs = [e.max_rel_err for e in self.entries.values() if not e.skipped]
        return max(errs) if errs else 0.0

    def summary(self) -> str:
        lines = []
        for e in self.entries.values():
            if e.skipped:
                lines.append(f"  {e.name}: skipped (frozen)")
            else:
                flag = "ok" if e.max_rel_err <= self.tol else "FAIL"
                lines.append(f"  {e.name}: max rel err {e.max_rel_err:.3g} [{flag}]")
        return "\n".join(lines)


def grad_check(fn, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its graph from the given ``params`` (name, Tensor)
    pairs on every call; perturbations mutate ``Tensor.data`` in place.
    Trainable params must be float64 so the difference quotient is meaningful
    at ``h=1e-5``. Frozen entries are reported as skipped. Relative error uses
    max(|analytic|, |numeric|) as the scale, falling back to absolute error
    below 1e-5 so noise-level gradients do not divide by zero.
    """
    params = list(params)
    for _, p in params:
        if p.requires_grad:
            p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericalError("grad_check: objective evaluated to a non-finite value")
    out.backward()

    analytic = {}
    for name, p in params:
        if not p.requires_grad:
            continue
        if p.data.dtype != np.float64:
            raise NumericalError(f"grad_check requires float64 parameters, {name} is {p.data.dtype}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise NumericalError(f"non-finite analytic gradient in {name} at flat index {bad}")
        analytic[name] = np.array(g, dtype=np.float64, copy=True).reshape(-1)

    report = GradCheckReport(tol=tol)
    for name, p in params:
        if not p.requires_grad:
            report.entries[name] = GradCheckEntry(name, skipped=True)
            continue
        flat = p.data.reshape(-1)
        worst = 0.0
        worst_i = None
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite value while perturbing {name} at flat index {i}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[name][i]
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) if scale < 1e-5 else abs(a - numeric) / scale
            if err > worst:
                worst, worst_i = err, i
        report.entries[name] = GradCheckEntry(name, max_rel_err=worst, worst_index=worst_i)
    return report
