"""Dense double-precision tensors with reverse-mode differentiation.

Each op returns a new :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back to them. Calling ``backward()`` on a
scalar walks that tape in reverse topological order.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
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
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(as_tensor(other), self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(as_tensor(other), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(as_tensor(other), self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no tape inside the block; outputs never require grad."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class OpParams:
    """Weight ``[Cout, Cin]`` and bias ``[Cout]`` of a per-position affine map."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ContractError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree on Cout")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, cin: int, cout: int, rng: np.random.Generator | None = None,
             zero: bool = False, gain: float = 1.0) -> "OpParams":
        if zero or rng is None:
            w = np.zeros((cout, cin))
        else:
            bound = gain / np.sqrt(cin)
            w = rng.uniform(-bound, bound, size=(cout, cin))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def zero_(self) -> "OpParams":
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0
        return self


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    return add(a, mul(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)
    return _make(x.data * mask, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))
    return _make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)
    return _make(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)
    return _make(np.log(x.data), (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * g * x.data)
    return _make(x.data ** 2, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def bw(g):
        x._accumulate(g * expit(x.data))
    return _make(out, (x,), bw)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    ax = np.abs(x.data)
    small = ax < beta
    out = np.where(small, 0.5 * x.data ** 2 / beta, ax - 0.5 * beta)

    def bw(g):
        x._accumulate(g * np.where(small, x.data / beta, np.sign(x.data)))
    return _make(out, (x,), bw)


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(gg, x.shape))
    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))
    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        x._accumulate(np.transpose(g, inv))
    return _make(np.transpose(x.data, axes), (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(_unbroadcast(g, x.shape))
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), bw)


def index(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)
    return _make(x.data[idx], (x,), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)

    def bw(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._accumulate(np.take(g, i, axis=axis))
    return _make(np.stack([x.data for x in xs], axis=axis), xs, bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accumulate(np.take(g, np.arange(lo, hi), axis=axis))
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each of the last two axes ``factor`` times."""
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def bw(g):
        s = g.shape
        gg = g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor)
        x._accumulate(gg.sum(axis=(-3, -1)))
    return _make(out, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} @ {b.shape}: inner dimension mismatch")

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.outer(g, b.data) if b.ndim == 1 else g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; each operand's subscripts must be distinct."""
    ins, out_sub = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ContractError(f"einsum {spec}: repeated subscripts within an operand")
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(np.einsum(f"{out_sub},{sb}->{sa}", g, b.data), a.shape))
        if b.requires_grad:
            b._accumulate(np.broadcast_to(np.einsum(f"{out_sub},{sa}->{sb}", g, a.data), b.shape))
    return _make(np.einsum(spec, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------- model ops


def conv1x1(x: Tensor, params: OpParams) -> Tensor:
    """Per-position affine map over the leading channel axis.

    ``x`` is ``[Cin, *spatial]`` (spatial may be empty, which makes this a
    plain linear layer on a vector).
    """
    if x.ndim < 1:
        raise ContractError("conv1x1 input needs a channel axis")
    if x.shape[0] != params.in_channels:
        raise ContractError(
            f"conv1x1: input channel dimension Cin={x.shape[0]} but weight expects "
            f"Cin={params.in_channels}")
    W, b = params.weight, params.bias
    spatial = x.shape[1:]
    flat = x.data.reshape(x.shape[0], -1)
    out = W.data @ flat + b.data[:, None]

    def bw(g):
        g2 = g.reshape(g.shape[0], -1)
        if x.requires_grad:
            x._accumulate((W.data.T @ g2).reshape(x.shape))
        if W.requires_grad:
            W._accumulate(g2 @ flat.T)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=1))
    return _make(out.reshape((W.shape[0],) + spatial), (x, W, b), bw)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] == 0:
        raise ContractError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _make(out, (x,), bw)


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))
    return _make(out, (x,), bw)


def xcorr_padding(h: int, w: int, pad: bool) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding that centers the template on each pixel."""
    if not pad:
        return 0, 0, 0, 0
    return h // 2, h - 1 - h // 2, w // 2, w - 1 - w // 2


def depthwise_xcorr(template: Tensor, search: Tensor, pad: bool = False) -> Tensor:
    if template.ndim != 3 or search.ndim != 3:
        raise ContractError(f"depthwise_xcorr wants [C,h,w] and [C,H,W], got {template.shape}, {search.shape}")
    C, h, w = template.shape
    if search.shape[0] != C:
        raise ContractError(f"depthwise_xcorr channel mismatch: template C={C}, search C={search.shape[0]}")
    top, bottom, left, right = xcorr_padding(h, w, pad)
    H, W = search.shape[1:]
    if h > H + top + bottom or w > W + left + right:
        raise ContractError(f"template {h}x{w} larger than padded search {H}x{W}")
    s_pad = np.pad(search.data, ((0, 0), (top, bottom), (left, right)))
    win = sliding_window_view(s_pad, (h, w), axis=(1, 2))
    out = np.einsum("cyxij,cij->cyx", win, template.data, optimize=True)
    Ho, Wo = out.shape[1:]

    def bw(g):
        if template.requires_grad:
            template._accumulate(np.einsum("cyxij,cyx->cij", win, g, optimize=True))
        if search.requires_grad:
            gp = np.zeros_like(s_pad)
            t = template.data
            for i in range(h):
                for j in range(w):
                    gp[:, i:i + Ho, j:j + Wo] += t[:, i, j, None, None] * g
            search._accumulate(gp[:, top:top + H, left:left + W])
    return _make(out, (template, search), bw)


def _bilinear_axis(start: float, length: float, bins: int, samples: int, size: int) -> np.ndarray:
    """Row ``k`` holds the averaged interpolation weights of output bin ``k`` over input cells.

    Samples whose continuous coordinate falls outside ``[0, size]`` contribute zero;
    inside it, indices are clamped so the border cell is replicated.
    """
    A = np.zeros((bins, size))
    step = length / bins
    for k in range(bins):
        for s in range(samples):
            pos = start + step * (k + (s + 0.5) / samples)
            if pos < 0.0 or pos > size:
                continue
            u = min(max(pos - 0.5, 0.0), size - 1.0)
            lo = int(np.floor(u))
            hi = min(lo + 1, size - 1)
            frac = u - lo
            A[k, lo] += (1.0 - frac) / samples
            A[k, hi] += frac / samples
    return A


def roi_align(features: Tensor, box, out_h: int, out_w: int, samples_per_bin: int = 2) -> Tensor:
    """Bilinear ROI pooling of ``features[C,H,W]`` inside ``box=(x, y, w, h)``.

    Pixel ``k`` covers the continuous interval ``[k, k+1)``, so its center is at
    ``k + 0.5``. Bilinear sampling is separable, so the op is ``Ay @ F @ Ax.T``.
    """
    if out_h <= 0 or out_w <= 0:
        raise ContractError(f"roi_align output size must be positive, got {out_h}x{out_w}")
    x0, y0, bw_, bh_ = (float(v) for v in box)
    if bw_ <= 0 or bh_ <= 0:
        raise ContractError(f"roi_align box needs w>0 and h>0, got {box}")
    if samples_per_bin < 1:
        raise ContractError("samples_per_bin must be >= 1")
    _, H, W = features.shape
    Ay = _bilinear_axis(y0, bh_, out_h, samples_per_bin, H)
    Ax = _bilinear_axis(x0, bw_, out_w, samples_per_bin, W)
    out = np.einsum("ky,cyx,lx->ckl", Ay, features.data, Ax, optimize=True)

    def bw(g):
        features._accumulate(np.einsum("ky,ckl,lx->cyx", Ay, g, Ax, optimize=True))
    return _make(out, (features,), bw)


# ---------------------------------------------------------------- verification


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop gradients and central differences.

    Every input tensor is perturbed; the relative error of each element is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    inputs = list(inputs)
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ContractError("grad_check inputs must be finite")
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got output shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = fn(*inputs).item()
            flat[k] = orig - eps
            fm = fn(*inputs).item()
            flat[k] = orig
            n = (fp - fm) / (2.0 * eps)
            av = a.reshape(-1)[k]
            worst = max(worst, abs(av - n) / max(1.0, abs(av), abs(n)))
    for t, r in zip(inputs, saved):
        t.requires_grad = r
        t.grad = None
    return worst


def parameters_of(*groups: Iterable[Tensor]) -> list[Tensor]:
    out: list[Tensor] = []
    for g in groups:
        out.extend(g)
    return out


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None
