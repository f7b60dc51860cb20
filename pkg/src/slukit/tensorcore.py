"""Minimal dense-tensor substrate with reverse-mode automatic differentiation.

Define-by-run: every primitive op records its parents and a backward closure
on the output tensor; `backward(loss)` walks the recorded graph once in
reverse topological order. Only tensors with ``requires_grad`` participate in
the graph, so frozen weights cost nothing during backprop.

Default precision is float32; gradient-check suites build float64 tensors and
all ops preserve the input dtype.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to a primitive op do not agree."""


class NumericsError(ArithmeticError):
    """NaN/Inf detected, or an op was asked to produce an undefined value."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar backward, double backward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars stay in the tensor's own dtype
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def validate_finite(t: Tensor, name: str = "tensor") -> None:
    """Raise NumericsError if data (or grad, when present) holds NaN/Inf."""
    if not np.all(np.isfinite(t.data)):
        raise NumericsError(f"{name}: non-finite values in data")
    if t.grad is not None and not np.all(np.isfinite(t.grad)):
        raise NumericsError(f"{name}: non-finite values in grad")


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable | None) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dims disagree: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def bwd(g):
        x._accum(g * (x.data > 0))

    return _make(data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        x._accum(g * data * (1.0 - data))

    return _make(data, (x,), bwd)


def swish(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * s

    def bwd(g):
        x._accum(g * (s + x.data * s * (1.0 - s)))

    return _make(data, (x,), bwd)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half gated by sigmoid of second."""
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise DimensionError(f"glu: last axis must be even, got {d}")
    h = d // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = 1.0 / (1.0 + np.exp(-b))
    data = a * s

    def bwd(g):
        gx = np.empty_like(x.data)
        gx[..., :h] = g * s
        gx[..., h:] = g * a * s * (1.0 - s)
        x._accum(gx)

    return _make(data, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise NumericsError("softmax: a row is fully masked (all -inf)")
    e = np.exp(x.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        gx = data * (g - (g * data).sum(axis=axis, keepdims=True))
        x._accum(gx)

    return _make(data, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise NumericsError("log_softmax: a row is fully masked (all -inf)")
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def bwd(g):
        x._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta must be ({d},), got {gamma.data.shape}/{beta.data.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gxh = g * gamma.data
            gx = inv * (
                gxh
                - gxh.mean(axis=-1, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
            )
            x._accum(gx)

    return _make(data, (x, gamma, beta), bwd)


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution over axis -2 with same-length zero padding.

    x: (..., T, D), kernel: (K, D) with K odd.
    """
    k, d = kernel.data.shape
    if k % 2 != 1:
        raise DimensionError(f"depthwise_conv1d: kernel length must be odd, got {k}")
    if x.data.shape[-1] != d:
        raise DimensionError(
            f"depthwise_conv1d: channel mismatch: input {x.data.shape[-1]} vs kernel {d}"
        )
    t = x.data.shape[-2]
    c = k // 2
    pad = [(0, 0)] * (x.data.ndim - 2) + [(c, c), (0, 0)]
    xp = np.pad(x.data, pad)
    data = np.zeros_like(x.data)
    for j in range(k):
        data += xp[..., j : j + t, :] * kernel.data[j]

    def bwd(g):
        if x.requires_grad:
            gp = np.pad(g, pad)
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx += gp[..., (k - 1 - j) : (k - 1 - j) + t, :] * kernel.data[j]
            x._accum(gx)
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = (xp[..., j : j + t, :] * g).reshape(-1, d).sum(axis=0)
            kernel._accum(gk)

    return _make(data, (x, kernel), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[...] = table[ids[...]], gradient scatter-added into table."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accum(gt)

    return _make(data, (table,), bwd)


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = x[..., ids[...]]; ids shaped like x without its last axis."""
    ids = np.asarray(ids)
    data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        x._accum(gx)

    return _make(data, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    data = x.data.reshape(shape)

    def bwd(g):
        x._accum(g.reshape(old))

    return _make(data, (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    data = np.transpose(x.data, axes)

    def bwd(g):
        x._accum(np.transpose(g, inv))

    return _make(data, (x,), bwd)


def frame_stack(x: Tensor, factor: int) -> Tensor:
    """Stack `factor` consecutive frames along the feature axis.

    x: (..., T, D) -> (..., ceil(T/factor), factor*D); the tail window is
    zero-padded.
    """
    if factor == 1:
        return reshape(x, x.data.shape)
    t, d = x.data.shape[-2], x.data.shape[-1]
    t_out = -(-t // factor)
    pad_t = t_out * factor - t
    pad = [(0, 0)] * (x.data.ndim - 2) + [(0, pad_t), (0, 0)]
    xp = np.pad(x.data, pad)
    data = xp.reshape(x.data.shape[:-2] + (t_out, factor * d))

    def bwd(g):
        gp = g.reshape(x.data.shape[:-2] + (t_out * factor, d))
        x._accum(gp[..., :t, :])

    return _make(data, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * keep

    def bwd(g):
        x._accum(g * keep)

    return _make(data, (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        x._accum(np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), bwd)


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._backward_done:
        raise GraphError("backward: already run on this graph; re-run the forward pass")
    loss._backward_done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max elementwise relative error between autograd and central differences.

    Runs at float64. The output is reduced to a scalar through a fixed random
    linear functional so that reductions like softmax (whose plain sum is
    constant) still exercise every output. Relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    base = np.asarray(x.data, dtype=np.float64)
    probe: np.ndarray | None = None

    def scalar_loss(inp: Tensor) -> Tensor:
        nonlocal probe
        out = f(inp)
        if probe is None:
            probe = np.random.default_rng(12345).normal(size=out.data.shape)
        return tsum(mul(out, Tensor(probe)))

    xt = Tensor(base.copy(), requires_grad=True)
    backward(scalar_loss(xt))
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(scalar_loss(Tensor(base.copy())).data)
        flat[i] = orig - eps
        fm = float(scalar_loss(Tensor(base.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
