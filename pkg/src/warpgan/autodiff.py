"""Reverse-mode automatic differentiation over numpy float32 arrays.

Minimal tape-free design: every op creates a :class:`Tensor` holding its
value, its parent tensors, and a backward rule.  Backward rules are
themselves written in terms of the ops in this module, so running them
with gradient tracking enabled (``create_graph=True``) yields a graph
that can be differentiated again.  That second-order path is exactly
what the gradient-penalty term of the critic loss needs, and it is the
reason convolution ships as three primitives (forward plus its two
adjoints) that form a closed set under differentiation.

Everything is float32.  There is no device abstraction, no dtype
promotion and no broadcasting cleverness beyond what numpy provides;
shape problems surface as :class:`ShapeMismatch` at op construction.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NotInGraph, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the with-block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float32 array plus (optionally) its position in a computation graph.

    ``grad`` is populated by :func:`backward` on leaf tensors that
    require gradients; it is a plain ndarray, not part of any graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._rule: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = "param" if isinstance(self, Parameter) else (
            "node" if self._parents else "leaf"
        )
        return f"Tensor({tag}, shape={self.data.shape})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _ensure(other))

    def __radd__(self, other):
        return add(_ensure(other), self)

    def __sub__(self, other):
        return sub(self, _ensure(other))

    def __rsub__(self, other):
        return sub(_ensure(other), self)

    def __mul__(self, other):
        return mul(self, _ensure(other))

    def __rmul__(self, other):
        return mul(_ensure(other), self)

    def __truediv__(self, other):
        return div(self, _ensure(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _ensure(other))

    def sum(self, axes=None, keepdims: bool = False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _ensure(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def primitive(out_data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    """Wrap an externally computed forward value as a graph node.

    ``rule(cotangent) -> tuple of cotangents`` (one per parent, None for
    "no gradient").  Rules receive and return Tensors; whether their
    internal computations are themselves traced depends on the grad mode
    active when the backward pass runs them.
    """
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcasted cotangent back to ``shape``."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    axes = list(range(extra))
    for i, n in enumerate(shape):
        if n == 1 and g.data.shape[extra + i] != 1:
            axes.append(extra + i)
    if axes:
        g = reduce_sum(g, tuple(axes), keepdims=True)
    return reshape(g, shape)


# -- arithmetic ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")
    return primitive(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: {a.data.shape} vs {b.data.shape}")
    return primitive(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.data.shape),
            _unbroadcast(neg(g), b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return primitive(-a.data, (a,), lambda g: (neg(g),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}")
    return primitive(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(mul(g, b), a.data.shape),
            _unbroadcast(mul(g, a), b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatch(f"div: {a.data.shape} vs {b.data.shape}")

    def rule(g):
        ga = _unbroadcast(div(g, b), a.data.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)
        return ga, gb

    return primitive(out, (a, b), rule)


def square(a: Tensor) -> Tensor:
    return primitive(a.data * a.data, (a,), lambda g: (mul(g, mul(_TWO, a)),))


_TWO = Tensor(np.float32(2.0))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    out_holder = []

    def rule(g):
        # d sqrt(a) = g / (2 sqrt(a)); reuse the forward output
        return (div(g, mul(_TWO, out_holder[0])),)

    out = primitive(out_data, (a,), rule)
    out_holder.append(out)
    return out


def safe_reciprocal(a: Tensor, eps: float = 1e-8) -> Tensor:
    """1/a with the magnitude of a clamped away from zero.

    Used for projective division where a divisor can pass through zero
    (points crossing the horizon); the clamp keeps values and gradients
    finite, and downstream validity masking discards those samples.
    """
    mag = np.maximum(np.abs(a.data), np.float32(eps))
    sign = np.where(a.data < 0, np.float32(-1.0), np.float32(1.0))
    out_data = sign / mag
    out_holder = []

    def rule(g):
        r = out_holder[0]
        return (neg(mul(g, mul(r, r))),)

    out = primitive(out_data, (a,), rule)
    out_holder.append(out)
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float32))
    return primitive(a.data * mask.data, (a,), lambda g: (mul(g, mask),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # piecewise-constant local slope, treated as data in higher-order passes
    factor = Tensor(np.where(a.data > 0, np.float32(1.0), np.float32(slope)))
    return primitive(a.data * factor.data, (a,), lambda g: (mul(g, factor),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.data.shape} vs {b.data.shape}")

    def rule(g):
        ga = _unbroadcast(matmul(g, _swap_last(b)), a.data.shape)
        gb = _unbroadcast(matmul(_swap_last(a), g), b.data.shape)
        return ga, gb

    return primitive(out, (a, b), rule)


def _swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return transpose(a, tuple(axes))


# -- structural ops -----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {a.data.shape} -> {shape}")
    return primitive(out, (a,), lambda g: (reshape(g, a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return primitive(
        a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),)
    )


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(int(x) for x in axes)
    if not axes:
        return a
    out = a.data.sum(axis=axes, keepdims=keepdims)

    kept = [1 if i in axes else n for i, n in enumerate(a.data.shape)]

    def rule(g):
        gk = reshape(g, kept) if not keepdims else g
        ones = Tensor(np.ones(a.data.shape, dtype=np.float32))
        return (mul(gk, ones),)

    return primitive(np.asarray(out, dtype=np.float32), (a,), rule)


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    s = reduce_sum(a, axes, keepdims)
    return mul(s, Tensor(np.float32(1.0 / n)))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            f"concat along {axis}: {[t.data.shape for t in tensors]}"
        )
    sizes = [t.data.shape[axis] for t in tensors]

    def rule(g):
        outs = []
        start = 0
        for n in sizes:
            outs.append(narrow(g, axis, start, n))
            start += n
        return tuple(outs)

    return primitive(out, tuple(tensors), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ShapeMismatch(
            f"narrow: [{start}, {start + length}) outside axis {axis} of {a.data.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = a.data[tuple(idx)]
    before = start
    after = a.data.shape[axis] - start - length
    return primitive(
        np.ascontiguousarray(out),
        (a,),
        lambda g: (pad_zeros(g, axis, before, after),),
    )


def pad_zeros(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero padding along one axis (the adjoint of narrow)."""
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    return primitive(
        out, (a,), lambda g: (narrow(g, axis, before, a.data.shape[axis]),)
    )


def block_mean(a: Tensor, fy: int, fx: int) -> Tensor:
    """Average-pool an (N, C, H, W) tensor over non-overlapping fy x fx blocks.

    Extents must divide exactly; this is the pooling used to inject a
    downscaled copy of the network input at interior layers.
    """
    n, c, h, w = a.data.shape
    if h % fy or w % fx:
        raise ShapeMismatch(f"block_mean: {h}x{w} not divisible by {fy}x{fx}")
    ho, wo = h // fy, w // fx
    out = a.data.reshape(n, c, ho, fy, wo, fx).mean(axis=(3, 5))
    inv = Tensor(np.float32(1.0 / (fy * fx)))

    def rule(g):
        gk = reshape(g, (n, c, ho, 1, wo, 1))
        spread = mul(gk, Tensor(np.ones((1, 1, 1, fy, 1, fx), dtype=np.float32)))
        return (mul(reshape(spread, (n, c, h, w)), inv),)

    return primitive(np.asarray(out, dtype=np.float32), (a,), rule)


# -- convolution --------------------------------------------------------
#
# Strided 2-D convolution with "ceil" output size: out = ceil(in/stride),
# zero padding split low/high with the extra row/column at the high end.
# Three primitives form a differentiation-closed set:
#   conv2d(x, w)          forward
#   conv_input_adjoint(g, w)   dL/dx from dL/dy
#   conv_weight_adjoint(x, g)  dL/dw from dL/dy
# The adjoint of an adjoint lands back in the set, which is what makes
# double backward (gradient penalty) exact rather than approximated.


def _conv_pads(h: int, k: int, s: int):
    out = -(-h // s)
    total = max((out - 1) * s + k - h, 0)
    lo = total // 2
    return out, lo, total - lo


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, k, k), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[
                :, :, i : i + ho * s : s, j : j + wo * s : s
            ].transpose(0, 2, 3, 1)
    return cols


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, c, h, wd = x.shape
    f, cw, k, _ = w.shape
    ho, plo, phi = _conv_pads(h, k, stride)
    wo, qlo, qhi = _conv_pads(wd, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (plo, phi), (qlo, qhi)))
    cols = _im2col(xp, k, stride, ho, wo)
    y = cols.reshape(n * ho * wo, c * k * k) @ w.reshape(f, -1).T
    return np.ascontiguousarray(
        y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    )


def _conv_input_adjoint(
    g: np.ndarray, w: np.ndarray, stride: int, x_shape: tuple
) -> np.ndarray:
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    ho, plo, phi = _conv_pads(h, k, stride)
    wo, qlo, qhi = _conv_pads(wd, k, stride)
    colsg = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f) @ w.reshape(f, -1)
    colsg = colsg.reshape(n, ho, wo, c, k, k)
    gxp = np.zeros((n, c, h + plo + phi, wd + qlo + qhi), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                colsg[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(gxp[:, :, plo : plo + h, qlo : qlo + wd])


def _conv_weight_adjoint(
    x: np.ndarray, g: np.ndarray, stride: int, w_shape: tuple
) -> np.ndarray:
    n, c, h, wd = x.shape
    f, _, k, _ = w_shape
    ho, plo, phi = _conv_pads(h, k, stride)
    wo, qlo, qhi = _conv_pads(wd, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (plo, phi), (qlo, qhi)))
    cols = _im2col(xp, k, stride, ho, wo).reshape(n * ho * wo, c * k * k)
    gw = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f).T @ cols
    return gw.reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Strided convolution, NCHW activations, (F, C, k, k) weights."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"conv2d: x {x.data.shape}, w {w.data.shape}")
    out = _conv_forward(x.data, w.data, stride)
    x_shape, w_shape = x.data.shape, w.data.shape

    def rule(g):
        return (
            conv_input_adjoint(g, w, stride, x_shape),
            conv_weight_adjoint(x, g, stride, w_shape),
        )

    return primitive(out, (x, w), rule)


def conv_input_adjoint(g: Tensor, w: Tensor, stride: int, x_shape: tuple) -> Tensor:
    out = _conv_input_adjoint(g.data, w.data, stride, x_shape)

    def rule(c):
        # <c, J_x^T g> is linear in g with factor conv(c, w) and linear in
        # the weights with factor conv_weight_adjoint(c, g)
        return (
            conv2d(c, w, stride),
            conv_weight_adjoint(c, g, stride, w.data.shape),
        )

    return primitive(out, (g, w), rule)


def conv_weight_adjoint(x: Tensor, g: Tensor, stride: int, w_shape: tuple) -> Tensor:
    out = _conv_weight_adjoint(x.data, g.data, stride, w_shape)

    def rule(u):
        return (
            conv_input_adjoint(g, u, stride, x.data.shape),
            conv2d(x, u, stride),
        )

    return primitive(out, (x, g), rule)


# -- backward engine ----------------------------------------------------


def _toposort(root: Tensor, needed) -> list:
    order = []
    state = {}  # id -> 0 visiting / 1 done
    stack = [(root, iter(root._parents))]
    state[id(root)] = 0
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if not needed(p) or state.get(id(p)) is not None:
                continue
            state[id(p)] = 0
            stack.append((p, iter(p._parents)))
            advanced = True
            break
        if not advanced:
            state[id(node)] = 1
            order.append(node)
            stack.pop()
    return order


def _reachable_set(root: Tensor, targets: list) -> dict:
    """id -> bool: does this node reach any target through parent edges."""
    target_ids = {id(t) for t in targets}
    memo = {}
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            memo[id(node)] = id(node) in target_ids or any(
                memo.get(id(p), False) for p in node._parents
            )
            continue
        if id(node) in memo:
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in memo:
                stack.append((p, False))
    return memo


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False):
    """Gradients of a scalar output w.r.t. the given tensors.

    Returns one Tensor per input.  With ``create_graph`` the returned
    tensors are differentiable graph nodes themselves (needed for the
    gradient penalty); without it they are constants.

    Raises NotInGraph if the output does not depend on some input.
    """
    if output.data.size != 1:
        raise ShapeMismatch(f"grad needs a scalar output, got {output.data.shape}")
    inputs = list(inputs)
    reach = _reachable_set(output, inputs)
    if not reach.get(id(output), False):
        raise NotInGraph("output does not depend on any requested input")

    def needed(t):
        return reach.get(id(t), False)

    order = _toposort(output, needed)
    cot = {id(output): Tensor(np.ones_like(output.data))}
    ctx = enable_grad if create_graph else no_grad
    with ctx():
        for node in reversed(order):
            g = cot.get(id(node))
            if g is None or node._rule is None:
                continue
            parent_gs = node._rule(g)
            for p, pg in zip(node._parents, parent_gs):
                if pg is None or not needed(p):
                    continue
                acc = cot.get(id(p))
                cot[id(p)] = pg if acc is None else add(acc, pg)
    results = []
    for inp in inputs:
        g = cot.get(id(inp))
        if g is None:
            raise NotInGraph("output does not depend on one of the inputs")
        results.append(g if create_graph else g.detach())
    return results


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of requires-grad leaves."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got {loss.data.shape}")
    if not loss.requires_grad:
        raise NotInGraph("loss does not depend on any trainable tensor")

    def needed(t):
        return t.requires_grad

    order = _toposort(loss, needed)
    cot = {id(loss): np.ones_like(loss.data)}
    with no_grad():
        for node in reversed(order):
            g = cot.get(id(node))
            if g is None:
                continue
            if node._rule is None:
                if not node._parents:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_gs = node._rule(Tensor(g))
            for p, pg in zip(node._parents, parent_gs):
                if pg is None or not p.requires_grad:
                    continue
                acc = cot.get(id(p))
                cot[id(p)] = pg.data if acc is None else acc + pg.data


def input_gradient_norm(fn, x: Tensor) -> Tensor:
    """Per-sample L2 norm of d(sum fn(x))/dx, as a differentiable tensor.

    ``fn`` maps an (N, ...) tensor to per-sample scalars (N,) whose
    samples are independent, so the gradient of the summed output
    separates per sample.  The returned (N,) tensor participates in the
    graph; differentiating through it reaches fn's own parameters.
    """
    y = fn(x)
    (gx,) = grad(y.sum(), [x], create_graph=True)
    axes = tuple(range(1, gx.data.ndim))
    return sqrt(square(gx).sum(axes))


# -- optimizer ----------------------------------------------------------


class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict = {}
        self.v: dict = {}

    def ensure(self, param: Parameter):
        if param.name not in self.m:
            self.m[param.name] = np.zeros_like(param.data)
            self.v[param.name] = np.zeros_like(param.data)


def adam_step(
    params: Sequence[Parameter],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update, in place, from the accumulated ``.grad`` fields.

    Parameters with no accumulated gradient are an error: the training
    loops always produce gradients for exactly the set being optimized.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name} has no gradient")
        state.ensure(p)
        m = state.m[p.name]
        v = state.v[p.name]
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def zero_grads(params: Sequence[Parameter]):
    for p in params:
        p.grad = None
