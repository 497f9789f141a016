"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly what the training losses need: broadcasted elementwise
arithmetic, matmul (including stacked batch dimensions), reductions,
clamping/ReLU, softmax, slicing, concatenation and reshapes. Graphs are
built eagerly; calling :func:`backward` on a scalar node accumulates
gradients into the :class:`~poselift.params.Param` objects that leaf
nodes were created from.

All operands must have ndim >= 1; use column/row matrices instead of
bare scalars inside graphs (scalar Python numbers are fine as constant
multipliers).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backprop", "param")

    def __init__(self, value, parents=(), backprop=None, param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backprop = backprop
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return _elementwise_binary(self, other, np.add, lambda a, b, g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _elementwise_binary(self, other, np.subtract, lambda a, b, g: (g, -g))

    def __rsub__(self, other):
        return as_node(other) - self

    def __mul__(self, other):
        return _elementwise_binary(
            self, other, np.multiply, lambda a, b, g: (g * b, g * a)
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _elementwise_binary(
            self, other, np.divide, lambda a, b, g: (g / b, -g * a / (b * b))
        )

    def __rtruediv__(self, other):
        return as_node(other) / self

    def __neg__(self):
        return self * -1.0

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        out = Node(self.value**exponent, (self,))

        def backprop(g):
            _accumulate(self, g * exponent * self.value ** (exponent - 1))

        out.backprop = backprop
        return out

    def sqrt(self):
        val = np.sqrt(self.value)
        out = Node(val, (self,))

        def backprop(g):
            _accumulate(self, g * 0.5 / val)

        out.backprop = backprop
        return out

    def exp(self):
        val = np.exp(self.value)
        out = Node(val, (self,))

        def backprop(g):
            _accumulate(self, g * val)

        out.backprop = backprop
        return out

    def clamp_min(self, bound: float):
        """Elementwise max(x, bound); zero gradient where clamped."""
        mask = self.value > bound
        out = Node(np.where(mask, self.value, bound), (self,))

        def backprop(g):
            _accumulate(self, g * mask)

        out.backprop = backprop
        return out

    def relu(self):
        return self.clamp_min(0.0)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Node(self.value.sum(axis=axis, keepdims=keepdims), (self,))
        shape = self.value.shape

        def backprop(g):
            if axis is None:
                _accumulate(self, np.broadcast_to(g, shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                _accumulate(self, np.broadcast_to(g, shape))

        out.backprop = backprop
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.value.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.value.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.value.shape
        out = Node(self.value.reshape(shape), (self,))

        def backprop(g):
            _accumulate(self, g.reshape(old))

        out.backprop = backprop
        return out

    @property
    def T(self):
        out = Node(self.value.swapaxes(-1, -2), (self,))

        def backprop(g):
            _accumulate(self, g.swapaxes(-1, -2))

        out.backprop = backprop
        return out

    def __getitem__(self, key):
        out = Node(self.value[key], (self,))
        shape = self.value.shape

        def backprop(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            _accumulate(self, full)

        out.backprop = backprop
        return out

    # -- matmul -------------------------------------------------------------

    def __matmul__(self, other):
        other = as_node(other)
        a, b = self.value, other.value
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeMismatch("matmul operands must have ndim >= 2")
        out = Node(np.matmul(a, b), (self, other))

        def backprop(g):
            _accumulate(self, _unbroadcast(np.matmul(g, b.swapaxes(-1, -2)), a.shape))
            _accumulate(other, _unbroadcast(np.matmul(a.swapaxes(-1, -2), g), b.shape))

        out.backprop = backprop
        return out

    def softmax(self, axis: int = -1):
        """Numerically stable softmax along one axis."""
        shifted = self.value - self.value.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        val = e / e.sum(axis=axis, keepdims=True)
        out = Node(val, (self,))

        def backprop(g):
            inner = (g * val).sum(axis=axis, keepdims=True)
            _accumulate(self, (g - inner) * val)

        out.backprop = backprop
        return out


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    """Graph constant; gradients stop here."""
    return Node(x)


def _accumulate(node: Node, g: np.ndarray):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _elementwise_binary(a: Node, other, fwd, grads) -> Node:
    b = as_node(other)
    av, bv = a.value, b.value
    out = Node(fwd(av, bv), (a, b))

    def backprop(g):
        ga, gb = grads(av, bv, g)
        _accumulate(a, _unbroadcast(np.asarray(ga), av.shape))
        _accumulate(b, _unbroadcast(np.asarray(gb), bv.shape))

    out.backprop = backprop
    return out


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes))
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(n, g[tuple(idx)])

    out.backprop = backprop
    return out


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = Node(np.stack([n.value for n in nodes], axis=axis), tuple(nodes))

    def backprop(g):
        for i, n in enumerate(nodes):
            _accumulate(n, np.take(g, i, axis=axis))

    out.backprop = backprop
    return out


def gather_rows(node: Node, indices) -> Node:
    """Select rows (axis 0) by integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    return node[idx]


def mse(a: Node, b) -> Node:
    """Mean over all elements of the squared difference."""
    d = a - b
    return (d * d).mean()


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate param gradients with d(loss)/d(param).

    loss must hold a single element. Parameters not reachable from the
    loss keep whatever is already in their grad slot (zeros after
    ``ParamStore.zero_grad``).
    """
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.value.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backprop is not None and node.grad is not None:
            node.backprop(node.grad)
        if node.param is not None and node.grad is not None:
            node.param.grad += node.grad.reshape(node.param.value.shape)


class GradCheckReport:
    """Per-parameter comparison of analytic vs finite-difference grads."""

    def __init__(self, tolerance: float):
        self.tolerance = tolerance
        self.per_param: dict[str, float] = {}

    @property
    def max_relative_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance

    def __str__(self):
        lines = [
            f"{name}: {err:.3e}" for name, err in sorted(self.per_param.items())
        ]
        status = "PASS" if self.passed else "FAIL"
        lines.append(
            f"max relative error {self.max_relative_error:.3e} "
            f"(tolerance {self.tolerance:.1e}) -> {status}"
        )
        return "\n".join(lines)


def gradcheck(
    loss_fn: Callable[[], Node],
    store,
    *,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    samples_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn rebuilds the loss graph from the current store values on
    every call. For each trainable parameter a random subset of
    coordinates is probed (checking every coordinate of a 1024-wide
    layer would need millions of forward passes). The relative error of
    a coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    store.zero_grad()
    backward(loss_fn())
    analytic = {name: store[name].grad.copy() for name in store.trainable_names()}

    report = GradCheckReport(tolerance)
    for name in store.trainable_names():
        param = store[name]
        flat = param.value.ravel()
        n = flat.size
        if n <= samples_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        worst = 0.0
        for c in coords:
            saved = flat[c]
            flat[c] = saved + step
            up = float(loss_fn().value)
            flat[c] = saved - step
            down = float(loss_fn().value)
            flat[c] = saved
            numeric = (up - down) / (2.0 * step)
            a = analytic[name].ravel()[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        report.per_param[name] = worst
    store.zero_grad()
    return report
