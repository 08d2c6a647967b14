"""Minimal dense-matrix computation graph with reverse-mode differentiation.

Every value is a 2-D float64 array. Graphs are built lazily: leaf nodes
(parameters, constants) carry values from construction, interior nodes are
computed by :func:`evaluate`, and :func:`gradient` runs the reverse pass over
the cached forward values. The op set is exactly what the attention-MIL model
needs; there is no general broadcasting, no higher-order derivatives.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "GraphError",
    "ShapeMismatchError",
    "NonFiniteInputError",
    "BackwardBeforeForwardError",
    "NonScalarRootError",
    "parameter",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "total_sum",
    "transpose",
    "log",
    "clamp",
    "colmax",
    "batchnorm",
    "batch_moments",
    "evaluate",
    "evaluate_missing",
    "gradient",
    "finite_diff_check",
]


class GraphError(Exception):
    """Base class for computation-graph failures."""


class ShapeMismatchError(GraphError):
    pass


class NonFiniteInputError(GraphError):
    pass


class BackwardBeforeForwardError(GraphError):
    pass


class NonScalarRootError(GraphError):
    pass


def _as_matrix(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeMismatchError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


class Node:
    """One vertex of the expression graph.

    ``value`` is populated for leaves at construction and for interior nodes
    by :func:`evaluate`; ``grad`` is populated by :func:`gradient`.
    """

    __slots__ = ("op", "name", "parents", "value", "grad", "is_param", "_forward", "_backward", "_ctx")

    def __init__(self, op, parents=(), value=None, name=None, is_param=False):
        self.op = op
        self.name = name
        self.parents = tuple(parents)
        self.value = value
        self.grad = None
        self.is_param = is_param
        self._forward = None
        self._backward = None
        self._ctx = None

    def __repr__(self):
        label = self.name or self.op
        shape = None if self.value is None else self.value.shape
        return f"Node({label}, shape={shape})"

    @property
    def label(self) -> str:
        return self.name if self.name is not None else self.op


def parameter(values, name=None) -> Node:
    """Trainable leaf. The array is referenced, not copied, so in-place
    updates from an optimizer are visible to later evaluations."""
    return Node("parameter", value=_as_matrix(values), name=name, is_param=True)


def constant(values, name=None) -> Node:
    return Node("constant", value=_as_matrix(values), name=name)


def _accumulate(node: Node, contribution: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += contribution


def matmul(a: Node, b: Node, name=None) -> Node:
    out = Node("matmul", (a, b), name=name)

    def fwd():
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeMismatchError(
                f"matmul at node '{out.label}': {a.value.shape} @ {b.value.shape}"
            )
        return a.value @ b.value

    def bwd():
        _accumulate(a, out.grad @ b.value.T)
        _accumulate(b, a.value.T @ out.grad)

    out._forward, out._backward = fwd, bwd
    return out


def add(a: Node, b: Node, name=None) -> Node:
    """Elementwise sum. ``b`` may also be a (1, cols) row or a (1, 1) scalar,
    broadcast over the rows of ``a`` (the bias shapes the model needs)."""
    out = Node("add", (a, b), name=name)

    def fwd():
        sa, sb = a.value.shape, b.value.shape
        if sa != sb and not (sb == (1, sa[1]) or sb == (1, 1)):
            raise ShapeMismatchError(f"add at node '{out.label}': {sa} + {sb}")
        return a.value + b.value

    def bwd():
        _accumulate(a, out.grad)
        if b.value.shape == out.grad.shape:
            _accumulate(b, out.grad)
        elif b.value.shape == (1, 1):
            _accumulate(b, out.grad.sum().reshape(1, 1))
        else:
            _accumulate(b, out.grad.sum(axis=0, keepdims=True))

    out._forward, out._backward = fwd, bwd
    return out


def sub(a: Node, b: Node, name=None) -> Node:
    out = Node("sub", (a, b), name=name)

    def fwd():
        if a.value.shape != b.value.shape:
            raise ShapeMismatchError(
                f"sub at node '{out.label}': {a.value.shape} - {b.value.shape}"
            )
        return a.value - b.value

    def bwd():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    out._forward, out._backward = fwd, bwd
    return out


def mul(a: Node, b: Node, name=None) -> Node:
    """Elementwise (Hadamard) product of same-shape operands."""
    out = Node("mul", (a, b), name=name)

    def fwd():
        if a.value.shape != b.value.shape:
            raise ShapeMismatchError(
                f"mul at node '{out.label}': {a.value.shape} * {b.value.shape}"
            )
        return a.value * b.value

    def bwd():
        _accumulate(a, out.grad * b.value)
        _accumulate(b, out.grad * a.value)

    out._forward, out._backward = fwd, bwd
    return out


def tanh(x: Node, name=None) -> Node:
    out = Node("tanh", (x,), name=name)
    out._forward = lambda: np.tanh(x.value)
    out._backward = lambda: _accumulate(x, out.grad * (1.0 - out.value * out.value))
    return out


def sigmoid(x: Node, name=None) -> Node:
    out = Node("sigmoid", (x,), name=name)

    def fwd():
        v = x.value
        # piecewise form avoids overflow in exp for large |v|
        r = np.empty_like(v)
        pos = v >= 0
        r[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        r[~pos] = ev / (1.0 + ev)
        return r

    out._forward = fwd
    out._backward = lambda: _accumulate(x, out.grad * out.value * (1.0 - out.value))
    return out


def relu(x: Node, name=None) -> Node:
    out = Node("relu", (x,), name=name)
    out._forward = lambda: np.maximum(x.value, 0.0)
    out._backward = lambda: _accumulate(x, out.grad * (x.value > 0.0))
    return out


def softmax(x: Node, name=None) -> Node:
    """Row-wise softmax with max-subtraction for overflow safety."""
    out = Node("softmax", (x,), name=name)

    def fwd():
        shifted = x.value - x.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def bwd():
        y, g = out.value, out.grad
        _accumulate(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    out._forward, out._backward = fwd, bwd
    return out


def total_sum(x: Node, name=None) -> Node:
    out = Node("sum", (x,), name=name)
    out._forward = lambda: x.value.sum().reshape(1, 1)
    out._backward = lambda: _accumulate(x, np.full_like(x.value, out.grad[0, 0]))
    return out


def transpose(x: Node, name=None) -> Node:
    out = Node("transpose", (x,), name=name)
    out._forward = lambda: x.value.T
    out._backward = lambda: _accumulate(x, out.grad.T)
    return out


def log(x: Node, name=None) -> Node:
    out = Node("log", (x,), name=name)
    out._forward = lambda: np.log(x.value)
    out._backward = lambda: _accumulate(x, out.grad / x.value)
    return out


def clamp(x: Node, lo: float, hi: float, name=None) -> Node:
    """Clip to [lo, hi]; gradient passes only where the input is in range."""
    out = Node("clamp", (x,), name=name)
    out._forward = lambda: np.clip(x.value, lo, hi)
    out._backward = lambda: _accumulate(x, out.grad * ((x.value >= lo) & (x.value <= hi)))
    return out


def colmax(x: Node, name=None) -> Node:
    """Column-wise maximum, reducing (n, d) to (1, d). The gradient is routed
    to the first maximal row of each column."""
    out = Node("colmax", (x,), name=name)
    out._forward = lambda: x.value.max(axis=0, keepdims=True)

    def bwd():
        idx = x.value.argmax(axis=0)
        g = np.zeros_like(x.value)
        g[idx, np.arange(x.value.shape[1])] = out.grad[0]
        _accumulate(x, g)

    out._backward = bwd
    return out


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and biased variance over the rows of ``x``."""
    mean = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return mean, var


def batchnorm(x: Node, gamma: Node, beta: Node, *, training: bool,
              running_mean=None, running_var=None, eps: float = 1e-5,
              name=None) -> Node:
    """Column-wise batch normalization: gamma * (x - mu) / sqrt(var + eps) + beta.

    In training mode the moments are the per-batch statistics of ``x`` (biased
    variance, so a single row normalizes to zero instead of erroring); in eval
    mode the supplied running statistics are treated as constants. The node
    never mutates running statistics — callers own that update.
    """
    out = Node("batchnorm", (x, gamma, beta), name=name)
    if not training:
        r_mean = _as_matrix(running_mean)
        r_var = _as_matrix(running_var)

    def fwd():
        v = x.value
        if gamma.value.shape != (1, v.shape[1]) or beta.value.shape != (1, v.shape[1]):
            raise ShapeMismatchError(
                f"batchnorm at node '{out.label}': input {v.shape}, "
                f"gamma {gamma.value.shape}, beta {beta.value.shape}"
            )
        if training:
            mean, var = batch_moments(v)
        else:
            mean, var = r_mean, r_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (v - mean) * inv_std
        out._ctx = (xhat, inv_std)
        return gamma.value * xhat + beta.value

    def bwd():
        xhat, inv_std = out._ctx
        g = out.grad
        _accumulate(beta, g.sum(axis=0, keepdims=True))
        _accumulate(gamma, (g * xhat).sum(axis=0, keepdims=True))
        dxhat = g * gamma.value
        if training:
            # backward through the batch statistics themselves
            n = x.value.shape[0]
            dx = (dxhat - dxhat.mean(axis=0, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)) * inv_std
        else:
            dx = dxhat * inv_std
        _accumulate(x, dx)

    out._forward, out._backward = fwd, bwd
    return out


def _topo_order(root: Node) -> list[Node]:
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


def evaluate(root: Node) -> np.ndarray:
    """Forward pass: recompute every interior node of ``root``'s subgraph from
    the current leaf values and return the root value. Pure in the leaves."""
    order = _topo_order(root)
    for node in order:
        if node._forward is None:
            if not np.isfinite(node.value).all():
                raise NonFiniteInputError(f"leaf '{node.label}' holds non-finite values")
        else:
            node.value = node._forward()
    return root.value


def evaluate_missing(root: Node) -> np.ndarray:
    """Like :func:`evaluate` but skips interior nodes that already hold a
    value. Only valid when leaf values are unchanged since the earlier partial
    evaluation; freshly built graphs satisfy this by construction."""
    order = _topo_order(root)
    for node in order:
        if node._forward is None:
            if not np.isfinite(node.value).all():
                raise NonFiniteInputError(f"leaf '{node.label}' holds non-finite values")
        elif node.value is None:
            node.value = node._forward()
    return root.value


def gradient(root: Node, seed) -> dict[Node, np.ndarray]:
    """Reverse pass from ``root`` seeded with ``seed``; returns the gradient
    for every parameter leaf in the graph. Requires a prior :func:`evaluate`."""
    order = _topo_order(root)
    for node in order:
        if node.value is None:
            raise BackwardBeforeForwardError(
                f"node '{node.label}' has no forward value; call evaluate first"
            )
        node.grad = None
    seed = _as_matrix(seed)
    if seed.shape != root.value.shape:
        raise ShapeMismatchError(
            f"gradient seed shape {seed.shape} does not match root shape {root.value.shape}"
        )
    root.grad = seed.copy()
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    return {
        node: (node.grad.copy() if node.grad is not None else np.zeros_like(node.value))
        for node in order
        if node.is_param
    }


def finite_diff_check(root: Node, param: Node, step: float = 1e-5) -> float:
    """Max relative disagreement between the analytic gradient of the
    scalar-valued ``root`` and central finite differences over every entry of
    ``param``. Independent of the backward pass: only repeated forward
    evaluations of the same graph."""
    if step <= 0:
        raise ValueError("step must be positive")
    evaluate(root)
    if root.value.shape != (1, 1):
        raise NonScalarRootError(f"finite_diff_check needs a scalar root, got {root.value.shape}")
    analytic = gradient(root, np.ones((1, 1)))[param]
    values = param.value
    worst = 0.0
    for idx in np.ndindex(values.shape):
        orig = values[idx]
        values[idx] = orig + step
        f_plus = evaluate(root)[0, 0]
        values[idx] = orig - step
        f_minus = evaluate(root)[0, 0]
        values[idx] = orig
        central = (f_plus - f_minus) / (2.0 * step)
        a = analytic[idx]
        rel = abs(a - central) / max(abs(a), abs(central), 1e-8)
        worst = max(worst, rel)
    evaluate(root)  # leave cached values consistent with unperturbed leaves
    return worst
