"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy float64 array.  Operations on tensors record a
`GraphNode` (operation kind, input tensors, backward closure) on their
output whenever gradients are enabled and some input requires them.
`backward(root)` seeds the scalar root with gradient 1 and walks the graph
exactly once in reverse topological order, accumulating gradients into
every reachable tensor that requires them.

The engine is deliberately small: it implements exactly the operation set
the forecasting model needs, all in 64-bit floats so gradients can be
validated against central finite differences at tight tolerances.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng

COSINE_EPS = 1e-8

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain."""


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class GraphNode:
    """One recorded operation: kind, inputs, and the backward rule."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut loose from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, inputs, backward_fn) -> Tensor:
    """Build an op output, recording a graph node when tracking is on."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = GraphNode(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar root; seeds the root gradient at 1."""
    if root.data.size != 1:
        raise ValueError(
            f"backward() requires a scalar root, got shape {root.data.shape}"
        )
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if t.node is None or id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and id(inp) not in visited:
                stack.append((inp, False))
    root.grad = np.ones_like(root.data)
    for t in reversed(topo):
        if t.grad is None:
            continue
        grads = t.node.backward_fn(t.grad)
        for inp, g in zip(t.node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            # accumulation always allocates, so returned grads may alias
            # the upstream buffer without risk of later corruption
            if inp.grad is None:
                inp.grad = g
            else:
                inp.grad = inp.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcast semantics)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _broadcast_op(a, b, "add", np.add)

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _broadcast_op(a, b, "sub", np.subtract)

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = _broadcast_op(a, b, "mul", np.multiply)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, "mul", (a, b), bwd)


def _broadcast_op(a: Tensor, b: Tensor, name: str, ufunc):
    try:
        return ufunc(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform"
        )
    data = a.data @ b.data

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(data, "matmul", (a, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def tanh(t) -> Tensor:
    t = as_tensor(t)
    y = np.tanh(t.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _make(y, "tanh", (t,), bwd)


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    y = 1.0 / (1.0 + np.exp(-t.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _make(y, "sigmoid", (t,), bwd)


def relu(t) -> Tensor:
    t = as_tensor(t)
    y = np.maximum(t.data, 0.0)

    def bwd(g):
        return (g * (t.data > 0.0),)

    return _make(y, "relu", (t,), bwd)


def exp(t) -> Tensor:
    t = as_tensor(t)
    y = np.exp(t.data)

    def bwd(g):
        return (g * y,)

    return _make(y, "exp", (t,), bwd)


def log(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log: input has non-positive entries")
    y = np.log(t.data)

    def bwd(g):
        return (g / t.data,)

    return _make(y, "log", (t,), bwd)


def square(t) -> Tensor:
    t = as_tensor(t)

    def bwd(g):
        return (g * 2.0 * t.data,)

    return _make(t.data * t.data, "square", (t,), bwd)


def sqrt(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data < 0.0):
        raise DomainError("sqrt: input has negative entries")
    y = np.sqrt(t.data)

    def bwd(g):
        return (g * 0.5 / y,)

    return _make(y, "sqrt", (t,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def concat(a, b, axis: int) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = np.concatenate([a.data, b.data], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: shapes {a.data.shape} and {b.data.shape} do not stack on axis {axis}"
        ) from exc
    split = a.data.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        return (ga, gb)

    return _make(data, "concat", (a, b), bwd)


def slice_(t, axis: int, start: int, stop: int) -> Tensor:
    t = as_tensor(t)
    index = [np.s_[:]] * t.data.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    data = t.data[index]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[index] = g
        return (full,)

    return _make(data, "slice", (t,), bwd)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    orig = t.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make(t.data.reshape(shape), "reshape", (t,), bwd)


def take_rows(t, indices) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    data = t.data[idx]

    def bwd(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, "take_rows", (t,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(t, axis: int | None = None) -> Tensor:  # noqa: A001 - tensor namespace
    t = as_tensor(t)
    if axis is None:
        data = np.asarray(t.data.sum())

        def bwd(g):
            return (np.broadcast_to(g, t.data.shape),)

    else:
        data = t.data.sum(axis=axis)

        def bwd(g):
            return (np.broadcast_to(np.expand_dims(g, axis), t.data.shape),)

    return _make(data, "sum", (t,), bwd)


def mean(t) -> Tensor:
    t = as_tensor(t)
    n = t.data.size
    data = np.asarray(t.data.sum() / n)

    def bwd(g):
        return (np.broadcast_to(g / n, t.data.shape),)

    return _make(data, "mean", (t,), bwd)


# ---------------------------------------------------------------------------
# model-specific operations
# ---------------------------------------------------------------------------

def dropout(t, rate: float, training: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors.

    Evaluation mode is the identity and consumes no randomness.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    t = as_tensor(t)
    if not training or rate == 0.0:
        def bwd_id(g):
            return (g,)

        return _make(t.data, "dropout", (t,), bwd_id)
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    keep = rng.uniform(t.data.shape) >= rate
    scale = keep / (1.0 - rate)

    def bwd(g):
        return (g * scale,)

    return _make(t.data * scale, "dropout", (t,), bwd)


def grad_reverse(t, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    t = as_tensor(t)
    out = Tensor(t.data)  # shares the buffer: forward is bitwise identity
    if _grad_enabled and t.requires_grad:
        out.requires_grad = True

        def bwd(g):
            return (-lam * g,)

        out.node = GraphNode("grad_reverse", (t,), bwd)
    return out


def _row_cosine_parts(a: np.ndarray, b: np.ndarray):
    dot = np.einsum("ij,ij->i", a, b)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    denom = na * nb + COSINE_EPS
    return dot, na, nb, denom


def row_cosine(a, b) -> Tensor:
    """Cosine similarity of paired rows: <a_i,b_i> / (|a_i||b_i| + eps).

    The eps guard makes the both-rows-zero case return 0 instead of
    dividing by zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError(
            f"row_cosine: shapes {a.data.shape} and {b.data.shape} must be equal 2-D"
        )
    dot, na, nb, denom = _row_cosine_parts(a.data, b.data)
    sim = dot / denom

    def bwd(g):
        # d(sim)/da = b/denom - sim * (nb/na) * a / denom, guarded at na = 0
        safe_a = np.where(na > 0.0, na, 1.0)
        safe_b = np.where(nb > 0.0, nb, 1.0)
        coef_a = np.where(na > 0.0, sim * nb / (safe_a * denom), 0.0)
        coef_b = np.where(nb > 0.0, sim * na / (safe_b * denom), 0.0)
        ga = g[:, None] * (b.data / denom[:, None] - coef_a[:, None] * a.data)
        gb = g[:, None] * (a.data / denom[:, None] - coef_b[:, None] * b.data)
        return (ga, gb)

    return _make(sim, "row_cosine", (a, b), bwd)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity of two vectors as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(
            f"cosine_similarity: expected equal 1-D shapes, got {a.data.shape} and {b.data.shape}"
        )
    rows = row_cosine(reshape(a, (1, -1)), reshape(b, (1, -1)))
    return reshape(rows, ())


def graph_leaves(root: Tensor) -> list:
    """All gradient-requiring leaf tensors reachable from `root`'s graph.

    Used to audit which parameters a forward pass actually touched.
    """
    leaves, seen, stack = [], set(), [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                leaves.append(t)
            continue
        stack.extend(t.node.inputs)
    return leaves


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels against row softmax."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.data.shape} vs labels {y.shape}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    losses = -z[np.arange(n), y] + np.log(ez.sum(axis=1))
    data = np.asarray(losses.mean())

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(n), y] -= 1.0
        return (g * gl / n,)

    return _make(data, "softmax_cross_entropy", (logits,), bwd)
