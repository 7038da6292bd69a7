"""Minimal reverse-mode automatic differentiation over dense matrices.

Every :class:`Tensor` wraps a float64 array whose last two axes are
``(rows, cols)``. Leading axes, when present, are a batch of independent
matrices (one per patch) that every primitive maps over; this keeps the
training loop vectorized without changing the per-matrix semantics.

Each primitive records its parents and a backward rule on the output node.
:func:`backward` walks the graph from a 1x1 root in reverse topological order
and returns a mapping ``leaf -> gradient`` for every ``requires_grad`` leaf.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording backward rules (inference)."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        self.data = data
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-entry tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.parents = tuple(parents)
    out.backward_fn = backward_fn if out.requires_grad else None
    out.op = op
    out.name = None
    if not out.requires_grad:
        out.parents = ()
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(grad, shape):
    """Sum ``grad`` over leading batch axes that ``shape`` lacks."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # shared weight: fold the batch into rows
                ga2 = a.data.reshape(-1, a.shape[-1])
                gb = ga2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1 x cols row bias."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (b.data.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[-1]):
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward(g):
        return g, _reduce_to(g, b.shape)

    return _node(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"div shape mismatch: {a.shape} / {b.shape}")
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    """Multiply by a fixed (non-learnable) constant."""
    a = _as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def scalar_div(a: Tensor, s: Tensor) -> Tensor:
    """Divide every entry of ``a`` by the 1x1 tensor ``s``; differentiable in ``s``."""
    a, s = _as_tensor(a), _as_tensor(s)
    if s.data.size != 1:
        raise ValueError("scalar_div divisor must be 1x1")
    sv = s.data.reshape(())
    out = a.data / sv

    def backward(g):
        gs = None
        if s.requires_grad:
            gs = np.reshape(-np.sum(g * a.data) / (sv * sv), s.shape)
        return g / sv, gs

    return _node(out, (a, s), backward, "scalar_div")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (g * (out > 0),), "relu")


def softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        ga = g * out
        ga -= out * ga.sum(axis=-1, keepdims=True)
        return (ga,)

    return _node(out, (a,), backward, "softmax_rows")


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max over rows: (..., r, c) -> (..., 1, c). Ties go to the lowest row."""
    a = _as_tensor(a)
    arg = np.argmax(a.data, axis=-2)[..., None, :]
    out = np.take_along_axis(a.data, arg, axis=-2)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, arg, g, axis=-2)
        return (ga,)

    return _node(out, (a,), backward, "max_rows")


def concat_cols(*tensors: Tensor) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ValueError("concat_cols requires equal leading shapes")
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _node(out, tensors, backward, "concat_cols")


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def norm2(a: Tensor) -> Tensor:
    """Euclidean norm of each row: (..., r, c) -> (..., r, 1)."""
    a = _as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * a.data / safe, 0.0),)

    return _node(n, (a,), backward, "norm2")


def l2_normalize_row(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero row")
    y = a.data / n

    def backward(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,)

    return _node(y, (a,), backward, "l2_normalize_row")


def _cross(a, b):
    # explicit components: np.cross is slow on many tiny arrays
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def cross3(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cross product of (..., r, 3) tensors."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape or u.shape[-1] != 3:
        raise ValueError(f"cross3 expects matching (..., 3) shapes, got {u.shape}, {v.shape}")
    out = _cross(u.data, v.data)
    return _node(out, (u, v), lambda g: (_cross(v.data, g), _cross(g, u.data)), "cross3")


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _node(np.sum(a.data).reshape(1, 1), (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _node(
        np.mean(a.data).reshape(1, 1), (a,), lambda g: (np.broadcast_to(g.reshape(()) / n, a.shape),), "mean_all"
    )


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict:
    """Gradients of the scalar ``root`` with respect to every leaf that requires them."""
    if root.data.size != 1:
        raise ValueError("backward requires scalar root")
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = np.array(g, dtype=np.float64).reshape(node.shape)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad_check(build, leaves, eps: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``build`` is a zero-argument callable returning the scalar root; it must
    read the current ``data`` of ``leaves`` each time it is called. The
    relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    root = build()
    analytic = backward(root)
    worst = 0.0
    for leaf in leaves:
        ga = analytic.get(leaf, np.zeros_like(leaf.data))
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                plus = build().item()
                flat[i] = orig - eps
                minus = build().item()
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            exact = ga.reshape(-1)[i]
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
