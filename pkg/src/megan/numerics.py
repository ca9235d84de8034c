"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: row-major numpy buffers, a handful of primitives
(matmul, elementwise arithmetic, softmax, exp/tanh/sigmoid, reductions,
embedding lookup, masked cross-entropy), and a finite-difference oracle
used by the test suite to certify every backward rule.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "Tensor",
    "ComputationRecord",
    "backward",
    "computation_record",
    "finite_difference_check",
    "matmul",
    "embedding",
    "masked_cross_entropy",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # extra leading axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # axes broadcast from extent 1
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array with optional gradient tracking.

    Values are immutable once they participate in a graph; the only
    in-place mutations the trainer performs are on leaf `.data` buffers
    between steps (optimizer updates) and on `.grad` accumulation during
    backward. Gradients accumulate additively; callers zero them
    explicitly via `zero_grad` before each backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_forward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._forward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple, backward_fn, forward_fn, op: str) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
            out._forward = forward_fn
            out._op = op
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def zero_grad(self) -> None:
        self.grad = None

    # -- properties ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def __add__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data + b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._result(data, (a, b), bwd, lambda: a.data + b.data, "add")

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data - b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))

        return Tensor._result(data, (a, b), bwd, lambda: a.data - b.data, "sub")

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __mul__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data * b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(data, (a, b), bwd, lambda: a.data * b.data, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data / b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._result(data, (a, b), bwd, lambda: a.data / b.data, "div")

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __neg__(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._result(-a.data, (a,), bwd, lambda: -a.data, "neg")

    def __pow__(self, exponent: float):
        a = self
        c = float(exponent)
        data = a.data ** c

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * c * a.data ** (c - 1.0))

        return Tensor._result(data, (a,), bwd, lambda: a.data ** c, "pow")

    # -- matmul ------------------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = a.data.reshape(shape)
        old = a.data.shape

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old))

        return Tensor._result(data, (a,), bwd, lambda: a.data.reshape(shape), "reshape")

    def swapaxes(self, axis1: int, axis2: int):
        a = self
        data = np.swapaxes(a.data, axis1, axis2)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(np.swapaxes(g, axis1, axis2))

        return Tensor._result(data, (a,), bwd, lambda: np.swapaxes(a.data, axis1, axis2), "swapaxes")

    # -- nonlinearities --------------------------------------------------------------

    def exp(self):
        a = self
        data = np.exp(a.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * data)

        return Tensor._result(data, (a,), bwd, lambda: np.exp(a.data), "exp")

    def log(self):
        a = self
        data = np.log(a.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._result(data, (a,), bwd, lambda: np.log(a.data), "log")

    def tanh(self):
        a = self
        data = np.tanh(a.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - data * data))

        return Tensor._result(data, (a,), bwd, lambda: np.tanh(a.data), "tanh")

    def sigmoid(self):
        a = self
        data = _sigmoid(a.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * data * (1.0 - data))

        return Tensor._result(data, (a,), bwd, lambda: _sigmoid(a.data), "sigmoid")

    def sqrt(self):
        """Square root with a zero subgradient at exactly 0.

        RMS-style losses hit x == 0 at zero-initialized parameters; the
        minimum-norm subgradient keeps the backward pass finite there.
        """
        a = self
        data = np.sqrt(a.data)

        def bwd(g):
            if a.requires_grad:
                safe = np.where(a.data > 0.0, data, 1.0)
                a._accumulate(np.where(a.data > 0.0, g * 0.5 / safe, 0.0))

        return Tensor._result(data, (a,), bwd, lambda: np.sqrt(a.data), "sqrt")

    def clip(self, lo: float, hi: float):
        a = self
        data = np.clip(a.data, lo, hi)

        def bwd(g):
            if a.requires_grad:
                inside = (a.data >= lo) & (a.data <= hi)
                a._accumulate(g * inside)

        return Tensor._result(data, (a,), bwd, lambda: np.clip(a.data, lo, hi), "clip")

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_spread(g, a.data.shape, axis, keepdims))

        return Tensor._result(data, (a,), bwd, lambda: a.data.sum(axis=axis, keepdims=keepdims), "sum")

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.mean(axis=axis, keepdims=keepdims)
        count = a.data.size if axis is None else int(np.prod([a.data.shape[ax] for ax in _axes(axis, a.data.ndim)]))

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_spread(g, a.data.shape, axis, keepdims) / count)

        return Tensor._result(data, (a,), bwd, lambda: a.data.mean(axis=axis, keepdims=keepdims), "mean")

    def softmax(self, axis: int = -1):
        """Numerically stable softmax along `axis` (max subtraction)."""
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            if a.requires_grad:
                dot = (g * data).sum(axis=axis, keepdims=True)
                a._accumulate((g - dot) * data)

        def fwd():
            s = a.data - a.data.max(axis=axis, keepdims=True)
            es = np.exp(s)
            return es / es.sum(axis=axis, keepdims=True)

        return Tensor._result(data, (a,), bwd, fwd, "softmax")

    # -- backward entry point ---------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # expit is the overflow-safe logistic
    return expit(x)


def _axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _spread(grad: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if axis is not None and not keepdims:
        for ax in sorted(_axes(axis, len(shape))):
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._result(data, (a, b), bwd, lambda: a.data @ b.data, "matmul")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(buf)

    return Tensor._result(data, (table,), bwd, lambda: table.data[ids], "embedding")


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    logits: (N, V); targets: (N,) int; mask: (N,) bool. Raises on an
    all-false mask since the mean would be undefined.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2:
        raise ShapeError(f"masked_cross_entropy: logits must be 2-D, got {logits.shape}")
    if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise ShapeError(
            f"masked_cross_entropy: targets {targets.shape} / mask {mask.shape} "
            f"do not match logits rows {logits.shape[0]}"
        )
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("masked_cross_entropy: mask selects no positions")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    ll = x[np.arange(x.shape[0]), targets] - lse
    data = -(ll * mask).sum() / n_masked

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(x - m)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(x.shape[0]), targets] -= 1.0
            p[~mask] = 0.0
            logits._accumulate(p * (float(g) / n_masked))

    def fwd():
        mm = logits.data.max(axis=1, keepdims=True)
        l2 = mm[:, 0] + np.log(np.exp(logits.data - mm).sum(axis=1))
        return -((logits.data[np.arange(logits.shape[0]), targets] - l2) * mask).sum() / n_masked

    return Tensor._result(np.asarray(data), (logits,), bwd, fwd, "masked_cross_entropy")


# -- the computation record ------------------------------------------------------


class ComputationRecord:
    """Topologically ordered list of the operations behind one output."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list:
        return [t._op for t in self.nodes if t._op != "leaf"]

    def replay_matches(self) -> bool:
        """Recompute every recorded op from its inputs; True if bitwise equal."""
        for t in self.nodes:
            if t._forward is None:
                continue
            fresh = np.asarray(t._forward())
            if fresh.tobytes() != t.data.tobytes():
                return False
        return True


def _toposort(root: Tensor) -> list:
    order: list = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def computation_record(root: Tensor) -> ComputationRecord:
    return ComputationRecord(_toposort(root))


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across fan-out and across repeated
    backward calls; zero leaf grads between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def finite_difference_check(f, params: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps the parameter tensor to a scalar Tensor and must be
    deterministic. The relative error per component is
    |analytic - numeric| / max(1, |analytic|).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params.zero_grad()
    out = f(params)
    if out.data.size != 1:
        raise ShapeError("finite_difference_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise ValueError("finite_difference_check: f returned a non-finite value")
    backward(out)
    analytic = np.zeros_like(params.data) if params.grad is None else params.grad.copy()

    numeric = np.zeros_like(params.data)
    for idx in np.ndindex(params.data.shape):
        orig = params.data[idx]
        params.data[idx] = orig + epsilon
        hi = f(params).data.reshape(())
        params.data[idx] = orig - epsilon
        lo = f(params).data.reshape(())
        params.data[idx] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("finite_difference_check: f returned a non-finite value")
        numeric[idx] = (hi - lo) / (2.0 * epsilon)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if params.data.size else 0.0
