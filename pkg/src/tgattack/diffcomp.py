"""Reverse-mode differentiation over dense float64 matrices.

Every quantity is a 2-D array. Vectors are columns (``(d, 1)``); a batch of
vectors is stored column-wise, so most primitives act independently on each
column. A :class:`Tape` records primitives in creation order and
:meth:`Tape.backward` walks that record in reverse.

Only first-order derivatives are supported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "NonFiniteError",
    "Tape",
    "Value",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(ValueError):
    """A NaN or infinity reached the tape."""


class ContractError(RuntimeError):
    """A tape was used outside its contract (non-scalar root, foreign node...)."""


@dataclass(frozen=True, eq=False)
class Value:
    """Handle to one node on a tape. ``data`` is read-only."""

    tape: "Tape"
    id: int
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar value of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Value(id={self.id}, shape={self.shape})"


# A vjp maps the upstream gradient to one contribution per parent.
_Vjp = Callable[[np.ndarray], Sequence[np.ndarray]]


class _Node:
    __slots__ = ("parents", "vjp", "requires_grad", "is_leaf")

    def __init__(self, parents, vjp, requires_grad, is_leaf):
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf


def _as_matrix(array) -> np.ndarray:
    a = np.array(array, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Ordered record of primitive operations.

    A tape is single-owner. Build it, call :meth:`backward` (any number of
    times), then drop it.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._values: list[Value] = []

    def __len__(self) -> int:
        return len(self._nodes)

    # -- node creation -----------------------------------------------------

    def _push(self, data: np.ndarray, parents: tuple[Value, ...], vjp: _Vjp | None,
              *, requires_grad: bool | None = None, op: str = "leaf") -> Value:
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite entries")
        for p in parents:
            if p.tape is not self:
                raise ContractError(f"{op}: operand belongs to a different tape")
        if requires_grad is None:
            requires_grad = any(self._nodes[p.id].requires_grad for p in parents)
        data.setflags(write=False)
        node = _Node(tuple(p.id for p in parents), vjp, requires_grad, vjp is None)
        value = Value(self, len(self._nodes), data)
        self._nodes.append(node)
        self._values.append(value)
        return value

    def leaf(self, array, requires_grad: bool = True) -> Value:
        """Register an input. Leaves with ``requires_grad`` receive gradients."""
        return self._push(_as_matrix(array), (), None, requires_grad=requires_grad)

    def constant(self, array) -> Value:
        return self.leaf(array, requires_grad=False)

    # -- primitives --------------------------------------------------------

    def matmul(self, a: Value, b: Value) -> Value:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        A, B = a.data, b.data
        return self._push(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), op="matmul")

    def add(self, a: Value, b: Value) -> Value:
        """Elementwise sum. ``b`` may also be a column ``(rows, 1)``, added to every column of ``a``."""
        if a.shape == b.shape:
            return self._push(a.data + b.data, (a, b), lambda g: (g, g), op="add")
        if b.shape == (a.shape[0], 1):
            return self._push(a.data + b.data, (a, b),
                              lambda g: (g, g.sum(axis=1, keepdims=True)), op="add")
        raise DimensionError(f"add: {a.shape} + {b.shape}")

    def sub(self, a: Value, b: Value) -> Value:
        if a.shape != b.shape:
            raise DimensionError(f"sub: {a.shape} - {b.shape}")
        return self._push(a.data - b.data, (a, b), lambda g: (g, -g), op="sub")

    def hadamard(self, a: Value, b: Value) -> Value:
        if a.shape != b.shape:
            raise DimensionError(f"hadamard: {a.shape} * {b.shape}")
        A, B = a.data, b.data
        return self._push(A * B, (a, b), lambda g: (g * B, g * A), op="hadamard")

    def scale(self, a: Value, c: float) -> Value:
        c = float(c)
        return self._push(a.data * c, (a,), lambda g: (g * c,), op="scale")

    def sigmoid(self, a: Value) -> Value:
        s = _stable_sigmoid(a.data)
        return self._push(s, (a,), lambda g: (g * s * (1.0 - s),), op="sigmoid")

    def tanh(self, a: Value) -> Value:
        t = np.tanh(a.data)
        return self._push(t, (a,), lambda g: (g * (1.0 - t * t),), op="tanh")

    def relu(self, a: Value) -> Value:
        # subgradient at exactly 0 is 0
        mask = a.data > 0
        return self._push(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), op="relu")

    def concat_rows(self, values: Sequence[Value]) -> Value:
        if not values:
            raise DimensionError("concat_rows: empty operand list")
        cols = {v.shape[1] for v in values}
        if len(cols) != 1:
            raise DimensionError(f"concat_rows: column counts differ {[v.shape for v in values]}")
        bounds = np.cumsum([0] + [v.shape[0] for v in values])

        def vjp(g):
            return [g[bounds[k]:bounds[k + 1]] for k in range(len(values))]

        return self._push(np.vstack([v.data for v in values]), tuple(values), vjp, op="concat_rows")

    def slice_row(self, a: Value, index: int) -> Value:
        rows = a.shape[0]
        if not -rows <= index < rows:
            raise DimensionError(f"slice_row: index {index} out of range for {a.shape}")
        index %= rows
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[index] = g[0]
            return (out,)

        return self._push(a.data[index:index + 1].copy(), (a,), vjp, op="slice_row")

    def sum_squares(self, a: Value) -> Value:
        X = a.data
        return self._push(np.array([[np.sum(X * X)]]), (a,),
                          lambda g: (2.0 * g[0, 0] * X,), op="sum_squares")

    def weighted_sum_squares(self, a: Value, weights) -> Value:
        """``sum(weights * a**2)`` with constant ``weights`` of the same shape."""
        W = _as_matrix(weights)
        if W.shape != a.shape:
            raise DimensionError(f"weighted_sum_squares: weights {W.shape} vs {a.shape}")
        X = a.data
        return self._push(np.array([[np.sum(W * X * X)]]), (a,),
                          lambda g: (2.0 * g[0, 0] * W * X,), op="weighted_sum_squares")

    def total(self, a: Value) -> Value:
        shape = a.shape
        return self._push(np.array([[a.data.sum()]]), (a,),
                          lambda g: (np.full(shape, g[0, 0]),), op="total")

    def column_norms(self, a: Value) -> Value:
        """Euclidean norm of each column, as a ``(1, cols)`` row.

        The derivative of a zero-norm column is taken as 0.
        """
        X = a.data
        norms = np.sqrt(np.sum(X * X, axis=0, keepdims=True))
        safe = np.where(norms > 0, norms, 1.0)

        def vjp(g):
            return (np.where(norms > 0, g / safe, 0.0) * X,)

        return self._push(norms, (a,), vjp, op="column_norms")

    # -- reverse pass ------------------------------------------------------

    def _check_root(self, root: Value) -> None:
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.shape != (1, 1):
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")

    def backward(self, root: Value) -> dict[int, np.ndarray]:
        """Gradient of ``root`` with respect to every node that requires one.

        Nodes that do not influence ``root`` map to zeros. Constants are
        absent from the result.
        """
        self._check_root(root)
        nodes = self._nodes
        grads: list[np.ndarray | None] = [None] * len(nodes)
        grads[root.id] = np.ones((1, 1))
        for nid in range(root.id, -1, -1):
            g = grads[nid]
            node = nodes[nid]
            if g is None or node.is_leaf or not node.requires_grad:
                continue
            for pid, contrib in zip(node.parents, node.vjp(g)):
                if not nodes[pid].requires_grad:
                    continue
                if grads[pid] is None:
                    grads[pid] = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    grads[pid] = grads[pid] + contrib
        out = {}
        for nid, node in enumerate(nodes):
            if node.requires_grad:
                g = grads[nid]
                out[nid] = g if g is not None else np.zeros(self._values[nid].shape)
        return out

    def gradient_of_input(self, root: Value, inputs: Sequence[Value]) -> list[np.ndarray]:
        """``d root / d x`` for each leaf ``x`` in ``inputs``."""
        for x in inputs:
            if x.tape is not self or not self._nodes[x.id].is_leaf:
                raise ContractError(f"{x!r} is not a leaf of this tape")
            if not self._nodes[x.id].requires_grad:
                raise ContractError(f"{x!r} is a constant")
        grads = self.backward(root)
        return [grads[x.id] for x in inputs]
