"""Minimal reverse-mode automatic differentiation over dense float64 matrices.

Define-by-run engine: every operation immediately computes its value and
records a node in an acyclic graph; ``backward`` replays the graph in
reverse topological order and returns a gradient map.  Everything is a
2-D float64 numpy array (row-major), scalars are 1x1 matrices.  All
operations are pure and deterministic given their inputs, so repeated
runs with identical inputs are bit-identical.

Concurrency: a single graph must not be traversed by two threads at
once; distinct graphs are independent.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

__all__ = [
    "ShapeError",
    "Node",
    "as_matrix",
    "constant",
    "parameter",
    "affine",
    "elu",
    "concat_cols",
    "square",
    "softplus",
    "sum_all",
    "add",
    "mul",
    "scale",
    "mse_loss",
    "bce_loss",
    "embed_rows",
    "spectral_estimate",
    "backward",
    "spectral_norm",
    "power_iterate",
    "numeric_gradient",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate ``data`` as a finite 2-D float64 row-major matrix.

    Optional ``rows``/``cols`` pin the expected shape.
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite entries")
    return arr


class Node:
    """One vertex of the computation graph: a value plus backward recipe.

    ``op`` tags the producing operation; leaves use "leaf".  ``parents``
    are the operand nodes and ``_backward(out_grad, grads)`` accumulates
    the operand gradients into the ``grads`` map.
    """

    __slots__ = ("value", "op", "parents", "_backward", "name")

    def __init__(
        self,
        value: np.ndarray,
        op: str = "leaf",
        parents: Tuple["Node", ...] = (),
        backward: Callable[[np.ndarray, Dict["Node", np.ndarray]], None] | None = None,
        name: str = "",
    ):
        self.value = value
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


def constant(data, name: str = "") -> Node:
    """Leaf node holding a non-trainable constant."""
    return Node(as_matrix(data), op="leaf", name=name)


def parameter(data, name: str = "") -> Node:
    """Leaf node intended as a trainable parameter (same mechanics as a constant)."""
    return Node(as_matrix(data), op="leaf", name=name)


def _accumulate(grads: Dict[Node, np.ndarray], node: Node, grad: np.ndarray) -> None:
    cur = grads.get(node)
    if cur is None:
        grads[node] = grad.copy()
    else:
        cur += grad


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b with b a 1 x out row vector broadcast over rows."""
    if x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(
            f"affine: input shape {x.value.shape} incompatible with weight shape {w.value.shape}"
        )
    if b.value.shape != (1, w.value.shape[1]):
        raise ShapeError(
            f"affine: bias shape {b.value.shape} must be (1, {w.value.shape[1]})"
        )
    out = x.value @ w.value + b.value

    def back(g, grads):
        _accumulate(grads, x, g @ w.value.T)
        _accumulate(grads, w, x.value.T @ g)
        _accumulate(grads, b, g.sum(axis=0, keepdims=True))

    return Node(out, op="affine", parents=(x, w, b), backward=back)


def elu(x: Node) -> Node:
    """Exponential linear unit, elementwise."""
    v = x.value
    out = np.where(v > 0.0, v, np.expm1(v))

    def back(g, grads):
        _accumulate(grads, x, g * np.where(v > 0.0, 1.0, out + 1.0))

    return Node(out, op="elu", parents=(x,), backward=back)


def concat_cols(a: Node, b: Node) -> Node:
    """Column-wise concatenation of two matrices with equal row counts."""
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(
            f"concat: row counts differ, {a.value.shape} vs {b.value.shape}"
        )
    out = np.concatenate([a.value, b.value], axis=1)
    na = a.value.shape[1]

    def back(g, grads):
        _accumulate(grads, a, g[:, :na])
        _accumulate(grads, b, g[:, na:])

    return Node(out, op="concat", parents=(a, b), backward=back)


def square(x: Node) -> Node:
    out = x.value * x.value

    def back(g, grads):
        _accumulate(grads, x, g * (2.0 * x.value))

    return Node(out, op="square", parents=(x,), backward=back)


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x: Node) -> Node:
    out = _softplus(x.value)

    def back(g, grads):
        _accumulate(grads, x, g * _sigmoid(x.value))

    return Node(out, op="softplus", parents=(x,), backward=back)


def sum_all(x: Node) -> Node:
    """Sum of all entries, as a 1x1 node."""
    out = np.array([[x.value.sum()]])

    def back(g, grads):
        _accumulate(grads, x, np.full_like(x.value, g[0, 0]))

    return Node(out, op="sum", parents=(x,), backward=back)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes differ, {a.value.shape} vs {b.value.shape}")

    def back(g, grads):
        _accumulate(grads, a, g)
        _accumulate(grads, b, g)

    return Node(a.value + b.value, op="add", parents=(a, b), backward=back)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of two nodes with identical shapes."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes differ, {a.value.shape} vs {b.value.shape}")

    def back(g, grads):
        _accumulate(grads, a, g * b.value)
        _accumulate(grads, b, g * a.value)

    return Node(a.value * b.value, op="mul", parents=(a, b), backward=back)


def scale(x: Node, c) -> Node:
    """Elementwise product with a constant scalar or array (no gradient for c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 2 and c.shape != x.value.shape:
        raise ShapeError(f"scale: factor shape {c.shape} vs value shape {x.value.shape}")

    def back(g, grads):
        _accumulate(grads, x, g * c)

    return Node(x.value * c, op="scale", parents=(x,), backward=back)


def mse_loss(pred: Node, target) -> Node:
    """Mean squared error against a constant target, as a 1x1 node."""
    t = as_matrix(target, *pred.value.shape)
    diff = pred.value - t
    out = np.array([[np.mean(diff * diff)]])
    inv = 2.0 / diff.size

    def back(g, grads):
        _accumulate(grads, pred, g[0, 0] * inv * diff)

    return Node(out, op="mse", parents=(pred,), backward=back)


def bce_loss(logits: Node, target) -> Node:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = as_matrix(target, *logits.value.shape)
    z = logits.value
    out = np.array([[np.mean(np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z))))]])
    inv = 1.0 / z.size

    def back(g, grads):
        _accumulate(grads, logits, g[0, 0] * inv * (_sigmoid(z) - t))

    return Node(out, op="bce", parents=(logits,), backward=back)


def embed_rows(table: Node, indices) -> Node:
    """Gather rows of ``table`` by integer index; gradient scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embed: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise IndexError(
            f"embed: index out of range for table with {table.value.shape[0]} rows"
        )
    out = table.value[idx]

    def back(g, grads):
        acc = grads.get(table)
        if acc is None:
            acc = np.zeros_like(table.value)
            grads[table] = acc
        np.add.at(acc, idx, g)

    return Node(out, op="embed-lookup", parents=(table,), backward=back)


def spectral_estimate(w: Node, u: np.ndarray) -> Node:
    """Largest-singular-value estimate ||W u|| with the unit iterate u frozen.

    With u held constant the map W -> ||W u|| is smooth away from zero and
    its exact gradient is outer(W u / ||W u||, u); at ||W u|| = 0 the
    subgradient 0 is used.
    """
    if u.shape != (w.value.shape[1],):
        raise ShapeError(
            f"spectral: iterate shape {u.shape} vs weight shape {w.value.shape}"
        )
    wu = w.value @ u
    sigma = float(np.linalg.norm(wu))
    out = np.array([[sigma]])

    def back(g, grads):
        if sigma > 1e-300:
            _accumulate(grads, w, g[0, 0] * np.outer(wu / sigma, u))

    return Node(out, op="spectral-est", parents=(w,), backward=back)


def _topological_order(seeds: Iterable[Node]) -> List[Node]:
    order: List[Node] = []
    state: Dict[int, int] = {}  # id -> 0 visiting, 1 done
    stack: List[Tuple[Node, int]] = [(n, 0) for n in seeds]
    while stack:
        node, pidx = stack.pop()
        if pidx == 0:
            st = state.get(id(node))
            if st is not None:
                continue
            state[id(node)] = 0
        if pidx < len(node.parents):
            stack.append((node, pidx + 1))
            child = node.parents[pidx]
            if id(child) not in state:
                stack.append((child, 0))
        else:
            state[id(node)] = 1
            order.append(node)
    return order


def backward(seeds: Node | Mapping[Node, np.ndarray]) -> Dict[Node, np.ndarray]:
    """Reverse sweep from one or many seeded output nodes.

    A bare node is seeded with ones (the usual scalar-loss case).  Returns
    a map from every reached node to d(seeded outputs)/d(node); leaves not
    on any path from a seed are absent.
    """
    if isinstance(seeds, Node):
        seeds = {seeds: np.ones_like(seeds.value)}
    grads: Dict[Node, np.ndarray] = {}
    for node, g in seeds.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != node.value.shape:
            raise ShapeError(
                f"backward: seed shape {g.shape} vs node shape {node.value.shape}"
            )
        _accumulate(grads, node, g)
    order = _topological_order(seeds.keys())
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        node._backward(g, grads)
    return grads


def power_iterate(w: np.ndarray, u: np.ndarray, iterations: int) -> np.ndarray:
    """Run power iteration on W^T W, returning the updated unit iterate."""
    for _ in range(iterations):
        nxt = w.T @ (w @ u)
        norm = np.linalg.norm(nxt)
        if norm <= 1e-300:
            return u
        u = nxt / norm
    return u


def spectral_norm(w, iterations: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of the largest singular value of ``w``.

    The estimate ||W u_t|| is nondecreasing in the iteration count and
    never exceeds the true spectral norm.  A zero matrix yields 0.
    """
    w = as_matrix(w)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(w.shape[1])
    norm = np.linalg.norm(u)
    if norm == 0.0:  # pragma: no cover - measure zero
        u = np.ones(w.shape[1])
        norm = np.linalg.norm(u)
    u = u / norm
    u = power_iterate(w, u, iterations)
    return float(np.linalg.norm(w @ u))


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f()`` with respect to ``arr`` in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        hi = f()
        arr[idx] = orig - h
        lo = f()
        arr[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * h)
        it.iternext()
    return grad
