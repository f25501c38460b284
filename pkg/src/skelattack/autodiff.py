"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
replays the graph in reverse topological order and accumulates adjoints.
Only the operations needed by the sequence regressors and the attack
losses are implemented.  There is no general broadcasting; the single
exception is adding a row vector to a matrix, which linear layers use
for their bias term.

Graph construction and backward are single-threaded per graph instance.
Distinct graphs share no mutable state and may live on distinct threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(shapes)
        pretty = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes ({pretty})")


class Tensor:
    """Node of the computation graph: a float64 array plus its adjoint."""

    __slots__ = ("value", "grad", "requires_grad", "op", "_children", "_backward_fn")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 children: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._children = children
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

    # Arithmetic sugar; scalars multiply, tensors combine elementwise.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scalar_multiply(self, float(other))

    def __rmul__(self, other):
        return scalar_multiply(self, float(other))

    def __neg__(self) -> "Tensor":
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _result(value: np.ndarray, op: str, children: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result; the backward closure is kept only on live paths."""
    out = Tensor(value, op=op)
    if any(c.requires_grad for c in children):
        out.requires_grad = True
        out._children = children
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# operations


def add(a: Tensor, b: Tensor) -> Tensor:
    va, vb = a.value, b.value
    if va.shape == vb.shape:
        row_bias = False
    elif va.ndim == 2 and vb.ndim == 1 and va.shape[1] == vb.shape[0]:
        row_bias = True
    else:
        raise ShapeError("add", va.shape, vb.shape)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0) if row_bias else g)

    return _result(va + vb, "add", (a, b), backward_fn)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    va, vb = a.value, b.value
    if va.shape == vb.shape:
        row_bias = False
    elif va.ndim == 2 and vb.ndim == 1 and va.shape[1] == vb.shape[0]:
        row_bias = True
    else:
        raise ShapeError("subtract", va.shape, vb.shape)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-(g.sum(axis=0) if row_bias else g))

    return _result(va - vb, "subtract", (a, b), backward_fn)


def scalar_multiply(a: Tensor, scalar: float) -> Tensor:
    s = float(scalar)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _result(a.value * s, "scalar_multiply", (a,), backward_fn)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    va, vb = a.value, b.value
    if va.shape != vb.shape:
        raise ShapeError("multiply", va.shape, vb.shape)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * vb)
        if b.requires_grad:
            b.accumulate(g * va)

    return _result(va * vb, "multiply", (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeError("matmul", va.shape, vb.shape)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g @ vb.T)
        if b.requires_grad:
            b.accumulate(va.T @ g)

    # einsum keeps each output row a fixed-order reduction, so row t is
    # bitwise independent of how many rows follow it (BLAS kernels are not).
    return _result(np.einsum("ij,jk->ik", va, vb), "matmul", (a, b), backward_fn)


def relu(a: Tensor) -> Tensor:
    va = a.value

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * (va > 0.0))

    return _result(np.maximum(va, 0.0), "relu", (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - out * out))

    return _result(out, "tanh", (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.value))

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * out * (1.0 - out))

    return _result(out, "sigmoid", (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    va = a.value

    # np.sign(0) == 0, so the subgradient at the kink is 0.
    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(g * np.sign(va))

    return _result(np.abs(va), "absolute", (a,), backward_fn)


def sum_reduce(a: Tensor) -> Tensor:
    def backward_fn(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.value, float(g)))

    return _result(np.sum(a.value), "sum_reduce", (a,), backward_fn)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    va = a.value
    if va.ndim == 0:
        raise ShapeError("l2_norm", va.shape)
    norms = np.sqrt(np.sum(va * va, axis=axis))

    def backward_fn(g):
        if a.requires_grad:
            safe = np.where(norms == 0.0, 1.0, norms)
            scale = np.expand_dims(g / safe, axis=axis)
            a.accumulate(scale * va)

    return _result(norms, "l2_norm", (a,), backward_fn)


def concat_time(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_time")
    trailing = parts[0].value.shape[1:]
    for p in parts:
        if p.value.ndim == 0 or p.value.shape[1:] != trailing:
            raise ShapeError("concat_time", *(q.value.shape for q in parts))
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[lo:hi])

    return _result(np.concatenate([p.value for p in parts], axis=0),
                   "concat_time", parts, backward_fn)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    va = a.value
    if axis not in (0, 1) or axis >= va.ndim:
        raise ShapeError("slice", va.shape)
    extent = va.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ValueError(f"slice: range [{start}, {stop}) invalid for extent {extent}")
    view = va[start:stop] if axis == 0 else va[:, start:stop]

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(va)
            if axis == 0:
                full[start:stop] = g
            else:
                full[:, start:stop] = g
            a.accumulate(full)

    return _result(view.copy(), "slice", (a,), backward_fn)


def causal_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated 1-D convolution over the time axis.

    x is (T, C_in) and w is (K, C_in, C_out).  The input is left-padded
    with (K-1)*dilation zero frames, so output frame t depends only on
    input frames <= t and the sequence length is preserved.
    """
    vx, vw = x.value, w.value
    if vx.ndim != 2 or vw.ndim != 3 or vx.shape[1] != vw.shape[1]:
        raise ShapeError("causal_conv1d", vx.shape, vw.shape)
    if dilation < 1:
        raise ValueError(f"causal_conv1d: dilation must be >= 1, got {dilation}")
    frames, _ = vx.shape
    width = vw.shape[0]
    pad = (width - 1) * dilation
    padded = np.concatenate([np.zeros((pad, vx.shape[1])), vx], axis=0)
    out = np.zeros((frames, vw.shape[2]))
    for k in range(width):
        # einsum for the same per-row bitwise stability as matmul
        out += np.einsum("ij,jk->ik", padded[k * dilation:k * dilation + frames], vw[k])

    def backward_fn(g):
        if w.requires_grad:
            gw = np.empty_like(vw)
            for k in range(width):
                gw[k] = padded[k * dilation:k * dilation + frames].T @ g
            w.accumulate(gw)
        if x.requires_grad:
            gp = np.zeros_like(padded)
            for k in range(width):
                gp[k * dilation:k * dilation + frames] += g @ vw[k].T
            x.accumulate(gp[pad:])

    return _result(out, "causal_conv1d", (x, w), backward_fn)


# ---------------------------------------------------------------------------
# generic dispatch, used by gradient-check harnesses that sweep all op kinds

OP_BUILDERS: dict[str, Callable[[list[Tensor], dict], Tensor]] = {
    "add": lambda ins, at: add(ins[0], ins[1]),
    "subtract": lambda ins, at: subtract(ins[0], ins[1]),
    "scalar_multiply": lambda ins, at: scalar_multiply(ins[0], at["scalar"]),
    "multiply": lambda ins, at: multiply(ins[0], ins[1]),
    "matmul": lambda ins, at: matmul(ins[0], ins[1]),
    "concat_time": lambda ins, at: concat_time(ins),
    "slice": lambda ins, at: slice_axis(ins[0], at["start"], at["stop"], at.get("axis", 0)),
    "relu": lambda ins, at: relu(ins[0]),
    "tanh": lambda ins, at: tanh(ins[0]),
    "sigmoid": lambda ins, at: sigmoid(ins[0]),
    "causal_conv1d": lambda ins, at: causal_conv1d(ins[0], ins[1], at.get("dilation", 1)),
    "sum_reduce": lambda ins, at: sum_reduce(ins[0]),
    "l2_norm": lambda ins, at: l2_norm(ins[0], at.get("axis", -1)),
    "absolute": lambda ins, at: absolute(ins[0]),
}


def forward_op(kind: str, inputs: Iterable[Tensor], attrs: dict | None = None) -> Tensor:
    """Build the node for `kind`; raises on unknown kinds or bad shapes."""
    try:
        builder = OP_BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind: {kind!r}") from None
    return builder(list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over the live (requires_grad) part of the graph.

    Iterative so deep recurrent graphs do not hit the recursion limit;
    child tuples are ordered at construction, so the order is reproducible.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if child.requires_grad and id(child) not in seen:
                stack.append((child, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate adjoints of `root` w.r.t. every differentiable node.

    Returns a map from differentiable leaf tensors to their gradients.
    Adjoints add onto existing ones; call zero_grad first to re-run a
    backward pass from scratch.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = _topo_order(root)
    root.accumulate(np.ones_like(root.value))
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node.grad is None:
            continue
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
        elif node.requires_grad and not node._children:
            leaf_grads[node] = node.grad
    return leaf_grads


def zero_grad(root: Tensor) -> None:
    """Reset adjoints on the live graph below (and including) `root`."""
    for node in _topo_order(root):
        node.grad = None
