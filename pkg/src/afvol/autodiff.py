"""Dense float64 tensors on a reverse-mode differentiation tape.

The tape is define-by-run: every operation appends a node holding the ids of
its inputs and one vector-Jacobian-product closure per input.  Calling
``backward`` on a scalar tensor sweeps the tape in reverse creation order
(which is a topological order, since inputs always precede their consumers)
and accumulates gradients from every consumer.

Binary operations require identical shapes; the only broadcasting allowed is
an explicit scalar (size-1) operand.  ``exp`` can overflow to inf for inputs
above ~709 -- the softmax helpers subtract the per-column max so that this
cannot happen on their path.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Tape contract violation (cross-tape mixing, non-scalar backward root)."""


class _Node:
    __slots__ = ("inputs", "vjps", "shape")

    def __init__(self, inputs: tuple[int, ...], vjps: tuple[Callable, ...], shape: tuple[int, ...]):
        self.inputs = inputs
        self.vjps = vjps
        self.shape = shape


class Tensor:
    """View onto a float64 ndarray plus a handle into the recording tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    # Arithmetic sugar; python scalars are treated as constants (no gradient).
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def tensor(self, data) -> Tensor:
        """Register a leaf (parameter or constant). Does not copy float64 input."""
        arr = np.asarray(data, dtype=np.float64)
        return self._record(arr, (), ())

    def _record(self, data: np.ndarray, inputs: tuple[int, ...], vjps: tuple[Callable, ...]) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(_Node(inputs, vjps, data.shape))
        return Tensor(data, self, node_id)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar root w.r.t. every tape node it depends on.

        Returns a table keyed by node_id.  Leaves that do not feed the root
        are present with zero gradients, so every leaf is always covered.
        """
        if root.tape is not self:
            raise TapeError("backward root does not belong to this tape")
        if root.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
        for nid in range(root.node_id, -1, -1):
            if nid not in grads:
                continue
            node = self.nodes[nid]
            g = grads[nid]
            for iid, vjp in zip(node.inputs, node.vjps):
                contrib = vjp(g)
                if iid in grads:
                    grads[iid] = grads[iid] + contrib
                else:
                    grads[iid] = contrib
        for nid, node in enumerate(self.nodes):
            if not node.inputs and nid not in grads:
                grads[nid] = np.zeros(node.shape)
        return grads


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise TapeError("operands were recorded on different tapes")
    return tape


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    # Undo scalar broadcast: a size-1 operand collects the sum of the grads.
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    return tape._record(
        out,
        (a.node_id, b.node_id),
        (lambda g, s=a.shape: _reduce_to(s, g), lambda g, s=b.shape: _reduce_to(s, g)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    return tape._record(
        out,
        (a.node_id, b.node_id),
        (lambda g, s=a.shape: _reduce_to(s, g), lambda g, s=b.shape: _reduce_to(s, -g)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data
    return tape._record(
        out,
        (a.node_id, b.node_id),
        (lambda g, s=a.shape: _reduce_to(s, g * bd), lambda g, s=b.shape: _reduce_to(s, g * ad)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    ad, bd = a.data, b.data
    return tape._record(
        out,
        (a.node_id, b.node_id),
        (
            lambda g, s=a.shape: _reduce_to(s, g / bd),
            lambda g, s=b.shape: _reduce_to(s, -g * ad / (bd * bd)),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record(a.data * c, (a.node_id,), (lambda g: g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return a.tape._record(a.data + float(c), (a.node_id,), (lambda g: g,))


# ---------------------------------------------------------------------------
# elementwise unary ops


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.tape._record(out, (a.node_id,), (lambda g, s=out: g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return a.tape._record(out, (a.node_id,), (lambda g, t=out: g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is defined as 0.
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)
    return a.tape._record(out, (a.node_id,), (lambda g, m=mask: g * m,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape._record(out, (a.node_id,), (lambda g, e=out: g * e,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    return tape._record(
        out,
        (a.node_id, b.node_id),
        (lambda g: g @ bd.T, lambda g: ad.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return a.tape._record(np.ascontiguousarray(a.data.T), (a.node_id,), (lambda g: g.T,))


# ---------------------------------------------------------------------------
# reductions, broadcasts and views


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[a.data.sum()]])
    return a.tape._record(out, (a.node_id,), (lambda g, s=a.shape: np.full(s, g.reshape(())),))


def sum_rows(a: Tensor) -> Tensor:
    """Column sums of a matrix, kept as a [1 x d] row."""
    if a.ndim != 2:
        raise ShapeError(f"sum_rows expects a matrix, got shape {a.shape}")
    out = a.data.sum(axis=0, keepdims=True)
    n = a.shape[0]
    return a.tape._record(out, (a.node_id,), (lambda g: np.repeat(g, n, axis=0),))


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a [1 x d] row n times; the adjoint sums over rows."""
    if a.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"tile_rows expects a [1 x d] row, got shape {a.shape}")
    out = np.repeat(a.data, n, axis=0)
    return a.tape._record(out, (a.node_id,), (lambda g: g.sum(axis=0, keepdims=True),))


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    tape = _same_tape(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"concat expects matrices, got shapes {a.shape} and {b.shape}")
    other = 1 - axis
    if a.shape[other] != b.shape[other]:
        raise ShapeError(f"concat axis={axis}: shapes {a.shape} and {b.shape} do not align")
    out = np.concatenate([a.data, b.data], axis=axis)
    k = a.shape[axis]
    if axis == 0:
        vjps = (lambda g: g[:k, :], lambda g: g[k:, :])
    else:
        vjps = (lambda g: g[:, :k], lambda g: g[:, k:])
    return tape._record(out, (a.node_id, b.node_id), vjps)


def slice_block(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_block expects a matrix, got shape {a.shape}")
    out = a.data[r0:r1, c0:c1].copy()

    def vjp(g, shape=a.shape):
        full = np.zeros(shape)
        full[r0:r1, c0:c1] = g
        return full

    return a.tape._record(out, (a.node_id,), (vjp,))


def take_row(a: Tensor, i: int) -> Tensor:
    return slice_block(a, i, i + 1, 0, a.shape[1])


# ---------------------------------------------------------------------------
# fused network ops


def softmax_over_time(k: Tensor) -> Tensor:
    """Column-wise softmax of a [T x d] matrix (normalizes over the time axis)."""
    if k.ndim != 2:
        raise ShapeError(f"softmax_over_time expects a [T x d] matrix, got shape {k.shape}")
    shifted = k.data - k.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)

    def vjp(g, s=s):
        return s * (g - (s * g).sum(axis=0, keepdims=True))

    return k.tape._record(s, (k.node_id,), (vjp,))


def layer_norm(x: Tensor, psi: Tensor, phi: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance) then apply psi, phi."""
    tape = _same_tape(x, psi, phi)
    d = x.shape[-1]
    if psi.shape != (d,) or phi.shape != (d,):
        raise ShapeError(f"layer_norm: psi/phi must have shape ({d},), got {psi.shape} and {phi.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * psi.data + phi.data
    lead = tuple(range(x.ndim - 1))
    psid = psi.data

    def vjp_x(g):
        gh = g * psid
        return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def vjp_psi(g):
        return (g * xhat).sum(axis=lead) if lead else g * xhat

    def vjp_phi(g):
        return g.sum(axis=lead) if lead else g.copy()

    return tape._record(out, (x.node_id, psi.node_id, phi.node_id), (vjp_x, vjp_psi, vjp_phi))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)
