"""Dense float64 tensors with reverse-mode automatic differentiation.

Forward math is plain numpy on 64-bit floats. While a :class:`Tape` is
active (``with Tape() as tape: ...``), each operation appends a node
recording its inputs and a closure that maps the output gradient to input
gradients. ``Tape.backward`` sweeps the nodes in reverse creation order,
which is a valid topological order because operands always exist before
their results. Without an active tape the same functions run forward-only,
which is what evaluation uses.

Binary elementwise ops accept numpy-style broadcasting; the backward pass
sums gradients over broadcast axes so parameter gradients always match the
parameter's own shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    EmptySelectionError,
    ShapeError,
)

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "log",
    "clip",
    "concat",
    "softmax",
    "embedding_lookup",
    "dropout",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "slice_axis",
    "stack_rows",
]


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("op", "inputs", "grad_fn", "tensor")

    def __init__(self, op: str, inputs: tuple, grad_fn, tensor: Tensor):
        self.op = op
        self.inputs = inputs      # node ids of inputs, None for untracked constants
        self.grad_fn = grad_fn    # grad_out -> tuple of input grads, None for leaves
        self.tensor = tensor      # keeps the output alive for the tape's lifetime


_active_tape: "Tape | None" = None


class Tape:
    """Recorder for one forward pass. Single writer, not reentrant."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._node_of: dict[int, int] = {}  # id(tensor) -> node index

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def _leaf(self, t: Tensor) -> int:
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t))
        self._node_of[id(t)] = nid
        return nid

    def _record(self, op: str, out: Tensor, input_ids: tuple, grad_fn) -> None:
        nid = len(self.nodes)
        self.nodes.append(_Node(op, input_ids, grad_fn, out))
        self._node_of[id(out)] = nid

    def node_id(self, t: Tensor) -> int | None:
        return self._node_of.get(id(t))

    def grad(self, t: Tensor) -> np.ndarray | None:
        nid = self._node_of.get(id(t))
        return None if nid is None else self.gradients.get(nid)

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss.

        Fills ``self.gradients`` for every node reachable from the loss and
        accumulates into ``Tensor.grad`` for leaf tensors.
        """
        if not self.nodes:
            raise ContractError("backward on an empty tape")
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        start = self._node_of.get(id(loss))
        if start is None:
            raise ContractError("loss tensor was not recorded on this tape")
        grads: dict[int, np.ndarray] = {start: np.ones_like(loss.data)}
        self.gradients = grads
        for nid in range(start, -1, -1):
            gout = grads.get(nid)
            if gout is None:
                continue
            node = self.nodes[nid]
            if node.grad_fn is None:
                continue
            for input_id, gin in zip(node.inputs, node.grad_fn(gout)):
                if input_id is None or gin is None:
                    continue
                acc = grads.get(input_id)
                grads[input_id] = gin if acc is None else acc + gin
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf" and nid in grads:
                t = node.tensor
                t.grad = grads[nid].copy() if t.grad is None else t.grad + grads[nid]


def _track(op: str, out: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = _active_tape
    if tape is None:
        return out
    ids = []
    tracked = False
    for t in inputs:
        nid = tape._node_of.get(id(t))
        if nid is None and t.requires_grad:
            nid = tape._leaf(t)
        ids.append(nid)
        if nid is not None:
            tracked = True
    if tracked:
        tape._record(op, out, tuple(ids), grad_fn)
        out.requires_grad = True
    return out


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_forward(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_binary_forward("add", a, b, np.add))
    a_shape, b_shape = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _track("add", out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_binary_forward("sub", a, b, np.subtract))
    a_shape, b_shape = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return _track("sub", out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_binary_forward("mul", a, b, np.multiply))
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _track("mul", out, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix or matrix-vector product; 1-D x 1-D degenerates to a dot scalar."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D and 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        return g * bd, g * ad

    return _track("matmul", out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    positive = x.data > 0

    def grad_fn(g):
        return (g * positive,)

    return _track("relu", out, (x,), grad_fn)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_values(x.data)
    out = Tensor(s)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _track("sigmoid", out, (x,), grad_fn)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def grad_fn(g):
        return (g * (1.0 - t * t),)

    return _track("tanh", out, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    xd = x.data

    def grad_fn(g):
        return (g / xd,)

    return _track("log", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# structure ops
# ---------------------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; backward splits the gradient at the seams."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _track("concat", out, tuple(parts), grad_fn)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Probability vector over a 1-D tensor, stabilized by max subtraction.

    ``mask`` marks valid entries; masked entries come out exactly 0 and at
    least one entry must stay unmasked.
    """
    if x.ndim != 1 or x.size < 1:
        raise ShapeError(f"softmax expects a nonempty 1-D tensor, got shape {x.shape}")
    xd = x.data
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != xd.shape:
            raise ShapeError(f"softmax mask shape {valid.shape} does not match {xd.shape}")
        if not valid.any():
            raise EmptySelectionError("softmax: every entry is masked")
        e = np.zeros_like(xd)
        e[valid] = np.exp(xd[valid] - xd[valid].max())
    else:
        e = np.exp(xd - xd.max())
    s = e / e.sum()
    out = Tensor(s)

    def grad_fn(g):
        dot = float((g * s).sum())
        return (s * (g - dot),)

    return _track("softmax", out, (x,), grad_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds (repeats accumulate)."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup needs a 2-D table, got shape {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        idx = idx.reshape(-1)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = idx[(idx < 0) | (idx >= rows)][0]
        raise IndexError(f"embedding id {bad} out of range for table with {rows} rows")
    out = Tensor(table.data[idx])
    table_shape = table.shape

    def grad_fn(g):
        gt = np.zeros(table_shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _track("embedding_lookup", out, (table,), grad_fn)


def dropout(x: Tensor, keep_prob: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with prob 1-keep_prob and rescale survivors.

    Evaluation mode (or keep_prob == 1) is an exact identity.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    scale = (rng.random(x.shape) < keep_prob) / keep_prob
    out = Tensor(x.data * scale)

    def grad_fn(g):
        return (g * scale,)

    return _track("dropout", out, (x,), grad_fn)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values into [low, high]; gradient passes through the interior only."""
    out = Tensor(np.clip(x.data, low, high))
    interior = (x.data > low) & (x.data < high)

    def grad_fn(g):
        return (g * interior,)

    return _track("clip", out, (x,), grad_fn)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _track("sum", out, (x,), grad_fn)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _track("mean", out, (x,), grad_fn)


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    new_shape = tuple(shape)
    out = Tensor(x.data.reshape(new_shape))
    old_shape = x.shape

    def grad_fn(g):
        return (g.reshape(old_shape),)

    return _track("reshape", out, (x,), grad_fn)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.shape}")
    out = Tensor(x.data.T)

    def grad_fn(g):
        return (g.T,)

    return _track("transpose", out, (x,), grad_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward pads with zeros."""
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis {axis} of shape {x.shape}")
    window = [slice(None)] * x.ndim
    window[axis] = slice(start, stop)
    window = tuple(window)
    out = Tensor(x.data[window])
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        gx[window] = g
        return (gx,)

    return _track("slice", out, (x,), grad_fn)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a matrix, one per row."""
    return concat([reshape(p, (1, p.size)) for p in parts], axis=0)


_ElementwiseFn = Callable[[Tensor], Tensor]

ELEMENTWISE_UNARY: dict[str, _ElementwiseFn] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}

ELEMENTWISE_BINARY = {
    "add": add,
    "sub": sub,
    "mul": mul,
}
