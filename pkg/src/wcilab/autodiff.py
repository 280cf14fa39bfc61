"""Reverse-mode differentiation over a dynamic tape, with double backward.

A :class:`Tape` records primitive operations as they execute. Calling
:func:`gradient` runs one backward sweep; :func:`hvp` differentiates the
recorded gradient graph a second time to obtain Hessian-vector products.

Every backward rule is written in terms of tensor operations, so running the
first backward sweep while recording (``create_graph=True``) leaves a graph of
the gradient on the tape that can itself be differentiated.

Tensors carry a ``lead`` count of leading "probe" axes. Forward values always
have ``lead == 0``; the second backward sweep of :func:`hvp` may seed adjoints
with one leading axis so that a whole block of directions is pushed through
the tape in one vectorised sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import LayoutError, NumericError, StateError

__all__ = [
    "Batch",
    "Block",
    "ParamVector",
    "Tape",
    "Tensor",
    "add",
    "mul",
    "matmul",
    "relu",
    "logistic",
    "square",
    "reduce_mean",
    "reduce_sum",
    "softmax_cross_entropy",
    "evaluate",
    "gradient",
    "input_gradient",
    "hvp",
    "loss_value",
]

PRIMITIVES = (
    "add",
    "mul",
    "matmul",
    "relu",
    "logistic",
    "softmax_cross_entropy",
    "reduce_mean",
    "square",
)


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


# ---------------------------------------------------------------------------
# Parameter vectors


@dataclass(frozen=True)
class Block:
    layer: int
    kind: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def key(self) -> tuple[int, str]:
        return (self.layer, self.kind)

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


class ParamVector:
    """Flat float64 parameter array plus a block layout.

    Blocks are contiguous, non-overlapping and cover the whole array.
    """

    __slots__ = ("flat", "layout", "_index")

    def __init__(self, flat, layout: Sequence[Block]):
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.ndim != 1:
            raise LayoutError("flat parameter array must be one-dimensional")
        layout = tuple(layout)
        offset = 0
        for block in layout:
            if block.kind not in ("weight", "bias"):
                raise LayoutError(f"unknown block kind {block.kind!r}")
            if block.offset != offset:
                raise LayoutError(f"block {block.key} starts at {block.offset}, expected {offset}")
            offset += block.size
        if offset != flat.size:
            raise LayoutError(f"layout covers {offset} entries but array has {flat.size}")
        self.flat = flat
        self.layout = layout
        self._index = {b.key: b for b in layout}
        if len(self._index) != len(layout):
            raise LayoutError("duplicate (layer, kind) blocks in layout")

    @classmethod
    def from_blocks(cls, blocks: Iterable[tuple[int, str, np.ndarray]]) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for layer, kind, arr in blocks:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(Block(int(layer), kind, tuple(arr.shape), offset))
            offset += arr.size
            chunks.append(arr.ravel())
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(flat, layout)

    def block(self, layer: int, kind: str = "weight") -> np.ndarray:
        """Read-only view of one block, reshaped."""
        try:
            b = self._index[(layer, kind)]
        except KeyError:
            raise LayoutError(f"no {kind} block for layer {layer}") from None
        view = self.flat[b.slice].reshape(b.shape)
        view.flags.writeable = False
        return view

    def block_info(self, layer: int, kind: str = "weight") -> Block:
        try:
            return self._index[(layer, kind)]
        except KeyError:
            raise LayoutError(f"no {kind} block for layer {layer}") from None

    def has_block(self, layer: int, kind: str) -> bool:
        return (layer, kind) in self._index

    def unflatten(self) -> dict[tuple[int, str], np.ndarray]:
        return {b.key: self.flat[b.slice].reshape(b.shape).copy() for b in self.layout}

    @classmethod
    def flatten(cls, blocks: Mapping[tuple[int, str], np.ndarray], layout: Sequence[Block]) -> "ParamVector":
        flat = np.empty(sum(b.size for b in layout))
        for b in layout:
            arr = np.asarray(blocks[b.key], dtype=np.float64)
            if arr.shape != b.shape:
                raise LayoutError(f"block {b.key} has shape {arr.shape}, expected {b.shape}")
            flat[b.slice] = arr.ravel()
        return cls(flat, layout)

    def with_flat(self, flat) -> "ParamVector":
        return ParamVector(flat, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.flat), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def check_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise LayoutError("parameter layouts differ")

    @property
    def size(self) -> int:
        return self.flat.size

    def layers(self) -> list[int]:
        return sorted({b.layer for b in self.layout})

    def dot(self, other: "ParamVector") -> float:
        self.check_layout(other)
        return float(self.flat @ other.flat)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other)
        return self.with_flat(self.flat + other.flat)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other)
        return self.with_flat(self.flat - other.flat)

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.with_flat(self.flat * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)

    def __hash__(self):
        return hash((self.layout, self.flat.tobytes()))

    def __repr__(self) -> str:
        blocks = ", ".join(f"{b.layer}{b.kind[0]}{b.shape}" for b in self.layout)
        return f"ParamVector(size={self.size}, blocks=[{blocks}])"


# ---------------------------------------------------------------------------
# Tape and tensors


class _Node:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op, inputs, out, ctx):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so every node's inputs precede it.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.recording = True
        self.check_finite = check_finite
        self.loss: Tensor | None = None
        self.param_leaves: dict[tuple[int, str], Tensor] = {}
        self.input_leaf: Tensor | None = None
        self.layout: tuple[Block, ...] = ()
        self._grad_graph: dict[tuple[int, str], Tensor | None] | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, name: str = "") -> "Tensor":
        value = np.array(value, dtype=np.float64)
        t = Tensor(value, 0, self, len(self.nodes))
        self.nodes.append(_Node(None, (), t, name))
        return t

    @staticmethod
    def constant(value) -> "Tensor":
        return Tensor(np.asarray(value, dtype=np.float64), 0, None, None)

    @property
    def loss_value(self) -> float:
        if self.loss is None:
            raise StateError("tape has no evaluated loss")
        return float(self.loss.value)


class Tensor:
    __slots__ = ("value", "lead", "tape", "index")

    def __init__(self, value, lead=0, tape=None, index=None):
        self.value = value
        self.lead = lead
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape[self.lead:]

    @property
    def ndim(self) -> int:
        return self.value.ndim - self.lead

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self) -> str:
        where = f"node {self.index}" if self.index is not None else "unattached"
        return f"Tensor(shape={self.shape}, lead={self.lead}, {where})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _apply(op, inputs: Sequence[Tensor], value: np.ndarray, lead: int, ctx=None) -> Tensor:
    tape = None
    for t in inputs:
        if t.index is not None and t.tape.recording:
            tape = t.tape
            break
    if tape is None:
        return Tensor(value, lead)
    if tape.check_finite and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op.name} at node {len(tape.nodes)}", node_id=len(tape.nodes))
    out = Tensor(value, lead, tape, len(tape.nodes))
    tape.nodes.append(_Node(op, tuple(inputs), out, ctx))
    return out


def _padded(t: Tensor, rank: int) -> np.ndarray:
    """Value of ``t`` with its logical shape left-padded with 1s to ``rank``."""
    shape = t.shape
    if len(shape) == rank:
        return t.value
    return t.value.reshape(t.value.shape[: t.lead] + (1,) * (rank - len(shape)) + shape)


# ---------------------------------------------------------------------------
# Operations. Each op has ``forward`` (via the public function) and ``vjp``.


class _Op:
    name = "op"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        raise NotImplementedError


class _Add(_Op):
    name = "add"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        a, b = inputs
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )


class _Mul(_Op):
    name = "mul"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        a, b = inputs
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )


class _MatMul(_Op):
    name = "matmul"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        a, b = inputs
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )


class _Relu(_Op):
    name = "relu"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        mask = Tensor((inputs[0].value > 0).astype(np.float64))
        return (mul(g, mask),)


class _Logistic(_Op):
    name = "logistic"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        return (mul(g, mul(out, add(1.0, mul(out, -1.0)))),)


class _Square(_Op):
    name = "square"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        return (mul(g, mul(inputs[0], 2.0)),)


class _ReduceMean(_Op):
    name = "reduce_mean"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        shape = inputs[0].shape
        n = int(np.prod(shape, dtype=np.int64))
        return (broadcast_to(mul(g, 1.0 / n), shape),)


class _ReduceSum(_Op):
    name = "reduce_sum"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        return (broadcast_to(g, inputs[0].shape),)


class _SoftmaxXent(_Op):
    name = "softmax_cross_entropy"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        logits = inputs[0]
        n = logits.shape[0]
        probs = softmax(logits)
        return (mul(reshape(g, (n, 1)), add(probs, Tensor(-ctx))),)


class _Softmax(_Op):
    name = "softmax"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        pg = mul(out, g)
        m = out.shape[-1]
        row = matmul(pg, Tensor(np.ones((m, 1))))
        return (add(pg, mul(mul(out, row), -1.0)),)


class _Transpose(_Op):
    name = "transpose"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        return (transpose(g),)


class _Reshape(_Op):
    name = "reshape"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        return (reshape(g, inputs[0].shape),)


class _SumTo(_Op):
    name = "sum_to"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        return (broadcast_to(g, inputs[0].shape),)


class _BroadcastTo(_Op):
    name = "broadcast_to"

    @staticmethod
    def vjp(g, inputs, out, ctx, needs):
        return (sum_to(g, inputs[0].shape),)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    rank = max(a.ndim, b.ndim)
    value = _padded(a, rank) + _padded(b, rank)
    return _apply(_Add, (a, b), value, max(a.lead, b.lead))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    rank = max(a.ndim, b.ndim)
    value = _padded(a, rank) * _padded(b, rank)
    return _apply(_Mul, (a, b), value, max(a.lead, b.lead))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise LayoutError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise LayoutError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _apply(_MatMul, (a, b), _mm(a.value, b.value), max(a.lead, b.lead))


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # numpy's stacked matmul leaves BLAS for strided operands; fold a single
    # batched side into one GEMM and make the rest contiguous.
    if x.ndim == 3 and y.ndim == 2:
        p, n, m = x.shape
        return (np.ascontiguousarray(x).reshape(p * n, m) @ y).reshape(p, n, y.shape[1])
    if x.ndim == 2 and y.ndim == 2:
        return x @ y
    return np.ascontiguousarray(x) @ np.ascontiguousarray(y)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    return _apply(_Relu, (x,), np.maximum(x.value, 0.0), x.lead)


def logistic(x) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    e = np.exp(-np.abs(v))
    value = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply(_Logistic, (x,), value, x.lead)


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _apply(_Square, (x,), x.value * x.value, x.lead)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(range(x.lead, x.value.ndim))
    return _apply(_ReduceMean, (x,), x.value.mean(axis=axes), x.lead)


def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(range(x.lead, x.value.ndim))
    return _apply(_ReduceSum, (x,), x.value.sum(axis=axes), x.lead)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-example cross-entropy ``logsumexp(z) - z[y]``, shape ``(n,)``."""
    logits = _as_tensor(logits)
    if logits.lead or logits.ndim != 2:
        raise LayoutError("softmax_cross_entropy expects unbatched (n, classes) logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise LayoutError(f"labels shape {labels.shape} does not match {n} examples")
    idx = labels.astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= c) or np.any(idx != labels):
        raise LayoutError("labels must be integers in [0, classes)")
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    value = lse - z[np.arange(n), idx]
    onehot = np.zeros((n, c))
    onehot[np.arange(n), idx] = 1.0
    return _apply(_SoftmaxXent, (logits,), value, 0, ctx=onehot)


def softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.value
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return _apply(_Softmax, (x,), e / e.sum(axis=-1, keepdims=True), x.lead)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    return _apply(_Transpose, (x,), np.swapaxes(x.value, -1, -2), x.lead)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if shape == x.shape:
        return x
    return _apply(_Reshape, (x,), x.value.reshape(x.value.shape[: x.lead] + shape), x.lead)


def sum_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    v = x.value
    extra = x.ndim - len(shape)
    if extra < 0:
        raise LayoutError(f"cannot sum shape {x.shape} down to {shape}")
    if extra:
        v = v.sum(axis=tuple(range(x.lead, x.lead + extra)))
    keep = tuple(
        x.lead + i for i, (have, want) in enumerate(zip(x.shape[extra:], shape)) if want == 1 and have != 1
    )
    if keep:
        v = v.sum(axis=keep, keepdims=True)
    return _apply(_SumTo, (x,), v, x.lead)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    v = _padded(x, len(shape))
    v = np.array(np.broadcast_to(v, x.value.shape[: x.lead] + shape))
    return _apply(_BroadcastTo, (x,), v, x.lead)


# ---------------------------------------------------------------------------
# Backward sweeps


def _backward(tape: Tape, seeds: Mapping[int, Tensor], create_graph: bool) -> dict[int, Tensor]:
    """Propagate adjoints from ``seeds`` (node index -> adjoint) to every leaf.

    Returns adjoints for the leaf nodes reached. Nodes are visited in strict
    reverse tape order, so accumulation order is fixed and results are
    bit-stable.
    """
    adj: dict[int, Tensor] = dict(seeds)
    leaves: dict[int, Tensor] = {}
    start = max(adj) if adj else -1
    saved = tape.recording
    tape.recording = create_graph
    try:
        for i in range(start, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            node = tape.nodes[i]
            if node.op is None:
                leaves[i] = g
                continue
            needs = tuple(t.index is not None and t.tape is tape for t in node.inputs)
            grads = node.op.vjp(g, node.inputs, node.out, node.ctx, needs)
            for t, gi, need in zip(node.inputs, grads, needs):
                if not need or gi is None:
                    continue
                j = t.index
                prev = adj.get(j)
                adj[j] = gi if prev is None else add(prev, gi)
    finally:
        tape.recording = saved
    return leaves


Program = Callable[[Tensor, np.ndarray, Mapping[tuple[int, str], Tensor]], Tensor]


def evaluate(
    program: Program,
    batch: Batch,
    params: ParamVector,
    *,
    input_grad: bool = False,
    param_grad: bool = True,
    check_finite: bool = True,
) -> Tape:
    """Run ``program`` on ``batch`` and return the recorded tape.

    ``program(x, labels, blocks)`` must return a scalar tensor; ``blocks`` maps
    ``(layer, kind)`` to parameter tensors. The loss is available as
    ``tape.loss_value``.
    """
    inputs = np.asarray(batch.inputs, dtype=np.float64)
    labels = np.asarray(batch.labels)
    if inputs.ndim < 1 or inputs.shape[0] == 0:
        raise LayoutError("input batch must be non-empty")
    tape = Tape(check_finite=check_finite)
    tape.layout = params.layout
    if input_grad:
        x = tape.variable(inputs, "inputs")
        tape.input_leaf = x
    else:
        x = Tape.constant(inputs)
    blocks = {}
    for b in params.layout:
        value = params.flat[b.slice].reshape(b.shape)
        if param_grad:
            t = tape.variable(value, f"{b.kind}{b.layer}")
            tape.param_leaves[b.key] = t
        else:
            t = Tape.constant(value.copy())
        blocks[b.key] = t
    loss = program(x, labels, blocks)
    loss = _as_tensor(loss)
    if loss.shape != ():
        raise LayoutError(f"program must return a scalar loss, got shape {loss.shape}")
    if check_finite and not np.isfinite(loss.value):
        raise NumericError("non-finite loss", node_id=loss.index)
    tape.loss = loss
    return tape


def loss_value(program: Program, batch: Batch, params: ParamVector) -> float:
    """Forward pass only, without recording a tape."""
    tape = Tape()
    tape.recording = False
    x = Tape.constant(np.asarray(batch.inputs, dtype=np.float64))
    blocks = {b.key: Tape.constant(params.flat[b.slice].reshape(b.shape)) for b in params.layout}
    return float(_as_tensor(program(x, np.asarray(batch.labels), blocks)).value)


def _require_loss(tape: Tape) -> Tensor:
    if tape.loss is None:
        raise StateError("backward requested before forward: tape has no loss")
    return tape.loss


def _leaf_grads(tape: Tape, create_graph: bool) -> dict[int, Tensor]:
    loss = _require_loss(tape)
    if loss.index is None:
        return {}
    return _backward(tape, {loss.index: Tensor(np.ones(()))}, create_graph)


def gradient(tape: Tape) -> ParamVector:
    """Gradient of the tape's loss with respect to every parameter block."""
    if not tape.param_leaves:
        raise StateError("tape was evaluated without parameter gradients")
    leaves = _leaf_grads(tape, create_graph=False)
    flat = np.zeros(sum(b.size for b in tape.layout))
    for b in tape.layout:
        g = leaves.get(tape.param_leaves[b.key].index)
        if g is not None:
            flat[b.slice] = np.reshape(g.value, -1)
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite gradient")
    return ParamVector(flat, tape.layout)


def input_gradient(tape: Tape) -> np.ndarray:
    """Gradient of the tape's loss with respect to the input batch."""
    if tape.input_leaf is None:
        raise StateError("tape was evaluated without input gradients")
    leaves = _leaf_grads(tape, create_graph=False)
    g = leaves.get(tape.input_leaf.index)
    if g is None:
        return np.zeros_like(tape.input_leaf.value)
    out = np.array(g.value, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite input gradient")
    return out


def _gradient_graph(tape: Tape) -> dict[tuple[int, str], Tensor | None]:
    if tape._grad_graph is None:
        if not tape.param_leaves:
            raise StateError("tape was evaluated without parameter gradients")
        leaves = _leaf_grads(tape, create_graph=True)
        tape._grad_graph = {
            key: leaves.get(leaf.index) for key, leaf in tape.param_leaves.items()
        }
    return tape._grad_graph


def hvp(tape: Tape, v, chunk: int = 64):
    """Hessian-vector product ``H v`` of the tape's loss.

    ``v`` is a :class:`ParamVector` with the tape's layout, or an array of
    shape ``(p, D)`` holding ``p`` directions; the result has the same kind.
    Computed by differentiating the gradient graph against ``v``, i.e. one
    backward sweep over ``<grad L, v>``. The tape itself is left unchanged.
    """
    graph = _gradient_graph(tape)
    total = sum(b.size for b in tape.layout)
    if isinstance(v, ParamVector):
        if v.layout != tape.layout:
            raise LayoutError("direction layout differs from the tape's parameter layout")
        return ParamVector(_hvp_block(tape, graph, v.flat[None, :])[0], tape.layout)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != total:
        raise LayoutError(f"directions must have shape (p, {total}), got {v.shape}")
    out = np.empty_like(v)
    for start in range(0, v.shape[0], chunk):
        out[start : start + chunk] = _hvp_block(tape, graph, v[start : start + chunk])
    return out


def _hvp_block(tape: Tape, graph, V: np.ndarray) -> np.ndarray:
    p = V.shape[0]
    seeds: dict[int, Tensor] = {}
    for b in tape.layout:
        g = graph[b.key]
        if g is None or g.index is None:
            continue
        seed = Tensor(V[:, b.slice].reshape((p,) + b.shape), 1)
        prev = seeds.get(g.index)
        seeds[g.index] = seed if prev is None else add(prev, seed)
    out = np.zeros_like(V)
    if not seeds:
        return out
    leaves = _backward(tape, seeds, create_graph=False)
    for b in tape.layout:
        h = leaves.get(tape.param_leaves[b.key].index)
        if h is not None:
            out[:, b.slice] = np.broadcast_to(h.value, (p,) + b.shape).reshape(p, -1)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Hessian-vector product")
    return out
