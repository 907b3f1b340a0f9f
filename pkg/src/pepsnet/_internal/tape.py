"""Reverse-mode differentiation over recorded tensor operations.

A ``Tape`` is an append-only list of nodes. Leaves and constants are
registered explicitly; every other node is produced by ``record`` from a
``Primitive`` and the ids of nodes already on the tape, so the list is always
in topological order. ``backward`` walks it once in reverse.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from ..exceptions import PepsArgumentError
from ..types import DenseTensor, FloatArray

logger = logging.getLogger(__name__)

type Value = DenseTensor | tuple[DenseTensor, ...]
type Grad = FloatArray | tuple[FloatArray | None, ...]
type Segment = Callable[..., int | tuple[int, ...]]


class Primitive(ABC):
    """A differentiable operation.

    ``forward`` returns the output value and whatever it needs to keep for
    ``backward``; ``backward`` maps the output gradient to one gradient (or
    ``None``) per input.
    """

    name: str = "primitive"

    @abstractmethod
    def forward(self, *inputs: Value) -> tuple[Value, Any]: ...

    @abstractmethod
    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]: ...


class NodeKind(Enum):
    LEAF = "leaf"
    CONSTANT = "constant"
    OP = "op"


@dataclass(slots=True)
class _Node:
    kind: NodeKind
    value: Value
    op: Primitive | None = None
    inputs: tuple[int, ...] = ()
    saved: Any = None
    requires_grad: bool = False
    name: str | None = None


@dataclass(frozen=True, slots=True)
class GradientMap:
    """Gradients of a scalar loss with respect to every leaf of a tape.

    Attributes:
        grads: Leaf node id -> gradient with the leaf's shape.
        names: Leaf node id -> leaf name (only for named leaves).
    """

    grads: dict[int, DenseTensor]
    names: dict[int, str] = field(default_factory=dict)

    def __getitem__(self, node: int) -> DenseTensor:
        return self.grads[node]

    def __contains__(self, node: object) -> bool:
        return node in self.grads

    def __iter__(self) -> Iterator[int]:
        return iter(self.grads)

    def __len__(self) -> int:
        return len(self.grads)

    def named(self) -> dict[str, FloatArray]:
        """Gradients of named leaves keyed by name."""
        return {name: self.grads[node].data for node, name in self.names.items()}


def _accumulate(existing: Grad | None, new: Grad) -> Grad:
    if existing is None:
        return new
    if isinstance(existing, tuple) and isinstance(new, tuple):
        merged: list[FloatArray | None] = []
        for old_part, new_part in zip(existing, new, strict=True):
            if old_part is None:
                merged.append(new_part)
            elif new_part is None:
                merged.append(old_part)
            else:
                merged.append(old_part + new_part)
        return tuple(merged)
    assert not isinstance(existing, tuple) and not isinstance(new, tuple)
    return existing + new


def _count_arrays(obj: Any) -> int:
    if isinstance(obj, DenseTensor | np.ndarray):
        return 1
    if isinstance(obj, tuple | list):
        return sum(_count_arrays(item) for item in obj)
    return 0


class Tape:
    """Recorded computation graph for one sample.

    A tape is confined to a single worker. With ``grad_enabled=False`` values
    are computed but nothing is kept for a backward pass.
    """

    def __init__(self, grad_enabled: bool = True) -> None:
        """Create an empty tape.

        Args:
            grad_enabled: Keep the data needed by ``backward``.
        """
        self._nodes: list[_Node] = []
        self._grad_enabled = grad_enabled

    @property
    def grad_enabled(self) -> bool:
        """Whether this tape records for differentiation."""
        return self._grad_enabled

    def __len__(self) -> int:
        return len(self._nodes)

    def _check(self, node: int) -> _Node:
        if not 0 <= node < len(self._nodes):
            raise PepsArgumentError(f"unknown tape node {node}")
        return self._nodes[node]

    def leaf(self, value: DenseTensor, name: str | None = None) -> int:
        """Register a trainable input and return its node id."""
        self._nodes.append(_Node(NodeKind.LEAF, value, requires_grad=self._grad_enabled, name=name))
        return len(self._nodes) - 1

    def constant(self, value: DenseTensor) -> int:
        """Register an input that receives no gradient."""
        self._nodes.append(_Node(NodeKind.CONSTANT, value))
        return len(self._nodes) - 1

    def record(self, op: Primitive, *inputs: int) -> int:
        """Apply ``op`` to recorded nodes and append the result.

        Raises:
            PepsArgumentError: If an input id is not on this tape.
        """
        nodes = [self._check(i) for i in inputs]
        out, saved = op.forward(*(n.value for n in nodes))
        requires_grad = self._grad_enabled and any(n.requires_grad for n in nodes)
        self._nodes.append(
            _Node(
                NodeKind.OP,
                out,
                op=op,
                inputs=tuple(inputs),
                saved=saved if requires_grad else None,
                requires_grad=requires_grad,
            )
        )
        return len(self._nodes) - 1

    def value(self, node: int) -> Value:
        """Forward value of a node."""
        return self._check(node).value

    def tensor(self, node: int) -> DenseTensor:
        """Forward value of a single-output node."""
        value = self._check(node).value
        if isinstance(value, tuple):
            raise PepsArgumentError(f"node {node} holds {len(value)} outputs; select one first")
        return value

    def leaves(self) -> list[int]:
        """Ids of all trainable leaves in registration order."""
        return [i for i, n in enumerate(self._nodes) if n.kind is NodeKind.LEAF]

    def retained_count(self) -> int:
        """Number of arrays currently held by the tape (values plus saved data)."""
        return sum(_count_arrays(n.value) + _count_arrays(n.saved) for n in self._nodes)

    def backward(self, loss_node: int) -> GradientMap:
        """Differentiate a scalar node with respect to every leaf.

        Leaves not connected to the loss get zero gradients. Forward values
        are never modified, so repeated calls return identical maps.

        Raises:
            PepsArgumentError: If the loss is not rank 0 or the tape does not record.
        """
        loss = self.tensor(loss_node)
        if loss.rank != 0:
            raise PepsArgumentError(f"loss must be a scalar, got shape {loss.shape}")
        if not self._grad_enabled:
            raise PepsArgumentError("tape was created with grad_enabled=False")

        leaf_grads = self.backprop({loss_node: np.ones(())})

        grads: dict[int, DenseTensor] = {}
        names: dict[int, str] = {}
        for node in self.leaves():
            leaf = self._nodes[node]
            assert isinstance(leaf.value, DenseTensor)
            g = leaf_grads.get(node)
            grads[node] = DenseTensor(g if g is not None else np.zeros(leaf.value.shape))
            if leaf.name is not None:
                names[node] = leaf.name
        return GradientMap(grads, names)

    def backprop(self, seeds: dict[int, Grad]) -> dict[int, FloatArray]:
        """Propagate seed gradients to the leaves (vector-Jacobian products).

        Args:
            seeds: Node id -> gradient of the outputs of that node.

        Returns:
            Leaf node id -> accumulated gradient for leaves that were reached.
        """
        pending: dict[int, Grad] = {}
        for node, grad in seeds.items():
            pending[node] = _accumulate(pending.get(node), grad)
        leaf_grads: dict[int, FloatArray] = {}

        for index in range(max(pending, default=-1), -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            node = self._nodes[index]
            if node.kind is NodeKind.LEAF:
                assert not isinstance(grad, tuple)
                leaf_grads[index] = grad
                continue
            if node.kind is NodeKind.CONSTANT or not node.requires_grad:
                continue
            assert node.op is not None
            input_grads = node.op.backward(grad, node.saved)
            for source, input_grad in zip(node.inputs, input_grads, strict=True):
                if input_grad is None or not self._nodes[source].requires_grad:
                    continue
                pending[source] = _accumulate(pending.get(source), input_grad)

        return leaf_grads

    def checkpoint(self, segment: Segment, *inputs: int) -> int:
        """Record ``segment`` as one node that recomputes its internals on backward.

        ``segment(tape, *input_ids)`` must build its result on the tape it is
        given from primitives only and be deterministic. Only the segment
        inputs and outputs are retained; a segment returning several ids yields
        a tuple-valued node to be read with ``ops.select``.
        """
        return self.record(Checkpoint(segment), *inputs)


def _zeros_like(value: Value) -> Grad:
    if isinstance(value, tuple):
        return tuple(np.zeros(v.shape) for v in value)
    return np.zeros(value.shape)


class Checkpoint(Primitive):
    """Recompute-on-backward wrapper around a pure sub-computation."""

    name = "checkpoint"

    def __init__(self, segment: Segment) -> None:
        self._segment = segment

    def _run(self, tape: Tape, values: Sequence[Value]) -> tuple[list[int], int | tuple[int, ...]]:
        ids: list[int] = []
        for v in values:
            if isinstance(v, tuple):
                raise PepsArgumentError("checkpoint inputs must be single-output nodes")
            ids.append(tape.leaf(v))
        return ids, self._segment(tape, *ids)

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        inner = Tape(grad_enabled=False)
        _, out = self._run(inner, inputs)
        if isinstance(out, tuple):
            return tuple(inner.tensor(i) for i in out), inputs
        return inner.tensor(out), inputs

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        inner = Tape(grad_enabled=True)
        ids, out = self._run(inner, saved)
        seeds: dict[int, Grad] = {}
        if isinstance(out, tuple):
            assert isinstance(grad, tuple)
            for node, part in zip(out, grad, strict=True):
                if part is not None:
                    seeds[node] = _accumulate(seeds.get(node), part)
        else:
            seeds[out] = grad
        leaf_grads = inner.backprop(seeds)
        return [leaf_grads.get(i, _zeros_like(v)) for i, v in zip(ids, saved, strict=True)]
