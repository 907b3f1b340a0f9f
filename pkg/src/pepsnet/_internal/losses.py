"""Softmax and cross-entropy on scale-tracked logits."""

from __future__ import annotations

import numpy as np

from ..exceptions import PepsArgumentError
from ..types import FloatArray, Logits
from . import ops
from .tape import Tape


def softmax(logits: Logits) -> FloatArray:
    """Class probabilities, computed in the log domain."""
    return np.exp(ops.log_softmax(logits.values, logits.log_scale))


def cross_entropy_loss(logits: Logits, label: int) -> float:
    """``-log softmax(logits)[label]`` without recording anything."""
    if not 0 <= label < logits.label_count:
        raise PepsArgumentError(f"label {label} out of range for {logits.label_count} classes")
    return -float(ops.log_softmax(logits.values, logits.log_scale)[label])


def record_cross_entropy(tape: Tape, values: int, label: int, log_scale: float) -> int:
    """Record the fused loss on the node holding the logit mantissas."""
    return ops.softmax_cross_entropy(tape, values, label, log_scale)
