"""SGD and Adam updates over named parameter arrays.

Updates are functional: each step returns new arrays and leaves its inputs
untouched, so a model can be swapped atomically between batches. The
positivity projection is applied to the updated grid afterwards.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import PepsDimensionError
from ..types import FloatArray, OptimizerKind

type Params = dict[str, FloatArray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass(slots=True)
class OptimizerState:
    """Per-parameter optimizer memory.

    Attributes:
        kind: Update rule.
        step: Number of updates applied so far.
        first_moment: Adam running mean of gradients.
        second_moment: Adam running mean of squared gradients.
    """

    kind: OptimizerKind = OptimizerKind.ADAM
    step: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)


def _check(params: Mapping[str, FloatArray], grads: Mapping[str, FloatArray]) -> None:
    for name, value in params.items():
        g = grads.get(name)
        if g is not None and g.shape != value.shape:
            raise PepsDimensionError(f"gradient for {name} has shape {g.shape}, parameter has {value.shape}")


def sgd_step(
    params: Mapping[str, FloatArray],
    grads: Mapping[str, FloatArray],
    lr: float,
    weight_decay: float = 0.0,
) -> Params:
    """``θ ← θ − lr·(g + weight_decay·θ)``."""
    _check(params, grads)
    out: Params = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = value.copy()
            continue
        if weight_decay:
            g = g + weight_decay * value
        out[name] = value - lr * g
    return out


def adam_step(
    params: Mapping[str, FloatArray],
    grads: Mapping[str, FloatArray],
    state: OptimizerState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
    weight_decay: float = 0.0,
) -> tuple[Params, OptimizerState]:
    """Bias-corrected Adam update.

    Returns:
        Updated parameters and a new state; ``state`` itself is not modified.
    """
    _check(params, grads)
    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step

    out: Params = {}
    first: Params = {}
    second: Params = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if weight_decay:
            g = g + weight_decay * value
        m = beta1 * state.first_moment.get(name, np.zeros_like(value)) + (1.0 - beta1) * g
        v = beta2 * state.second_moment.get(name, np.zeros_like(value)) + (1.0 - beta2) * (g * g)
        first[name] = m
        second[name] = v
        out[name] = value - lr * (m / correction1) / (np.sqrt(v / correction2) + epsilon)

    return out, OptimizerState(state.kind, step, first, second)
