"""Internal implementation modules for pepsnet."""

from .contraction import BoundaryMps, ContractionResult, bidirectional_contract, exact_contract
from .peps import AbsorbedGrid, PepsGrid, apply_positivity, init_grid
from .tape import GradientMap, Tape

__all__ = [
    "AbsorbedGrid",
    "BoundaryMps",
    "ContractionResult",
    "GradientMap",
    "PepsGrid",
    "Tape",
    "apply_positivity",
    "bidirectional_contract",
    "exact_contract",
    "init_grid",
]
