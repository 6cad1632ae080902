"""
Hyperparameters of the search pipeline and the graph builder
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict

from .errors import ParameterError

DEFAULT_LEAF_SIZE = 100
DEFAULT_K = 30
DEFAULT_K_OUT = 15


def _require(name: str, value: int, minimum: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ParameterError(f"{name} must be >= {minimum}, got {value}")


@dataclass(frozen=True)
class SearchParams:
    """
    Parameters of one search run.

    Args:
        n: Number of trees consulted (at most the forest size)
        k1: Candidates taken from each tree's window
        k2: Survivors of the sketch (Hamming) stage
        h: Master-order expansion radius on each side of a survivor
        k: Neighbors returned per query
        exact_final: Re-rank with float vectors instead of dequantized codes
    """

    n: int
    k1: int
    k2: int
    h: int = 0
    k: int = DEFAULT_K
    exact_final: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Raise ParameterError naming the first invalid field."""
        _require("n", self.n, 1)
        _require("k1", self.k1, 1)
        _require("k2", self.k2, 1)
        _require("h", self.h, 0)
        _require("k", self.k, 1)

    @property
    def hamming_budget(self) -> int:
        """Upper bound on Hamming evaluations per query, ``n * k1``."""
        return self.n * self.k1

    @property
    def distance_budget(self) -> int:
        """Upper bound on full-distance evaluations per query, ``k2 * (2h + 1)``."""
        return self.k2 * (2 * self.h + 1)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class GraphParams:
    """
    Parameters of one k-NN graph construction.

    Args:
        n: Number of Hilbert sorts (passes)
        k1: Window size per sort, the point itself excluded
        k2: Survivors of the sketch stage per point
        k_out: Neighbors kept per point
        seed: Seed of the per-pass axis permutations
        exact_final: Re-rank with float vectors (True) or dequantized codes
    """

    n: int
    k1: int
    k2: int
    k_out: int = DEFAULT_K_OUT
    seed: int = 0
    exact_final: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Raise ParameterError naming the first invalid field."""
        _require("n", self.n, 1)
        _require("k1", self.k1, 2)
        _require("k2", self.k2, 1)
        _require("k_out", self.k_out, 1)
        _require("seed", self.seed, 0)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
