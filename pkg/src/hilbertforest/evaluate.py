"""
Ground truth, recall scoring, synthetic data and parameter sweeps
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import ResultSet, VectorDataset, mean_overlap
from .distance import rank_by_distance, squared_l2
from .errors import ParameterError, ShapeMismatchError
from .graph import KnnGraph, build_graph_with_stats, graph_recall
from .parallel import parallel_map
from .params import DEFAULT_K_OUT, GraphParams, SearchParams
from .search import AnnIndex, count_distance_evals, search_with_stats

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

#: Exact k-NN result of brute force; same layout as any other result set.
GroundTruth = ResultSet

GENERATORS = ("uniform", "gaussian-mixture")

#: (n, k1, k2, h) search settings tuned for 23M vectors of dim 384.
TASK1_TIERS: Tuple[Tuple[int, int, int, int], ...] = (
    (160, 1420, 370, 2),
    (160, 1420, 360, 2),
    (160, 1300, 350, 2),
    (160, 1300, 340, 2),
    (160, 1200, 330, 2),
    (160, 1200, 320, 2),
    (160, 1100, 310, 2),
    (160, 1100, 300, 2),
    (120, 4000, 1000, 2),
    (120, 3200, 1000, 2),
    (120, 2800, 1000, 2),
    (120, 2400, 1000, 2),
    (120, 2000, 1000, 2),
    (120, 1800, 1000, 2),
    (120, 1600, 1000, 2),
    (120, 1600, 800, 2),
)

#: (n, k1, k2) graph settings tuned for 3M vectors of dim 384, cheapest first.
TASK2_TIERS: Tuple[Tuple[int, int, int], ...] = (
    (80, 96, 60),
    (112, 106, 75),
    (160, 130, 100),
    (280, 168, 150),
    (720, 170, 300),
)

_QUERY_BLOCK = 64


def brute_force_knn(ds: VectorDataset, queries: VectorDataset, k: int) -> GroundTruth:
    """
    Exact k-NN of every query by squared Euclidean distance.

    Rows are sorted by (distance, id).

    Raises:
        ParameterError: If ``k`` exceeds the dataset size
        DimensionMismatchError: If query and dataset dimensions differ
    """
    if k < 1 or k > ds.count:
        raise ParameterError(f"k must be in [1, {ds.count}] (dataset size), got {k}")
    ds.check_dim(queries.dim)
    ids = np.arange(ds.count, dtype=np.int64)

    def block(span):
        lo, hi = span
        return np.stack([rank_by_distance(ids, squared_l2(ds.data, q), k) for q in queries.data[lo:hi]])

    spans = [(lo, min(lo + _QUERY_BLOCK, queries.count)) for lo in range(0, queries.count, _QUERY_BLOCK)]
    rows = parallel_map(block, spans)
    out = np.concatenate(rows, axis=0) if rows else np.zeros((0, k), dtype=np.int64)
    return ResultSet(out, k=k)


def brute_force_graph(ds: VectorDataset, k_out: int = DEFAULT_K_OUT) -> KnnGraph:
    """Exact k-NN graph: every point's ``k_out`` nearest other points."""
    if k_out < 1 or ds.count <= k_out:
        raise ParameterError(
            f"k_out must be in [1, {ds.count - 1}] for {ds.count} points, got {k_out}"
        )
    ids = np.arange(ds.count, dtype=np.int64)

    def block(span):
        lo, hi = span
        rows = np.empty((hi - lo, k_out), dtype=np.int64)
        for i in range(lo, hi):
            others = ids != i
            rows[i - lo] = rank_by_distance(ids[others], squared_l2(ds.data[others], ds.data[i]), k_out)
        return rows

    spans = [(lo, min(lo + _QUERY_BLOCK, ds.count)) for lo in range(0, ds.count, _QUERY_BLOCK)]
    return KnnGraph(np.concatenate(parallel_map(block, spans), axis=0))


def _rows(x: Union[ResultSet, KnnGraph]) -> np.ndarray:
    return x.neighbors if isinstance(x, KnnGraph) else x.ids


def recall_at_k(result: Union[ResultSet, KnnGraph], truth: Union[ResultSet, KnnGraph], k: int) -> float:
    """
    Mean over rows of ``|result[:k] ∩ truth[:k]| / k``.

    Padding in ``result`` counts as a miss. Graphs are scored row by row like
    result sets.

    Raises:
        ShapeMismatchError: If row counts differ or ``k`` exceeds either width
    """
    a, b = _rows(result), _rows(truth)
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatchError(f"Row counts differ: {a.shape[0]} results vs {b.shape[0]} truth rows")
    if k < 1 or k > a.shape[1] or k > b.shape[1]:
        raise ShapeMismatchError(
            f"k={k} exceeds a row width (results {a.shape[1]}, truth {b.shape[1]})"
        )
    return mean_overlap(a, b, k)


def gaussian_mixture(
    count: int, dim: int, clusters: int = 10, seed: int = 0, spread: float = 0.1
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw ``clusters`` standard-normal centers, then each point around a random
    center with per-axis standard deviation ``spread``.

    Returns:
        (float32 points of shape (count, dim), int64 cluster label per point)
    """
    if clusters < 1:
        raise ParameterError(f"clusters must be >= 1, got {clusters}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, dim))
    labels = rng.integers(0, clusters, size=count)
    points = centers[labels] + spread * rng.standard_normal((count, dim))
    return points.astype(np.float32), labels.astype(np.int64)


def synth_dataset(
    count: int,
    dim: int,
    generator: str = "gaussian-mixture",
    seed: int = 0,
    clusters: int = 10,
    spread: float = 0.1,
) -> VectorDataset:
    """
    Deterministic synthetic dataset.

    Args:
        count: Number of points (>= 1)
        dim: Dimension (>= 1)
        generator: ``"uniform"`` on [0, 1) or ``"gaussian-mixture"``
        seed: Seed of the generator
        clusters: Mixture components (gaussian-mixture only)
        spread: Per-axis cluster standard deviation (gaussian-mixture only)
    """
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    if generator == "uniform":
        data = np.random.default_rng(seed).random((count, dim), dtype=np.float32)
    elif generator == "gaussian-mixture":
        data, _ = gaussian_mixture(count, dim, clusters, seed, spread)
    else:
        raise ParameterError(f"generator must be one of {', '.join(GENERATORS)}, got {generator!r}")
    return VectorDataset(data)


@dataclass
class RunReport:
    """
    One evaluated configuration.

    ``seconds`` is the only field that differs between identical runs.
    """

    task: str
    params: Dict[str, Any]
    recall: float
    seconds: float
    counters: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    dataset: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def append_report(path: PathLike, report: RunReport) -> None:
    """Append ``report`` as one JSON line."""
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")


def read_reports(path: PathLike) -> List[RunReport]:
    """Read every report of a JSON Lines file."""
    with Path(path).open(encoding="utf-8") as fh:
        return [RunReport(**json.loads(line)) for line in fh if line.strip()]


def describe_dataset(ds: VectorDataset, name: Optional[str] = None) -> Dict[str, Any]:
    out: Dict[str, Any] = {"count": ds.count, "dim": ds.dim}
    if name is not None:
        out["name"] = name
    return out


def scale_graph_tiers(count: int, k_out: int = DEFAULT_K_OUT, passes: int = 8) -> List[GraphParams]:
    """
    Five increasing graph budgets for a dataset of ``count`` points.

    The number of sorts keeps the reference ratios with the cheapest tier
    scaled to ``passes`` sorts; window and survivor sizes are capped at
    ``count - 1``.
    """
    if count <= k_out:
        raise ParameterError(f"count must exceed k_out={k_out}, got {count}")
    base = TASK2_TIERS[0][0]
    tiers = []
    for n, k1, k2 in TASK2_TIERS:
        tiers.append(
            GraphParams(
                n=max(1, round(n * passes / base)),
                k1=max(k_out, min(k1, count - 1)),
                k2=max(k_out, min(k2, count - 1)),
                k_out=k_out,
            )
        )
    return tiers


def sweep_search(
    index: AnnIndex,
    queries: VectorDataset,
    truth: GroundTruth,
    grid: Sequence[SearchParams],
    name: Optional[str] = None,
) -> List[RunReport]:
    """One report per search configuration, in grid order."""
    if not grid:
        raise ParameterError("Parameter grid must not be empty")
    reports = []
    for params in grid:
        rs, stats = search_with_stats(index, queries, params)
        k = min(params.k, truth.k, rs.k)
        report = RunReport(
            task="search",
            params=params.to_dict(),
            recall=recall_at_k(rs, truth, k),
            seconds=stats.seconds,
            counters=count_distance_evals(stats),
            seed=index.seed,
            dataset=describe_dataset(index.dataset, name),
        )
        logger.info("search %s: recall@%d=%.4f", params, k, report.recall)
        reports.append(report)
    return reports


def sweep_graph(
    ds: VectorDataset,
    truth: KnnGraph,
    grid: Sequence[GraphParams],
    name: Optional[str] = None,
) -> List[RunReport]:
    """One report per graph configuration, in grid order."""
    if not grid:
        raise ParameterError("Parameter grid must not be empty")
    reports = []
    for params in grid:
        g, stats = build_graph_with_stats(ds, params)
        report = RunReport(
            task="graph",
            params=params.to_dict(),
            recall=graph_recall(g, truth),
            seconds=stats.seconds,
            counters={
                "c1_slots_per_node": stats.c1_slots_per_node,
                "full_distance_evals": stats.full_distance_evals,
                "scratch_high_water": stats.scratch_high_water,
            },
            seed=params.seed,
            dataset=describe_dataset(ds, name),
        )
        logger.info("graph %s: recall@%d=%.4f", params, params.k_out, report.recall)
        reports.append(report)
    return reports


def sweep(
    target: Union[AnnIndex, VectorDataset],
    grid: Sequence[Union[SearchParams, GraphParams]],
    truth: Union[GroundTruth, KnnGraph],
    queries: Optional[VectorDataset] = None,
    name: Optional[str] = None,
) -> List[RunReport]:
    """
    Run a search sweep over an index (``queries`` required) or a graph sweep
    over a dataset.
    """
    if isinstance(target, AnnIndex):
        if queries is None:
            raise ParameterError("A search sweep needs queries")
        return sweep_search(target, queries, truth, grid, name)
    return sweep_graph(target, truth, grid, name)


def parse_grid(entries: Iterable[Dict[str, Any]], task: str) -> List[Union[SearchParams, GraphParams]]:
    """
    Build parameter objects from plain dicts (e.g. a JSON grid file).

    Raises:
        ParameterError: On unknown fields or invalid values
    """
    cls = {"search": SearchParams, "graph": GraphParams}.get(task)
    if cls is None:
        raise ParameterError(f"task must be 'search' or 'graph', got {task!r}")
    grid = []
    for entry in entries:
        try:
            grid.append(cls(**entry))
        except TypeError as exc:
            raise ParameterError(f"Invalid {task} grid entry {entry!r}: {exc}") from None
    return grid
