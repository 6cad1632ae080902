"""
Hilbertforest: approximate nearest neighbor search and k-NN graphs from Hilbert orders
"""

__version__ = "0.1.0"

from .dataset import (
    MISSING_ID,
    ResultSet,
    VectorDataset,
    load_results,
    load_vectors,
    save_results,
    save_vectors,
)
from .errors import (
    DatasetFormatError,
    DimensionMismatchError,
    HilbertForestError,
    KeyRangeError,
    ParameterError,
    ShapeMismatchError,
)
from .params import GraphParams, SearchParams
from .curve import CurveConfig, hilbert_decode, hilbert_encode, hilbert_sort
from .tree import build_forest, build_tree, estimate_memory
from .codes import build_code_table, fit_quantizer
from .search import (
    build_index,
    build_index_with_stats,
    load_index,
    save_index,
    search,
    search_with_stats,
)
from .graph import KnnGraph, build_graph, graph_recall, load_graph, save_graph
from .evaluate import brute_force_graph, brute_force_knn, recall_at_k, synth_dataset
from .parallel import get_num_threads, set_num_threads

__all__ = [
    "MISSING_ID",
    "VectorDataset",
    "ResultSet",
    "load_vectors",
    "save_vectors",
    "load_results",
    "save_results",
    "HilbertForestError",
    "DatasetFormatError",
    "DimensionMismatchError",
    "ParameterError",
    "KeyRangeError",
    "ShapeMismatchError",
    "SearchParams",
    "GraphParams",
    "CurveConfig",
    "hilbert_encode",
    "hilbert_decode",
    "hilbert_sort",
    "build_tree",
    "build_forest",
    "estimate_memory",
    "fit_quantizer",
    "build_code_table",
    "build_index",
    "build_index_with_stats",
    "search",
    "search_with_stats",
    "save_index",
    "load_index",
    "KnnGraph",
    "build_graph",
    "graph_recall",
    "save_graph",
    "load_graph",
    "brute_force_knn",
    "brute_force_graph",
    "recall_at_k",
    "synth_dataset",
    "set_num_threads",
    "get_num_threads",
]
