"""
Squared Euclidean distance and (distance, id) ranking

Every module ranks through these two functions so that exhaustive search,
graph construction and the brute-force oracle agree bit for bit.
"""

import numpy as np


def squared_l2(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """
    Squared Euclidean distance from ``query`` to every row of ``points``.

    Both operands are promoted to float64; each row is reduced independently,
    so a row's distance does not depend on which other rows are present.

    Args:
        points: Array of shape (n, d)
        query: Array of shape (d,)

    Returns:
        float64 array of shape (n,)
    """
    diff = np.asarray(points, dtype=np.float64) - np.asarray(query, dtype=np.float64)
    return np.square(diff).sum(axis=1)


def rank_by_distance(ids: np.ndarray, dists: np.ndarray, k: int) -> np.ndarray:
    """
    Return the ``k`` ids of smallest distance, ties broken by ascending id.

    Args:
        ids: Candidate ids (unique)
        dists: Distance per candidate
        k: Number of ids to keep; fewer are returned if fewer exist

    Returns:
        int64 array sorted by (distance, id)
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size > k:
        # prune before the exact sort; keep everything tied with the k-th value
        kth = np.partition(dists, k - 1)[k - 1]
        keep = dists <= kth
        ids, dists = ids[keep], dists[keep]
    order = np.lexsort((ids, dists))
    return ids[order[:k]]
