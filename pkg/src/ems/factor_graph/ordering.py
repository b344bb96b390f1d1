"""Minimum-degree fill-reducing ordering on the graph of a sparse matrix."""

from __future__ import annotations

import heapq

import numpy as np

from .sparse import SparseSystem


def adjacency(sys: SparseSystem) -> list[set[int]]:
    """Undirected off-diagonal graph of ``A + A^T``."""
    adj: list[set[int]] = [set() for _ in range(sys.n)]
    for r, c in zip(sys.rows.tolist(), sys.cols.tolist()):
        if r != c:
            adj[r].add(c)
            adj[c].add(r)
    return adj


def order(sys: SparseSystem) -> np.ndarray:
    """Return the elimination order ``perm`` (``perm[k]`` = original index of pivot k).

    Classical minimum degree on the elimination graph: the vertex of least
    current degree is eliminated and its neighbours become a clique. Ties go
    to the smallest original index, so the result is deterministic.
    """
    adj = adjacency(sys)
    n = sys.n
    heap = [(len(adj[v]), v) for v in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    perm = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        if deg == n - len(perm) - 1:
            # the remainder is a clique: every order gives the same fill, and
            # smallest-index tie breaking would take it in index order
            perm.extend(np.flatnonzero(~done).tolist())
            break
        done[v] = True
        perm.append(v)
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.array(perm, dtype=np.int64)


def natural(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)
