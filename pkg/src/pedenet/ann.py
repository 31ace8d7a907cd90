"""Nearest-neighbour search over embedding galleries.

``ExactIndex`` is a chunked exhaustive scan. ``RandomProjectionForest`` is an
approximate index: each tree splits its points by the hyperplane bisecting
two random members, queries descend all trees best-first (a shared priority
queue keyed by margin to the splitting planes) until ``search_k`` candidates
are collected, and candidates are re-ranked with exact distances.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from pedenet.errors import PreconditionError


def direct_distances(query: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """L2 distances from one query to each row, computed from explicit differences."""
    diff = rows - query
    return np.sqrt(np.sum(diff * diff, axis=1))


class ExactIndex:
    def __init__(self, data: np.ndarray, chunk: int = 2048):
        if len(data) == 0:
            raise PreconditionError("cannot search an empty gallery")
        self.data = np.ascontiguousarray(data)
        self.sq_norms = np.einsum("ij,ij->i", self.data, self.data, dtype=np.float64)
        self.chunk = chunk

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(distances, indices) of the nearest row for each query.

        A Gram-matrix pass shortlists rows within a rounding margin of the
        minimum; the shortlist is then rescored with explicit differences so
        the returned distance is exactly that of a linear scan.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=self.data.dtype))
        dists = np.empty(len(queries), dtype=np.float64)
        idx = np.empty(len(queries), dtype=np.int64)
        data64 = self.data.astype(np.float64, copy=False)
        for start in range(0, len(queries), self.chunk):
            q = queries[start : start + self.chunk]
            q64 = q.astype(np.float64, copy=False)
            qn = np.einsum("ij,ij->i", q64, q64)
            d2 = qn[:, None] + self.sq_norms[None, :] - 2.0 * (q64 @ data64.T)
            best = d2.min(axis=1)
            margin = 1e-6 * (qn + self.sq_norms.max()) + 1e-12
            for r in range(len(q)):
                cand = np.flatnonzero(d2[r] <= best[r] + margin[r])
                cd = direct_distances(q[r], self.data[cand])
                j = int(np.argmin(cd))
                dists[start + r] = cd[j]
                idx[start + r] = cand[j]
        return dists, idx


@dataclass
class _Node:
    # internal node: normal/offset/left/right set; leaf: items set
    normal: np.ndarray | None = None
    offset: float = 0.0
    left: int = -1
    right: int = -1
    items: np.ndarray | None = None


class RandomProjectionForest:
    def __init__(self, data: np.ndarray, n_trees: int = 16, leaf_size: int = 32,
                 search_k: int | None = None, seed: int = 0):
        if len(data) == 0:
            raise PreconditionError("cannot search an empty gallery")
        self.data = np.ascontiguousarray(data)
        self.leaf_size = leaf_size
        self.search_k = search_k or max(n_trees * leaf_size * 4, 512)
        rng = np.random.default_rng(seed)
        self.nodes: list[_Node] = []
        self.roots = [self._build(np.arange(len(self.data)), rng) for _ in range(n_trees)]

    def _build(self, items: np.ndarray, rng: np.random.Generator) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node())
        if len(items) <= self.leaf_size:
            self.nodes[node_id].items = items
            return node_id
        pts = self.data[items]
        for _ in range(5):
            i, j = rng.choice(len(items), size=2, replace=False)
            normal = (pts[i] - pts[j]).astype(np.float64)
            if np.any(normal):
                break
        else:
            normal = rng.normal(size=self.data.shape[1])
        offset = float(normal @ (pts[i] + pts[j]) / 2.0)
        side = pts @ normal > offset
        if side.all() or not side.any():
            side = rng.random(len(items)) < 0.5
        node = self.nodes[node_id]
        node.normal, node.offset = normal, offset
        node.left = self._build(items[~side], rng)
        node.right = self._build(items[side], rng)
        return node_id

    def candidates(self, q: np.ndarray) -> np.ndarray:
        heap = [(0.0, root) for root in self.roots]
        heapq.heapify(heap)
        found: list[np.ndarray] = []
        count = 0
        while heap and count < self.search_k:
            priority, node_id = heapq.heappop(heap)
            node = self.nodes[node_id]
            while node.items is None:
                margin = float(q @ node.normal) - node.offset
                near, far = (node.right, node.left) if margin > 0 else (node.left, node.right)
                heapq.heappush(heap, (max(priority, abs(margin)), far))
                node = self.nodes[near]
            found.append(node.items)
            count += len(node.items)
        return np.unique(np.concatenate(found))

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        queries = np.atleast_2d(np.asarray(queries, dtype=self.data.dtype))
        dists = np.empty(len(queries), dtype=np.float64)
        idx = np.empty(len(queries), dtype=np.int64)
        for r, q in enumerate(queries):
            cand = self.candidates(q.astype(np.float64))
            cd = direct_distances(q, self.data[cand])
            j = int(np.argmin(cd))
            dists[r], idx[r] = cd[j], cand[j]
        return dists, idx
