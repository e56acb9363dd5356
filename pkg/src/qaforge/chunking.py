"""Optimal contiguous partitioning of a window of embedded units.

A partition of units ``[0, n)`` into contiguous segments is scored as the
sum of semantic dissimilarities between consecutive segments plus a length
penalty ``lam`` per segment:

    cost = sum_{j} (1 - cos(e_j, e_{j+1})) + lam * |segments|

where ``e_j`` is the unit-normalized mean of the unit embeddings in
segment ``j``.  Low ``lam`` favours many small, topically sharp segments;
high ``lam`` collapses the window into fewer chunks.

:func:`optimal_partition` solves this exactly with dynamic programming
over (last-segment span) states; :func:`brute_force_partition` enumerates
all ``2^(n-1)`` partitions and exists purely as an oracle for testing the
DP.  Both paths share the same low-level arithmetic (segment embeddings,
pair dissimilarities, cost accumulation order) so equal partitions produce
bitwise-equal costs, and both break cost ties the same way: fewer
segments first, then the lexicographically smallest boundary list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, SizeError

BRUTE_FORCE_LIMIT = 16


@dataclass(frozen=True)
class Partition:
    """A contiguous partition of ``n`` units.

    ``boundaries`` holds the exclusive end index of each segment in order,
    so a partition of 5 units into [0,2) and [2,5) is ``[2, 5]``.  ``cost``
    is ``None`` for partitions produced without embeddings (fixed-size
    chunking), where the semantic objective is undefined.
    """

    boundaries: tuple[int, ...]
    cost: float | None
    lam: float

    @property
    def num_segments(self) -> int:
        return len(self.boundaries)

    def segments(self) -> list[tuple[int, int]]:
        spans = []
        start = 0
        for end in self.boundaries:
            spans.append((start, end))
            start = end
        return spans


def _as_matrix(unit_embeddings) -> np.ndarray:
    mat = np.asarray(unit_embeddings, dtype=float)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise EmptyInput("unit embeddings must be a non-empty 2-d array")
    return mat


def _segment_embeddings(mat: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Unit-normalized mean embedding for every span [a, b).

    Means are computed by direct slicing (no prefix-sum subtraction) so
    every caller sees bitwise-identical vectors for identical spans.
    """
    n = mat.shape[0]
    out: dict[tuple[int, int], np.ndarray] = {}
    for a in range(n):
        for b in range(a + 1, n + 1):
            mean = mat[a:b].mean(axis=0)
            norm = float(np.linalg.norm(mean))
            out[(a, b)] = mean / norm if norm > 0.0 else mean
    return out


def _pair_dissimilarity(seg: dict, left: tuple[int, int], right: tuple[int, int]) -> float:
    u, v = seg[left], seg[right]
    # Segment embeddings are unit vectors (or zero), so the dot product is
    # the cosine; a zero vector contributes full dissimilarity.
    if not u.any() or not v.any():
        return 1.0
    return 1.0 - float(np.dot(u, v))


def _accumulate_cost(
    seg: dict, spans: list[tuple[int, int]], lam: float
) -> float:
    """Left-to-right cost accumulation.

    The exact operation order (cost + d + lam per extra segment) mirrors
    the DP recurrence so recomputed costs match DP costs to the last bit.
    """
    cost = lam
    for prev, cur in zip(spans, spans[1:]):
        cost = cost + _pair_dissimilarity(seg, prev, cur) + lam
    return cost


def partition_cost(
    boundaries, unit_embeddings, lam: float
) -> float:
    """Recompute the objective for an explicit boundary list."""
    mat = _as_matrix(unit_embeddings)
    bounds = tuple(int(b) for b in boundaries)
    n = mat.shape[0]
    if not bounds or bounds[-1] != n or any(
        b <= a for a, b in zip((0,) + bounds, bounds)
    ):
        raise EmptyInput(f"boundaries {bounds} do not partition {n} units")
    seg = _segment_embeddings(mat)
    spans = []
    start = 0
    for end in bounds:
        spans.append((start, end))
        start = end
    return _accumulate_cost(seg, spans, lam)


def optimal_partition(unit_embeddings, lam: float) -> Partition:
    """Exact minimizer of the partition objective.

    Dynamic program over states ``(j, i)`` = "prefix [0, i) whose last
    segment is [j, i)"; the inter-segment dissimilarity only couples
    adjacent segments, so this state is sufficient.  Each state stores the
    full ``(cost, num_segments, boundaries)`` tuple and candidates are
    compared with lexicographic tuple order, which realizes the tie-break
    exactly as the brute-force oracle does.
    """
    mat = _as_matrix(unit_embeddings)
    n = mat.shape[0]
    seg = _segment_embeddings(mat)

    # best[(j, i)] = (cost, num_segments, boundaries) for prefix [0, i)
    # ending with segment [j, i).
    best: dict[tuple[int, int], tuple[float, int, tuple[int, ...]]] = {}
    for i in range(1, n + 1):
        for j in range(i):
            if j == 0:
                best[(0, i)] = (lam, 1, (i,))
                continue
            chosen = None
            for k in range(j):
                prev_cost, prev_segs, prev_bounds = best[(k, j)]
                cand = (
                    prev_cost + _pair_dissimilarity(seg, (k, j), (j, i)) + lam,
                    prev_segs + 1,
                    prev_bounds + (i,),
                )
                if chosen is None or cand < chosen:
                    chosen = cand
            best[(j, i)] = chosen  # type: ignore[assignment]

    final = min(best[(j, n)] for j in range(n))
    return Partition(boundaries=final[2], cost=final[0], lam=lam)


def brute_force_partition(unit_embeddings, lam: float) -> Partition:
    """Exhaustive oracle: enumerate every contiguous partition.

    Refuses windows above ``BRUTE_FORCE_LIMIT`` units (2^(n-1) blows up).
    Tie-break matches :func:`optimal_partition`: cost, then fewer
    segments, then lexicographically smallest boundary list.
    """
    mat = _as_matrix(unit_embeddings)
    n = mat.shape[0]
    if n > BRUTE_FORCE_LIMIT:
        raise SizeError(
            f"brute force over {n} units would enumerate 2^{n - 1} partitions; "
            f"limit is {BRUTE_FORCE_LIMIT}"
        )
    seg = _segment_embeddings(mat)

    best: tuple[float, int, tuple[int, ...]] | None = None
    for mask in range(2 ** (n - 1)):
        bounds = tuple(
            pos for pos in range(1, n) if mask & (1 << (pos - 1))
        ) + (n,)
        spans = []
        start = 0
        for end in bounds:
            spans.append((start, end))
            start = end
        cand = (_accumulate_cost(seg, spans, lam), len(bounds), bounds)
        if best is None or cand < best:
            best = cand
    assert best is not None
    return Partition(boundaries=best[2], cost=best[0], lam=lam)


def fixed_partition(unit_token_counts, size_tokens: int) -> tuple[Partition, list[int]]:
    """Greedy fixed-budget partition, no embeddings involved.

    Packs units left to right until adding the next unit would exceed
    ``size_tokens``.  A single unit larger than the budget becomes its own
    segment; its index within the partition is returned in the second
    element so callers can flag it.  An empty window yields an empty
    partition.
    """
    counts = [int(c) for c in unit_token_counts]
    if size_tokens < 1:
        raise EmptyInput("size_tokens must be >= 1")
    if not counts:
        return Partition(boundaries=(), cost=None, lam=0.0), []

    boundaries: list[int] = []
    oversized: list[int] = []
    current = 0
    start = 0
    for idx, tokens in enumerate(counts):
        if tokens > size_tokens and current == 0:
            boundaries.append(idx + 1)
            oversized.append(len(boundaries) - 1)
            start = idx + 1
            continue
        if current > 0 and current + tokens > size_tokens:
            boundaries.append(idx)
            start = idx
            current = 0
        if tokens > size_tokens:
            boundaries.append(idx + 1)
            oversized.append(len(boundaries) - 1)
            start = idx + 1
            current = 0
        else:
            current += tokens
    if start < len(counts):
        boundaries.append(len(counts))
    return Partition(boundaries=tuple(boundaries), cost=None, lam=0.0), oversized
