"""Partition objective, DP optimizer vs brute-force oracle, fixed packing."""

import math
import random

import numpy as np
import pytest

from qaforge.chunking import (
    BRUTE_FORCE_LIMIT,
    Partition,
    brute_force_partition,
    fixed_partition,
    optimal_partition,
    partition_cost,
)
from qaforge.errors import EmptyInput, SizeError
from qaforge.gateway import MockEmbedder


def _random_embeddings(rng, n, dim=12):
    """Unit vectors with deliberate repeats so cost ties actually occur."""
    emb = MockEmbedder(seed=rng.randint(0, 10_000), dimension=dim)
    texts = [f"token{rng.randint(0, max(2, n // 2))}" for _ in range(n)]
    return np.vstack(emb.embed(texts))


def test_single_unit_costs_lambda():
    p = optimal_partition([[1.0, 0.0]], lam=0.3)
    assert p.boundaries == (1,)
    assert p.cost == pytest.approx(0.3)


def test_two_identical_segments_cost_two_lambda():
    # Explicit 2-segment split of identical vectors: Sim = 1, cost = 0 + 2λ.
    vecs = [[1.0, 0.0], [1.0, 0.0]]
    cost = partition_cost([1, 2], vecs, lam=0.3)
    assert cost == pytest.approx(0.6, abs=1e-12)


def test_hand_computed_three_segment_cost():
    # Segments with pairwise cosines 0.9 then 0.5 at λ=0.3:
    # (1-0.9) + (1-0.5) + 3*0.3 = 1.5
    s, c = math.sqrt(1 - 0.9**2), math.sqrt(1 - 0.5**2)
    vecs = [
        [1.0, 0.0],
        [0.9, s],  # cos to first = 0.9
        [0.9 * 0.5 - s * c, 0.9 * c + s * 0.5],  # rotated a further acos(0.5)
    ]
    cost = partition_cost([1, 2, 3], vecs, lam=0.3)
    assert cost == pytest.approx(1.5, abs=1e-9)


def test_dominating_lambda_collapses_to_one_chunk():
    rng = random.Random(11)
    vecs = _random_embeddings(rng, 9)
    p = optimal_partition(vecs, lam=10.0)
    assert p.boundaries == (9,)
    assert brute_force_partition(vecs, lam=10.0).boundaries == (9,)


def test_lambda_zero_matches_brute_force():
    rng = random.Random(5)
    for _ in range(20):
        vecs = _random_embeddings(rng, rng.randint(2, 9))
        a = optimal_partition(vecs, lam=0.0)
        b = brute_force_partition(vecs, lam=0.0)
        assert a.cost == b.cost
        assert a.boundaries == b.boundaries


def test_oracle_equivalence_random_suite():
    rng = random.Random(42)
    for _ in range(60):
        n = rng.randint(1, 12)
        vecs = _random_embeddings(rng, n)
        lam = rng.choice([0.0, 0.05, 0.3, 1.0])
        a = optimal_partition(vecs, lam)
        b = brute_force_partition(vecs, lam)
        assert a.cost == b.cost  # exact float equality by construction
        assert a.boundaries == b.boundaries


def test_cost_audit_recomputation():
    rng = random.Random(9)
    for _ in range(20):
        vecs = _random_embeddings(rng, rng.randint(1, 10))
        p = optimal_partition(vecs, lam=0.3)
        assert p.cost == pytest.approx(
            partition_cost(p.boundaries, vecs, 0.3), abs=1e-9
        )


def test_monotone_fragmentation_in_lambda():
    rng = random.Random(17)
    for _ in range(15):
        vecs = _random_embeddings(rng, rng.randint(2, 10))
        sizes = [
            optimal_partition(vecs, lam).num_segments
            for lam in (0.0, 0.1, 0.5, 2.0)
        ]
        assert sizes == sorted(sizes, reverse=True)


def test_brute_force_size_limit():
    vecs = np.eye(BRUTE_FORCE_LIMIT + 1)
    with pytest.raises(SizeError):
        brute_force_partition(vecs, lam=0.3)


def test_empty_embeddings_rejected():
    with pytest.raises(EmptyInput):
        optimal_partition(np.zeros((0, 4)), lam=0.3)


def test_bad_boundaries_rejected():
    vecs = [[1.0, 0.0], [0.0, 1.0]]
    with pytest.raises(EmptyInput):
        partition_cost([1], vecs, 0.3)  # does not reach n
    with pytest.raises(EmptyInput):
        partition_cost([2, 2], vecs, 0.3)  # empty segment


def test_partition_segments_helper():
    p = Partition(boundaries=(2, 5), cost=None, lam=0.0)
    assert p.segments() == [(0, 2), (2, 5)]
    assert p.num_segments == 2


# ---------------------------------------------------------------------------
# fixed packing


def test_fixed_partition_greedy_fill():
    # 100-token units under a 250 budget pack two per chunk.
    partition, oversized = fixed_partition([100] * 6, 250)
    assert partition.boundaries == (2, 4, 6)
    assert oversized == []
    assert partition.cost is None


def test_fixed_partition_oversized_unit_is_isolated():
    partition, oversized = fixed_partition([100, 3000, 100], 2048)
    assert partition.boundaries == (1, 2, 3)
    assert oversized == [1]


def test_fixed_partition_empty_window():
    partition, oversized = fixed_partition([], 100)
    assert partition.boundaries == ()
    assert oversized == []


def test_fixed_partition_covers_all_units():
    rng = random.Random(3)
    for _ in range(30):
        counts = [rng.randint(1, 40) for _ in range(rng.randint(1, 15))]
        budget = rng.randint(10, 60)
        partition, _ = fixed_partition(counts, budget)
        assert partition.boundaries[-1] == len(counts)
        assert all(b > a for a, b in zip((0,) + partition.boundaries, partition.boundaries))
        for a, b in partition.segments():
            if b - a > 1:  # multi-unit chunks respect the budget
                assert sum(counts[a:b]) <= budget
