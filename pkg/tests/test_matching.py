import itertools

import numpy as np
import pytest

from features.matching import CostMatrix, dice, hungarian, matching_cost, segments_from_mask
from util.errors import EmptyMatrixError, NonFiniteError, ShapeError, ValidationError


def _brute_force(costs):
    n_q, n_t = costs.shape
    best = None
    if n_q >= n_t:
        for rows in itertools.permutations(range(n_q), n_t):
            total = sum(costs[r, t] for t, r in enumerate(rows))
            best = total if best is None else min(best, total)
    else:
        for cols in itertools.permutations(range(n_t), n_q):
            total = sum(costs[q, c] for q, c in enumerate(cols))
            best = total if best is None else min(best, total)
    return best


def test_identity_assignment_on_zero_diagonal():
    a = hungarian(CostMatrix(1.0 - np.eye(3)))
    assert a.pairs == ((0, 0), (1, 1), (2, 2))
    assert a.total_cost == 0.0


def test_known_three_by_three():
    a = hungarian(CostMatrix(np.array([[4.0, 1, 3], [2, 0, 5], [3, 2, 2]])))
    assert a.pairs == ((0, 1), (1, 0), (2, 2))
    assert a.total_cost == 5.0


def _first_optimal_permutation(costs):
    """Lexicographically first minimum-cost permutation; permutations() yields in lexicographic order."""
    n = costs.shape[0]
    rows = np.arange(n)
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        total = costs[rows, perm].sum()
        if best is None or total < best:
            best, best_perm = total, perm
    return best, tuple(enumerate(best_perm))


@pytest.mark.parametrize("n", range(2, 8))
def test_square_matches_permutation_oracle(n):
    for seed in range(100):
        # small integer range: plenty of tied optima
        costs = np.random.default_rng([n, seed]).integers(0, 4, size=(n, n)).astype(float)
        best, pairs = _first_optimal_permutation(costs)
        a = hungarian(CostMatrix(costs))
        assert a.total_cost == best
        assert a.pairs == pairs


def test_random_six_by_six_real_costs():
    costs = np.random.default_rng(6).normal(size=(6, 6))
    assert hungarian(CostMatrix(costs)).total_cost == pytest.approx(_brute_force(costs))


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (6, 2), (1, 4)])
def test_rectangular_matrices(shape):
    costs = np.random.default_rng(sum(shape)).normal(size=shape)
    a = hungarian(CostMatrix(costs))
    assert len(a.pairs) == min(shape)
    assert len({q for q, _ in a.pairs}) == len({t for _, t in a.pairs}) == min(shape)
    assert a.total_cost == pytest.approx(_brute_force(costs))


def test_ties_resolve_to_lexicographically_smallest_pairs():
    a = hungarian(CostMatrix(np.zeros((3, 3))))
    assert a.pairs == ((0, 0), (1, 1), (2, 2))
    b = hungarian(CostMatrix(np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])))
    assert b.pairs == ((0, 0), (1, 1))


def test_is_deterministic():
    costs = np.random.default_rng(3).integers(0, 3, size=(6, 6)).astype(float)
    assert hungarian(CostMatrix(costs)) == hungarian(CostMatrix(costs.copy()))


def test_empty_and_non_finite_matrices_are_rejected():
    with pytest.raises(EmptyMatrixError):
        CostMatrix(np.zeros((0, 3)))
    with pytest.raises(NonFiniteError):
        CostMatrix(np.array([[0.0, np.inf]]))


def test_dice_edge_cases():
    m = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert dice(m, m) == 1.0
    assert dice(m, 1.0 - m) == 0.0
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_perfect_query_has_cost_minus_one():
    region = np.zeros((4, 4), dtype=bool)
    region[:2] = True
    probs = np.array([[0.0, 1.0, 0.0], [1 / 3, 1 / 3, 1 / 3]])
    masks = np.stack([region.astype(float), np.full((4, 4), 0.5)])
    c = matching_cost(probs, masks, [(1, region)])
    assert c.costs[0, 0] == pytest.approx(-1.0)
    assert c.costs[0, 0] == c.costs[:, 0].min()


@pytest.mark.parametrize("K", [2, 5])
def test_uniform_probs_disjoint_masks(K):
    region = np.zeros((4, 4), dtype=bool)
    region[:, :2] = True
    mask = (~region).astype(float)
    c = matching_cost(np.full((1, K), 1.0 / K), mask[None], [(0, region)])
    assert c.costs[0, 0] == pytest.approx(1.0 - 1.0 / K)


def test_matching_cost_matches_scalar_oracle(rng):
    probs = rng.dirichlet(np.ones(4), size=3)
    masks = rng.random((3, 5, 5))
    segments = [(0, rng.random((5, 5)) > 0.5), (3, rng.random((5, 5)) > 0.3)]
    c = matching_cost(probs, masks, segments, w_class=2.0, w_dice=0.5)
    for q in range(3):
        for t, (cls, region) in enumerate(segments):
            inter = sum(masks[q, i, j] * region[i, j] for i in range(5) for j in range(5))
            total = masks[q].sum() + region.sum()
            expected = -2.0 * probs[q, cls] + 0.5 * (1 - 2 * inter / total)
            assert c.costs[q, t] == pytest.approx(expected)


def test_matching_cost_validates_inputs():
    region = np.ones((2, 2), dtype=bool)
    with pytest.raises(ValidationError):
        matching_cost(np.array([[0.6, 0.6]]), np.ones((1, 2, 2)), [(0, region)])
    with pytest.raises(ShapeError):
        matching_cost(np.array([[0.5, 0.5]]), np.ones((2, 2, 2)), [(0, region)])
    with pytest.raises(EmptyMatrixError):
        matching_cost(np.array([[0.5, 0.5]]), np.ones((1, 2, 2)), [])


def test_segments_from_mask_skips_ignore():
    mask = np.array([[0, 2], [255, 2]])
    segs = segments_from_mask(mask, 255)
    assert [c for c, _ in segs] == [0, 2]
    assert segs[1][1].sum() == 2
