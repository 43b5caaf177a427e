import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hedfsod.assignment import CostWeights, cost_matrix, hungarian, matching_cost
from hedfsod.geometry import Box

from oracles import brute_force_assignment, exact_giou


def test_single_entry():
    assert hungarian([[3.0]]).pairs == [(0, 0)]


def test_two_by_two():
    m = hungarian([[1, 2], [2, 1]])
    assert sorted(m.pairs) == [(0, 0), (1, 1)]
    assert m.total(np.array([[1, 2], [2, 1]])) == 2


def test_rectangular_more_predictions():
    c = np.array([[5, 9], [1, 8], [4, 2]], dtype=float)
    m = hungarian(c)
    assert sorted(m.pairs) == [(1, 0), (2, 1)]
    assert m.total(c) == 3
    assert m.unmatched == [0]


def test_rectangular_more_targets():
    c = np.array([[4, 1, 3]], dtype=float)
    m = hungarian(c)
    assert m.pairs == [(0, 1)]
    assert m.unmatched == []


def test_empty_and_invalid():
    assert hungarian(np.zeros((3, 0))).unmatched == [0, 1, 2]
    assert hungarian(np.zeros((0, 2))).pairs == []
    with pytest.raises(ValueError):
        hungarian([[1.0, np.nan]])
    with pytest.raises(ValueError):
        hungarian([[np.inf]])
    with pytest.raises(ValueError):
        hungarian([1.0, 2.0])


def test_tie_break_prefers_lowest_prediction_index():
    # every prediction is equally good for the single target
    assert hungarian(np.ones((4, 1))).pairs == [(0, 0)]
    # all-equal square: identity pairing
    assert hungarian(np.zeros((3, 3))).pairs == [(0, 0), (1, 1), (2, 2)]


def test_brute_force_agreement_random():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, m = rng.integers(1, 7, size=2)
        c = rng.integers(0, 5, size=(n, m)).astype(float)  # small ints force ties
        res = hungarian(c)
        assert res.total(c) == brute_force_assignment(c)
        assert len(res.pairs) == min(n, m)
        assert len({p for p, _ in res.pairs}) == len(res.pairs)
        assert len({t for _, t in res.pairs}) == len(res.pairs)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-10, 10)),
    st.floats(-5, 5),
    st.data(),
)
def test_row_shift_keeps_optimal_pairing(c, shift, data):
    # shifting a line that is always matched (a row when rows <= cols, else a column)
    # moves every feasible total by the same amount
    base = hungarian(c)
    shifted = c.copy()
    if c.shape[0] <= c.shape[1]:
        shifted[data.draw(st.integers(0, c.shape[0] - 1))] += shift
    else:
        shifted[:, data.draw(st.integers(0, c.shape[1] - 1))] += shift
    again = hungarian(shifted)
    assert base.total(shifted) == pytest.approx(again.total(shifted), abs=1e-9)


def test_deterministic():
    c = np.random.default_rng(5).random((6, 4))
    assert hungarian(c) == hungarian(c.copy())


def test_matching_cost_examples():
    b = Box(0.5, 0.5, 0.2, 0.2)
    assert matching_cost(1.0, b, b) == 0.0
    assert matching_cost(0.5, b, b) == pytest.approx(1.0, abs=1e-12)
    p = Box.from_corners(0, 0, 1, 1, scale=4)
    g = Box.from_corners(2, 2, 3, 3, scale=4)
    l1 = sum(abs(x - y) for x, y in zip(p.as_tuple(), g.as_tuple()))
    expected = 5 * l1 + 2 * (1 - float(exact_giou((0, 0, 1, 1), (2, 2, 3, 3))))
    assert expected == pytest.approx(5 * l1 + 2 * (1 + 7 / 9))
    assert matching_cost(1.0, p, g) == pytest.approx(expected, abs=1e-12)


def test_cost_matrix_agrees_with_scalar_cost():
    rng = np.random.default_rng(2)
    n, m, c = 5, 3, 4
    probs = torch.tensor(rng.random((n, c)))
    boxes = torch.tensor(np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))]))
    labels = torch.tensor(rng.integers(0, c, m))
    gt = torch.tensor(np.column_stack([rng.uniform(0.2, 0.8, (m, 2)), rng.uniform(0.05, 0.3, (m, 2))]))
    w = CostWeights()
    mat = cost_matrix(probs, boxes, labels, gt, w)
    for i in range(n):
        for j in range(m):
            ref = matching_cost(float(probs[i, labels[j]]), Box(*boxes[i].tolist()), Box(*gt[j].tolist()), w)
            assert mat[i, j] == pytest.approx(ref, abs=1e-9)
