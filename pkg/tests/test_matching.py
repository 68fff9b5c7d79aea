import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from matis.errors import DimensionMismatch, EmptyMatrix
from matis.matching import MatchWeights, assignment_cost, cost_matrix, hungarian, pair_cost, set_criterion
from matis.model import make_targets, stage_loss
from matis.structures import FrameAnnotation, ProposalSet

from conftest import random_proposals


def brute_force(cost):
    """Minimum over every injective map of the smaller side into the larger one."""
    rows, cols = cost.shape
    if cols <= rows:
        perms = np.array(list(itertools.permutations(range(rows), cols)))
        totals = cost[perms, np.arange(cols)].sum(1)
    else:
        perms = np.array(list(itertools.permutations(range(cols), rows)))
        totals = cost[np.arange(rows), perms].sum(1)
    return totals.min()


def test_identity_favoring():
    a = hungarian([[0, 9], [9, 0]])
    assert a == {0: 0, 1: 1}
    assert assignment_cost([[0, 9], [9, 0]], a) == 0


def test_one_by_one():
    assert hungarian([[5]]) == {0: 0}
    assert assignment_cost([[5]], {0: 0}) == 5


def test_no_columns_is_empty_assignment():
    assert hungarian(np.zeros((3, 0))) == {}


def test_no_rows_is_an_error():
    with pytest.raises(EmptyMatrix):
        hungarian(np.zeros((0, 2)))


def test_ties_prefer_lower_rows():
    assert hungarian(np.zeros((4, 2))) == {0: 0, 1: 1}


def test_random_7x7_matches_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(20):
        c = rng.normal(size=(7, 7))
        a = hungarian(c)
        assert sorted(a) == list(range(7))
        assert len(set(a.values())) == 7
        assert math.isclose(assignment_cost(c, a), brute_force(c), rel_tol=0, abs_tol=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**32 - 1), st.booleans())
def test_rectangular_matches_enumeration(rows, cols, seed, integer):
    rng = np.random.default_rng(seed)
    c = rng.integers(-5, 6, size=(rows, cols)).astype(float) if integer else rng.uniform(-3, 3, size=(rows, cols))
    a = hungarian(c)
    assert len(a) == min(rows, cols)
    assert len(set(a.values())) == len(a)
    assert math.isclose(assignment_cost(c, a), brute_force(c), rel_tol=0, abs_tol=1e-9)


def _proposal(p_c, soft, num_classes=3, cls=1):
    probs = np.full(num_classes + 1, (1 - p_c) / num_classes)
    probs[cls] = p_c
    return ProposalSet("f", probs[None], np.asarray(soft, float)[None])[0]


def test_pair_cost_perfect_proposal():
    gt = np.array([[1, 0], [0, 1]], bool)
    w = MatchWeights(2, 5, 5)
    assert pair_cost(_proposal(1.0, gt.astype(float)), (1, gt), w) == pytest.approx(-2.0, abs=1e-15)


def test_pair_cost_hand_computed():
    gt = np.array([[1, 0], [0, 1]], bool)
    soft = [[0.8, 0.2], [0.2, 0.8]]
    # BCE: every pixel contributes -log(0.8); Dice: 1 - (2*1.6 + 1) / (2 + 2 + 1) = 0.16
    expected = -0.5 + (-math.log(0.8)) + 0.16
    got = pair_cost(_proposal(0.5, soft), (1, gt), MatchWeights(1, 1, 1))
    assert got == pytest.approx(expected, abs=1e-12)


def test_pair_cost_worst_case():
    gt = np.array([[1, 0], [0, 1]], bool)
    w = MatchWeights(1, 1, 1)
    worst = pair_cost(_proposal(0.0, (~gt).astype(float)), (1, gt), w)
    rng = np.random.default_rng(0)
    for _ in range(50):
        other = pair_cost(_proposal(rng.uniform(), rng.uniform(size=(2, 2))), (1, gt), w)
        assert other <= worst


def test_pair_cost_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        pair_cost(_proposal(0.5, np.zeros((2, 2))), (1, np.zeros((3, 3), bool)))


def test_pair_cost_monotone():
    rng = np.random.default_rng(11)
    gt = rng.random((5, 5)) < 0.5
    w = MatchWeights()
    for _ in range(50):
        soft = rng.uniform(0.01, 0.99, size=(5, 5))
        lo, hi = sorted(rng.uniform(0, 1, 2))
        assert pair_cost(_proposal(hi, soft), (1, gt), w) < pair_cost(_proposal(lo, soft), (1, gt), w)
        closer = soft + rng.uniform(0, 1, size=soft.shape) * (gt - soft)
        assert pair_cost(_proposal(0.5, closer), (1, gt), w) <= pair_cost(_proposal(0.5, soft), (1, gt), w) + 1e-12


def test_cost_matrix_agrees_with_pair_cost(rng):
    props = random_proposals(rng, n=6, num_classes=3, h=5, w=4)
    gt = FrameAnnotation("f", [(1, rng.random((5, 4)) < 0.5), (3, rng.random((5, 4)) < 0.5)])
    m = cost_matrix(props, gt)
    for i in range(props.n):
        for j, inst in enumerate(gt.instances):
            assert m[i, j] == pytest.approx(pair_cost(props[i], inst), abs=1e-12)


def test_criterion_without_instances_is_pure_no_object():
    rng = np.random.default_rng(2)
    props = random_proposals(rng, n=5, num_classes=3, h=4, w=4)
    gt = FrameAnnotation("f", [], dims=(4, 4))
    w = MatchWeights()
    loss, assign = set_criterion(props, gt, w)
    assert assign == {}
    expected = w.w_cls * np.mean(-np.log(props.class_probs[:, 0]))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_criterion_vanishes_for_confident_perfect_proposals():
    rng = np.random.default_rng(5)
    masks = [rng.random((6, 6)) < 0.5 for _ in range(2)]
    gt = FrameAnnotation("f", [(1, masks[0]), (2, masks[1])])
    losses = []
    for eps in (1e-2, 1e-4, 1e-6):
        probs = np.full((4, 4), eps / 3)
        probs[0] = [eps / 3, 1 - eps, eps / 3, eps / 3]
        probs[1] = [eps / 3, eps / 3, 1 - eps, eps / 3]
        probs[2:, 0] = 1 - eps
        soft = np.stack([np.where(masks[0], 1 - eps, eps), np.where(masks[1], 1 - eps, eps), np.full((6, 6), 0.5), np.full((6, 6), 0.5)])
        loss, assign = set_criterion(ProposalSet("f", probs, soft), gt)
        assert assign == {0: 0, 1: 1}
        losses.append(loss)
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-4


def test_criterion_assignment_matches_brute_force():
    rng = np.random.default_rng(8)
    for trial in range(10):
        props = random_proposals(rng, n=3, num_classes=3, h=8, w=8)
        gt = FrameAnnotation("f", [(int(rng.integers(1, 4)), rng.random((8, 8)) < 0.4) for _ in range(2)])
        _, assign = set_criterion(props, gt)
        m = cost_matrix(props, gt)
        best = min(itertools.permutations(range(3), 2), key=lambda p: m[p[0], 0] + m[p[1], 1])
        assert (assign[0], assign[1]) == best


def test_criterion_permutation_equivariant():
    rng = np.random.default_rng(9)
    for _ in range(20):
        props = random_proposals(rng, n=7, num_classes=4, h=6, w=6)
        gt = FrameAnnotation("f", [(int(rng.integers(1, 5)), rng.random((6, 6)) < 0.5) for _ in range(3)])
        loss, assign = set_criterion(props, gt)
        perm = rng.permutation(props.n)
        loss_p, assign_p = set_criterion(props.permuted(perm), gt)
        assert loss_p == loss
        assert {g: int(perm[r]) for g, r in assign_p.items()} == assign
        assert loss >= 0


def test_torch_criterion_agrees_with_reference():
    rng = np.random.default_rng(10)
    for _ in range(5):
        n, k, h, w = 6, 4, 5, 5
        logits = torch.tensor(rng.normal(size=(1, n, k + 1)))
        mlog = torch.tensor(rng.normal(size=(1, n, h * w)))
        gt = FrameAnnotation("f", [(int(rng.integers(1, k + 1)), rng.random((h, w)) < 0.5) for _ in range(2)])
        loss_t, idx = stage_loss(logits, mlog, make_targets([gt], torch.float64), MatchWeights())
        props = ProposalSet("f", torch.softmax(logits[0], -1).numpy(), torch.sigmoid(mlog[0]).numpy().reshape(n, h, w))
        loss_r, assign = set_criterion(props, gt)
        assert float(loss_t) == pytest.approx(loss_r, rel=1e-10)
        src, gts = idx[0]
        assert dict(zip(gts, src)) == assign
