import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matis.errors import FrameIdMismatch
from matis.inference import InferenceConfig
from matis.metrics import EvalReport, evaluate, fold_summary, format_table, frame_class_ious, oracle_relabel, upper_bound
from matis.structures import FrameAnnotation, ProposalSet


def rows(r0, r1, c0=0, c1=8):
    m = np.zeros((8, 8), bool)
    m[r0:r1, c0:c1] = True
    return m


def two_frame_case():
    gt1 = FrameAnnotation("a", [(1, rows(0, 2)), (2, rows(6, 8, 0, 4))])
    pred1 = [(1, rows(0, 4), 0.9), (2, rows(4, 8), 0.8), (3, rows(2, 3), 0.4)]
    gt2 = FrameAnnotation("b", [(1, rows(3, 5)), (2, rows(7, 8))])
    pred2 = [(1, rows(3, 5), 0.9)]
    return {"a": pred1, "b": pred2}, [gt1, gt2]


def test_frame_class_ious_hand_built():
    preds, gts = two_frame_case()
    # class 1: 16 / 32 pixels; class 2: 8 / 32 pixels; class 3 predicted only
    assert frame_class_ious(preds["a"][:2], gts[0]) == {1: 0.5, 2: 0.25}
    assert frame_class_ious(preds["a"], gts[0]) == {1: 0.5, 2: 0.25, 3: 0.0}


def test_perfect_and_missing_predictions():
    gt = FrameAnnotation("a", [(1, rows(0, 2)), (2, rows(5, 6))])
    assert frame_class_ious(gt.instances, gt) == {1: 1.0, 2: 1.0}
    assert frame_class_ious([(1, rows(0, 2))], gt) == {1: 1.0, 2: 0.0}


def test_evaluate_hand_arithmetic():
    preds, gts = two_frame_case()
    rep = evaluate(preds, gts, num_classes=4)
    # frame a: mIoU (.5 + .25)/2, IoU (.5 + .25 + 0)/3; frame b: (1 + 0)/2 for both
    assert rep.miou == (0.375 + 0.5) / 2
    assert rep.iou == (0.25 + 0.5) / 2
    assert rep.per_class == [0.75, 0.125, 0.0, None]
    assert rep.mciou == pytest.approx((0.75 + 0.125 + 0.0) / 3, abs=1e-15)


def test_evaluate_identity_and_empty():
    _, gts = two_frame_case()
    perfect = evaluate({g.frame: g.instances for g in gts}, gts)
    assert (perfect.miou, perfect.iou, perfect.mciou) == (1.0, 1.0, 1.0)
    nothing = evaluate({g.frame: [] for g in gts}, gts)
    assert (nothing.miou, nothing.iou, nothing.mciou) == (0.0, 0.0, 0.0)


def test_frame_id_mismatch():
    _, gts = two_frame_case()
    with pytest.raises(FrameIdMismatch):
        evaluate({"a": []}, gts)


def test_empty_frames_are_skipped():
    gt = FrameAnnotation("e", [], dims=(8, 8))
    gt2 = FrameAnnotation("x", [(1, rows(0, 2))])
    rep = evaluate({"e": [], "x": [(1, rows(0, 2))]}, [gt, gt2])
    assert rep.miou == rep.iou == 1.0


def random_frame(rng, fid, num_classes=4):
    inst = []
    for _ in range(rng.integers(0, 4)):
        inst.append((int(rng.integers(1, num_classes + 1)), rng.random((6, 6)) < 0.3))
    return FrameAnnotation(fid, inst, dims=(6, 6))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    gts = [random_frame(rng, f"f{i}") for i in range(6)]
    preds = {g.frame: [(int(rng.integers(1, 5)), rng.random((6, 6)) < 0.3) for _ in range(rng.integers(0, 4))] for g in gts}
    rep = evaluate(preds, gts)
    assert rep.iou <= rep.miou
    for v in (rep.miou, rep.iou, rep.mciou, *[p for p in rep.per_class if p is not None]):
        assert 0.0 <= v <= 1.0
    # order invariance: shuffle frames and regions
    perm = rng.permutation(len(gts))
    shuffled = {k: list(reversed(v)) for k, v in reversed(list(preds.items()))}
    rep2 = evaluate(shuffled, [gts[i] for i in perm])
    assert (rep2.miou, rep2.iou, rep2.mciou) == (rep.miou, rep.iou, rep.mciou)
    # same class sets on both sides -> mIoU == IoU
    same = {g.frame: [(c, rng.random((6, 6)) < 0.5) for c in set(g.classes)] for g in gts}
    rep3 = evaluate(same, gts)
    assert rep3.miou == rep3.iou


def _proposals_from(masks, classes, num_classes=3, fid="a"):
    probs = np.full((len(masks), num_classes + 1), 0.05)
    for i, c in enumerate(classes):
        probs[i, c] = 1.0 - 0.05 * num_classes
    return ProposalSet(fid, probs, np.array(masks, float))


def test_upper_bound_perfect_candidates_with_wrong_labels():
    gt = FrameAnnotation("a", [(1, rows(0, 2)), (2, rows(4, 6))])
    # perfect masks, swapped labels
    ps = _proposals_from([rows(0, 2), rows(4, 6), rows(7, 8)], [2, 1, 3])
    cfg = InferenceConfig("all")
    from matis.inference import select

    raw = evaluate({"a": select(ps, cfg)}, [gt])
    assert raw.miou < 1.0
    for source in ("selected", "all"):
        ub = upper_bound(source, [ps], [gt], cfg)
        assert ub.miou == ub.mciou == ub.iou == 1.0


def test_upper_bound_total_dominates_inferred():
    rng = np.random.default_rng(3)
    gts, sets = [], []
    for f in range(10):
        gt = random_frame(rng, f"f{f}", 3)
        gts.append(gt)
        n = 8
        probs = rng.dirichlet(np.ones(4), size=n)
        soft = rng.uniform(size=(n, 6, 6))
        for i, (c, m) in enumerate(gt.instances):
            soft[i] = np.where(m, 0.9, 0.1)
        sets.append(ProposalSet(gt.frame, probs, soft))
    cfg = InferenceConfig("top4")
    inferred = upper_bound("selected", sets, gts, cfg)
    total = upper_bound("all", sets, gts)
    assert total.miou >= inferred.miou
    assert all(f["miou"] == f["iou"] for f in total.per_frame)


def test_oracle_relabel_injective_mode():
    gt = FrameAnnotation("a", [(1, rows(0, 2)), (2, rows(0, 3))])
    cands = [rows(0, 2), rows(6, 8)]
    loose = oracle_relabel(cands, gt)
    strict = oracle_relabel(cands, gt, injective=True)
    assert [r.query for r in loose] == [0, 0]
    assert sorted(r.query for r in strict) == [0]


def test_fold_summary_sample_std():
    reps = [EvalReport(m, m, m, [m]) for m in (0.6, 0.7, 0.8)]
    s = fold_summary(reps)
    assert s.miou == pytest.approx(0.7)
    assert s.stddev == pytest.approx(0.1)


def test_table_layout():
    preds, gts = two_frame_case()
    rep = evaluate(preds, gts, num_classes=4)
    text = format_table([("toy", rep)], ["A", "B", "C", "D"])
    lines = text.splitlines()
    assert lines[0].split() == ["Method", "mIoU", "IoU", "mcIoU", "A", "B", "C", "D"]
    assert lines[2].split() == ["toy", "43.75", "37.50", "29.17", "75.00", "12.50", "0.00", "-"]
