import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condinst.evalbench import (
    IOU_THRESHOLDS,
    PQAccumulator,
    bench_mask_head,
    evaluate_ap,
    evaluate_pq,
    interpolated_ap,
    mask_iou,
)
from condinst.inference import PanopticMap, Segment
from condinst.model import CondInst, ModelConfig


def box_mask(y0, y1, x0, x1, size=16):
    m = np.zeros((size, size), bool)
    m[y0:y1, x0:x1] = True
    return m


def prefix_ap_oracle(preds, gts, thr):
    """Single class, single image.  Recount TP from scratch for every prefix of the ranking,
    then take max precision over prefixes whose recall clears each of the 101 recall points."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    pr = []
    for k in range(1, len(order) + 1):
        used, tp = set(), 0
        for i in order[:k]:
            # equal IoUs go to the later ground truth, as in the COCO matcher
            cands = [(mask_iou(preds[i][1], g), gi) for gi, g in enumerate(gts) if gi not in used]
            cands = [c for c in cands if c[0] >= thr]
            if cands:
                used.add(max(cands)[1])
                tp += 1
        pr.append((tp / len(gts), tp / k))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        ok = [p for rec, p in pr if rec >= r - 1e-12]
        total += max(ok) if ok else 0.0
    return total / 101


# mask IoU


def test_mask_iou_examples():
    a = box_mask(0, 4, 0, 4)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, box_mask(8, 12, 8, 12)) == 0.0
    assert mask_iou(box_mask(0, 4, 0, 4), box_mask(0, 4, 2, 6)) == pytest.approx(1 / 3)
    z = np.zeros((4, 4), bool)
    assert mask_iou(z, z, return_flag=True) == (1.0, True)
    assert mask_iou(a, a, return_flag=True) == (1.0, False)
    with pytest.raises(ValueError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))


# AP


def test_ap_perfect_and_empty():
    gts = [[(1, box_mask(0, 4, 0, 4)), (2, box_mask(6, 10, 6, 10))]]
    preds = [[(c, 0.9, m) for c, m in gts[0]]]
    rep = evaluate_ap(preds, gts)
    assert rep.AP == pytest.approx(1.0) and rep.AP50 == 1.0 and rep.AP75 == 1.0
    assert evaluate_ap([[]], gts).AP == 0.0


def test_ap_three_predictions_two_gts_hand_curve():
    a, b = box_mask(0, 4, 0, 4), box_mask(8, 12, 8, 12)
    gts = [[(1, a), (1, b)]]
    preds = [[(1, 0.9, a), (1, 0.8, box_mask(0, 2, 12, 14)), (1, 0.7, b)]]
    # PR points (1/2, 1), (1/2, 1/2), (1, 2/3): 51 recall points at 1, 50 at 2/3
    expected = (51 * 1.0 + 50 * 2 / 3) / 101
    rep = evaluate_ap(preds, gts)
    assert rep.AP == pytest.approx(expected, abs=1e-12)
    assert rep.AP50 == pytest.approx(expected, abs=1e-12)


def test_interpolated_ap_basic():
    assert interpolated_ap(np.array([1.0]), 1) == 1.0
    assert np.isnan(interpolated_ap(np.array([]), 0))
    assert interpolated_ap(np.array([0.0, 1.0]), 1) == pytest.approx(0.5)


def random_fixture(rng, n_pred, n_gt, size=12):
    gts = []
    for _ in range(n_gt):
        y, x = rng.integers(0, size - 4, 2)
        gts.append(box_mask(y, y + int(rng.integers(2, 5)), x, x + int(rng.integers(2, 5)), size))
    preds = []
    for _ in range(n_pred):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))].copy()
            g = np.roll(g, int(rng.integers(-1, 2)), axis=int(rng.integers(2)))
        else:
            y, x = rng.integers(0, size - 4, 2)
            g = box_mask(y, y + 3, x, x + 3, size)
        preds.append((float(rng.random()), g))
    return preds, gts


def test_ap_matches_prefix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        preds, gts = random_fixture(rng, int(rng.integers(0, 5)), int(rng.integers(1, 4)))
        rep = evaluate_ap([[(1, s, m) for s, m in preds]], [[(1, g) for g in gts]])
        for t in IOU_THRESHOLDS:
            assert rep.per_threshold[float(t)] == pytest.approx(prefix_ap_oracle(preds, gts, t), abs=1e-12)


def test_ap_invariant_to_input_order_all_permutations():
    rng = np.random.default_rng(1)
    for _ in range(40):
        preds, gts = random_fixture(rng, 4, 3)
        ref = evaluate_ap([[(1, s, m) for s, m in preds]], [[(1, g) for g in gts]]).AP
        for perm in itertools.permutations(range(4)):
            got = evaluate_ap([[(1, *preds[i]) for i in perm]], [[(1, g) for g in gts]]).AP
            assert got == pytest.approx(ref, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ap_report_ordering(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_fixture(rng, int(rng.integers(0, 6)), int(rng.integers(1, 4)))
    rep = evaluate_ap([[(1, s, m) for s, m in preds]], [[(1, g) for g in gts]])
    assert 0.0 <= rep.AP <= rep.AP50 <= 1.0


def test_ap_ignores_classes_without_gt():
    a = box_mask(0, 4, 0, 4)
    rep = evaluate_ap([[(1, 0.9, a), (2, 0.8, a)]], [[(1, a)]])
    assert rep.AP == 1.0 and set(rep.per_class) == {1}


def test_ap_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        evaluate_ap([[]], [])


# PQ


def pmap(ids, table):
    ids = np.asarray(ids, dtype=np.int32)
    segs = {k: Segment(c, i, int((ids == k).sum())) for k, (c, i) in table.items()}
    return PanopticMap(ids, segs)


def test_pq_identity():
    ids = np.array([[1, 1, 2], [1, 2, 2], [3, 3, 3]])
    table = {1: (1, 0), 2: (1, 1), 3: (4, None)}
    rep = evaluate_pq(pmap(ids, table), pmap(ids, table))
    assert rep.PQ == rep.SQ == rep.RQ == 1.0


def test_pq_single_segment_iou_06():
    gt = np.zeros((1, 5), int)
    gt[0, :] = 1
    pred = np.zeros((1, 5), int)
    pred[0, :3] = 1  # 3 of 5 pixels, the rest void
    rep = evaluate_pq(pmap(pred, {1: (1, 0)}), pmap(gt, {1: (1, 0)}))
    assert rep.PQ == pytest.approx(0.6) and rep.SQ == pytest.approx(0.6) and rep.RQ == 1.0


def test_pq_spurious_segment():
    gt = np.array([[1, 1, 2, 2], [1, 1, 2, 2]])
    pred = np.array([[1, 1, 2, 2], [1, 1, 2, 3]])
    # category 2 is stuff in both; pred adds a one-pixel thing of category 1 inside it
    gt_t = {1: (1, 0), 2: (2, None)}
    pred_t = {1: (1, 0), 2: (2, None), 3: (1, 1)}
    pred[1, 3] = 3
    rep = evaluate_pq(pmap(pred, pred_t), pmap(gt, gt_t))
    c1 = rep.per_class[1]
    assert (c1["tp"], c1["fp"], c1["fn"]) == (1, 1, 0)
    assert c1["pq"] == pytest.approx(2 / 3)


def test_pq_ignores_predictions_on_void():
    gt = np.array([[1, 1, 0, 0]])
    pred = np.array([[1, 1, 2, 2]])
    rep = evaluate_pq(pmap(pred, {1: (1, 0), 2: (1, 1)}), pmap(gt, {1: (1, 0), 0: (0, None)}))
    assert rep.per_class[1]["fp"] == 0 and rep.PQ == 1.0


def test_pq_rejects_size_mismatch():
    with pytest.raises(ValueError):
        PQAccumulator().update(pmap(np.zeros((2, 2)), {}), pmap(np.zeros((2, 3)), {}))


def random_panoptic(rng, size=8, n=4):
    ids = rng.integers(1, n + 1, size=(size, size))
    table = {k: (int(rng.integers(1, 3)), k) if k <= 2 else (3 + k, None) for k in range(1, n + 1)}
    return ids, table


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pq_identity_and_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    gi, gt_t = random_panoptic(rng)
    pi = gi.copy()
    flip = rng.random(gi.shape) < 0.3
    pi[flip] = rng.integers(1, 5, size=flip.sum())
    rep = evaluate_pq(pmap(pi, gt_t), pmap(gi, gt_t))
    for c, v in rep.per_class.items():
        if v["rq"] > 0:
            assert v["pq"] == pytest.approx(v["sq"] * v["rq"], abs=1e-9)
    perm = {k: v for k, v in zip(range(1, 5), rng.permutation(np.arange(10, 14)))}
    pi2 = np.vectorize(perm.get)(pi)
    rep2 = evaluate_pq(pmap(pi2, {perm[k]: v for k, v in gt_t.items()}), pmap(gi, gt_t))
    assert rep2.PQ == pytest.approx(rep.PQ, abs=1e-12)
    assert 0.0 <= rep.PQ <= 1.0


# timing


@pytest.fixture(scope="module")
def timings():
    return {d: bench_mask_head(CondInst(ModelConfig(mask_head_depth=d), seed=0), k_values=(0, 1, 10, 100),
                               repeats=15) for d in (1, 4)}


def test_bench_report_shape(timings):
    rep = timings[4]
    assert [r.k for r in rep.rows] == [0, 1, 10, 100]
    assert rep.median(0) == 0.0
    for r in rep.rows[1:]:
        assert 0 < r.p10_ms <= r.median_ms <= r.p90_ms and r.inner >= 1
    assert 0 < rep.mask_share < 1
    # upsampling and sigmoid count toward the total, not the mask-head rows
    assert rep.total_inference_ms > rep.detector_ms + rep.median(100)
    assert rep.ratio(100, 1) <= 150


def test_bench_depth_ordering(timings):
    assert timings[1].median(100) < timings[4].median(100)


def test_bench_monotone_in_k(timings):
    # non-decreasing in expectation: each median stays below the next K's upper spread
    for rep in timings.values():
        rows = {r.k: r for r in rep.rows}
        assert rows[1].median_ms <= rows[10].p90_ms and rows[10].median_ms <= rows[100].p90_ms
        assert rows[1].median_ms < rows[100].median_ms
