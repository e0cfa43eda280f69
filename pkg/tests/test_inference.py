import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from condinst.inference import (
    VOID,
    BoxAccessCounter,
    Detection,
    InferenceConfig,
    InstanceResult,
    box_nms,
    compute_masks,
    decode_detections,
    decode_rle,
    encode_rle,
    infer_image,
    mask_nms,
    panoptic_from_scene,
    panoptic_merge,
    read_prediction,
    soft_masks,
    write_prediction,
)
from condinst.model import CondInst, HeadOutputs, ModelConfig
from condinst.numerics import DTYPE, avg_pool2, upsample
from condinst.synthdata import DatasetConfig, generate_scene

# oracles


def scalar_box_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def scalar_mask_iou(a, b):
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 1.0


def greedy_oracle(items, iou_fn, thr, cap=100):
    """Plain list-based greedy suppression: best remaining first, drop same-class overlaps."""
    remaining = sorted(range(len(items)), key=lambda i: (-items[i][0], i))
    kept = []
    while remaining and len(kept) < cap:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [j for j in remaining
                     if not (items[j][1] == items[best][1] and iou_fn(items[best][2], items[j][2]) > thr)]
    return kept


def det(cls, score, box=None):
    return Detection(cls, score, "P3", (0, 0), (0.0, 0.0), torch.zeros(3), box)


def result(cls, score, mask):
    return InstanceResult(cls, score, np.asarray(mask, dtype=np.float64))


def heads_fixture(cls_logit=-40.0, ctr_logit=-40.0, n=5, size=4, num_classes=2):
    cls = torch.full((1, num_classes, size, size), cls_logit, dtype=DTYPE)
    ctr = torch.full((1, 1, size, size), ctr_logit, dtype=DTYPE)
    box = torch.ones((1, 4, size, size), dtype=DTYPE)
    ctrl = torch.arange(n * size * size, dtype=DTYPE).reshape(1, n, size, size)
    return {"P3": HeadOutputs(cls, ctr, box, ctrl)}


# decode


def test_decode_all_negative_is_empty():
    assert decode_detections(heads_fixture()) == []


def test_decode_score_box_and_theta():
    heads = heads_fixture()
    h = heads["P3"]
    logit = math.log(0.81 / 0.19)
    h.cls_logits[0, 1, 2, 1] = logit
    h.ctr_logits[0, 0, 2, 1] = 40.0
    h.box_reg[0, :, 2, 1] = 4.0
    dets = decode_detections(heads)
    assert len(dets) == 1
    d = dets[0]
    assert d.score == pytest.approx(math.sqrt(0.81 * 1.0), abs=1e-12)
    assert d.class_id == 2 and d.point == (12.0, 20.0) and d.cell == (1, 2)
    assert d.box == pytest.approx((8, 16, 16, 24))
    assert torch.equal(d.theta, h.controller[0, :, 2, 1])


def test_decode_threshold_is_strict_and_topk_bounds():
    heads = heads_fixture(cls_logit=40.0, ctr_logit=40.0, size=8)
    dets = decode_detections(heads, pre_nms_topk=10)
    assert len(dets) == 10
    assert all(0.0 <= d.score <= 1.0 for d in dets)
    assert decode_detections(heads, score_threshold=1.0) == []


# box NMS


def test_box_nms_examples():
    # same class, nested boxes with IoU 0.7
    a, b = (0.0, 0.0, 10.0, 1.0), (0.0, 0.0, 7.0, 1.0)
    assert scalar_box_iou(a, b) == pytest.approx(0.7)
    kept = box_nms([det(1, 0.9, a), det(1, 0.8, b)])
    assert [d.score for d in kept] == [0.9]
    kept = box_nms([det(1, 0.9, a), det(2, 0.8, a)])
    assert len(kept) == 2


def test_box_nms_caps_at_100():
    dets = [det(1, 0.5 + i / 1000, (i * 10.0, 0.0, i * 10.0 + 5, 5.0)) for i in range(150)]
    kept = box_nms(dets)
    assert len(kept) == 100
    assert min(d.score for d in kept) == pytest.approx(0.5 + 50 / 1000)


def test_box_nms_matches_oracle_500_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(0, 14))
        xy = rng.uniform(0, 20, size=(n, 2))
        wh = rng.uniform(1, 12, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], 1)
        scores = rng.choice([0.2, 0.4, 0.6, 0.8], size=n) if rng.random() < 0.3 else rng.random(n)
        classes = rng.integers(1, 3, size=n)
        dets = [det(int(c), float(s), tuple(b)) for c, s, b in zip(classes, scores, boxes)]
        cap = int(rng.integers(1, 12))
        got = box_nms(dets, 0.6, cap)
        want = greedy_oracle([(d.score, d.class_id, d._box) for d in dets], scalar_box_iou, 0.6, cap)
        assert [id(d) for d in got] == [id(dets[i]) for i in want]


# mask NMS


def test_mask_nms_examples():
    m = np.zeros((6, 6))
    m[1:4, 1:4] = 1
    assert len(mask_nms([result(1, 0.9, m), result(1, 0.8, m)])) == 1
    other = np.zeros((6, 6))
    other[4:, 4:] = 1
    assert len(mask_nms([result(1, 0.9, m), result(1, 0.8, other)])) == 2


def test_mask_nms_matches_oracle_500_fixtures():
    rng = np.random.default_rng(1)
    for k in range(500):
        n = 10 if k == 0 else int(rng.integers(0, 12))
        masks = []
        for _ in range(n):
            m = np.zeros((12, 12))
            y, x = rng.integers(0, 9, size=2)
            hh, ww = rng.integers(1, 6, size=2)
            m[y:y + hh, x:x + ww] = rng.uniform(0.5, 1.0)
            masks.append(m)
        res = [result(int(rng.integers(1, 3)), float(rng.random()), m) for m in masks]
        got = mask_nms(res, 0.6)
        want = greedy_oracle([(r.score, r.class_id, r.binary) for r in res], scalar_mask_iou, 0.6)
        assert [id(r) for r in got] == [id(res[i]) for i in want]


# mask computation


@pytest.fixture(scope="module")
def model_and_out():
    model = CondInst(ModelConfig(), seed=3)
    img = torch.from_numpy(np.random.default_rng(0).random((1, 3, 64, 64)))
    with torch.no_grad():
        out = model(img)
    return model, out


def test_compute_masks_empty(model_and_out):
    model, out = model_and_out
    assert compute_masks(model, [], out.bottom, (64, 64)) == []


def test_compute_masks_batched_equals_sequential(model_and_out):
    model, out = model_and_out
    dets = decode_detections(out.heads, score_threshold=0.0)[:7]
    for d in dets:
        d.theta = d.theta + 0.3 * torch.randn_like(d.theta)
    batched = compute_masks(model, dets, out.bottom, (64, 64))
    for d, r in zip(dets, batched):
        single = compute_masks(model, [d], out.bottom, (64, 64))[0]
        assert np.abs(single.soft - r.soft).max() < 1e-6
        assert r.soft.shape == (64, 64)
        assert np.array_equal(r.binary, r.soft >= 0.5) and r.area == r.binary.sum()


def test_compute_masks_flags_empty(model_and_out):
    model, out = model_and_out
    d = decode_detections(out.heads, score_threshold=0.0)[0]
    theta = torch.zeros_like(d.theta)
    theta[-1] = -50.0  # final bias drives every pixel to background
    d.theta = theta
    r = compute_masks(model, [d], out.bottom, (64, 64))[0]
    assert r.area == 0 and "empty_mask" in r.flags


def test_upsample_factor_resampling_consistency():
    m1 = CondInst(ModelConfig(upsample_factor=1), seed=4)
    m2 = CondInst(ModelConfig(upsample_factor=2), seed=4)
    m2.load_state_dict(m1.state_dict())
    # smooth bottom features: linear ramps
    yy, xx = torch.meshgrid(torch.linspace(-1, 1, 8, dtype=DTYPE), torch.linspace(-1, 1, 8, dtype=DTYPE),
                            indexing="ij")
    c = m1.cfg.c_bottom
    bottom = torch.stack([0.3 * xx * (i % 3 - 1) + 0.2 * yy * ((i + 1) % 3 - 1) for i in range(c)])[None]
    dets = [Detection(1, 0.9, "P4", (1, 1), (24.0, 24.0), 0.2 * torch.randn(m1.cfg.num_filter_params,
                                                                            dtype=DTYPE))]
    with torch.no_grad():
        logits = m1.mask_logits(bottom, torch.zeros(1, dtype=torch.long), torch.tensor([[24.0, 24.0]], dtype=DTYPE),
                                torch.stack([dets[0].theta]), upsampled=False)
        p1 = torch.sigmoid(logits)
        p2 = upsample(p1, 2)
        np.testing.assert_allclose(avg_pool2(p2).numpy(), p1.numpy(), atol=2e-2)
        s1 = soft_masks(m1, dets, bottom, (64, 64))
        s2 = soft_masks(m2, dets, bottom, (64, 64))
    np.testing.assert_allclose(s1.numpy(), s2.numpy(), atol=2e-2)


# panoptic merge


def stuff_semantic(h=8, w=8, n_things=2):
    sem = np.full((h, w), n_things, dtype=np.int64)  # first stuff category
    sem[:, w // 2:] = n_things + 1
    return sem


def check_bookkeeping(pm):
    ids = pm.ids
    assert set(np.unique(ids).tolist()) == set(pm.segments)
    assert sum(s.area for s in pm.segments.values()) == ids.size
    for sid, s in pm.segments.items():
        assert s.area == int((ids == sid).sum())


def test_panoptic_low_score_discarded():
    m = np.zeros((8, 8))
    m[2:5, 2:5] = 1
    sem = stuff_semantic()
    pm = panoptic_merge([result(1, 0.4, m)], sem, 2)
    assert not any(s.isthing for s in pm.segments.values())
    np.testing.assert_array_equal(pm.category_map(), sem + 1)
    check_bookkeeping(pm)


def test_panoptic_no_instances_equals_stuff():
    sem = stuff_semantic()
    pm = panoptic_merge([], sem, 2)
    np.testing.assert_array_equal(pm.category_map(), sem + 1)
    assert VOID not in pm.segments


def test_panoptic_overlap_rule():
    a = np.zeros((8, 8))
    a[0:4, 0:4] = 1
    b = np.zeros((8, 8))
    b[2:6, 0:4] = 1  # half of B lies under A
    pm = panoptic_merge([result(1, 0.9, a), result(2, 0.8, b)], stuff_semantic(), 2)
    things = [s for s in pm.segments.values() if s.isthing]
    assert len(things) == 1 and things[0].category == 1 and things[0].area == 16
    # 25% loss survives and keeps only its unclaimed pixels
    c = np.zeros((8, 8))
    c[3:7, 0:4] = 1
    pm = panoptic_merge([result(1, 0.9, a), result(2, 0.8, c)], stuff_semantic(), 2)
    things = sorted((s for s in pm.segments.values() if s.isthing), key=lambda s: -s.score)
    assert [s.area for s in things] == [16, 12]
    assert (pm.ids[3, 0:4] == [k for k, s in pm.segments.items() if s.category == 1][0]).all()
    check_bookkeeping(pm)


def test_panoptic_higher_score_claims_first_regardless_of_order():
    a = np.zeros((8, 8))
    a[0:4, 0:4] = 1
    c = np.zeros((8, 8))
    c[3:7, 0:4] = 1
    pm = panoptic_merge([result(2, 0.8, c), result(1, 0.9, a)], stuff_semantic(), 2)
    cat = pm.category_map()
    assert (cat[3, 0:4] == 1).all()


def test_panoptic_unclaimed_thing_pixels_are_void():
    sem = stuff_semantic()
    sem[0:2, 0:2] = 0  # semantic says "thing class 1" with no instance there
    pm = panoptic_merge([], sem, 2)
    assert (pm.ids[0:2, 0:2] == VOID).all()
    assert pm.segments[VOID].area == 4
    check_bookkeeping(pm)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 8))
def test_panoptic_property_one_owner_and_areas(seed, n):
    rng = np.random.default_rng(seed)
    insts = []
    for _ in range(n):
        m = np.zeros((16, 16))
        y, x = rng.integers(0, 12, size=2)
        m[y:y + rng.integers(1, 8), x:x + rng.integers(1, 8)] = 1
        insts.append(result(int(rng.integers(1, 3)), float(rng.random()), m))
    sem = rng.integers(0, 4, size=(16, 16))
    pm = panoptic_merge(insts, sem, 2)
    check_bookkeeping(pm)
    for sid, s in pm.segments.items():
        if s.isthing:
            assert s.score >= 0.45
            full = insts[s.instance].binary.sum()
            assert s.area / full >= 0.6 - 1e-12


def test_panoptic_from_scene_roundtrip():
    scene = generate_scene(DatasetConfig(seed=2), 0)
    pm = panoptic_from_scene(scene)
    check_bookkeeping(pm)


# end to end paths


def test_mask_nms_path_never_reads_boxes(model_and_out):
    model, _ = model_and_out
    img = np.random.default_rng(1).random((3, 64, 64))
    BoxAccessCounter.reset()
    pred = infer_image(model, img, InferenceConfig(nms="mask", score_threshold=0.0))
    assert pred.instances and BoxAccessCounter.reads == 0
    assert len(pred.instances) <= 100
    BoxAccessCounter.reset()
    infer_image(model, img, InferenceConfig(nms="box", score_threshold=0.0))
    assert BoxAccessCounter.reads > 0


def test_panoptic_model_produces_map():
    cfg = ModelConfig(semantic_classes=5)
    model = CondInst(cfg, seed=0)
    pred = infer_image(model, np.random.default_rng(2).random((3, 64, 64)),
                       InferenceConfig(score_threshold=0.0), num_thing_classes=3)
    assert pred.panoptic is not None and pred.panoptic.ids.shape == (64, 64)
    check_bookkeeping(pred.panoptic)


def test_inference_config_rejects_unknown_nms():
    with pytest.raises(ValueError):
        InferenceConfig(nms="soft")


# files


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 999))
def test_rle_roundtrip(h, w, seed):
    m = np.random.default_rng(seed).random((h, w)) > 0.5
    counts = encode_rle(m)
    assert sum(counts) == h * w
    assert np.array_equal(decode_rle(counts, (h, w)), m)


def test_rle_starts_with_background_run():
    assert encode_rle(np.array([[1, 1, 0]])) == [0, 2, 1]
    assert encode_rle(np.array([[0, 1, 1]])) == [1, 2]
    with pytest.raises(ValueError):
        decode_rle([1, 2], (2, 2))


def test_write_read_prediction(tmp_path, model_and_out):
    model = CondInst(ModelConfig(semantic_classes=5), seed=0)
    pred = infer_image(model, np.random.default_rng(2).random((3, 64, 64)),
                       InferenceConfig(score_threshold=0.0), num_thing_classes=3)
    write_prediction(pred, tmp_path, "scene_00000")
    doc = read_prediction(tmp_path / "scene_00000.json")
    assert "run length" in doc["rle_format"]
    assert len(doc["detections"]) == len(pred.instances)
    for d, r in zip(doc["detections"], pred.instances):
        assert np.array_equal(d["mask"], r.binary) and d["score"] == r.score
    assert (tmp_path / "scene_00000_panoptic.png").exists()
    assert (tmp_path / "scene_00000_segments.json").exists()
