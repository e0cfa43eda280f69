from types import SimpleNamespace as NS

import numpy as np
import pytest

from condinst.experiments import (
    SWEEP_FIELDS,
    ablation_arms,
    discrimination_arms,
    median_by_arm,
    pair_mutual_ious,
    run_arms,
)
from condinst.synthdata import DatasetConfig
from condinst.training import TrainConfig


def box(y0, y1, x0, x1, size=8):
    m = np.zeros((size, size), bool)
    m[y0:y1, x0:x1] = True
    return m


def scene(masks, pairs):
    return NS(instances=[NS(mask=m) for m in masks], pairs=pairs)


def preds(masks):
    return NS(instances=[NS(binary=m) for m in masks])


def test_pair_iou_separated_and_merged():
    a, b = box(0, 4, 0, 4), box(0, 4, 2, 6)
    s = scene([a, b], [(0, 1)])
    # one prediction per member: mutual IoU is that of the two predictions
    assert pair_mutual_ious([preds([a, b])], [s]) == [pytest.approx(1 / 3)]
    # a single blob covering both members leaves the second member unmatched
    assert pair_mutual_ious([preds([a | b])], [s]) == [1.0]
    # two identical predictions count as one merged mask
    assert pair_mutual_ious([preds([a | b, a | b])], [s]) == [1.0]
    assert pair_mutual_ious([preds([])], [s]) == [1.0]


def test_pair_iou_each_gt_takes_its_best_unused_prediction():
    a, b = box(0, 4, 0, 4), box(4, 8, 4, 8)
    s = scene([a, b], [(0, 1)])
    # the first member grabs its exact match, the second gets the next best
    got = pair_mutual_ious([preds([box(4, 8, 4, 7), a])], [s])
    assert got == [0.0]


def test_arm_lists():
    assert [a.name for a in discrimination_arms()] == ["condinst", "vanilla_fcn"]
    names = [a.name for a in ablation_arms()]
    assert names[0] == "rel_coords" and "mask_nms" in names
    assert discrimination_arms()[0].model_cfg == ablation_arms()[0].model_cfg


def test_run_arms_shares_trained_models(tmp_path):
    cache = {}
    tiny = TrainConfig(iterations=2, batch_size=2, milestones=(), warmup_iters=1)
    data = DatasetConfig(num_scenes=4, seed=0)
    first = run_arms(discrimination_arms()[:1], seeds=(0,), data_cfg=data, num_val=2, train_cfg=tiny,
                     out_dir=tmp_path, cache=cache)
    assert len(cache) == 1
    arms = [a for a in ablation_arms() if a.name in ("rel_coords", "mask_nms")]
    second = run_arms(arms, seeds=(0,), data_cfg=data, num_val=2, train_cfg=tiny, cache=cache)
    assert len(cache) == 1  # both arms reuse the discrimination model
    assert second[0].ap.AP == pytest.approx(first[0].ap.AP)
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0].split(",") == SWEEP_FIELDS and len(rows) == 2
    assert set(median_by_arm(second, "AP")) == {"rel_coords", "mask_nms"}
