import math

import numpy as np
import pytest

from mono3d_diag.evaluation import (
    DetectionTable,
    Difficulty,
    EvalConfig,
    GtStatus,
    PredKind,
    Task,
    ap40,
    ap40_from_table,
    aos,
    bucket_centers,
    difficulty_filter,
    evaluation_table,
    match_detections,
    rangewise_eval,
)
from mono3d_diag.geometry import Box3D, iou_2d, iou_3d
from mono3d_diag.kitti_io import Category, ObjectLabel
from oracles import pr_enumeration_ap40
from synth import kitti_calib, make_car

CALIB = kitti_calib()


def _label(height=50.0, occ=0, trunc=0.0, cat=Category.CAR, z=20.0):
    return ObjectLabel(cat, trunc, occ, 0.0, (100.0, 100.0, 150.0, 100.0 + height), (1.5, 1.6, 3.9),
                       (0.0, 1.6, z), 0.0)


def _jitter(label, rng, pos=0.3, score=None):
    loc = np.asarray(label.location) + rng.normal(0, pos, 3) * (1, 0.1, 1)
    box = make_car(loc[0], loc[2], CALIB, dims=label.dims, ry=label.rotation_y, y=loc[1])
    return box.replace(score=float(rng.uniform()) if score is None else score)


def _random_scene(rng, n_frames=6):
    gts, preds = {}, {}
    for f in range(n_frames):
        frame_gts = [make_car(rng.uniform(-8, 8), rng.uniform(8, 35), CALIB, ry=rng.uniform(-3, 3))
                     for _ in range(rng.integers(1, 4))]
        frame_preds = [_jitter(g, rng) for g in frame_gts if rng.uniform() < 0.85]
        frame_preds += [make_car(rng.uniform(-8, 8), rng.uniform(8, 35), CALIB, score=float(rng.uniform()))
                        for _ in range(rng.integers(0, 3))]
        gts[f"{f:06d}"], preds[f"{f:06d}"] = frame_gts, frame_preds
    return gts, preds


# --- difficulty -----------------------------------------------------------


def test_difficulty_tiers():
    lab = _label(height=50)
    assert all(difficulty_filter(lab, d) is GtStatus.COUNTED for d in Difficulty)
    assert difficulty_filter(_label(height=30), Difficulty.EASY) is GtStatus.IGNORED
    assert difficulty_filter(_label(height=30), Difficulty.MODERATE) is GtStatus.COUNTED
    assert difficulty_filter(_label(trunc=0.9), Difficulty.HARD) is GtStatus.IGNORED
    assert difficulty_filter(_label(occ=3), Difficulty.HARD) is GtStatus.IGNORED
    assert difficulty_filter(_label(cat=Category.VAN), Difficulty.MODERATE) is GtStatus.EXCLUDED
    dc = ObjectLabel(Category.DONTCARE, -1, -1, -10, (0, 0, 10, 10), (-1, -1, -1), (-1000, -1000, -1000), -10)
    assert difficulty_filter(dc, Difficulty.MODERATE) is GtStatus.IGNORED


# --- matching -------------------------------------------------------------


def _iou_from_table(table):
    return lambda g, p: table[g][p]


def test_match_single_tp():
    m = match_detections(["g"], ["p"], _iou_from_table({"g": {"p": 0.8}}), 0.7, scores=[0.5])
    assert m.kinds == [PredKind.TP] and m.gt_index == [0]


def test_match_duplicate_is_fp():
    table = {"g": {"a": 0.9, "b": 0.95}}
    m = match_detections(["g"], ["a", "b"], _iou_from_table(table), 0.7, scores=[0.9, 0.3])
    assert m.kinds == [PredKind.TP, PredKind.FP]


def test_match_ignored_gt():
    m = match_detections(["g"], ["p"], _iou_from_table({"g": {"p": 0.9}}), 0.7, scores=[0.5],
                         gt_status=[GtStatus.IGNORED])
    assert m.kinds == [PredKind.IGNORED]


def test_match_tie_broken_by_input_order():
    table = {"g": {"a": 0.9, "b": 0.9}}
    m = match_detections(["g"], ["a", "b"], _iou_from_table(table), 0.7, scores=[0.5, 0.5])
    assert m.kinds == [PredKind.TP, PredKind.FP]


def test_match_picks_highest_iou_unclaimed():
    table = {"g1": {"p": 0.75}, "g2": {"p": 0.9}}
    m = match_detections(["g1", "g2"], ["p"], _iou_from_table(table), 0.7, scores=[1.0])
    assert m.gt_index == [1]


# --- AP40 -----------------------------------------------------------------


def test_perfect_and_empty():
    gts = {"a": [make_car(0.0, 20.0, CALIB)]}
    for task in Task:
        cfg = EvalConfig(task=task)
        assert ap40(gts, {"a": [gts["a"][0].replace(score=0.9)]}, cfg).ap40 == 100.0
        res = ap40(gts, {}, cfg)
        assert res.ap40 == 0.0 and res.flag is None


def test_undefined_flag():
    res = ap40({"a": []}, {"a": [make_car(0.0, 20.0, CALIB, score=0.5)]}, EvalConfig())
    assert res.ap40 == 0.0 and res.flag == "undefined"


def test_two_gt_hand_case():
    gts = [make_car(-4.0, 15.0, CALIB), make_car(4.0, 25.0, CALIB)]
    preds = [gts[0].replace(score=0.9), make_car(8.0, 40.0, CALIB, score=0.8)]
    res = ap40([gts], [preds], EvalConfig(task=Task.DETECT_3D))
    assert res.ap40 == 50.0
    assert res.precision_at_recall == (1.0,) * 20 + (0.0,) * 20
    assert (res.num_tp, res.num_fp) == (1, 1)


def test_ap_from_table_oracle_cases():
    # recall reaches 1/2 with precision 1, then 1 with precision 2/3
    ap, prec = ap40_from_table([0.9, 0.8, 0.7], [True, False, True], 2)
    assert prec == (1.0,) * 20 + (pytest.approx(2 / 3),) * 20
    assert ap == pytest.approx(100 * (20 + 40 / 3) / 40)
    # tied scores enter together
    ap, _ = ap40_from_table([0.5, 0.5], [False, True], 1)
    assert ap == 50.0


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("task", [Task.DETECT_2D, Task.DETECT_3D])
def test_ap40_matches_pr_enumeration(seed, task):
    rng = np.random.default_rng(seed)
    gts, preds = _random_scene(rng)
    cfg = EvalConfig(task=task, iou_threshold=0.5, difficulty=Difficulty.HARD)
    # the oracle assumes every ground truth counts
    assert all(difficulty_filter(g, cfg.difficulty) is GtStatus.COUNTED for f in gts.values() for g in f)
    if task is Task.DETECT_2D:
        fn = lambda g, p: iou_2d(g.box2d, p.box2d)
    else:
        fn = lambda g, p: iou_3d(Box3D.from_label(g), Box3D.from_label(p))
    want = pr_enumeration_ap40([(gts[f], preds[f]) for f in gts], fn, 0.5)
    assert ap40(gts, preds, cfg).ap40 == pytest.approx(want, abs=1e-9)


def test_monotone_under_top_tp_and_fp_removal():
    rng = np.random.default_rng(10)
    gts, preds = _random_scene(rng)
    cfg = EvalConfig(task=Task.DETECT_2D, iou_threshold=0.5, difficulty=Difficulty.HARD)
    base = ap40(gts, preds, cfg)
    # remove one false positive
    tp_preds = {pred for _, pred, _ in base.matched_pairs}
    fp_pairs = [(f, i) for f, frame in preds.items() for i in range(len(frame)) if (f, i) not in tp_preds]
    assert fp_pairs
    for f, i in fp_pairs:
        fewer = dict(preds)
        fewer[f] = [p for k, p in enumerate(preds[f]) if k != i]
        assert ap40(gts, fewer, cfg).ap40 >= base.ap40
    # add a top-scored TP for a missed ground truth
    matched = {(f, g) for (f, g), _, _ in base.matched_pairs}
    missed = [(f, j) for f, frame in gts.items() for j in range(len(frame)) if (f, j) not in matched]
    assert missed
    for f, j in missed:
        more = dict(preds)
        more[f] = preds[f] + [gts[f][j].replace(score=10.0)]
        assert ap40(gts, more, cfg).ap40 >= base.ap40


def test_dontcare_suppresses_fp():
    gt = make_car(0.0, 20.0, CALIB)
    fp = make_car(-6.0, 20.0, CALIB, score=0.9)
    dc = ObjectLabel(Category.DONTCARE, -1, -1, -10, fp.box2d, (-1, -1, -1), (-1000, -1000, -1000), -10)
    cfg = EvalConfig(task=Task.DETECT_2D)
    with_dc = ap40({"a": [gt, dc]}, {"a": [fp, gt.replace(score=0.5)]}, cfg)
    without = ap40({"a": [gt]}, {"a": [fp, gt.replace(score=0.5)]}, cfg)
    assert with_dc.ap40 == 100.0
    assert without.ap40 < 100.0


def test_small_unmatched_prediction_ignored():
    gt = make_car(0.0, 20.0, CALIB)
    tiny = make_car(-6.0, 70.0, CALIB, score=0.9)  # 2D height below 25 px
    assert tiny.height2d < 25
    res = ap40({"a": [gt]}, {"a": [tiny, gt.replace(score=0.5)]}, EvalConfig(task=Task.DETECT_2D))
    assert res.ap40 == 100.0


def test_other_categories_do_not_interact():
    gt = make_car(0.0, 20.0, CALIB)
    van = make_car(3.0, 20.0, CALIB, category=Category.VAN)
    ped = make_car(-3.0, 20.0, CALIB, category=Category.PEDESTRIAN, score=0.99)
    res = ap40({"a": [gt, van]}, {"a": [ped, gt.replace(score=0.5)]}, EvalConfig())
    assert res.ap40 == 100.0 and res.num_gt == 1 and res.num_pred == 1


def test_threshold_validation_and_defaults():
    assert EvalConfig(category=Category.CAR).iou_threshold == 0.7
    assert EvalConfig(category=Category.PEDESTRIAN).iou_threshold == 0.5
    assert EvalConfig(category=Category.CYCLIST).iou_threshold == 0.5
    assert EvalConfig(iou_threshold=0.3).iou_threshold == 0.3
    with pytest.raises(ValueError):
        EvalConfig(iou_threshold=0.0)
    with pytest.raises(ValueError):
        EvalConfig(iou_threshold=1.5)


# --- AOS ------------------------------------------------------------------


def _rotated(label, delta):
    return label.replace(alpha=label.alpha + delta)


def test_aos_cases():
    gts = {"a": [make_car(-4.0, 15.0, CALIB), make_car(4.0, 25.0, CALIB)]}
    exact = {"a": [g.replace(score=0.9 - 0.1 * i) for i, g in enumerate(gts["a"])]}
    cfg = EvalConfig(task=Task.DETECT_2D)
    assert aos(gts, exact, cfg).ap40 == ap40(gts, exact, cfg).ap40 == 100.0
    flipped = {"a": [_rotated(p, math.pi) for p in exact["a"]]}
    assert aos(gts, flipped, cfg).ap40 == pytest.approx(0.0, abs=1e-12)
    single = {"a": [gts["a"][0]]}
    half = aos(single, {"a": [_rotated(gts["a"][0].replace(score=0.5), math.pi / 2)]}, cfg)
    assert half.ap40 == pytest.approx(50.0, abs=1e-12)


def test_aos_bounded_by_2d_ap():
    rng = np.random.default_rng(11)
    gts, preds = _random_scene(rng)
    preds = {f: [p.replace(alpha=p.alpha + rng.normal(0, 0.5)) for p in frame] for f, frame in preds.items()}
    cfg = EvalConfig(task=Task.DETECT_2D, iou_threshold=0.5)
    assert aos(gts, preds, cfg).ap40 <= ap40(gts, preds, cfg).ap40 + 1e-12


# --- range-wise -----------------------------------------------------------


def test_bucket_centers():
    assert bucket_centers(10) == [10.0 * k for k in range(1, 10)]
    with pytest.raises(ValueError):
        bucket_centers(0)


def test_range_single_depth():
    gts = {"a": [make_car(-3.0, 20.0, CALIB), make_car(3.0, 20.0, CALIB)]}
    preds = {"a": [g.replace(score=0.5) for g in gts["a"]]}
    for center, res in rangewise_eval(gts, preds, EvalConfig(), 10):
        assert res.num_gt == (2 if center == 20 else 0)
        assert res.ap40 == (100.0 if center == 20 else 0.0)


def test_range_half_open_boundary():
    gts = {"a": [make_car(0.0, 25.0, CALIB)]}
    preds = {"a": [gts["a"][0].replace(score=0.5)]}
    counted = {c: r.num_gt for c, r in rangewise_eval(gts, preds, EvalConfig(difficulty=Difficulty.HARD), 10)}
    assert counted[30.0] == 1 and counted[20.0] == 0


def test_range_out_of_bucket_gt_is_ignored_not_missed():
    # prediction at 24.9 m matches a ground truth at 25.1 m across the bucket edge
    gt = make_car(0.0, 25.1, CALIB)
    pred = gt.replace(location=(0.0, 1.65, 24.9), score=0.9)
    cfg = EvalConfig(task=Task.DETECT_2D, difficulty=Difficulty.HARD)
    by_center = dict(rangewise_eval({"a": [gt]}, {"a": [pred]}, cfg, 10))
    assert by_center[20.0].num_fp == 0 and by_center[20.0].num_ignored == 1
    first = dict(rangewise_eval({"a": [gt]}, {"a": [pred]}, EvalConfig(task=Task.DETECT_2D, bucket_first=True,
                                                                       difficulty=Difficulty.HARD), 10))
    assert first[20.0].num_fp == 1 and first[20.0].num_ignored == 0


def test_range_buckets_reaggregate_to_global():
    rng = np.random.default_rng(12)
    gts, preds = {}, {}
    for f in range(10):
        frame = []
        for _ in range(3):
            center = 10.0 * rng.integers(1, 5)
            frame.append(make_car(rng.uniform(-8, 8), center + rng.uniform(-4, 4), CALIB))
        gts[f] = frame
        preds[f] = [g.replace(score=float(rng.uniform()),
                              location=(g.location[0] + rng.normal(0, 0.2), g.location[1], g.location[2]))
                    for g in frame if rng.uniform() < 0.8]
        preds[f] += [make_car(rng.uniform(-8, 8), 10.0 * rng.integers(1, 5), CALIB, score=float(rng.uniform()))]
    cfg = EvalConfig(task=Task.BEV, iou_threshold=0.5, difficulty=Difficulty.HARD)
    merged = DetectionTable()
    for center in bucket_centers(10):
        merged.extend(evaluation_table(gts, preds, EvalConfig(task=cfg.task, iou_threshold=0.5,
                                                              difficulty=cfg.difficulty,
                                                              depth_bucket=(center, 5.0))))
    glob = ap40(gts, preds, cfg)
    ap, prec = ap40_from_table(merged.scores, merged.tp, merged.num_gt)
    assert merged.num_gt == glob.num_gt
    assert ap == glob.ap40
    assert prec == glob.precision_at_recall


def test_determinism():
    rng = np.random.default_rng(13)
    gts, preds = _random_scene(rng)
    cfg = EvalConfig(task=Task.BEV, iou_threshold=0.5)
    a, b = ap40(gts, preds, cfg), ap40(dict(gts), dict(preds), cfg)
    assert a == b
