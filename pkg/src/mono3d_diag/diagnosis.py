"""
Error diagnosis: ground-truth substitution, localization-error arithmetic and
depth-bucketed center-misalignment / depth-error statistics.

Substitution pairs each prediction with a ground truth (same category,
2D IoU >= 0.5, greedy by score) and then swaps one or more fields:

* ``PRED_WITH_GT`` ("w/ gt X"): predictions keep everything except X, taken
  from the matched ground truth.
* ``GT_WITH_PRED`` ("w/o gt X"): ground truths (score 1.0) keep everything
  except X, taken from the matched prediction.

The projected center and depth are recombined through back-projection, so
swapping only one of them moves the 3D location along the camera ray or the
depth plane respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .evaluation import EvalConfig, Task, ap40, iter_frames, match_detections
from .geometry import Box3D, back_project, iou_2d, project
from .kitti_io import Calibration, ObjectLabel, RawHeadOutputs
from .losses import rotation_y_to_alpha

SUBSTITUTION_IOU = 0.5
DEFAULT_FOCAL = 707.05
MEAN_CAR_SIZE = (1.53, 1.63, 3.53)  # h, w, l

TABLE3_SHIFTS = ((2, 2), (4, 2), (6, 2), (6, 4), (8, 2), (8, 6))
TABLE3_DEPTHS = (5.0, 10.0, 20.0, 40.0, 60.0)


class Direction(str, Enum):
    PRED_WITH_GT = "w/ gt"
    GT_WITH_PRED = "w/o gt"


class Field(str, Enum):
    PROJ_CENTER = "proj. center"
    DEPTH = "depth"
    LOCATION = "3D location"
    SIZE = "3D size"
    ORIENTATION = "orientation"


@dataclass(frozen=True)
class SubstitutionSpec:
    direction: Direction
    field: Field

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "field", Field(self.field))

    @property
    def label(self) -> str:
        return f"{self.direction.value} {self.field.value}"


class SubstitutionError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    """A predicted object, optionally with the raw head outputs behind it."""

    label: ObjectLabel
    raw: RawHeadOutputs | None = None

    @property
    def score(self) -> float:
        return self.label.score if self.label.score is not None else 0.0


@dataclass
class SubstitutionResult:
    detections: dict
    matched: int = 0
    unmatched_gts: int = 0
    degraded: bool = False
    reference: str = "bottom"


def _as_detection(obj) -> Detection:
    return obj if isinstance(obj, Detection) else Detection(obj)


def attach_raw_outputs(preds: Sequence[ObjectLabel], raws: Sequence[RawHeadOutputs] | None) -> list[Detection]:
    """Pair prediction rows with sidecar records by position."""
    if raws is None:
        return [Detection(p) for p in preds]
    if len(raws) != len(preds):
        raise SubstitutionError(f"{len(preds)} predictions but {len(raws)} raw-output records")
    return [Detection(p, r) for p, r in zip(preds, raws)]


def match_for_substitution(gts: Sequence[ObjectLabel], dets: Sequence[Detection]) -> list[int | None]:
    """Index of the matched ground truth for each detection (2D IoU >= 0.5, greedy by score)."""
    candidates = [j for j, g in enumerate(gts) if not g.is_dontcare]
    out: list[int | None] = [None] * len(dets)
    for category in {d.label.category for d in dets}:
        d_idx = [i for i, d in enumerate(dets) if d.label.category is category]
        g_idx = [j for j in candidates if gts[j].category is category]
        m = match_detections(
            [gts[j] for j in g_idx],
            [dets[i].label for i in d_idx],
            lambda g, p: iou_2d(g.box2d, p.box2d),
            SUBSTITUTION_IOU,
            scores=[dets[i].score for i in d_idx],
        )
        for k, j in enumerate(m.gt_index):
            if j is not None:
                out[d_idx[k]] = g_idx[j]
    return out


def _reference_point(label: ObjectLabel, reference: str) -> tuple[float, float, float]:
    x, y, z = label.location
    return (x, y - 0.5 * label.dims[0], z) if reference == "volumetric" else (x, y, z)


def _location_from_reference(point, h: float, reference: str) -> tuple[float, float, float]:
    x, y, z = point
    return (x, y + 0.5 * h, z) if reference == "volumetric" else (x, y, z)


def _pred_center_and_depth(det: Detection, calib: Calibration, reference: str):
    if det.raw is not None:
        return det.raw.projected_center, det.raw.depth
    ref = _reference_point(det.label, reference)
    return project(ref, calib), ref[2]


def _rebuild(base: ObjectLabel, location, dims, rotation_y, score) -> ObjectLabel:
    alpha = rotation_y_to_alpha(rotation_y, location[0], location[2])
    return base.replace(location=tuple(location), dims=tuple(dims), rotation_y=rotation_y,
                        alpha=alpha, score=score)


def _combine(keep: ObjectLabel, other: ObjectLabel, keep_cw_depth, other_cw_depth,
             fields: set[Field], calib: Calibration, reference: str, score) -> ObjectLabel:
    """``keep`` with ``fields`` taken from ``other``."""
    dims = other.dims if Field.SIZE in fields else keep.dims
    rotation_y = other.rotation_y if Field.ORIENTATION in fields else keep.rotation_y
    if Field.LOCATION in fields:
        location = other.location
    elif fields & {Field.PROJ_CENTER, Field.DEPTH}:
        cw = other_cw_depth[0] if Field.PROJ_CENTER in fields else keep_cw_depth[0]
        z = other_cw_depth[1] if Field.DEPTH in fields else keep_cw_depth[1]
        location = _location_from_reference(back_project(cw, z, calib), dims[0], reference)
    else:
        location = keep.location
    return _rebuild(keep, location, dims, rotation_y, score)


def substitute(
    preds: Mapping,
    gts: Mapping,
    specs: Sequence[SubstitutionSpec],
    calibs: Mapping[object, Calibration],
    reference: str = "bottom",
) -> SubstitutionResult:
    """Build the hybrid detection set for one substitution setting.

    ``preds`` maps frame id to a list of :class:`Detection` (or bare labels),
    ``gts`` to ground-truth labels, ``calibs`` to that frame's calibration.
    ``reference`` selects which box point the projected center refers to
    (``"bottom"`` KITTI location or ``"volumetric"`` center).
    """
    specs = list(specs)
    pred_map = {fid: [_as_detection(d) for d in preds.get(fid, ())] for fid in gts}
    if not specs:
        return SubstitutionResult({fid: [d.label for d in ds] for fid, ds in pred_map.items()},
                                  reference=reference)
    directions = {s.direction for s in specs}
    if len(directions) != 1:
        raise SubstitutionError("all substitution specs must share one direction")
    direction = directions.pop()
    fields = {s.field for s in specs}

    result = SubstitutionResult({}, reference=reference)
    for fid, frame_gts in gts.items():
        calib = calibs[fid]
        dets = pred_map[fid]
        matches = match_for_substitution(frame_gts, dets)
        if direction is Direction.PRED_WITH_GT:
            out = []
            for det, j in zip(dets, matches):
                if j is None:
                    out.append(det.label)
                    continue
                result.matched += 1
                if det.raw is None and Field.PROJ_CENTER in fields:
                    result.degraded = True
                gt = frame_gts[j]
                gt_ref = _reference_point(gt, reference)
                out.append(_combine(det.label, gt, _pred_center_and_depth(det, calib, reference),
                                    (project(gt_ref, calib), gt_ref[2]), fields, calib, reference,
                                    det.label.score))
        else:
            by_gt = {j: i for i, j in enumerate(matches) if j is not None}
            out = []
            for j, gt in enumerate(frame_gts):
                if gt.is_dontcare:
                    continue
                if j not in by_gt:
                    result.unmatched_gts += 1
                    out.append(gt.replace(score=1.0))
                    continue
                result.matched += 1
                det = dets[by_gt[j]]
                if det.raw is None and Field.PROJ_CENTER in fields:
                    result.degraded = True
                gt_ref = _reference_point(gt, reference)
                out.append(_combine(gt, det.label, (project(gt_ref, calib), gt_ref[2]),
                                    _pred_center_and_depth(det, calib, reference), fields, calib,
                                    reference, 1.0))
        result.detections[fid] = out
    if result.matched == 0:
        raise SubstitutionError("no prediction could be matched to a ground truth")
    return result


TABLE1_FIELDS = (Field.PROJ_CENTER, Field.DEPTH, Field.LOCATION, Field.SIZE, Field.ORIENTATION)


@dataclass
class DiagnosisReport:
    grid: dict[str, float]
    baseline_ap: float
    gt_ceiling_ap: float
    degraded: bool = False
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        return list(self.grid.items())


def run_table1(preds: Mapping, gts: Mapping, calibs: Mapping, config: EvalConfig | None = None,
               reference: str = "bottom") -> DiagnosisReport:
    """Baseline, ten single-field substitutions and the full-substitution ceiling.

    Rows are labelled ``"baseline"``, ``"w/ gt depth"``, ``"w/o gt 3D size"``,
    ..., ``"ground truth"``; each value is AP40 under ``config`` (3D task,
    moderate difficulty by default).
    """
    config = config or EvalConfig(task=Task.DETECT_3D)
    pred_labels = {fid: [_as_detection(d).label for d in preds.get(fid, ())] for fid in gts}
    baseline = ap40(gts, pred_labels, config).ap40
    grid = {"baseline": baseline}
    degraded = False
    unmatched = {}
    for direction in (Direction.PRED_WITH_GT, Direction.GT_WITH_PRED):
        for f in TABLE1_FIELDS:
            spec = SubstitutionSpec(direction, f)
            sub = substitute(preds, gts, [spec], calibs, reference)
            grid[spec.label] = ap40(gts, sub.detections, config).ap40
            degraded |= sub.degraded
            if direction is Direction.GT_WITH_PRED:
                unmatched[spec.label] = sub.unmatched_gts
    full = substitute(preds, gts, [SubstitutionSpec(Direction.PRED_WITH_GT, f) for f in TABLE1_FIELDS],
                      calibs, reference)
    ceiling = ap40(gts, full.detections, config).ap40
    grid["ground truth"] = ceiling
    return DiagnosisReport(
        grid=grid,
        baseline_ap=baseline,
        gt_ceiling_ap=ceiling,
        degraded=degraded,
        metadata={
            "reference_point": reference,
            "match_rule": f"2D IoU >= {SUBSTITUTION_IOU}, greedy by score",
            "unmatched_gts_kept": unmatched,
            "task": config.task.value,
            "difficulty": config.difficulty.value,
            "category": config.category.value,
            "iou_threshold": config.iou_threshold,
        },
    )


# ---------------------------------------------------------------------------
# localization-error arithmetic


def loc_error_from_shift(du: float, dv: float, z: float, fu: float = DEFAULT_FOCAL) -> float:
    """3D displacement (m) caused by shifting the projected center by (du, dv) px at depth z."""
    if z <= 0 or fu <= 0:
        raise ValueError("depth and focal length must be positive")
    return z * math.hypot(du, dv) / fu


def loc_error_table(shifts=TABLE3_SHIFTS, depths=TABLE3_DEPTHS, fu: float = DEFAULT_FOCAL) -> np.ndarray:
    """Grid of :func:`loc_error_from_shift`, rows = shifts, columns = depths."""
    return np.array([[loc_error_from_shift(du, dv, z, fu) for z in depths] for du, dv in shifts])


def iou_tolerance(delta_loc: float, length: float = MEAN_CAR_SIZE[2]) -> float:
    """IoU of two equal boxes displaced by ``delta_loc`` along their length."""
    if delta_loc < 0:
        raise ValueError("delta_loc must be non-negative")
    if delta_loc >= length:
        return 0.0
    return (length - delta_loc) / (length + delta_loc)


def max_tolerable_shift(threshold: float = 0.7, length: float = MEAN_CAR_SIZE[2]) -> float:
    """Largest lengthwise displacement keeping the IoU at ``threshold``."""
    return length * (1.0 - threshold) / (1.0 + threshold)


# ---------------------------------------------------------------------------
# depth-bucketed statistics


@dataclass(frozen=True)
class DepthBucketStats:
    bucket_center: float
    count: int
    mean_abs_error: float | None = None
    std: float | None = None


@dataclass
class BucketedStats:
    buckets: list[DepthBucketStats]
    skipped: int = 0

    def __iter__(self):
        return iter(self.buckets)

    def __len__(self):
        return len(self.buckets)

    def __getitem__(self, i):
        return self.buckets[i]

    def populated(self) -> list[DepthBucketStats]:
        return [b for b in self.buckets if b.count]


def _bucketize(samples: Sequence[tuple[float, float]], interval: float) -> list[DepthBucketStats]:
    """Group (depth, value) samples into buckets centered at k * interval, k >= 0."""
    if interval <= 0:
        raise ValueError("bucket interval must be positive")
    groups: dict[int, list[float]] = {}
    for z, v in samples:
        groups.setdefault(int(math.floor(z / interval + 0.5)), []).append(v)
    if not groups:
        return []
    out = []
    for k in range(0, max(groups) + 1):
        values = groups.get(k)
        if not values:
            out.append(DepthBucketStats(k * interval, 0))
        else:
            arr = np.asarray(values)
            out.append(DepthBucketStats(k * interval, len(values), float(arr.mean()), float(arr.std())))
    return out


def misalignment_stats(labels: Mapping, calibs: Mapping, bucket_interval: float = 5.0,
                       reference: str = "volumetric") -> BucketedStats:
    """Per depth bucket, mean/std pixel distance between 2D-box center and projected 3D center."""
    samples, skipped = [], 0
    for fid, frame in labels.items():
        for lab in frame:
            if lab.is_dontcare:
                continue
            if lab.depth <= 0:
                skipped += 1
                continue
            cw = project(_reference_point(lab, reference), calibs[fid])
            ci = lab.center2d
            samples.append((lab.depth, math.hypot(ci[0] - cw[0], ci[1] - cw[1])))
    return BucketedStats(_bucketize(samples, bucket_interval), skipped)


def depth_error_stats(preds: Mapping, gts: Mapping, bucket_interval: float = 5.0) -> BucketedStats:
    """Per ground-truth depth bucket, mean/std of |z_pred - z_gt| over matched pairs."""
    samples = []
    for fid, frame_gts, frame_preds in iter_frames(gts, preds):
        dets = [_as_detection(p) for p in frame_preds]
        for det, j in zip(dets, match_for_substitution(frame_gts, dets)):
            if j is not None:
                z_gt = frame_gts[j].depth
                samples.append((z_gt, abs(det.label.depth - z_gt)))
    return BucketedStats(_bucketize(samples, bucket_interval))
