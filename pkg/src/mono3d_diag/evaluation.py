"""
KITTI-style AP40 / AOS evaluation with difficulty tiers and depth buckets.

Matching is greedy in descending score order: each prediction claims the
unclaimed counted ground truth with the highest IoU at or above the
threshold. Predictions that only overlap ignored ground truths or DontCare
regions, or whose 2D height is below the tier minimum, are neither true nor
false positives. AP40 is the mean of the interpolated precision
``max_{r' >= r} p(r')`` at recall positions 1/40 ... 40/40, times 100.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box3D, iou_2d, iou_3d, iou_bev
from .kitti_io import Category, ObjectLabel

NUM_RECALL_POSITIONS = 40
MAX_RANGE = 90.0


class Task(str, Enum):
    DETECT_2D = "2d"
    BEV = "bev"
    DETECT_3D = "3d"
    AOS = "aos"


class Difficulty(str, Enum):
    EASY = "easy"
    MODERATE = "moderate"
    HARD = "hard"


class GtStatus(Enum):
    COUNTED = "counted"
    IGNORED = "ignored"
    EXCLUDED = "excluded"


class PredKind(Enum):
    TP = "tp"
    FP = "fp"
    IGNORED = "ignored"


# min 2D height (px), max occlusion level, max truncation
DIFFICULTY_LIMITS = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}

DEFAULT_IOU_THRESHOLD = {
    Category.CAR: 0.7,
    Category.PEDESTRIAN: 0.5,
    Category.CYCLIST: 0.5,
}


@dataclass(frozen=True)
class EvalConfig:
    task: Task = Task.DETECT_3D
    category: Category = Category.CAR
    iou_threshold: float | None = None
    difficulty: Difficulty = Difficulty.MODERATE
    depth_bucket: tuple[float, float] | None = None  # (center, half_width)
    bucket_first: bool = False

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "difficulty", Difficulty(self.difficulty))
        if self.iou_threshold is None:
            object.__setattr__(self, "iou_threshold", DEFAULT_IOU_THRESHOLD.get(self.category, 0.5))
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if self.depth_bucket is not None:
            center, half = self.depth_bucket
            if half <= 0:
                raise ValueError("depth bucket half-width must be positive")
            object.__setattr__(self, "depth_bucket", (float(center), float(half)))

    def in_bucket(self, z: float) -> bool:
        if self.depth_bucket is None:
            return True
        center, half = self.depth_bucket
        return center - half <= z < center + half


@dataclass
class EvalResult:
    config: EvalConfig
    ap40: float
    precision_at_recall: tuple[float, ...]
    matched_pairs: list = field(default_factory=list)  # ((frame, gt_idx), (frame, pred_idx), iou)
    num_gt: int = 0
    num_pred: int = 0
    num_ignored: int = 0
    num_tp: int = 0
    num_fp: int = 0
    flag: str | None = None

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.num_gt, self.num_pred, self.num_ignored)


@dataclass
class Matching:
    kinds: list[PredKind]
    gt_index: list[int | None]
    ious: list[float]


@dataclass
class DetectionTable:
    """Per-prediction outcomes pooled over frames; the input to the PR sweep."""

    scores: list[float] = field(default_factory=list)
    tp: list[bool] = field(default_factory=list)
    similarity: list[float] = field(default_factory=list)
    num_gt: int = 0
    num_ignored_gt: int = 0
    num_pred: int = 0
    matched_pairs: list = field(default_factory=list)

    def extend(self, other: "DetectionTable") -> None:
        self.scores += other.scores
        self.tp += other.tp
        self.similarity += other.similarity
        self.num_gt += other.num_gt
        self.num_ignored_gt += other.num_ignored_gt
        self.num_pred += other.num_pred
        self.matched_pairs += other.matched_pairs


# ---------------------------------------------------------------------------
# filtering


def difficulty_filter(label: ObjectLabel, difficulty: Difficulty, category: Category = Category.CAR) -> GtStatus:
    """Counted if the label is of ``category`` and passes the tier, else Ignored/Excluded.

    DontCare and same-category labels outside the tier are Ignored (a matched
    detection is not penalised, a missed one is not a false negative).
    """
    if label.is_dontcare:
        return GtStatus.IGNORED
    if label.category is not Category(category):
        return GtStatus.EXCLUDED
    min_height, max_occ, max_trunc = DIFFICULTY_LIMITS[Difficulty(difficulty)]
    if label.height2d >= min_height and label.occlusion <= max_occ and label.truncation <= max_trunc:
        return GtStatus.COUNTED
    return GtStatus.IGNORED


def _intersection_over_first(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    area = (a[2] - a[0]) * (a[3] - a[1])
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


# ---------------------------------------------------------------------------
# matching


def _descending(scores: Sequence[float]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def match_detections(
    gts: Sequence,
    preds: Sequence,
    iou_fn: Callable,
    threshold: float,
    scores: Sequence[float] | None = None,
    gt_status: Sequence[GtStatus] | None = None,
    pred_ignored: Sequence[bool] | None = None,
) -> Matching:
    """Greedy score-ordered matching of one frame.

    ``iou_fn(gt, pred)`` gives the overlap. ``scores`` default to each
    prediction's ``score`` attribute. ``pred_ignored`` marks predictions that
    must not become FPs when unmatched (e.g. inside DontCare regions); they
    can still claim a counted ground truth.
    """
    n_pred = len(preds)
    if scores is None:
        scores = [p.score if p.score is not None else 0.0 for p in preds]
    if gt_status is None:
        gt_status = [GtStatus.COUNTED] * len(gts)
    if pred_ignored is None:
        pred_ignored = [False] * n_pred
    relevant = [j for j, st in enumerate(gt_status) if st is not GtStatus.EXCLUDED]
    ious = {(i, j): iou_fn(gts[j], preds[i]) for i in range(n_pred) for j in relevant}

    claimed = [False] * len(gts)
    kinds = [PredKind.FP] * n_pred
    gt_index: list[int | None] = [None] * n_pred
    best_ious = [0.0] * n_pred
    for i in _descending(scores):
        best_j, best = None, -1.0
        for j in relevant:
            if gt_status[j] is GtStatus.COUNTED and not claimed[j]:
                ov = ious[i, j]
                if ov >= threshold and ov > best:
                    best_j, best = j, ov
        if best_j is not None:
            claimed[best_j] = True
            kinds[i], gt_index[i], best_ious[i] = PredKind.TP, best_j, best
            continue
        hits_ignored = any(
            gt_status[j] is GtStatus.IGNORED and ious[i, j] >= threshold for j in relevant
        )
        if hits_ignored or pred_ignored[i]:
            kinds[i] = PredKind.IGNORED
    return Matching(kinds, gt_index, best_ious)


def _iou_fn(task: Task) -> Callable:
    if task in (Task.DETECT_2D, Task.AOS):
        return lambda g, p: iou_2d(g.box2d, p.box2d)
    if task is Task.BEV:
        return lambda g, p: iou_bev(Box3D.from_label(g), Box3D.from_label(p))
    return lambda g, p: iou_3d(Box3D.from_label(g), Box3D.from_label(p))


def frame_table(
    gts: Sequence[ObjectLabel], preds: Sequence[ObjectLabel], config: EvalConfig, frame_id=None
) -> DetectionTable:
    """Match one frame and return its outcome table."""
    min_height = DIFFICULTY_LIMITS[config.difficulty][0]
    dontcare = [g.box2d for g in gts if g.is_dontcare]
    candidates = [g for g in gts if not g.is_dontcare]
    status = [difficulty_filter(g, config.difficulty, config.category) for g in candidates]
    if config.depth_bucket is not None:
        # bucket-first drops out-of-bucket objects entirely; otherwise they absorb matches
        for j, g in enumerate(candidates):
            if config.in_bucket(g.depth) or status[j] is GtStatus.EXCLUDED:
                continue
            status[j] = GtStatus.EXCLUDED if config.bucket_first else GtStatus.IGNORED

    pred_idx = [
        i for i, p in enumerate(preds) if p.category is config.category and config.in_bucket(p.depth)
    ]
    kept = [preds[i] for i in pred_idx]
    ignored = [
        p.height2d < min_height
        or any(_intersection_over_first(p.box2d, dc) >= config.iou_threshold for dc in dontcare)
        for p in kept
    ]
    m = match_detections(candidates, kept, _iou_fn(config.task), config.iou_threshold,
                         gt_status=status, pred_ignored=ignored)

    table = DetectionTable(
        num_gt=sum(st is GtStatus.COUNTED for st in status),
        num_ignored_gt=sum(st is GtStatus.IGNORED for st in status),
        num_pred=len(kept),
    )
    gt_positions = [j for j, g in enumerate(gts) if not g.is_dontcare]
    for k, p in enumerate(kept):
        kind = m.kinds[k]
        if kind is PredKind.IGNORED:
            continue
        table.scores.append(p.score if p.score is not None else 0.0)
        table.tp.append(kind is PredKind.TP)
        if kind is PredKind.TP:
            g = candidates[m.gt_index[k]]
            table.similarity.append(0.5 * (1.0 + math.cos(p.alpha - g.alpha)))
            table.matched_pairs.append(
                ((frame_id, gt_positions[m.gt_index[k]]), (frame_id, pred_idx[k]), m.ious[k])
            )
        else:
            table.similarity.append(0.0)
    return table


# ---------------------------------------------------------------------------
# precision / recall sweep


def ap40_from_table(
    scores: Sequence[float], tp: Sequence[bool], num_gt: int, similarity: Sequence[float] | None = None
) -> tuple[float, tuple[float, ...]]:
    """Interpolated AP over 40 recall positions from pooled outcomes.

    Every distinct score is a cutoff (ties enter together). For position
    r_k = k/40 the interpolated precision is the best precision among
    cutoffs with recall >= r_k. With ``similarity`` each TP contributes its
    orientation similarity instead of 1 (AOS).
    """
    if num_gt <= 0:
        return 0.0, (0.0,) * NUM_RECALL_POSITIONS
    order = _descending(scores)
    s = np.asarray(scores, dtype=np.float64)[order]
    hits = np.asarray(tp, dtype=bool)[order]
    gain = hits.astype(np.float64) if similarity is None else np.asarray(similarity, dtype=np.float64)[order]
    cum_tp = np.cumsum(hits)
    cum_gain = np.cumsum(gain)
    n = np.arange(1, len(s) + 1)
    last_of_group = np.r_[s[1:] != s[:-1], True] if len(s) else np.zeros(0, dtype=bool)
    cum_tp, cum_gain, n = cum_tp[last_of_group], cum_gain[last_of_group], n[last_of_group]
    precision = cum_gain / n

    interp = []
    for k in range(1, NUM_RECALL_POSITIONS + 1):
        # recall >= k/40 in exact integer arithmetic
        reach = cum_tp * NUM_RECALL_POSITIONS >= k * num_gt
        interp.append(float(precision[reach].max()) if reach.any() else 0.0)
    ap = 100.0 * math.fsum(interp) / NUM_RECALL_POSITIONS
    return ap, tuple(interp)


# ---------------------------------------------------------------------------
# public entry points


def iter_frames(gts, preds) -> list[tuple[object, list, list]]:
    """Pair per-frame ground truths and predictions.

    Accepts mappings keyed by frame id or parallel sequences of per-frame
    lists. The ground-truth side defines the frame set.
    """
    if isinstance(gts, Mapping):
        preds = preds if isinstance(preds, Mapping) else dict(enumerate(preds))
        return [(fid, list(gts[fid]), list(preds.get(fid, ()))) for fid in gts]
    gts = list(gts)
    preds = list(preds) if preds is not None else []
    if isinstance(preds, list) and len(preds) not in (0, len(gts)):
        raise ValueError("ground-truth and prediction frame counts differ")
    return [(i, list(g), list(preds[i]) if preds else []) for i, g in enumerate(gts)]


def evaluation_table(gts, preds, config: EvalConfig) -> DetectionTable:
    table = DetectionTable()
    for fid, g, p in iter_frames(gts, preds):
        table.extend(frame_table(g, p, config, fid))
    return table


def result_from_table(table: DetectionTable, config: EvalConfig) -> EvalResult:
    sim = table.similarity if config.task is Task.AOS else None
    ap, prec = ap40_from_table(table.scores, table.tp, table.num_gt, sim)
    return EvalResult(
        config=config,
        ap40=ap,
        precision_at_recall=prec,
        matched_pairs=list(table.matched_pairs),
        num_gt=table.num_gt,
        num_pred=table.num_pred,
        num_ignored=table.num_ignored_gt,
        num_tp=sum(table.tp),
        num_fp=len(table.tp) - sum(table.tp),
        flag="undefined" if table.num_gt == 0 else None,
    )


def ap40(gts, preds, config: EvalConfig) -> EvalResult:
    """AP40 for ``config.task`` (for ``Task.AOS`` this is the orientation score)."""
    return result_from_table(evaluation_table(gts, preds, config), config)


def aos(gts, preds, config: EvalConfig) -> EvalResult:
    """Average orientation similarity; matching uses 2D IoU."""
    return ap40(gts, preds, replace(config, task=Task.AOS))


def bucket_centers(interval: float, max_range: float = MAX_RANGE) -> list[float]:
    if interval <= 0:
        raise ValueError("interval must be positive")
    count = int(math.floor(max_range / interval + 1e-9))
    return [interval * k for k in range(1, count + 1)]


def rangewise_eval(gts, preds, config: EvalConfig, interval: float = 10.0,
                   max_range: float = MAX_RANGE) -> list[tuple[float, EvalResult]]:
    """Evaluate depth buckets [c - interval/2, c + interval/2) at c = interval, 2*interval, ...

    Ground truths outside a bucket become Ignored for it (or Excluded with
    ``config.bucket_first``); predictions outside it are dropped.
    """
    frames = iter_frames(gts, preds)
    out = []
    for center in bucket_centers(interval, max_range):
        cfg = replace(config, depth_bucket=(center, interval / 2.0))
        table = DetectionTable()
        for fid, g, p in frames:
            table.extend(frame_table(g, p, cfg, fid))
        out.append((center, result_from_table(table, cfg)))
    return out
