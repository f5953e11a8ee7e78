"""Brute-force reference implementations used only by the tests."""

from __future__ import annotations

from fractions import Fraction


def greedy_tp_count(frames, iou_fn, threshold, min_score):
    """Re-match every frame from scratch using only predictions scored >= min_score.

    ``frames`` is a list of (gts, preds) with every ground truth counted.
    Returns (num_tp, num_pred_kept).
    """
    tp = kept = 0
    for gts, preds in frames:
        active = sorted((p for p in preds if p.score >= min_score), key=lambda p: -p.score)
        kept += len(active)
        used = set()
        for p in active:
            best, best_j = threshold, None
            for j, g in enumerate(gts):
                if j in used:
                    continue
                ov = iou_fn(g, p)
                if ov >= best and (best_j is None or ov > best):
                    best, best_j = ov, j
            if best_j is not None:
                used.add(best_j)
                tp += 1
    return tp, kept


def pr_enumeration_ap40(frames, iou_fn, threshold):
    """AP40 by enumerating every score cutoff and interpolating in exact rationals."""
    num_gt = sum(len(g) for g, _ in frames)
    if num_gt == 0:
        return 0.0
    cutoffs = sorted({p.score for _, preds in frames for p in preds}, reverse=True)
    curve = []
    for c in cutoffs:
        tp, kept = greedy_tp_count(frames, iou_fn, threshold, c)
        curve.append((Fraction(tp, num_gt), Fraction(tp, kept)))
    total = Fraction(0)
    for k in range(1, 41):
        reachable = [p for r, p in curve if r >= Fraction(k, 40)]
        total += max(reachable, default=Fraction(0))
    return float(total * 100 / 40)


def rect_intersection_1d(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


def lengthwise_shift_iou(length, delta):
    """IoU of two equal boxes offset along their length, from interval arithmetic."""
    inter = rect_intersection_1d(0.0, length, delta, delta + length)
    return inter / (2 * length - inter)
