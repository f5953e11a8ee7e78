"""
Loss values and analytic gradients.

Covers the L1 and IoU-oriented 3D size losses with their compensation weight,
the partials of the size-only 3D IoU, Laplace / Gaussian uncertainty depth
losses, distance-based sample weights, and 12-bin heading encoding with its
multi-bin loss. Absolute-value kinks take subgradient 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .kitti_io import NUM_HEADING_BINS, normalize_angle

SIZE_EPS = 1e-6
BIN_WIDTH = 2.0 * math.pi / NUM_HEADING_BINS
SQRT2 = math.sqrt(2.0)


class DegenerateSizeError(ValueError):
    pass


class InvalidSigmaError(ValueError):
    pass


def _sizes(s, s_star) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64).reshape(3)
    s_star = np.asarray(s_star, dtype=np.float64).reshape(3)
    if np.any(s <= SIZE_EPS):
        raise DegenerateSizeError(f"predicted size must exceed {SIZE_EPS}, got {s.tolist()}")
    if np.any(s_star <= 0):
        raise DegenerateSizeError(f"target size must be positive, got {s_star.tolist()}")
    return s, s_star


# ---------------------------------------------------------------------------
# 3D size


def size_loss_l1(s: Sequence[float], s_star: Sequence[float]) -> float:
    s, s_star = _sizes(s, s_star)
    return float(np.abs(s - s_star).sum())


def size_loss_iou_value(s, s_star, denominator=None) -> float:
    """sum |s - s*| / s. ``denominator`` pins the 1/s factor (stop-gradient surrogate)."""
    s, s_star = _sizes(s, s_star)
    denom = s if denominator is None else np.asarray(denominator, dtype=np.float64).reshape(3)
    return float((np.abs(s - s_star) / denom).sum())


def size_loss_iou(s: Sequence[float], s_star: Sequence[float], stop_gradient: bool = True):
    """IoU-oriented size loss and its gradient with respect to ``s``.

    With ``stop_gradient`` the 1/s denominator is held constant, giving
    sign(s - s*) / s per side. Otherwise the full derivative
    sign(s - s*) * s* / s**2 is returned.
    """
    s, s_star = _sizes(s, s_star)
    diff = s - s_star
    value = float((np.abs(diff) / s).sum())
    if stop_gradient:
        grad = np.sign(diff) / s
    else:
        grad = np.sign(diff) * s_star / s**2
    return value, grad


class CompensatedSizeLoss(NamedTuple):
    value: float
    weight: float
    gradient: np.ndarray


def size_loss_compensated(s: Sequence[float], s_star: Sequence[float]) -> CompensatedSizeLoss:
    """IoU-oriented size loss rescaled by w_s = |L1 / L_iou| (w_s held constant).

    The value reproduces the plain L1 loss per sample; only the per-side
    gradient split changes. For s == s* the weight is 1 by convention.
    """
    l1 = size_loss_l1(s, s_star)
    l_iou, grad = size_loss_iou(s, s_star, stop_gradient=True)
    weight = abs(l1 / l_iou) if l_iou > 0 else 1.0
    return CompensatedSizeLoss(weight * l_iou, weight, weight * grad)


class IoUPartials(NamedTuple):
    gradient: np.ndarray  # dIoU/dh, dIoU/dw, dIoU/dl
    one_sided: bool


def size_case(s: Sequence[float], s_star: Sequence[float]) -> tuple[bool, bool, bool]:
    """Per side, whether the prediction overshoots its target (s_i > s*_i)."""
    return tuple(bool(a > b) for a, b in zip(s, s_star))


def iou_partial_ratio(s: Sequence[float], s_star: Sequence[float]) -> IoUPartials:
    """Analytic partials of the size-only 3D IoU with respect to (h, w, l).

    Each side is either short (s_i <= s*_i, so it bounds the intersection) or
    long (only the prediction volume grows). With I the intersection volume,
    V = hwl, V* = h*w*l* and U = V + V* - I:

        dIoU/ds_i = (dI/ds_i * (V + V*) - I * V / s_i) / U**2

    where dI/ds_i = I / s_i for short sides and 0 for long ones. At
    s_i == s*_i the left derivative is returned and ``one_sided`` is set.
    """
    s, s_star = _sizes(s, s_star)
    short = s <= s_star
    m = np.where(short, s, s_star)
    inter = float(np.prod(m))
    vol, vol_star = float(np.prod(s)), float(np.prod(s_star))
    union = vol + vol_star - inter
    d_inter = np.where(short, inter / s, 0.0)
    d_vol = vol / s
    grad = (d_inter * (vol + vol_star) - inter * d_vol) / union**2
    return IoUPartials(grad, bool(np.any(s == s_star)))


# ---------------------------------------------------------------------------
# depth


def depth_loss_laplace(d: float, sigma: float, d_star: float) -> tuple[float, tuple[float, float]]:
    """sqrt(2)/sigma * |d - d*| + log sigma; gradients (d/dd, d/dsigma)."""
    if not sigma > 0:
        raise InvalidSigmaError(f"sigma must be positive, got {sigma}")
    err = d - d_star
    value = SQRT2 / sigma * abs(err) + math.log(sigma)
    d_d = SQRT2 / sigma * float(np.sign(err))
    d_sigma = -SQRT2 * abs(err) / sigma**2 + 1.0 / sigma
    return value, (d_d, d_sigma)


def depth_loss_gaussian(d: float, variance: float, d_star: float) -> tuple[float, tuple[float, float]]:
    """(d - d*)**2 / (2 var) + log(var) / 2; gradients (d/dd, d/dvar).

    Scalar depth, so the L2 term is taken as the squared residual of the
    Gaussian negative log-likelihood.
    """
    if not variance > 0:
        raise InvalidSigmaError(f"variance must be positive, got {variance}")
    err = d - d_star
    value = err * err / (2.0 * variance) + 0.5 * math.log(variance)
    d_d = err / variance
    d_var = -err * err / (2.0 * variance**2) + 0.5 / variance
    return value, (d_d, d_var)


# ---------------------------------------------------------------------------
# distant-sample weights


class WeightScheme(str, Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class SampleWeightParams:
    scheme: WeightScheme = WeightScheme.HARD
    threshold: float = 60.0
    center: float = 60.0
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", WeightScheme(self.scheme))
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def sample_weight(d: float, params: SampleWeightParams = SampleWeightParams()) -> float:
    if params.scheme is WeightScheme.HARD:
        return 1.0 if d <= params.threshold else 0.0
    # 1 / (1 + exp((d - c) / T)) without overflow for tiny T
    return float(expit(-(d - params.center) / params.temperature))


# ---------------------------------------------------------------------------
# heading


class HeadingEncoding(NamedTuple):
    bin_index: int
    residual: float


def heading_encode(theta: float) -> HeadingEncoding:
    theta = math.fmod(theta, 2.0 * math.pi)
    if theta < 0:
        theta += 2.0 * math.pi
    if theta >= 2.0 * math.pi:
        theta = 0.0
    index = min(int(math.floor(theta / BIN_WIDTH)), NUM_HEADING_BINS - 1)
    return HeadingEncoding(index, theta - bin_center(index))


def bin_center(index: int) -> float:
    return index * BIN_WIDTH + BIN_WIDTH / 2.0


def heading_decode(bin_index: int, residual: float) -> float:
    """Angle in [0, 2pi) (up to rounding at the upper edge)."""
    return bin_center(bin_index) + residual


def heading_loss(logits: Sequence[float], residual_pred: float, theta_star: float) -> float:
    """Softmax cross-entropy over the 12 bins plus L1 on the target bin's residual."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if logits.size != NUM_HEADING_BINS:
        raise ValueError(f"expected {NUM_HEADING_BINS} heading logits, got {logits.size}")
    target = heading_encode(theta_star)
    ce = float(logsumexp(logits) - logits[target.bin_index])
    return max(ce, 0.0) + abs(residual_pred - target.residual)


# ---------------------------------------------------------------------------
# observation angle


def alpha_to_rotation_y(alpha: float, x: float, z: float) -> float:
    return normalize_angle(alpha + math.atan2(x, z))


def rotation_y_to_alpha(rotation_y: float, x: float, z: float) -> float:
    return normalize_angle(rotation_y - math.atan2(x, z))
