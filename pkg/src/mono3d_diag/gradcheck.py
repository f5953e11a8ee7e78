"""
Finite-difference and identity checks over the loss routines.

Each check draws random smooth points (away from |.| kinks and min() switch
points), compares the analytic gradient with a central difference, and keeps
the worst relative error. Gradients are compared as vectors:
``||g - g_fd|| / max(||g||, ||g_fd||)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .geometry import iou_3d_axis_aligned

FD_STEP = 1e-5
GRAD_TOL = 1e-6
IDENTITY_TOL = 1e-12
KINK_MARGIN = 1e-3


def central_difference(f: Callable[[np.ndarray], float], x, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        grad.flat[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    b = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def _plain(value):
    # numpy scalars -> python floats so failing inputs print as copy-pasteable literals
    if isinstance(value, (tuple, list)):
        return tuple(_plain(v) for v in value)
    return float(value)


@dataclass
class CheckResult:
    name: str
    tolerance: float
    worst: float = 0.0
    worst_input: tuple = ()
    trials: int = 0
    failures: list = field(default_factory=list)

    def record(self, err: float, inputs: tuple) -> None:
        inputs = _plain(inputs)
        self.trials += 1
        if err > self.worst or not self.worst_input:
            self.worst, self.worst_input = err, inputs
        if not err <= self.tolerance:
            self.failures.append((err, inputs))

    @property
    def passed(self) -> bool:
        return not self.failures


def _random_size_pair(rng: np.random.Generator, pattern=None):
    """Sizes in [0.5, 5] m whose sides differ from the target by at least KINK_MARGIN.

    ``pattern`` fixes which sides overshoot (True) or undershoot (False).
    """
    s_star = rng.uniform(0.5, 5.0, size=3)
    if pattern is None:
        pattern = rng.integers(0, 2, size=3).astype(bool)
    ratio = rng.uniform(1.0 + 10 * KINK_MARGIN, 2.0, size=3)
    s = np.where(pattern, s_star * ratio, s_star / ratio)
    return s, s_star


def check_iou_partials(rng, trials: int, corrupt: bool = False) -> CheckResult:
    res = CheckResult("iou_partial_ratio vs FD(iou_3d_axis_aligned)", GRAD_TOL)
    for t in range(trials):
        pattern = np.array([(t >> k) & 1 for k in range(3)], dtype=bool)
        s, s_star = _random_size_pair(rng, pattern)
        grad = losses.iou_partial_ratio(s, s_star).gradient
        if corrupt:
            grad = grad * (1.0 + 1e-3)
        fd = central_difference(lambda x: iou_3d_axis_aligned(x, s_star), s)
        res.record(relative_error(grad, fd), (tuple(s), tuple(s_star)))
    return res


def check_size_loss_iou(rng, trials: int) -> CheckResult:
    res = CheckResult("size_loss_iou (stop-gradient) vs FD", GRAD_TOL)
    for _ in range(trials):
        s, s_star = _random_size_pair(rng)
        _, grad = losses.size_loss_iou(s, s_star, stop_gradient=True)
        denom = s.copy()
        fd = central_difference(lambda x: losses.size_loss_iou_value(x, s_star, denominator=denom), s)
        res.record(relative_error(grad, fd), (tuple(s), tuple(s_star)))
    return res


def check_size_loss_iou_full(rng, trials: int) -> CheckResult:
    res = CheckResult("size_loss_iou (full derivative) vs FD", GRAD_TOL)
    for _ in range(trials):
        s, s_star = _random_size_pair(rng)
        _, grad = losses.size_loss_iou(s, s_star, stop_gradient=False)
        fd = central_difference(lambda x: losses.size_loss_iou_value(x, s_star), s)
        res.record(relative_error(grad, fd), (tuple(s), tuple(s_star)))
    return res


def _depth_point(rng):
    d_star = rng.uniform(2.0, 80.0)
    err = rng.uniform(0.05, 10.0) * rng.choice([-1.0, 1.0])
    return d_star + err, d_star


def check_depth_laplace(rng, trials: int) -> CheckResult:
    res = CheckResult("depth_loss_laplace vs FD", GRAD_TOL)
    for _ in range(trials):
        d, d_star = _depth_point(rng)
        sigma = rng.uniform(0.2, 10.0)
        _, grad = losses.depth_loss_laplace(d, sigma, d_star)
        fd = central_difference(lambda x: losses.depth_loss_laplace(x[0], x[1], d_star)[0], [d, sigma])
        res.record(relative_error(grad, fd), (d, sigma, d_star))
    return res


def check_depth_gaussian(rng, trials: int) -> CheckResult:
    res = CheckResult("depth_loss_gaussian vs FD", GRAD_TOL)
    for _ in range(trials):
        d, d_star = _depth_point(rng)
        var = rng.uniform(0.2, 20.0)
        _, grad = losses.depth_loss_gaussian(d, var, d_star)
        fd = central_difference(lambda x: losses.depth_loss_gaussian(x[0], x[1], d_star)[0], [d, var])
        res.record(relative_error(grad, fd), (d, var, d_star))
    return res


def check_compensation_identity(rng, trials: int) -> CheckResult:
    res = CheckResult("w_s * L_size == L1 (relative)", IDENTITY_TOL)
    for _ in range(trials):
        s, s_star = _random_size_pair(rng)
        comp = losses.size_loss_compensated(s, s_star)
        l1 = losses.size_loss_l1(s, s_star)
        res.record(abs(comp.value - l1) / l1, (tuple(s), tuple(s_star)))
    return res


def check_heading_roundtrip(rng, trials: int) -> CheckResult:
    res = CheckResult("heading decode(encode(theta)) == theta mod 2pi", IDENTITY_TOL)
    for _ in range(trials):
        theta = rng.uniform(-4 * math.pi, 4 * math.pi)
        enc = losses.heading_encode(theta)
        back = losses.heading_decode(*enc)
        res.record(abs(math.remainder(back - theta, 2 * math.pi)), (theta,))
    return res


def run_all(seed: int = 0, trials: int = 1000, corrupt: bool = False) -> list[CheckResult]:
    """Run every check with one seeded generator. ``corrupt`` perturbs one gradient (negative control)."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    return [
        check_iou_partials(rng, trials, corrupt=corrupt),
        check_size_loss_iou(rng, trials),
        check_size_loss_iou_full(rng, trials),
        check_depth_laplace(rng, trials),
        check_depth_gaussian(rng, trials),
        check_compensation_identity(rng, trials),
        check_heading_roundtrip(rng, trials),
    ]
