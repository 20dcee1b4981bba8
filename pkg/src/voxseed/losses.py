"""Ramp-up schedule, supervised loss terms, and total-loss assembly.

Every loss returns (value, gradient) where the gradient is taken with respect
to the student logits that produced the probability input, shaped like the
ProbMap.  Keeping the softmax chain inside each loss makes the gradients exact
and numerically tame: cross-entropy collapses to (p - onehot)/N.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingDivergenceError
from .volume import Mask3D, ProbMap

PROB_CLIP = 1e-7
DICE_EPS = 1e-5


@dataclass
class RampSchedule:
    """Gaussian warm-up curve reaching scale s at iteration t_n."""

    s: float
    t_n: int

    def validate(self):
        if self.s < 0:
            raise ValueError(f"ramp scale must be >= 0, got {self.s}")
        if self.t_n < 1:
            raise ValueError(f"ramp length must be >= 1, got {self.t_n}")
        return self


def ramp_up(T, sched: RampSchedule):
    """s * exp(-5 (1 - T/T_N)^2) with T clamped into [0, T_N]."""
    t = min(max(float(T), 0.0), float(sched.t_n))
    r = 1.0 - t / sched.t_n
    return sched.s * np.exp(-5.0 * r * r)


def _check_pair(probs: ProbMap, m: Mask3D, what):
    if probs.data.ndim != 4 or probs.data.shape[0] != 2:
        raise ShapeError(f"probabilities must be (2,H,W,D), got {probs.data.shape}")
    if m.data.shape != probs.data.shape[1:]:
        raise ShapeError(f"{what} shape {m.data.shape} does not match volume {probs.data.shape[1:]}")


def masked_bce(target: Mask3D, student_probs: ProbMap, mask: Mask3D):
    """Mean of -ln p(target class) over mask voxels, with logit gradient.

    Returns 0 with a zero gradient when the mask is empty.  Voxels whose
    target-class probability sits below the log clip contribute no gradient,
    matching the value actually computed.
    """
    _check_pair(student_probs, target, "target")
    _check_pair(student_probs, mask, "mask")
    p = student_probs.data
    g = np.zeros_like(p)
    n = int(mask.data.sum())
    if n == 0:
        return 0.0, g
    fg = target.data == 1
    pt = np.where(fg, p[1], p[0])
    inside = mask.data != 0
    val = -float(np.log(np.clip(pt[inside], PROB_CLIP, 1.0)).sum(dtype=np.float64)) / n
    active = inside & (pt >= PROB_CLIP)
    scale = p.dtype.type(1.0 / n)
    g[0] = (p[0] - (~fg)) * active * scale
    g[1] = (p[1] - fg) * active * scale
    return val, g


def dice_loss(student_probs: ProbMap, y: Mask3D):
    """Soft Dice on the foreground channel with epsilon smoothing."""
    _check_pair(student_probs, y, "labels")
    p = student_probs.data
    p1 = p[1]
    yv = y.data.astype(p.dtype)
    a = float((p1 * yv).sum(dtype=np.float64))
    b = float(p1.sum(dtype=np.float64))
    gsum = float(yv.sum(dtype=np.float64))
    num = 2.0 * a + DICE_EPS
    den = b + gsum + DICE_EPS
    val = 1.0 - num / den
    # d val / d p1 = -(2 y den - num) / den^2, then through the softmax
    d_p1 = -(2.0 * yv * den - num) / (den * den)
    dz1 = (d_p1 * p1 * p[0]).astype(p.dtype)
    g = np.stack([-dz1, dz1])
    return val, g


def cross_entropy_loss(student_probs: ProbMap, y: Mask3D):
    """Mean voxelwise cross-entropy against hard labels, with logit gradient."""
    _check_pair(student_probs, y, "labels")
    ones = Mask3D(np.ones(y.data.shape, np.uint8), y.spacing)
    return masked_bce(y, student_probs, ones)


def supervised_loss(student_probs: ProbMap, y: Mask3D):
    """Cross-entropy plus soft Dice, equal unit weights."""
    ce, g_ce = cross_entropy_loss(student_probs, y)
    dc, g_dc = dice_loss(student_probs, y)
    return ce + dc, g_ce + g_dc


@dataclass
class LossReport:
    """Per-iteration loss breakdown; counts hold per-term voxel totals."""

    l_s: float
    l_ua: float
    l_nn: float
    l_en: float
    w_ua: float
    w_ps: float
    l_total: float
    counts: dict = field(default_factory=dict)

    def json_line(self, iteration, reliable_fraction):
        return json.dumps({
            "iter": int(iteration),
            "L_S": self.l_s,
            "L_UA": self.l_ua,
            "L_NN": self.l_nn,
            "L_EN": self.l_en,
            "w_UA": self.w_ua,
            "w_PS": self.w_ps,
            "L_total": self.l_total,
            "reliable_fraction": reliable_fraction,
        })


def total_loss(l_s, l_ua, l_nn, l_en, T, t_n,
               w_ua_max=0.25, w_ps_max=0.125) -> LossReport:
    """Assemble L = L_S + w_UA L_UA + w_PS (L_NN + L_EN) at iteration T."""
    terms = (l_s, l_ua, l_nn, l_en)
    if not all(np.isfinite(t) for t in terms):
        raise TrainingDivergenceError(f"non-finite loss terms {terms}")
    w_ua = ramp_up(T, RampSchedule(w_ua_max, t_n))
    w_ps = ramp_up(T, RampSchedule(w_ps_max, t_n))
    l_tot = l_s + w_ua * l_ua + w_ps * (l_nn + l_en)
    if not np.isfinite(l_tot):
        raise TrainingDivergenceError(f"non-finite total loss from terms {terms}")
    return LossReport(float(l_s), float(l_ua), float(l_nn), float(l_en),
                      float(w_ua), float(w_ps), float(l_tot))
