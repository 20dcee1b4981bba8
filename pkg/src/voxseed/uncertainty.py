"""Monte-Carlo uncertainty maps, the ramped reliability threshold, and L_UA.

Teacher uncertainty is the mean predictive entropy over M stochastic forward
passes (dropout on, fresh input noise each pass).  Pseudo labels come from one
extra deterministic pass on weakly noised input, so label quality does not
inherit MC sampling variance.
"""

from dataclasses import dataclass

import numpy as np

from . import net
from .errors import ShapeError
from .losses import RampSchedule, masked_bce, ramp_up
from .volume import Mask3D, ProbMap, Volume3D, add_gaussian_noise, stable_softmax

LN2 = float(np.log(2.0))
ENTROPY_CLIP = 1e-7


def _ln2_bound(dtype):
    # largest value of this dtype that does not exceed ln 2 (float32 rounds up)
    b = np.asarray(LN2, dtype=dtype)
    if float(b) > LN2:
        b = np.nextafter(b, b.dtype.type(0))
    return b


@dataclass
class UncertaintyMap:
    """Per-voxel mean predictive entropy, natural log, in [0, ln 2]."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.data.ndim != 3:
            raise ShapeError(f"uncertainty map must be (H,W,D), got {self.data.shape}")
        if self.data.min() < 0 or self.data.max() > LN2:
            raise ValueError("entropy values outside [0, ln 2]")
        return self

    @property
    def dims(self):
        return self.data.shape


def entropy_map(probs):
    """Per-voxel -sum_c p ln p over the class axis, clamped logs."""
    p = np.clip(probs, ENTROPY_CLIP, 1.0)
    ent = -(p * np.log(p)).sum(axis=0)
    return np.clip(ent, 0.0, _ln2_bound(ent.dtype))


def mc_uncertainty(teacher: net.NetParams, x: Volume3D, m_passes, noise_sigma, rng):
    """Returns (UncertaintyMap, ProbMap, pseudo-label Mask3D) for one volume.

    Runs m_passes stochastic teacher forwards on freshly noised copies of x,
    averages their entropies in pass order, then one deterministic pass on a
    weakly noised copy for the probability map and argmax pseudo labels.
    """
    if m_passes < 1:
        raise ValueError(f"need at least one stochastic pass, got {m_passes}")
    noisy = [add_gaussian_noise(x, noise_sigma, rng).data for _ in range(m_passes + 1)]
    batch = np.stack(noisy)[:, None]
    flags = [True] * m_passes + [False]
    trace = net.forward_batch(teacher, batch, flags, rng)
    probs = stable_softmax(trace.logits, axis=1)
    ent = np.zeros(x.data.shape, np.float32)
    for m in range(m_passes):
        ent += entropy_map(probs[m])
    ent = np.clip(ent / np.float32(m_passes), 0.0, _ln2_bound(ent.dtype))
    det = probs[m_passes]
    pseudo = (det[1] > det[0]).astype(np.uint8)
    return (UncertaintyMap(ent, x.spacing),
            ProbMap(det, x.spacing),
            Mask3D(pseudo, x.spacing))


def uncertainty_threshold(T, t_n):
    """lambda_T = (0.75 + ramp_up(T, 0.25)) * ln 2; T clamps into [0, T_N]."""
    if t_n <= 0:
        raise ValueError(f"total iterations must be positive, got {t_n}")
    return (0.75 + ramp_up(T, RampSchedule(0.25, t_n))) * LN2


def reliability_split(umap: UncertaintyMap, lam):
    """Partition voxels into (reliable, unreliable) masks by H < lambda."""
    rel = (umap.data < lam).astype(np.uint8)
    return (Mask3D(rel, umap.spacing),
            Mask3D((1 - rel).astype(np.uint8), umap.spacing))


def loss_ua(pseudo: Mask3D, student_probs: ProbMap, reliable: Mask3D):
    """Masked mean BCE against teacher pseudo labels over reliable voxels."""
    return masked_bce(pseudo, student_probs, reliable)
