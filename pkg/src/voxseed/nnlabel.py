"""Nearest-neighbor label propagation over voxel embeddings.

Labeled-surface voxels donate teacher embeddings; every unlabeled-image voxel
is scored against the object and background embedding sets under a similarity
kernel, the scores are reduced over the k samples, and an ensemble of l
independent draws is averaged.  The resulting K maps drive a hard pseudo
label (detached) and a differentiable entropy term whose gradient flows back
into the student feature map only.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import xlogy

from .errors import NoSurfaceError, ShapeError
from .losses import masked_bce
from .volume import FeatureMap, Mask3D, ProbMap, masked_mean

NORM_GUARD = 1e-12


@dataclass
class KernelChoice:
    kernel: str = "cosine"
    reducer: str = "mean"

    def validate(self):
        if self.kernel not in ("cosine", "euclidean"):
            raise ValueError(f"kernel must be cosine or euclidean, got {self.kernel!r}")
        if self.reducer not in ("mean", "max"):
            raise ValueError(f"reducer must be mean or max, got {self.reducer!r}")
        return self


@dataclass
class EmbeddingSet:
    """k embedding columns sampled from one polarity of a labeled mask."""

    embeddings: np.ndarray
    polarity: str
    indices: np.ndarray

    @property
    def k(self):
        return self.embeddings.shape[1]

    def validate(self):
        if self.embeddings.ndim != 2 or self.k < 1:
            raise ShapeError(f"embeddings must be (C, k>=1), got {self.embeddings.shape}")
        if self.polarity not in ("object", "background"):
            raise ValueError(f"polarity must be object or background, got {self.polarity!r}")
        return self


def surface_band_sample(y: Mask3D, k, band, rng):
    """Sample k object and k background voxel indices within `band` (in voxel
    units, Euclidean) of the opposite class.  Without replacement, falling
    back to replacement when the band holds fewer than k candidates; object
    indices are drawn before background ones."""
    if k < 1 or band < 1:
        raise ValueError(f"need k >= 1 and band >= 1, got k={k} band={band}")
    inside = y.data != 0
    if inside.all() or not inside.any():
        raise NoSurfaceError("mask has no surface: it is entirely one class")
    d_to_bg = ndimage.distance_transform_edt(inside)
    d_to_fg = ndimage.distance_transform_edt(~inside)
    obj_cand = np.argwhere(inside & (d_to_bg <= band))
    bg_cand = np.argwhere(~inside & (d_to_fg <= band))

    def draw(cand):
        n = cand.shape[0]
        sel = rng.choice(n, size=k, replace=(n < k))
        return cand[sel]

    return draw(obj_cand), draw(bg_cand)


def gather_embeddings(f: FeatureMap, indices, polarity="object") -> EmbeddingSet:
    """Column j of the result is f[:, indices[j]]."""
    idx = np.asarray(indices)
    if idx.ndim != 2 or idx.shape[1] != 3:
        raise ShapeError(f"indices must be (k, 3), got {idx.shape}")
    dims = np.asarray(f.data.shape[1:])
    if (idx < 0).any() or (idx >= dims).any():
        raise IndexError(f"voxel indices out of bounds for dims {tuple(dims)}")
    emb = f.data[:, idx[:, 0], idx[:, 1], idx[:, 2]]
    return EmbeddingSet(emb, polarity, idx).validate()


@dataclass
class _RunCache:
    kernel: str
    reducer: str
    emb: np.ndarray        # (C, k)
    vals: np.ndarray       # (N,) this run's reduced similarities
    qn: np.ndarray = None  # (N,) voxel norms, cosine only
    unit: np.ndarray = None  # (C, k) normalized embeddings, cosine only
    jstar: np.ndarray = None  # (N,) winning column, max reducer
    dist: np.ndarray = None   # (k, N) pairwise distances, euclidean mean


@dataclass
class SimilarityMap:
    """Reduced per-voxel similarity, plus what backward needs per run."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    runs: list = field(default_factory=list)
    features: np.ndarray = None

    @property
    def dims(self):
        return self.values.shape


def _similarity_run(embset: EmbeddingSet, q, choice: KernelChoice):
    """Scores one run; q is the flattened (C, N) feature matrix."""
    emb = embset.embeddings
    if choice.kernel == "cosine":
        en = np.linalg.norm(emb, axis=0)
        unit = np.where(en > NORM_GUARD, emb / np.maximum(en, NORM_GUARD), 0.0)
        qn = np.linalg.norm(q, axis=0)
        ok = qn > NORM_GUARD
        qhat = np.where(ok, q / np.maximum(qn, NORM_GUARD), 0.0)
        scores = unit.T @ qhat
        cache = _RunCache(choice.kernel, choice.reducer, emb, None, qn=qn, unit=unit)
    else:
        en2 = (emb * emb).sum(axis=0)
        qn2 = (q * q).sum(axis=0)
        d2 = np.maximum(en2[:, None] + qn2[None, :] - 2.0 * (emb.T @ q), 0.0)
        dist = np.sqrt(d2)
        scores = 1.0 / (1.0 + dist)
        cache = _RunCache(choice.kernel, choice.reducer, emb, None)
    if choice.reducer == "mean":
        vals = scores.mean(axis=0)
        if choice.kernel == "euclidean":
            cache.dist = dist
    else:
        jstar = np.argmax(scores, axis=0)
        vals = np.take_along_axis(scores, jstar[None], axis=0)[0]
        cache.jstar = jstar
        if choice.kernel == "euclidean":
            cache.dist = np.take_along_axis(dist, jstar[None], axis=0)[0]
    cache.vals = vals
    return vals, cache


def dense_similarity(embset: EmbeddingSet, f_u: FeatureMap, choice: KernelChoice) -> SimilarityMap:
    """Reduced similarity of every voxel embedding against the sample set."""
    choice.validate()
    embset.validate()
    if embset.embeddings.shape[0] != f_u.channels:
        raise ShapeError(f"embedding channels {embset.embeddings.shape[0]} "
                         f"do not match features {f_u.channels}")
    q = f_u.data.reshape(f_u.channels, -1)
    vals, cache = _similarity_run(embset, q, choice)
    return SimilarityMap(vals.reshape(f_u.dims), f_u.spacing, [cache], q)


def _run_backward(cache: _RunCache, q, d_vals):
    """Gradient of (d_vals . run values) wrt q, shape (C, N)."""
    if cache.kernel == "cosine":
        qn = cache.qn
        ok = qn > NORM_GUARD
        w = np.where(ok, d_vals / np.maximum(qn, NORM_GUARD), 0.0)
        if cache.reducer == "mean":
            ubar = cache.unit.mean(axis=1)
            num = ubar[:, None] * w[None, :]
        else:
            num = cache.unit[:, cache.jstar] * w[None, :]
        coef = np.where(ok, cache.vals * w / np.maximum(qn, NORM_GUARD), 0.0)
        return num - q * coef[None, :]
    # euclidean: d s/d q = -s^2 (q - e_j) / d_j, zero at coincident points
    if cache.reducer == "mean":
        s = 1.0 / (1.0 + cache.dist)
        c = np.where(cache.dist > NORM_GUARD,
                     s * s / np.maximum(cache.dist, NORM_GUARD), 0.0)
        c *= d_vals[None, :] / cache.emb.shape[1]
        return cache.emb @ c - q * c.sum(axis=0)[None, :]
    s = 1.0 / (1.0 + cache.dist)
    c = np.where(cache.dist > NORM_GUARD,
                 s * s / np.maximum(cache.dist, NORM_GUARD), 0.0) * d_vals
    return cache.emb[:, cache.jstar] * c[None, :] - q * c[None, :]


def similarity_backward(sim: SimilarityMap, d_values) -> np.ndarray:
    """Chain a cotangent on sim.values back to the student feature map."""
    if d_values.shape != sim.values.shape:
        raise ShapeError(f"cotangent shape {d_values.shape} vs map {sim.values.shape}")
    dv = np.ascontiguousarray(d_values, dtype=sim.features.dtype).ravel()
    dv = dv / len(sim.runs)
    out = np.zeros_like(sim.features)
    for cache in sim.runs:
        out += _run_backward(cache, sim.features, dv)
    c = sim.features.shape[0]
    return out.reshape((c,) + sim.values.shape)


def ensemble_similarity(y: Mask3D, f_l: FeatureMap, f_u: FeatureMap,
                        k, l, band, choice: KernelChoice, rng):
    """l independent sample-gather-score rounds, averaged per polarity.

    Embeddings come from the teacher features of the labeled image (f_l);
    scores are taken against the student features of the unlabeled one (f_u).
    """
    if l < 1:
        raise ValueError(f"ensemble size must be >= 1, got {l}")
    choice.validate()
    if f_l.channels != f_u.channels:
        raise ShapeError(f"labeled features have {f_l.channels} channels, "
                         f"unlabeled {f_u.channels}")
    q = f_u.data.reshape(f_u.channels, -1)
    acc_p = acc_m = None
    runs_p, runs_m = [], []
    for _ in range(l):
        obj_idx, bg_idx = surface_band_sample(y, k, band, rng)
        e_obj = gather_embeddings(f_l, obj_idx, "object")
        e_bg = gather_embeddings(f_l, bg_idx, "background")
        vp, cp = _similarity_run(e_obj, q, choice)
        vm, cm = _similarity_run(e_bg, q, choice)
        acc_p = vp if acc_p is None else acc_p + vp
        acc_m = vm if acc_m is None else acc_m + vm
        runs_p.append(cp)
        runs_m.append(cm)
    shape = f_u.dims
    k_plus = SimilarityMap((acc_p / l).reshape(shape), f_u.spacing, runs_p, q)
    k_minus = SimilarityMap((acc_m / l).reshape(shape), f_u.spacing, runs_m, q)
    return k_plus, k_minus


def pseudo_label_nn(k_plus: SimilarityMap, k_minus: SimilarityMap) -> Mask3D:
    """1 where K+ strictly exceeds K-; ties fall to background.  Detached."""
    if k_plus.values.shape != k_minus.values.shape:
        raise ShapeError(f"similarity dims differ: {k_plus.values.shape} "
                         f"vs {k_minus.values.shape}")
    return Mask3D((k_plus.values > k_minus.values).astype(np.uint8), k_plus.spacing)


def loss_nn(y_nn: Mask3D, student_probs: ProbMap, unreliable: Mask3D):
    """Masked mean BCE against the propagated labels over unreliable voxels."""
    return masked_bce(y_nn, student_probs, unreliable)


def loss_entropy_min(k_plus: SimilarityMap, k_minus: SimilarityMap, mask: Mask3D = None):
    """Binary entropy of softmax(K+, K-), averaged over the volume.

    Returns (value, d_kplus, d_kminus); the cotangents are dense (H, W, D)
    grids to be chained through similarity_backward.  A mask restricts the
    average to selected voxels (empty mask gives zero loss and gradients).
    """
    if k_plus.values.shape != k_minus.values.shape:
        raise ShapeError(f"similarity dims differ: {k_plus.values.shape} "
                         f"vs {k_minus.values.shape}")
    z = k_plus.values - k_minus.values
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    ent = -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))
    dent_dz = -z * p * (1.0 - p)
    if mask is None:
        val = float(ent.mean(dtype=np.float64))
        weight = 1.0 / ent.size
        d_kp = dent_dz * weight
    else:
        if mask.data.shape != z.shape:
            raise ShapeError(f"mask shape {mask.data.shape} vs map {z.shape}")
        val = masked_mean(ent, mask)
        n = int(mask.data.sum())
        if n == 0:
            zeros = np.zeros_like(z)
            return 0.0, zeros, zeros.copy()
        d_kp = dent_dz * (mask.data != 0) / n
    return val, d_kp, -d_kp
