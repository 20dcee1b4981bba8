"""Overlap and surface-distance metrics for binary volume masks.

HD95 is the maximum of the two directed 95th-percentile surface distances,
nearest-rank percentile, computed on 6-connected boundary voxels with exact
anisotropic Euclidean distances in mm.
"""

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, ShapeError
from .volume import Mask3D


def _mask_array(m):
    return m.data if isinstance(m, Mask3D) else np.asarray(m)


def iou(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    p = _mask_array(pred).astype(bool)
    g = _mask_array(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def extract_surface(m):
    """Boundary voxels of a mask: value 1 with some 6-connected 0 neighbor.

    Voxels on the volume border count their out-of-volume neighbors as 0.
    Returns an (n, 3) index array in lexicographic order.
    """
    arr = _mask_array(m).astype(bool)
    if arr.ndim != 3:
        raise ShapeError(f"mask must be rank 3, got {arr.shape}")
    if not arr.any():
        raise EmptyMaskError("cannot extract the surface of an empty mask")
    padded = np.pad(arr, 1)
    interior = padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
    interior &= padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
    interior &= padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2]
    return np.argwhere(arr & ~interior)


def distance_transform(m, spacing=(1.0, 1.0, 1.0)):
    """Exact Euclidean distance in mm from every voxel to the nearest mask voxel."""
    arr = _mask_array(m).astype(bool)
    if not arr.any():
        raise EmptyMaskError("distance transform undefined for an empty mask")
    dist = ndimage.distance_transform_edt(~arr, sampling=spacing)
    return dist.astype(np.float32)


def _nearest_rank_p95(values):
    # ceil(0.95 n)-th order statistic, 1-indexed
    v = np.sort(values)
    rank = int(np.ceil(0.95 * v.size))
    return float(v[rank - 1])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th-percentile symmetric surface distance in mm."""
    p = _mask_array(pred)
    g = _mask_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")
    if not p.any() or not g.any():
        raise EmptyMaskError("hd95 undefined when either mask is empty")
    ps = extract_surface(p)
    gs = extract_surface(g)
    p_surf = np.zeros(p.shape, dtype=bool)
    p_surf[tuple(ps.T)] = True
    g_surf = np.zeros(g.shape, dtype=bool)
    g_surf[tuple(gs.T)] = True
    d_to_g = distance_transform(g_surf, spacing)
    d_to_p = distance_transform(p_surf, spacing)
    d_a = d_to_g[tuple(ps.T)]
    d_b = d_to_p[tuple(gs.T)]
    return max(_nearest_rank_p95(d_a), _nearest_rank_p95(d_b))


def volume_diagonal_mm(dims, spacing=(1.0, 1.0, 1.0)) -> float:
    """Largest voxel-center-to-voxel-center distance in the grid, in mm."""
    return float(np.sqrt(sum(((d - 1) * s) ** 2 for d, s in zip(dims, spacing))))
