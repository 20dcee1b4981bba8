"""Dense 3D containers, elementwise utilities and the VV1 tensor file format.

Arrays are C-order with axes (H, W, D) for scalar grids and (C, H, W, D) for
feature maps: channel-major, H-major, D fastest.  Intensities and features are
float32, masks uint8 with values in {0, 1}.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class Volume3D:
    """Scalar intensity volume with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be (H,W,D), got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ShapeError(f"volume data must be float32, got {self.data.dtype}")
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")
        return self

    @property
    def dims(self):
        return self.data.shape


@dataclass
class Mask3D:
    """Binary segmentation mask."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.data.ndim != 3:
            raise ShapeError(f"mask data must be (H,W,D), got {self.data.shape}")
        if self.data.dtype != np.uint8:
            raise ShapeError(f"mask data must be uint8, got {self.data.dtype}")
        bad = (self.data > 1).sum()
        if bad:
            raise ValueError(f"mask holds {bad} values outside {{0,1}}")
        return self

    @property
    def dims(self):
        return self.data.shape


@dataclass
class FeatureMap:
    """Per-voxel embedding stack, shape (C, H, W, D)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.data.ndim != 4:
            raise ShapeError(f"feature data must be (C,H,W,D), got {self.data.shape}")
        return self

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]


@dataclass
class ProbMap:
    """Two-class per-voxel probabilities, shape (2, H, W, D)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.data.ndim != 4 or self.data.shape[0] != 2:
            raise ShapeError(f"probability data must be (2,H,W,D), got {self.data.shape}")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("probabilities outside [0, 1]")
        sums = self.data.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("per-voxel class probabilities do not sum to 1")
        return self

    @property
    def dims(self):
        return self.data.shape[1:]


def add_gaussian_noise(v: Volume3D, sigma, rng) -> Volume3D:
    """Return a copy of v with i.i.d. N(0, sigma^2) noise added per voxel.

    sigma = 0 is a plain copy and consumes no randomness.
    """
    if not np.isfinite(sigma) or sigma < 0:
        raise ValueError(f"noise sigma must be finite and >= 0, got {sigma}")
    if sigma == 0:
        return Volume3D(v.data.copy(), v.spacing)
    noise = rng.standard_normal(v.data.shape, dtype=v.data.dtype)
    noise *= v.data.dtype.type(sigma)
    return Volume3D(v.data + noise, v.spacing)


def stable_softmax(z, axis):
    """Softmax along `axis` with max-shift; exact for any finite input."""
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax_over_classes(logits: FeatureMap) -> ProbMap:
    if logits.data.ndim != 4 or logits.data.shape[0] != 2:
        raise ShapeError(f"expected (2,H,W,D) logits, got {logits.data.shape}")
    return ProbMap(stable_softmax(logits.data, axis=0), logits.spacing)


def masked_mean(values, mask) -> float:
    """Mean of values where mask is 1; exactly 0 when the mask is empty."""
    mdata = mask.data if isinstance(mask, Mask3D) else mask
    if values.shape != mdata.shape:
        raise ShapeError(f"values {values.shape} vs mask {mdata.shape}")
    count = int(mdata.sum())
    if count == 0:
        return 0.0
    return float((values * mdata).sum() / count)


# ---------------------------------------------------------------------------
# VV1 on-disk tensor format
# ---------------------------------------------------------------------------
# magic `VVOL`, LE u32 version = 1, u8 dtype (0 = f32, 1 = u8), u8 rank,
# rank x u32 dims (C first when rank = 4, then H, W, D), 3 x f32 spacing in mm,
# raw C-order data.

_VV1_MAGIC = b"VVOL"
_VV1_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_VV1_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


def write_vv1(path, data, spacing=(1.0, 1.0, 1.0)):
    data = np.ascontiguousarray(data)
    if data.dtype not in _VV1_CODES:
        raise ValueError(f"VV1 stores float32 or uint8, got {data.dtype}")
    if data.ndim not in (3, 4):
        raise ShapeError(f"VV1 stores rank 3 or 4 tensors, got rank {data.ndim}")
    with open(path, "wb") as fh:
        fh.write(_VV1_MAGIC)
        fh.write(struct.pack("<IBB", 1, _VV1_CODES[data.dtype], data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(struct.pack("<3f", *spacing))
        fh.write(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes())


def read_vv1(path):
    """Read a VV1 file, returning (array, spacing)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _VV1_MAGIC:
            raise ValueError(f"{path}: not a VV1 file (magic {magic!r})")
        version, code, rank = struct.unpack("<IBB", fh.read(6))
        if version != 1:
            raise ValueError(f"{path}: unsupported VV1 version {version}")
        if code not in _VV1_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        if rank not in (3, 4):
            raise ShapeError(f"{path}: unsupported rank {rank}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        spacing = struct.unpack("<3f", fh.read(12))
        dtype = _VV1_DTYPES[code]
        n = int(np.prod(dims))
        raw = fh.read(n * dtype.itemsize)
        if len(raw) != n * dtype.itemsize:
            raise ValueError(f"{path}: truncated VV1 payload")
        data = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return np.ascontiguousarray(data), tuple(float(s) for s in spacing)


def save_volume(path, v: Volume3D):
    write_vv1(path, v.data, v.spacing)


def load_volume(path) -> Volume3D:
    data, spacing = read_vv1(path)
    if data.dtype != np.float32 or data.ndim != 3:
        raise ShapeError(f"{path}: expected rank-3 float32 volume")
    return Volume3D(data, spacing)


def save_mask(path, m: Mask3D):
    write_vv1(path, m.data, m.spacing)


def load_mask(path) -> Mask3D:
    data, spacing = read_vv1(path)
    if data.dtype != np.uint8 or data.ndim != 3:
        raise ShapeError(f"{path}: expected rank-3 uint8 mask")
    return Mask3D(data, spacing)
