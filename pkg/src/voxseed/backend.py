"""Kernel backend selection and the uniform array-level interface.

The compiled extension is used when importable, the numpy reference kernels
otherwise.  ``VOXSEED_BACKEND=compiled|numpy`` forces a choice (forcing
``compiled`` raises if the extension is missing).  ``VOXSEED_THREADS`` caps
kernel parallelism; 0 or unset lets the runtime decide.

All functions take C-contiguous float32 or float64 batches shaped
``(B, C, H, W, D)``.  Both backends implement identical semantics; only float
summation order differs between them.
"""

import os

import numpy as np

from . import kernels_ref

_kernels = None
_backend_name = "numpy"

_forced = os.environ.get("VOXSEED_BACKEND", "auto").strip().lower() or "auto"
if _forced not in ("auto", "compiled", "numpy"):
    raise ValueError(f"VOXSEED_BACKEND must be auto, compiled or numpy, got {_forced!r}")
if _forced in ("auto", "compiled"):
    try:
        from . import _kernels as _kernels_mod
        _kernels = _kernels_mod
        _backend_name = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise
        _kernels = None


def set_threads(n):
    """Cap kernel thread count; n <= 0 restores the runtime default behaviour."""
    if _kernels is not None and n > 0:
        _kernels.set_threads(int(n))


_env_threads = os.environ.get("VOXSEED_THREADS", "").strip()
if _env_threads:
    set_threads(int(_env_threads))


def backend_name():
    return _backend_name


def has_simd():
    return _kernels is not None and _kernels.has_avx512()


def _check_batch(x, name="x"):
    if x.ndim != 5:
        raise ValueError(f"{name} must be (B,C,H,W,D), got shape {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        raise ValueError(f"{name} must be float32 or float64, got {x.dtype}")
    return np.ascontiguousarray(x)


def _pad_halo(x):
    B, C, H, W, D = x.shape
    xp = np.zeros((B, C, H + 2, W + 2, D + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def conv3x3_forward(x, w, b):
    """3x3x3 convolution, zero padding, stride 1: (B,Ci,H,W,D) -> (B,Co,H,W,D)."""
    x = _check_batch(x)
    if _kernels is None:
        return kernels_ref.conv3x3_forward(x, w, b)
    B, Ci, H, W, D = x.shape
    Co = w.shape[0]
    w = np.ascontiguousarray(w, dtype=x.dtype)
    b = np.ascontiguousarray(b, dtype=x.dtype)
    xp = _pad_halo(x)
    y = np.empty((B, Co, H, W, D), dtype=x.dtype)
    fn = _kernels.conv3_fwd_f32 if x.dtype == np.float32 else _kernels.conv3_fwd_f64
    fn(xp.ravel(), w.ravel(), b.ravel(), y.ravel(), B, Ci, Co, H, W, D)
    return y


def conv3x3_weight_grad(x, dy):
    """Weight and bias gradients of conv3x3_forward, summed over the batch."""
    x = _check_batch(x)
    dy = _check_batch(dy, "dy")
    if _kernels is None:
        return kernels_ref.conv3x3_weight_grad(x, dy)
    B, Ci, H, W, D = x.shape
    Co = dy.shape[1]
    xp = _pad_halo(x)
    dw = np.zeros((Co, Ci, 3, 3, 3), dtype=x.dtype)
    db = np.zeros(Co, dtype=x.dtype)
    fn = _kernels.conv3_wgrad_f32 if x.dtype == np.float32 else _kernels.conv3_wgrad_f64
    fn(xp.ravel(), dy.ravel(), dw.ravel(), db.ravel(), B, Ci, Co, H, W, D)
    return dw, db


def conv3x3_input_grad(dy, w):
    """Input gradient of conv3x3_forward.

    Equals a forward pass of dy through the channel-transposed, spatially
    flipped kernel with zero bias.
    """
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    return conv3x3_forward(dy, wt, np.zeros(wt.shape[0], dtype=dy.dtype))


def maxpool2(x):
    """2x max pooling with argmax codes for the backward pass."""
    x = _check_batch(x)
    if _kernels is None:
        return kernels_ref.maxpool2(x)
    B, C, H, W, D = x.shape
    y = np.empty((B, C, H // 2, W // 2, D // 2), dtype=x.dtype)
    idx = np.empty((B, C, H // 2, W // 2, D // 2), dtype=np.uint8)
    fn = _kernels.pool2_fwd_f32 if x.dtype == np.float32 else _kernels.pool2_fwd_f64
    fn(x.ravel(), y.ravel(), idx.ravel(), B, C, H, W, D)
    return y, idx


def maxpool2_backward(dy, idx, in_shape):
    dy = _check_batch(dy, "dy")
    if _kernels is None:
        return kernels_ref.maxpool2_backward(dy, idx, in_shape)
    B, C, H, W, D = in_shape
    dx = np.empty(in_shape, dtype=dy.dtype)
    fn = _kernels.pool2_bwd_f32 if dy.dtype == np.float32 else _kernels.pool2_bwd_f64
    fn(dy.ravel(), np.ascontiguousarray(idx).ravel(), dx.ravel(), B, C, H, W, D)
    return dx


def upsample2(x):
    """Nearest-neighbour doubling of all spatial axes."""
    x = _check_batch(x)
    if _kernels is None:
        return kernels_ref.upsample2(x)
    B, C, H, W, D = x.shape
    y = np.empty((B, C, 2 * H, 2 * W, 2 * D), dtype=x.dtype)
    fn = _kernels.upsample2_fwd_f32 if x.dtype == np.float32 else _kernels.upsample2_fwd_f64
    fn(x.ravel(), y.ravel(), B, C, H, W, D)
    return y


def upsample2_backward(dy):
    dy = _check_batch(dy, "dy")
    if _kernels is None:
        return kernels_ref.upsample2_backward(dy)
    B, C, H2, W2, D2 = dy.shape
    dx = np.empty((B, C, H2 // 2, W2 // 2, D2 // 2), dtype=dy.dtype)
    fn = _kernels.upsample2_bwd_f32 if dy.dtype == np.float32 else _kernels.upsample2_bwd_f64
    fn(dy.ravel(), dx.ravel(), B, C, H2 // 2, W2 // 2, D2 // 2)
    return dx


# 1x1x1 convolutions are plain channel contractions; numpy handles them on
# either backend.

def conv1x1_forward(x, w, b):
    """(B,C,H,W,D) x (O,C) + (O,) -> (B,O,H,W,D)."""
    y = np.tensordot(x, w, axes=([1], [1]))
    y += b
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def conv1x1_weight_grad(x, dy):
    dw = np.tensordot(dy, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    db = dy.sum(axis=(0, 2, 3, 4))
    return dw, db


def conv1x1_input_grad(dy, w):
    dx = np.tensordot(dy, w, axes=([1], [0]))
    return np.ascontiguousarray(np.moveaxis(dx, -1, 1))
