"""Numpy reference implementations of the volume kernels.

Same contracts as the compiled extension: batches are C-contiguous
``(B, C, H, W, D)`` arrays with the depth axis innermost.  Convolution runs
over im2col + matmul, so float accumulation order differs from the compiled
path; results agree to rounding, not bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w, b):
    """3x3x3 convolution with zero padding, stride 1.

    x (B,Ci,H,W,D), w (Co,Ci,3,3,3), b (Co) -> y (B,Co,H,W,D).
    """
    B, Ci, H, W, D = x.shape
    Co = w.shape[0]
    xp = np.zeros((B, Ci, H + 2, W + 2, D + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    col = win.reshape(B, Ci, H * W * D, 27)
    col = np.ascontiguousarray(col.transpose(0, 2, 1, 3)).reshape(B, H * W * D, Ci * 27)
    y = col @ w.reshape(Co, Ci * 27).T
    y += b
    return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(B, Co, H, W, D)


def conv3x3_weight_grad(x, dy):
    """Gradient of conv3x3_forward wrt weights and bias, summed over the batch."""
    B, Ci, H, W, D = x.shape
    Co = dy.shape[1]
    xp = np.zeros((B, Ci, H + 2, W + 2, D + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    col = win.reshape(B, Ci, H * W * D, 27)
    col = np.ascontiguousarray(col.transpose(0, 2, 1, 3)).reshape(B, H * W * D, Ci * 27)
    dyf = dy.reshape(B, Co, H * W * D)
    dw = np.matmul(dyf, col).sum(axis=0).reshape(Co, Ci, 3, 3, 3)
    db = dy.sum(axis=(0, 2, 3, 4))
    return dw, db


def maxpool2(x):
    """2x max pooling; returns pooled values and in-window argmax codes.

    Ties resolve to the lowest code, matching the compiled kernel.  The code
    enumerates window offsets (a,b,c) as a*4+b*2+c.
    """
    B, C, H, W, D = x.shape
    xw = x.reshape(B, C, H // 2, 2, W // 2, 2, D // 2, 2)
    xw = np.ascontiguousarray(xw.transpose(0, 1, 2, 4, 6, 3, 5, 7))
    xw = xw.reshape(B, C, H // 2, W // 2, D // 2, 8)
    idx = xw.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(dy, idx, in_shape):
    B, C, H, W, D = in_shape
    win = np.zeros(dy.shape + (8,), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    win = win.reshape(B, C, H // 2, W // 2, D // 2, 2, 2, 2)
    win = win.transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(win.reshape(B, C, H, W, D))


def upsample2(x):
    """Nearest-neighbour doubling along all three spatial axes."""
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4))


def upsample2_backward(dy):
    B, C, H2, W2, D2 = dy.shape
    r = dy.reshape(B, C, H2 // 2, 2, W2 // 2, 2, D2 // 2, 2)
    return np.ascontiguousarray(r.sum(axis=(3, 5, 7)))
