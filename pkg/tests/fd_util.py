"""Central-difference gradient helpers shared by the gradient checks."""

import numpy as np


def numeric_param_grad(loss_fn, params, name, flat_index, h):
    """d loss / d params.tensors[name].flat[flat_index] by central difference.

    loss_fn must be a pure function of the params (re-seed any rng inside).
    """
    p_plus = params.copy()
    p_plus.tensors[name].flat[flat_index] += h
    p_minus = params.copy()
    p_minus.tensors[name].flat[flat_index] -= h
    return (loss_fn(p_plus) - loss_fn(p_minus)) / (2.0 * h)


def numeric_array_grad(loss_fn, x, flat_index, h):
    """d loss / d x.flat[flat_index] by central difference on a copy of x."""
    xp = x.copy()
    xp.flat[flat_index] += h
    xm = x.copy()
    xm.flat[flat_index] -= h
    return (loss_fn(xp) - loss_fn(xm)) / (2.0 * h)


def rel_err(analytic, numeric, floor=1e-8):
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def sample_coords(rng, shapes, per_tensor):
    """A few (name, flat_index) probes per tensor, at most per_tensor each."""
    coords = []
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        take = min(per_tensor, n)
        for flat in rng.choice(n, size=take, replace=False):
            coords.append((name, int(flat)))
    return coords
