"""Benchmark the compiled layer kernels against the pure-numpy reference.

Times each hot kernel on shapes matching the training workload (batch of
two 32-cube volumes through a 3-level encoder/decoder) and cross-checks
the outputs of both implementations while it is at it.

Run from a checkout or an installed tree:

    python3 scripts/bench_backends.py
    python3 scripts/bench_backends.py --dtype float64 --repeats 7
"""
import argparse
import time

import numpy as np

from voxseed import backend, kernels_ref, net


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def flat_max_diff(a, b):
    if isinstance(a, tuple):
        return max(flat_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def bench_kernels(dtype, repeats, rng):
    # shapes walk the levels of the training net: stem, both encoder
    # stages, bottleneck, and the matching pool/upsample hand-offs
    conv_shapes = [
        ("conv3x3 1->8 @32^3", (2, 1, 32, 32, 32), 8),
        ("conv3x3 8->8 @32^3", (2, 8, 32, 32, 32), 8),
        ("conv3x3 16->16 @16^3", (2, 16, 16, 16, 16), 16),
        ("conv3x3 32->32 @8^3", (2, 32, 8, 8, 8), 32),
    ]
    rows = []
    for label, xs, co in conv_shapes:
        x = rng.standard_normal(xs).astype(dtype)
        w = rng.standard_normal((co, xs[1], 3, 3, 3)).astype(dtype) * 0.1
        b = rng.standard_normal(co).astype(dtype) * 0.1
        dy = rng.standard_normal((xs[0], co) + xs[2:]).astype(dtype)

        tc, yc = best_of(lambda: backend.conv3x3_forward(x, w, b), repeats)
        tr, yr = best_of(lambda: kernels_ref.conv3x3_forward(x, w, b), repeats)
        rows.append((label + " fwd", tc, tr, flat_max_diff(yc, yr)))

        tc, gc = best_of(lambda: backend.conv3x3_weight_grad(x, dy), repeats)
        tr, gr = best_of(lambda: kernels_ref.conv3x3_weight_grad(x, dy), repeats)
        rows.append((label + " wgrad", tc, tr, flat_max_diff(gc, gr)))

        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
        zb = np.zeros(wt.shape[0], dtype=dtype)
        tc, xc = best_of(lambda: backend.conv3x3_input_grad(dy, w), repeats)
        tr, xr = best_of(lambda: kernels_ref.conv3x3_forward(dy, wt, zb), repeats)
        rows.append((label + " igrad", tc, tr, flat_max_diff(xc, xr)))

    for label, xs in [("pool/upsample 8ch @32^3", (2, 8, 32, 32, 32)),
                      ("pool/upsample 16ch @16^3", (2, 16, 16, 16, 16))]:
        x = rng.standard_normal(xs).astype(dtype)
        tc, (yc, ic) = best_of(lambda: backend.maxpool2(x), repeats)
        tr, (yr, ir) = best_of(lambda: kernels_ref.maxpool2(x), repeats)
        rows.append((label + " pool", tc, tr, flat_max_diff(yc, yr)))

        dy = rng.standard_normal(yc.shape).astype(dtype)
        tc, dc = best_of(lambda: backend.maxpool2_backward(dy, ic, xs), repeats)
        tr, dr = best_of(lambda: kernels_ref.maxpool2_backward(dy, ir, xs), repeats)
        rows.append((label + " pool bwd", tc, tr, flat_max_diff(dc, dr)))

        half = rng.standard_normal((xs[0], xs[1]) + tuple(s // 2 for s in xs[2:]))
        half = half.astype(dtype)
        tc, uc = best_of(lambda: backend.upsample2(half), repeats)
        tr, ur = best_of(lambda: kernels_ref.upsample2(half), repeats)
        rows.append((label + " upsample", tc, tr, flat_max_diff(uc, ur)))

        tc, bc = best_of(lambda: backend.upsample2_backward(x), repeats)
        tr, br = best_of(lambda: kernels_ref.upsample2_backward(x), repeats)
        rows.append((label + " upsample bwd", tc, tr, flat_max_diff(bc, br)))
    return rows


def bench_net(dtype, repeats, rng):
    cfg = net.NetConfig(levels=3, base_filters=8)
    params = net.he_init(cfg, rng, dtype=dtype)
    x = rng.standard_normal((2, 1, 32, 32, 32)).astype(dtype)

    def step():
        tr = net.forward_batch(params, x, True, np.random.default_rng(0),
                               need_cache=True)
        d = np.ones_like(tr.logits)
        net.backward_batch(tr, d)
        return tr.logits

    t, _ = best_of(step, repeats)
    return t


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    dtype = np.dtype(args.dtype).type
    rng = np.random.default_rng(args.seed)
    print(f"active backend: {backend.backend_name()} "
          f"(simd: {backend.has_simd()}), dtype {args.dtype}, "
          f"best of {args.repeats}")
    if backend.backend_name() != "compiled":
        print("compiled extension not loaded; both columns run the reference")

    rows = bench_kernels(dtype, args.repeats, rng)
    name_w = max(len(r[0]) for r in rows)
    print(f"\n{'kernel':<{name_w}}  {'compiled':>10}  {'reference':>10}  "
          f"{'speedup':>7}  {'max|diff|':>9}")
    for label, tc, tr, diff in rows:
        print(f"{label:<{name_w}}  {tc * 1e3:>8.2f}ms  {tr * 1e3:>8.2f}ms  "
              f"{tr / tc:>6.1f}x  {diff:>9.1e}")

    t = bench_net(dtype, args.repeats, rng)
    print(f"\nfull net fwd+bwd (3 levels, batch 2, 32^3): {t * 1e3:.1f}ms "
          f"on the {backend.backend_name()} backend")
    print("rerun under VOXSEED_BACKEND=numpy to time the end-to-end fallback")


if __name__ == "__main__":
    main()
