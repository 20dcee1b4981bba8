#include "convkernels.h"

#ifdef _OPENMP
#include <omp.h>
#endif

#if defined(__AVX512F__)
#include <immintrin.h>
#define VS_AVX512 1
#else
#define VS_AVX512 0
#endif

int vs_has_avx512(void) { return VS_AVX512; }

void vs_set_threads(int n)
{
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int vs_max_threads(void)
{
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

/* ------------------------------------------------------------------ */
/* 3x3x3 convolution forward                                          */
/* ------------------------------------------------------------------ */

#if VS_AVX512

/* One (4-channel block, output row plane) slab.  Keeping four output-channel
 * accumulators live amortises every x load over 12 FMAs. */
static void fwd4_slab_f32(const float *xp, const float *w, const float *b, float *y,
                          long co, long i, long Ci, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    const long nvec = (D + 15) / 16;
    for (long j = 0; j < W; j++) {
        for (long v = 0; v < nvec; v++) {
            long k0 = v * 16, nrem = D - k0;
            __mmask16 m = (nrem >= 16) ? (__mmask16)0xFFFF : (__mmask16)((1u << nrem) - 1);
            __m512 a0 = _mm512_set1_ps(b[co + 0]);
            __m512 a1 = _mm512_set1_ps(b[co + 1]);
            __m512 a2 = _mm512_set1_ps(b[co + 2]);
            __m512 a3 = _mm512_set1_ps(b[co + 3]);
            for (long ci = 0; ci < Ci; ci++) {
                const float *w0 = w + ((co + 0) * Ci + ci) * 27;
                const float *w1 = w + ((co + 1) * Ci + ci) * 27;
                const float *w2 = w + ((co + 2) * Ci + ci) * 27;
                const float *w3 = w + ((co + 3) * Ci + ci) * 27;
                const float *xbase = xp + ((ci * Hp + i) * Wp + j) * Dp + k0;
                for (long r = 0; r < 9; r++) {
                    const float *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp;
                    long t = r * 3;
                    __m512 x0 = _mm512_maskz_loadu_ps(m, xr);
                    __m512 x1 = _mm512_maskz_loadu_ps(m, xr + 1);
                    __m512 x2 = _mm512_maskz_loadu_ps(m, xr + 2);
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(w0[t]), x0, a0);
                    a1 = _mm512_fmadd_ps(_mm512_set1_ps(w1[t]), x0, a1);
                    a2 = _mm512_fmadd_ps(_mm512_set1_ps(w2[t]), x0, a2);
                    a3 = _mm512_fmadd_ps(_mm512_set1_ps(w3[t]), x0, a3);
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(w0[t + 1]), x1, a0);
                    a1 = _mm512_fmadd_ps(_mm512_set1_ps(w1[t + 1]), x1, a1);
                    a2 = _mm512_fmadd_ps(_mm512_set1_ps(w2[t + 1]), x1, a2);
                    a3 = _mm512_fmadd_ps(_mm512_set1_ps(w3[t + 1]), x1, a3);
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(w0[t + 2]), x2, a0);
                    a1 = _mm512_fmadd_ps(_mm512_set1_ps(w1[t + 2]), x2, a1);
                    a2 = _mm512_fmadd_ps(_mm512_set1_ps(w2[t + 2]), x2, a2);
                    a3 = _mm512_fmadd_ps(_mm512_set1_ps(w3[t + 2]), x2, a3);
                }
            }
            long ybase = (i * W + j) * D + k0;
            _mm512_mask_storeu_ps(y + (co + 0) * H * W * D + ybase, m, a0);
            _mm512_mask_storeu_ps(y + (co + 1) * H * W * D + ybase, m, a1);
            _mm512_mask_storeu_ps(y + (co + 2) * H * W * D + ybase, m, a2);
            _mm512_mask_storeu_ps(y + (co + 3) * H * W * D + ybase, m, a3);
        }
    }
}

static void fwd1_slab_f32(const float *xp, const float *w, const float *b, float *y,
                          long co, long i, long Ci, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    const long nvec = (D + 15) / 16;
    for (long j = 0; j < W; j++) {
        for (long v = 0; v < nvec; v++) {
            long k0 = v * 16, nrem = D - k0;
            __mmask16 m = (nrem >= 16) ? (__mmask16)0xFFFF : (__mmask16)((1u << nrem) - 1);
            __m512 a0 = _mm512_set1_ps(b[co]);
            for (long ci = 0; ci < Ci; ci++) {
                const float *w0 = w + (co * Ci + ci) * 27;
                const float *xbase = xp + ((ci * Hp + i) * Wp + j) * Dp + k0;
                for (long r = 0; r < 9; r++) {
                    const float *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp;
                    long t = r * 3;
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(w0[t]), _mm512_maskz_loadu_ps(m, xr), a0);
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(w0[t + 1]), _mm512_maskz_loadu_ps(m, xr + 1), a0);
                    a0 = _mm512_fmadd_ps(_mm512_set1_ps(w0[t + 2]), _mm512_maskz_loadu_ps(m, xr + 2), a0);
                }
            }
            _mm512_mask_storeu_ps(y + (co * H * W + i * W + j) * D + k0, m, a0);
        }
    }
}

static void fwd4_slab_f64(const double *xp, const double *w, const double *b, double *y,
                          long co, long i, long Ci, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    const long nvec = (D + 7) / 8;
    for (long j = 0; j < W; j++) {
        for (long v = 0; v < nvec; v++) {
            long k0 = v * 8, nrem = D - k0;
            __mmask8 m = (nrem >= 8) ? (__mmask8)0xFF : (__mmask8)((1u << nrem) - 1);
            __m512d a0 = _mm512_set1_pd(b[co + 0]);
            __m512d a1 = _mm512_set1_pd(b[co + 1]);
            __m512d a2 = _mm512_set1_pd(b[co + 2]);
            __m512d a3 = _mm512_set1_pd(b[co + 3]);
            for (long ci = 0; ci < Ci; ci++) {
                const double *w0 = w + ((co + 0) * Ci + ci) * 27;
                const double *w1 = w + ((co + 1) * Ci + ci) * 27;
                const double *w2 = w + ((co + 2) * Ci + ci) * 27;
                const double *w3 = w + ((co + 3) * Ci + ci) * 27;
                const double *xbase = xp + ((ci * Hp + i) * Wp + j) * Dp + k0;
                for (long r = 0; r < 9; r++) {
                    const double *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp;
                    long t = r * 3;
                    __m512d x0 = _mm512_maskz_loadu_pd(m, xr);
                    __m512d x1 = _mm512_maskz_loadu_pd(m, xr + 1);
                    __m512d x2 = _mm512_maskz_loadu_pd(m, xr + 2);
                    a0 = _mm512_fmadd_pd(_mm512_set1_pd(w0[t]), x0, a0);
                    a1 = _mm512_fmadd_pd(_mm512_set1_pd(w1[t]), x0, a1);
                    a2 = _mm512_fmadd_pd(_mm512_set1_pd(w2[t]), x0, a2);
                    a3 = _mm512_fmadd_pd(_mm512_set1_pd(w3[t]), x0, a3);
                    a0 = _mm512_fmadd_pd(_mm512_set1_pd(w0[t + 1]), x1, a0);
                    a1 = _mm512_fmadd_pd(_mm512_set1_pd(w1[t + 1]), x1, a1);
                    a2 = _mm512_fmadd_pd(_mm512_set1_pd(w2[t + 1]), x1, a2);
                    a3 = _mm512_fmadd_pd(_mm512_set1_pd(w3[t + 1]), x1, a3);
                    a0 = _mm512_fmadd_pd(_mm512_set1_pd(w0[t + 2]), x2, a0);
                    a1 = _mm512_fmadd_pd(_mm512_set1_pd(w1[t + 2]), x2, a1);
                    a2 = _mm512_fmadd_pd(_mm512_set1_pd(w2[t + 2]), x2, a2);
                    a3 = _mm512_fmadd_pd(_mm512_set1_pd(w3[t + 2]), x2, a3);
                }
            }
            long ybase = (i * W + j) * D + k0;
            _mm512_mask_storeu_pd(y + (co + 0) * H * W * D + ybase, m, a0);
            _mm512_mask_storeu_pd(y + (co + 1) * H * W * D + ybase, m, a1);
            _mm512_mask_storeu_pd(y + (co + 2) * H * W * D + ybase, m, a2);
            _mm512_mask_storeu_pd(y + (co + 3) * H * W * D + ybase, m, a3);
        }
    }
}

static void fwd1_slab_f64(const double *xp, const double *w, const double *b, double *y,
                          long co, long i, long Ci, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    const long nvec = (D + 7) / 8;
    for (long j = 0; j < W; j++) {
        for (long v = 0; v < nvec; v++) {
            long k0 = v * 8, nrem = D - k0;
            __mmask8 m = (nrem >= 8) ? (__mmask8)0xFF : (__mmask8)((1u << nrem) - 1);
            __m512d a0 = _mm512_set1_pd(b[co]);
            for (long ci = 0; ci < Ci; ci++) {
                const double *w0 = w + (co * Ci + ci) * 27;
                const double *xbase = xp + ((ci * Hp + i) * Wp + j) * Dp + k0;
                for (long r = 0; r < 9; r++) {
                    const double *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp;
                    long t = r * 3;
                    a0 = _mm512_fmadd_pd(_mm512_set1_pd(w0[t]), _mm512_maskz_loadu_pd(m, xr), a0);
                    a0 = _mm512_fmadd_pd(_mm512_set1_pd(w0[t + 1]), _mm512_maskz_loadu_pd(m, xr + 1), a0);
                    a0 = _mm512_fmadd_pd(_mm512_set1_pd(w0[t + 2]), _mm512_maskz_loadu_pd(m, xr + 2), a0);
                }
            }
            _mm512_mask_storeu_pd(y + (co * H * W + i * W + j) * D + k0, m, a0);
        }
    }
}

#else /* scalar fallback */

static void fwd1_slab_scalar_f32(const float *xp, const float *w, const float *b, float *y,
                                 long co, long i, long Ci, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    for (long j = 0; j < W; j++) {
        for (long d = 0; d < D; d++) {
            float acc = b[co];
            for (long ci = 0; ci < Ci; ci++) {
                const float *w0 = w + (co * Ci + ci) * 27;
                const float *xbase = xp + ((ci * Hp + i) * Wp + j) * Dp + d;
                for (long r = 0; r < 9; r++) {
                    const float *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp;
                    acc += w0[r * 3] * xr[0] + w0[r * 3 + 1] * xr[1] + w0[r * 3 + 2] * xr[2];
                }
            }
            y[(co * H * W + i * W + j) * D + d] = acc;
        }
    }
}

static void fwd1_slab_scalar_f64(const double *xp, const double *w, const double *b, double *y,
                                 long co, long i, long Ci, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    for (long j = 0; j < W; j++) {
        for (long d = 0; d < D; d++) {
            double acc = b[co];
            for (long ci = 0; ci < Ci; ci++) {
                const double *w0 = w + (co * Ci + ci) * 27;
                const double *xbase = xp + ((ci * Hp + i) * Wp + j) * Dp + d;
                for (long r = 0; r < 9; r++) {
                    const double *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp;
                    acc += w0[r * 3] * xr[0] + w0[r * 3 + 1] * xr[1] + w0[r * 3 + 2] * xr[2];
                }
            }
            y[(co * H * W + i * W + j) * D + d] = acc;
        }
    }
}

#endif

void vs_conv3_fwd_f32(const float *xp, const float *w, const float *b, float *y,
                      long B, long Ci, long Co, long H, long W, long D)
{
    const long xs = Ci * (H + 2) * (W + 2) * (D + 2);
    const long ys = Co * H * W * D;
#if VS_AVX512
    const long nb4 = Co / 4;
    const long nitem = nb4 + (Co - nb4 * 4);
#ifdef _OPENMP
#pragma omp parallel for collapse(3) schedule(static)
#endif
    for (long bi = 0; bi < B; bi++) {
        for (long item = 0; item < nitem; item++) {
            for (long i = 0; i < H; i++) {
                if (item < nb4)
                    fwd4_slab_f32(xp + bi * xs, w, b, y + bi * ys, item * 4, i, Ci, H, W, D);
                else
                    fwd1_slab_f32(xp + bi * xs, w, b, y + bi * ys, nb4 * 4 + (item - nb4), i, Ci, H, W, D);
            }
        }
    }
#else
#ifdef _OPENMP
#pragma omp parallel for collapse(3) schedule(static)
#endif
    for (long bi = 0; bi < B; bi++)
        for (long co = 0; co < Co; co++)
            for (long i = 0; i < H; i++)
                fwd1_slab_scalar_f32(xp + bi * xs, w, b, y + bi * ys, co, i, Ci, H, W, D);
#endif
}

void vs_conv3_fwd_f64(const double *xp, const double *w, const double *b, double *y,
                      long B, long Ci, long Co, long H, long W, long D)
{
    const long xs = Ci * (H + 2) * (W + 2) * (D + 2);
    const long ys = Co * H * W * D;
#if VS_AVX512
    const long nb4 = Co / 4;
    const long nitem = nb4 + (Co - nb4 * 4);
#ifdef _OPENMP
#pragma omp parallel for collapse(3) schedule(static)
#endif
    for (long bi = 0; bi < B; bi++) {
        for (long item = 0; item < nitem; item++) {
            for (long i = 0; i < H; i++) {
                if (item < nb4)
                    fwd4_slab_f64(xp + bi * xs, w, b, y + bi * ys, item * 4, i, Ci, H, W, D);
                else
                    fwd1_slab_f64(xp + bi * xs, w, b, y + bi * ys, nb4 * 4 + (item - nb4), i, Ci, H, W, D);
            }
        }
    }
#else
#ifdef _OPENMP
#pragma omp parallel for collapse(3) schedule(static)
#endif
    for (long bi = 0; bi < B; bi++)
        for (long co = 0; co < Co; co++)
            for (long i = 0; i < H; i++)
                fwd1_slab_scalar_f64(xp + bi * xs, w, b, y + bi * ys, co, i, Ci, H, W, D);
#endif
}

/* ------------------------------------------------------------------ */
/* 3x3x3 convolution weight/bias gradient                             */
/* ------------------------------------------------------------------ */

void vs_conv3_wgrad_f32(const float *xp, const float *dy, float *dw, float *db,
                        long B, long Ci, long Co, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    const long xs = Ci * Hp * Wp * Dp;
    const long ys = Co * H * W * D;
#if VS_AVX512
    const long nvec = (D + 15) / 16;
    /* each thread owns a (co, ci) pair: dw rows and db entries are disjoint */
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (long co = 0; co < Co; co++) {
        for (long ci = 0; ci < Ci; ci++) {
            __m512 acc[27];
            __m512 dbacc = _mm512_setzero_ps();
            for (int t = 0; t < 27; t++) acc[t] = _mm512_setzero_ps();
            for (long bi = 0; bi < B; bi++) {
                const float *xb = xp + bi * xs;
                const float *dyb = dy + bi * ys;
                for (long i = 0; i < H; i++) {
                    for (long j = 0; j < W; j++) {
                        const float *dyrow = dyb + ((co * H + i) * W + j) * D;
                        const float *xbase = xb + ((ci * Hp + i) * Wp + j) * Dp;
                        for (long v = 0; v < nvec; v++) {
                            long k0 = v * 16, nrem = D - k0;
                            __mmask16 m = (nrem >= 16) ? (__mmask16)0xFFFF : (__mmask16)((1u << nrem) - 1);
                            __m512 dyv = _mm512_maskz_loadu_ps(m, dyrow + k0);
                            if (ci == 0) dbacc = _mm512_add_ps(dbacc, dyv);
                            for (long r = 0; r < 9; r++) {
                                const float *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp + k0;
                                acc[r * 3] = _mm512_fmadd_ps(dyv, _mm512_maskz_loadu_ps(m, xr), acc[r * 3]);
                                acc[r * 3 + 1] = _mm512_fmadd_ps(dyv, _mm512_maskz_loadu_ps(m, xr + 1), acc[r * 3 + 1]);
                                acc[r * 3 + 2] = _mm512_fmadd_ps(dyv, _mm512_maskz_loadu_ps(m, xr + 2), acc[r * 3 + 2]);
                            }
                        }
                    }
                }
            }
            float *dwp = dw + (co * Ci + ci) * 27;
            for (int t = 0; t < 27; t++) dwp[t] += _mm512_reduce_add_ps(acc[t]);
            if (ci == 0) db[co] += _mm512_reduce_add_ps(dbacc);
        }
    }
#else
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (long co = 0; co < Co; co++) {
        for (long ci = 0; ci < Ci; ci++) {
            float acc[27];
            float dbacc = 0.0f;
            for (int t = 0; t < 27; t++) acc[t] = 0.0f;
            for (long bi = 0; bi < B; bi++) {
                const float *xb = xp + bi * xs;
                const float *dyb = dy + bi * ys;
                for (long i = 0; i < H; i++) {
                    for (long j = 0; j < W; j++) {
                        const float *dyrow = dyb + ((co * H + i) * W + j) * D;
                        const float *xbase = xb + ((ci * Hp + i) * Wp + j) * Dp;
                        for (long d = 0; d < D; d++) {
                            float g = dyrow[d];
                            if (ci == 0) dbacc += g;
                            for (long r = 0; r < 9; r++) {
                                const float *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp + d;
                                acc[r * 3] += g * xr[0];
                                acc[r * 3 + 1] += g * xr[1];
                                acc[r * 3 + 2] += g * xr[2];
                            }
                        }
                    }
                }
            }
            float *dwp = dw + (co * Ci + ci) * 27;
            for (int t = 0; t < 27; t++) dwp[t] += acc[t];
            if (ci == 0) db[co] += dbacc;
        }
    }
#endif
}

void vs_conv3_wgrad_f64(const double *xp, const double *dy, double *dw, double *db,
                        long B, long Ci, long Co, long H, long W, long D)
{
    const long Hp = H + 2, Wp = W + 2, Dp = D + 2;
    const long xs = Ci * Hp * Wp * Dp;
    const long ys = Co * H * W * D;
#if VS_AVX512
    const long nvec = (D + 7) / 8;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (long co = 0; co < Co; co++) {
        for (long ci = 0; ci < Ci; ci++) {
            __m512d acc[27];
            __m512d dbacc = _mm512_setzero_pd();
            for (int t = 0; t < 27; t++) acc[t] = _mm512_setzero_pd();
            for (long bi = 0; bi < B; bi++) {
                const double *xb = xp + bi * xs;
                const double *dyb = dy + bi * ys;
                for (long i = 0; i < H; i++) {
                    for (long j = 0; j < W; j++) {
                        const double *dyrow = dyb + ((co * H + i) * W + j) * D;
                        const double *xbase = xb + ((ci * Hp + i) * Wp + j) * Dp;
                        for (long v = 0; v < nvec; v++) {
                            long k0 = v * 8, nrem = D - k0;
                            __mmask8 m = (nrem >= 8) ? (__mmask8)0xFF : (__mmask8)((1u << nrem) - 1);
                            __m512d dyv = _mm512_maskz_loadu_pd(m, dyrow + k0);
                            if (ci == 0) dbacc = _mm512_add_pd(dbacc, dyv);
                            for (long r = 0; r < 9; r++) {
                                const double *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp + k0;
                                acc[r * 3] = _mm512_fmadd_pd(dyv, _mm512_maskz_loadu_pd(m, xr), acc[r * 3]);
                                acc[r * 3 + 1] = _mm512_fmadd_pd(dyv, _mm512_maskz_loadu_pd(m, xr + 1), acc[r * 3 + 1]);
                                acc[r * 3 + 2] = _mm512_fmadd_pd(dyv, _mm512_maskz_loadu_pd(m, xr + 2), acc[r * 3 + 2]);
                            }
                        }
                    }
                }
            }
            double *dwp = dw + (co * Ci + ci) * 27;
            for (int t = 0; t < 27; t++) dwp[t] += _mm512_reduce_add_pd(acc[t]);
            if (ci == 0) db[co] += _mm512_reduce_add_pd(dbacc);
        }
    }
#else
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (long co = 0; co < Co; co++) {
        for (long ci = 0; ci < Ci; ci++) {
            double acc[27];
            double dbacc = 0.0;
            for (int t = 0; t < 27; t++) acc[t] = 0.0;
            for (long bi = 0; bi < B; bi++) {
                const double *xb = xp + bi * xs;
                const double *dyb = dy + bi * ys;
                for (long i = 0; i < H; i++) {
                    for (long j = 0; j < W; j++) {
                        const double *dyrow = dyb + ((co * H + i) * W + j) * D;
                        const double *xbase = xb + ((ci * Hp + i) * Wp + j) * Dp;
                        for (long d = 0; d < D; d++) {
                            double g = dyrow[d];
                            if (ci == 0) dbacc += g;
                            for (long r = 0; r < 9; r++) {
                                const double *xr = xbase + (r / 3) * Wp * Dp + (r % 3) * Dp + d;
                                acc[r * 3] += g * xr[0];
                                acc[r * 3 + 1] += g * xr[1];
                                acc[r * 3 + 2] += g * xr[2];
                            }
                        }
                    }
                }
            }
            double *dwp = dw + (co * Ci + ci) * 27;
            for (int t = 0; t < 27; t++) dwp[t] += acc[t];
            if (ci == 0) db[co] += dbacc;
        }
    }
#endif
}

/* ------------------------------------------------------------------ */
/* 2x max pooling                                                     */
/* ------------------------------------------------------------------ */

void vs_pool2_fwd_f32(const float *x, float *y, unsigned char *idx,
                      long B, long C, long H, long W, long D)
{
    const long Ho = H / 2, Wo = W / 2, Do = D / 2;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const float *xc = x + bc * H * W * D;
        float *yc = y + bc * Ho * Wo * Do;
        unsigned char *ic = idx + bc * Ho * Wo * Do;
        for (long i = 0; i < Ho; i++) {
            for (long j = 0; j < Wo; j++) {
                for (long v = 0; v < Do; v++) {
                    float best = xc[(2 * i * W + 2 * j) * D + 2 * v];
                    unsigned char code = 0;
                    for (int t = 1; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        float val = xc[((2 * i + a) * W + 2 * j + bb) * D + 2 * v + cc];
                        if (val > best) { best = val; code = (unsigned char)t; }
                    }
                    yc[(i * Wo + j) * Do + v] = best;
                    ic[(i * Wo + j) * Do + v] = code;
                }
            }
        }
    }
}

void vs_pool2_fwd_f64(const double *x, double *y, unsigned char *idx,
                      long B, long C, long H, long W, long D)
{
    const long Ho = H / 2, Wo = W / 2, Do = D / 2;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const double *xc = x + bc * H * W * D;
        double *yc = y + bc * Ho * Wo * Do;
        unsigned char *ic = idx + bc * Ho * Wo * Do;
        for (long i = 0; i < Ho; i++) {
            for (long j = 0; j < Wo; j++) {
                for (long v = 0; v < Do; v++) {
                    double best = xc[(2 * i * W + 2 * j) * D + 2 * v];
                    unsigned char code = 0;
                    for (int t = 1; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        double val = xc[((2 * i + a) * W + 2 * j + bb) * D + 2 * v + cc];
                        if (val > best) { best = val; code = (unsigned char)t; }
                    }
                    yc[(i * Wo + j) * Do + v] = best;
                    ic[(i * Wo + j) * Do + v] = code;
                }
            }
        }
    }
}

void vs_pool2_bwd_f32(const float *dy, const unsigned char *idx, float *dx,
                      long B, long C, long H, long W, long D)
{
    const long Ho = H / 2, Wo = W / 2, Do = D / 2;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const float *dyc = dy + bc * Ho * Wo * Do;
        const unsigned char *ic = idx + bc * Ho * Wo * Do;
        float *dxc = dx + bc * H * W * D;
        for (long i = 0; i < Ho; i++) {
            for (long j = 0; j < Wo; j++) {
                for (long v = 0; v < Do; v++) {
                    float g = dyc[(i * Wo + j) * Do + v];
                    unsigned char code = ic[(i * Wo + j) * Do + v];
                    for (int t = 0; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        dxc[((2 * i + a) * W + 2 * j + bb) * D + 2 * v + cc] = (t == code) ? g : 0.0f;
                    }
                }
            }
        }
    }
}

void vs_pool2_bwd_f64(const double *dy, const unsigned char *idx, double *dx,
                      long B, long C, long H, long W, long D)
{
    const long Ho = H / 2, Wo = W / 2, Do = D / 2;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const double *dyc = dy + bc * Ho * Wo * Do;
        const unsigned char *ic = idx + bc * Ho * Wo * Do;
        double *dxc = dx + bc * H * W * D;
        for (long i = 0; i < Ho; i++) {
            for (long j = 0; j < Wo; j++) {
                for (long v = 0; v < Do; v++) {
                    double g = dyc[(i * Wo + j) * Do + v];
                    unsigned char code = ic[(i * Wo + j) * Do + v];
                    for (int t = 0; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        dxc[((2 * i + a) * W + 2 * j + bb) * D + 2 * v + cc] = (t == code) ? g : 0.0;
                    }
                }
            }
        }
    }
}

/* ------------------------------------------------------------------ */
/* 2x nearest-neighbour upsampling                                    */
/* ------------------------------------------------------------------ */

void vs_upsample2_fwd_f32(const float *x, float *y, long B, long C, long H, long W, long D)
{
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const float *xc = x + bc * H * W * D;
        float *yc = y + bc * 8 * H * W * D;
        for (long i = 0; i < H; i++) {
            for (long j = 0; j < W; j++) {
                for (long v = 0; v < D; v++) {
                    float val = xc[(i * W + j) * D + v];
                    for (int t = 0; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        yc[((2 * i + a) * 2 * W + 2 * j + bb) * 2 * D + 2 * v + cc] = val;
                    }
                }
            }
        }
    }
}

void vs_upsample2_fwd_f64(const double *x, double *y, long B, long C, long H, long W, long D)
{
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const double *xc = x + bc * H * W * D;
        double *yc = y + bc * 8 * H * W * D;
        for (long i = 0; i < H; i++) {
            for (long j = 0; j < W; j++) {
                for (long v = 0; v < D; v++) {
                    double val = xc[(i * W + j) * D + v];
                    for (int t = 0; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        yc[((2 * i + a) * 2 * W + 2 * j + bb) * 2 * D + 2 * v + cc] = val;
                    }
                }
            }
        }
    }
}

void vs_upsample2_bwd_f32(const float *dy, float *dx, long B, long C, long H, long W, long D)
{
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const float *dyc = dy + bc * 8 * H * W * D;
        float *dxc = dx + bc * H * W * D;
        for (long i = 0; i < H; i++) {
            for (long j = 0; j < W; j++) {
                for (long v = 0; v < D; v++) {
                    float acc = 0.0f;
                    for (int t = 0; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        acc += dyc[((2 * i + a) * 2 * W + 2 * j + bb) * 2 * D + 2 * v + cc];
                    }
                    dxc[(i * W + j) * D + v] = acc;
                }
            }
        }
    }
}

void vs_upsample2_bwd_f64(const double *dy, double *dx, long B, long C, long H, long W, long D)
{
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long bc = 0; bc < B * C; bc++) {
        const double *dyc = dy + bc * 8 * H * W * D;
        double *dxc = dx + bc * H * W * D;
        for (long i = 0; i < H; i++) {
            for (long j = 0; j < W; j++) {
                for (long v = 0; v < D; v++) {
                    double acc = 0.0;
                    for (int t = 0; t < 8; t++) {
                        long a = t >> 2, bb = (t >> 1) & 1, cc = t & 1;
                        acc += dyc[((2 * i + a) * 2 * W + 2 * j + bb) * 2 * D + 2 * v + cc];
                    }
                    dxc[(i * W + j) * D + v] = acc;
                }
            }
        }
    }
}
