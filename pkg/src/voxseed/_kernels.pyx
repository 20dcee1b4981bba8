# cython: language_level=3, boundscheck=False, wraparound=False
"""Thin wrappers over the compiled volume kernels.

All array arguments are flat C-contiguous views; shape handling, padding and
dtype dispatch live in :mod:`voxseed.backend`.
"""

cdef extern from "convkernels.h":
    int c_has_avx512 "vs_has_avx512" () nogil
    void c_set_threads "vs_set_threads" (int n) nogil
    int c_max_threads "vs_max_threads" () nogil
    void c_conv3_fwd_f32 "vs_conv3_fwd_f32" (const float *xp, const float *w, const float *b, float *y,
                                             long B, long Ci, long Co, long H, long W, long D) nogil
    void c_conv3_fwd_f64 "vs_conv3_fwd_f64" (const double *xp, const double *w, const double *b, double *y,
                                             long B, long Ci, long Co, long H, long W, long D) nogil
    void c_conv3_wgrad_f32 "vs_conv3_wgrad_f32" (const float *xp, const float *dy, float *dw, float *db,
                                                 long B, long Ci, long Co, long H, long W, long D) nogil
    void c_conv3_wgrad_f64 "vs_conv3_wgrad_f64" (const double *xp, const double *dy, double *dw, double *db,
                                                 long B, long Ci, long Co, long H, long W, long D) nogil
    void c_pool2_fwd_f32 "vs_pool2_fwd_f32" (const float *x, float *y, unsigned char *idx,
                                             long B, long C, long H, long W, long D) nogil
    void c_pool2_fwd_f64 "vs_pool2_fwd_f64" (const double *x, double *y, unsigned char *idx,
                                             long B, long C, long H, long W, long D) nogil
    void c_pool2_bwd_f32 "vs_pool2_bwd_f32" (const float *dy, const unsigned char *idx, float *dx,
                                             long B, long C, long H, long W, long D) nogil
    void c_pool2_bwd_f64 "vs_pool2_bwd_f64" (const double *dy, const unsigned char *idx, double *dx,
                                             long B, long C, long H, long W, long D) nogil
    void c_upsample2_fwd_f32 "vs_upsample2_fwd_f32" (const float *x, float *y,
                                                     long B, long C, long H, long W, long D) nogil
    void c_upsample2_fwd_f64 "vs_upsample2_fwd_f64" (const double *x, double *y,
                                                     long B, long C, long H, long W, long D) nogil
    void c_upsample2_bwd_f32 "vs_upsample2_bwd_f32" (const float *dy, float *dx,
                                                     long B, long C, long H, long W, long D) nogil
    void c_upsample2_bwd_f64 "vs_upsample2_bwd_f64" (const double *dy, double *dx,
                                                     long B, long C, long H, long W, long D) nogil


def has_avx512():
    return bool(c_has_avx512())


def set_threads(int n):
    c_set_threads(n)


def max_threads():
    return c_max_threads()


def conv3_fwd_f32(const float[::1] xp, const float[::1] w, const float[::1] b, float[::1] y,
                  long B, long Ci, long Co, long H, long W, long D):
    with nogil:
        c_conv3_fwd_f32(&xp[0], &w[0], &b[0], &y[0], B, Ci, Co, H, W, D)


def conv3_fwd_f64(const double[::1] xp, const double[::1] w, const double[::1] b, double[::1] y,
                  long B, long Ci, long Co, long H, long W, long D):
    with nogil:
        c_conv3_fwd_f64(&xp[0], &w[0], &b[0], &y[0], B, Ci, Co, H, W, D)


def conv3_wgrad_f32(const float[::1] xp, const float[::1] dy, float[::1] dw, float[::1] db,
                    long B, long Ci, long Co, long H, long W, long D):
    with nogil:
        c_conv3_wgrad_f32(&xp[0], &dy[0], &dw[0], &db[0], B, Ci, Co, H, W, D)


def conv3_wgrad_f64(const double[::1] xp, const double[::1] dy, double[::1] dw, double[::1] db,
                    long B, long Ci, long Co, long H, long W, long D):
    with nogil:
        c_conv3_wgrad_f64(&xp[0], &dy[0], &dw[0], &db[0], B, Ci, Co, H, W, D)


def pool2_fwd_f32(const float[::1] x, float[::1] y, unsigned char[::1] idx,
                  long B, long C, long H, long W, long D):
    with nogil:
        c_pool2_fwd_f32(&x[0], &y[0], &idx[0], B, C, H, W, D)


def pool2_fwd_f64(const double[::1] x, double[::1] y, unsigned char[::1] idx,
                  long B, long C, long H, long W, long D):
    with nogil:
        c_pool2_fwd_f64(&x[0], &y[0], &idx[0], B, C, H, W, D)


def pool2_bwd_f32(const float[::1] dy, const unsigned char[::1] idx, float[::1] dx,
                  long B, long C, long H, long W, long D):
    with nogil:
        c_pool2_bwd_f32(&dy[0], &idx[0], &dx[0], B, C, H, W, D)


def pool2_bwd_f64(const double[::1] dy, const unsigned char[::1] idx, double[::1] dx,
                  long B, long C, long H, long W, long D):
    with nogil:
        c_pool2_bwd_f64(&dy[0], &idx[0], &dx[0], B, C, H, W, D)


def upsample2_fwd_f32(const float[::1] x, float[::1] y, long B, long C, long H, long W, long D):
    with nogil:
        c_upsample2_fwd_f32(&x[0], &y[0], B, C, H, W, D)


def upsample2_fwd_f64(const double[::1] x, double[::1] y, long B, long C, long H, long W, long D):
    with nogil:
        c_upsample2_fwd_f64(&x[0], &y[0], B, C, H, W, D)


def upsample2_bwd_f32(const float[::1] dy, float[::1] dx, long B, long C, long H, long W, long D):
    with nogil:
        c_upsample2_bwd_f32(&dy[0], &dx[0], B, C, H, W, D)


def upsample2_bwd_f64(const double[::1] dy, double[::1] dx, long B, long C, long H, long W, long D):
    with nogil:
        c_upsample2_bwd_f64(&dy[0], &dx[0], B, C, H, W, D)
