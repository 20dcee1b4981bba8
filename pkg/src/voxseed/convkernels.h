#ifndef VOXSEED_CONVKERNELS_H
#define VOXSEED_CONVKERNELS_H

/* Dense 3x3x3 convolution, 2x max pooling and 2x nearest upsampling for
 * C-contiguous volume batches.  Layout contracts:
 *   xp  (B, Ci, H+2, W+2, D+2)  zero-padded input, halo of one voxel
 *   w   (Co, Ci, 3, 3, 3)
 *   y   (B, Co, H, W, D)
 * The D axis is innermost; SIMD lanes run along it with masked tails.  Masked
 * loads may touch up to two elements past the tail of a row, which stays in
 * bounds because padded rows carry the +2 halo.  Gradient kernels accumulate
 * into dw/db, callers zero them first.  Every parallel loop writes disjoint
 * output slices under a static schedule, so results are bitwise identical for
 * any thread count. */

int vs_has_avx512(void);
void vs_set_threads(int n);
int vs_max_threads(void);

void vs_conv3_fwd_f32(const float *xp, const float *w, const float *b, float *y,
                      long B, long Ci, long Co, long H, long W, long D);
void vs_conv3_fwd_f64(const double *xp, const double *w, const double *b, double *y,
                      long B, long Ci, long Co, long H, long W, long D);

void vs_conv3_wgrad_f32(const float *xp, const float *dy, float *dw, float *db,
                        long B, long Ci, long Co, long H, long W, long D);
void vs_conv3_wgrad_f64(const double *xp, const double *dy, double *dw, double *db,
                        long B, long Ci, long Co, long H, long W, long D);

/* x (B,C,H,W,D) with even H,W,D; y (B,C,H/2,W/2,D/2); idx stores the winning
 * in-window offset (a*4+b*2+c), first maximum wins. */
void vs_pool2_fwd_f32(const float *x, float *y, unsigned char *idx,
                      long B, long C, long H, long W, long D);
void vs_pool2_fwd_f64(const double *x, double *y, unsigned char *idx,
                      long B, long C, long H, long W, long D);
void vs_pool2_bwd_f32(const float *dy, const unsigned char *idx, float *dx,
                      long B, long C, long H, long W, long D);
void vs_pool2_bwd_f64(const double *dy, const unsigned char *idx, double *dx,
                      long B, long C, long H, long W, long D);

/* x (B,C,H,W,D) -> y (B,C,2H,2W,2D), nearest neighbour. */
void vs_upsample2_fwd_f32(const float *x, float *y, long B, long C, long H, long W, long D);
void vs_upsample2_fwd_f64(const double *x, double *y, long B, long C, long H, long W, long D);
void vs_upsample2_bwd_f32(const float *dy, float *dx, long B, long C, long H, long W, long D);
void vs_upsample2_bwd_f64(const double *dy, double *dx, long B, long C, long H, long W, long D);

#endif
