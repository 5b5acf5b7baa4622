#pragma once

#include <cstdint>
#include <vector>

#include "changedet/tensor.hpp"

namespace cd::ops {

// Elementwise / scalar ------------------------------------------------------
Var add(const Var& a, const Var& b);           // same shape
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);           // same shape
Var smul(const Var& a, double c);
Var sadd(const Var& a, double c);
Var scale_by(const Var& x, const Var& s);      // s is a 1-element Var
Var relu(const Var& x);
Var gelu(const Var& x);                        // exact erf form
Var sigmoid(const Var& x);
Var vlog(const Var& x);  // elementwise natural log; entries must be > 0

// Broadcast gates over an H x W x C map --------------------------------------
Var mul_channel(const Var& x, const Var& gate_c);   // gate  {C}
Var mul_spatial(const Var& x, const Var& gate_hw);  // gate  {H,W}

// Shape plumbing -------------------------------------------------------------
Var reshape(const Var& x, Shape s);
Var slice_cols(const Var& x, int c0, int len);            // x {N,C}
Var slice_rows(const Var& x, int r0, int len);            // leading-dim slice
Var concat_lastdim(const std::vector<Var>& xs);           // {N,d_i} -> {N,sum d}
Var concat_rows(const std::vector<Var>& xs);              // {N_i,C} -> {sum N,C}
Var concat_c(const Var& a, const Var& b);                 // {H,W,Ca}+{H,W,Cb}

// Linear algebra -------------------------------------------------------------
Var add_rowvec(const Var& x, const Var& r);  // x {N,C} + r {1,C} broadcast over rows

Var linear(const Var& x, const Var& w, const Var& b);  // {N,Ci}x{Ci,Co}+{Co}
Var linear_nobias(const Var& x, const Var& w);
Var matmul(const Var& a, const Var& b);     // {n,k}x{k,m}
Var matmul_nt(const Var& a, const Var& b);  // {n,k}x{m,k}^T -> {n,m}

// Convolution ----------------------------------------------------------------
// x {H,W,Cin}, w {kh,kw,Cin/groups,Cout}, b {Cout} (may be null Var for none).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int groups);

// Normalization / activations over rows --------------------------------------
Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta, double eps);
Var softmax_lastdim(const Var& x);

// Pooling / resampling -------------------------------------------------------
Var global_avgpool(const Var& x);  // {H,W,C} -> {C}
Var global_maxpool(const Var& x);  // {H,W,C} -> {C}; first-max tie rule
Var upsample_nearest2x(const Var& x);

// Samples `value` {H,W,C} at continuous (y,x) points {N,2}; coordinates are
// clamped to the valid rectangle. Optional channel window [c0,c0+len).
Var bilinear_sample(const Var& value, const Var& points, int c0 = 0, int len = -1);

// Reductions -----------------------------------------------------------------
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var add_scalars(const std::vector<Var>& xs);

// Dense losses (targets are plain tensors, not differentiated) ---------------
Var bce_with_logits_mean(const Var& logits, const Tensor& targets);
Var dice_with_logits(const Var& logits, const Tensor& targets, double eps);
// sum_q row_weight[q] * CE(softmax(logits[q]), label[q])
Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels,
                       const std::vector<double>& row_weight);
// mean over pixels of w[class] * CE(softmax(dense[y][x]), gt[y][x]);
// dense {h,w,2}, gt row-major h*w of {0,1}.
Var weighted_pixel_ce(const Var& dense, const std::vector<uint8_t>& gt, double w_bg,
                      double w_chg);

// Query aggregation: p {Q,2}, m {Q,h,w} -> {h,w,2} with
// out[y][x][c] = log sum_q exp(p[q][c] + m[q][y][x]), max-subtracted.
Var aggregate_lse_op(const Var& p, const Var& m);

// Value-only helpers (no autodiff) -------------------------------------------
// Bilinear resize with half-pixel centers and clamped borders.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);  // x {h,w,C}
// Maps output pixel index to source coordinate under the same convention.
inline double resize_coord(int out_idx, int out_size, int in_size) {
    double scale = static_cast<double>(in_size) / out_size;
    return (out_idx + 0.5) * scale - 0.5;
}

}  // namespace cd::ops
