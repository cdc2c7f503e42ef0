#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mambacsr/tensor.hpp"
#include "mambacsr/trajectory.hpp"

namespace mambacsr {

// Elementwise binary ops accept equal shapes or a 1-element operand on
// either side (scalar broadcast); nothing more general.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);  // tanh approximation
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);  // overflow-safe ln(1+e^x)
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
template <typename T>
Tensor<T> scale_by_scalar(const Tensor<T>& x, T c);

/// Affine map over the last axis: x[...,I] * w[O,I]^T (+ b[O]).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w,
                 const std::optional<Tensor<T>>& b = std::nullopt);

/// Cross-correlation, NCHW x OIKhKw, stride 1. Kernel must be 1x1 or 3x3;
/// groups divides both channel counts (groups == C gives depthwise).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::optional<Tensor<T>>& b, int padding, int groups = 1);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int padding,
                 int groups = 1);

/// Standardize over the last axis, then scale/shift by gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-6));

/// NCHW -> NC11 spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// out[n][c][h*r+dy][w*r+dx] = in[n][c*r*r + dy*r + dx][h][w]
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r);
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r);

/// Reorder the token axis (second-to-last for rank 3, first for rank 2)
/// by a trajectory: out[k] = x[perm[k]].
template <typename T>
Tensor<T> gather_tokens(const Tensor<T>& x, const Trajectory& traj);
/// Inverse placement: out[perm[k]] = x[k].
template <typename T>
Tensor<T> scatter_tokens(const Tensor<T>& x, const Trajectory& traj);

/// General row gather over the token axis; indices may repeat.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::span<const int64_t> indices);
/// Concatenate along the token axis.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b);

/// Build the interleaved cross-scale sequence from a down-plane tensor
/// ([N,]Hd*Wd,D) and an original-plane tensor ([N,]H*W,D), both row-major.
template <typename T>
Tensor<T> cross_scale_sequence(const CrossScaleLayout& layout,
                               const Tensor<T>& down, const Tensor<T>& orig);
/// Drop Down entries from an interleaved sequence and restore the original
/// plane in row-major order.
template <typename T>
Tensor<T> extract_original(const CrossScaleLayout& layout, const Tensor<T>& seq);

/// Mean absolute difference, scalar result.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int64_t> shape);

/// N,C,H,W -> N,(H*W),C and back.
template <typename T>
Tensor<T> nchw_to_nlc(const Tensor<T>& x);
template <typename T>
Tensor<T> nlc_to_nchw(const Tensor<T>& x, int64_t h, int64_t w);

/// Multiply NCHW features by per-channel weights s of shape NC11.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);

/// Remove / rebuild the leading batch axis.
template <typename T>
Tensor<T> select_batch(const Tensor<T>& x, int64_t n);
template <typename T>
Tensor<T> stack_first(std::span<const Tensor<T>> parts);

/// Reflection-pad bottom/right to the target extents (at most +1 each).
template <typename T>
Tensor<T> pad_reflect_hw(const Tensor<T>& x, int64_t target_h, int64_t target_w);
template <typename T>
Tensor<T> crop_hw(const Tensor<T>& x, int64_t h, int64_t w);

/// Separable Catmull-Rom resize of an NCHW tensor (differentiable: the map
/// is linear in the input).
template <typename T>
Tensor<T> bicubic_resize_nchw(const Tensor<T>& x, int64_t out_h, int64_t out_w);

/// Max over elements of |g_analytic - g_fd| / max(1, |g_fd|) where g_fd is
/// the central difference (f(x+eps e) - f(x-eps e)) / (2 eps). The callable
/// must build a scalar loss from the given (watched) tensor using ops
/// recorded on the given tape.
template <typename T>
using ScalarFn = std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>;

template <typename T>
T grad_check(const ScalarFn<T>& f, const Tensor<T>& x, T eps);

#define MAMBACSR_DECLARE_OPS(T)                                                   \
  extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);              \
  extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);              \
  extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);              \
  extern template Tensor<T> silu(const Tensor<T>&);                               \
  extern template Tensor<T> gelu(const Tensor<T>&);                               \
  extern template Tensor<T> sigmoid(const Tensor<T>&);                            \
  extern template Tensor<T> softplus(const Tensor<T>&);                           \
  extern template Tensor<T> exp(const Tensor<T>&);                                \
  extern template Tensor<T> scale_by_scalar(const Tensor<T>&, T);                 \
  extern template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&,            \
                                   const std::optional<Tensor<T>>&);              \
  extern template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,            \
                                   const std::optional<Tensor<T>>&, int, int);    \
  extern template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);\
  extern template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,        \
                                       const Tensor<T>&, T);                      \
  extern template Tensor<T> global_avg_pool(const Tensor<T>&);                    \
  extern template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                 \
  extern template Tensor<T> pixel_unshuffle(const Tensor<T>&, int);               \
  extern template Tensor<T> gather_tokens(const Tensor<T>&, const Trajectory&);   \
  extern template Tensor<T> scatter_tokens(const Tensor<T>&, const Trajectory&);  \
  extern template Tensor<T> take_rows(const Tensor<T>&, std::span<const int64_t>);\
  extern template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);      \
  extern template Tensor<T> cross_scale_sequence(const CrossScaleLayout&,         \
                                                 const Tensor<T>&,                \
                                                 const Tensor<T>&);               \
  extern template Tensor<T> extract_original(const CrossScaleLayout&,             \
                                             const Tensor<T>&);                   \
  extern template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);          \
  extern template Tensor<T> sum_all(const Tensor<T>&);                            \
  extern template Tensor<T> reshape(const Tensor<T>&, std::vector<int64_t>);      \
  extern template Tensor<T> nchw_to_nlc(const Tensor<T>&);                        \
  extern template Tensor<T> nlc_to_nchw(const Tensor<T>&, int64_t, int64_t);      \
  extern template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);   \
  extern template Tensor<T> select_batch(const Tensor<T>&, int64_t);              \
  extern template Tensor<T> stack_first(std::span<const Tensor<T>>);              \
  extern template Tensor<T> pad_reflect_hw(const Tensor<T>&, int64_t, int64_t);   \
  extern template Tensor<T> crop_hw(const Tensor<T>&, int64_t, int64_t);          \
  extern template Tensor<T> bicubic_resize_nchw(const Tensor<T>&, int64_t,        \
                                                int64_t);                         \
  extern template T grad_check(const ScalarFn<T>&, const Tensor<T>&, T);

MAMBACSR_DECLARE_OPS(float)
MAMBACSR_DECLARE_OPS(double)
#undef MAMBACSR_DECLARE_OPS

}  // namespace mambacsr
