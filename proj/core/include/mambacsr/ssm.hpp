#pragma once

#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include "mambacsr/tensor.hpp"

namespace mambacsr {

/// How B-bar is formed from (delta, a, B).
///   Zoh:   B-bar = ((exp(delta*a) - 1) / a) * B   (full zero-order hold)
///   Euler: B-bar = delta * B                      (common simplification)
enum class DeltaBForm { Zoh, Euler };

#ifdef MAMBACSR_EULER_DELTA_B
inline constexpr DeltaBForm kDefaultDeltaBForm = DeltaBForm::Euler;
#else
inline constexpr DeltaBForm kDefaultDeltaBForm = DeltaBForm::Zoh;
#endif

/// Static state-space parameters. A is diagonal per (channel, state) and
/// strictly negative by construction: a = -exp(A_log).
template <typename T>
struct SsmCore {
  Tensor<T> A_log;  // d_inner x d_state
  Tensor<T> D;      // d_inner skip coefficients

  int64_t d_inner() const { return A_log.dim(0); }
  int64_t d_state() const { return A_log.dim(1); }
};

/// Per-token scan inputs. All sequences share length L; delta must be
/// strictly positive (produced through softplus upstream).
template <typename T>
struct ScanInputs {
  Tensor<T> u;      // L x d_inner
  Tensor<T> delta;  // L x d_inner
  Tensor<T> B;      // L x d_state
  Tensor<T> C;      // L x d_state

  int64_t length() const { return u.dim(0); }
};

/// LTI global-convolution kernel: kbar[d][j] = sum_k C_k Abar_dk^j Bbar_dk.
template <typename T>
struct KernelMatrix {
  Tensor<T> kbar;  // d_inner x L
};

/// ZOH discretization per token: Abar = exp(delta*a) and Bbar per form.
/// Returns (Abar, Bbar), both L x d_inner x d_state. Throws InvariantError
/// on non-positive delta.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const SsmCore<T>& core,
                                           const Tensor<T>& delta,
                                           const Tensor<T>& B,
                                           DeltaBForm form = kDefaultDeltaBForm);

/// The selective scan: h_t = Abar_t*h_{t-1} + Bbar_t*u_t (h_{-1} = 0),
/// y_t = <C_t, h_t> + D*u_t. Differentiable in u, delta, B, C, A_log, D via
/// an explicit reverse recurrence (h recomputed forward, adjoint swept
/// backward).
template <typename T>
Tensor<T> selective_scan(const SsmCore<T>& core, const ScanInputs<T>& inp,
                         DeltaBForm form = kDefaultDeltaBForm);

/// Counts selective_scan invocations since the last reset (test
/// instrumentation).
int64_t scan_call_count();
void reset_scan_call_count();

/// Kernel for the time-invariant case: delta_row is one token's delta
/// (d_inner), b_row / c_row one token's projections (d_state).
template <typename T>
KernelMatrix<T> kernel_materialize(const SsmCore<T>& core,
                                   const Tensor<T>& delta_row,
                                   const Tensor<T>& b_row,
                                   const Tensor<T>& c_row, int64_t len,
                                   DeltaBForm form = kDefaultDeltaBForm);

/// Convenience wrapper that checks delta/B/C really are constant over t and
/// throws InvariantError otherwise.
template <typename T>
KernelMatrix<T> kernel_from_inputs(const SsmCore<T>& core,
                                   const ScanInputs<T>& inp,
                                   DeltaBForm form = kDefaultDeltaBForm);

/// Per-channel contribution of token p to token q with delta/B/C frozen:
/// sum_k C_qk (prod_{i=p+1}^{q} Abar_ik) Bbar_pk, plus D for p == q.
/// Requires 0 <= p <= q < L.
template <typename T>
std::vector<T> contribution(const SsmCore<T>& core, const ScanInputs<T>& inp,
                            int64_t p, int64_t q,
                            DeltaBForm form = kDefaultDeltaBForm);

/// |contribution(p, q)| for q = p..L-1, shaped d_inner x (L-p).
template <typename T>
Tensor<T> decay_profile(const SsmCore<T>& core, const ScanInputs<T>& inp,
                        int64_t p, DeltaBForm form = kDefaultDeltaBForm);

/// CSV rows "p,q,channel,magnitude" with a header line.
template <typename T>
void write_decay_csv(std::ostream& os, const SsmCore<T>& core,
                     const ScanInputs<T>& inp, int64_t p,
                     DeltaBForm form = kDefaultDeltaBForm);

#define MAMBACSR_DECLARE_SSM(T)                                                 \
  extern template std::pair<Tensor<T>, Tensor<T>> discretize(                   \
      const SsmCore<T>&, const Tensor<T>&, const Tensor<T>&, DeltaBForm);       \
  extern template Tensor<T> selective_scan(const SsmCore<T>&,                   \
                                           const ScanInputs<T>&, DeltaBForm);   \
  extern template KernelMatrix<T> kernel_materialize(                           \
      const SsmCore<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
      int64_t, DeltaBForm);                                                     \
  extern template KernelMatrix<T> kernel_from_inputs(                           \
      const SsmCore<T>&, const ScanInputs<T>&, DeltaBForm);                     \
  extern template std::vector<T> contribution(                                  \
      const SsmCore<T>&, const ScanInputs<T>&, int64_t, int64_t, DeltaBForm);   \
  extern template Tensor<T> decay_profile(const SsmCore<T>&,                    \
                                          const ScanInputs<T>&, int64_t,        \
                                          DeltaBForm);                          \
  extern template void write_decay_csv(std::ostream&, const SsmCore<T>&,        \
                                       const ScanInputs<T>&, int64_t,           \
                                       DeltaBForm);

MAMBACSR_DECLARE_SSM(float)
MAMBACSR_DECLARE_SSM(double)
#undef MAMBACSR_DECLARE_SSM

}  // namespace mambacsr
