#include "mambacsr/ssm.hpp"

#include <atomic>
#include <cmath>
#include <ostream>

namespace mambacsr {

namespace {

std::atomic<int64_t> g_scan_calls{0};

template <typename T>
using Storage = std::shared_ptr<const std::vector<T>>;

template <typename T>
void validate_scan_args(const SsmCore<T>& core, const ScanInputs<T>& inp) {
  if (core.A_log.rank() != 2 || core.D.rank() != 1 ||
      core.D.dim(0) != core.A_log.dim(0)) {
    throw ShapeError("ssm: A_log must be d_inner x d_state and D d_inner, got " +
                     shape_to_string(core.A_log.shape()) + " / " +
                     shape_to_string(core.D.shape()));
  }
  const int64_t din = core.d_inner();
  const int64_t ns = core.d_state();
  if (inp.u.rank() != 2 || inp.delta.rank() != 2 || inp.B.rank() != 2 ||
      inp.C.rank() != 2) {
    throw ShapeError("ssm: scan inputs must be rank 2");
  }
  const int64_t len = inp.u.dim(0);
  if (inp.delta.dim(0) != len || inp.B.dim(0) != len || inp.C.dim(0) != len) {
    throw ShapeError("ssm: sequence length mismatch among u/delta/B/C");
  }
  if (inp.u.dim(1) != din || inp.delta.dim(1) != din) {
    throw ShapeError("ssm: u/delta channel count does not match d_inner " +
                     std::to_string(din));
  }
  if (inp.B.dim(1) != ns || inp.C.dim(1) != ns) {
    throw ShapeError("ssm: B/C state count does not match d_state " +
                     std::to_string(ns));
  }
  const auto dv = inp.delta.values();
  for (size_t i = 0; i < dv.size(); ++i) {
    if (!(dv[i] > T(0))) {
      throw InvariantError("ssm: delta must be strictly positive, element " +
                           std::to_string(i) + " is " + std::to_string(dv[i]));
    }
  }
}

// phi = Bbar / B: the delta-dependent factor of the discretized input matrix.
template <typename T>
T phi_of(T da, T a, DeltaBForm form, T delta) {
  if (form == DeltaBForm::Euler) return delta;
  return std::expm1(da) / a;
}

}  // namespace

int64_t scan_call_count() { return g_scan_calls.load(); }
void reset_scan_call_count() { g_scan_calls.store(0); }

template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const SsmCore<T>& core,
                                           const Tensor<T>& delta,
                                           const Tensor<T>& B, DeltaBForm form) {
  ScanInputs<T> probe{Tensor<T>::zeros({delta.dim(0), core.d_inner()}), delta, B,
                      Tensor<T>::zeros({delta.dim(0), core.d_state()})};
  validate_scan_args(core, probe);
  const int64_t len = delta.dim(0);
  const int64_t din = core.d_inner();
  const int64_t ns = core.d_state();
  const T* dl = delta.data();
  const T* bd = B.data();
  const T* al = core.A_log.data();
  std::vector<T> abar(static_cast<size_t>(len * din * ns));
  std::vector<T> bbar(static_cast<size_t>(len * din * ns));
  for (int64_t t = 0; t < len; ++t) {
    for (int64_t d = 0; d < din; ++d) {
      const T dt = dl[t * din + d];
      T* ap = abar.data() + (t * din + d) * ns;
      T* bp = bbar.data() + (t * din + d) * ns;
      for (int64_t k = 0; k < ns; ++k) {
        const T a = -std::exp(al[d * ns + k]);
        const T da = dt * a;
        ap[k] = std::exp(da);
        bp[k] = phi_of(da, a, form, dt) * bd[t * ns + k];
      }
    }
  }
  return {Tensor<T>({len, din, ns}, std::move(abar)),
          Tensor<T>({len, din, ns}, std::move(bbar))};
}

template <typename T>
Tensor<T> selective_scan(const SsmCore<T>& core, const ScanInputs<T>& inp,
                         DeltaBForm form) {
  validate_scan_args(core, inp);
  g_scan_calls.fetch_add(1);
  const int64_t len = inp.length();
  const int64_t din = core.d_inner();
  const int64_t ns = core.d_state();

  const T* ud = inp.u.data();
  const T* dl = inp.delta.data();
  const T* bd = inp.B.data();
  const T* cd = inp.C.data();
  const T* alog = core.A_log.data();
  const T* dd = core.D.data();

  std::vector<T> out(static_cast<size_t>(len * din), T(0));
  std::vector<T> hk(static_cast<size_t>(ns));
  std::vector<T> a_row(static_cast<size_t>(ns));
  for (int64_t d = 0; d < din; ++d) {
    for (int64_t k = 0; k < ns; ++k) a_row[static_cast<size_t>(k)] = -std::exp(alog[d * ns + k]);
    std::fill(hk.begin(), hk.end(), T(0));
    const T dskip = dd[d];
    for (int64_t t = 0; t < len; ++t) {
      const T dt = dl[t * din + d];
      const T ut = ud[t * din + d];
      const T* brow = bd + t * ns;
      const T* crow = cd + t * ns;
      T acc = T(0);
      for (int64_t k = 0; k < ns; ++k) {
        const T a = a_row[static_cast<size_t>(k)];
        const T da = dt * a;
        const T e = std::exp(da);
        const T bbar = phi_of(da, a, form, dt) * brow[k];
        const T h = e * hk[static_cast<size_t>(k)] + bbar * ut;
        hk[static_cast<size_t>(k)] = h;
        acc += crow[k] * h;
      }
      out[static_cast<size_t>(t * din + d)] = acc + dskip * ut;
    }
  }

  Tape<T>* tape = nullptr;
  {
    const Tensor<T>* parts[] = {&inp.u, &inp.delta, &inp.B, &inp.C, &core.A_log,
                                &core.D};
    for (const Tensor<T>* t : parts) {
      if (!t->on_tape()) continue;
      if (tape != nullptr && tape != t->tape()) {
        throw TapeError("selective_scan: operands recorded on different tapes");
      }
      tape = t->tape();
    }
  }
  Tensor<T> y = detail::TensorAccess<T>::make({len, din}, std::move(out), tape);
  if (tape == nullptr) return y;

  const int64_t uv = inp.u.on_tape() ? inp.u.vid() : -1;
  const int64_t dv = inp.delta.on_tape() ? inp.delta.vid() : -1;
  const int64_t bv = inp.B.on_tape() ? inp.B.vid() : -1;
  const int64_t cv = inp.C.on_tape() ? inp.C.vid() : -1;
  const int64_t av = core.A_log.on_tape() ? core.A_log.vid() : -1;
  const int64_t ddv = core.D.on_tape() ? core.D.vid() : -1;
  const int64_t yv = y.vid();
  Storage<T> us = detail::TensorAccess<T>::storage(inp.u);
  Storage<T> ds = detail::TensorAccess<T>::storage(inp.delta);
  Storage<T> bs = detail::TensorAccess<T>::storage(inp.B);
  Storage<T> cs = detail::TensorAccess<T>::storage(inp.C);
  Storage<T> as = detail::TensorAccess<T>::storage(core.A_log);
  Storage<T> dds = detail::TensorAccess<T>::storage(core.D);

  tape->record([=](Tape<T>& tp) {
    auto go = tp.grad_view(yv);
    if (go.empty()) return;
    const T* gy = go.data();
    const T* u = us->data();
    const T* delta = ds->data();
    const T* B = bs->data();
    const T* C = cs->data();
    const T* al = as->data();
    const T* D = dds->data();

    T* gu = uv >= 0 ? tp.grad_accum(uv).data() : nullptr;
    T* gdelta = dv >= 0 ? tp.grad_accum(dv).data() : nullptr;
    T* gB = bv >= 0 ? tp.grad_accum(bv).data() : nullptr;
    T* gC = cv >= 0 ? tp.grad_accum(cv).data() : nullptr;
    T* gA = av >= 0 ? tp.grad_accum(av).data() : nullptr;
    T* gD = ddv >= 0 ? tp.grad_accum(ddv).data() : nullptr;

    // Per channel: recompute h forward, then run the adjoint recurrence in
    // reverse. ghk carries gh[t+1]*e[t+1] into step t.
    std::vector<T> h(static_cast<size_t>(len * ns));
    std::vector<T> ghk(static_cast<size_t>(ns));
    std::vector<T> a_loc(static_cast<size_t>(ns));
    for (int64_t d = 0; d < din; ++d) {
      for (int64_t k = 0; k < ns; ++k) a_loc[static_cast<size_t>(k)] = -std::exp(al[d * ns + k]);
      for (int64_t t = 0; t < len; ++t) {
        const T dt = delta[t * din + d];
        const T ut = u[t * din + d];
        const T* brow = B + t * ns;
        T* hrow = h.data() + t * ns;
        const T* hprev = t > 0 ? h.data() + (t - 1) * ns : nullptr;
        for (int64_t k = 0; k < ns; ++k) {
          const T a = a_loc[static_cast<size_t>(k)];
          const T da = dt * a;
          const T e = std::exp(da);
          const T bbar = phi_of(da, a, form, dt) * brow[k];
          hrow[k] = e * (hprev ? hprev[k] : T(0)) + bbar * ut;
        }
      }
      std::fill(ghk.begin(), ghk.end(), T(0));
      for (int64_t t = len - 1; t >= 0; --t) {
        const T gyt = gy[t * din + d];
        const T dt = delta[t * din + d];
        const T ut = u[t * din + d];
        const T* brow = B + t * ns;
        const T* crow = C + t * ns;
        const T* hrow = h.data() + t * ns;
        const T* hprev = t > 0 ? h.data() + (t - 1) * ns : nullptr;
        if (gD != nullptr) gD[d] += gyt * ut;
        T gut = gyt * D[d];
        T gdt = T(0);
        for (int64_t k = 0; k < ns; ++k) {
          const T a = a_loc[static_cast<size_t>(k)];
          const T da = dt * a;
          const T e = std::exp(da);
          const T phi = phi_of(da, a, form, dt);
          const T bbar = phi * brow[k];
          if (gC != nullptr) gC[t * ns + k] += gyt * hrow[k];
          const T gh = gyt * crow[k] + ghk[static_cast<size_t>(k)];
          const T ge = gh * (hprev ? hprev[k] : T(0));
          const T gbbar = gh * ut;
          gut += gh * bbar;
          if (gB != nullptr) gB[t * ns + k] += gbbar * phi;
          const T gphi = gbbar * brow[k];
          if (form == DeltaBForm::Zoh) {
            gdt += ge * a * e + gphi * e;
            if (gA != nullptr) {
              const T dphida = (dt * e - phi) / a;
              gA[d * ns + k] += (ge * dt * e + gphi * dphida) * a;
            }
          } else {
            gdt += ge * a * e + gphi;
            if (gA != nullptr) gA[d * ns + k] += ge * dt * e * a;
          }
          ghk[static_cast<size_t>(k)] = gh * e;
        }
        if (gu != nullptr) gu[t * din + d] += gut;
        if (gdelta != nullptr) gdelta[t * din + d] += gdt;
      }
    }
  });
  return y;
}

template <typename T>
KernelMatrix<T> kernel_materialize(const SsmCore<T>& core,
                                   const Tensor<T>& delta_row,
                                   const Tensor<T>& b_row,
                                   const Tensor<T>& c_row, int64_t len,
                                   DeltaBForm form) {
  const int64_t din = core.d_inner();
  const int64_t ns = core.d_state();
  if (delta_row.rank() != 1 || delta_row.dim(0) != din) {
    throw ShapeError("kernel_materialize: delta_row must have d_inner entries");
  }
  if (b_row.rank() != 1 || b_row.dim(0) != ns || c_row.rank() != 1 ||
      c_row.dim(0) != ns) {
    throw ShapeError("kernel_materialize: B/C rows must have d_state entries");
  }
  if (len < 1) throw InvariantError("kernel_materialize: len must be >= 1");
  for (T dt : delta_row.values()) {
    if (!(dt > T(0))) throw InvariantError("kernel_materialize: delta must be positive");
  }
  const T* dl = delta_row.data();
  const T* bd = b_row.data();
  const T* cd = c_row.data();
  const T* al = core.A_log.data();
  std::vector<T> kbar(static_cast<size_t>(din * len), T(0));
  std::vector<T> pw(static_cast<size_t>(ns));
  std::vector<T> e(static_cast<size_t>(ns));
  std::vector<T> cb(static_cast<size_t>(ns));
  for (int64_t d = 0; d < din; ++d) {
    for (int64_t k = 0; k < ns; ++k) {
      const T a = -std::exp(al[d * ns + k]);
      const T da = dl[d] * a;
      e[static_cast<size_t>(k)] = std::exp(da);
      cb[static_cast<size_t>(k)] = cd[k] * phi_of(da, a, form, dl[d]) * bd[k];
      pw[static_cast<size_t>(k)] = T(1);
    }
    for (int64_t j = 0; j < len; ++j) {
      T acc = T(0);
      for (int64_t k = 0; k < ns; ++k) {
        acc += cb[static_cast<size_t>(k)] * pw[static_cast<size_t>(k)];
        pw[static_cast<size_t>(k)] *= e[static_cast<size_t>(k)];
      }
      kbar[static_cast<size_t>(d * len + j)] = acc;
    }
  }
  return KernelMatrix<T>{Tensor<T>({din, len}, std::move(kbar))};
}

template <typename T>
KernelMatrix<T> kernel_from_inputs(const SsmCore<T>& core,
                                   const ScanInputs<T>& inp, DeltaBForm form) {
  validate_scan_args(core, inp);
  const int64_t len = inp.length();
  const int64_t din = core.d_inner();
  const int64_t ns = core.d_state();
  const T* dl = inp.delta.data();
  const T* bd = inp.B.data();
  const T* cd = inp.C.data();
  for (int64_t t = 1; t < len; ++t) {
    for (int64_t d = 0; d < din; ++d) {
      if (dl[t * din + d] != dl[d]) {
        throw InvariantError("kernel_from_inputs: delta varies over time");
      }
    }
    for (int64_t k = 0; k < ns; ++k) {
      if (bd[t * ns + k] != bd[k] || cd[t * ns + k] != cd[k]) {
        throw InvariantError("kernel_from_inputs: B/C vary over time");
      }
    }
  }
  std::vector<T> drow(dl, dl + din);
  std::vector<T> brow(bd, bd + ns);
  std::vector<T> crow(cd, cd + ns);
  return kernel_materialize(core, Tensor<T>({din}, std::move(drow)),
                            Tensor<T>({ns}, std::move(brow)),
                            Tensor<T>({ns}, std::move(crow)), len, form);
}

template <typename T>
std::vector<T> contribution(const SsmCore<T>& core, const ScanInputs<T>& inp,
                            int64_t p, int64_t q, DeltaBForm form) {
  validate_scan_args(core, inp);
  const int64_t len = inp.length();
  if (p < 0 || q < p || q >= len) {
    throw InvariantError("contribution: need 0 <= p <= q < L, got p=" +
                         std::to_string(p) + " q=" + std::to_string(q) +
                         " L=" + std::to_string(len));
  }
  const int64_t din = core.d_inner();
  const int64_t ns = core.d_state();
  const T* dl = inp.delta.data();
  const T* bd = inp.B.data();
  const T* cd = inp.C.data();
  const T* al = core.A_log.data();
  const T* dd = core.D.data();
  std::vector<T> result(static_cast<size_t>(din), T(0));
  for (int64_t d = 0; d < din; ++d) {
    T acc = T(0);
    for (int64_t k = 0; k < ns; ++k) {
      const T a = -std::exp(al[d * ns + k]);
      // A_(p->q) = exp(sum_{i=p+1}^{q} delta_i * a); empty product for p == q.
      T dsum = T(0);
      for (int64_t i = p + 1; i <= q; ++i) dsum += dl[i * din + d];
      const T apq = std::exp(dsum * a);
      const T dap = dl[p * din + d] * a;
      const T bbar_p = phi_of(dap, a, form, dl[p * din + d]) * bd[p * ns + k];
      acc += cd[q * ns + k] * apq * bbar_p;
    }
    if (p == q) acc += dd[d];
    result[static_cast<size_t>(d)] = acc;
  }
  return result;
}

template <typename T>
Tensor<T> decay_profile(const SsmCore<T>& core, const ScanInputs<T>& inp,
                        int64_t p, DeltaBForm form) {
  const int64_t len = inp.length();
  if (p < 0 || p >= len) {
    throw InvariantError("decay_profile: p out of range");
  }
  const int64_t din = core.d_inner();
  std::vector<T> mags(static_cast<size_t>(din * (len - p)));
  for (int64_t q = p; q < len; ++q) {
    const std::vector<T> c = contribution(core, inp, p, q, form);
    for (int64_t d = 0; d < din; ++d) {
      mags[static_cast<size_t>(d * (len - p) + (q - p))] =
          std::fabs(c[static_cast<size_t>(d)]);
    }
  }
  return Tensor<T>({din, len - p}, std::move(mags));
}

template <typename T>
void write_decay_csv(std::ostream& os, const SsmCore<T>& core,
                     const ScanInputs<T>& inp, int64_t p, DeltaBForm form) {
  const Tensor<T> prof = decay_profile(core, inp, p, form);
  const int64_t din = prof.dim(0);
  const int64_t cols = prof.dim(1);
  os << "p,q,channel,magnitude\n";
  for (int64_t d = 0; d < din; ++d) {
    for (int64_t j = 0; j < cols; ++j) {
      os << p << "," << (p + j) << "," << d << ","
         << prof.at({d, j}) << "\n";
    }
  }
}

#define MAMBACSR_INSTANTIATE_SSM(T)                                             \
  template std::pair<Tensor<T>, Tensor<T>> discretize(                          \
      const SsmCore<T>&, const Tensor<T>&, const Tensor<T>&, DeltaBForm);       \
  template Tensor<T> selective_scan(const SsmCore<T>&, const ScanInputs<T>&,    \
                                    DeltaBForm);                                \
  template KernelMatrix<T> kernel_materialize(                                  \
      const SsmCore<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
      int64_t, DeltaBForm);                                                     \
  template KernelMatrix<T> kernel_from_inputs(                                  \
      const SsmCore<T>&, const ScanInputs<T>&, DeltaBForm);                     \
  template std::vector<T> contribution(const SsmCore<T>&, const ScanInputs<T>&, \
                                       int64_t, int64_t, DeltaBForm);           \
  template Tensor<T> decay_profile(const SsmCore<T>&, const ScanInputs<T>&,     \
                                   int64_t, DeltaBForm);                        \
  template void write_decay_csv(std::ostream&, const SsmCore<T>&,               \
                                const ScanInputs<T>&, int64_t, DeltaBForm);

MAMBACSR_INSTANTIATE_SSM(float)
MAMBACSR_INSTANTIATE_SSM(double)
#undef MAMBACSR_INSTANTIATE_SSM

}  // namespace mambacsr
