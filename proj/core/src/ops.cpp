#include "mambacsr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mambacsr/resample.hpp"

namespace mambacsr {

namespace {

template <typename T>
using Storage = std::shared_ptr<const std::vector<T>>;

template <typename T>
Tensor<T> make(std::vector<int64_t> shape, std::vector<T> data, Tape<T>* tape) {
  return detail::TensorAccess<T>::make(std::move(shape), std::move(data), tape);
}

template <typename T>
Storage<T> storage(const Tensor<T>& t) {
  return detail::TensorAccess<T>::storage(t);
}

template <typename T>
Tape<T>* merge_tapes(std::initializer_list<const Tensor<T>*> ts) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ts) {
    if (t == nullptr || !t->on_tape()) continue;
    if (tape == nullptr) {
      tape = t->tape();
    } else if (tape != t->tape()) {
      throw TapeError("operands recorded on different tapes");
    }
  }
  return tape;
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

// ---- elementwise helpers ----

// dfdx(x, y) evaluates the derivative of the op at one element.
template <typename T, typename F, typename G>
Tensor<T> unary_elementwise(const Tensor<T>& x, F f, G dfdx) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make(x.shape(), std::move(out), tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xv_id = x.vid();
    const int64_t yv_id = y.vid();
    auto xs = storage(x);
    auto ys = storage(y);
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv_id);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xv_id);
      const auto& xd = *xs;
      const auto& yd = *ys;
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * dfdx(xd[i], yd[i]);
    });
  }
  return y;
}

enum class BinKind { Add, Sub, Mul };

template <typename T>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, BinKind kind) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw ShapeError("elementwise op: shapes " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()) +
                     " differ and neither operand is scalar");
  }
  const auto av = a.values();
  const auto bv = b.values();
  const size_t n = std::max(av.size(), bv.size());
  std::vector<T> out(n);
  const auto pick_a = [&](size_t i) { return a_scalar ? av[0] : av[i]; };
  const auto pick_b = [&](size_t i) { return b_scalar ? bv[0] : bv[i]; };
  switch (kind) {
    case BinKind::Add:
      for (size_t i = 0; i < n; ++i) out[i] = pick_a(i) + pick_b(i);
      break;
    case BinKind::Sub:
      for (size_t i = 0; i < n; ++i) out[i] = pick_a(i) - pick_b(i);
      break;
    case BinKind::Mul:
      for (size_t i = 0; i < n; ++i) out[i] = pick_a(i) * pick_b(i);
      break;
  }
  const auto& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  Tape<T>* tape = merge_tapes<T>({&a, &b});
  Tensor<T> y = make(std::vector<int64_t>(out_shape), std::move(out), tape);
  if (tape != nullptr) {
    const int64_t av_id = a.on_tape() ? a.vid() : -1;
    const int64_t bv_id = b.on_tape() ? b.vid() : -1;
    const int64_t yv_id = y.vid();
    auto as = storage(a);
    auto bs = storage(b);
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv_id);
      if (go.empty()) return;
      const auto& ad = *as;
      const auto& bd = *bs;
      if (av_id >= 0) {
        auto& ga = tp.grad_accum(av_id);
        for (size_t i = 0; i < go.size(); ++i) {
          T g = go[i];
          if (kind == BinKind::Mul) g *= b_scalar ? bd[0] : bd[i];
          ga[a_scalar ? 0 : i] += g;
        }
      }
      if (bv_id >= 0) {
        auto& gb = tp.grad_accum(bv_id);
        for (size_t i = 0; i < go.size(); ++i) {
          T g = go[i];
          switch (kind) {
            case BinKind::Add:
              break;
            case BinKind::Sub:
              g = -g;
              break;
            case BinKind::Mul:
              g *= a_scalar ? ad[0] : ad[i];
              break;
          }
          gb[b_scalar ? 0 : i] += g;
        }
      }
    });
  }
  return y;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// ---- generic row gather over the token axis ----

struct TokenAxisInfo {
  int64_t outer;  // product of leading axes (1 for rank 2)
  int64_t rows;   // token count
  int64_t inner;  // feature width
};

template <typename T>
TokenAxisInfo token_axis(const Tensor<T>& x, const char* op) {
  if (x.rank() == 2) {
    return {1, x.dim(0), x.dim(1)};
  }
  if (x.rank() == 3) {
    return {x.dim(0), x.dim(1), x.dim(2)};
  }
  throw ShapeError(std::string(op) + ": expected rank 2 or 3, got shape " +
                   shape_to_string(x.shape()));
}

template <typename T>
Tensor<T> row_gather(const Tensor<T>& x, std::span<const int64_t> indices,
                     const char* op) {
  const TokenAxisInfo ax = token_axis(x, op);
  for (int64_t idx : indices) {
    if (idx < 0 || idx >= ax.rows) {
      throw ShapeError(std::string(op) + ": row index " + std::to_string(idx) +
                       " out of range for " + std::to_string(ax.rows) + " rows");
    }
  }
  const int64_t out_rows = static_cast<int64_t>(indices.size());
  std::vector<int64_t> out_shape = x.shape();
  out_shape[out_shape.size() - 2] = out_rows;
  const T* xd = x.data();
  std::vector<T> out(static_cast<size_t>(ax.outer * out_rows * ax.inner));
  for (int64_t o = 0; o < ax.outer; ++o) {
    const T* src_base = xd + o * ax.rows * ax.inner;
    T* dst = out.data() + o * out_rows * ax.inner;
    for (int64_t k = 0; k < out_rows; ++k) {
      std::memcpy(dst + k * ax.inner, src_base + indices[static_cast<size_t>(k)] * ax.inner,
                  static_cast<size_t>(ax.inner) * sizeof(T));
    }
  }
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make(std::move(out_shape), std::move(out), tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xv_id = x.vid();
    const int64_t yv_id = y.vid();
    std::vector<int64_t> idx(indices.begin(), indices.end());
    tape->record([=, idx = std::move(idx)](Tape<T>& tp) {
      auto go = tp.grad_view(yv_id);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xv_id);
      const int64_t rows_out = static_cast<int64_t>(idx.size());
      for (int64_t o = 0; o < ax.outer; ++o) {
        T* gx_base = gx.data() + o * ax.rows * ax.inner;
        const T* go_base = go.data() + o * rows_out * ax.inner;
        for (int64_t k = 0; k < rows_out; ++k) {
          T* dst = gx_base + idx[static_cast<size_t>(k)] * ax.inner;
          const T* src = go_base + k * ax.inner;
          for (int64_t i = 0; i < ax.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

}  // namespace

// ---- elementwise family ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(a, b, BinKind::Add);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(a, b, BinKind::Sub);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(a, b, BinKind::Mul);
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary_elementwise(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T k = T(0.7978845608028654);  // sqrt(2/pi)
  const T c = T(0.044715);
  return unary_elementwise(
      x,
      [k, c](T v) {
        const T t = std::tanh(k * (v + c * v * v * v));
        return T(0.5) * v * (T(1) + t);
      },
      [k, c](T v, T) {
        const T t = std::tanh(k * (v + c * v * v * v));
        const T dt = (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
        return T(0.5) * (T(1) + t) + T(0.5) * v * dt;
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_elementwise(
      x, [](T v) { return sigmoid_scalar(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_elementwise(
      x,
      [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::fabs(v))); },
      [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_elementwise(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> scale_by_scalar(const Tensor<T>& x, T c) {
  return unary_elementwise(
      x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

// ---- linear ----

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w,
                 const std::optional<Tensor<T>>& b) {
  require_rank(w, 2, "linear(w)");
  if (x.rank() < 1) throw ShapeError("linear: x must have rank >= 1");
  const int64_t in_f = x.dim(-1);
  const int64_t out_f = w.dim(0);
  if (w.dim(1) != in_f) {
    throw ShapeError("linear: inner dimension mismatch, x " +
                     shape_to_string(x.shape()) + " vs w " +
                     shape_to_string(w.shape()));
  }
  if (b && (b->rank() != 1 || b->dim(0) != out_f)) {
    throw ShapeError("linear: bias shape " + shape_to_string(b->shape()) +
                     " does not match out features " + std::to_string(out_f));
  }
  const int64_t rows = x.size() / in_f;
  std::vector<int64_t> out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<T> out(static_cast<size_t>(rows * out_f));
  const T* xd = x.data();
  const T* wd = w.data();
  const T* bd = b ? b->data() : nullptr;
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * in_f;
    T* yr = out.data() + r * out_f;
    for (int64_t o = 0; o < out_f; ++o) {
      const T* wr = wd + o * in_f;
      T acc = bd ? bd[o] : T(0);
      for (int64_t i = 0; i < in_f; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  const Tensor<T>* bp = b ? &*b : nullptr;
  Tape<T>* tape = merge_tapes<T>({&x, &w, bp});
  Tensor<T> y = make(std::move(out_shape), std::move(out), tape);
  if (tape != nullptr) {
    const int64_t xv = x.on_tape() ? x.vid() : -1;
    const int64_t wv = w.on_tape() ? w.vid() : -1;
    const int64_t bv = (b && b->on_tape()) ? b->vid() : -1;
    const int64_t yv = y.vid();
    auto xs = storage(x);
    auto ws = storage(w);
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      const T* god = go.data();
      if (xv >= 0) {
        auto& gx = tp.grad_accum(xv);
        const T* wdp = ws->data();
        for (int64_t r = 0; r < rows; ++r) {
          T* gxr = gx.data() + r * in_f;
          const T* gor = god + r * out_f;
          for (int64_t o = 0; o < out_f; ++o) {
            const T g = gor[o];
            if (g == T(0)) continue;
            const T* wr = wdp + o * in_f;
            for (int64_t i = 0; i < in_f; ++i) gxr[i] += g * wr[i];
          }
        }
      }
      if (wv >= 0) {
        auto& gw = tp.grad_accum(wv);
        const T* xdp = xs->data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* xr = xdp + r * in_f;
          const T* gor = god + r * out_f;
          for (int64_t o = 0; o < out_f; ++o) {
            const T g = gor[o];
            if (g == T(0)) continue;
            T* gwr = gw.data() + o * in_f;
            for (int64_t i = 0; i < in_f; ++i) gwr[i] += g * xr[i];
          }
        }
      }
      if (bv >= 0) {
        auto& gb = tp.grad_accum(bv);
        for (int64_t r = 0; r < rows; ++r) {
          const T* gor = god + r * out_f;
          for (int64_t o = 0; o < out_f; ++o) gb[o] += gor[o];
        }
      }
    });
  }
  return y;
}

// ---- conv2d ----

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::optional<Tensor<T>>& b, int padding, int groups) {
  require_rank(x, 4, "conv2d(x)");
  require_rank(w, 4, "conv2d(w)");
  const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t cout = w.dim(0), cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (kh != kw || (kh != 1 && kh != 3)) {
    throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (groups < 1 || cin % groups != 0 || cout % groups != 0 ||
      cin_g * groups != cin) {
    throw ShapeError("conv2d: channel/group mismatch, x " +
                     shape_to_string(x.shape()) + " w " +
                     shape_to_string(w.shape()) + " groups " +
                     std::to_string(groups));
  }
  if (b && (b->rank() != 1 || b->dim(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + shape_to_string(b->shape()) +
                     " does not match out channels " + std::to_string(cout));
  }
  if (padding < 0) throw ShapeError("conv2d: negative padding");
  const int64_t p = padding;
  const int64_t oh = h + 2 * p - kh + 1;
  const int64_t ow = wd + 2 * p - kw + 1;
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: non-positive output extents");
  }
  const int64_t cout_g = cout / groups;
  std::vector<T> out(static_cast<size_t>(n * cout * oh * ow), T(0));
  const T* xd = x.data();
  const T* wdat = w.data();
  const T* bd = b ? b->data() : nullptr;
  for (int64_t in = 0; in < n; ++in) {
    for (int64_t co = 0; co < cout; ++co) {
      T* op = out.data() + ((in * cout + co) * oh) * ow;
      if (bd != nullptr) {
        const T bias = bd[co];
        for (int64_t i = 0; i < oh * ow; ++i) op[i] = bias;
      }
      const int64_t g = co / cout_g;
      for (int64_t cig = 0; cig < cin_g; ++cig) {
        const int64_t ci = g * cin_g + cig;
        const T* ip = xd + ((in * cin + ci) * h) * wd;
        const T* wp = wdat + ((co * cin_g + cig) * kh) * kw;
        for (int64_t dy = 0; dy < kh; ++dy) {
          for (int64_t dx = 0; dx < kw; ++dx) {
            const T wv = wp[dy * kw + dx];
            if (wv == T(0)) continue;
            const int64_t oy0 = std::max<int64_t>(0, p - dy);
            const int64_t oy1 = std::min<int64_t>(oh, h + p - dy);
            const int64_t ox0 = std::max<int64_t>(0, p - dx);
            const int64_t ox1 = std::min<int64_t>(ow, wd + p - dx);
            for (int64_t y = oy0; y < oy1; ++y) {
              const T* irow = ip + (y + dy - p) * wd + (ox0 + dx - p);
              T* orow = op + y * ow + ox0;
              for (int64_t xcol = 0; xcol < ox1 - ox0; ++xcol) {
                orow[xcol] += wv * irow[xcol];
              }
            }
          }
        }
      }
    }
  }
  const Tensor<T>* bp = b ? &*b : nullptr;
  Tape<T>* tape = merge_tapes<T>({&x, &w, bp});
  Tensor<T> y = make({n, cout, oh, ow}, std::move(out), tape);
  if (tape != nullptr) {
    const int64_t xv = x.on_tape() ? x.vid() : -1;
    const int64_t wv = w.on_tape() ? w.vid() : -1;
    const int64_t bv = (b && b->on_tape()) ? b->vid() : -1;
    const int64_t yv = y.vid();
    auto xs = storage(x);
    auto ws = storage(w);
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      const T* god = go.data();
      if (xv >= 0) {
        auto& gx = tp.grad_accum(xv);
        const T* wdp = ws->data();
        for (int64_t in = 0; in < n; ++in) {
          for (int64_t co = 0; co < cout; ++co) {
            const T* gop = god + ((in * cout + co) * oh) * ow;
            const int64_t g = co / cout_g;
            for (int64_t cig = 0; cig < cin_g; ++cig) {
              const int64_t ci = g * cin_g + cig;
              T* gxp = gx.data() + ((in * cin + ci) * h) * wd;
              const T* wp = wdp + ((co * cin_g + cig) * kh) * kw;
              for (int64_t dy = 0; dy < kh; ++dy) {
                for (int64_t dx = 0; dx < kw; ++dx) {
                  const T wval = wp[dy * kw + dx];
                  if (wval == T(0)) continue;
                  const int64_t oy0 = std::max<int64_t>(0, p - dy);
                  const int64_t oy1 = std::min<int64_t>(oh, h + p - dy);
                  const int64_t ox0 = std::max<int64_t>(0, p - dx);
                  const int64_t ox1 = std::min<int64_t>(ow, wd + p - dx);
                  for (int64_t yy = oy0; yy < oy1; ++yy) {
                    T* gxrow = gxp + (yy + dy - p) * wd + (ox0 + dx - p);
                    const T* gorow = gop + yy * ow + ox0;
                    for (int64_t xcol = 0; xcol < ox1 - ox0; ++xcol) {
                      gxrow[xcol] += wval * gorow[xcol];
                    }
                  }
                }
              }
            }
          }
        }
      }
      if (wv >= 0) {
        auto& gw = tp.grad_accum(wv);
        const T* xdp = xs->data();
        for (int64_t in = 0; in < n; ++in) {
          for (int64_t co = 0; co < cout; ++co) {
            const T* gop = god + ((in * cout + co) * oh) * ow;
            const int64_t g = co / cout_g;
            for (int64_t cig = 0; cig < cin_g; ++cig) {
              const int64_t ci = g * cin_g + cig;
              const T* ip = xdp + ((in * cin + ci) * h) * wd;
              T* gwp = gw.data() + ((co * cin_g + cig) * kh) * kw;
              for (int64_t dy = 0; dy < kh; ++dy) {
                for (int64_t dx = 0; dx < kw; ++dx) {
                  const int64_t oy0 = std::max<int64_t>(0, p - dy);
                  const int64_t oy1 = std::min<int64_t>(oh, h + p - dy);
                  const int64_t ox0 = std::max<int64_t>(0, p - dx);
                  const int64_t ox1 = std::min<int64_t>(ow, wd + p - dx);
                  T acc = T(0);
                  for (int64_t yy = oy0; yy < oy1; ++yy) {
                    const T* irow = ip + (yy + dy - p) * wd + (ox0 + dx - p);
                    const T* gorow = gop + yy * ow + ox0;
                    for (int64_t xcol = 0; xcol < ox1 - ox0; ++xcol) {
                      acc += irow[xcol] * gorow[xcol];
                    }
                  }
                  gwp[dy * kw + dx] += acc;
                }
              }
            }
          }
        }
      }
      if (bv >= 0) {
        auto& gb = tp.grad_accum(bv);
        for (int64_t in = 0; in < n; ++in) {
          for (int64_t co = 0; co < cout; ++co) {
            const T* gop = god + ((in * cout + co) * oh) * ow;
            T acc = T(0);
            for (int64_t i = 0; i < oh * ow; ++i) acc += gop[i];
            gb[co] += acc;
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int padding,
                 int groups) {
  return conv2d(x, w, std::optional<Tensor<T>>{}, padding, groups);
}

// ---- layer_norm ----

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: x must have rank >= 1");
  const int64_t c = x.dim(-1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 ||
      beta.dim(0) != c) {
    throw ShapeError("layer_norm: gamma/beta shapes " +
                     shape_to_string(gamma.shape()) + "/" +
                     shape_to_string(beta.shape()) +
                     " do not match channel count " + std::to_string(c));
  }
  const int64_t rows = x.size() / c;
  const T* xd = x.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(rows * c));
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  std::vector<T> out(static_cast<size_t>(rows * c));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * c;
    T mean = T(0);
    for (int64_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int64_t i = 0; i < c; ++i) {
      const T d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*istd)[static_cast<size_t>(r)] = is;
    T* xh = xhat->data() + r * c;
    T* yr = out.data() + r * c;
    for (int64_t i = 0; i < c; ++i) {
      xh[i] = (xr[i] - mean) * is;
      yr[i] = xh[i] * gd[i] + bd[i];
    }
  }
  Tape<T>* tape = merge_tapes<T>({&x, &gamma, &beta});
  Tensor<T> y = make(std::vector<int64_t>(x.shape()), std::move(out), tape);
  if (tape != nullptr) {
    const int64_t xv = x.on_tape() ? x.vid() : -1;
    const int64_t gv = gamma.on_tape() ? gamma.vid() : -1;
    const int64_t bv = beta.on_tape() ? beta.vid() : -1;
    const int64_t yv = y.vid();
    auto gs = storage(gamma);
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      const T* god = go.data();
      const T* xh = xhat->data();
      if (gv >= 0) {
        auto& gg = tp.grad_accum(gv);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < c; ++i) gg[i] += god[r * c + i] * xh[r * c + i];
      }
      if (bv >= 0) {
        auto& gb = tp.grad_accum(bv);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < c; ++i) gb[i] += god[r * c + i];
      }
      if (xv >= 0) {
        auto& gx = tp.grad_accum(xv);
        const T* gdp = gs->data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* gor = god + r * c;
          const T* xhr = xh + r * c;
          T m1 = T(0), m2 = T(0);
          for (int64_t i = 0; i < c; ++i) {
            const T gh = gor[i] * gdp[i];
            m1 += gh;
            m2 += gh * xhr[i];
          }
          m1 /= static_cast<T>(c);
          m2 /= static_cast<T>(c);
          const T is = (*istd)[static_cast<size_t>(r)];
          T* gxr = gx.data() + r * c;
          for (int64_t i = 0; i < c; ++i) {
            const T gh = gor[i] * gdp[i];
            gxr[i] += is * (gh - m1 - xhr[i] * m2);
          }
        }
      }
    });
  }
  return y;
}

// ---- pooling / shuffling ----

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t hw = h * w;
  std::vector<T> out(static_cast<size_t>(n * c));
  const T* xd = x.data();
  for (int64_t i = 0; i < n * c; ++i) {
    const T* p = xd + i * hw;
    T acc = T(0);
    for (int64_t j = 0; j < hw; ++j) acc += p[j];
    out[static_cast<size_t>(i)] = acc / static_cast<T>(hw);
  }
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make({n, c, 1, 1}, std::move(out), tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xv = x.vid();
    const int64_t yv = y.vid();
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xv);
      for (int64_t i = 0; i < n * c; ++i) {
        const T g = go[static_cast<size_t>(i)] / static_cast<T>(hw);
        T* p = gx.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) p[j] += g;
      }
    });
  }
  return y;
}

namespace {

// Shared machinery for pure index-remap ops: out[i] = in[map[i]].
template <typename T>
Tensor<T> remap_op(const Tensor<T>& x, std::vector<int64_t> out_shape,
                   std::shared_ptr<const std::vector<int64_t>> map) {
  const T* xd = x.data();
  std::vector<T> out(map->size());
  for (size_t i = 0; i < map->size(); ++i) out[i] = xd[(*map)[i]];
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make(std::move(out_shape), std::move(out), tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xv = x.vid();
    const int64_t yv = y.vid();
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xv);
      for (size_t i = 0; i < map->size(); ++i) gx[(*map)[i]] += go[i];
    });
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  require_rank(x, 4, "pixel_shuffle");
  if (r < 1) throw ShapeError("pixel_shuffle: r must be >= 1");
  const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t r2 = static_cast<int64_t>(r) * r;
  if (cin % r2 != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(cin) +
                     " not divisible by r^2 = " + std::to_string(r2));
  }
  const int64_t c = cin / r2;
  auto map = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(n * cin * h * w));
  int64_t pos = 0;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t oc = 0; oc < c; ++oc)
      for (int64_t oy = 0; oy < h * r; ++oy)
        for (int64_t ox = 0; ox < w * r; ++ox) {
          const int64_t dy = oy % r, dx = ox % r;
          const int64_t ic = oc * r2 + dy * r + dx;
          (*map)[static_cast<size_t>(pos++)] =
              ((in * cin + ic) * h + oy / r) * w + ox / r;
        }
  return remap_op(x, {n, c, h * r, w * r}, std::move(map));
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  require_rank(x, 4, "pixel_unshuffle");
  if (r < 1) throw ShapeError("pixel_unshuffle: r must be >= 1");
  const int64_t n = x.dim(0), c = x.dim(1), hr = x.dim(2), wr = x.dim(3);
  if (hr % r != 0 || wr % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial extents not divisible by r");
  }
  const int64_t h = hr / r, w = wr / r;
  const int64_t r2 = static_cast<int64_t>(r) * r;
  auto map = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(n * c * hr * wr));
  int64_t pos = 0;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c * r2; ++ic)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xq = 0; xq < w; ++xq) {
          const int64_t oc = ic / r2;
          const int64_t dy = (ic % r2) / r, dx = ic % r;
          (*map)[static_cast<size_t>(pos++)] =
              ((in * c + oc) * hr + y * r + dy) * wr + xq * r + dx;
        }
  return remap_op(x, {n, c * r2, h, w}, std::move(map));
}

// ---- token reordering ----

template <typename T>
Tensor<T> gather_tokens(const Tensor<T>& x, const Trajectory& traj) {
  const TokenAxisInfo ax = token_axis(x, "gather_tokens");
  if (ax.rows != traj.length()) {
    throw ShapeError("gather_tokens: permutation length " +
                     std::to_string(traj.length()) + " does not match " +
                     std::to_string(ax.rows) + " tokens");
  }
  return row_gather(x, traj.perm, "gather_tokens");
}

template <typename T>
Tensor<T> scatter_tokens(const Tensor<T>& x, const Trajectory& traj) {
  const TokenAxisInfo ax = token_axis(x, "scatter_tokens");
  if (ax.rows != traj.length()) {
    throw ShapeError("scatter_tokens: permutation length " +
                     std::to_string(traj.length()) + " does not match " +
                     std::to_string(ax.rows) + " tokens");
  }
  // out[perm[k]] = x[k]  <=>  out[j] = x[inv_perm[j]]
  return row_gather(x, traj.inv_perm, "scatter_tokens");
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::span<const int64_t> indices) {
  return row_gather(x, indices, "take_rows");
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  const TokenAxisInfo aa = token_axis(a, "concat_rows");
  const TokenAxisInfo bb = token_axis(b, "concat_rows");
  if (a.rank() != b.rank() || aa.outer != bb.outer || aa.inner != bb.inner) {
    throw ShapeError("concat_rows: incompatible shapes " +
                     shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  std::vector<int64_t> out_shape = a.shape();
  out_shape[out_shape.size() - 2] = aa.rows + bb.rows;
  std::vector<T> out(static_cast<size_t>(aa.outer * (aa.rows + bb.rows) * aa.inner));
  const T* ad = a.data();
  const T* bd = b.data();
  for (int64_t o = 0; o < aa.outer; ++o) {
    T* dst = out.data() + o * (aa.rows + bb.rows) * aa.inner;
    std::memcpy(dst, ad + o * aa.rows * aa.inner,
                static_cast<size_t>(aa.rows * aa.inner) * sizeof(T));
    std::memcpy(dst + aa.rows * aa.inner, bd + o * bb.rows * bb.inner,
                static_cast<size_t>(bb.rows * bb.inner) * sizeof(T));
  }
  Tape<T>* tape = merge_tapes<T>({&a, &b});
  Tensor<T> y = make(std::move(out_shape), std::move(out), tape);
  if (tape != nullptr) {
    const int64_t av = a.on_tape() ? a.vid() : -1;
    const int64_t bv = b.on_tape() ? b.vid() : -1;
    const int64_t yv = y.vid();
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      const int64_t rows = aa.rows + bb.rows;
      if (av >= 0) {
        auto& ga = tp.grad_accum(av);
        for (int64_t o = 0; o < aa.outer; ++o) {
          const T* src = go.data() + o * rows * aa.inner;
          T* dst = ga.data() + o * aa.rows * aa.inner;
          for (int64_t i = 0; i < aa.rows * aa.inner; ++i) dst[i] += src[i];
        }
      }
      if (bv >= 0) {
        auto& gb = tp.grad_accum(bv);
        for (int64_t o = 0; o < aa.outer; ++o) {
          const T* src = go.data() + (o * rows + aa.rows) * aa.inner;
          T* dst = gb.data() + o * bb.rows * bb.inner;
          for (int64_t i = 0; i < bb.rows * bb.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> cross_scale_sequence(const CrossScaleLayout& layout,
                               const Tensor<T>& down, const Tensor<T>& orig) {
  const TokenAxisInfo dax = token_axis(down, "cross_scale_sequence");
  const TokenAxisInfo oax = token_axis(orig, "cross_scale_sequence");
  const int64_t n_down = static_cast<int64_t>(layout.down_h) * layout.down_w;
  if (dax.rows != n_down || oax.rows != 4 * n_down || dax.inner != oax.inner ||
      dax.outer != oax.outer) {
    throw ShapeError("cross_scale_sequence: planes " +
                     shape_to_string(down.shape()) + " / " +
                     shape_to_string(orig.shape()) +
                     " do not match layout " + std::to_string(layout.down_h) +
                     "x" + std::to_string(layout.down_w));
  }
  // Sequence = bijective row gather over [down ; orig].
  std::vector<int64_t> src(layout.sequence.size());
  for (size_t s = 0; s < layout.sequence.size(); ++s) {
    const CrossEntry& e = layout.sequence[s];
    if (e.plane == CrossPlane::Down) {
      src[s] = static_cast<int64_t>(e.row) * layout.down_w + e.col;
    } else {
      src[s] = n_down + static_cast<int64_t>(e.row) * layout.origWidth() + e.col;
    }
  }
  return take_rows(concat_rows(down, orig), src);
}

template <typename T>
Tensor<T> extract_original(const CrossScaleLayout& layout, const Tensor<T>& seq) {
  const TokenAxisInfo ax = token_axis(seq, "extract_original");
  if (ax.rows != layout.length()) {
    throw ShapeError("extract_original: sequence has " + std::to_string(ax.rows) +
                     " rows, layout expects " + std::to_string(layout.length()));
  }
  return take_rows(seq, layout.orig_seq_index);
}

// ---- reductions ----

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("l1_loss: shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " differ");
  }
  const auto av = a.values();
  const auto bv = b.values();
  const T invn = T(1) / static_cast<T>(av.size());
  T acc = T(0);
  for (size_t i = 0; i < av.size(); ++i) acc += std::fabs(av[i] - bv[i]);
  Tape<T>* tape = merge_tapes<T>({&a, &b});
  Tensor<T> y = make({1}, std::vector<T>{acc * invn}, tape);
  if (tape != nullptr) {
    const int64_t av_id = a.on_tape() ? a.vid() : -1;
    const int64_t bv_id = b.on_tape() ? b.vid() : -1;
    const int64_t yv = y.vid();
    auto as = storage(a);
    auto bs = storage(b);
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      const T g = go[0] * invn;
      const auto& ad = *as;
      const auto& bd = *bs;
      // subgradient at ties: sign(0) = 0
      if (av_id >= 0) {
        auto& ga = tp.grad_accum(av_id);
        for (size_t i = 0; i < ga.size(); ++i) {
          const T d = ad[i] - bd[i];
          ga[i] += d > T(0) ? g : (d < T(0) ? -g : T(0));
        }
      }
      if (bv_id >= 0) {
        auto& gb = tp.grad_accum(bv_id);
        for (size_t i = 0; i < gb.size(); ++i) {
          const T d = ad[i] - bd[i];
          gb[i] -= d > T(0) ? g : (d < T(0) ? -g : T(0));
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const auto xv = x.values();
  T acc = T(0);
  for (T v : xv) acc += v;
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make({1}, std::vector<T>{acc}, tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xv_id = x.vid();
    const int64_t yv = y.vid();
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xv_id);
      for (auto& g : gx) g += go[0];
    });
  }
  return y;
}

// ---- layout ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int64_t> shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) +
                     " as " + shape_to_string(shape));
  }
  const auto xv = x.values();
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make(std::move(shape), std::vector<T>(xv.begin(), xv.end()), tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xvid = x.vid();
    const int64_t yv = y.vid();
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xvid);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> nchw_to_nlc(const Tensor<T>& x) {
  require_rank(x, 4, "nchw_to_nlc");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t hw = h * w;
  auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(x.size()));
  int64_t pos = 0;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t l = 0; l < hw; ++l)
      for (int64_t ic = 0; ic < c; ++ic)
        (*map)[static_cast<size_t>(pos++)] = (in * c + ic) * hw + l;
  return remap_op(x, {n, hw, c}, std::move(map));
}

template <typename T>
Tensor<T> nlc_to_nchw(const Tensor<T>& x, int64_t h, int64_t w) {
  require_rank(x, 3, "nlc_to_nchw");
  const int64_t n = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (l != h * w) {
    throw ShapeError("nlc_to_nchw: token count " + std::to_string(l) +
                     " does not equal " + std::to_string(h) + "*" +
                     std::to_string(w));
  }
  auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(x.size()));
  int64_t pos = 0;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t il = 0; il < l; ++il)
        (*map)[static_cast<size_t>(pos++)] = (in * l + il) * c + ic;
  return remap_op(x, {n, c, h, w}, std::move(map));
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  require_rank(x, 4, "scale_channels(x)");
  require_rank(s, 4, "scale_channels(s)");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (s.dim(0) != n || s.dim(1) != c || s.dim(2) != 1 || s.dim(3) != 1) {
    throw ShapeError("scale_channels: weights " + shape_to_string(s.shape()) +
                     " do not match features " + shape_to_string(x.shape()));
  }
  const int64_t hw = h * w;
  const T* xd = x.data();
  const T* sd = s.data();
  std::vector<T> out(static_cast<size_t>(x.size()));
  for (int64_t i = 0; i < n * c; ++i) {
    const T sv = sd[i];
    const T* p = xd + i * hw;
    T* q = out.data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) q[j] = p[j] * sv;
  }
  Tape<T>* tape = merge_tapes<T>({&x, &s});
  Tensor<T> y = make(std::vector<int64_t>(x.shape()), std::move(out), tape);
  if (tape != nullptr) {
    const int64_t xv = x.on_tape() ? x.vid() : -1;
    const int64_t sv_id = s.on_tape() ? s.vid() : -1;
    const int64_t yv = y.vid();
    auto xs = storage(x);
    auto ss = storage(s);
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      if (xv >= 0) {
        auto& gx = tp.grad_accum(xv);
        const T* sdp = ss->data();
        for (int64_t i = 0; i < n * c; ++i) {
          const T svv = sdp[i];
          const T* g = go.data() + i * hw;
          T* q = gx.data() + i * hw;
          for (int64_t j = 0; j < hw; ++j) q[j] += g[j] * svv;
        }
      }
      if (sv_id >= 0) {
        auto& gs = tp.grad_accum(sv_id);
        const T* xdp = xs->data();
        for (int64_t i = 0; i < n * c; ++i) {
          const T* g = go.data() + i * hw;
          const T* p = xdp + i * hw;
          T acc = T(0);
          for (int64_t j = 0; j < hw; ++j) acc += g[j] * p[j];
          gs[i] += acc;
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> select_batch(const Tensor<T>& x, int64_t n) {
  if (x.rank() < 2) throw ShapeError("select_batch: rank must be >= 2");
  const int64_t batch = x.dim(0);
  if (n < 0 || n >= batch) {
    throw ShapeError("select_batch: index " + std::to_string(n) +
                     " out of range for batch " + std::to_string(batch));
  }
  std::vector<int64_t> out_shape(x.shape().begin() + 1, x.shape().end());
  const int64_t stride = x.size() / batch;
  const T* xd = x.data();
  std::vector<T> out(xd + n * stride, xd + (n + 1) * stride);
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make(std::move(out_shape), std::move(out), tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xv = x.vid();
    const int64_t yv = y.vid();
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xv);
      T* dst = gx.data() + n * stride;
      for (int64_t i = 0; i < stride; ++i) dst[i] += go[static_cast<size_t>(i)];
    });
  }
  return y;
}

template <typename T>
Tensor<T> stack_first(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("stack_first: empty input");
  const auto& base_shape = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != base_shape) {
      throw ShapeError("stack_first: mismatched part shapes");
    }
  }
  const int64_t stride = parts[0].size();
  std::vector<int64_t> out_shape;
  out_shape.push_back(static_cast<int64_t>(parts.size()));
  out_shape.insert(out_shape.end(), base_shape.begin(), base_shape.end());
  std::vector<T> out(static_cast<size_t>(stride) * parts.size());
  std::vector<const Tensor<T>*> ptrs;
  for (size_t i = 0; i < parts.size(); ++i) {
    std::memcpy(out.data() + i * static_cast<size_t>(stride), parts[i].data(),
                static_cast<size_t>(stride) * sizeof(T));
    ptrs.push_back(&parts[i]);
  }
  Tape<T>* tape = nullptr;
  for (const auto* p : ptrs) {
    if (p->on_tape()) {
      if (tape != nullptr && tape != p->tape()) {
        throw TapeError("stack_first: operands recorded on different tapes");
      }
      tape = p->tape();
    }
  }
  Tensor<T> y = make(std::move(out_shape), std::move(out), tape);
  if (tape != nullptr) {
    std::vector<int64_t> vids;
    for (const auto* p : ptrs) vids.push_back(p->on_tape() ? p->vid() : -1);
    const int64_t yv = y.vid();
    tape->record([=, vids = std::move(vids)](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      for (size_t i = 0; i < vids.size(); ++i) {
        if (vids[i] < 0) continue;
        auto& g = tp.grad_accum(vids[i]);
        const T* src = go.data() + i * static_cast<size_t>(stride);
        for (int64_t j = 0; j < stride; ++j) g[static_cast<size_t>(j)] += src[j];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> pad_reflect_hw(const Tensor<T>& x, int64_t target_h, int64_t target_w) {
  require_rank(x, 4, "pad_reflect_hw");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (target_h < h || target_w < w) {
    throw ShapeError("pad_reflect_hw: target smaller than input");
  }
  if (target_h > 2 * h - 1 || target_w > 2 * w - 1) {
    throw ShapeError("pad_reflect_hw: reflection pad larger than input extent");
  }
  auto reflect = [](int64_t i, int64_t extent) {
    if (i < extent) return i;
    const int64_t r = 2 * (extent - 1) - i;
    return std::max<int64_t>(0, r);
  };
  auto map = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(n * c * target_h * target_w));
  int64_t pos = 0;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t y = 0; y < target_h; ++y) {
        const int64_t sy = reflect(y, h);
        for (int64_t xq = 0; xq < target_w; ++xq) {
          (*map)[static_cast<size_t>(pos++)] =
              ((in * c + ic) * h + sy) * w + reflect(xq, w);
        }
      }
  return remap_op(x, {n, c, target_h, target_w}, std::move(map));
}

template <typename T>
Tensor<T> crop_hw(const Tensor<T>& x, int64_t h, int64_t w) {
  require_rank(x, 4, "crop_hw");
  const int64_t n = x.dim(0), c = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  if (h > ih || w > iw || h <= 0 || w <= 0) {
    throw ShapeError("crop_hw: invalid crop " + std::to_string(h) + "x" +
                     std::to_string(w) + " from " + shape_to_string(x.shape()));
  }
  if (h == ih && w == iw) return x;
  auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * h * w));
  int64_t pos = 0;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xq = 0; xq < w; ++xq)
          (*map)[static_cast<size_t>(pos++)] = ((in * c + ic) * ih + y) * iw + xq;
  return remap_op(x, {n, c, h, w}, std::move(map));
}

template <typename T>
Tensor<T> bicubic_resize_nchw(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "bicubic_resize_nchw");
  if (out_h <= 0 || out_w <= 0) {
    throw ShapeError("bicubic_resize_nchw: non-positive target extents");
  }
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ytaps = std::make_shared<const std::vector<CubicTap>>(
      cubic_taps(static_cast<int>(h), static_cast<int>(out_h)));
  auto xtaps = std::make_shared<const std::vector<CubicTap>>(
      cubic_taps(static_cast<int>(w), static_cast<int>(out_w)));
  std::vector<T> out(static_cast<size_t>(n * c * out_h * out_w));
  const T* xd = x.data();
  for (int64_t plane = 0; plane < n * c; ++plane) {
    const T* ip = xd + plane * h * w;
    T* op = out.data() + plane * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const CubicTap& ty = (*ytaps)[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const CubicTap& tx = (*xtaps)[static_cast<size_t>(ox)];
        double acc = 0.0;
        for (int jy = 0; jy < 4; ++jy) {
          const T* row = ip + static_cast<int64_t>(ty.idx[jy]) * w;
          double racc = 0.0;
          for (int jx = 0; jx < 4; ++jx) {
            racc += tx.w[jx] * static_cast<double>(row[tx.idx[jx]]);
          }
          acc += ty.w[jy] * racc;
        }
        op[oy * out_w + ox] = static_cast<T>(acc);
      }
    }
  }
  Tape<T>* tape = merge_tapes<T>({&x});
  Tensor<T> y = make({n, c, out_h, out_w}, std::move(out), tape);
  if (tape != nullptr && x.on_tape()) {
    const int64_t xv = x.vid();
    const int64_t yv = y.vid();
    tape->record([=](Tape<T>& tp) {
      auto go = tp.grad_view(yv);
      if (go.empty()) return;
      auto& gx = tp.grad_accum(xv);
      for (int64_t plane = 0; plane < n * c; ++plane) {
        T* gp = gx.data() + plane * h * w;
        const T* gop = go.data() + plane * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          const CubicTap& ty = (*ytaps)[static_cast<size_t>(oy)];
          for (int64_t ox = 0; ox < out_w; ++ox) {
            const CubicTap& tx = (*xtaps)[static_cast<size_t>(ox)];
            const T g = gop[oy * out_w + ox];
            if (g == T(0)) continue;
            for (int jy = 0; jy < 4; ++jy) {
              T* row = gp + static_cast<int64_t>(ty.idx[jy]) * w;
              for (int jx = 0; jx < 4; ++jx) {
                row[tx.idx[jx]] += static_cast<T>(ty.w[jy] * tx.w[jx]) * g;
              }
            }
          }
        }
      }
    });
  }
  return y;
}

// ---- gradient verification ----

template <typename T>
T grad_check(const ScalarFn<T>& f, const Tensor<T>& x, T eps) {
  Tape<T> tape;
  Tensor<T> xw = tape.watch(x);
  Tensor<T> loss = f(tape, xw);
  tape.backward(loss);
  const Tensor<T> analytic = tape.grad(xw);
  const auto ga = analytic.values();

  std::vector<T> base(x.values().begin(), x.values().end());
  T max_err = T(0);
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<T> xp = base;
    std::vector<T> xm = base;
    xp[i] += eps;
    xm[i] -= eps;
    Tape<T> tp, tm;
    const T fp = f(tp, Tensor<T>(x.shape(), std::move(xp))).item();
    const T fm = f(tm, Tensor<T>(x.shape(), std::move(xm))).item();
    const T gfd = (fp - fm) / (T(2) * eps);
    const T err = std::fabs(ga[i] - gfd) / std::max(T(1), std::fabs(gfd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

#define MAMBACSR_INSTANTIATE_OPS(T)                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> silu(const Tensor<T>&);                                      \
  template Tensor<T> gelu(const Tensor<T>&);                                      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                   \
  template Tensor<T> softplus(const Tensor<T>&);                                  \
  template Tensor<T> exp(const Tensor<T>&);                                       \
  template Tensor<T> scale_by_scalar(const Tensor<T>&, T);                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&,                   \
                            const std::optional<Tensor<T>>&);                     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,                   \
                            const std::optional<Tensor<T>>&, int, int);           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,               \
                                const Tensor<T>&, T);                             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                           \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                        \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, int);                      \
  template Tensor<T> gather_tokens(const Tensor<T>&, const Trajectory&);          \
  template Tensor<T> scatter_tokens(const Tensor<T>&, const Trajectory&);         \
  template Tensor<T> take_rows(const Tensor<T>&, std::span<const int64_t>);       \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> cross_scale_sequence(const CrossScaleLayout&,                \
                                          const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> extract_original(const CrossScaleLayout&, const Tensor<T>&); \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> sum_all(const Tensor<T>&);                                   \
  template Tensor<T> reshape(const Tensor<T>&, std::vector<int64_t>);             \
  template Tensor<T> nchw_to_nlc(const Tensor<T>&);                               \
  template Tensor<T> nlc_to_nchw(const Tensor<T>&, int64_t, int64_t);             \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> select_batch(const Tensor<T>&, int64_t);                     \
  template Tensor<T> stack_first(std::span<const Tensor<T>>);                     \
  template Tensor<T> pad_reflect_hw(const Tensor<T>&, int64_t, int64_t);          \
  template Tensor<T> crop_hw(const Tensor<T>&, int64_t, int64_t);                 \
  template Tensor<T> bicubic_resize_nchw(const Tensor<T>&, int64_t, int64_t);     \
  template T grad_check(const ScalarFn<T>&, const Tensor<T>&, T);

MAMBACSR_INSTANTIATE_OPS(float)
MAMBACSR_INSTANTIATE_OPS(double)
#undef MAMBACSR_INSTANTIATE_OPS

}  // namespace mambacsr
