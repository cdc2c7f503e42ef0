#include "mambacsr/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>

#include "mambacsr/model.hpp"
#include "mambacsr/ops.hpp"
#include "mambacsr/rng.hpp"
#include "mambacsr/ssm.hpp"
#include "mambacsr/tensor.hpp"
#include "mambacsr/trajectory.hpp"

namespace mambacsr {

namespace {

using D64 = double;
using T64 = Tensor<double>;

T64 rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                double hi = 1.0) {
  const int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return T64(std::move(shape), std::move(data));
}

// Scalar readout: sum(y * fixed random weights). Linear in y, so finite
// differences probe only the checked op.
struct Readout {
  T64 weights;
  explicit Readout(const T64& like, Rng& rng)
      : weights(rand_tensor(like.shape(), rng)) {}
  T64 operator()(const T64& y) const { return sum_all(mul(y, weights)); }
};

template <typename OpFn>
void check_unary(GradcheckResults& out, const std::string& name, OpFn op,
                 const T64& x, Rng& rng, double eps) {
  const Readout ro(op(x), rng);
  const ScalarFn<double> f = [&op, &ro](Tape<double>&, const T64& xx) {
    return ro(op(xx));
  };
  out.emplace_back(name, grad_check(f, x, eps));
}

}  // namespace

GradcheckResults gradcheck_ops(uint64_t seed, double eps) {
  Rng root(seed);
  Rng rng = root.child("gradcheck_ops");
  GradcheckResults out;

  const T64 x34 = rand_tensor({3, 4}, rng);
  const T64 other = rand_tensor({3, 4}, rng);
  const T64 scalar = rand_tensor({1}, rng, 0.5, 1.5);

  check_unary(out, "add", [&](const T64& v) { return add(v, other); }, x34, rng, eps);
  check_unary(out, "add_scalar_lhs", [&](const T64& v) { return add(scalar, v); },
              x34, rng, eps);
  check_unary(out, "sub", [&](const T64& v) { return sub(v, other); }, x34, rng, eps);
  check_unary(out, "mul", [&](const T64& v) { return mul(v, other); }, x34, rng, eps);
  check_unary(out, "mul_scalar_rhs",
              [&](const T64& v) { return mul(other, sum_all(v)); }, x34, rng, eps);
  check_unary(out, "silu", [](const T64& v) { return silu(v); }, x34, rng, eps);
  check_unary(out, "gelu", [](const T64& v) { return gelu(v); }, x34, rng, eps);
  check_unary(out, "sigmoid", [](const T64& v) { return sigmoid(v); }, x34, rng, eps);
  check_unary(out, "softplus", [](const T64& v) { return softplus(v); }, x34, rng, eps);
  check_unary(out, "exp", [](const T64& v) { return exp(v); }, x34, rng, eps);
  check_unary(out, "scale_by_scalar",
              [](const T64& v) { return scale_by_scalar(v, 1.7); }, x34, rng, eps);

  const T64 lx = rand_tensor({5, 4}, rng);
  const T64 lw = rand_tensor({3, 4}, rng);
  const T64 lb = rand_tensor({3}, rng);
  check_unary(out, "linear_x",
              [&](const T64& v) { return linear(v, lw, std::optional<T64>(lb)); },
              lx, rng, eps);
  check_unary(out, "linear_w",
              [&](const T64& v) { return linear(lx, v, std::optional<T64>(lb)); },
              lw, rng, eps);
  check_unary(out, "linear_b",
              [&](const T64& v) { return linear(lx, lw, std::optional<T64>(v)); },
              lb, rng, eps);

  const T64 cx = rand_tensor({1, 3, 5, 5}, rng);
  const T64 cw = rand_tensor({4, 3, 3, 3}, rng);
  const T64 cb = rand_tensor({4}, rng);
  check_unary(out, "conv2d_x",
              [&](const T64& v) { return conv2d(v, cw, std::optional<T64>(cb), 1); },
              cx, rng, eps);
  check_unary(out, "conv2d_w",
              [&](const T64& v) { return conv2d(cx, v, std::optional<T64>(cb), 1); },
              cw, rng, eps);
  check_unary(out, "conv2d_b",
              [&](const T64& v) { return conv2d(cx, cw, std::optional<T64>(v), 1); },
              cb, rng, eps);
  const T64 dwx = rand_tensor({1, 4, 5, 5}, rng);
  const T64 dww = rand_tensor({4, 1, 3, 3}, rng);
  check_unary(out, "conv2d_depthwise",
              [&](const T64& v) {
                return conv2d(v, dww, std::optional<T64>{}, 1, 4);
              },
              dwx, rng, eps);

  const T64 nx = rand_tensor({6, 5}, rng);
  const T64 gamma = rand_tensor({5}, rng, 0.5, 1.5);
  const T64 beta = rand_tensor({5}, rng);
  check_unary(out, "layer_norm_x",
              [&](const T64& v) { return layer_norm(v, gamma, beta, 1e-6); }, nx,
              rng, eps);
  check_unary(out, "layer_norm_gamma",
              [&](const T64& v) { return layer_norm(nx, v, beta, 1e-6); }, gamma,
              rng, eps);
  check_unary(out, "layer_norm_beta",
              [&](const T64& v) { return layer_norm(nx, gamma, v, 1e-6); }, beta,
              rng, eps);

  check_unary(out, "global_avg_pool",
              [](const T64& v) { return global_avg_pool(v); }, cx, rng, eps);

  const T64 px = rand_tensor({1, 8, 3, 3}, rng);
  check_unary(out, "pixel_shuffle", [](const T64& v) { return pixel_shuffle(v, 2); },
              px, rng, eps);
  const T64 ux = rand_tensor({1, 2, 6, 6}, rng);
  check_unary(out, "pixel_unshuffle",
              [](const T64& v) { return pixel_unshuffle(v, 2); }, ux, rng, eps);

  const Trajectory traj = window_raster(3, 4, 2, ScanDirection::Vertical);
  const T64 tx = rand_tensor({12, 3}, rng);
  check_unary(out, "gather_tokens",
              [&](const T64& v) { return gather_tokens(v, traj); }, tx, rng, eps);
  check_unary(out, "scatter_tokens",
              [&](const T64& v) { return scatter_tokens(v, traj); }, tx, rng, eps);
  const std::vector<int64_t> take_idx = {0, 5, 5, 11, 3};
  check_unary(out, "take_rows",
              [&](const T64& v) {
                return take_rows(v, std::span<const int64_t>(take_idx));
              },
              tx, rng, eps);
  const T64 ty = rand_tensor({7, 3}, rng);
  check_unary(out, "concat_rows",
              [&](const T64& v) { return concat_rows(v, ty); }, tx, rng, eps);

  const CrossScaleLayout layout = cross_scale_interleave(4, 4);
  const T64 down = rand_tensor({4, 3}, rng);
  const T64 orig = rand_tensor({16, 3}, rng);
  check_unary(out, "cross_scale_sequence_down",
              [&](const T64& v) { return cross_scale_sequence(layout, v, orig); },
              down, rng, eps);
  check_unary(out, "cross_scale_sequence_orig",
              [&](const T64& v) { return cross_scale_sequence(layout, down, v); },
              orig, rng, eps);
  const T64 seq = rand_tensor({20, 3}, rng);
  check_unary(out, "extract_original",
              [&](const T64& v) { return extract_original(layout, v); }, seq, rng,
              eps);

  // l1 without ties: targets offset away from x
  const T64 l1_target = rand_tensor({3, 4}, rng, 2.0, 3.0);
  out.emplace_back("l1_loss", grad_check<double>(
                                  [&](Tape<double>&, const T64& v) {
                                    return l1_loss(v, l1_target);
                                  },
                                  x34, eps));
  check_unary(out, "sum_all", [](const T64& v) { return sum_all(v); }, x34, rng, eps);
  check_unary(out, "reshape",
              [](const T64& v) { return reshape(v, {2, 6}); }, x34, rng, eps);
  check_unary(out, "nchw_to_nlc", [](const T64& v) { return nchw_to_nlc(v); }, cx,
              rng, eps);
  const T64 nlc = rand_tensor({1, 25, 3}, rng);
  check_unary(out, "nlc_to_nchw",
              [](const T64& v) { return nlc_to_nchw(v, 5, 5); }, nlc, rng, eps);
  const T64 sw = rand_tensor({1, 3, 1, 1}, rng, 0.1, 0.9);
  check_unary(out, "scale_channels_x",
              [&](const T64& v) { return scale_channels(v, sw); }, cx, rng, eps);
  check_unary(out, "scale_channels_s",
              [&](const T64& v) { return scale_channels(cx, v); }, sw, rng, eps);
  const T64 batch = rand_tensor({3, 4, 2}, rng);
  check_unary(out, "select_batch",
              [](const T64& v) { return select_batch(v, 1); }, batch, rng, eps);
  check_unary(out, "stack_first",
              [&](const T64& v) {
                std::vector<T64> parts{v, other};
                return stack_first(std::span<const T64>(parts));
              },
              x34, rng, eps);
  check_unary(out, "pad_reflect_hw",
              [](const T64& v) { return pad_reflect_hw(v, 6, 6); }, cx, rng, eps);
  check_unary(out, "crop_hw", [](const T64& v) { return crop_hw(v, 3, 4); }, cx,
              rng, eps);
  check_unary(out, "bicubic_resize_nchw",
              [](const T64& v) { return bicubic_resize_nchw(v, 3, 3); }, cx, rng,
              eps);
  return out;
}

GradcheckResults gradcheck_scan(uint64_t seed, double eps) {
  Rng root(seed);
  Rng rng = root.child("gradcheck_scan");
  GradcheckResults out;
  const int64_t len = 6, din = 3, ns = 2;
  const T64 u = rand_tensor({len, din}, rng);
  const T64 delta = rand_tensor({len, din}, rng, 0.02, 0.2);
  const T64 b = rand_tensor({len, ns}, rng);
  const T64 c = rand_tensor({len, ns}, rng);
  const T64 a_log = rand_tensor({din, ns}, rng, -1.0, 1.0);
  const T64 dskip = rand_tensor({din}, rng);

  for (DeltaBForm form : {DeltaBForm::Zoh, DeltaBForm::Euler}) {
    const std::string tag =
        form == DeltaBForm::Zoh ? "scan_zoh_" : "scan_euler_";
    const SsmCore<double> core{a_log, dskip};
    const Readout ro(selective_scan(core, ScanInputs<double>{u, delta, b, c}, form),
                     rng);
    auto scan_with = [&](const T64& uu, const T64& dd, const T64& bb,
                         const T64& cc, const T64& aa, const T64& ds) {
      return ro(selective_scan(SsmCore<double>{aa, ds},
                               ScanInputs<double>{uu, dd, bb, cc}, form));
    };
    out.emplace_back(tag + "u",
                     grad_check<double>(
                         [&](Tape<double>&, const T64& v) {
                           return scan_with(v, delta, b, c, a_log, dskip);
                         },
                         u, eps));
    out.emplace_back(tag + "delta",
                     grad_check<double>(
                         [&](Tape<double>&, const T64& v) {
                           return scan_with(u, v, b, c, a_log, dskip);
                         },
                         delta, eps));
    out.emplace_back(tag + "B",
                     grad_check<double>(
                         [&](Tape<double>&, const T64& v) {
                           return scan_with(u, delta, v, c, a_log, dskip);
                         },
                         b, eps));
    out.emplace_back(tag + "C",
                     grad_check<double>(
                         [&](Tape<double>&, const T64& v) {
                           return scan_with(u, delta, b, v, a_log, dskip);
                         },
                         c, eps));
    out.emplace_back(tag + "A_log",
                     grad_check<double>(
                         [&](Tape<double>&, const T64& v) {
                           return scan_with(u, delta, b, c, v, dskip);
                         },
                         a_log, eps));
    out.emplace_back(tag + "D",
                     grad_check<double>(
                         [&](Tape<double>&, const T64& v) {
                           return scan_with(u, delta, b, c, a_log, v);
                         },
                         dskip, eps));
  }
  return out;
}

GradcheckResults gradcheck_model(uint64_t seed, double eps,
                                 int samples_per_tensor) {
  ModelConfig cfg;
  cfg.channels = 4;
  cfg.groups = 1;
  cfg.blocks_per_group = 2;
  cfg.d_state = 2;
  cfg.expand = 2.0;
  cfg.mlp_ratio = 2.0;
  cfg.window = 4;
  cfg.seq_window = 8;
  cfg.scale = 4;
  cfg.scan_mode = ScanMode::Dis;
  cfg.cross_scale = true;

  MambaCsrModel<double> model(cfg, seed);
  Rng rng = Rng(seed).child("gradcheck_model");
  const T64 x = rand_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);

  Tape<double> tape;
  const T64 xw = tape.watch(x);
  const T64 out0 = model.forward(xw, &tape);
  const T64 weights = rand_tensor(out0.shape(), rng);
  const T64 loss = sum_all(mul(out0, weights));
  tape.backward(loss);

  auto params = model.parameters();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) {
    const T64 g = tape.grad(p->value);
    analytic.emplace_back(g.values().begin(), g.values().end());
  }
  const T64 gin = tape.grad(xw);
  const std::vector<double> input_grad(gin.values().begin(), gin.values().end());

  auto eval_loss = [&]() {
    const T64 y = model.forward(x, nullptr);
    const auto yv = y.values();
    const auto wv = weights.values();
    double acc = 0.0;
    for (size_t i = 0; i < yv.size(); ++i) acc += yv[i] * wv[i];
    return acc;
  };

  GradcheckResults out;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>* p = params[pi];
    const int64_t n = p->value.size();
    const int k = static_cast<int>(
        std::min<int64_t>(n, static_cast<int64_t>(samples_per_tensor)));
    double max_err = 0.0;
    const T64 original = p->value.detached();
    for (int s = 0; s < k; ++s) {
      const size_t idx = static_cast<size_t>(rng.below(static_cast<uint64_t>(n)));
      std::vector<double> vp(original.values().begin(), original.values().end());
      std::vector<double> vm = vp;
      vp[idx] += eps;
      vm[idx] -= eps;
      p->value = T64(original.shape(), std::move(vp));
      const double lp = eval_loss();
      p->value = T64(original.shape(), std::move(vm));
      const double lm = eval_loss();
      p->value = original;
      const double gfd = (lp - lm) / (2.0 * eps);
      const double err = std::fabs(analytic[pi][idx] - gfd) /
                         std::max(1.0, std::fabs(gfd));
      max_err = std::max(max_err, err);
    }
    out.emplace_back(p->name, max_err);
  }
  {
    double max_err = 0.0;
    const auto base = x.values();
    for (int s = 0; s < 8; ++s) {
      const size_t idx =
          static_cast<size_t>(rng.below(static_cast<uint64_t>(x.size())));
      std::vector<double> vp(base.begin(), base.end());
      std::vector<double> vm(base.begin(), base.end());
      vp[idx] += eps;
      vm[idx] -= eps;
      const T64 xp(x.shape(), std::move(vp));
      const T64 xm(x.shape(), std::move(vm));
      const T64 yp = model.forward(xp, nullptr);
      const T64 ym = model.forward(xm, nullptr);
      const auto wv = weights.values();
      double lp = 0.0, lm = 0.0;
      for (size_t i = 0; i < wv.size(); ++i) {
        lp += yp.values()[i] * wv[i];
        lm += ym.values()[i] * wv[i];
      }
      const double gfd = (lp - lm) / (2.0 * eps);
      const double err =
          std::fabs(input_grad[idx] - gfd) / std::max(1.0, std::fabs(gfd));
      max_err = std::max(max_err, err);
    }
    out.emplace_back("input", max_err);
  }
  return out;
}

}  // namespace mambacsr
