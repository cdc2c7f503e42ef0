#include "mambacsr/model.hpp"

#include <cmath>

#include "mambacsr/checkpoint.hpp"
#include "mambacsr/errors.hpp"

namespace mambacsr {

namespace {

template <typename T>
Tensor<T> trunc_normal_tensor(std::vector<int64_t> shape, double stddev, Rng& rng) {
  const int64_t n = shape_numel(shape);
  std::vector<T> data(static_cast<size_t>(n));
  for (auto& v : data) v = static_cast<T>(rng.trunc_normal(stddev));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> uniform_tensor(std::vector<int64_t> shape, double bound, Rng& rng) {
  const int64_t n = shape_numel(shape);
  std::vector<T> data(static_cast<size_t>(n));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

// ---- Conv2dLayer ----

template <typename T>
Conv2dLayer<T>::Conv2dLayer(const std::string& prefix, int cout, int cin, int k,
                            int grp, Rng& rng)
    : pad((k - 1) / 2), groups(grp) {
  const int cin_g = cin / grp;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin_g) * k * k);
  w = Parameter<T>{prefix + ".w",
                   uniform_tensor<T>({cout, cin_g, k, k}, bound, rng), true};
  b = Parameter<T>{prefix + ".b", uniform_tensor<T>({cout}, bound, rng), true};
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, w.value, std::optional<Tensor<T>>(b.value), pad, groups);
}

// ---- LinearLayer ----

template <typename T>
LinearLayer<T>::LinearLayer(const std::string& prefix, int out_f, int in_f,
                            bool bias, Rng& rng)
    : has_bias(bias) {
  w = Parameter<T>{prefix + ".w", trunc_normal_tensor<T>({out_f, in_f}, 0.02, rng),
                   true};
  if (has_bias) {
    b = Parameter<T>{prefix + ".b", Tensor<T>::zeros({out_f}), true};
  }
}

template <typename T>
Tensor<T> LinearLayer<T>::forward(const Tensor<T>& x) const {
  if (has_bias) return linear(x, w.value, std::optional<Tensor<T>>(b.value));
  return linear(x, w.value);
}

// ---- LayerNormLayer ----

template <typename T>
LayerNormLayer<T>::LayerNormLayer(const std::string& prefix, int c) {
  gamma = Parameter<T>{prefix + ".gamma", Tensor<T>::full({c}, T(1)), true};
  beta = Parameter<T>{prefix + ".beta", Tensor<T>::zeros({c}), true};
}

template <typename T>
Tensor<T> LayerNormLayer<T>::forward(const Tensor<T>& x) const {
  return layer_norm(x, gamma.value, beta.value, T(1e-6));
}

// ---- Ss2dLayer ----

template <typename T>
Ss2dLayer<T>::Ss2dLayer(const std::string& prefix, int c, int d_inner,
                        int d_state, Rng& rng)
    : in_proj_x(prefix + ".in_proj_x", d_inner, c, true, rng),
      in_proj_z(prefix + ".in_proj_z", d_inner, c, true, rng),
      dwconv(prefix + ".dwconv", d_inner, d_inner, 3, d_inner, rng),
      dt_proj(prefix + ".dt_proj", d_inner, d_inner, true, rng),
      b_proj(prefix + ".b_proj", d_state, d_inner, false, rng),
      c_proj(prefix + ".c_proj", d_state, d_inner, false, rng),
      out_norm(prefix + ".out_norm", d_inner),
      out_proj(prefix + ".out_proj", c, d_inner, true, rng) {
  // Bias chosen so the initial delta = softplus(bias) lies in [1e-3, 0.1].
  std::vector<T> dtb(static_cast<size_t>(d_inner));
  for (auto& v : dtb) {
    const double target = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
    v = static_cast<T>(std::log(std::expm1(target)));
  }
  dt_proj.b.value = Tensor<T>({d_inner}, std::move(dtb));
  // S4D-style diagonal init: a_{d,k} = -(k+1), stored through A_log.
  std::vector<T> alog(static_cast<size_t>(d_inner) * d_state);
  for (int d = 0; d < d_inner; ++d) {
    for (int k = 0; k < d_state; ++k) {
      alog[static_cast<size_t>(d) * d_state + k] =
          static_cast<T>(std::log(static_cast<double>(k + 1)));
    }
  }
  A_log = Parameter<T>{prefix + ".A_log",
                       Tensor<T>({d_inner, d_state}, std::move(alog)), true};
  D = Parameter<T>{prefix + ".D", Tensor<T>::full({d_inner}, T(1)), true};
}

template <typename T>
Tensor<T> Ss2dLayer<T>::forward(const Tensor<T>& x_nlc, int64_t h, int64_t w,
                                const std::vector<Trajectory>& trajs) const {
  const int64_t n = x_nlc.dim(0);
  const Tensor<T> xin = in_proj_x.forward(x_nlc);
  const Tensor<T> z = in_proj_z.forward(x_nlc);
  const Tensor<T> xc = silu(dwconv.forward(nlc_to_nchw(xin, h, w)));
  const Tensor<T> xcl = nchw_to_nlc(xc);
  const Tensor<T> dt = softplus(dt_proj.forward(xcl));
  const Tensor<T> bp = b_proj.forward(xcl);
  const Tensor<T> cp = c_proj.forward(xcl);
  const SsmCore<T> core{A_log.value, D.value};

  std::vector<Tensor<T>> per_batch;
  per_batch.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const Tensor<T> u_i = select_batch(xcl, i);
    const Tensor<T> dt_i = select_batch(dt, i);
    const Tensor<T> b_i = select_batch(bp, i);
    const Tensor<T> c_i = select_batch(cp, i);
    Tensor<T> acc;
    for (const Trajectory& traj : trajs) {
      ScanInputs<T> inp{gather_tokens(u_i, traj), gather_tokens(dt_i, traj),
                        gather_tokens(b_i, traj), gather_tokens(c_i, traj)};
      const Tensor<T> y = selective_scan(core, inp, form);
      const Tensor<T> ys = scatter_tokens(y, traj);
      acc = acc.defined() ? add(acc, ys) : ys;
    }
    per_batch.push_back(acc);
  }
  Tensor<T> y = stack_first(std::span<const Tensor<T>>(per_batch));
  y = out_norm.forward(y);
  y = mul(y, silu(z));
  return out_proj.forward(y);
}

// ---- CabLayer ----

template <typename T>
CabLayer<T>::CabLayer(const std::string& prefix, int c, int reduction, Rng& rng)
    : conv1(prefix + ".conv1", c, c, 3, 1, rng),
      conv2(prefix + ".conv2", c, c, 3, 1, rng),
      att_reduce(prefix + ".att_reduce", std::max(1, c / reduction), c, 1, 1, rng),
      att_expand(prefix + ".att_expand", c, std::max(1, c / reduction), 1, 1, rng) {}

template <typename T>
Tensor<T> CabLayer<T>::forward(const Tensor<T>& x) const {
  Tensor<T> y = conv2.forward(gelu(conv1.forward(x)));
  Tensor<T> att = global_avg_pool(y);
  att = sigmoid(att_expand.forward(gelu(att_reduce.forward(att))));
  return scale_channels(y, att);
}

// ---- MlpLayer ----

template <typename T>
MlpLayer<T>::MlpLayer(const std::string& prefix, int c, int hidden, Rng& rng)
    : fc1(prefix + ".fc1", hidden, c, true, rng),
      fc2(prefix + ".fc2", c, hidden, true, rng) {}

template <typename T>
Tensor<T> MlpLayer<T>::forward(const Tensor<T>& x) const {
  return fc2.forward(gelu(fc1.forward(x)));
}

// ---- RlmbLayer ----

template <typename T>
RlmbLayer<T>::RlmbLayer(const std::string& prefix, const ModelConfig& cfg,
                        Rng& rng)
    : ln1(prefix + ".ln1", cfg.channels),
      ssm(prefix + ".ssm", cfg.channels, cfg.d_inner(), cfg.d_state, rng),
      cab(prefix + ".cab", cfg.channels, 4, rng),
      ln2(prefix + ".ln2", cfg.channels),
      mlp(prefix + ".mlp", cfg.channels,
          static_cast<int>(std::lround(cfg.mlp_ratio * cfg.channels)), rng) {
  s1 = Parameter<T>{prefix + ".s1", Tensor<T>::full({1}, T(1)), true};
  s2 = Parameter<T>{prefix + ".s2", Tensor<T>::full({1}, T(1)), true};
}

template <typename T>
Tensor<T> RlmbLayer<T>::forward(const Tensor<T>& x, const ScanSchedule& sched,
                                ScanMode mode) const {
  const int64_t h = x.dim(2), w = x.dim(3);
  std::vector<Trajectory> trajs;
  if (mode == ScanMode::Dis) {
    Trajectory t = make_trajectory(sched, static_cast<int>(h), static_cast<int>(w));
    trajs.push_back(flip(t));
    trajs.insert(trajs.begin(), std::move(t));
  } else {
    for (ScanDirection dir : {ScanDirection::Horizontal, ScanDirection::Vertical}) {
      ScanSchedule s = sched;
      s.direction = dir;
      Trajectory t = make_trajectory(s, static_cast<int>(h), static_cast<int>(w));
      Trajectory tf = flip(t);
      trajs.push_back(std::move(t));
      trajs.push_back(std::move(tf));
    }
  }
  const Tensor<T> xl = nchw_to_nlc(x);
  const Tensor<T> t1 = ln1.forward(xl);
  const Tensor<T> cab_out = cab.forward(nlc_to_nchw(t1, h, w));
  const Tensor<T> ssm_out = nlc_to_nchw(ssm.forward(t1, h, w, trajs), h, w);
  const Tensor<T> f_inter = add(add(cab_out, ssm_out), mul(s1.value, x));
  const Tensor<T> ml = mlp.forward(ln2.forward(nchw_to_nlc(f_inter)));
  return add(mul(s2.value, f_inter), nlc_to_nchw(ml, h, w));
}

// ---- RlmgLayer ----

template <typename T>
RlmgLayer<T>::RlmgLayer(const std::string& prefix, const ModelConfig& cfg,
                        Rng& rng)
    : conv(prefix + ".conv", cfg.channels, cfg.channels, 3, 1, rng) {
  blocks.reserve(static_cast<size_t>(cfg.blocks_per_group));
  for (int i = 0; i < cfg.blocks_per_group; ++i) {
    blocks.emplace_back(prefix + ".blocks." + std::to_string(i), cfg, rng);
  }
}

template <typename T>
Tensor<T> RlmgLayer<T>::forward(const Tensor<T>& x, int first_block_index,
                                int window, ScanMode mode) const {
  Tensor<T> y = x;
  for (size_t i = 0; i < blocks.size(); ++i) {
    const ScanSchedule sched =
        schedule_for_block(first_block_index + static_cast<int>(i), window);
    y = blocks[i].forward(y, sched, mode);
  }
  return add(conv.forward(y), x);
}

// ---- MambaCsrModel ----

template <typename T>
MambaCsrModel<T>::MambaCsrModel(const ModelConfig& cfg, uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng = Rng(seed).child("init");
  const int c = cfg_.channels;
  sfe_ = Conv2dLayer<T>("sfe", c, 3, 3, 1, rng);
  groups_.reserve(static_cast<size_t>(cfg_.groups));
  for (int g = 0; g < cfg_.groups; ++g) {
    groups_.emplace_back("groups." + std::to_string(g), cfg_, rng);
  }
  tail_conv_ = Conv2dLayer<T>("tail_conv", c, c, 3, 1, rng);
  if (cfg_.cross_scale) {
    cross_sfe_ = Conv2dLayer<T>("cross.sfe", c, 3, 3, 1, rng);
    cross_group_.emplace("cross.group", cfg_, rng);
    fusion_.emplace("fusion", cfg_, rng);
  }
  recon_expand_ =
      Conv2dLayer<T>("recon.expand", c * cfg_.scale * cfg_.scale, c, 3, 1, rng);
  recon_out_ = Conv2dLayer<T>("recon.out", 3, c, 3, 1, rng);
}

template <typename T>
std::vector<Parameter<T>*> MambaCsrModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto collect = [&out](Parameter<T>& p) { out.push_back(&p); };
  sfe_.visit(collect);
  for (auto& g : groups_) g.visit(collect);
  tail_conv_.visit(collect);
  if (cfg_.cross_scale) {
    cross_sfe_.visit(collect);
    cross_group_->visit(collect);
    fusion_->visit(collect);
  }
  recon_expand_.visit(collect);
  recon_out_.visit(collect);
  return out;
}

template <typename T>
void MambaCsrModel<T>::prepare(Tape<T>* tape) {
  for (Parameter<T>* p : parameters()) {
    if (tape != nullptr) {
      p->value = tape->watch(p->value);
    } else if (p->value.on_tape()) {
      p->value = p->value.detached();
    }
  }
}

template <typename T>
Tensor<T> MambaCsrModel<T>::forward(const Tensor<T>& img, Tape<T>* tape) {
  if (img.rank() != 4 || img.dim(1) != 3) {
    throw ShapeError("model: input must be Nx3xHxW, got " +
                     shape_to_string(img.shape()));
  }
  const int64_t h = img.dim(2), w = img.dim(3);
  if (h < 1 || w < 1 || img.dim(0) < 1) {
    throw ShapeError("model: non-positive extents in " +
                     shape_to_string(img.shape()));
  }
  prepare(tape);
  const bool needs_pad = cfg_.cross_scale && (h % 2 != 0 || w % 2 != 0);
  const int64_t he = h + (h % 2), we = w + (w % 2);
  const Tensor<T> x = needs_pad ? pad_reflect_hw(img, he, we) : img;

  const Tensor<T> f0 = sfe_.forward(x);
  Tensor<T> feat = f0;
  int block_index = 0;
  for (int g = 0; g < cfg_.groups; ++g) {
    feat = groups_[static_cast<size_t>(g)].forward(feat, block_index, cfg_.window,
                                                   cfg_.scan_mode);
    block_index += cfg_.blocks_per_group;
    if (g == 0 && cfg_.cross_scale) {
      const Tensor<T> down_img = bicubic_resize_nchw(x, he / 2, we / 2);
      const Tensor<T> g0 = cross_sfe_.forward(down_img);
      const Tensor<T> gd =
          cross_group_->forward(g0, 0, cfg_.window, cfg_.scan_mode);
      feat = cross_scale_fuse(feat, gd);
    }
  }
  const Tensor<T> f1 = add(tail_conv_.forward(feat), f0);
  Tensor<T> r = recon_expand_.forward(f1);
  r = pixel_shuffle(r, cfg_.scale);
  Tensor<T> out = recon_out_.forward(r);
  if (needs_pad) out = crop_hw(out, cfg_.scale * h, cfg_.scale * w);
  return out;
}

template <typename T>
Tensor<T> MambaCsrModel<T>::cross_scale_fuse(const Tensor<T>& orig_feat,
                                             const Tensor<T>& down_feat) const {
  if (!fusion_.has_value()) {
    throw InvariantError("cross_scale_fuse: model built without cross branch");
  }
  const int64_t h = orig_feat.dim(2), w = orig_feat.dim(3);
  if (orig_feat.dim(1) != down_feat.dim(1)) {
    throw ShapeError("cross_scale_fuse: channel mismatch between planes, " +
                     shape_to_string(orig_feat.shape()) + " vs " +
                     shape_to_string(down_feat.shape()));
  }
  const CrossScaleLayout layout =
      cross_scale_interleave(static_cast<int>(h), static_cast<int>(w));
  const Tensor<T> seq = cross_scale_sequence(layout, nchw_to_nlc(down_feat),
                                             nchw_to_nlc(orig_feat));
  const Tensor<T> seq_img = nlc_to_nchw(seq, 1, layout.length());
  ScanSchedule sched;
  sched.block_index = 0;
  sched.granularity = ScanGranularity::Sequential;
  sched.window = cfg_.window;
  sched.direction = ScanDirection::Horizontal;
  const Tensor<T> fused = fusion_->forward(seq_img, sched, cfg_.scan_mode);
  const Tensor<T> ext = extract_original(layout, nchw_to_nlc(fused));
  return add(orig_feat, nlc_to_nchw(ext, h, w));
}

template <typename T>
void MambaCsrModel<T>::save(const std::string& path) {
  prepare(nullptr);
  const auto params = parameters();
  save_checkpoint<T>(path, std::span<Parameter<T>* const>(params));
}

template <typename T>
void MambaCsrModel<T>::load(const std::string& path) {
  const auto params = parameters();
  load_checkpoint<T>(path, std::span<Parameter<T>* const>(params));
}

// ---- Adam ----

template <typename T>
Adam<T>::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

template <typename T>
void Adam<T>::step(std::span<Parameter<T>* const> params, Tape<T>& tape) {
  if (slots_.empty()) slots_.resize(params.size());
  if (slots_.size() != params.size()) {
    throw InvariantError("Adam: parameter set changed between steps");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter<T>* p = params[i];
    if (!p->trainable) continue;
    const Tensor<T> g = tape.grad(p->value);
    const auto gv = g.values();
    Slot& s = slots_[i];
    if (s.m.empty()) {
      s.m.assign(gv.size(), T(0));
      s.v.assign(gv.size(), T(0));
    }
    const auto pv = p->value.values();
    std::vector<T> nv(pv.begin(), pv.end());
    for (size_t j = 0; j < gv.size(); ++j) {
      const double gd = static_cast<double>(gv[j]);
      const double m = beta1_ * static_cast<double>(s.m[j]) + (1.0 - beta1_) * gd;
      const double v = beta2_ * static_cast<double>(s.v[j]) + (1.0 - beta2_) * gd * gd;
      s.m[j] = static_cast<T>(m);
      s.v[j] = static_cast<T>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      nv[j] = static_cast<T>(static_cast<double>(nv[j]) -
                             lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
    p->value = Tensor<T>(p->value.shape(), std::move(nv));
  }
}

// ---- image <-> tensor ----

template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  const int64_t h = img.height, w = img.width;
  std::vector<T> data(static_cast<size_t>(3 * h * w));
  for (int ch = 0; ch < 3; ++ch) {
    for (int64_t r = 0; r < h; ++r) {
      for (int64_t c = 0; c < w; ++c) {
        data[static_cast<size_t>((ch * h + r) * w + c)] =
            static_cast<T>(img.at(static_cast<int>(r), static_cast<int>(c), ch)) /
            T(255);
      }
    }
  }
  return Tensor<T>({1, 3, h, w}, std::move(data));
}

template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& t) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3) {
    throw ShapeError("tensor_to_image: expected 1x3xHxW, got " +
                     shape_to_string(t.shape()));
  }
  const int h = static_cast<int>(t.dim(2));
  const int w = static_cast<int>(t.dim(3));
  ImageU8 img = make_image(h, w);
  const T* d = t.data();
  for (int ch = 0; ch < 3; ++ch) {
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const double v =
            std::clamp(static_cast<double>(d[(ch * h + r) * w + c]), 0.0, 1.0);
        img.at(r, c, ch) = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return img;
}

// ---- toy training ----

template <typename T>
std::vector<T> train_toy(MambaCsrModel<T>& model, const ImageU8& hr,
                         const DegradeSpec& spec, int steps, double lr,
                         uint64_t seed, double stop_ratio) {
  (void)seed;  // degradation and init are already deterministic
  const int scale = model.config().scale;
  if (spec.scale != scale) {
    throw InvariantError("train_toy: degrade scale " + std::to_string(spec.scale) +
                         " does not match model scale " + std::to_string(scale));
  }
  const ImageU8 lr_img = degrade(hr, spec);
  // target crop aligned with the model output extents
  ImageU8 target = make_image(lr_img.height * scale, lr_img.width * scale);
  for (int r = 0; r < target.height; ++r)
    for (int c = 0; c < target.width; ++c)
      for (int ch = 0; ch < 3; ++ch) target.at(r, c, ch) = hr.at(r, c, ch);

  const Tensor<T> x = image_to_tensor<T>(lr_img);
  const Tensor<T> y = image_to_tensor<T>(target);
  Adam<T> opt(lr);
  const auto params = model.parameters();
  std::vector<T> losses;
  losses.reserve(static_cast<size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    Tape<T> tape;
    const Tensor<T> out = model.forward(x, &tape);
    const Tensor<T> loss = l1_loss(out, y);
    const T lv = loss.item();
    if (!std::isfinite(static_cast<double>(lv))) {
      throw InvariantError("train_toy: non-finite loss at step " +
                           std::to_string(step));
    }
    losses.push_back(lv);
    if (stop_ratio > 0.0 && lv <= static_cast<T>(stop_ratio) * losses.front()) {
      break;
    }
    tape.backward(loss);
    opt.step(std::span<Parameter<T>* const>(params), tape);
  }
  model.prepare(nullptr);
  return losses;
}

// ---- effective receptive field ----

template <typename T>
Tensor<T> erf_map(const ForwardFn<T>& fn, int in_h, int in_w, uint64_t seed) {
  Rng rng = Rng(seed).child("erf_input");
  const int64_t n = static_cast<int64_t>(3) * in_h * in_w;
  std::vector<T> data(static_cast<size_t>(n));
  for (auto& v : data) v = static_cast<T>(rng.uniform());
  const Tensor<T> x({1, 3, in_h, in_w}, std::move(data));

  Tape<T> tape;
  const Tensor<T> xw = tape.watch(x);
  const Tensor<T> y = fn(xw, &tape);
  if (y.rank() != 4) {
    throw ShapeError("erf_map: model output must be rank 4");
  }
  const int64_t co = y.dim(1), ho = y.dim(2), wo = y.dim(3);
  std::vector<T> mask_data(static_cast<size_t>(y.size()), T(0));
  for (int64_t ch = 0; ch < co; ++ch) {
    mask_data[static_cast<size_t>(((ch * ho) + ho / 2) * wo + wo / 2)] =
        T(1) / static_cast<T>(co);
  }
  const Tensor<T> mask(std::vector<int64_t>(y.shape()), std::move(mask_data));
  const Tensor<T> loss = sum_all(mul(y, mask));
  tape.backward(loss);
  const Tensor<T> g = tape.grad(xw);
  const T* gd = g.data();
  std::vector<T> heat(static_cast<size_t>(in_h) * in_w, T(0));
  double total = 0.0;
  for (int64_t ch = 0; ch < 3; ++ch) {
    for (int64_t i = 0; i < static_cast<int64_t>(heat.size()); ++i) {
      heat[static_cast<size_t>(i)] +=
          std::fabs(gd[ch * in_h * in_w + i]);
    }
  }
  for (T v : heat) total += static_cast<double>(v);
  if (total > 0.0) {
    for (auto& v : heat) v = static_cast<T>(static_cast<double>(v) / total);
  }
  return Tensor<T>({in_h, in_w}, std::move(heat));
}

// ---- ErfScanModel ----

template <typename T>
ErfScanModel<T>::ErfScanModel(ErfScanKind kind, int channels, int d_state,
                              int window, bool bidirectional, uint64_t seed)
    : kind_(kind),
      channels_(channels),
      d_state_(d_state),
      window_(window),
      bidirectional_(bidirectional) {
  Rng rng = Rng(seed).child("erf_model");
  embed_ = LinearLayer<T>("embed", channels, 3, true, rng);
  std::vector<ScanGranularity> grans;
  switch (kind) {
    case ErfScanKind::Sequential:
      grans = {ScanGranularity::Sequential};
      break;
    case ErfScanKind::WindowOnly:
      grans = {ScanGranularity::Window};
      break;
    case ErfScanKind::Hierarchical:
      grans = {ScanGranularity::Window, ScanGranularity::Sequential};
      break;
  }
  for (size_t i = 0; i < grans.size(); ++i) {
    const std::string prefix = "stages." + std::to_string(i);
    Stage st;
    st.dt_proj = LinearLayer<T>(prefix + ".dt_proj", channels, channels, true, rng);
    std::vector<T> dtb(static_cast<size_t>(channels));
    for (auto& v : dtb) {
      const double target = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
      v = static_cast<T>(std::log(std::expm1(target)));
    }
    st.dt_proj.b.value = Tensor<T>({channels}, std::move(dtb));
    st.b_proj = LinearLayer<T>(prefix + ".b_proj", d_state, channels, false, rng);
    st.c_proj = LinearLayer<T>(prefix + ".c_proj", d_state, channels, false, rng);
    std::vector<T> alog(static_cast<size_t>(channels) * d_state);
    for (int d = 0; d < channels; ++d)
      for (int k = 0; k < d_state; ++k)
        alog[static_cast<size_t>(d) * d_state + k] =
            static_cast<T>(std::log(static_cast<double>(k + 1)));
    st.A_log = Parameter<T>{prefix + ".A_log",
                            Tensor<T>({channels, d_state}, std::move(alog)), true};
    st.D = Parameter<T>{prefix + ".D", Tensor<T>::full({channels}, T(1)), true};
    st.granularity = grans[i];
    stages_.push_back(std::move(st));
  }
  head_ = LinearLayer<T>("head", 3, channels, true, rng);

  auto collect = [this](Parameter<T>& p) { params_.push_back(&p); };
  embed_.visit(collect);
  for (auto& st : stages_) {
    st.dt_proj.visit(collect);
    st.b_proj.visit(collect);
    st.c_proj.visit(collect);
    collect(st.A_log);
    collect(st.D);
  }
  head_.visit(collect);
}

template <typename T>
Trajectory ErfScanModel<T>::stage_trajectory(int h, int w) const {
  ScanSchedule s;
  s.granularity = stages_.front().granularity;
  s.window = window_;
  s.direction = ScanDirection::Horizontal;
  return make_trajectory(s, h, w);
}

template <typename T>
Tensor<T> ErfScanModel<T>::forward(const Tensor<T>& img, Tape<T>* tape) {
  for (Parameter<T>* p : params_) {
    if (tape != nullptr) {
      p->value = tape->watch(p->value);
    } else if (p->value.on_tape()) {
      p->value = p->value.detached();
    }
  }
  const int64_t h = img.dim(2), w = img.dim(3);
  Tensor<T> t = embed_.forward(nchw_to_nlc(img));
  for (const Stage& st : stages_) {
    ScanSchedule s;
    s.granularity = st.granularity;
    s.window = window_;
    s.direction = ScanDirection::Horizontal;
    const Trajectory traj =
        make_trajectory(s, static_cast<int>(h), static_cast<int>(w));
    const SsmCore<T> core{st.A_log.value, st.D.value};
    const Tensor<T> u = select_batch(t, 0);
    const Tensor<T> dt = softplus(st.dt_proj.forward(u));
    const Tensor<T> bp = st.b_proj.forward(u);
    const Tensor<T> cp = st.c_proj.forward(u);
    std::vector<Trajectory> paths;
    paths.push_back(traj);
    if (bidirectional_) paths.push_back(flip(traj));
    Tensor<T> acc;
    for (const Trajectory& p : paths) {
      ScanInputs<T> inp{gather_tokens(u, p), gather_tokens(dt, p),
                        gather_tokens(bp, p), gather_tokens(cp, p)};
      const Tensor<T> y = scatter_tokens(selective_scan(core, inp), p);
      acc = acc.defined() ? add(acc, y) : y;
    }
    std::vector<Tensor<T>> one{acc};
    t = stack_first(std::span<const Tensor<T>>(one));
  }
  return nlc_to_nchw(head_.forward(t), h, w);
}

template <typename T>
ForwardFn<T> ErfScanModel<T>::as_fn() {
  return [this](const Tensor<T>& x, Tape<T>* tape) { return forward(x, tape); };
}

#define MAMBACSR_INSTANTIATE_MODEL(T)                                          \
  template struct Conv2dLayer<T>;                                              \
  template struct LinearLayer<T>;                                              \
  template struct LayerNormLayer<T>;                                           \
  template struct Ss2dLayer<T>;                                                \
  template struct CabLayer<T>;                                                 \
  template struct MlpLayer<T>;                                                 \
  template struct RlmbLayer<T>;                                                \
  template struct RlmgLayer<T>;                                                \
  template class MambaCsrModel<T>;                                             \
  template class Adam<T>;                                                      \
  template Tensor<T> image_to_tensor<T>(const ImageU8&);                       \
  template ImageU8 tensor_to_image<T>(const Tensor<T>&);                       \
  template std::vector<T> train_toy(MambaCsrModel<T>&, const ImageU8&,         \
                                    const DegradeSpec&, int, double, uint64_t, \
                                    double);                                   \
  template Tensor<T> erf_map(const ForwardFn<T>&, int, int, uint64_t);         \
  template class ErfScanModel<T>;

MAMBACSR_INSTANTIATE_MODEL(float)
MAMBACSR_INSTANTIATE_MODEL(double)
#undef MAMBACSR_INSTANTIATE_MODEL

}  // namespace mambacsr
