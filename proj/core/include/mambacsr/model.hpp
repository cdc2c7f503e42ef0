#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mambacsr/degrade.hpp"
#include "mambacsr/image.hpp"
#include "mambacsr/ops.hpp"
#include "mambacsr/rng.hpp"
#include "mambacsr/ssm.hpp"
#include "mambacsr/tensor.hpp"
#include "mambacsr/trajectory.hpp"

namespace mambacsr {

enum class ScanMode { Dis, FourDir };

struct ModelConfig {
  int channels = 32;
  int groups = 2;
  int blocks_per_group = 4;
  int d_state = 8;
  double expand = 2.0;
  double mlp_ratio = 2.0;
  int window = 8;
  // The paper frames sequential scanning as one full-image window (64 on
  // 64x64 crops); scanning always uses the actual grid extent.
  int seq_window = 64;
  int scale = 4;
  ScanMode scan_mode = ScanMode::Dis;
  bool cross_scale = true;

  int d_inner() const;
  int n_scan_dirs() const { return scan_mode == ScanMode::Dis ? 2 : 4; }
  void validate() const;
};

/// key=value lines, '#' comments; keys exactly match ModelConfig field names.
ModelConfig parse_model_config_text(const std::string& text);
ModelConfig parse_model_config_file(const std::string& path);

/// Analytic multiply-accumulate counts per layer category for one forward
/// pass at the given input extents (no execution). Scan cost is counted per
/// selective_scan invocation as L * d_inner * d_state * kScanMacPerStep.
struct FlopReport {
  // per-step MACs per (channel, state): state decay, state input, output dot
  static constexpr uint64_t kScanMacPerStep = 3;

  uint64_t conv = 0;
  uint64_t linear = 0;
  uint64_t scan = 0;
  uint64_t extras = 0;
  uint64_t scan_invocations = 0;

  uint64_t total() const { return conv + linear + scan + extras; }
};

FlopReport count_flops(const ModelConfig& cfg, int h, int w);

// ---- layers ----

template <typename T>
struct Conv2dLayer {
  Parameter<T> w;
  Parameter<T> b;
  int pad = 0;
  int groups = 1;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& prefix, int cout, int cin, int k, int grp,
              Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  template <typename F>
  void visit(F&& f) {
    f(w);
    f(b);
  }
};

template <typename T>
struct LinearLayer {
  Parameter<T> w;
  Parameter<T> b;
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(const std::string& prefix, int out_f, int in_f, bool bias,
              Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  template <typename F>
  void visit(F&& f) {
    f(w);
    if (has_bias) f(b);
  }
};

template <typename T>
struct LayerNormLayer {
  Parameter<T> gamma;
  Parameter<T> beta;

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& prefix, int c);
  Tensor<T> forward(const Tensor<T>& x) const;
  template <typename F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
};

/// Local-window 2D selective scan module. One shared set of per-token
/// projections feeds every trajectory of the block; each trajectory is run
/// as gather -> selective_scan -> scatter and the scattered outputs are
/// summed before out-norm, gating and output projection.
template <typename T>
struct Ss2dLayer {
  LinearLayer<T> in_proj_x;
  LinearLayer<T> in_proj_z;
  Conv2dLayer<T> dwconv;
  LinearLayer<T> dt_proj;
  LinearLayer<T> b_proj;
  LinearLayer<T> c_proj;
  Parameter<T> A_log;
  Parameter<T> D;
  LayerNormLayer<T> out_norm;
  LinearLayer<T> out_proj;
  DeltaBForm form = kDefaultDeltaBForm;

  Ss2dLayer() = default;
  Ss2dLayer(const std::string& prefix, int c, int d_inner, int d_state, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x_nlc, int64_t h, int64_t w,
                    const std::vector<Trajectory>& trajs) const;
  template <typename F>
  void visit(F&& f) {
    in_proj_x.visit(f);
    in_proj_z.visit(f);
    dwconv.visit(f);
    dt_proj.visit(f);
    b_proj.visit(f);
    c_proj.visit(f);
    f(A_log);
    f(D);
    out_norm.visit(f);
    out_proj.visit(f);
  }
};

/// Channel attention block: conv3x3 -> GELU -> conv3x3, then squeeze-excite
/// (pool -> 1x1 reduce -> GELU -> 1x1 expand -> sigmoid) scaling.
template <typename T>
struct CabLayer {
  Conv2dLayer<T> conv1;
  Conv2dLayer<T> conv2;
  Conv2dLayer<T> att_reduce;
  Conv2dLayer<T> att_expand;

  CabLayer() = default;
  CabLayer(const std::string& prefix, int c, int reduction, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  template <typename F>
  void visit(F&& f) {
    conv1.visit(f);
    conv2.visit(f);
    att_reduce.visit(f);
    att_expand.visit(f);
  }
};

template <typename T>
struct MlpLayer {
  LinearLayer<T> fc1;
  LinearLayer<T> fc2;

  MlpLayer() = default;
  MlpLayer(const std::string& prefix, int c, int hidden, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  template <typename F>
  void visit(F&& f) {
    fc1.visit(f);
    fc2.visit(f);
  }
};

/// Residual Local Mamba Block:
///   F_inter = CAB(LN(x)) + LW-SS2D(LN(x)) + s1*x
///   out     = s2*F_inter + MLP(LN(F_inter))
template <typename T>
struct RlmbLayer {
  LayerNormLayer<T> ln1;
  Ss2dLayer<T> ssm;
  CabLayer<T> cab;
  Parameter<T> s1;
  Parameter<T> s2;
  LayerNormLayer<T> ln2;
  MlpLayer<T> mlp;

  RlmbLayer() = default;
  RlmbLayer(const std::string& prefix, const ModelConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x_nchw, const ScanSchedule& sched,
                    ScanMode mode) const;
  template <typename F>
  void visit(F&& f) {
    ln1.visit(f);
    ssm.visit(f);
    cab.visit(f);
    f(s1);
    f(s2);
    ln2.visit(f);
    mlp.visit(f);
  }
};

/// Residual Local Mamba Group: blocks + conv with a group residual.
template <typename T>
struct RlmgLayer {
  std::vector<RlmbLayer<T>> blocks;
  Conv2dLayer<T> conv;

  RlmgLayer() = default;
  RlmgLayer(const std::string& prefix, const ModelConfig& cfg, Rng& rng);
  /// first_block_index: global index of the first block for scheduling.
  Tensor<T> forward(const Tensor<T>& x, int first_block_index, int window,
                    ScanMode mode) const;
  template <typename F>
  void visit(F&& f) {
    for (auto& b : blocks) b.visit(f);
    conv.visit(f);
  }
};

template <typename T>
class MambaCsrModel {
 public:
  MambaCsrModel(const ModelConfig& cfg, uint64_t seed);

  /// img is N x 3 x H x W. Output is N x 3 x (scale*H) x (scale*W). When a
  /// tape is provided all parameters are watched and the pass is recorded.
  Tensor<T> forward(const Tensor<T>& img, Tape<T>* tape = nullptr);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter<T>*> parameters();
  /// Watch every parameter on a tape (or strip tape links if null).
  void prepare(Tape<T>* tape);

  void save(const std::string& path);
  void load(const std::string& path);

  /// Fuse the half-scale plane into the full-scale plane through the fusion
  /// block (exposed for tests).
  Tensor<T> cross_scale_fuse(const Tensor<T>& orig_feat,
                             const Tensor<T>& down_feat) const;

 private:
  ModelConfig cfg_;
  Conv2dLayer<T> sfe_;
  std::vector<RlmgLayer<T>> groups_;
  Conv2dLayer<T> tail_conv_;
  Conv2dLayer<T> cross_sfe_;
  std::optional<RlmgLayer<T>> cross_group_;
  std::optional<RlmbLayer<T>> fusion_;
  Conv2dLayer<T> recon_expand_;
  Conv2dLayer<T> recon_out_;
};

// ---- optimization / training ----

template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.99,
                double eps = 1e-8);
  void set_lr(double lr) { lr_ = lr; }
  /// Applies one update from gradients accumulated on the tape. Parameters
  /// not reached by the loss receive zero gradients.
  void step(std::span<Parameter<T>* const> params, Tape<T>& tape);

 private:
  struct Slot {
    std::vector<T> m;
    std::vector<T> v;
  };
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

/// img in [0,255] u8 -> 1x3xHxW tensor in [0,1] (planar).
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img);
/// clamp to [0,1], scale to [0,255], round.
template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& t);

/// Degrades hr by spec, then runs Adam on the L1 loss between the model
/// output and the matching HR crop. Stops early once the loss falls to
/// stop_ratio * initial (0 disables). Throws InvariantError on a non-finite
/// loss. Returns the per-step loss trace.
template <typename T>
std::vector<T> train_toy(MambaCsrModel<T>& model, const ImageU8& hr,
                         const DegradeSpec& spec, int steps, double lr,
                         uint64_t seed, double stop_ratio = 0.0);

// ---- receptive-field analysis ----

template <typename T>
using ForwardFn = std::function<Tensor<T>(const Tensor<T>&, Tape<T>*)>;

/// Normalized input-gradient magnitude map of the center output activation:
/// backward from the channel-mean of the spatial-center output, absolute
/// input gradients summed over input channels, normalized to sum 1.
template <typename T>
Tensor<T> erf_map(const ForwardFn<T>& fn, int in_h, int in_w, uint64_t seed);

enum class ErfScanKind { Sequential, WindowOnly, Hierarchical };

/// Minimal scan-only model for receptive-field studies: per-token linear
/// embed, one scan stage per trajectory (two for Hierarchical: window then
/// full-image), per-token linear head. No convolutions, so information
/// travels exclusively along scan trajectories.
template <typename T>
class ErfScanModel {
 public:
  ErfScanModel(ErfScanKind kind, int channels, int d_state, int window,
               bool bidirectional, uint64_t seed);
  Tensor<T> forward(const Tensor<T>& img, Tape<T>* tape);
  ForwardFn<T> as_fn();
  /// Trajectory of the first scan stage (for causality checks).
  Trajectory stage_trajectory(int h, int w) const;

 private:
  struct Stage {
    LinearLayer<T> dt_proj;
    LinearLayer<T> b_proj;
    LinearLayer<T> c_proj;
    Parameter<T> A_log;
    Parameter<T> D;
    ScanGranularity granularity;
  };
  ErfScanKind kind_;
  int channels_;
  int d_state_;
  int window_;
  bool bidirectional_;
  LinearLayer<T> embed_;
  std::vector<Stage> stages_;
  LinearLayer<T> head_;
  std::vector<Parameter<T>*> params_;
};

#define MAMBACSR_DECLARE_MODEL(T)                                              \
  extern template struct Conv2dLayer<T>;                                       \
  extern template struct LinearLayer<T>;                                       \
  extern template struct LayerNormLayer<T>;                                    \
  extern template struct Ss2dLayer<T>;                                         \
  extern template struct CabLayer<T>;                                          \
  extern template struct MlpLayer<T>;                                          \
  extern template struct RlmbLayer<T>;                                         \
  extern template struct RlmgLayer<T>;                                         \
  extern template class MambaCsrModel<T>;                                      \
  extern template class Adam<T>;                                               \
  extern template Tensor<T> image_to_tensor<T>(const ImageU8&);                \
  extern template ImageU8 tensor_to_image<T>(const Tensor<T>&);                \
  extern template std::vector<T> train_toy(MambaCsrModel<T>&, const ImageU8&,  \
                                           const DegradeSpec&, int, double,    \
                                           uint64_t, double);                  \
  extern template Tensor<T> erf_map(const ForwardFn<T>&, int, int, uint64_t);  \
  extern template class ErfScanModel<T>;

MAMBACSR_DECLARE_MODEL(float)
MAMBACSR_DECLARE_MODEL(double)
#undef MAMBACSR_DECLARE_MODEL

}  // namespace mambacsr
