// mambacsr: one multiplexed executable for trajectory export, gradient
// checks, degradation, restoration, toy training, metrics, FLOP and
// receptive-field reports, and scan benchmarks.
//
// Exit codes: 0 success, 1 validation/tolerance failure, 2 I/O or parse
// error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mambacsr/checkpoint.hpp"
#include "mambacsr/degrade.hpp"
#include "mambacsr/errors.hpp"
#include "mambacsr/gradcheck_suite.hpp"
#include "mambacsr/image.hpp"
#include "mambacsr/metrics.hpp"
#include "mambacsr/model.hpp"
#include "mambacsr/ops.hpp"
#include "mambacsr/rng.hpp"
#include "mambacsr/ssm.hpp"
#include "mambacsr/tensor.hpp"
#include "mambacsr/trajectory.hpp"

namespace {

using namespace mambacsr;

constexpr int kExitOk = 0;
constexpr int kExitFail = 1;
constexpr int kExitIo = 2;

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(tmp + ": cannot open for writing");
    f << text;
    if (!f) {
      f.close();
      std::remove(tmp.c_str());
      throw IoError(tmp + ": write failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw IoError(path + ": rename failed: " + ec.message());
  }
}

ModelConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ModelConfig{};
  return parse_model_config_file(path);
}

GrayU8 heatmap_to_gray(const Tensor<float>& heat) {
  const int h = static_cast<int>(heat.dim(0));
  const int w = static_cast<int>(heat.dim(1));
  float peak = 0.0f;
  for (float v : heat.values()) peak = std::max(peak, v);
  GrayU8 g;
  g.height = h;
  g.width = w;
  g.data.resize(static_cast<size_t>(h) * w);
  const auto vals = heat.values();
  for (size_t i = 0; i < g.data.size(); ++i) {
    // fourth-root scaling keeps faint long-range mass visible
    const double rel = peak > 0.0f ? vals[i] / peak : 0.0;
    g.data[i] = static_cast<uint8_t>(std::lround(255.0 * std::pow(rel, 0.25)));
  }
  return g;
}

// ---- traj ----

int cmd_traj(int h, int w, int window, const std::string& mode,
             const std::string& out_path, const std::string& heatmap_path) {
  std::ostringstream csv;
  if (mode == "cross") {
    const CrossScaleLayout layout = cross_scale_interleave(h, w);
    csv << "step,plane,row,col,flat_index\n";
    for (size_t s = 0; s < layout.sequence.size(); ++s) {
      const CrossEntry& e = layout.sequence[s];
      const bool down = e.plane == CrossPlane::Down;
      const int64_t flat = down
                               ? static_cast<int64_t>(e.row) * layout.down_w + e.col
                               : static_cast<int64_t>(e.row) * w + e.col;
      csv << s << "," << (down ? "down" : "orig") << "," << e.row << "," << e.col
          << "," << flat << "\n";
    }
    write_text_atomic(out_path, csv.str());
    if (!heatmap_path.empty()) {
      GrayU8 g;
      g.height = h;
      g.width = w;
      g.data.assign(static_cast<size_t>(h) * w, 0);
      const double denom =
          layout.length() > 1 ? static_cast<double>(layout.length() - 1) : 1.0;
      for (size_t s = 0; s < layout.sequence.size(); ++s) {
        const CrossEntry& e = layout.sequence[s];
        if (e.plane != CrossPlane::Orig) continue;
        g.data[static_cast<size_t>(e.row) * w + e.col] =
            static_cast<uint8_t>(std::lround(255.0 * static_cast<double>(s) / denom));
      }
      write_pgm(heatmap_path, g);
    }
    return kExitOk;
  }

  Trajectory t;
  if (mode == "hseq") {
    t = raster(h, w, ScanDirection::Horizontal);
  } else if (mode == "vseq") {
    t = raster(h, w, ScanDirection::Vertical);
  } else if (mode == "hwin") {
    t = window_raster(h, w, window, ScanDirection::Horizontal);
  } else if (mode == "vwin") {
    t = window_raster(h, w, window, ScanDirection::Vertical);
  } else {
    throw InvariantError("unknown trajectory mode '" + mode + "'");
  }
  csv << "step,row,col,flat_index\n";
  for (int64_t k = 0; k < t.length(); ++k) {
    const int64_t flat = t.perm[static_cast<size_t>(k)];
    csv << k << "," << flat / w << "," << flat % w << "," << flat << "\n";
  }
  write_text_atomic(out_path, csv.str());
  if (!heatmap_path.empty()) {
    GrayU8 g;
    g.height = h;
    g.width = w;
    g.data.assign(static_cast<size_t>(h) * w, 0);
    const double denom = t.length() > 1 ? static_cast<double>(t.length() - 1) : 1.0;
    for (int64_t k = 0; k < t.length(); ++k) {
      g.data[static_cast<size_t>(t.perm[static_cast<size_t>(k)])] =
          static_cast<uint8_t>(std::lround(255.0 * static_cast<double>(k) / denom));
    }
    write_pgm(heatmap_path, g);
  }
  return kExitOk;
}

// ---- gradcheck ----

int cmd_gradcheck(uint64_t seed, double eps, const std::string& scope) {
  GradcheckResults results;
  double tol = kOpsGradTol;
  if (scope == "ops") {
    results = gradcheck_ops(seed, eps);
    tol = kOpsGradTol;
  } else if (scope == "scan") {
    results = gradcheck_scan(seed, eps);
    tol = kScanGradTol;
  } else if (scope == "model") {
    results = gradcheck_model(seed, eps);
    tol = kModelGradTol;
  } else {
    throw InvariantError("unknown gradcheck scope '" + scope + "'");
  }
  bool ok = true;
  for (const auto& [name, err] : results) {
    const bool pass = err <= tol;
    ok = ok && pass;
    std::printf("%-28s max_rel_err %.3e  %s\n", name.c_str(), err,
                pass ? "ok" : "FAIL");
  }
  std::printf("gradcheck %s: %zu targets, tolerance %.1e -> %s\n", scope.c_str(),
              results.size(), tol, ok ? "pass" : "fail");
  return ok ? kExitOk : kExitFail;
}

// ---- degrade / metrics ----

int cmd_degrade(const std::string& in, const std::string& out, int scale, int qf) {
  const ImageU8 hr = read_ppm(in);
  DegradeSpec spec;
  spec.scale = scale;
  spec.qf = qf;
  write_ppm(out, degrade(hr, spec));
  return kExitOk;
}

int cmd_metrics(const std::string& ref, const std::string& test) {
  const ImageU8 a = read_ppm(ref);
  const ImageU8 b = read_ppm(test);
  std::printf("file,psnr_y_db,ssim\n");
  std::printf("%s,%.2f,%.4f\n", test.c_str(), psnr_y(a, b), ssim(a, b));
  return kExitOk;
}

// ---- restore / train ----

int cmd_restore(const std::string& ckpt, const std::string& in,
                const std::string& out, const std::string& config_path,
                uint64_t seed) {
  const ModelConfig cfg = load_config_or_default(config_path);
  MambaCsrModel<float> model(cfg, seed);
  model.load(ckpt);
  const ImageU8 lr = read_ppm(in);
  const Tensor<float> x = image_to_tensor<float>(lr);
  const Tensor<float> y = model.forward(x, nullptr);
  write_ppm(out, tensor_to_image(y));
  return kExitOk;
}

int cmd_train_toy(const std::string& hr_path, int steps, double lr,
                  uint64_t seed, const std::string& out_ckpt, int qf,
                  const std::string& config_path) {
  const ModelConfig cfg = load_config_or_default(config_path);
  MambaCsrModel<float> model(cfg, seed);
  const ImageU8 hr = read_ppm(hr_path);
  DegradeSpec spec;
  spec.scale = cfg.scale;
  spec.qf = qf;
  const std::vector<float> losses =
      train_toy(model, hr, spec, steps, lr, seed, 0.0);
  for (size_t i = 0; i < losses.size(); ++i) {
    std::printf("step %zu loss %.6f\n", i, static_cast<double>(losses[i]));
  }
  if (!out_ckpt.empty()) model.save(out_ckpt);
  return kExitOk;
}

// ---- flops ----

int cmd_flops(const std::string& config_path, const std::string& mode, int h,
              int w) {
  ModelConfig cfg = load_config_or_default(config_path);
  cfg.scan_mode = (mode == "4dir") ? ScanMode::FourDir : ScanMode::Dis;
  const FlopReport rep = count_flops(cfg, h, w);
  ModelConfig dis = cfg, four = cfg;
  dis.scan_mode = ScanMode::Dis;
  four.scan_mode = ScanMode::FourDir;
  const FlopReport rd = count_flops(dis, h, w);
  const FlopReport r4 = count_flops(four, h, w);
  std::printf("mode %s at %dx%d (MACs, scan counted as L*d_inner*d_state*%llu)\n",
              mode.c_str(), h, w,
              static_cast<unsigned long long>(FlopReport::kScanMacPerStep));
  std::printf("  conv   %llu\n", static_cast<unsigned long long>(rep.conv));
  std::printf("  linear %llu\n", static_cast<unsigned long long>(rep.linear));
  std::printf("  scan   %llu (%llu invocations)\n",
              static_cast<unsigned long long>(rep.scan),
              static_cast<unsigned long long>(rep.scan_invocations));
  std::printf("  extras %llu\n", static_cast<unsigned long long>(rep.extras));
  std::printf("  total  %llu\n", static_cast<unsigned long long>(rep.total()));
  std::printf("scan_ratio_dis_over_4dir %.3f\n",
              static_cast<double>(rd.scan) / static_cast<double>(r4.scan));
  return kExitOk;
}

// ---- erf ----

int cmd_erf(const std::string& config_path, uint64_t seed, int size,
            const std::string& out_path) {
  const ModelConfig cfg = load_config_or_default(config_path);
  MambaCsrModel<float> model(cfg, seed);
  const ForwardFn<float> fn = [&model](const Tensor<float>& x,
                                       Tape<float>* tape) {
    return model.forward(x, tape);
  };
  const Tensor<float> heat = erf_map<float>(fn, size, size, seed);
  write_pgm(out_path, heatmap_to_gray(heat));
  double total = 0.0;
  for (float v : heat.values()) total += v;
  std::printf("erf %dx%d written to %s (mass %.6f)\n", size, size,
              out_path.c_str(), total);
  return kExitOk;
}

// ---- decay export ----

int cmd_decay(int len, int dinner, int dstate, int p, uint64_t seed,
              const std::string& out_path) {
  Rng rng = Rng(seed).child("decay");
  auto rand_t = [&](std::vector<int64_t> shape, double lo, double hi) {
    const int64_t n = shape_numel(shape);
    std::vector<double> d(static_cast<size_t>(n));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor<double>(std::move(shape), std::move(d));
  };
  const SsmCore<double> core{rand_t({dinner, dstate}, -1.0, 1.0),
                             rand_t({dinner}, -1.0, 1.0)};
  const ScanInputs<double> inp{rand_t({len, dinner}, -1.0, 1.0),
                               rand_t({len, dinner}, 0.01, 0.2),
                               rand_t({len, dstate}, -1.0, 1.0),
                               rand_t({len, dstate}, -1.0, 1.0)};
  std::ostringstream os;
  write_decay_csv(os, core, inp, p);
  write_text_atomic(out_path, os.str());
  return kExitOk;
}

// ---- bench ----

// Interleaves the L and 2L measurements so clock-frequency drift and cache
// warmup affect both medians equally.
std::pair<double, double> bench_scan_pair(int64_t len, int64_t dinner,
                                          int64_t dstate, int iters,
                                          uint64_t seed) {
  Rng rng = Rng(seed).child("bench");
  auto rand_t = [&](std::vector<int64_t> shape, float lo, float hi) {
    const int64_t n = shape_numel(shape);
    std::vector<float> d(static_cast<size_t>(n));
    for (auto& v : d) v = static_cast<float>(rng.uniform(lo, hi));
    return Tensor<float>(std::move(shape), std::move(d));
  };
  const SsmCore<float> core{rand_t({dinner, dstate}, -1.0f, 1.0f),
                            rand_t({dinner}, -1.0f, 1.0f)};
  auto make_inputs = [&](int64_t l) {
    return ScanInputs<float>{rand_t({l, dinner}, -1.0f, 1.0f),
                             rand_t({l, dinner}, 0.01f, 0.2f),
                             rand_t({l, dstate}, -1.0f, 1.0f),
                             rand_t({l, dstate}, -1.0f, 1.0f)};
  };
  const ScanInputs<float> in1 = make_inputs(len);
  const ScanInputs<float> in2 = make_inputs(2 * len);
  volatile float sink = 0.0f;
  auto timed = [&](const ScanInputs<float>& inp) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor<float> y = selective_scan(core, inp);
    const auto t1 = std::chrono::steady_clock::now();
    sink = sink + y.values()[0];
    return std::chrono::duration<double>(t1 - t0).count();
  };
  for (int i = 0; i < 3; ++i) {
    timed(in1);
    timed(in2);
  }
  std::vector<double> times1, times2;
  for (int i = 0; i < iters; ++i) {
    times1.push_back(timed(in1));
    times2.push_back(timed(in2));
  }
  (void)sink;
  std::sort(times1.begin(), times1.end());
  std::sort(times2.begin(), times2.end());
  return {times1[times1.size() / 2], times2[times2.size() / 2]};
}

int cmd_bench_scan(int64_t len, int64_t dinner, int64_t dstate, int iters,
                   uint64_t seed) {
  const auto [t1, t2] = bench_scan_pair(len, dinner, dstate, iters, seed);
  const double ratio = t2 / t1;
  std::printf("L=%lld  median %.6fs  %.0f tokens/s\n",
              static_cast<long long>(len), t1, static_cast<double>(len) / t1);
  std::printf("L=%lld  median %.6fs  %.0f tokens/s\n",
              static_cast<long long>(2 * len), t2,
              static_cast<double>(2 * len) / t2);
  std::printf("time(2L)/time(L) = %.3f (expected within [1.6, 2.6])\n", ratio);
  if (ratio < 1.6 || ratio > 2.6) {
    std::fprintf(stderr, "error: scan scaling ratio %.3f outside [1.6, 2.6]\n",
                 ratio);
    return kExitFail;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MambaCSR: dual-interleaved selective-scan super-resolution"};
  app.require_subcommand(1);

  // traj
  auto* traj = app.add_subcommand("traj", "Export a scan trajectory as CSV");
  int th = 8, tw = 8, twin = 8;
  std::string tmode = "hseq", tout, theat;
  traj->add_option("--height", th, "Grid height")->required();
  traj->add_option("--width", tw, "Grid width")->required();
  traj->add_option("--window", twin, "Window size for hwin/vwin");
  traj->add_option("--mode", tmode, "hseq|vseq|hwin|vwin|cross")
      ->check(CLI::IsMember({"hseq", "vseq", "hwin", "vwin", "cross"}));
  traj->add_option("--out", tout, "CSV output path")->required();
  traj->add_option("--heatmap", theat, "Optional PGM step-heatmap path");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  uint64_t gseed = 42;
  double geps = 1e-5;
  std::string gscope = "ops";
  gc->add_option("--seed", gseed, "Seed");
  gc->add_option("--eps", geps, "Central-difference step");
  gc->add_option("--scope", gscope, "ops|scan|model")
      ->check(CLI::IsMember({"ops", "scan", "model"}));

  // degrade
  auto* dg = app.add_subcommand("degrade", "Bicubic downsample + JPEG-style compression");
  std::string din, dout;
  int dscale = 4, dqf = 10;
  dg->add_option("--in", din, "Input PPM")->required();
  dg->add_option("--out", dout, "Output PPM")->required();
  dg->add_option("--scale", dscale, "Downsample factor");
  dg->add_option("--qf", dqf, "JPEG quality factor");

  // restore
  auto* rs = app.add_subcommand("restore", "Run the model on a compressed LR image");
  std::string rckpt, rin, rout, rcfg;
  uint64_t rseed = 42;
  rs->add_option("--model", rckpt, "Checkpoint path")->required();
  rs->add_option("--in", rin, "Input PPM")->required();
  rs->add_option("--out", rout, "Output PPM")->required();
  rs->add_option("--config", rcfg, "Model config file (key=value)");
  rs->add_option("--seed", rseed, "Seed");

  // train-toy
  auto* tt = app.add_subcommand("train-toy", "Overfit the model on one image");
  std::string thr, tckpt, tcfg;
  int tsteps = 1000, tqf = 10;
  double tlr = 1e-3;
  uint64_t tseed = 42;
  tt->add_option("--hr", thr, "HR source PPM")->required();
  tt->add_option("--steps", tsteps, "Adam steps");
  tt->add_option("--lr", tlr, "Learning rate");
  tt->add_option("--seed", tseed, "Seed");
  tt->add_option("--out", tckpt, "Checkpoint output path");
  tt->add_option("--qf", tqf, "JPEG quality factor");
  tt->add_option("--config", tcfg, "Model config file");

  // metrics
  auto* mt = app.add_subcommand("metrics", "PSNR-Y / SSIM between two PPMs");
  std::string mref, mtest;
  mt->add_option("--ref", mref, "Reference PPM")->required();
  mt->add_option("--test", mtest, "Test PPM")->required();

  // flops
  auto* fl = app.add_subcommand("flops", "Analytic MAC counts per category");
  std::string fcfg, fmode = "dis";
  int fh = 64, fw = 64;
  fl->add_option("--config", fcfg, "Model config file");
  fl->add_option("--mode", fmode, "dis|4dir")
      ->check(CLI::IsMember({"dis", "4dir"}));
  fl->add_option("--height", fh, "Input height");
  fl->add_option("--width", fw, "Input width");

  // erf
  auto* er = app.add_subcommand("erf", "Effective receptive field heatmap");
  std::string ecfg, eout;
  uint64_t eseed = 42;
  int esize = 32;
  er->add_option("--config", ecfg, "Model config file");
  er->add_option("--seed", eseed, "Seed");
  er->add_option("--size", esize, "Input extent");
  er->add_option("--out", eout, "Output PGM")->required();

  // bench-scan
  auto* bs = app.add_subcommand("bench-scan", "Selective-scan throughput and scaling");
  int64_t blen = 4096, bdinner = 16, bdstate = 8;
  int biters = 9;
  uint64_t bseed = 42;
  bs->add_option("--len", blen, "Sequence length L (also measures 2L)");
  bs->add_option("--dinner", bdinner, "Channels");
  bs->add_option("--dstate", bdstate, "State size");
  bs->add_option("--iters", biters, "Repetitions per median");
  bs->add_option("--seed", bseed, "Seed");

  // decay
  auto* dc = app.add_subcommand("decay", "Token-contribution decay profile CSV");
  int clen = 32, cdinner = 4, cdstate = 8, cp = 0;
  uint64_t cseed = 42;
  std::string cout_path;
  dc->add_option("--len", clen, "Sequence length");
  dc->add_option("--dinner", cdinner, "Channels");
  dc->add_option("--dstate", cdstate, "State size");
  dc->add_option("--p", cp, "Source token index");
  dc->add_option("--seed", cseed, "Seed");
  dc->add_option("--out", cout_path, "CSV output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitIo;
  }

  try {
    if (traj->parsed()) return cmd_traj(th, tw, twin, tmode, tout, theat);
    if (gc->parsed()) return cmd_gradcheck(gseed, geps, gscope);
    if (dg->parsed()) return cmd_degrade(din, dout, dscale, dqf);
    if (rs->parsed()) return cmd_restore(rckpt, rin, rout, rcfg, rseed);
    if (tt->parsed()) return cmd_train_toy(thr, tsteps, tlr, tseed, tckpt, tqf, tcfg);
    if (mt->parsed()) return cmd_metrics(mref, mtest);
    if (fl->parsed()) return cmd_flops(fcfg, fmode, fh, fw);
    if (er->parsed()) return cmd_erf(ecfg, eseed, esize, eout);
    if (bs->parsed()) return cmd_bench_scan(blen, bdinner, bdstate, biters, bseed);
    if (dc->parsed()) return cmd_decay(clen, cdinner, cdstate, cp, cseed, cout_path);
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFail;
  }
  return kExitOk;
}
