#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mambacsr/checkpoint.hpp"
#include "mambacsr/gradcheck_suite.hpp"
#include "mambacsr/model.hpp"
#include "testutil.hpp"

using namespace mambacsr;
using namespace mambacsr::testutil;
using T64 = Tensor<double>;
using T32 = Tensor<float>;

namespace {

ModelConfig tiny_config() {
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
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("config parsing accepts the documented key set") {
  const ModelConfig cfg = parse_model_config_text(
      "# comment\n"
      "channels = 16\n"
      "groups=1\n"
      "blocks_per_group = 2  # trailing comment\n"
      "d_state=4\n"
      "expand=1.5\n"
      "mlp_ratio=2\n"
      "window=4\n"
      "seq_window=32\n"
      "scale=2\n"
      "scan_mode=4dir\n"
      "cross_scale=false\n");
  CHECK(cfg.channels == 16);
  CHECK(cfg.expand == 1.5);
  CHECK(cfg.d_inner() == 24);
  CHECK(cfg.scan_mode == ScanMode::FourDir);
  CHECK(cfg.cross_scale == false);
  CHECK(cfg.scale == 2);

  CHECK_THROWS_AS(parse_model_config_text("unknown_key=1\n"), ParseError);
  CHECK_THROWS_AS(parse_model_config_text("channels\n"), ParseError);
  CHECK_THROWS_AS(parse_model_config_text("scan_mode=diagonal\n"), ParseError);
  CHECK_THROWS_AS(parse_model_config_text("scale=3\n"), InvariantError);
  CHECK_THROWS_AS(parse_model_config_text("channels=abc\n"), ParseError);
}

TEST_CASE("ss2d zeroed output projection annihilates the block") {
  Rng rng(101);
  Ss2dLayer<double> layer("t", 4, 8, 2, rng);
  layer.out_proj.w.value = T64::zeros({4, 8});
  layer.out_proj.b.value = T64::zeros({4});
  const T64 x = rand_tensor<double>({1, 16, 4}, rng);
  const Trajectory t = raster(4, 4, ScanDirection::Horizontal);
  const T64 y = layer.forward(x, 4, 4, {t, flip(t)});
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("scan-of-permutation identity via gather/scatter two-path oracle") {
  Rng rng(103);
  const int64_t h = 4, w = 6, din = 3, ns = 2;
  const SsmCore<double> core = rand_core<double>(din, ns, rng);
  const ScanInputs<double> raw = rand_inputs<double>(h * w, din, ns, rng);
  const Trajectory t = window_raster(static_cast<int>(h), static_cast<int>(w), 2,
                                     ScanDirection::Vertical);
  // path 1: gather by t, scan, scatter back
  const ScanInputs<double> gathered{
      gather_tokens(raw.u, t), gather_tokens(raw.delta, t),
      gather_tokens(raw.B, t), gather_tokens(raw.C, t)};
  const T64 path1 = scatter_tokens(selective_scan(core, gathered), t);
  // path 2: pre-permute the token stream, scan it sequentially (identity
  // trajectory), undo the permutation
  const Trajectory ident = raster(1, static_cast<int>(h * w),
                                  ScanDirection::Horizontal);
  const ScanInputs<double> pre{
      gather_tokens(gather_tokens(raw.u, t), ident),
      gather_tokens(gather_tokens(raw.delta, t), ident),
      gather_tokens(gather_tokens(raw.B, t), ident),
      gather_tokens(gather_tokens(raw.C, t), ident)};
  const T64 path2 = scatter_tokens(gather_tokens(selective_scan(core, pre), ident), t);
  CHECK(bit_identical(path1, path2));
}

TEST_CASE("rlmb zero input with zero biases and beta gives zero output") {
  Rng rng(107);
  const ModelConfig cfg = tiny_config();
  RlmbLayer<double> block("b", cfg, rng);
  block.visit([](Parameter<double>& p) {
    const auto& n = p.name;
    const bool is_bias = n.size() >= 2 && n.substr(n.size() - 2) == ".b";
    const bool is_beta = n.size() >= 5 && n.substr(n.size() - 5) == ".beta";
    if (is_bias || is_beta) {
      p.value = Tensor<double>::zeros(p.value.shape());
    }
  });
  const T64 x = T64::zeros({1, 4, 8, 8});
  const T64 y = block.forward(x, schedule_for_block(0, cfg.window), ScanMode::Dis);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("scan invocation count is 2 in DIS mode and 4 in FOUR_DIR mode") {
  Rng rng(109);
  const ModelConfig cfg = tiny_config();
  RlmbLayer<double> block("b", cfg, rng);
  const T64 x = rand_tensor<double>({1, 4, 8, 8}, rng);
  reset_scan_call_count();
  (void)block.forward(x, schedule_for_block(0, cfg.window), ScanMode::Dis);
  CHECK(scan_call_count() == 2);
  reset_scan_call_count();
  (void)block.forward(x, schedule_for_block(0, cfg.window), ScanMode::FourDir);
  CHECK(scan_call_count() == 4);
  reset_scan_call_count();
}

TEST_CASE("cab attention lies in (0,1) and output is interior-constant") {
  Rng rng(113);
  CabLayer<double> cab("c", 8, 4, rng);
  const T64 c = T64::full({1, 8, 9, 9}, 0.37);
  const T64 y = cab.forward(c);
  // two 3x3 convs -> 2-pixel halo; interior positions all equal
  for (int64_t ch = 0; ch < 8; ++ch) {
    const double ref = y.at({0, ch, 4, 4});
    for (int64_t r = 2; r < 7; ++r) {
      for (int64_t cx = 2; cx < 7; ++cx) {
        CHECK(y.at({0, ch, r, cx}) == doctest::Approx(ref).epsilon(1e-12));
      }
    }
  }
  // sigmoid gate bounds: a constant-input attention rescale keeps sign and
  // shrinks magnitude
  const T64 pre = cab.conv2.forward(gelu(cab.conv1.forward(c)));
  for (int64_t ch = 0; ch < 8; ++ch) {
    const double scaled = y.at({0, ch, 4, 4});
    const double unscaled = pre.at({0, ch, 4, 4});
    if (unscaled != 0.0) {
      const double gate = scaled / unscaled;
      CHECK(gate > 0.0);
      CHECK(gate < 1.0);
    }
  }
}

TEST_CASE("cab gradient check") {
  Rng rng(127);
  CabLayer<double> cab("c", 4, 4, rng);
  const T64 x = rand_tensor<double>({1, 4, 5, 5}, rng);
  const T64 w = rand_tensor<double>({1, 4, 5, 5}, rng);
  const ScalarFn<double> f = [&](Tape<double>& tape, const T64& xx) {
    cab.visit([&tape](Parameter<double>& p) { p.value = tape.watch(p.value); });
    return sum_all(mul(cab.forward(xx), w));
  };
  CHECK(grad_check(f, x, 1e-5) <= 1e-5);
}

TEST_CASE("rlmb s1 sensitivity matches finite differences") {
  Rng rng(131);
  const ModelConfig cfg = tiny_config();
  RlmbLayer<double> block("b", cfg, rng);
  const T64 x = rand_tensor<double>({1, 4, 8, 8}, rng);
  const T64 w = rand_tensor<double>({1, 4, 8, 8}, rng);
  const ScanSchedule sched = schedule_for_block(0, cfg.window);
  const ScalarFn<double> f = [&](Tape<double>&, const T64& s1) {
    block.s1.value = s1;
    return sum_all(mul(block.forward(x, sched, ScanMode::Dis), w));
  };
  CHECK(grad_check(f, T64::scalar(1.0), 1e-5) <= 1e-5);
}

TEST_CASE("ablating the CAB branch changes the block output") {
  Rng rng(137);
  const ModelConfig cfg = tiny_config();
  RlmbLayer<double> block("b", cfg, rng);
  const T64 x = rand_tensor<double>({1, 4, 8, 8}, rng);
  const ScanSchedule sched = schedule_for_block(0, cfg.window);
  const T64 with_cab = block.forward(x, sched, ScanMode::Dis);
  block.cab.conv2.w.value = T64::zeros(block.cab.conv2.w.value.shape());
  block.cab.conv2.b.value = T64::zeros({4});
  const T64 without = block.forward(x, sched, ScanMode::Dis);
  CHECK(max_abs_diff(with_cab, without) > 1e-6);
}

TEST_CASE("model output is exactly scale x input extents") {
  MambaCsrModel<float> model(tiny_config(), 1);
  const T32 x = T32::full({1, 3, 16, 16}, 0.5f);
  const T32 y = model.forward(x);
  CHECK(y.shape() == std::vector<int64_t>{1, 3, 64, 64});
  for (int64_t h : {8, 10}) {
    const T32 v = T32::full({1, 3, h, 12}, 0.25f);
    CHECK(model.forward(v).shape() == std::vector<int64_t>{1, 3, 4 * h, 48});
  }
  // odd extents go through reflect-pad and crop
  const T32 odd = T32::full({1, 3, 9, 7}, 0.5f);
  CHECK(model.forward(odd).shape() == std::vector<int64_t>{1, 3, 36, 28});
  CHECK_THROWS_AS(model.forward(T32::full({1, 4, 8, 8}, 0.0f)), ShapeError);
}

TEST_CASE("forward is deterministic given the seed") {
  const ModelConfig cfg = tiny_config();
  Rng rng(139);
  const T32 x = rand_tensor<float>({1, 3, 8, 8}, rng, 0.0, 1.0);
  MambaCsrModel<float> m1(cfg, 1234);
  MambaCsrModel<float> m2(cfg, 1234);
  const T32 y1 = m1.forward(x);
  const T32 y2 = m2.forward(x);
  const T32 y1b = m1.forward(x);
  CHECK(bit_identical(y1, y2));
  CHECK(bit_identical(y1, y1b));
  MambaCsrModel<float> m3(cfg, 99);
  CHECK_FALSE(bit_identical(y1, m3.forward(x)));
}

TEST_CASE("cross_scale_fuse is the identity when the fusion block is silenced") {
  const ModelConfig cfg = tiny_config();
  MambaCsrModel<double> model(cfg, 7);
  // zero the fusion output path: s2 = 0 and the MLP tail = 0
  auto params = model.parameters();
  for (Parameter<double>* p : params) {
    if (p->name == "fusion.s2" || p->name == "fusion.mlp.fc2.w" ||
        p->name == "fusion.mlp.fc2.b") {
      p->value = T64::zeros(p->value.shape());
    }
  }
  Rng rng(149);
  const T64 orig = rand_tensor<double>({1, 4, 8, 8}, rng);
  const T64 down = rand_tensor<double>({1, 4, 4, 4}, rng);
  const T64 fused = model.cross_scale_fuse(orig, down);
  CHECK(bit_identical(fused, orig));
}

TEST_CASE("cross_scale_fuse token bookkeeping and channel validation") {
  const ModelConfig cfg = tiny_config();
  MambaCsrModel<double> model(cfg, 7);
  Rng rng(151);
  const T64 orig = rand_tensor<double>({1, 4, 8, 6}, rng);
  const T64 down = rand_tensor<double>({1, 4, 4, 3}, rng);
  const T64 fused = model.cross_scale_fuse(orig, down);
  CHECK(fused.shape() == orig.shape());  // exactly H*W tokens survive
  const T64 bad = rand_tensor<double>({1, 3, 4, 3}, rng);
  CHECK_THROWS_AS(model.cross_scale_fuse(orig, bad), ShapeError);
}

TEST_CASE("gradient reaches the down-scale plane through the fusion block") {
  const ModelConfig cfg = tiny_config();
  MambaCsrModel<double> model(cfg, 7);
  Rng rng(157);
  const T64 orig = rand_tensor<double>({1, 4, 4, 4}, rng);
  const T64 down = rand_tensor<double>({1, 4, 2, 2}, rng);
  const T64 w = rand_tensor<double>({1, 4, 4, 4}, rng);
  const ScalarFn<double> f = [&](Tape<double>& tape, const T64& dd) {
    model.prepare(&tape);
    return sum_all(mul(model.cross_scale_fuse(orig, dd), w));
  };
  Tape<double> probe;
  const T64 dw = probe.watch(down);
  model.prepare(&probe);
  probe.backward(sum_all(mul(model.cross_scale_fuse(orig, dw), w)));
  const T64 g = probe.grad(dw);
  double mag = 0.0;
  for (double v : g.values()) mag += std::fabs(v);
  CHECK(mag > 1e-8);
  model.prepare(nullptr);
  CHECK(grad_check(f, down, 1e-5) <= 1e-5);
}

TEST_CASE("checkpoint save/load/forward is bit-identical") {
  const ModelConfig cfg = tiny_config();
  const std::string path = temp_path("mcsr_test_ckpt.bin");
  Rng rng(163);
  const T32 x = rand_tensor<float>({1, 3, 8, 8}, rng, 0.0, 1.0);
  MambaCsrModel<float> m1(cfg, 5);
  const T32 before = m1.forward(x);
  m1.save(path);
  MambaCsrModel<float> m2(cfg, 999);  // different init
  CHECK_FALSE(bit_identical(before, m2.forward(x)));
  m2.load(path);
  CHECK(bit_identical(before, m2.forward(x)));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects mismatches") {
  const std::string path = temp_path("mcsr_test_ckpt2.bin");
  Parameter<double> a{"a", T64({2, 2}, {1, 2, 3, 4}), true};
  Parameter<double> b{"b", T64({3}, {5, 6, 7}), true};
  std::vector<Parameter<double>*> both{&a, &b};
  save_checkpoint<double>(path, std::span<Parameter<double>* const>(both));

  std::vector<Parameter<double>*> onlya{&a};
  CHECK_THROWS_AS(
      load_checkpoint<double>(path, std::span<Parameter<double>* const>(onlya)),
      ParseError);
  Parameter<double> renamed{"zz", T64({3}, {0, 0, 0}), true};
  std::vector<Parameter<double>*> wrong{&a, &renamed};
  CHECK_THROWS_AS(
      load_checkpoint<double>(path, std::span<Parameter<double>* const>(wrong)),
      ParseError);
  Parameter<double> reshaped{"b", T64({4}, {0, 0, 0, 0}), true};
  std::vector<Parameter<double>*> bad_shape{&a, &reshaped};
  CHECK_THROWS_AS(load_checkpoint<double>(
                      path, std::span<Parameter<double>* const>(bad_shape)),
                  ParseError);
  // f32 model cannot load an f64 checkpoint
  Parameter<float> fa{"a", Tensor<float>({2, 2}, {1, 2, 3, 4}), true};
  Parameter<float> fb{"b", Tensor<float>({3}, {5, 6, 7}), true};
  std::vector<Parameter<float>*> fboth{&fa, &fb};
  CHECK_THROWS_AS(
      load_checkpoint<float>(path, std::span<Parameter<float>* const>(fboth)),
      ParseError);
  std::remove(path.c_str());
}

TEST_CASE("flop report: DIS halves the scan category and nothing else") {
  ModelConfig cfg;  // desk defaults
  cfg.scan_mode = ScanMode::Dis;
  const FlopReport dis = count_flops(cfg, 64, 64);
  cfg.scan_mode = ScanMode::FourDir;
  const FlopReport four = count_flops(cfg, 64, 64);
  CHECK(dis.scan * 2 == four.scan);
  CHECK(dis.scan_invocations * 2 == four.scan_invocations);
  CHECK(dis.conv == four.conv);
  CHECK(dis.linear == four.linear);
  CHECK(dis.extras == four.extras);
  CHECK(dis.total() < four.total());
}

TEST_CASE("flop report scales linearly in token count") {
  ModelConfig cfg;
  const FlopReport a = count_flops(cfg, 64, 64);
  const FlopReport b = count_flops(cfg, 128, 64);
  CHECK(b.scan == 2 * a.scan);
}

TEST_CASE("single conv MAC accounting follows the closed form") {
  // isolate one conv by differencing two configs that differ only in the
  // number of groups (one extra group conv + its blocks); instead check the
  // reconstruction expansion whose cost is known in closed form
  ModelConfig small;
  small.cross_scale = false;
  small.groups = 1;
  small.blocks_per_group = 1;
  small.channels = 16;
  small.scale = 2;
  ModelConfig big = small;
  big.scale = 4;
  const FlopReport rs = count_flops(small, 64, 64);
  const FlopReport rb = count_flops(big, 64, 64);
  // recon expand: len*C*(C*s^2)*9, final conv: len*s^2*3*C*9
  const uint64_t len = 64 * 64;
  const uint64_t expected_delta =
      len * 16 * 16 * (16 - 4) * 9 + len * (16 - 4) * 3 * 16 * 9;
  CHECK(rb.conv - rs.conv == expected_delta);
}

TEST_CASE("adam drives a scalar L1 objective to its target") {
  Parameter<float> p{"p", Tensor<float>::scalar(0.0f), true};
  std::vector<Parameter<float>*> params{&p};
  Adam<float> opt(1e-2);
  const Tensor<float> target = Tensor<float>::scalar(3.0f);
  for (int step = 0; step < 2000; ++step) {
    Tape<float> tape;
    p.value = tape.watch(p.value);
    const Tensor<float> loss = l1_loss(p.value, target);
    tape.backward(loss);
    opt.step(std::span<Parameter<float>* const>(params), tape);
    if (std::fabs(p.value.item() - 3.0f) < 0.05f) break;
  }
  CHECK(std::fabs(p.value.item() - 3.0f) < 0.05f);
}

TEST_CASE("toy training produces a finite, shrinking loss trace") {
  ModelConfig cfg = tiny_config();
  cfg.channels = 8;
  MambaCsrModel<float> model(cfg, 21);
  ImageU8 hr = make_image(32, 32);
  Rng rng(167);
  for (auto& v : hr.data) v = static_cast<uint8_t>(rng.below(256));
  DegradeSpec spec;
  spec.scale = 4;
  spec.qf = 10;
  const std::vector<float> losses = train_toy(model, hr, spec, 8, 1e-3, 21);
  REQUIRE(losses.size() == 8);
  for (float v : losses) CHECK(std::isfinite(v));
  CHECK(losses.back() < losses.front());
}

TEST_CASE("image/tensor conversions round-trip") {
  Rng rng(173);
  ImageU8 img = make_image(6, 5);
  for (auto& v : img.data) v = static_cast<uint8_t>(rng.below(256));
  const T32 t = image_to_tensor<float>(img);
  CHECK(t.shape() == std::vector<int64_t>{1, 3, 6, 5});
  const ImageU8 back = tensor_to_image(t);
  CHECK(back.data == img.data);
}

TEST_CASE("erf of the identity map is a delta at the center") {
  const ForwardFn<double> ident = [](const T64& x, Tape<double>*) { return x; };
  const T64 heat = erf_map<double>(ident, 9, 9, 3);
  double total = 0.0;
  for (double v : heat.values()) {
    CHECK(v >= 0.0);
    total += v;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(heat.at({4, 4}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("erf maps are deterministic, normalized, and causal for one-way scans") {
  ErfScanModel<double> causal(ErfScanKind::Sequential, 6, 3, 4, false, 11);
  const T64 h1 = erf_map<double>(causal.as_fn(), 8, 8, 5);
  const T64 h2 = erf_map<double>(causal.as_fn(), 8, 8, 5);
  CHECK(bit_identical(h1, h2));
  double total = 0.0;
  for (double v : h1.values()) {
    CHECK(v >= 0.0);
    total += v;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

  // tokens visited strictly after the center token carry zero mass
  const Trajectory t = causal.stage_trajectory(8, 8);
  const int64_t center_flat = (8 / 2) * 8 + (8 / 2);
  const int64_t center_step = t.inv_perm[static_cast<size_t>(center_flat)];
  for (int64_t step = center_step + 1; step < t.length(); ++step) {
    const int64_t flat = t.perm[static_cast<size_t>(step)];
    CHECK(h1.values()[static_cast<size_t>(flat)] == 0.0);
  }
  // and at least one earlier token carries mass
  double before = 0.0;
  for (int64_t step = 0; step <= center_step; ++step) {
    before += h1.values()[static_cast<size_t>(t.perm[static_cast<size_t>(step)])];
  }
  CHECK(before == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("bidirectional erf spreads mass past the center token") {
  ErfScanModel<double> model(ErfScanKind::Sequential, 6, 3, 4, true, 13);
  const T64 heat = erf_map<double>(model.as_fn(), 8, 8, 5);
  const Trajectory t = model.stage_trajectory(8, 8);
  const int64_t center_flat = (8 / 2) * 8 + (8 / 2);
  const int64_t center_step = t.inv_perm[static_cast<size_t>(center_flat)];
  double after = 0.0;
  for (int64_t step = center_step + 1; step < t.length(); ++step) {
    after += heat.values()[static_cast<size_t>(t.perm[static_cast<size_t>(step)])];
  }
  CHECK(after > 0.0);
}

TEST_CASE("full tiny model gradients match finite differences") {
  for (const auto& [name, err] : gradcheck_model(42, 1e-5, 1)) {
    INFO(name);
    CHECK(err <= kModelGradTol);
  }
}
