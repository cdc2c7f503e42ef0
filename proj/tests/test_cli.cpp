#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "mambacsr/image.hpp"

#ifndef MAMBACSR_CLI_PATH
#error "MAMBACSR_CLI_PATH must point at the mambacsr executable"
#endif

namespace {

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MAMBACSR_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  std::array<char, 512> buf;
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) {
    out += buf.data();
  }
  const int status = pclose(pipe);
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return {code, out};
}

std::filesystem::path tmp_dir() {
  const auto d = std::filesystem::temp_directory_path() / "mambacsr_cli_test";
  std::filesystem::create_directories(d);
  return d;
}

std::string write_tiny_config() {
  const auto path = tmp_dir() / "tiny.cfg";
  std::ofstream f(path);
  f << "channels=8\ngroups=1\nblocks_per_group=2\nd_state=2\nexpand=2\n"
       "mlp_ratio=2\nwindow=4\nseq_window=8\nscale=4\nscan_mode=dis\n"
       "cross_scale=true\n";
  return path.string();
}

std::string write_noise_ppm(const std::string& name, int h, int w,
                            uint64_t seed) {
  using namespace mambacsr;
  ImageU8 img = make_image(h, w);
  uint64_t s = seed;
  for (auto& v : img.data) {
    s = s * 6364136223846793005ULL + 1442695040888963407ULL;
    v = static_cast<uint8_t>(s >> 56);
  }
  const auto path = (tmp_dir() / name).string();
  write_ppm(path, img);
  return path;
}

int count_lines(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  int n = 0;
  std::string line;
  while (std::getline(f, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("traj hseq 2x2 visits 0,1,2,3") {
  const auto out = (tmp_dir() / "hseq.csv").string();
  const RunResult r =
      run_cli("traj --height 2 --width 2 --mode hseq --out " + out);
  CHECK(r.exit_code == 0);
  std::ifstream f(out);
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,row,col,flat_index");
  std::vector<std::string> expected{"0,0,0,0", "1,0,1,1", "2,1,0,2", "3,1,1,3"};
  for (const auto& e : expected) {
    std::getline(f, line);
    CHECK(line == e);
  }
}

TEST_CASE("traj cross 4x4 emits 20 tagged rows") {
  const auto out = (tmp_dir() / "cross.csv").string();
  const RunResult r =
      run_cli("traj --height 4 --width 4 --mode cross --out " + out);
  CHECK(r.exit_code == 0);
  CHECK(count_lines(out) == 21);  // header + 20
  std::ifstream f(out);
  std::string all((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  int downs = 0;
  size_t pos = 0;
  while ((pos = all.find(",down,", pos)) != std::string::npos) {
    ++downs;
    pos += 6;
  }
  CHECK(downs == 4);
}

TEST_CASE("traj rejects an unknown mode with usage text") {
  const RunResult r = run_cli("traj --height 2 --width 2 --mode zigzag --out x.csv");
  CHECK(r.exit_code != 0);
  CHECK(r.output.find("hseq") != std::string::npos);
}

TEST_CASE("traj writes a step heatmap when asked") {
  const auto out = (tmp_dir() / "h.csv").string();
  const auto pgm = (tmp_dir() / "h.pgm").string();
  const RunResult r = run_cli("traj --height 4 --width 4 --mode vwin --window 2 --out " +
                              out + " --heatmap " + pgm);
  CHECK(r.exit_code == 0);
  const mambacsr::GrayU8 g = mambacsr::read_pgm(pgm);
  CHECK(g.height == 4);
  CHECK(g.width == 4);
  CHECK(g.data[0] == 0);
}

TEST_CASE("metrics on identical files prints the cap values") {
  const std::string img = write_noise_ppm("m.ppm", 16, 16, 1);
  const RunResult r = run_cli("metrics --ref " + img + " --test " + img);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("file,psnr_y_db,ssim") != std::string::npos);
  CHECK(r.output.find("100.00,1.0000") != std::string::npos);
}

TEST_CASE("degrade emits the downsampled compressed image") {
  const std::string hr = write_noise_ppm("hr.ppm", 64, 64, 2);
  const auto out = (tmp_dir() / "lr.ppm").string();
  const RunResult r = run_cli("degrade --in " + hr + " --out " + out + " --qf 20");
  CHECK(r.exit_code == 0);
  const mambacsr::ImageU8 lr = mambacsr::read_ppm(out);
  CHECK(lr.height == 16);
  CHECK(lr.width == 16);
}

TEST_CASE("degrade on a missing file exits with the I/O code") {
  const RunResult r = run_cli("degrade --in /nonexistent/x.ppm --out /tmp/y.ppm");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("error:") != std::string::npos);
}

TEST_CASE("flops prints the DIS/4dir scan ratio") {
  const RunResult r = run_cli("flops --mode dis");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("scan_ratio_dis_over_4dir 0.500") != std::string::npos);
}

TEST_CASE("gradcheck ops passes at the default eps and fails at 1e-1") {
  const RunResult ok = run_cli("gradcheck --scope ops");
  CHECK(ok.exit_code == 0);
  const RunResult coarse = run_cli("gradcheck --scope ops --eps 1e-1");
  CHECK(coarse.exit_code == 1);
}

TEST_CASE("train-toy then restore produces a 4x upscale") {
  const std::string cfg = write_tiny_config();
  const std::string hr = write_noise_ppm("train_hr.ppm", 32, 32, 3);
  const auto ckpt = (tmp_dir() / "toy.ckpt").string();
  const RunResult tr = run_cli("train-toy --hr " + hr + " --steps 2 --config " +
                               cfg + " --out " + ckpt);
  CHECK(tr.exit_code == 0);
  CHECK(tr.output.find("step 0 loss") != std::string::npos);

  const std::string lr = write_noise_ppm("restore_in.ppm", 16, 16, 4);
  const auto sr = (tmp_dir() / "restore_out.ppm").string();
  const RunResult rs = run_cli("restore --model " + ckpt + " --config " + cfg +
                               " --in " + lr + " --out " + sr);
  CHECK(rs.exit_code == 0);
  const mambacsr::ImageU8 img = mambacsr::read_ppm(sr);
  CHECK(img.height == 64);
  CHECK(img.width == 64);
}

TEST_CASE("erf writes a normalized heatmap pgm") {
  const std::string cfg = write_tiny_config();
  const auto out = (tmp_dir() / "erf.pgm").string();
  const RunResult r = run_cli("erf --config " + cfg + " --size 16 --out " + out);
  CHECK(r.exit_code == 0);
  const mambacsr::GrayU8 g = mambacsr::read_pgm(out);
  CHECK(g.height == 16);
  CHECK(g.width == 16);
}

TEST_CASE("decay exports the contribution profile") {
  const auto out = (tmp_dir() / "decay.csv").string();
  const RunResult r = run_cli("decay --len 8 --dinner 2 --dstate 2 --p 1 --out " + out);
  CHECK(r.exit_code == 0);
  CHECK(count_lines(out) == 1 + 2 * 7);
}

TEST_CASE("unknown flags are errors") {
  const RunResult r = run_cli("flops --does-not-exist 1");
  CHECK(r.exit_code != 0);
}
