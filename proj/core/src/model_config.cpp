#include <cmath>
#include <fstream>
#include <sstream>

#include "mambacsr/errors.hpp"
#include "mambacsr/model.hpp"

namespace mambacsr {

int ModelConfig::d_inner() const {
  return static_cast<int>(std::lround(expand * channels));
}

void ModelConfig::validate() const {
  if (channels < 1 || groups < 1 || blocks_per_group < 1 || d_state < 1) {
    throw InvariantError("model config: channels/groups/blocks/d_state must be >= 1");
  }
  if (expand <= 0.0 || mlp_ratio <= 0.0) {
    throw InvariantError("model config: expand and mlp_ratio must be positive");
  }
  if (window < 1 || seq_window < 1) {
    throw InvariantError("model config: window sizes must be >= 1");
  }
  if (scale != 2 && scale != 4) {
    throw InvariantError("model config: scale must be 2 or 4, got " +
                         std::to_string(scale));
  }
  if (d_inner() < 1) {
    throw InvariantError("model config: expand * channels rounds to zero");
  }
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError("config: bad boolean '" + v + "' for key " + key);
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

ModelConfig parse_model_config_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(lineno) +
                       ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "channels") {
        cfg.channels = std::stoi(value);
      } else if (key == "groups") {
        cfg.groups = std::stoi(value);
      } else if (key == "blocks_per_group") {
        cfg.blocks_per_group = std::stoi(value);
      } else if (key == "d_state") {
        cfg.d_state = std::stoi(value);
      } else if (key == "expand") {
        cfg.expand = std::stod(value);
      } else if (key == "mlp_ratio") {
        cfg.mlp_ratio = std::stod(value);
      } else if (key == "window") {
        cfg.window = std::stoi(value);
      } else if (key == "seq_window") {
        cfg.seq_window = std::stoi(value);
      } else if (key == "scale") {
        cfg.scale = std::stoi(value);
      } else if (key == "scan_mode") {
        if (value == "dis") {
          cfg.scan_mode = ScanMode::Dis;
        } else if (value == "4dir") {
          cfg.scan_mode = ScanMode::FourDir;
        } else {
          throw ParseError("config: scan_mode must be dis or 4dir, got '" +
                           value + "'");
        }
      } else if (key == "cross_scale") {
        cfg.cross_scale = parse_bool(value, key);
      } else {
        throw ParseError("config line " + std::to_string(lineno) +
                         ": unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw ParseError("config line " + std::to_string(lineno) +
                       ": bad value '" + value + "' for key " + key);
    }
  }
  cfg.validate();
  return cfg;
}

ModelConfig parse_model_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path + ": cannot open for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_model_config_text(std::move(ss).str());
}

namespace {

struct FlopAccum {
  FlopReport r;

  void conv(int64_t spatial, int64_t cout, int64_t cin_per_group, int64_t k) {
    r.conv += static_cast<uint64_t>(spatial) * cout * cin_per_group * k * k;
  }
  void lin(int64_t rows, int64_t out_f, int64_t in_f) {
    r.linear += static_cast<uint64_t>(rows) * out_f * in_f;
  }
  void scan(int64_t len, int64_t din, int64_t ns) {
    r.scan += static_cast<uint64_t>(len) * din * ns * FlopReport::kScanMacPerStep;
    r.scan_invocations += 1;
  }
  void extra(int64_t n) { r.extras += static_cast<uint64_t>(n); }
};

// Mirrors RlmbLayer::forward on an L-token grid.
void block_flops(FlopAccum& a, const ModelConfig& cfg, int64_t len) {
  const int64_t c = cfg.channels;
  const int64_t di = cfg.d_inner();
  const int64_t ns = cfg.d_state;
  const int64_t hidden = static_cast<int64_t>(std::lround(cfg.mlp_ratio * c));
  const int64_t cr = std::max<int64_t>(1, c / 4);
  const int ndirs = cfg.n_scan_dirs();

  a.extra(4 * len * c);  // ln1
  // SS2D
  a.lin(len, di, c);  // in_proj_x
  a.lin(len, di, c);  // in_proj_z
  a.conv(len, di, 1, 3);  // depthwise
  a.extra(len * di);  // silu
  a.lin(len, di, di);  // dt_proj
  a.extra(len * di);  // softplus
  a.lin(len, ns, di);  // b_proj
  a.lin(len, ns, di);  // c_proj
  for (int dir = 0; dir < ndirs; ++dir) {
    a.scan(len, di, ns);
    a.extra(len * di);  // D skip
  }
  a.extra((ndirs - 1) * len * di);  // direction sum
  a.extra(4 * len * di);            // out_norm
  a.extra(2 * len * di);            // gate silu + mul
  a.lin(len, c, di);                // out_proj
  // CAB
  a.conv(len, c, c, 3);
  a.extra(len * c);  // gelu
  a.conv(len, c, c, 3);
  a.extra(len * c);       // pool
  a.conv(1, cr, c, 1);    // squeeze
  a.extra(cr);            // gelu
  a.conv(1, c, cr, 1);    // excite
  a.extra(c);             // sigmoid
  a.extra(len * c);       // channel scale
  // residual combine
  a.extra(3 * len * c);  // cab + ssm + s1*x
  a.extra(4 * len * c);  // ln2
  a.lin(len, hidden, c);
  a.extra(len * hidden);  // gelu
  a.lin(len, c, hidden);
  a.extra(2 * len * c);  // s2*F_inter + mlp
}

void group_flops(FlopAccum& a, const ModelConfig& cfg, int64_t len) {
  for (int b = 0; b < cfg.blocks_per_group; ++b) block_flops(a, cfg, len);
  a.conv(len, cfg.channels, cfg.channels, 3);
  a.extra(len * cfg.channels);  // group residual
}

}  // namespace

FlopReport count_flops(const ModelConfig& cfg, int h, int w) {
  cfg.validate();
  if (h < 1 || w < 1) throw InvariantError("count_flops: extents must be >= 1");
  const int he = h + (h % 2);
  const int we = w + (w % 2);
  const int64_t len = static_cast<int64_t>(he) * we;
  const int64_t c = cfg.channels;
  FlopAccum a;

  a.conv(len, c, 3, 3);  // shallow feature extraction
  for (int g = 0; g < cfg.groups; ++g) group_flops(a, cfg, len);
  if (cfg.cross_scale) {
    const int64_t lh = len / 4;
    a.extra(3 * lh * 20);  // bicubic half-scale image
    a.conv(lh, c, 3, 3);   // cross-branch shallow conv
    group_flops(a, cfg, lh);
    block_flops(a, cfg, 5 * lh);  // fusion block on the interleaved sequence
    a.extra(len * c);             // residual add after extraction
  }
  a.conv(len, c, c, 3);  // tail conv
  a.extra(len * c);      // global residual
  const int64_t s2 = static_cast<int64_t>(cfg.scale) * cfg.scale;
  a.conv(len, c * s2, c, 3);              // reconstruction expand
  a.conv(len * s2, 3, c, 3);              // final conv at full resolution
  return a.r;
}

}  // namespace mambacsr
