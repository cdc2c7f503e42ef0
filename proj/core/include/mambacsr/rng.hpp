#pragma once

#include <cstdint>
#include <string_view>

namespace mambacsr {

/// Deterministic splittable generator. All randomness in the project flows
/// from one root seed; independent streams are derived by name so that adding
/// a consumer never perturbs the draws of another.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  /// Derive an independent child stream identified by name.
  Rng child(std::string_view name) const;

  uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (platform-independent sequence).
  double normal();
  /// Normal truncated to [-2, 2] standard deviations, then scaled.
  double trunc_normal(double stddev);
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n);

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mambacsr
