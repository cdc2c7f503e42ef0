#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mambacsr {

/// Named central-finite-difference checks, each returning the max relative
/// error |g_analytic - g_fd| / max(1, |g_fd|) over the checked elements.
using GradcheckResults = std::vector<std::pair<std::string, double>>;

/// One check per differentiable tensor op (f64).
GradcheckResults gradcheck_ops(uint64_t seed, double eps);

/// Selective-scan backward against finite differences on each of
/// u, delta, B, C, A_log, D (f64, both discretization forms).
GradcheckResults gradcheck_scan(uint64_t seed, double eps);

/// Full tiny model (C=4, d_state=2, 1 group x 2 blocks, 8x8 input, f64):
/// weighted-sum readout, finite differences on sampled parameter components
/// plus input components.
GradcheckResults gradcheck_model(uint64_t seed, double eps,
                                 int samples_per_tensor = 2);

inline constexpr double kOpsGradTol = 1e-5;
inline constexpr double kScanGradTol = 1e-5;
inline constexpr double kModelGradTol = 1e-4;

}  // namespace mambacsr
