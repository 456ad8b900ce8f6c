#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "poolbert/tensor.hpp"

namespace poolbert {

struct GradCheckOptions {
  real eps = real(1e-3);
  std::size_t max_coordinates_per_tensor = 256;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  // Location of the worst coordinate, for diagnostics.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares tape gradients against central differences.
//
// `loss_fn` must build a scalar loss from `params` deterministically (no
// dropout). For each tensor up to max_coordinates_per_tensor coordinates are
// sampled; the error per coordinate is
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                           const GradCheckOptions& options = {});

}  // namespace poolbert
