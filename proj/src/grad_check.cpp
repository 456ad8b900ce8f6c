#include "poolbert/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "poolbert/error.hpp"
#include "poolbert/rng.hpp"

namespace poolbert {

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                           const GradCheckOptions& options) {
  for (Tensor& p : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: parameter does not require grad");
    p.clear_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }

  GradCheckResult result;
  Rng rng(options.seed);
  NoTapeScope no_record;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = params[t];
    const std::size_t n = p.numel();
    std::vector<real> analytic(n, real(0.0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.max_coordinates_per_tensor) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(options.max_coordinates_per_tensor);
      std::sort(coords.begin(), coords.end());
    }

    std::span<real> values = p.mutable_data();
    for (std::size_t idx : coords) {
      const real original = values[idx];
      const real plus = original + options.eps;
      const real minus = original - options.eps;
      values[idx] = plus;
      const double loss_plus = loss_fn().item();
      values[idx] = minus;
      const double loss_minus = loss_fn().item();
      values[idx] = original;
      // Divide by the step actually representable in real.
      const double numeric = (loss_plus - loss_minus) / (double(plus) - double(minus));
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates_checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_tensor = t;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace poolbert
