#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mlcn/tensor.hpp"

namespace mlcn {

struct GradReport {
  std::vector<double> max_rel_error;  // one per input
  std::vector<double> max_abs_error;
  double tolerance = 0;
  double abs_floor = 0;
  bool pass = false;

  double worst_rel() const {
    double m = 0;
    for (double v : max_rel_error) m = std::max(m, v);
    return m;
  }
  double worst_abs() const {
    double m = 0;
    for (double v : max_abs_error) m = std::max(m, v);
    return m;
  }
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Absolute-error escape hatch for functions whose gradient is ~0 everywhere.
  double abs_floor = 1e-10;
  /// Denominators of the relative error never drop below this magnitude.
  double rel_denominator_floor = 1e-6;
};

template <std::floating_point T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) on every coordinate of every input.
template <std::floating_point T>
GradReport grad_check(const ScalarFn<T>& f, const std::vector<Tensor<T>>& inputs, const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0)) throw PreconditionError("grad_check eps must be positive");
  std::vector<Tensor<T>> params;
  params.reserve(inputs.size());
  for (const auto& t : inputs) params.push_back(t.as_parameter());
  const Tensor<T> loss = f(params);
  if (loss.size() != 1) throw PreconditionError("grad_check requires a scalar-valued function");
  const auto grads = backward(loss);

  auto eval = [&](const std::vector<Tensor<T>>& xs) {
    NoGradGuard guard;
    try {
      return static_cast<double>(f(xs).item());
    } catch (const NumericError& e) {
      throw NumericError(std::string("grad_check probe: ") + e.what());
    }
  };

  GradReport report;
  report.tolerance = opt.tolerance;
  report.abs_floor = opt.abs_floor;
  std::vector<Tensor<T>> probe(inputs.begin(), inputs.end());
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const auto analytic = grads.of(params[p]);
    std::vector<T> base(inputs[p].values().begin(), inputs[p].values().end());
    double max_rel = 0, max_abs = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto shifted = base;
      shifted[i] = base[i] + static_cast<T>(opt.eps);
      probe[p] = Tensor<T>(inputs[p].shape(), shifted);
      const double fp = eval(probe);
      shifted[i] = base[i] - static_cast<T>(opt.eps);
      probe[p] = Tensor<T>(inputs[p].shape(), shifted);
      const double fm = eval(probe);
      const double numeric = (fp - fm) / (2 * opt.eps);
      const double a = static_cast<double>(analytic[i]);
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.rel_denominator_floor});
      max_abs = std::max(max_abs, abs_err);
      max_rel = std::max(max_rel, abs_err / denom);
    }
    probe[p] = inputs[p];
    report.max_rel_error.push_back(max_rel);
    report.max_abs_error.push_back(max_abs);
  }
  report.pass = report.worst_rel() <= opt.tolerance || report.worst_abs() <= opt.abs_floor;
  return report;
}

}  // namespace mlcn
