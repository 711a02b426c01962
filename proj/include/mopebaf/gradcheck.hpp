#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mopebaf/errors.hpp"
#include "mopebaf/tensor.hpp"

namespace mopebaf {

/// A parameter tensor with its registry name.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decay = true;  // subject to weight decay
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares tape gradients of the scalar `f` against central differences
/// (f(p+h) - f(p-h)) / 2h, coordinate by coordinate, over every tensor in
/// `params`. `f` is evaluated once under a tape and then 2N times without.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                         std::span<NamedTensor> params, double h = 1e-4) {
  auto eval = [&]() {
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: objective is not finite");
    return v;
  };

  for (NamedTensor& p : params) p.tensor.clear_grad();
  {
    GradTape tape;
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: objective is not finite");
    tape.backward(loss);
  }

  GradCheckReport report;
  for (NamedTensor& p : params) {
    std::vector<double> analytic(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) {
      auto g = p.tensor.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto data = p.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = eval();
      data[i] = saved - h;
      const double down = eval();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++report.coordinates;
      if (report.worst_param.empty() || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p.name;
        report.worst_index = i;
        report.worst_analytic = analytic[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace mopebaf
