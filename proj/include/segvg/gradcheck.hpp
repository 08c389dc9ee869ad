#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "segvg/tensor.hpp"

namespace segvg {

struct GradCheckOptions {
  double step = 1e-3;        // central-difference half step
  double denom_floor = 1e-2; // below this magnitude the error is effectively absolute
  // Test hook: if >= 0, perturb this flat analytic-gradient index before
  // comparing, to prove the checker reports failures.
  long corrupt_index = -1;
  double corrupt_delta = 1e-2;
};

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  double gate = 0.0;
  bool pass = false;
};

/// Compares analytic gradients of a scalar loss against central finite
/// differences over the given parameters. `loss_fn` must rebuild the graph
/// from the parameters' current values on every call; the numeric side only
/// ever evaluates it forward (under NoGradGuard), so it is independent of the
/// backward pass it is checking.
template <typename T>
double max_grad_rel_error(const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> params,
                          const GradCheckOptions& opts = {}) {
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = loss_fn();
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());
  if (opts.corrupt_index >= 0) {
    long idx = opts.corrupt_index;
    for (auto& g : analytic) {
      if (idx < static_cast<long>(g.size())) {
        g[idx] += static_cast<T>(opts.corrupt_delta);
        break;
      }
      idx -= static_cast<long>(g.size());
    }
  }

  const T h = static_cast<T>(opts.step);
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<T>& values = params[pi].values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      T keep = values[i];
      values[i] = keep + h;
      double up = static_cast<double>(loss_fn().item());
      values[i] = keep - h;
      double down = static_cast<double>(loss_fn().item());
      values[i] = keep;
      double numeric = (up - down) / (2.0 * static_cast<double>(h));
      double a = static_cast<double>(analytic[pi][i]);
      double denom = std::max({std::fabs(a), std::fabs(numeric), opts.denom_floor});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace segvg
