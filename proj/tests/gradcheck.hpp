// Copyright 2026 The lowres-speech Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Central finite-difference oracle for reverse-mode gradients. Test-only.

#pragma once

#include "lowres/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace lowres::testing {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst;  // "<param>[<index>]"
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). With floor = 1 this is relative for
/// gradients of magnitude >= 1 and absolute below, which keeps the h^2
/// truncation error of central differences from dominating tiny entries.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() of `loss_fn` against central differences for every
/// element of every tensor in `params` (or at most `max_per_param`
/// evenly-strided elements of each).
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<std::pair<std::string, Tensor<double>>> params,
                                  double h = 1e-3, double floor = 1.0,
                                  Index max_per_param = 0) {
  GradCheckReport report;
  const auto grads = backward(loss_fn());
  for (auto& [name, p] : params) {
    const Mat<double> analytic = grads.get(p);
    const Index n = p.numel();
    const Index stride = (max_per_param > 0 && n > max_per_param) ? n / max_per_param : 1;
    for (Index i = 0; i < n; i += stride) {
      double& x = p.mutable_value().data()[i];
      const double saved = x;
      x = saved + h;
      const double up = loss_fn().item();
      x = saved - h;
      const double down = loss_fn().item();
      x = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(analytic.data()[i], numeric, floor);
      ++report.checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst = name + "[" + std::to_string(i) + "] analytic=" +
                       std::to_string(analytic.data()[i]) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return report;
}

}  // namespace lowres::testing
