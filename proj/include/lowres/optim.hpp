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

#pragma once

#include "lowres/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace lowres {

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
using ParameterList = std::vector<NamedParameter<Scalar>>;

/// Bias-corrected Adam state; moments are indexed like the parameter list
/// they were created for.
template <typename Scalar>
struct AdamState {
  std::int64_t step = 0;
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.98);
  Scalar epsilon = Scalar(1e-9);
  std::vector<Mat<Scalar>> first_moment;
  std::vector<Mat<Scalar>> second_moment;

  static AdamState for_parameters(const ParameterList<Scalar>& params) {
    AdamState state;
    for (const auto& p : params) {
      state.first_moment.push_back(Mat<Scalar>::Zero(p.tensor.rows(), p.tensor.cols()));
      state.second_moment.push_back(Mat<Scalar>::Zero(p.tensor.rows(), p.tensor.cols()));
    }
    return state;
  }
};

/// One Adam update of every parameter in `params` (in place). Parameters
/// absent from `grads` see a zero gradient; parameters whose `trainable`
/// entry is false are skipped entirely, moments included.
template <typename Scalar>
void adam_step(ParameterList<Scalar>& params, const Gradients<Scalar>& grads,
               AdamState<Scalar>& state, Scalar lr, const std::vector<bool>& trainable = {}) {
  require(lr > 0, "adam_step: learning rate must be positive");
  require(state.first_moment.size() == params.size() &&
              state.second_moment.size() == params.size(),
          "adam_step: optimizer state does not match parameter list");
  require(trainable.empty() || trainable.size() == params.size(),
          "adam_step: trainable mask does not match parameter list");
  ++state.step;
  const Scalar t = static_cast<Scalar>(state.step);
  const Scalar correction1 = Scalar(1) - std::pow(state.beta1, t);
  const Scalar correction2 = Scalar(1) - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    auto& p = params[i].tensor;
    Mat<Scalar>& m = state.first_moment[i];
    Mat<Scalar>& v = state.second_moment[i];
    require(m.rows() == p.rows() && m.cols() == p.cols(),
            "adam_step: moment shape mismatch for " + params[i].name);
    const Mat<Scalar>* g = grads.find(p);
    if (g) {
      require(g->rows() == p.rows() && g->cols() == p.cols(),
              "adam_step: gradient shape mismatch for " + params[i].name);
      m = state.beta1 * m + (Scalar(1) - state.beta1) * *g;
      v = state.beta2 * v + (Scalar(1) - state.beta2) * g->cwiseAbs2();
    } else {
      m *= state.beta1;
      v *= state.beta2;
    }
    p.mutable_value().array() -=
        lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + state.epsilon);
  }
}

/// Inverse-square-root schedule with linear warmup:
/// model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double lr_at(std::int64_t step, std::int64_t model_dim, std::int64_t warmup) {
  require(step > 0, "lr_at: step must be positive");
  require(model_dim > 0 && warmup > 0, "lr_at: model_dim and warmup must be positive");
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(model_dim), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
Scalar clip_grad_norm(Gradients<Scalar>& grads, const ParameterList<Scalar>& params,
                      Scalar max_norm) {
  Scalar total = 0;
  for (const auto& p : params)
    if (const auto* g = grads.find(p.tensor)) total += g->squaredNorm();
  const Scalar norm = std::sqrt(total);
  if (max_norm > 0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

}  // namespace lowres
