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

// Differentiable operations on Tensor. Every op computes its forward value
// eagerly and, when recording, attaches a closure that maps the output
// gradient onto its inputs.

#pragma once

#include "lowres/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace lowres {

namespace detail {

template <typename Scalar>
Shape with_last(const Shape& shape, Index last) {
  Shape out = shape;
  out.back() = last;
  return out;
}

enum class Broadcast { kSame, kRow, kScalar };

template <typename Scalar>
Broadcast broadcast_kind(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::kSame;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
  if (b.numel() == 1) return Broadcast::kScalar;
  throw ContractViolation(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) +
                          " onto " + shape_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a (..., K) times b (K, N) -> (..., N). Leading extents of `a` are folded.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(b.rank() == 2, "matmul: right operand must be 2-D, got " + shape_string(b.shape()));
  require(a.cols() == b.rows(), "matmul: inner extents differ " + shape_string(a.shape()) +
                                    " x " + shape_string(b.shape()));
  Mat<Scalar> out = a.value() * b.value();
  auto an = a.node(), bn = b.node();
  return make_result<Scalar>(std::move(out), detail::with_last<Scalar>(a.shape(), b.cols()),
                             {a, b}, [an, bn](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) grads[0]->noalias() += g * bn->value.transpose();
                               if (grads[1]) grads[1]->noalias() += an->value.transpose() * g;
                             });
}

/// a (..., K) times transpose(b) with b (N, K) -> (..., N).
template <typename Scalar>
Tensor<Scalar> matmul_transposed(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(b.rank() == 2, "matmul_transposed: right operand must be 2-D");
  require(a.cols() == b.cols(), "matmul_transposed: inner extents differ " +
                                    shape_string(a.shape()) + " x " + shape_string(b.shape()) +
                                    "^T");
  Mat<Scalar> out = a.value() * b.value().transpose();
  auto an = a.node(), bn = b.node();
  return make_result<Scalar>(std::move(out), detail::with_last<Scalar>(a.shape(), b.rows()),
                             {a, b}, [an, bn](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) grads[0]->noalias() += g * bn->value;
                               if (grads[1]) grads[1]->noalias() += g.transpose() * an->value;
                             });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  require(a.rank() == 2, "transpose: expects a 2-D tensor");
  Mat<Scalar> out = a.value().transpose();
  return make_result<Scalar>(std::move(out), Shape{a.cols(), a.rows()}, {a},
                             [](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) *grads[0] += g.transpose();
                             });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, with b equal in shape, a single row broadcast over a's rows, or a scalar.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const auto kind = detail::broadcast_kind(a, b, "add");
  Mat<Scalar> out = a.value();
  switch (kind) {
    case detail::Broadcast::kSame: out += b.value(); break;
    case detail::Broadcast::kRow: out.rowwise() += b.value().row(0); break;
    case detail::Broadcast::kScalar: out.array() += b.value()(0, 0); break;
  }
  return make_result<Scalar>(std::move(out), a.shape(), {a, b},
                             [kind](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) *grads[0] += g;
                               if (!grads[1]) return;
                               switch (kind) {
                                 case detail::Broadcast::kSame: *grads[1] += g; break;
                                 case detail::Broadcast::kRow:
                                   *grads[1] += g.colwise().sum();
                                   break;
                                 case detail::Broadcast::kScalar:
                                   (*grads[1])(0, 0) += g.sum();
                                   break;
                               }
                             });
}

/// Elementwise product with the same broadcasting rules as add().
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const auto kind = detail::broadcast_kind(a, b, "mul");
  Mat<Scalar> out = a.value();
  switch (kind) {
    case detail::Broadcast::kSame: out.array() *= b.value().array(); break;
    case detail::Broadcast::kRow:
      out.array().rowwise() *= b.value().row(0).array();
      break;
    case detail::Broadcast::kScalar: out *= b.value()(0, 0); break;
  }
  auto an = a.node(), bn = b.node();
  return make_result<Scalar>(
      std::move(out), a.shape(), {a, b}, [kind, an, bn](const Mat<Scalar>& g, auto grads) {
        const Mat<Scalar>& av = an->value;
        const Mat<Scalar>& bv = bn->value;
        switch (kind) {
          case detail::Broadcast::kSame:
            if (grads[0]) grads[0]->array() += g.array() * bv.array();
            if (grads[1]) grads[1]->array() += g.array() * av.array();
            break;
          case detail::Broadcast::kRow:
            if (grads[0]) grads[0]->array() += g.array().rowwise() * bv.row(0).array();
            if (grads[1]) *grads[1] += (g.array() * av.array()).matrix().colwise().sum();
            break;
          case detail::Broadcast::kScalar:
            if (grads[0]) *grads[0] += g * bv(0, 0);
            if (grads[1]) (*grads[1])(0, 0) += (g.array() * av.array()).sum();
            break;
        }
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  Mat<Scalar> out = a.value() * factor;
  return make_result<Scalar>(std::move(out), a.shape(), {a},
                             [factor](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) *grads[0] += g * factor;
                             });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, scale(b, Scalar(-1)));
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mul(a, b);
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  Mat<Scalar> out = a.value().cwiseMax(Scalar(0));
  auto an = a.node();
  return make_result<Scalar>(std::move(out), a.shape(), {a},
                             [an](const Mat<Scalar>& g, auto grads) {
                               if (grads[0])
                                 grads[0]->array() +=
                                     (an->value.array() > Scalar(0)).template cast<Scalar>() *
                                     g.array();
                             });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  Mat<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  auto y = std::make_shared<Mat<Scalar>>(out);
  return make_result<Scalar>(std::move(out), a.shape(), {a},
                             [y](const Mat<Scalar>& g, auto grads) {
                               if (grads[0])
                                 grads[0]->array() +=
                                     g.array() * y->array() * (Scalar(1) - y->array());
                             });
}

/// x / (1 + |x|).
template <typename Scalar>
Tensor<Scalar> softsign(const Tensor<Scalar>& a) {
  Mat<Scalar> out = (a.value().array() / (Scalar(1) + a.value().array().abs())).matrix();
  auto an = a.node();
  return make_result<Scalar>(std::move(out), a.shape(), {a},
                             [an](const Mat<Scalar>& g, auto grads) {
                               if (grads[0])
                                 grads[0]->array() +=
                                     g.array() / (Scalar(1) + an->value.array().abs()).square();
                             });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p). Identity when p == 0.
template <typename Scalar, typename Rng>
Tensor<Scalar> dropout(const Tensor<Scalar>& a, Scalar p, Rng& rng) {
  require(p >= 0 && p < 1, "dropout: probability must lie in [0, 1)");
  if (p == Scalar(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  auto mask = std::make_shared<Mat<Scalar>>(a.rows(), a.cols());
  const Scalar kept = Scalar(1) / (Scalar(1) - p);
  for (Index i = 0; i < mask->size(); ++i) mask->data()[i] = keep(rng) ? kept : Scalar(0);
  Mat<Scalar> out = (a.value().array() * mask->array()).matrix();
  return make_result<Scalar>(std::move(out), a.shape(), {a},
                             [mask](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) grads[0]->array() += g.array() * mask->array();
                             });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last dimension.
template <typename Scalar>
Mat<Scalar> softmax_rows(const Mat<Scalar>& x) {
  Mat<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a) {
  Mat<Scalar> out = softmax_rows(a.value());
  auto y = std::make_shared<Mat<Scalar>>(out);
  return make_result<Scalar>(std::move(out), a.shape(), {a},
                             [y](const Mat<Scalar>& g, auto grads) {
                               if (!grads[0]) return;
                               const auto dot = (g.array() * y->array()).rowwise().sum().eval();
                               grads[0]->array() +=
                                   y->array() * (g.array().colwise() - dot.col(0));
                             });
}

/// Normalizes each row to zero mean and unit variance, then applies the
/// learned gain and bias (both 1 x C).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  require(gain.numel() == x.cols() && bias.numel() == x.cols(),
          "layer_norm: gain/bias width must equal " + std::to_string(x.cols()));
  const Index n = x.cols();
  auto xhat = std::make_shared<Mat<Scalar>>(x.rows(), n);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.value().row(r).mean();
    auto centered = (x.value().row(r).array() - mean).eval();
    const Scalar var = centered.square().mean();
    (*inv_std)(r) = Scalar(1) / std::sqrt(var + eps);
    xhat->row(r) = (centered * (*inv_std)(r)).matrix();
  }
  Mat<Scalar> out = xhat->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  auto gn = gain.node();
  return make_result<Scalar>(
      std::move(out), x.shape(), {x, gain, bias},
      [xhat, inv_std, gn, n](const Mat<Scalar>& g, auto grads) {
        if (grads[1]) *grads[1] += (g.array() * xhat->array()).matrix().colwise().sum();
        if (grads[2]) *grads[2] += g.colwise().sum();
        if (!grads[0]) return;
        Mat<Scalar> gx = g.array().rowwise() * gn->value.row(0).array();
        for (Index r = 0; r < gx.rows(); ++r) {
          const Scalar mean_g = gx.row(r).mean();
          const Scalar mean_gx = (gx.row(r).array() * xhat->row(r).array()).mean();
          grads[0]->row(r).array() +=
              (*inv_std)(r) *
              (gx.row(r).array() - mean_g - xhat->row(r).array() * mean_gx);
        }
        (void)n;
      });
}

// ---------------------------------------------------------------------------
// Indexing and structure

/// Rows of `table` selected by `ids`: (ids.size(), table.cols()).
template <typename Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& table, const std::vector<int>& ids) {
  require(!ids.empty(), "embedding: empty id list");
  Mat<Scalar> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < table.rows(),
            "embedding: id " + std::to_string(ids[i]) + " outside table of " +
                std::to_string(table.rows()) + " rows");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  return make_result<Scalar>(std::move(out), Shape{static_cast<Index>(ids.size()), table.cols()},
                             {table}, [ids](const Mat<Scalar>& g, auto grads) {
                               if (!grads[0]) return;
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 grads[0]->row(ids[i]) += g.row(static_cast<Index>(i));
                             });
}

/// Concatenation along the last dimension; all parts share the row count.
template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts.front().rows(), "concat_cols: row counts differ");
    total += p.cols();
  }
  Mat<Scalar> out(parts.front().rows(), total);
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offsets.push_back(offset);
    offset += p.cols();
  }
  Shape shape = detail::with_last<Scalar>(parts.front().shape(), total);
  return make_result<Scalar>(std::move(out), std::move(shape), parts,
                             [offsets](const Mat<Scalar>& g, auto grads) {
                               for (std::size_t i = 0; i < grads.size(); ++i)
                                 if (grads[i])
                                   *grads[i] += g.middleCols(offsets[i], grads[i]->cols());
                             });
}

/// Concatenation along the (folded) leading dimension.
template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    require(p.cols() == parts.front().cols(), "concat_rows: column counts differ");
    total += p.rows();
  }
  Mat<Scalar> out(total, parts.front().cols());
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offsets.push_back(offset);
    offset += p.rows();
  }
  return make_result<Scalar>(std::move(out), Shape{total, parts.front().cols()}, parts,
                             [offsets](const Mat<Scalar>& g, auto grads) {
                               for (std::size_t i = 0; i < grads.size(); ++i)
                                 if (grads[i])
                                   *grads[i] += g.middleRows(offsets[i], grads[i]->rows());
                             });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, Index start, Index count) {
  require(start >= 0 && count > 0 && start + count <= a.rows(), "slice_rows: out of range");
  Mat<Scalar> out = a.value().middleRows(start, count);
  return make_result<Scalar>(std::move(out), Shape{count, a.cols()}, {a},
                             [start, count](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) grads[0]->middleRows(start, count) += g;
                             });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, Index start, Index count) {
  require(start >= 0 && count > 0 && start + count <= a.cols(), "slice_cols: out of range");
  Mat<Scalar> out = a.value().middleCols(start, count);
  return make_result<Scalar>(std::move(out), detail::with_last<Scalar>(a.shape(), count), {a},
                             [start, count](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) grads[0]->middleCols(start, count) += g;
                             });
}

/// Repeats a single row `n` times.
template <typename Scalar>
Tensor<Scalar> repeat_row(const Tensor<Scalar>& row, Index n) {
  require(row.rows() == 1 && n > 0, "repeat_row: expects one row and n > 0");
  Mat<Scalar> out = row.value().replicate(n, 1);
  return make_result<Scalar>(std::move(out), Shape{n, row.cols()}, {row},
                             [](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) *grads[0] += g.colwise().sum();
                             });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Mat<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result<Scalar>(std::move(out), Shape{1}, {a},
                             [](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) grads[0]->array() += g(0, 0);
                             });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.numel()));
}

/// Mean of squared differences against a constant target.
template <typename Scalar>
Tensor<Scalar> mse_loss(const Tensor<Scalar>& pred, const Mat<Scalar>& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(),
          "mse_loss: prediction and target shapes differ");
  auto diff = std::make_shared<Mat<Scalar>>(pred.value() - target);
  const Scalar n = static_cast<Scalar>(diff->size());
  Mat<Scalar> out(1, 1);
  out(0, 0) = diff->squaredNorm() / n;
  return make_result<Scalar>(std::move(out), Shape{1}, {pred},
                             [diff, n](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) *grads[0] += (Scalar(2) * g(0, 0) / n) * *diff;
                             });
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& targets) {
  require(static_cast<Index>(targets.size()) == logits.rows(),
          "cross_entropy: one target per row required");
  auto probs = std::make_shared<Mat<Scalar>>(softmax_rows(logits.value()));
  Scalar total = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    require(t >= 0 && t < logits.cols(), "cross_entropy: target outside vocabulary");
    const Scalar m = logits.value().row(r).maxCoeff();
    const Scalar lse = m + std::log((logits.value().row(r).array() - m).exp().sum());
    total += lse - logits.value()(r, t);
  }
  const Scalar n = static_cast<Scalar>(logits.rows());
  Mat<Scalar> out(1, 1);
  out(0, 0) = total / n;
  return make_result<Scalar>(std::move(out), Shape{1}, {logits},
                             [probs, targets, n](const Mat<Scalar>& g, auto grads) {
                               if (!grads[0]) return;
                               Mat<Scalar> d = *probs;
                               for (std::size_t r = 0; r < targets.size(); ++r)
                                 d(static_cast<Index>(r), targets[r]) -= Scalar(1);
                               *grads[0] += (g(0, 0) / n) * d;
                             });
}

/// Binary cross-entropy of sigmoid(logits) against 0/1 targets, averaged
/// over elements. Optional per-element weights are renormalized to mean 1.
template <typename Scalar>
Tensor<Scalar> binary_cross_entropy_with_logits(const Tensor<Scalar>& logits,
                                                const Mat<Scalar>& targets,
                                                const Mat<Scalar>& weights = Mat<Scalar>()) {
  require(logits.rows() == targets.rows() && logits.cols() == targets.cols(),
          "binary_cross_entropy: shapes differ");
  const auto& z = logits.value();
  const Scalar n = static_cast<Scalar>(z.size());
  Mat<Scalar> w = Mat<Scalar>::Ones(z.rows(), z.cols());
  if (weights.size() != 0) {
    require(weights.rows() == z.rows() && weights.cols() == z.cols(),
            "binary_cross_entropy: weight shape differs");
    w = weights * (n / weights.sum());
  }
  // max(z,0) - z*t + log(1 + exp(-|z|))
  const Scalar total = (w.array() * (z.array().max(Scalar(0)) - z.array() * targets.array() +
                                     (Scalar(1) + (-z.array().abs()).exp()).log()))
                           .sum();
  auto residual = std::make_shared<Mat<Scalar>>(
      (w.array() * ((Scalar(1) / (Scalar(1) + (-z.array()).exp())) - targets.array())).matrix());
  Mat<Scalar> out(1, 1);
  out(0, 0) = total / n;
  return make_result<Scalar>(std::move(out), Shape{1}, {logits},
                             [residual, n](const Mat<Scalar>& g, auto grads) {
                               if (grads[0]) *grads[0] += (g(0, 0) / n) * *residual;
                             });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv1dGeometry {
  Index kernel = 1;
  Index stride = 1;
  Index pad_left = 0;
  Index pad_right = 0;

  Index output_length(Index length) const {
    return (length + pad_left + pad_right - kernel) / stride + 1;
  }
};

/// 1-D convolution over time. x: (L, Cin); weight: (K, Cin, Cout) stored as
/// (K*Cin) x Cout; bias: (1, Cout). Output: (Lout, Cout).
template <typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, Conv1dGeometry geo) {
  const Index length = x.rows(), cin = x.cols();
  require(weight.rows() == geo.kernel * cin, "conv1d: weight rows must equal kernel*Cin");
  require(bias.numel() == weight.cols(), "conv1d: bias width must equal Cout");
  const Index lout = geo.output_length(length);
  require(lout > 0, "conv1d: input shorter than kernel");
  auto cols = std::make_shared<Mat<Scalar>>(Mat<Scalar>::Zero(lout, geo.kernel * cin));
  for (Index o = 0; o < lout; ++o)
    for (Index k = 0; k < geo.kernel; ++k) {
      const Index t = o * geo.stride + k - geo.pad_left;
      if (t >= 0 && t < length) cols->block(o, k * cin, 1, cin) = x.value().row(t);
    }
  Mat<Scalar> out = *cols * weight.value();
  out.rowwise() += bias.value().row(0);
  auto wn = weight.node();
  return make_result<Scalar>(
      std::move(out), Shape{lout, weight.cols()}, {x, weight, bias},
      [cols, wn, geo, length, cin, lout](const Mat<Scalar>& g, auto grads) {
        if (grads[1]) grads[1]->noalias() += cols->transpose() * g;
        if (grads[2]) *grads[2] += g.colwise().sum();
        if (!grads[0]) return;
        const Mat<Scalar> dcols = g * wn->value.transpose();
        for (Index o = 0; o < lout; ++o)
          for (Index k = 0; k < geo.kernel; ++k) {
            const Index t = o * geo.stride + k - geo.pad_left;
            if (t >= 0 && t < length) grads[0]->row(t) += dcols.block(o, k * cin, 1, cin);
          }
      });
}

struct Conv2dGeometry {
  Index kernel = 3;
  Index stride = 1;
  Index pad = 1;

  Index output_extent(Index extent) const { return (extent + 2 * pad - kernel) / stride + 1; }
};

/// 2-D convolution on channels-last images. x: (H, W, Cin); weight:
/// (K, K, Cin, Cout) stored as (K*K*Cin) x Cout; bias (1, Cout).
/// Output: (Hout, Wout, Cout). With the channels-last layout a reshape to
/// (Hout, Wout*Cout) yields a time-major feature sequence directly.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, Conv2dGeometry geo) {
  require(x.rank() == 3, "conv2d: input must be (H, W, Cin), got " + shape_string(x.shape()));
  const Index h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const Index k = geo.kernel;
  require(weight.rows() == k * k * cin, "conv2d: weight rows must equal K*K*Cin");
  require(bias.numel() == weight.cols(), "conv2d: bias width must equal Cout");
  const Index ho = geo.output_extent(h), wo = geo.output_extent(w);
  require(ho > 0 && wo > 0, "conv2d: input smaller than kernel");
  auto cols = std::make_shared<Mat<Scalar>>(Mat<Scalar>::Zero(ho * wo, k * k * cin));
  const Mat<Scalar>& xv = x.value();  // rows = h*w, cols = cin
  for (Index oy = 0; oy < ho; ++oy)
    for (Index ox = 0; ox < wo; ++ox) {
      const Index row = oy * wo + ox;
      for (Index ky = 0; ky < k; ++ky) {
        const Index iy = oy * geo.stride + ky - geo.pad;
        if (iy < 0 || iy >= h) continue;
        for (Index kx = 0; kx < k; ++kx) {
          const Index ix = ox * geo.stride + kx - geo.pad;
          if (ix < 0 || ix >= w) continue;
          cols->block(row, (ky * k + kx) * cin, 1, cin) = xv.row(iy * w + ix);
        }
      }
    }
  Mat<Scalar> out = *cols * weight.value();
  out.rowwise() += bias.value().row(0);
  auto wn = weight.node();
  return make_result<Scalar>(
      std::move(out), Shape{ho, wo, weight.cols()}, {x, weight, bias},
      [cols, wn, geo, h, w, cin, ho, wo, k](const Mat<Scalar>& g, auto grads) {
        if (grads[1]) grads[1]->noalias() += cols->transpose() * g;
        if (grads[2]) *grads[2] += g.colwise().sum();
        if (!grads[0]) return;
        const Mat<Scalar> dcols = g * wn->value.transpose();
        for (Index oy = 0; oy < ho; ++oy)
          for (Index ox = 0; ox < wo; ++ox) {
            const Index row = oy * wo + ox;
            for (Index ky = 0; ky < k; ++ky) {
              const Index iy = oy * geo.stride + ky - geo.pad;
              if (iy < 0 || iy >= h) continue;
              for (Index kx = 0; kx < k; ++kx) {
                const Index ix = ox * geo.stride + kx - geo.pad;
                if (ix < 0 || ix >= w) continue;
                grads[0]->row(iy * w + ix) += dcols.block(row, (ky * k + kx) * cin, 1, cin);
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Attention

template <typename Scalar>
struct AttentionResult {
  Tensor<Scalar> output;
  /// One (Lq x Lk) row-stochastic matrix per head.
  std::shared_ptr<const std::vector<Mat<Scalar>>> weights;
};

/// Scaled dot-product attention split over `heads` column groups.
/// q: (Lq, D), k and v: (Lk, D). With `causal`, query i sees keys
/// j <= i + (Lk - Lq), which also covers cached-prefix decoding.
template <typename Scalar>
AttentionResult<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                             const Tensor<Scalar>& v, Index heads, bool causal) {
  const Index lq = q.rows(), lk = k.rows(), d = q.cols();
  require(k.cols() == d && v.cols() == d && v.rows() == lk, "attention: q/k/v shapes differ");
  require(heads > 0 && d % heads == 0, "attention: width not divisible by head count");
  const Index dh = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Index offset = lk - lq;
  auto weights = std::make_shared<std::vector<Mat<Scalar>>>();
  weights->reserve(static_cast<std::size_t>(heads));
  Mat<Scalar> out(lq, d);
  for (Index h = 0; h < heads; ++h) {
    Mat<Scalar> scores = (q.value().middleCols(h * dh, dh) *
                          k.value().middleCols(h * dh, dh).transpose()) *
                         inv_sqrt;
    if (causal)
      for (Index i = 0; i < lq; ++i)
        for (Index j = std::max<Index>(0, i + offset + 1); j < lk; ++j)
          scores(i, j) = -std::numeric_limits<Scalar>::infinity();
    weights->push_back(softmax_rows(scores));
    out.middleCols(h * dh, dh).noalias() = weights->back() * v.value().middleCols(h * dh, dh);
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  Tensor<Scalar> output = make_result<Scalar>(
      std::move(out), q.shape(), {q, k, v},
      [weights, qn, kn, vn, heads, dh, inv_sqrt](const Mat<Scalar>& g, auto grads) {
        for (Index h = 0; h < heads; ++h) {
          const Mat<Scalar>& p = (*weights)[static_cast<std::size_t>(h)];
          const auto go = g.middleCols(h * dh, dh);
          if (grads[2]) grads[2]->middleCols(h * dh, dh).noalias() += p.transpose() * go;
          if (!grads[0] && !grads[1]) continue;
          Mat<Scalar> dp = go * vn->value.middleCols(h * dh, dh).transpose();
          const auto dot = (dp.array() * p.array()).rowwise().sum().eval();
          Mat<Scalar> ds = (p.array() * (dp.array().colwise() - dot.col(0))).matrix() * inv_sqrt;
          if (grads[0])
            grads[0]->middleCols(h * dh, dh).noalias() += ds * kn->value.middleCols(h * dh, dh);
          if (grads[1])
            grads[1]->middleCols(h * dh, dh).noalias() +=
                ds.transpose() * qn->value.middleCols(h * dh, dh);
        }
      });
  return {std::move(output), std::move(weights)};
}

// ---------------------------------------------------------------------------

/// Sinusoidal position table: (length, width), starting at position `start`.
template <typename Scalar>
Mat<Scalar> sinusoid_positions(Index length, Index width, Index start = 0) {
  Mat<Scalar> table(length, width);
  for (Index pos = 0; pos < length; ++pos)
    for (Index i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
      const double angle = static_cast<double>(pos + start) * rate;
      table(pos, i) = static_cast<Scalar>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return table;
}

}  // namespace lowres
