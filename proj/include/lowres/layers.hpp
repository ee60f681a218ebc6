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

// Transformer building blocks shared by the TTS and ASR models. Layers use
// pre-normalization residual blocks; the feed-forward sublayer is a two-layer
// 1-D convolution (kernel 9 then kernel 1 by default).

#pragma once

#include "lowres/ops.hpp"
#include "lowres/optim.hpp"

#include <random>
#include <string>
#include <vector>

namespace lowres {

using Rng = std::mt19937_64;

/// Per-call forward settings.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
  double dropout = 0.0;

  template <typename Scalar>
  Tensor<Scalar> drop(const Tensor<Scalar>& x, double p) const {
    if (!training || p <= 0) return x;
    require(rng != nullptr, "ForwardContext: dropout needs an RNG");
    return lowres::dropout(x, static_cast<Scalar>(p), *rng);
  }
  template <typename Scalar>
  Tensor<Scalar> drop(const Tensor<Scalar>& x) const {
    return drop(x, dropout);
  }
};

template <typename Scalar>
Mat<Scalar> uniform_matrix(Index rows, Index cols, double limit, Rng& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  Mat<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

template <typename Scalar>
Tensor<Scalar> xavier(Index fan_in, Index fan_out, Shape shape, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  const Index cols = shape.back();
  Mat<Scalar> values = uniform_matrix<Scalar>(shape_numel(shape) / cols, cols, limit, rng);
  return Tensor<Scalar>::parameter(std::move(values), std::move(shape));
}

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;  // (in, out)
  Tensor<Scalar> bias;    // (1, out)

  Linear() = default;
  Linear(Index in, Index out, Rng& rng)
      : weight(xavier<Scalar>(in, out, {in, out}, rng)),
        bias(Tensor<Scalar>::parameter(Mat<Scalar>::Zero(1, out))) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return matmul(x, weight) + bias; }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gain;
  Tensor<Scalar> bias;

  LayerNorm() = default;
  explicit LayerNorm(Index width)
      : gain(Tensor<Scalar>::parameter(Mat<Scalar>::Ones(1, width))),
        bias(Tensor<Scalar>::parameter(Mat<Scalar>::Zero(1, width))) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layer_norm(x, gain, bias); }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
struct Conv1d {
  Tensor<Scalar> weight;  // (K, Cin, Cout)
  Tensor<Scalar> bias;
  Index kernel = 1;
  bool causal = false;

  Conv1d() = default;
  Conv1d(Index cin, Index cout, Index k, bool is_causal, Rng& rng)
      : weight(xavier<Scalar>(k * cin, cout, {k, cin, cout}, rng)),
        bias(Tensor<Scalar>::parameter(Mat<Scalar>::Zero(1, cout))),
        kernel(k),
        causal(is_causal) {}

  Conv1dGeometry geometry() const {
    Conv1dGeometry geo;
    geo.kernel = kernel;
    geo.pad_left = causal ? kernel - 1 : (kernel - 1) / 2;
    geo.pad_right = causal ? 0 : kernel - 1 - geo.pad_left;
    return geo;
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    return conv1d(x, weight, bias, geometry());
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename Scalar>
struct MultiHeadAttention {
  Linear<Scalar> query, key, value, output;
  Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(Index width, Index n_heads, Rng& rng)
      : query(width, width, rng),
        key(width, width, rng),
        value(width, width, rng),
        output(width, width, rng),
        heads(n_heads) {}

  /// Returns the projected output and the per-head attention weights.
  AttentionResult<Scalar> operator()(const Tensor<Scalar>& x, const Tensor<Scalar>& memory,
                                     bool causal) const {
    auto attended = multi_head_attention(query(x), key(memory), value(memory), heads, causal);
    return {output(attended.output), attended.weights};
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    query.collect(out, prefix + ".query");
    key.collect(out, prefix + ".key");
    value.collect(out, prefix + ".value");
    output.collect(out, prefix + ".output");
  }
};

/// Conv1d(kernel_a) -> ReLU -> Conv1d(kernel_b).
template <typename Scalar>
struct ConvFeedForward {
  Conv1d<Scalar> first, second;

  ConvFeedForward() = default;
  ConvFeedForward(Index width, Index inner, Index kernel_a, Index kernel_b, bool causal, Rng& rng)
      : first(width, inner, kernel_a, causal, rng), second(inner, width, kernel_b, causal, rng) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, const ForwardContext& ctx) const {
    return second(ctx.drop(relu(first(x))));
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    first.collect(out, prefix + ".conv1");
    second.collect(out, prefix + ".conv2");
  }
};

struct LayerShape {
  Index width = 384;
  Index heads = 4;
  Index ffn_inner = 1536;
  Index ffn_kernel_a = 9;
  Index ffn_kernel_b = 1;
};

template <typename Scalar>
struct EncoderLayer {
  LayerNorm<Scalar> attn_norm, ffn_norm;
  MultiHeadAttention<Scalar> self_attn;
  ConvFeedForward<Scalar> ffn;

  EncoderLayer() = default;
  EncoderLayer(const LayerShape& s, Rng& rng)
      : attn_norm(s.width),
        ffn_norm(s.width),
        self_attn(s.width, s.heads, rng),
        ffn(s.width, s.ffn_inner, s.ffn_kernel_a, s.ffn_kernel_b, false, rng) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, const ForwardContext& ctx) const {
    auto normed = attn_norm(x);
    auto h = x + ctx.drop(self_attn(normed, normed, false).output);
    return h + ctx.drop(ffn(ffn_norm(h), ctx));
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    attn_norm.collect(out, prefix + ".attn_norm");
    self_attn.collect(out, prefix + ".self_attn");
    ffn_norm.collect(out, prefix + ".ffn_norm");
    ffn.collect(out, prefix + ".ffn");
  }
};

template <typename Scalar>
struct DecoderLayerOutput {
  Tensor<Scalar> hidden;
  std::shared_ptr<const std::vector<Mat<Scalar>>> cross_weights;
};

/// Causal self-attention, encoder-decoder attention, causal conv feed-forward.
template <typename Scalar>
struct DecoderLayer {
  LayerNorm<Scalar> self_norm, cross_norm, ffn_norm;
  MultiHeadAttention<Scalar> self_attn, cross_attn;
  ConvFeedForward<Scalar> ffn;

  DecoderLayer() = default;
  DecoderLayer(const LayerShape& s, Rng& rng)
      : self_norm(s.width),
        cross_norm(s.width),
        ffn_norm(s.width),
        self_attn(s.width, s.heads, rng),
        cross_attn(s.width, s.heads, rng),
        ffn(s.width, s.ffn_inner, s.ffn_kernel_a, s.ffn_kernel_b, true, rng) {}

  DecoderLayerOutput<Scalar> operator()(const Tensor<Scalar>& x, const Tensor<Scalar>& memory,
                                        const ForwardContext& ctx) const {
    auto normed = self_norm(x);
    auto h = x + ctx.drop(self_attn(normed, normed, true).output);
    auto cross = cross_attn(cross_norm(h), memory, false);
    h = h + ctx.drop(cross.output);
    h = h + ctx.drop(ffn(ffn_norm(h), ctx));
    return {h, cross.weights};
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    self_norm.collect(out, prefix + ".self_norm");
    self_attn.collect(out, prefix + ".self_attn");
    cross_norm.collect(out, prefix + ".cross_norm");
    cross_attn.collect(out, prefix + ".cross_attn");
    ffn_norm.collect(out, prefix + ".ffn_norm");
    ffn.collect(out, prefix + ".ffn");
  }
};

/// Per layer, per head encoder-decoder attention: [layer][head] -> (S x T).
template <typename Scalar>
using AttentionStacks = std::vector<std::vector<Mat<Scalar>>>;

}  // namespace lowres
