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

// Sequence-to-sequence TTS and ASR models built from the layers in
// layers.hpp. Both are templated on the scalar type so gradient checks can
// run in double precision while training runs in float.

#pragma once

#include "lowres/layers.hpp"

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace lowres {

/// Architecture sizes shared by both models. Defaults are the full-size
/// configuration; the toy pipeline shrinks them.
struct ModelDims {
  Index hidden = 384;
  Index heads = 4;
  Index encoder_layers = 6;
  Index decoder_layers = 6;
  Index ffn_inner = 1536;
  Index ffn_kernel = 9;
  Index n_mels = 80;
  Index prenet_hidden = 64;
  double prenet_dropout = 0.5;
  bool prenet_dropout_at_inference = false;
  double dropout = 0.1;
  Index asr_filters = 256;
  bool share_speaker_module = false;
  double stop_positive_weight = 5.0;

  LayerShape layer_shape() const {
    return LayerShape{hidden, heads, ffn_inner, ffn_kernel, 1};
  }
};

/// Reserved vocabulary ids shared by every Vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

/// Uniform initialization used for embedding tables.
inline constexpr double kEmbeddingInitLimit = 0.1;

/// Lookup -> linear -> softsign, broadcast-concatenated with every hidden
/// row, then projected back to the hidden width.
template <typename Scalar>
struct SpeakerModule {
  Linear<Scalar> embed_proj;
  Linear<Scalar> merge;

  SpeakerModule() = default;
  SpeakerModule(Index hidden, Rng& rng) : embed_proj(hidden, hidden, rng), merge(2 * hidden, hidden, rng) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& hidden, const Tensor<Scalar>& speaker_row) const {
    auto code = softsign(embed_proj(speaker_row));
    return merge(concat_cols<Scalar>({hidden, repeat_row(code, hidden.rows())}));
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const {
    embed_proj.collect(out, prefix + ".embed_proj");
    merge.collect(out, prefix + ".merge");
  }
};

template <typename Scalar>
struct TtsOutput {
  Tensor<Scalar> mel;          // (S, n_mels)
  Tensor<Scalar> stop_logits;  // (S, 1)
  AttentionStacks<Scalar> attention;
};

template <typename Scalar>
struct TtsInference {
  Mat<Scalar> mel;        // (S, n_mels)
  Mat<Scalar> attention;  // (S, T), mean over layers and heads
  AttentionStacks<Scalar> stacks;
  bool hit_max_frames = false;
};

/// Mean of equally shaped matrices over layers and heads.
template <typename Scalar>
Mat<Scalar> mean_attention(const AttentionStacks<Scalar>& stacks) {
  require(!stacks.empty() && !stacks.front().empty(), "attention stack is empty");
  const auto& first = stacks.front().front();
  Mat<Scalar> total = Mat<Scalar>::Zero(first.rows(), first.cols());
  Index count = 0;
  for (const auto& layer : stacks)
    for (const auto& head : layer) {
      require(head.rows() == first.rows() && head.cols() == first.cols(),
              "attention matrices differ in shape");
      total += head;
      ++count;
    }
  return total / static_cast<Scalar>(count);
}

/// Transformer TTS: character encoder, mel decoder with pre-net, mel and
/// stop outputs, and speaker conditioning at encoder output and decoder input.
template <typename Scalar>
class TtsModel {
 public:
  TtsModel() = default;
  TtsModel(const ModelDims& dims, Index vocab_size, Index speakers, std::uint64_t seed)
      : dims_(dims) {
    require(vocab_size > 0 && speakers > 0, "TtsModel: vocabulary and speaker table must be non-empty");
    require(dims.hidden % dims.heads == 0, "TtsModel: hidden width not divisible by heads");
    Rng rng(seed);
    const Index h = dims.hidden;
    char_embedding_ = Tensor<Scalar>::parameter(
        uniform_matrix<Scalar>(vocab_size, h, kEmbeddingInitLimit, rng));
    speaker_table_ = Tensor<Scalar>::parameter(
        uniform_matrix<Scalar>(speakers, h, kEmbeddingInitLimit, rng));
    for (Index i = 0; i < dims.encoder_layers; ++i) encoder_.emplace_back(dims.layer_shape(), rng);
    encoder_norm_ = LayerNorm<Scalar>(h);
    encoder_speaker_ = SpeakerModule<Scalar>(h, rng);
    if (!dims.share_speaker_module) decoder_speaker_ = SpeakerModule<Scalar>(h, rng);
    prenet_ = {Linear<Scalar>(dims.n_mels, dims.prenet_hidden, rng),
               Linear<Scalar>(dims.prenet_hidden, dims.prenet_hidden, rng),
               Linear<Scalar>(dims.prenet_hidden, h, rng)};
    for (Index i = 0; i < dims.decoder_layers; ++i) decoder_.emplace_back(dims.layer_shape(), rng);
    decoder_norm_ = LayerNorm<Scalar>(h);
    mel_out_ = Linear<Scalar>(h, dims.n_mels, rng);
    stop_out_ = Linear<Scalar>(h, 1, rng);
  }

  const ModelDims& dims() const { return dims_; }
  Index vocab_size() const { return char_embedding_.rows(); }
  Index speaker_count() const { return speaker_table_.rows(); }

  /// Encoder memory (T, hidden) conditioned on the speaker.
  Tensor<Scalar> encode(const std::vector<int>& text, Index speaker, const ForwardContext& ctx) const {
    require(!text.empty(), "tts: empty text");
    check_speaker(speaker);
    const Index t = static_cast<Index>(text.size());
    auto x = scale(embedding(char_embedding_, text), std::sqrt(static_cast<Scalar>(dims_.hidden)));
    x = x + Tensor<Scalar>::constant(sinusoid_positions<Scalar>(t, dims_.hidden));
    x = ctx.drop(x);
    for (const auto& layer : encoder_) x = layer(x, ctx);
    return speaker_condition(encoder_norm_(x), speaker, encoder_speaker_);
  }

  /// Decoder over the given input frames (first frame is the zero go-frame).
  TtsOutput<Scalar> decode(const Mat<Scalar>& input_frames, const Tensor<Scalar>& memory, Index speaker,
                           const ForwardContext& ctx) const {
    const Index s = input_frames.rows();
    const bool prenet_drop = ctx.training || dims_.prenet_dropout_at_inference;
    ForwardContext prenet_ctx = ctx;
    prenet_ctx.training = prenet_drop;
    auto x = Tensor<Scalar>::constant(input_frames);
    x = relu(prenet_[0](x));
    x = prenet_ctx.drop(x, dims_.prenet_dropout);
    x = relu(prenet_[1](x));
    x = prenet_ctx.drop(x, dims_.prenet_dropout);
    x = relu(prenet_[2](x));
    x = x + Tensor<Scalar>::constant(sinusoid_positions<Scalar>(s, dims_.hidden));
    x = speaker_condition(x, speaker, dims_.share_speaker_module ? encoder_speaker_ : decoder_speaker_);
    TtsOutput<Scalar> out;
    for (const auto& layer : decoder_) {
      auto step = layer(x, memory, ctx);
      x = step.hidden;
      out.attention.push_back(*step.cross_weights);
    }
    x = decoder_norm_(x);
    out.mel = mel_out_(x);
    out.stop_logits = stop_out_(x);
    return out;
  }

  /// Teacher-forced forward pass: decoder input is the teacher mel shifted
  /// right by one frame behind a zero frame.
  TtsOutput<Scalar> forward(const std::vector<int>& text, Index speaker, const Mat<Scalar>& teacher,
                            const ForwardContext& ctx) const {
    require(teacher.rows() > 0 && teacher.cols() == dims_.n_mels, "tts: teacher mel has wrong shape");
    auto memory = encode(text, speaker, ctx);
    return decode(shift_right(teacher), memory, speaker, ctx);
  }

  /// Mel MSE plus weighted stop-token cross-entropy (stop target is 1 on
  /// the final frame only).
  Tensor<Scalar> loss(const std::vector<int>& text, Index speaker, const Mat<Scalar>& teacher,
                      const ForwardContext& ctx) const {
    auto out = forward(text, speaker, teacher, ctx);
    return loss_from(out, teacher);
  }

  Tensor<Scalar> loss_from(const TtsOutput<Scalar>& out, const Mat<Scalar>& teacher) const {
    const Index s = teacher.rows();
    Mat<Scalar> stop_target = Mat<Scalar>::Zero(s, 1);
    stop_target(s - 1, 0) = Scalar(1);
    Mat<Scalar> weights = Mat<Scalar>::Ones(s, 1);
    weights(s - 1, 0) = static_cast<Scalar>(dims_.stop_positive_weight);
    return mse_loss(out.mel, teacher) +
           binary_cross_entropy_with_logits(out.stop_logits, stop_target, weights);
  }

  /// Autoregressive synthesis; halts once the stop probability exceeds
  /// `stop_threshold` (that frame is kept) or after `max_frames` frames.
  TtsInference<Scalar> infer(const std::vector<int>& text, Index speaker, Index max_frames,
                             double stop_threshold) const {
    require(max_frames >= 1, "tts_infer: max_frames must be at least 1");
    NoGradGuard no_grad;
    ForwardContext ctx;
    auto memory = encode(text, speaker, ctx);
    Mat<Scalar> inputs = Mat<Scalar>::Zero(1, dims_.n_mels);
    TtsInference<Scalar> result;
    TtsOutput<Scalar> out;
    for (Index step = 0; step < max_frames; ++step) {
      out = decode(inputs, memory, speaker, ctx);
      const Scalar logit = out.stop_logits.value()(step, 0);
      const double prob = 1.0 / (1.0 + std::exp(-static_cast<double>(logit)));
      if (prob > stop_threshold || step + 1 == max_frames) {
        result.hit_max_frames = !(prob > stop_threshold);
        break;
      }
      inputs.conservativeResize(step + 2, Eigen::NoChange);
      inputs.row(step + 1) = out.mel.value().row(step);
    }
    result.mel = out.mel.value();
    result.stacks = std::move(out.attention);
    result.attention = mean_attention(result.stacks);
    return result;
  }

  ParameterList<Scalar> parameters() const {
    ParameterList<Scalar> out;
    out.push_back({"char_embedding", char_embedding_});
    out.push_back({"speaker_table", speaker_table_});
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect(out, "encoder." + std::to_string(i));
    encoder_norm_.collect(out, "encoder_norm");
    encoder_speaker_.collect(out, "encoder_speaker");
    if (!dims_.share_speaker_module) decoder_speaker_.collect(out, "decoder_speaker");
    for (std::size_t i = 0; i < prenet_.size(); ++i) prenet_[i].collect(out, "prenet." + std::to_string(i));
    for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].collect(out, "decoder." + std::to_string(i));
    decoder_norm_.collect(out, "decoder_norm");
    mel_out_.collect(out, "mel_out");
    stop_out_.collect(out, "stop_out");
    return out;
  }

  /// Appends speaker rows initialized to the mean of the existing rows.
  /// Returns the number of rows added. The table tensor is replaced, so
  /// parameter lists taken earlier must be refreshed.
  Index grow_speakers(Index total) {
    const Index current = speaker_table_.rows();
    if (total <= current) return 0;
    Mat<Scalar> grown(total, speaker_table_.cols());
    grown.topRows(current) = speaker_table_.value();
    const Mat<Scalar> mean_row = speaker_table_.value().colwise().mean();
    for (Index r = current; r < total; ++r) grown.row(r) = mean_row;
    speaker_table_ = Tensor<Scalar>::parameter(std::move(grown));
    return total - current;
  }

  /// Replaces the character table with a freshly initialized one of `vocab` rows.
  void reset_char_embedding(Index vocab, Rng& rng) {
    char_embedding_ = Tensor<Scalar>::parameter(
        uniform_matrix<Scalar>(vocab, dims_.hidden, kEmbeddingInitLimit, rng));
  }
  void reset_speaker_table(Index speakers, Rng& rng) {
    speaker_table_ = Tensor<Scalar>::parameter(
        uniform_matrix<Scalar>(speakers, dims_.hidden, kEmbeddingInitLimit, rng));
  }

  Tensor<Scalar>& char_embedding() { return char_embedding_; }
  Tensor<Scalar>& speaker_table() { return speaker_table_; }
  const SpeakerModule<Scalar>& encoder_speaker() const { return encoder_speaker_; }

  Tensor<Scalar> speaker_condition(const Tensor<Scalar>& hidden, Index speaker,
                                   const SpeakerModule<Scalar>& module) const {
    check_speaker(speaker);
    return module(hidden, slice_rows(speaker_table_, speaker, 1));
  }

 private:
  void check_speaker(Index speaker) const {
    require(speaker >= 0 && speaker < speaker_table_.rows(),
            "speaker id " + std::to_string(speaker) + " outside table of " +
                std::to_string(speaker_table_.rows()));
  }

  static Mat<Scalar> shift_right(const Mat<Scalar>& frames) {
    Mat<Scalar> shifted = Mat<Scalar>::Zero(frames.rows(), frames.cols());
    if (frames.rows() > 1) shifted.bottomRows(frames.rows() - 1) = frames.topRows(frames.rows() - 1);
    return shifted;
  }

  ModelDims dims_;
  Tensor<Scalar> char_embedding_;
  Tensor<Scalar> speaker_table_;
  std::vector<EncoderLayer<Scalar>> encoder_;
  LayerNorm<Scalar> encoder_norm_;
  SpeakerModule<Scalar> encoder_speaker_;
  SpeakerModule<Scalar> decoder_speaker_;
  std::vector<Linear<Scalar>> prenet_;
  std::vector<DecoderLayer<Scalar>> decoder_;
  LayerNorm<Scalar> decoder_norm_;
  Linear<Scalar> mel_out_;
  Linear<Scalar> stop_out_;
};

template <typename Scalar>
struct AsrOutput {
  Tensor<Scalar> logits;  // (m + 1, vocab): text followed by end-of-sequence
  AttentionStacks<Scalar> attention;
};

/// Transformer ASR: 2-D convolutional subsampling (overall stride 4),
/// character decoder whose output projection is the decoder embedding table.
template <typename Scalar>
class AsrModel {
 public:
  AsrModel() = default;
  AsrModel(const ModelDims& dims, Index vocab_size, std::uint64_t seed) : dims_(dims) {
    require(vocab_size > kEosId, "AsrModel: vocabulary must include reserved symbols");
    require(dims.hidden % dims.heads == 0, "AsrModel: hidden width not divisible by heads");
    Rng rng(seed);
    const Index c = dims.asr_filters;
    conv_weights_ = {xavier<Scalar>(9, 9 * c, {3, 3, 1, c}, rng), xavier<Scalar>(9 * c, 9 * c, {3, 3, c, c}, rng),
                     xavier<Scalar>(9 * c, 9 * c, {3, 3, c, c}, rng)};
    for (int i = 0; i < 3; ++i) conv_biases_.push_back(Tensor<Scalar>::parameter(Mat<Scalar>::Zero(1, c)));
    input_proj_ = Linear<Scalar>(subsampled_width() * c, dims.hidden, rng);
    for (Index i = 0; i < dims.encoder_layers; ++i) encoder_.emplace_back(dims.layer_shape(), rng);
    encoder_norm_ = LayerNorm<Scalar>(dims.hidden);
    char_embedding_ = Tensor<Scalar>::parameter(
        uniform_matrix<Scalar>(vocab_size, dims.hidden, kEmbeddingInitLimit, rng));
    for (Index i = 0; i < dims.decoder_layers; ++i) decoder_.emplace_back(dims.layer_shape(), rng);
    decoder_norm_ = LayerNorm<Scalar>(dims.hidden);
  }

  const ModelDims& dims() const { return dims_; }
  Index vocab_size() const { return char_embedding_.rows(); }

  static Index subsampled_length(Index frames) { return (((frames + 1) / 2) + 1) / 2; }
  Index subsampled_width() const { return subsampled_length(dims_.n_mels); }

  /// Encoder memory of length ceil(ceil(S/2)/2).
  Tensor<Scalar> encode(const Mat<Scalar>& mel, const ForwardContext& ctx) const {
    require(mel.rows() > 0, "asr: empty mel");
    require(mel.cols() == dims_.n_mels, "asr: mel width must be " + std::to_string(dims_.n_mels));
    const Index s = mel.rows();
    auto x = Tensor<Scalar>::constant(mel, {s, dims_.n_mels, 1});
    x = relu(conv2d(x, conv_weights_[0], conv_biases_[0], {3, 2, 1}));
    x = relu(conv2d(x, conv_weights_[1], conv_biases_[1], {3, 2, 1}));
    x = conv2d(x, conv_weights_[2], conv_biases_[2], {3, 1, 1});
    const Index frames = x.dim(0);
    x = x.reshape({frames, x.dim(1) * x.dim(2)});
    x = input_proj_(x);
    x = x + Tensor<Scalar>::constant(sinusoid_positions<Scalar>(frames, dims_.hidden));
    x = ctx.drop(x);
    for (const auto& layer : encoder_) x = layer(x, ctx);
    return encoder_norm_(x);
  }

  /// Logits for each decoder input position.
  AsrOutput<Scalar> decode(const std::vector<int>& inputs, const Tensor<Scalar>& memory,
                           const ForwardContext& ctx) const {
    const Index m = static_cast<Index>(inputs.size());
    auto x = scale(embedding(char_embedding_, inputs), std::sqrt(static_cast<Scalar>(dims_.hidden)));
    x = x + Tensor<Scalar>::constant(sinusoid_positions<Scalar>(m, dims_.hidden));
    x = ctx.drop(x);
    AsrOutput<Scalar> out;
    for (const auto& layer : decoder_) {
      auto step = layer(x, memory, ctx);
      x = step.hidden;
      out.attention.push_back(*step.cross_weights);
    }
    out.logits = matmul_transposed(decoder_norm_(x), char_embedding_);
    return out;
  }

  /// Teacher-forced pass: decoder input is <bos> followed by the text.
  AsrOutput<Scalar> forward(const Mat<Scalar>& mel, const std::vector<int>& text,
                            const ForwardContext& ctx) const {
    auto memory = encode(mel, ctx);
    std::vector<int> inputs{kBosId};
    inputs.insert(inputs.end(), text.begin(), text.end());
    return decode(inputs, memory, ctx);
  }

  /// Mean per-token negative log-likelihood of text + <eos>.
  Tensor<Scalar> loss(const Mat<Scalar>& mel, const std::vector<int>& text, const ForwardContext& ctx) const {
    auto out = forward(mel, text, ctx);
    std::vector<int> targets(text);
    targets.push_back(kEosId);
    return cross_entropy(out.logits, targets);
  }

  /// Argmax decoding until <eos> or `max_len` symbols.
  std::vector<int> greedy_decode(const Mat<Scalar>& mel, Index max_len) const {
    require(max_len >= 1, "asr_greedy_decode: max_len must be at least 1");
    NoGradGuard no_grad;
    ForwardContext ctx;
    auto memory = encode(mel, ctx);
    std::vector<int> inputs{kBosId};
    std::vector<int> text;
    while (static_cast<Index>(text.size()) < max_len) {
      auto out = decode(inputs, memory, ctx);
      Index best = 0;
      out.logits.value().row(out.logits.rows() - 1).maxCoeff(&best);
      if (best == kEosId) break;
      text.push_back(static_cast<int>(best));
      inputs.push_back(static_cast<int>(best));
    }
    return text;
  }

  ParameterList<Scalar> parameters() const {
    ParameterList<Scalar> out;
    out.push_back({"char_embedding", char_embedding_});
    for (std::size_t i = 0; i < conv_weights_.size(); ++i) {
      out.push_back({"input_conv." + std::to_string(i) + ".weight", conv_weights_[i]});
      out.push_back({"input_conv." + std::to_string(i) + ".bias", conv_biases_[i]});
    }
    input_proj_.collect(out, "input_proj");
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect(out, "encoder." + std::to_string(i));
    encoder_norm_.collect(out, "encoder_norm");
    for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].collect(out, "decoder." + std::to_string(i));
    decoder_norm_.collect(out, "decoder_norm");
    return out;
  }

  void reset_char_embedding(Index vocab, Rng& rng) {
    char_embedding_ = Tensor<Scalar>::parameter(
        uniform_matrix<Scalar>(vocab, dims_.hidden, kEmbeddingInitLimit, rng));
  }
  Tensor<Scalar>& char_embedding() { return char_embedding_; }

 private:
  ModelDims dims_;
  std::vector<Tensor<Scalar>> conv_weights_;
  std::vector<Tensor<Scalar>> conv_biases_;
  Linear<Scalar> input_proj_;
  std::vector<EncoderLayer<Scalar>> encoder_;
  LayerNorm<Scalar> encoder_norm_;
  Tensor<Scalar> char_embedding_;
  std::vector<DecoderLayer<Scalar>> decoder_;
  LayerNorm<Scalar> decoder_norm_;
};

}  // namespace lowres
