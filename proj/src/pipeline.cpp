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

#include "lowres/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace lowres {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Checkpoint glue

namespace {

ModelMeta meta_for(const std::string& kind, const ModelDims& dims, const Vocabulary& vocab, Index speakers,
                   const AdamState<float>& opt, const std::map<std::string, std::string>& info) {
  ModelMeta meta;
  meta.kind = kind;
  meta.dims = dims;
  meta.vocab = vocab;
  meta.speakers = speakers;
  meta.optimizer_step = opt.step;
  meta.info = info;
  return meta;
}

const AdamState<float>* usable(const AdamState<float>& opt, const ParameterList<float>& params) {
  return opt.first_moment.size() == params.size() ? &opt : nullptr;
}

}  // namespace

Checkpoint to_checkpoint(const TtsBundle& tts, const std::map<std::string, std::string>& info) {
  const auto params = tts.model.parameters();
  return make_checkpoint(
      meta_for("tts", tts.model.dims(), tts.vocab, tts.model.speaker_count(), tts.optimizer, info), params,
      usable(tts.optimizer, params));
}

Checkpoint to_checkpoint(const AsrBundle& asr, const std::map<std::string, std::string>& info) {
  const auto params = asr.model.parameters();
  return make_checkpoint(meta_for("asr", asr.model.dims(), asr.vocab, 0, asr.optimizer, info), params,
                         usable(asr.optimizer, params));
}

namespace {

ModelMeta checked_meta(const Checkpoint& ckpt, const std::string& kind) {
  auto meta = decode_meta(ckpt.metadata);
  if (meta.kind != kind) throw CheckpointError("expected a " + kind + " checkpoint, found '" + meta.kind + "'");
  return meta;
}

}  // namespace

void save_tts(const std::filesystem::path& path, const TtsBundle& tts, const std::map<std::string, std::string>& info) {
  write_checkpoint(path, to_checkpoint(tts, info));
}

void save_asr(const std::filesystem::path& path, const AsrBundle& asr, const std::map<std::string, std::string>& info) {
  write_checkpoint(path, to_checkpoint(asr, info));
}

TtsBundle tts_from_checkpoint(const Checkpoint& ckpt) {
  const auto meta = checked_meta(ckpt, "tts");
  TtsBundle b{TtsModel<float>(meta.dims, meta.vocab.size(), meta.speakers, 0), meta.vocab, {}};
  auto params = b.model.parameters();
  restore_parameters(params, ckpt);
  b.optimizer = restore_optimizer(params, ckpt, meta.optimizer_step);
  return b;
}

AsrBundle asr_from_checkpoint(const Checkpoint& ckpt) {
  const auto meta = checked_meta(ckpt, "asr");
  AsrBundle b{AsrModel<float>(meta.dims, meta.vocab.size(), 0), meta.vocab, {}};
  auto params = b.model.parameters();
  restore_parameters(params, ckpt);
  b.optimizer = restore_optimizer(params, ckpt, meta.optimizer_step);
  return b;
}

TtsBundle load_tts(const std::filesystem::path& path) { return tts_from_checkpoint(read_checkpoint(path)); }
AsrBundle load_asr(const std::filesystem::path& path) { return asr_from_checkpoint(read_checkpoint(path)); }

TtsBundle tts_init_from_pretrained(const Checkpoint& ckpt, const Vocabulary& vocab, Index speakers,
                                   const std::set<std::string>& fresh, std::uint64_t seed) {
  const auto meta = checked_meta(ckpt, "tts");
  TtsBundle b{TtsModel<float>(meta.dims, vocab.size(), speakers, seed), vocab, {}};
  auto params = b.model.parameters();
  restore_parameters(params, ckpt, fresh);
  b.optimizer = AdamState<float>::for_parameters(params);
  return b;
}

AsrBundle asr_init_from_pretrained(const Checkpoint& ckpt, const Vocabulary& vocab, const std::set<std::string>& fresh,
                                   std::uint64_t seed) {
  const auto meta = checked_meta(ckpt, "asr");
  AsrBundle b{AsrModel<float>(meta.dims, vocab.size(), seed), vocab, {}};
  auto params = b.model.parameters();
  restore_parameters(params, ckpt, fresh);
  b.optimizer = AdamState<float>::for_parameters(params);
  return b;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

TrainSchedule read_schedule(const Config& c, const std::string& prefix, TrainSchedule s) {
  s.steps = c.get_int(prefix + ".steps", s.steps);
  s.batch_frames = c.get_int(prefix + ".batch_frames", s.batch_frames);
  s.warmup = c.get_int(prefix + ".warmup", s.warmup);
  s.lr_scale = c.get_double(prefix + ".lr_scale", s.lr_scale);
  s.clip_norm = c.get_double(prefix + ".clip_norm", s.clip_norm);
  if (s.steps < 0 || s.batch_frames <= 0 || s.warmup <= 0 || s.lr_scale <= 0 || s.clip_norm < 0)
    throw ConfigError("invalid training schedule under '" + prefix + "'");
  return s;
}

}  // namespace

PipelineConfig PipelineConfig::from_config(const Config& c) {
  PipelineConfig p;
  auto& d = p.dims;
  d.hidden = c.get_int("model.hidden", d.hidden);
  d.heads = c.get_int("model.heads", d.heads);
  d.encoder_layers = c.get_int("model.encoder_layers", d.encoder_layers);
  d.decoder_layers = c.get_int("model.decoder_layers", d.decoder_layers);
  d.ffn_inner = c.get_int("model.ffn_inner", d.ffn_inner);
  d.ffn_kernel = c.get_int("model.ffn_kernel", d.ffn_kernel);
  d.n_mels = c.get_int("model.n_mels", d.n_mels);
  d.prenet_hidden = c.get_int("model.prenet_hidden", d.prenet_hidden);
  d.prenet_dropout = c.get_double("model.prenet_dropout", d.prenet_dropout);
  d.prenet_dropout_at_inference = c.get_bool("model.prenet_dropout_at_inference", d.prenet_dropout_at_inference);
  d.dropout = c.get_double("model.dropout", d.dropout);
  d.asr_filters = c.get_int("model.asr_filters", d.asr_filters);
  d.share_speaker_module = c.get_bool("model.share_speaker_module", d.share_speaker_module);
  d.stop_positive_weight = c.get_double("model.stop_positive_weight", d.stop_positive_weight);
  if (d.hidden <= 0 || d.heads <= 0 || d.hidden % d.heads != 0 || d.encoder_layers < 0 || d.decoder_layers < 0 ||
      d.ffn_inner <= 0 || d.ffn_kernel <= 0 || d.n_mels <= 0 || d.prenet_hidden <= 0 || d.asr_filters <= 0)
    throw ConfigError("invalid model dimensions");
  if (d.prenet_dropout < 0 || d.prenet_dropout >= 1 || d.dropout < 0 || d.dropout >= 1)
    throw ConfigError("dropout rates must lie in [0, 1)");

  p.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<std::int64_t>(p.seed)));
  p.threads = static_cast<int>(c.get_int("threads", p.threads));
  if (p.threads < 1) throw ConfigError("threads must be at least 1");
  p.log_every = c.get_int("log_every", p.log_every);
  p.checkpoint_every = c.get_int("checkpoint_every", p.checkpoint_every);

  p.pretrain_tts = read_schedule(c, "pretrain.tts", p.pretrain_tts);
  p.pretrain_asr = read_schedule(c, "pretrain.asr", p.pretrain_asr);
  p.finetune_stage1_steps = c.get_int("finetune.stage1_steps", p.finetune_stage1_steps);
  p.finetune_tts = read_schedule(c, "finetune.tts", p.finetune_tts);
  p.finetune_asr = read_schedule(c, "finetune.asr", p.finetune_asr);

  p.dt_steps = c.get_int("dual.steps", p.dt_steps);
  p.dt_phase_switch = c.get_int("dual.phase_switch", p.dt_phase_switch);
  p.dt_text_batch = static_cast<int>(c.get_int("dual.text_batch", p.dt_text_batch));
  p.dt_speech_batch = static_cast<int>(c.get_int("dual.speech_batch", p.dt_speech_batch));
  p.dt_tts = read_schedule(c, "dual.tts", p.dt_tts);
  p.dt_asr = read_schedule(c, "dual.asr", p.dt_asr);
  if (p.dt_steps < 0 || p.dt_text_batch < 1 || p.dt_speech_batch < 1) throw ConfigError("invalid dual settings");
  if (p.dt_phase_switch > p.dt_steps) throw ConfigError("dual.phase_switch exceeds dual.steps");

  p.filter.wcr_min = c.get_double("distill.wcr_min", p.filter.wcr_min);
  p.filter.adr_min = c.get_double("distill.adr_min", p.filter.adr_min);
  p.filter.b = static_cast<int>(c.get_int("distill.b", p.filter.b));
  if (p.filter.b < 0) throw ConfigError("distill.b must be non-negative");
  p.min_retention = c.get_double("distill.min_retention", p.min_retention);
  p.kd_tts_max_texts = c.get_int("distill.tts_max_texts", p.kd_tts_max_texts);
  p.kd_tts = read_schedule(c, "distill.tts", p.kd_tts);
  p.kd_asr_ratio = c.get_double("distill.asr_ratio", p.kd_asr_ratio);
  if (p.kd_asr_ratio < 0) throw ConfigError("distill.asr_ratio must be non-negative");
  p.kd_asr = read_schedule(c, "distill.asr", p.kd_asr);
  auto& sa = p.spec_augment;
  sa.time_masks = static_cast<int>(c.get_int("specaugment.time_masks", sa.time_masks));
  sa.freq_masks = static_cast<int>(c.get_int("specaugment.freq_masks", sa.freq_masks));
  sa.max_time_width = static_cast<int>(c.get_int("specaugment.max_time_width", sa.max_time_width));
  sa.max_freq_width = static_cast<int>(c.get_int("specaugment.max_freq_width", sa.max_freq_width));

  p.stop_threshold = c.get_double("inference.stop_threshold", p.stop_threshold);
  p.max_frames_factor = c.get_double("inference.max_frames_factor", p.max_frames_factor);
  p.max_decode_length = c.get_int("inference.max_decode_length", p.max_decode_length);
  if (p.max_frames_factor <= 0 || p.max_decode_length < 1) throw ConfigError("invalid inference limits");
  return p;
}

MetricsLog::MetricsLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_ = std::make_shared<std::ofstream>(path, std::ios::app);
  if (!*out_) throw std::runtime_error("cannot open metrics log " + path.string());
}

void MetricsLog::write(const std::string& json_line) {
  if (!out_) return;
  *out_ << json_line << '\n';
  out_->flush();
}

// ---------------------------------------------------------------------------
// Helpers

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

Index tts_max_frames(const PipelineConfig& cfg, std::size_t text_length) {
  return std::max<Index>(1, static_cast<Index>(std::llround(cfg.max_frames_factor * static_cast<double>(text_length))));
}

ToyBundleOptions toy_bundle_options(const Config& cfg) {
  ToyBundleOptions o;
  o.seed = static_cast<std::uint64_t>(cfg.get_int("toy.seed", static_cast<std::int64_t>(o.seed)));
  if (cfg.has("toy.alphabet")) o.spec.alphabet = cfg.get_string("toy.alphabet", o.spec.alphabet);
  for (auto* s : {&o.spec, &o.rich_spec}) {
    s->n_mels = static_cast<int>(cfg.get_int("model.n_mels", s->n_mels));
    s->frames_per_char = static_cast<int>(cfg.get_int("toy.frames_per_char", s->frames_per_char));
    s->min_margin = static_cast<float>(cfg.get_double("toy.min_margin", s->min_margin));
    s->adjacent_swaps = static_cast<int>(cfg.get_int("toy.speaker_swaps", s->adjacent_swaps));
    s->gain_spread = static_cast<float>(cfg.get_double("toy.gain_spread", s->gain_spread));
    s->offset_std = static_cast<float>(cfg.get_double("toy.offset_std", s->offset_std));
    s->noise_std = static_cast<float>(cfg.get_double("toy.noise_std", s->noise_std));
  }
  o.seen_speakers = static_cast<int>(cfg.get_int("toy.seen_speakers", o.seen_speakers));
  o.unseen_speakers = static_cast<int>(cfg.get_int("toy.unseen_speakers", o.unseen_speakers));
  o.rich_speakers = static_cast<int>(cfg.get_int("toy.rich_speakers", o.rich_speakers));
  auto& z = o.sizes;
  z.scale = cfg.get_double("toy.scale", z.scale);
  const std::pair<const char*, int*> sizes[] = {
      {"paired_high", &z.paired_high},   {"paired_low", &z.paired_low}, {"unpaired_seen", &z.unpaired_speech_seen},
      {"unpaired_unseen", &z.unpaired_speech_unseen}, {"unpaired_text", &z.unpaired_text},
      {"rich_tts", &z.rich_tts},         {"rich_asr", &z.rich_asr},     {"test", &z.test}};
  for (const auto& [name, field] : sizes)
    *field = static_cast<int>(cfg.get_int(std::string("toy.size.") + name, *field));
  o.words.lexicon_size = static_cast<int>(cfg.get_int("toy.lexicon_size", o.words.lexicon_size));
  o.words.max_words = static_cast<int>(cfg.get_int("toy.max_words", o.words.max_words));
  if (z.scale <= 0) throw ConfigError("toy.scale must be positive");
  if (o.seen_speakers < 1 || o.unseen_speakers < 1 || o.rich_speakers < 1)
    throw ConfigError("toy speaker counts must be positive");
  return o;
}

Vocabulary vocabulary_for(const std::vector<const Corpus*>& corpora) {
  std::vector<std::string> texts;
  for (const auto* c : corpora)
    for (const auto& u : *c)
      if (u.text) texts.push_back(*u.text);
  return Vocabulary::from_texts(texts);
}

std::vector<const Utterance*> pointers(const std::vector<const Corpus*>& corpora) {
  std::vector<const Utterance*> out;
  for (const auto* c : corpora)
    for (const auto& u : *c) out.push_back(&u);
  return out;
}

Synthesis synthesize(const TtsBundle& tts, const std::string& text, int speaker, const PipelineConfig& cfg) {
  const auto ids = tts.vocab.encode(text);
  require(!ids.empty(), "synthesize: empty text");
  auto result = tts.model.infer(ids, speaker, tts_max_frames(cfg, ids.size()), cfg.stop_threshold);
  return {std::move(result.mel), aggregate_attention(result.stacks), result.hit_max_frames};
}

std::string recognize(const AsrBundle& asr, const MelMatrix& mel, const PipelineConfig& cfg) {
  return asr.vocab.decode(asr.model.greedy_decode(mel, cfg.max_decode_length));
}

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

std::vector<bool> trainable_mask(const ParameterList<float>& params, const std::set<std::string>& names) {
  std::vector<bool> mask(params.size(), names.empty());
  if (names.empty()) return mask;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (names.count(params[i].name)) {
      mask[i] = true;
      ++matched;
    }
  require(matched == names.size(), "trainable set names a parameter the model does not have");
  return mask;
}

void ensure_optimizer(AdamState<float>& opt, const ParameterList<float>& params) {
  bool ok = opt.first_moment.size() == params.size();
  for (std::size_t i = 0; ok && i < params.size(); ++i)
    ok = opt.first_moment[i].rows() == params[i].tensor.rows() && opt.first_moment[i].cols() == params[i].tensor.cols();
  if (!ok) opt = AdamState<float>::for_parameters(params);
}

/// Accumulates per-sample gradients in a fixed order, averages them, clips,
/// and applies one Adam update.
template <typename LossFn>
double apply_batch(ParameterList<float>& params, AdamState<float>& opt, const std::vector<bool>& mask,
                   std::size_t batch_size, double lr, double clip_norm, const std::string& stage, std::int64_t step,
                   LossFn&& sample_loss) {
  Gradients<float> total;
  double loss_sum = 0;
  for (std::size_t i = 0; i < batch_size; ++i) {
    auto loss = sample_loss(i);
    const double value = loss.item();
    if (!std::isfinite(value))
      throw TrainingError(stage + ": loss became " + fmt(value) + " at step " + std::to_string(step) +
                          " (sample " + std::to_string(i) + " of the batch); lower the learning rate or clip harder");
    loss_sum += value;
    total.accumulate(backward(loss));
  }
  total.scale(1.0f / static_cast<float>(batch_size));
  if (clip_norm > 0) clip_grad_norm(total, params, static_cast<float>(clip_norm));
  adam_step(params, total, opt, static_cast<float>(lr), mask);
  return loss_sum / static_cast<double>(batch_size);
}

double schedule_lr(const TrainSchedule& s, std::int64_t step, Index hidden) {
  return s.lr_scale * lr_at(step, hidden, s.warmup);
}

void log_step(StageContext& ctx, const std::string& stage, std::int64_t step, double loss, double lr) {
  Json j;
  j["stage"] = stage;
  j["step"] = step;
  j["loss"] = loss;
  j["lr"] = lr;
  ctx.log.write(j.dump());
}

/// Epoch-based sample stream packed by frame budget.
class BatchStream {
 public:
  BatchStream(std::vector<Index> frames, Index budget, std::uint64_t seed)
      : frames_(std::move(frames)), budget_(budget), rng_(seed) {
    require(!frames_.empty(), "training data is empty");
    budget_ = std::max(budget_, *std::max_element(frames_.begin(), frames_.end()));
    reshuffle();
  }

  /// Indices into the data for the next batch, plus the epoch they belong to.
  const std::vector<std::size_t>& next() {
    if (cursor_ == batches_.size()) {
      ++epoch_;
      reshuffle();
    }
    return batches_[cursor_++];
  }
  std::int64_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    order_.resize(frames_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    std::vector<Index> ordered;
    for (auto i : order_) ordered.push_back(frames_[i]);
    batches_ = batch_by_frames(ordered, budget_);
    for (auto& b : batches_)
      for (auto& i : b) i = order_[i];
    cursor_ = 0;
  }

  std::vector<Index> frames_;
  Index budget_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
  std::int64_t epoch_ = 0;
};

void check_paired(const Utterance& u, bool need_speaker) {
  if (!u.paired()) throw StageAbort("utterance '" + u.id + "' is not paired (needs text and mel)");
  if (need_speaker && !u.speaker) throw StageAbort("utterance '" + u.id + "' has no speaker id");
}

template <typename Bundle>
void maybe_checkpoint(StageContext& ctx, const std::string& stage, std::int64_t step, const Bundle& b) {
  if (ctx.checkpoint_dir.empty() || ctx.cfg.checkpoint_every <= 0 || step % ctx.cfg.checkpoint_every != 0) return;
  const auto path = ctx.checkpoint_dir / (stage + "-step" + std::to_string(step) + ".lrsk");
  if constexpr (std::is_same_v<Bundle, TtsBundle>) save_tts(path, b);
  else save_asr(path, b);
}

struct LossWindow {
  double sum = 0;
  std::int64_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

}  // namespace

TrainSummary train_tts(TtsBundle& tts, const std::vector<const Utterance*>& data, const TrainSchedule& schedule,
                       const std::string& stage, StageContext& ctx, std::uint64_t seed,
                       const std::set<std::string>& trainable) {
  TrainSummary summary;
  if (schedule.steps == 0) return summary;
  std::vector<Index> frames;
  for (const auto* u : data) {
    check_paired(*u, true);
    frames.push_back(u->frames());
  }
  BatchStream stream(frames, schedule.batch_frames, derive_seed(seed, "batches"));
  auto params = tts.model.parameters();
  ensure_optimizer(tts.optimizer, params);
  const auto mask = trainable_mask(params, trainable);
  Rng dropout_rng(derive_seed(seed, "dropout"));
  ForwardContext fctx{true, &dropout_rng, tts.model.dims().dropout};
  LossWindow window;
  for (std::int64_t step = 1; step <= schedule.steps; ++step) {
    const auto& batch = stream.next();
    const double lr = schedule_lr(schedule, step, tts.model.dims().hidden);
    const double loss = apply_batch(params, tts.optimizer, mask, batch.size(), lr, schedule.clip_norm, stage, step,
                                    [&](std::size_t i) {
                                      const Utterance& u = *data[batch[i]];
                                      return tts.model.loss(tts.vocab.encode(*u.text), *u.speaker, *u.mel, fctx);
                                    });
    window.sum += loss;
    ++window.count;
    const bool boundary = step % std::max<std::int64_t>(1, ctx.cfg.log_every) == 0 || step == schedule.steps;
    if (boundary) {
      log_step(ctx, stage, step, window.mean(), lr);
      if (summary.steps == 0) summary.first_loss = window.mean();
      summary.last_loss = window.mean();
      summary.steps = step;
      window = {};
    }
    maybe_checkpoint(ctx, stage, step, tts);
  }
  summary.steps = schedule.steps;
  return summary;
}

TrainSummary train_asr(AsrBundle& asr, const std::vector<const Utterance*>& data, const TrainSchedule& schedule,
                       const std::string& stage, StageContext& ctx, std::uint64_t seed,
                       const std::set<std::string>& trainable,
                       const std::function<MelMatrix(const Utterance&, std::int64_t, std::size_t)>& transform) {
  TrainSummary summary;
  if (schedule.steps == 0) return summary;
  std::vector<Index> frames;
  for (const auto* u : data) {
    check_paired(*u, false);
    frames.push_back(u->frames());
  }
  BatchStream stream(frames, schedule.batch_frames, derive_seed(seed, "batches"));
  auto params = asr.model.parameters();
  ensure_optimizer(asr.optimizer, params);
  const auto mask = trainable_mask(params, trainable);
  Rng dropout_rng(derive_seed(seed, "dropout"));
  ForwardContext fctx{true, &dropout_rng, asr.model.dims().dropout};
  LossWindow window;
  for (std::int64_t step = 1; step <= schedule.steps; ++step) {
    const auto& batch = stream.next();
    const auto epoch = stream.epoch();
    const double lr = schedule_lr(schedule, step, asr.model.dims().hidden);
    const double loss = apply_batch(params, asr.optimizer, mask, batch.size(), lr, schedule.clip_norm, stage, step,
                                    [&](std::size_t i) {
                                      const Utterance& u = *data[batch[i]];
                                      const auto text = asr.vocab.encode(*u.text);
                                      if (transform) return asr.model.loss(transform(u, epoch, batch[i]), text, fctx);
                                      return asr.model.loss(*u.mel, text, fctx);
                                    });
    window.sum += loss;
    ++window.count;
    const bool boundary = step % std::max<std::int64_t>(1, ctx.cfg.log_every) == 0 || step == schedule.steps;
    if (boundary) {
      log_step(ctx, stage, step, window.mean(), lr);
      if (summary.steps == 0) summary.first_loss = window.mean();
      summary.last_loss = window.mean();
      summary.steps = step;
      window = {};
    }
    maybe_checkpoint(ctx, stage, step, asr);
  }
  summary.steps = schedule.steps;
  return summary;
}

// ---------------------------------------------------------------------------
// Stages

PretrainResult pretrain(const Corpus& rich_tts, const Corpus& rich_asr, StageContext& ctx) {
  require(!rich_tts.empty() && !rich_asr.empty(), "pretrain: rich corpora must be non-empty");
  const auto& cfg = ctx.cfg;
  const auto vocab = vocabulary_for({&rich_tts, &rich_asr});
  int speakers = 0;
  for (const auto& u : rich_tts) {
    if (!u.speaker) throw StageAbort("pretrain: rich TTS utterance '" + u.id + "' has no speaker");
    speakers = std::max(speakers, *u.speaker + 1);
  }
  PretrainResult r{
      TtsBundle{TtsModel<float>(cfg.dims, vocab.size(), speakers, derive_seed(cfg.seed, "pretrain.tts.init")), vocab,
                {}},
      AsrBundle{AsrModel<float>(cfg.dims, vocab.size(), derive_seed(cfg.seed, "pretrain.asr.init")), vocab, {}}};
  train_tts(r.tts, pointers({&rich_tts}), cfg.pretrain_tts, "pretrain-tts", ctx, derive_seed(cfg.seed, "pretrain.tts"));
  train_asr(r.asr, pointers({&rich_asr}), cfg.pretrain_asr, "pretrain-asr", ctx, derive_seed(cfg.seed, "pretrain.asr"));
  return r;
}

namespace {

std::vector<std::pair<std::string, Mat<float>>> snapshot_except(const ParameterList<float>& params,
                                                                const std::set<std::string>& skip) {
  std::vector<std::pair<std::string, Mat<float>>> out;
  for (const auto& p : params)
    if (!skip.count(p.name)) out.emplace_back(p.name, p.tensor.value());
  return out;
}

bool bit_equal(const std::vector<std::pair<std::string, Mat<float>>>& before, const ParameterList<float>& params) {
  std::size_t k = 0;
  for (const auto& p : params) {
    if (k == before.size() || before[k].first != p.name) continue;
    const auto& a = before[k].second;
    const auto& b = p.tensor.value();
    if (a.rows() != b.rows() || a.cols() != b.cols() ||
        std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) != 0)
      return false;
    ++k;
  }
  return k == before.size();
}

}  // namespace

FinetuneResult finetune(const Checkpoint& pretrained_tts, const Checkpoint& pretrained_asr, const Vocabulary& vocab,
                        Index speakers, const Corpus& paired_high, const Corpus& paired_low, StageContext& ctx) {
  require(!paired_high.empty(), "finetune: the high-quality paired corpus is empty");
  const auto& cfg = ctx.cfg;
  const std::set<std::string> tts_fresh{"char_embedding", "speaker_table"};
  const std::set<std::string> asr_fresh{"char_embedding"};
  FinetuneResult r{
      tts_init_from_pretrained(pretrained_tts, vocab, speakers, tts_fresh, derive_seed(cfg.seed, "finetune.tts.init")),
      asr_init_from_pretrained(pretrained_asr, vocab, asr_fresh, derive_seed(cfg.seed, "finetune.asr.init")), false};
  const auto data = pointers({&paired_high, &paired_low});
  for (const auto* u : data)
    if (u->speaker && *u->speaker >= speakers)
      throw StageAbort("finetune: speaker " + std::to_string(*u->speaker) + " of '" + u->id +
                       "' exceeds the speaker table");

  const auto tts_before = snapshot_except(r.tts.model.parameters(), tts_fresh);
  const auto asr_before = snapshot_except(r.asr.model.parameters(), asr_fresh);
  TrainSchedule stage1_tts = cfg.finetune_tts, stage1_asr = cfg.finetune_asr;
  stage1_tts.steps = stage1_asr.steps = cfg.finetune_stage1_steps;
  train_tts(r.tts, data, stage1_tts, "finetune1-tts", ctx, derive_seed(cfg.seed, "finetune1.tts"), tts_fresh);
  train_asr(r.asr, data, stage1_asr, "finetune1-asr", ctx, derive_seed(cfg.seed, "finetune1.asr"), asr_fresh);
  r.stage1_freeze_held = bit_equal(tts_before, r.tts.model.parameters()) && bit_equal(asr_before, r.asr.model.parameters());
  Json j;
  j["stage"] = "finetune1";
  j["freeze_held"] = r.stage1_freeze_held;
  ctx.log.write(j.dump());
  if (!ctx.checkpoint_dir.empty()) {
    save_tts(ctx.checkpoint_dir / "finetune1-tts.lrsk", r.tts, {{"stage", "finetune1"}});
    save_asr(ctx.checkpoint_dir / "finetune1-asr.lrsk", r.asr, {{"stage", "finetune1"}});
  }
  if (!r.stage1_freeze_held) throw TrainingError("finetune: stage 1 modified a frozen parameter");

  train_tts(r.tts, data, cfg.finetune_tts, "finetune2-tts", ctx, derive_seed(cfg.seed, "finetune2.tts"));
  train_asr(r.asr, data, cfg.finetune_asr, "finetune2-asr", ctx, derive_seed(cfg.seed, "finetune2.asr"));
  return r;
}

namespace {

TtsBundle clone(const TtsBundle& b) { return tts_from_checkpoint(to_checkpoint(b)); }
AsrBundle clone(const AsrBundle& b) { return asr_from_checkpoint(to_checkpoint(b)); }

/// Grows the speaker table and the matching optimizer moments.
void grow_tts_speakers(TtsBundle& tts, Index total) {
  const auto before = tts.model.parameters();
  if (tts.model.grow_speakers(total) == 0) return;
  const auto after = tts.model.parameters();
  ensure_optimizer(tts.optimizer, before);
  for (std::size_t i = 0; i < after.size(); ++i) {
    if (after[i].name != "speaker_table") continue;
    for (auto* m : {&tts.optimizer.first_moment[i], &tts.optimizer.second_moment[i]}) {
      const Index old_rows = m->rows();
      m->conservativeResize(total, Eigen::NoChange);
      m->bottomRows(total - old_rows).setZero();
    }
  }
}

std::string dt_id(std::int64_t step, const char* kind, std::size_t k) {
  return "dt" + std::to_string(step) + "-" + kind + std::to_string(k);
}

}  // namespace

DualTransformResult dual_transform(TtsBundle tts, AsrBundle asr, const Corpus& unpaired_text,
                                   const Corpus& unpaired_seen, const Corpus& unpaired_unseen,
                                   const Corpus& paired_high, const Corpus& paired_low, StageContext& ctx) {
  const auto& cfg = ctx.cfg;
  const std::int64_t total = cfg.dt_steps;
  const std::int64_t phase_switch = cfg.dt_phase_switch < 0 ? total / 2 : cfg.dt_phase_switch;
  require(phase_switch <= total, "dual_transform: phase switch after the last step");
  require(!unpaired_text.empty(), "dual_transform: unpaired text is empty");
  require(!unpaired_seen.empty(), "dual_transform: unpaired seen-speaker speech is empty");
  const bool has_phase2 = phase_switch < total;
  require(!has_phase2 || !unpaired_unseen.empty(), "dual_transform: phase 2 needs unseen-speaker speech");
  for (const auto& u : unpaired_text)
    if (!u.text) throw StageAbort("dual_transform: unpaired text item '" + u.id + "' has no text");
  for (const auto* c : {&unpaired_seen, &unpaired_unseen})
    for (const auto& u : *c)
      if (!u.mel || !u.speaker) throw StageAbort("dual_transform: unpaired speech '" + u.id + "' needs a mel and speaker");

  const auto paired = pointers({&paired_high, &paired_low});
  require(!paired.empty(), "dual_transform: no paired data to mix in");
  Index unseen_rows = tts.model.speaker_count();
  for (const auto& u : unpaired_unseen) unseen_rows = std::max<Index>(unseen_rows, *u.speaker + 1);
  for (const auto& u : unpaired_seen)
    require(*u.speaker < tts.model.speaker_count(), "dual_transform: seen speaker outside the TTS table");

  Rng rng(derive_seed(cfg.seed, "dual.sampling"));
  Rng dropout_rng(derive_seed(cfg.seed, "dual.dropout"));
  DualTransformResult result;
  auto tts_params = tts.model.parameters();
  auto asr_params = asr.model.parameters();
  ensure_optimizer(tts.optimizer, tts_params);
  ensure_optimizer(asr.optimizer, asr_params);
  std::vector<const Utterance*> speech_pool = pointers({&unpaired_seen});
  LossWindow tts_window, asr_window;

  for (std::int64_t step = 1; step <= total; ++step) {
    const int phase = step > phase_switch ? 2 : 1;
    if (phase == 2 && step == phase_switch + 1) {
      result.tts_end_of_phase1 = clone(tts);
      result.asr_end_of_phase1 = clone(asr);
      grow_tts_speakers(tts, unseen_rows);
      tts_params = tts.model.parameters();
      speech_pool = pointers({&unpaired_seen, &unpaired_unseen});
      Json j;
      j["stage"] = "dual";
      j["phase2_start"] = step;
      j["speakers"] = tts.model.speaker_count();
      ctx.log.write(j.dump());
    }
    const Index synth_speakers = tts.model.speaker_count();

    // (a) text -> speech with the current TTS, then one ASR update.
    std::vector<std::size_t> text_idx(static_cast<std::size_t>(cfg.dt_text_batch));
    std::vector<int> text_spk(text_idx.size());
    for (std::size_t k = 0; k < text_idx.size(); ++k) {
      text_idx[k] = std::uniform_int_distribution<std::size_t>(0, unpaired_text.size() - 1)(rng);
      text_spk[k] = static_cast<int>(std::uniform_int_distribution<Index>(0, synth_speakers - 1)(rng));
    }
    Corpus pseudo_speech(text_idx.size());
    parallel_for(text_idx.size(), cfg.threads, [&](std::size_t k) {
      const auto& src = unpaired_text[text_idx[k]];
      auto& u = pseudo_speech[k];
      u.id = dt_id(step, "x", k);
      u.text = src.text;
      u.speaker = text_spk[k];
      u.origin = Origin::kPseudo;
      u.mel = std::make_shared<const MelMatrix>(synthesize(tts, *src.text, text_spk[k], cfg).mel);
    });
    for (std::size_t k = 0; k < text_idx.size(); ++k)
      result.provenance.push_back({step, "text->speech", unpaired_text[text_idx[k]].id, text_spk[k], phase});
    {
      const auto mixed = mix_upsampled(paired, pointers({&pseudo_speech}), rng());
      ForwardContext fctx{true, &dropout_rng, asr.model.dims().dropout};
      const double lr = schedule_lr(cfg.dt_asr, step, asr.model.dims().hidden);
      asr_window.sum += apply_batch(asr_params, asr.optimizer, {}, mixed.size(), lr, cfg.dt_asr.clip_norm, "dual-asr",
                                    step, [&](std::size_t i) {
                                      return asr.model.loss(*mixed[i]->mel, asr.vocab.encode(*mixed[i]->text), fctx);
                                    });
      ++asr_window.count;
    }

    // (b) speech -> text with the current ASR, then one TTS update.
    std::vector<std::size_t> speech_idx(static_cast<std::size_t>(cfg.dt_speech_batch));
    for (auto& i : speech_idx) i = std::uniform_int_distribution<std::size_t>(0, speech_pool.size() - 1)(rng);
    Corpus pseudo_text(speech_idx.size());
    parallel_for(speech_idx.size(), cfg.threads, [&](std::size_t k) {
      const auto& src = *speech_pool[speech_idx[k]];
      auto& u = pseudo_text[k];
      u.id = dt_id(step, "y", k);
      u.text = recognize(asr, *src.mel, cfg);
      u.mel = src.mel;
      u.speaker = src.speaker;
      u.origin = Origin::kPseudo;
    });
    for (std::size_t k = 0; k < speech_idx.size(); ++k)
      result.provenance.push_back({step, "speech->text", speech_pool[speech_idx[k]]->id,
                                   *speech_pool[speech_idx[k]]->speaker, phase});
    std::vector<const Utterance*> usable_text;
    for (const auto& u : pseudo_text)
      if (!u.text->empty()) usable_text.push_back(&u);
    if (!usable_text.empty()) {
      const auto mixed = mix_upsampled(paired, usable_text, rng());
      ForwardContext fctx{true, &dropout_rng, tts.model.dims().dropout};
      const double lr = schedule_lr(cfg.dt_tts, step, tts.model.dims().hidden);
      tts_window.sum += apply_batch(tts_params, tts.optimizer, {}, mixed.size(), lr, cfg.dt_tts.clip_norm, "dual-tts",
                                    step, [&](std::size_t i) {
                                      const auto& u = *mixed[i];
                                      return tts.model.loss(tts.vocab.encode(*u.text), *u.speaker, *u.mel, fctx);
                                    });
      ++tts_window.count;
    }

    if (step % std::max<std::int64_t>(1, cfg.log_every) == 0 || step == total) {
      Json j;
      j["stage"] = "dual";
      j["step"] = step;
      j["phase"] = phase;
      j["asr_loss"] = asr_window.mean();
      j["tts_loss"] = tts_window.mean();
      ctx.log.write(j.dump());
      asr_window = {};
      tts_window = {};
    }
    maybe_checkpoint(ctx, "dual-tts", step, tts);
    maybe_checkpoint(ctx, "dual-asr", step, asr);
  }
  if (!has_phase2) {
    result.tts_end_of_phase1 = clone(tts);
    result.asr_end_of_phase1 = clone(asr);
    // Unseen speakers still get (untrained) rows so both variants can be scored alike.
    grow_tts_speakers(tts, unseen_rows);
  }
  result.tts = std::move(tts);
  result.asr = std::move(asr);
  return result;
}

DistillTtsResult distill_tts(const TtsBundle& teacher, const Corpus& unpaired_text, int target_speaker,
                             StageContext& ctx) {
  const auto& cfg = ctx.cfg;
  require(target_speaker >= 0 && target_speaker < teacher.model.speaker_count(),
          "distill_tts: target speaker is not in the teacher's speaker table");
  require(!unpaired_text.empty(), "distill_tts: no unpaired text");
  std::size_t n = unpaired_text.size();
  if (cfg.kd_tts_max_texts > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.kd_tts_max_texts));

  DistillTtsResult r;
  r.diagnostics.resize(n);
  std::vector<std::shared_ptr<const MelMatrix>> mels(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const auto& src = unpaired_text[i];
    if (!src.text || src.text->empty()) throw StageAbort("distill_tts: item '" + src.id + "' has no text");
    auto syn = synthesize(teacher, *src.text, target_speaker, cfg);
    auto& d = r.diagnostics[i];
    d.id = src.id;
    d.text = *src.text;
    const auto words = WordSegmentation::from_text(*src.text);
    if (words.spans.empty()) {
      d.scores.adr = adr(syn.attention, cfg.filter.b);
      d.keep = false;
    } else {
      d.scores = diagnose(syn.attention, words, cfg.filter.b);
      d.keep = filter_decision(d.scores, cfg.filter.wcr_min, cfg.filter.adr_min);
    }
    mels[i] = std::make_shared<const MelMatrix>(std::move(syn.mel));
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (!r.diagnostics[i].keep) continue;
    Utterance u;
    u.id = "kd-tts-" + unpaired_text[i].id;
    u.text = r.diagnostics[i].text;
    u.mel = mels[i];
    u.speaker = target_speaker;
    u.quality = Quality::kHigh;
    u.origin = Origin::kPseudo;
    r.corpus.push_back(std::move(u));
  }
  r.retention = static_cast<double>(r.corpus.size()) / static_cast<double>(n);
  Json j;
  j["stage"] = "distill-tts-filter";
  j["synthesized"] = n;
  j["kept"] = r.corpus.size();
  j["retention"] = r.retention;
  ctx.log.write(j.dump());
  if (r.corpus.empty() || r.retention < cfg.min_retention) {
    std::ostringstream msg;
    msg << "distill_tts: retention " << std::fixed << std::setprecision(1) << 100.0 * r.retention << "% ("
        << r.corpus.size() << " of " << n << ") is below the minimum of " << 100.0 * cfg.min_retention
        << "%; the teacher TTS is too weak to distill";
    throw StageAbort(msg.str());
  }
  r.tts = TtsBundle{TtsModel<float>(teacher.model.dims(), teacher.vocab.size(), teacher.model.speaker_count(),
                                    derive_seed(cfg.seed, "distill.tts.init")),
                    teacher.vocab,
                    {}};
  train_tts(r.tts, pointers({&r.corpus}), cfg.kd_tts, "distill-tts", ctx, derive_seed(cfg.seed, "distill.tts"));
  return r;
}

DistillAsrResult distill_asr(const AsrBundle& teacher_asr, const TtsBundle& teacher_tts, const Corpus& unpaired_text,
                             const Corpus& unpaired_speech, const Corpus& paired_high, const Corpus& paired_low,
                             StageContext& ctx, const std::function<void(const std::string&, std::int64_t)>& on_augment) {
  const auto& cfg = ctx.cfg;
  DistillAsrResult r;
  // D(Y^u): transcribe unpaired speech.
  Corpus transcribed(unpaired_speech.size());
  parallel_for(unpaired_speech.size(), cfg.threads, [&](std::size_t i) {
    const auto& src = unpaired_speech[i];
    if (!src.mel) throw StageAbort("distill_asr: unpaired speech '" + src.id + "' has no mel");
    auto& u = transcribed[i];
    u.id = "kd-asr-y-" + src.id;
    u.text = recognize(teacher_asr, *src.mel, cfg);
    u.mel = src.mel;
    u.speaker = src.speaker;
    u.quality = src.quality;
    u.origin = Origin::kPseudo;
  });
  for (auto& u : transcribed)
    if (!u.text->empty()) r.transcribed.push_back(std::move(u));

  const auto real = pointers({&paired_high, &paired_low});
  r.real_count = r.transcribed.size() + real.size();
  // D(X^u): synthesize over random speakers.
  const auto n_synth = static_cast<std::size_t>(std::llround(cfg.kd_asr_ratio * static_cast<double>(r.real_count)));
  if (n_synth > 0) require(!unpaired_text.empty(), "distill_asr: synthesis requested without unpaired text");
  Rng rng(derive_seed(cfg.seed, "distill.asr.speakers"));
  std::vector<int> speakers(n_synth);
  for (auto& s : speakers) s = static_cast<int>(std::uniform_int_distribution<Index>(0, teacher_tts.model.speaker_count() - 1)(rng));
  r.synthesized.resize(n_synth);
  parallel_for(n_synth, cfg.threads, [&](std::size_t i) {
    const auto& src = unpaired_text[i % unpaired_text.size()];
    auto& u = r.synthesized[i];
    u.id = "kd-asr-x" + std::to_string(i) + "-" + src.id;
    u.text = src.text;
    u.speaker = speakers[i];
    u.origin = Origin::kPseudo;
    u.mel = std::make_shared<const MelMatrix>(synthesize(teacher_tts, *src.text, speakers[i], cfg).mel);
  });
  Json j;
  j["stage"] = "distill-asr-data";
  j["transcribed"] = r.transcribed.size();
  j["synthesized"] = r.synthesized.size();
  j["real"] = r.real_count;
  ctx.log.write(j.dump());

  auto data = pointers({&r.transcribed, &r.synthesized});
  data.insert(data.end(), real.begin(), real.end());
  r.asr = AsrBundle{AsrModel<float>(teacher_asr.model.dims(), teacher_asr.vocab.size(),
                                    derive_seed(cfg.seed, "distill.asr.init")),
                    teacher_asr.vocab,
                    {}};
  const std::uint64_t aug_seed = derive_seed(cfg.seed, "distill.asr.specaugment");
  const auto n_data = data.size();
  auto augment = [&](const Utterance& u, std::int64_t epoch, std::size_t index) {
    if (on_augment) on_augment(u.id, epoch);
    MelSequence seq{*u.mel, u.speaker};
    const auto seed = derive_seed(aug_seed, "item", static_cast<std::uint64_t>(epoch) * n_data + index);
    return spec_augment(seq, cfg.spec_augment, seed).frames;
  };
  train_asr(r.asr, data, cfg.kd_asr, "distill-asr", ctx, derive_seed(cfg.seed, "distill.asr"), {}, augment);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate_asr(const AsrBundle& asr, const Corpus& test, const PipelineConfig& cfg) {
  std::vector<std::string> hyps(test.size());
  parallel_for(test.size(), cfg.threads, [&](std::size_t i) {
    if (!test[i].paired()) throw StageAbort("evaluate_asr: test item '" + test[i].id + "' is not paired");
    hyps[i] = recognize(asr, *test[i].mel, cfg);
  });
  EvalReport report;
  for (std::size_t i = 0; i < test.size(); ++i) report.add(test[i].id, *test[i].text, hyps[i]);
  return report;
}

EvalReport evaluate_tts_toy(const TtsBundle& tts, const Corpus& test, const ToySpec& spec, const PipelineConfig& cfg,
                            const std::set<int>& speakers, std::optional<int> speaker_override) {
  std::vector<const Utterance*> items;
  for (const auto& u : test) {
    if (!u.text) continue;
    const int spk = speaker_override ? *speaker_override : u.speaker.value_or(0);
    if (!speakers.empty() && !speakers.count(spk)) continue;
    items.push_back(&u);
  }
  std::vector<std::string> hyps(items.size());
  parallel_for(items.size(), cfg.threads, [&](std::size_t i) {
    const int spk = speaker_override ? *speaker_override : items[i]->speaker.value_or(0);
    const auto syn = synthesize(tts, *items[i]->text, spk, cfg);
    hyps[i] = oracle_decode(syn.mel, spec, spk);
  });
  EvalReport report;
  for (std::size_t i = 0; i < items.size(); ++i) report.add(items[i]->id, *items[i]->text, hyps[i]);
  return report;
}

}  // namespace lowres
