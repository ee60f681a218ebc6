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

// Training stages: pre-training on a rich language, two-stage fine-tuning,
// dual transformation between TTS and ASR, and knowledge distillation into
// fresh TTS and ASR models.

#pragma once

#include "lowres/audio.hpp"
#include "lowres/checkpoint.hpp"
#include "lowres/config.hpp"
#include "lowres/corpus.hpp"
#include "lowres/diagnostics.hpp"
#include "lowres/eval.hpp"
#include "lowres/models.hpp"
#include "lowres/toy.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace lowres {

/// NaN/inf loss or any other unrecoverable training failure.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage precondition or post-condition failed (for example too few
/// utterances survived filtering).
class StageAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TtsBundle {
  TtsModel<float> model;
  Vocabulary vocab;
  AdamState<float> optimizer;
};

struct AsrBundle {
  AsrModel<float> model;
  Vocabulary vocab;
  AdamState<float> optimizer;
};

void save_tts(const std::filesystem::path& path, const TtsBundle& tts,
              const std::map<std::string, std::string>& info = {});
void save_asr(const std::filesystem::path& path, const AsrBundle& asr,
              const std::map<std::string, std::string>& info = {});
TtsBundle load_tts(const std::filesystem::path& path);
AsrBundle load_asr(const std::filesystem::path& path);
Checkpoint to_checkpoint(const TtsBundle& tts, const std::map<std::string, std::string>& info = {});
Checkpoint to_checkpoint(const AsrBundle& asr, const std::map<std::string, std::string>& info = {});
TtsBundle tts_from_checkpoint(const Checkpoint& ckpt);
AsrBundle asr_from_checkpoint(const Checkpoint& ckpt);

/// Builds a model for `vocab` (and `speakers` rows) with the architecture
/// stored in `ckpt`, copying every parameter except those in `fresh`, which
/// keep their new random initialization.
TtsBundle tts_init_from_pretrained(const Checkpoint& ckpt, const Vocabulary& vocab, Index speakers,
                                   const std::set<std::string>& fresh, std::uint64_t seed);
AsrBundle asr_init_from_pretrained(const Checkpoint& ckpt, const Vocabulary& vocab,
                                   const std::set<std::string>& fresh, std::uint64_t seed);

struct TrainSchedule {
  std::int64_t steps = 1000;
  Index batch_frames = 20000;  // frame budget per batch
  std::int64_t warmup = 4000;
  double lr_scale = 1.0;
  double clip_norm = 1.0;  // 0 disables clipping
};

struct PipelineConfig {
  ModelDims dims;
  std::uint64_t seed = 1;
  int threads = 1;  // inference workers; results do not depend on it
  std::int64_t log_every = 50;
  std::int64_t checkpoint_every = 0;  // 0: stage boundaries only

  TrainSchedule pretrain_tts;
  TrainSchedule pretrain_asr;

  std::int64_t finetune_stage1_steps = 100;
  TrainSchedule finetune_tts;  // stage 2
  TrainSchedule finetune_asr;  // stage 2

  std::int64_t dt_steps = 1000;
  std::int64_t dt_phase_switch = -1;  // -1: halfway
  int dt_text_batch = 16;
  int dt_speech_batch = 16;
  TrainSchedule dt_tts;  // steps unused
  TrainSchedule dt_asr;  // steps unused

  FilterThresholds filter;
  double min_retention = 0.2;
  std::int64_t kd_tts_max_texts = 0;  // 0: every unpaired text
  TrainSchedule kd_tts;

  double kd_asr_ratio = 3.0;  // synthesized utterances per real utterance
  TrainSchedule kd_asr;
  SpecAugmentConfig spec_augment;

  double stop_threshold = 0.5;
  double max_frames_factor = 10.0;  // inference frame cap per character
  Index max_decode_length = 200;

  /// Reads "<section>.<field>" keys; see README for the full list.
  static PipelineConfig from_config(const Config& cfg);
};

/// Append-only JSON-lines log. A default-constructed log discards records.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path);
  void write(const std::string& json_line);
  bool enabled() const { return out_ != nullptr; }

 private:
  std::shared_ptr<std::ofstream> out_;
};

struct StageContext {
  PipelineConfig cfg;
  MetricsLog log;
  std::filesystem::path checkpoint_dir;  // empty: no intermediate checkpoints
};

// ---------------------------------------------------------------------------
// Primitive helpers

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

Index tts_max_frames(const PipelineConfig& cfg, std::size_t text_length);

/// Mean training loss over the final logged window.
struct TrainSummary {
  std::int64_t steps = 0;
  double first_loss = 0;
  double last_loss = 0;
};

/// Plain supervised training on paired utterances (every item needs text,
/// mel and, for TTS, a speaker). `trainable` restricts updates by name.
TrainSummary train_tts(TtsBundle& tts, const std::vector<const Utterance*>& data, const TrainSchedule& schedule,
                       const std::string& stage, StageContext& ctx, std::uint64_t seed,
                       const std::set<std::string>& trainable = {});
TrainSummary train_asr(AsrBundle& asr, const std::vector<const Utterance*>& data, const TrainSchedule& schedule,
                       const std::string& stage, StageContext& ctx, std::uint64_t seed,
                       const std::set<std::string>& trainable = {},
                       const std::function<MelMatrix(const Utterance&, std::int64_t epoch, std::size_t index)>&
                           transform = {});

struct Synthesis {
  MelMatrix mel;
  AttentionMatrix attention;
  bool hit_max_frames = false;
};
Synthesis synthesize(const TtsBundle& tts, const std::string& text, int speaker, const PipelineConfig& cfg);
std::string recognize(const AsrBundle& asr, const MelMatrix& mel, const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// Stages

struct PretrainResult {
  TtsBundle tts;
  AsrBundle asr;
};
PretrainResult pretrain(const Corpus& rich_tts, const Corpus& rich_asr, StageContext& ctx);

struct FinetuneResult {
  TtsBundle tts;
  AsrBundle asr;
  /// Every non-embedding parameter was bit-identical before and after stage 1.
  bool stage1_freeze_held = false;
};
/// `vocab` covers the low-resource texts; `speakers` is the TTS table size.
FinetuneResult finetune(const Checkpoint& pretrained_tts, const Checkpoint& pretrained_asr, const Vocabulary& vocab,
                        Index speakers, const Corpus& paired_high, const Corpus& paired_low, StageContext& ctx);

/// One line per pseudo pair produced during dual transformation.
struct ProvenanceRecord {
  std::int64_t step = 0;
  std::string direction;  // "text->speech" or "speech->text"
  std::string source_id;
  int speaker = -1;
  int phase = 1;
};

struct DualTransformResult {
  TtsBundle tts;
  AsrBundle asr;
  std::vector<ProvenanceRecord> provenance;
  std::optional<TtsBundle> tts_end_of_phase1;
  std::optional<AsrBundle> asr_end_of_phase1;
};

/// `unseen_speakers` lists the speaker ids of Y^u_unseen; the TTS table is
/// grown to cover them when phase 2 begins.
DualTransformResult dual_transform(TtsBundle tts, AsrBundle asr, const Corpus& unpaired_text,
                                   const Corpus& unpaired_seen, const Corpus& unpaired_unseen,
                                   const Corpus& paired_high, const Corpus& paired_low, StageContext& ctx);

struct FilteredItem {
  std::string id;
  std::string text;
  DiagnosticScores scores;
  bool keep = false;
};

struct DistillTtsResult {
  TtsBundle tts;
  Corpus corpus;  // the filtered single-speaker training corpus
  std::vector<FilteredItem> diagnostics;
  double retention = 0;
};
DistillTtsResult distill_tts(const TtsBundle& teacher, const Corpus& unpaired_text, int target_speaker,
                             StageContext& ctx);

struct DistillAsrResult {
  AsrBundle asr;
  Corpus transcribed;   // D(Y^u)
  Corpus synthesized;   // D(X^u)
  std::size_t real_count = 0;
};
/// `on_augment(id, epoch)` fires once per SpecAugment application.
DistillAsrResult distill_asr(const AsrBundle& teacher_asr, const TtsBundle& teacher_tts, const Corpus& unpaired_text,
                             const Corpus& unpaired_speech, const Corpus& paired_high, const Corpus& paired_low,
                             StageContext& ctx,
                             const std::function<void(const std::string&, std::int64_t)>& on_augment = {});

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate_asr(const AsrBundle& asr, const Corpus& test, const PipelineConfig& cfg);

/// Synthesizes each test text with its own speaker (or `speaker_override`),
/// decodes it with the toy oracle, and scores against the text. Only items
/// whose speaker is in `speakers` are used when that set is non-empty.
EvalReport evaluate_tts_toy(const TtsBundle& tts, const Corpus& test, const ToySpec& spec, const PipelineConfig& cfg,
                            const std::set<int>& speakers = {}, std::optional<int> speaker_override = std::nullopt);

/// Toy bundle options from "toy.*" keys. Rendering options apply to both
/// languages; alphabets and template seeds stay distinct.
ToyBundleOptions toy_bundle_options(const Config& cfg);

/// Vocabulary over every text in the given corpora.
Vocabulary vocabulary_for(const std::vector<const Corpus*>& corpora);
std::vector<const Utterance*> pointers(const std::vector<const Corpus*>& corpora);

}  // namespace lowres
