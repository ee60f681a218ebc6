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

// Synthetic mel-domain "language": each character renders as a fixed
// template held for frames_per_char frames (plus a shared within-character
// position pattern), passed through an invertible per-speaker channel
// transform. Because the mapping has an exact inverse, recognition and
// synthesis accuracy can be scored without human listeners.

#pragma once

#include "lowres/corpus.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lowres {

/// out[c] = gain[c] * in[permutation[c]] + offset[c]
struct SpeakerTransform {
  std::vector<int> permutation;
  Eigen::VectorXf gain;
  Eigen::VectorXf offset;

  Eigen::VectorXf apply(const Eigen::VectorXf& in) const;
  Eigen::VectorXf invert(const Eigen::VectorXf& out) const;
};

struct ToySpecOptions {
  std::string alphabet = "abcdefghijklmnop ";  // space separates words
  int frames_per_char = 4;
  int n_mels = 80;
  int speakers = 11;
  float template_scale = 1.0f;
  float position_scale = 0.5f;
  /// Minimum pairwise L2 distance between character templates.
  float min_margin = 8.0f;
  int adjacent_swaps = 6;     // channel swaps per speaker permutation
  float gain_spread = 0.25f;  // gains uniform in [1 - spread, 1 + spread]
  float offset_std = 0.3f;
  float noise_std = 0.3f;  // low-quality rendering noise
  std::uint64_t seed = 1;
};

struct ToySpec {
  std::u32string alphabet;
  int frames_per_char = 4;
  int n_mels = 80;
  MelMatrix templates;  // alphabet.size() x n_mels
  MelMatrix positions;  // frames_per_char x n_mels
  std::vector<SpeakerTransform> speakers;
  float noise_std = 0.3f;
  float margin = 0.0f;  // measured min pairwise template distance
  std::uint64_t seed = 1;

  /// Draws templates until the margin invariant holds, then speakers.
  static ToySpec generate(const ToySpecOptions& options);

  int char_index(char32_t c) const;
  float unknown_radius() const;

  void save(const std::filesystem::path& path) const;
  static ToySpec load(const std::filesystem::path& path);
};

/// Concatenated speaker-transformed templates; Quality::kLow adds seeded
/// Gaussian noise of spec.noise_std.
MelMatrix render_toy_speech(const std::string& text, int speaker, const ToySpec& spec,
                            Quality quality, std::uint64_t noise_seed = 0);

inline constexpr char kUnknownSymbol = '?';

/// Nearest-template decoding per character slot. Without a speaker hint the
/// speaker with the smallest total distance is chosen. Slots whose nearest
/// template is beyond spec.unknown_radius() decode to kUnknownSymbol.
std::string oracle_decode(const MelMatrix& mel, const ToySpec& spec,
                          std::optional<int> speaker_hint = std::nullopt);

struct ToyCorpusSizes {
  // Paired/unpaired sizes at scale 1.
  int paired_high = 50;
  int paired_low = 1000;
  int unpaired_speech_seen = 2000;
  int unpaired_speech_unseen = 5000;
  int unpaired_text = 20000;
  int rich_tts = 1000;
  int rich_asr = 2000;
  int test = 100;
  double scale = 1.0;

  int scaled(int n) const;
};

struct ToyWordOptions {
  int lexicon_size = 120;
  int min_word_length = 2;
  int max_word_length = 4;
  int min_words = 1;
  int max_words = 3;
};

/// Complete seeded bundle. Speaker ids: 0 is the target speaker, 1..seen are
/// the seen speakers (paired low-quality data), the rest are unseen.
struct ToyBundle {
  ToySpec spec;       // low-resource language
  ToySpec rich_spec;  // disjoint alphabet, independent templates
  int target_speaker = 0;
  std::vector<int> seen_speakers;
  std::vector<int> unseen_speakers;
  Corpus paired_high;      // D_h
  Corpus paired_low;       // D_l
  Corpus unpaired_seen;    // Y^u seen (mels only)
  Corpus unpaired_unseen;  // Y^u unseen (mels only)
  Corpus unpaired_text;    // X^u (texts only)
  Corpus rich_tts;
  Corpus rich_asr;
  Corpus test;  // held-out paired utterances over all low-resource speakers
};

struct ToyBundleOptions {
  ToySpecOptions spec;
  ToySpecOptions rich_spec;
  ToyCorpusSizes sizes;
  ToyWordOptions words;
  int seen_speakers = 5;
  int unseen_speakers = 5;
  int rich_speakers = 10;
  std::uint64_t seed = 7;

  ToyBundleOptions();
};

ToyBundle gen_toy_corpora(const ToyBundleOptions& options);

/// Writes every corpus as a manifest (with mel blobs) plus both toy specs.
void save_toy_bundle(const std::filesystem::path& dir, ToyBundle& bundle);

}  // namespace lowres
