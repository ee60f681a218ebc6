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

#include "lowres/audio.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace lowres {

using TextSequence = std::vector<int>;

enum class Quality { kHigh, kLow };
enum class Origin { kReal, kPseudo };

/// One corpus entry. Text is stored normalized (UTF-8); encode it with a
/// Vocabulary when feeding a model.
struct Utterance {
  std::string id;
  std::optional<std::string> text;
  std::shared_ptr<const MelMatrix> mel;
  std::string mel_path;  // empty when the mel lives only in memory
  std::optional<int> speaker;
  Quality quality = Quality::kLow;
  Origin origin = Origin::kReal;

  bool paired() const { return text.has_value() && mel != nullptr; }
  Index frames() const { return mel ? mel->rows() : 0; }
};

using Corpus = std::vector<Utterance>;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NormalizationError : public std::runtime_error {
 public:
  NormalizationError(const std::string& message, char32_t offending)
      : std::runtime_error(message), character(offending) {}
  char32_t character;
};

std::u32string utf8_to_u32(const std::string& s);
std::string u32_to_utf8(const std::u32string& s);

/// Character inventory plus the reserved <pad>, <bos>, <eos> ids 0..2.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::u32string symbols);

  /// Sorted unique characters of all texts (already normalized).
  static Vocabulary from_texts(const std::vector<std::string>& texts);

  int size() const { return static_cast<int>(symbols_.size()) + kReserved; }
  const std::u32string& symbols() const { return symbols_; }
  bool contains(char32_t c) const { return index_.count(c) != 0; }

  TextSequence encode(const std::string& text) const;
  /// Reserved ids are skipped; unknown ids decode to '?'.
  std::string decode(const TextSequence& ids) const;

  /// UTF-8 symbol list, used for checkpoint metadata.
  std::string serialize() const { return u32_to_utf8(symbols_); }
  static Vocabulary deserialize(const std::string& s) { return Vocabulary(utf8_to_u32(s)); }

  bool operator==(const Vocabulary& other) const { return symbols_ == other.symbols_; }

  static constexpr int kReserved = 3;

 private:
  std::u32string symbols_;
  std::unordered_map<char32_t, int> index_;
};

/// A rewrite applied during normalization. Literal rules match exact text;
/// pattern rules are ECMAScript regular expressions.
struct RewriteRule {
  std::string from;
  std::string to;
  bool is_pattern = false;
};

/// Parses "literal<TAB>replacement" and "re:pattern<TAB>replacement" lines;
/// '#' starts a comment line.
std::vector<RewriteRule> parse_rewrite_rules(const std::string& text);

/// Rules applied left to right in rule order; at each position the longest
/// matching rule wins. Output is lowercased with whitespace collapsed. When
/// `vocab` is given, any character outside it raises NormalizationError.
std::string normalize_text(const std::string& raw, const std::vector<RewriteRule>& rules,
                           const Vocabulary* vocab = nullptr);

/// Default rules: month abbreviations and ordinal day numbers 1st..31st.
std::vector<RewriteRule> default_english_rules();

/// Manifest: one utterance per line, tab-separated
///   id  speaker|-  H|L  text|-  mel-path|-
/// Relative mel paths resolve against the manifest's directory.
Corpus load_manifest(const std::filesystem::path& path, bool load_mels = true);

/// Writes the manifest and, for utterances that only hold an in-memory mel,
/// a blob under `blob_dir` (relative to the manifest) named by id.
void save_manifest(const std::filesystem::path& path, Corpus& corpus,
                   const std::string& blob_dir = "mels");

/// Paired set repeated ceil(|pseudo|/|paired|) times, truncated to
/// |pseudo|, concatenated with pseudo, then shuffled by seed.
std::vector<const Utterance*> mix_upsampled(const std::vector<const Utterance*>& paired,
                                            const std::vector<const Utterance*>& pseudo,
                                            std::uint64_t seed);

/// Greedy in-order packing into batches whose total frame count is at most
/// `max_frames`. Returns index ranges into `frame_counts`.
std::vector<std::vector<std::size_t>> batch_by_frames(const std::vector<Index>& frame_counts,
                                                      Index max_frames = 20000);

}  // namespace lowres
