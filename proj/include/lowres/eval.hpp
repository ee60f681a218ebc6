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

// Word and character error rates.

#pragma once

#include "lowres/tensor.hpp"

#include <algorithm>
#include <ostream>
#include <string>
#include <vector>

namespace lowres {

/// Edit operation counts of one optimal alignment.
struct EditOps {
  Index substitutions = 0;
  Index deletions = 0;
  Index insertions = 0;
  Index reference_length = 0;

  Index total() const { return substitutions + deletions + insertions; }
  EditOps& operator+=(const EditOps& o) {
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    reference_length += o.reference_length;
    return *this;
  }
  /// 100 * edits / reference length.
  double rate() const;
};

/// Unit-cost Levenshtein alignment. On ties the backtrace prefers
/// substitution (or match), then deletion, then insertion.
template <typename Token>
EditOps edit_distance(const std::vector<Token>& ref, const std::vector<Token>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<Index> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> Index& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<Index>(i);
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<Index>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});
  EditOps ops;
  ops.reference_length = static_cast<Index>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const Index cost = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      if (at(i, j) == at(i - 1, j - 1) + cost) {
        ops.substitutions += cost;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++ops.deletions;
      --i;
    } else {
      ++ops.insertions;
      --j;
    }
  }
  return ops;
}

std::vector<std::string> split_words(const std::string& text);

EditOps word_edits(const std::string& ref, const std::string& hyp);
/// Character level over Unicode code points; spaces count as characters.
EditOps char_edits(const std::string& ref, const std::string& hyp);

/// Percentages; the reference must be non-empty.
double wer(const std::string& ref, const std::string& hyp);
double cer(const std::string& ref, const std::string& hyp);

struct EvalRecord {
  std::string id;
  std::string reference;
  std::string hypothesis;
  EditOps words;
  EditOps chars;
};

/// Per-utterance records with pooled totals (sum of edits over sum of
/// reference lengths).
class EvalReport {
 public:
  void add(const std::string& id, const std::string& reference, const std::string& hypothesis);

  const std::vector<EvalRecord>& records() const { return records_; }
  const EditOps& pooled_words() const { return words_; }
  const EditOps& pooled_chars() const { return chars_; }
  double pooled_wer() const { return words_.rate(); }
  double pooled_cer() const { return chars_.rate(); }

  /// One tab-separated line per utterance, then a '#' footer line.
  void write(std::ostream& out) const;

 private:
  std::vector<EvalRecord> records_;
  EditOps words_, chars_;
};

}  // namespace lowres
