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

// Attention alignment diagnostics: word coverage ratio (WCR) and attention
// diagonal ratio (ADR), used to filter synthesized utterances.
//
// Orientation: an AttentionMatrix has one row per decoder frame s and one
// column per encoder character t, i.e. A(s, t).

#pragma once

#include "lowres/layers.hpp"

#include <string>
#include <vector>

namespace lowres {

using AttentionMatrix = Mat<double>;

/// Half-open character range [begin, begin + length).
struct WordSpan {
  Index begin = 0;
  Index length = 0;
};

struct WordSegmentation {
  std::vector<WordSpan> spans;

  /// Words are maximal runs of non-space characters.
  static WordSegmentation from_text(const std::string& utf8_text);
  /// Same, over encoded ids; `separator` is the id of the space character.
  static WordSegmentation from_ids(const std::vector<int>& ids, int separator);
};

struct DiagnosticScores {
  double wcr = 0;
  double adr = 0;
  double k = 0;
  int b = 0;
};

/// Element-wise mean over layers and heads.
template <typename Scalar>
AttentionMatrix aggregate_attention(const AttentionStacks<Scalar>& stacks) {
  require(!stacks.empty(), "aggregate_attention: empty stack");
  const Mat<Scalar>* first = nullptr;
  for (const auto& layer : stacks) {
    require(!layer.empty(), "aggregate_attention: layer without heads");
    if (!first) first = &layer.front();
  }
  AttentionMatrix total = AttentionMatrix::Zero(first->rows(), first->cols());
  Index count = 0;
  for (const auto& layer : stacks)
    for (const auto& head : layer) {
      require(head.rows() == first->rows() && head.cols() == first->cols(),
              "aggregate_attention: matrices differ in shape");
      total += head.template cast<double>();
      ++count;
    }
  return total / static_cast<double>(count);
}

/// min over words of max over the word's characters and all frames of A.
double wcr(const AttentionMatrix& attention, const WordSegmentation& words);

/// Fraction of attention mass with |s - round(k t)| <= b (1-based s, t;
/// k = S / T; window clipped to [1, S]).
double adr(const AttentionMatrix& attention, int b);

DiagnosticScores diagnose(const AttentionMatrix& attention, const WordSegmentation& words, int b);

struct FilterThresholds {
  double wcr_min = 0.7;
  double adr_min = 0.7;
  int b = 10;
};

/// Keep iff wcr >= wcr_min and adr >= adr_min.
bool filter_decision(const DiagnosticScores& scores, double wcr_min = 0.7, double adr_min = 0.7);

}  // namespace lowres
