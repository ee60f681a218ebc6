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

#include "lowres/diagnostics.hpp"

#include "lowres/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lowres {

namespace {

template <typename Seq, typename IsSeparator>
WordSegmentation segment(const Seq& seq, IsSeparator is_sep) {
  WordSegmentation seg;
  Index start = -1;
  const auto n = static_cast<Index>(seq.size());
  for (Index i = 0; i <= n; ++i) {
    const bool sep = i == n || is_sep(seq[static_cast<std::size_t>(i)]);
    if (!sep && start < 0) start = i;
    if (sep && start >= 0) {
      seg.spans.push_back({start, i - start});
      start = -1;
    }
  }
  return seg;
}

}  // namespace

WordSegmentation WordSegmentation::from_text(const std::string& utf8_text) {
  return segment(utf8_to_u32(utf8_text), [](char32_t c) { return c == U' '; });
}

WordSegmentation WordSegmentation::from_ids(const std::vector<int>& ids, int separator) {
  return segment(ids, [separator](int id) { return id == separator; });
}

double wcr(const AttentionMatrix& attention, const WordSegmentation& words) {
  require(!words.spans.empty(), "wcr: segmentation has no words");
  require(attention.size() > 0, "wcr: empty attention matrix");
  double result = std::numeric_limits<double>::infinity();
  for (const auto& span : words.spans) {
    require(span.length > 0 && span.begin >= 0 && span.begin + span.length <= attention.cols(),
            "wcr: word span outside the character axis");
    result = std::min(result, attention.middleCols(span.begin, span.length).maxCoeff());
  }
  return result;
}

double adr(const AttentionMatrix& attention, int b) {
  require(b >= 0, "adr: b must be non-negative");
  require(attention.size() > 0, "adr: empty attention matrix");
  const Index s_len = attention.rows(), t_len = attention.cols();
  const double k = static_cast<double>(s_len) / static_cast<double>(t_len);
  double inside = 0;
  for (Index t = 1; t <= t_len; ++t) {
    const auto center = static_cast<Index>(std::llround(k * static_cast<double>(t)));
    const Index lo = std::max<Index>(1, center - b);
    const Index hi = std::min<Index>(s_len, center + b);
    if (lo <= hi) inside += attention.col(t - 1).segment(lo - 1, hi - lo + 1).sum();
  }
  const double total = attention.sum();
  require(total > 0, "adr: attention matrix has no mass");
  return inside / total;
}

DiagnosticScores diagnose(const AttentionMatrix& attention, const WordSegmentation& words, int b) {
  DiagnosticScores scores;
  scores.wcr = wcr(attention, words);
  scores.adr = adr(attention, b);
  scores.k = static_cast<double>(attention.rows()) / static_cast<double>(attention.cols());
  scores.b = b;
  return scores;
}

bool filter_decision(const DiagnosticScores& scores, double wcr_min, double adr_min) {
  return scores.wcr >= wcr_min && scores.adr >= adr_min;
}

}  // namespace lowres
