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

#include "lowres/eval.hpp"

#include "lowres/corpus.hpp"

#include <iomanip>
#include <sstream>

namespace lowres {

double EditOps::rate() const {
  require(reference_length > 0, "error rate needs a non-empty reference");
  return 100.0 * static_cast<double>(total()) / static_cast<double>(reference_length);
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

EditOps word_edits(const std::string& ref, const std::string& hyp) {
  return edit_distance(split_words(ref), split_words(hyp));
}

EditOps char_edits(const std::string& ref, const std::string& hyp) {
  const auto r = utf8_to_u32(ref), h = utf8_to_u32(hyp);
  return edit_distance(std::vector<char32_t>(r.begin(), r.end()), std::vector<char32_t>(h.begin(), h.end()));
}

double wer(const std::string& ref, const std::string& hyp) {
  const auto ops = word_edits(ref, hyp);
  require(ops.reference_length > 0, "wer: empty reference");
  return ops.rate();
}

double cer(const std::string& ref, const std::string& hyp) {
  const auto ops = char_edits(ref, hyp);
  require(ops.reference_length > 0, "cer: empty reference");
  return ops.rate();
}

void EvalReport::add(const std::string& id, const std::string& reference, const std::string& hypothesis) {
  EvalRecord r{id, reference, hypothesis, word_edits(reference, hypothesis), char_edits(reference, hypothesis)};
  words_ += r.words;
  chars_ += r.chars;
  records_.push_back(std::move(r));
}

void EvalReport::write(std::ostream& out) const {
  out << "# id\treference\thypothesis\tword_sub\tword_del\tword_ins\twords\tchar_sub\tchar_del\tchar_ins\tchars\n";
  for (const auto& r : records_) {
    out << r.id << '\t' << r.reference << '\t' << r.hypothesis << '\t' << r.words.substitutions << '\t'
        << r.words.deletions << '\t' << r.words.insertions << '\t' << r.words.reference_length << '\t'
        << r.chars.substitutions << '\t' << r.chars.deletions << '\t' << r.chars.insertions << '\t'
        << r.chars.reference_length << '\n';
  }
  out << std::fixed << std::setprecision(2) << "# pooled WER " << (words_.reference_length ? pooled_wer() : 0.0)
      << "% CER " << (chars_.reference_length ? pooled_cer() : 0.0) << "% over " << records_.size()
      << " utterances\n";
  out.unsetf(std::ios::floatfield);
}

}  // namespace lowres
