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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "lowres/eval.hpp"
#include "oracles.hpp"

#include <random>
#include <sstream>

using namespace lowres;

TEST_CASE("wer: insertion-heavy hypothesis exceeds 100%") {
  CHECK(wer("an apple", "what is history") == 150.0);
  const auto ops = word_edits("an apple", "what is history");
  CHECK(ops.substitutions == 2);
  CHECK(ops.insertions == 1);
  CHECK(ops.deletions == 0);
}

TEST_CASE("wer and cer: identical strings and empty hypothesis") {
  CHECK(wer("a b c", "a b c") == 0.0);
  CHECK(cer("abc", "") == 100.0);
  CHECK(char_edits("abc", "").deletions == 3);
  CHECK_THROWS_AS(wer("", "x"), ContractViolation);
  CHECK_THROWS_AS(cer("", ""), ContractViolation);
}

TEST_CASE("cer counts code points, not bytes") {
  CHECK(char_edits("αβγ", "αγ").total() == 1);
  CHECK(char_edits("αβγ", "αγ").reference_length == 3);
}

TEST_CASE("split_words collapses runs of whitespace") {
  const auto w = split_words("  one \t two  three ");
  REQUIRE(w.size() == 3);
  CHECK(w[0] == "one");
  CHECK(w[2] == "three");
}

TEST_CASE("edit distance agrees with exhaustive alignment search") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(0, 6), tok(0, 3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<int> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& x : a) x = tok(rng);
    for (auto& x : b) x = tok(rng);
    const auto ops = edit_distance(a, b);
    const auto best = lowres::testing::brute_force_edit_distance(a, b);
    CHECK(ops.total() == best);
    // The reported operations must reproduce the length difference.
    CHECK(static_cast<Index>(a.size()) - ops.deletions + ops.insertions == static_cast<Index>(b.size()));
  }
}

TEST_CASE("report pools edits over utterances rather than averaging rates") {
  EvalReport r;
  r.add("u1", "ab", "ab");          // 0 of 2
  r.add("u2", "abcdefgh", "abcd");  // 4 of 8
  CHECK(r.pooled_cer() == doctest::Approx(40.0));
  std::ostringstream out;
  r.write(out);
  CHECK(out.str().find("u2\t") != std::string::npos);
  CHECK(out.str().find("CER 40") != std::string::npos);
}
