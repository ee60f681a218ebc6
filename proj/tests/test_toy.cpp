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
#include "lowres/toy.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

using namespace lowres;
namespace fs = std::filesystem;

namespace {

std::string random_sentence(const ToySpec& spec, std::mt19937_64& rng) {
  std::u32string letters;
  for (char32_t c : spec.alphabet)
    if (c != U' ') letters.push_back(c);
  std::uniform_int_distribution<int> words(1, 3), len(2, 5);
  std::uniform_int_distribution<std::size_t> pick(0, letters.size() - 1);
  std::u32string out;
  const int n = words(rng);
  for (int w = 0; w < n; ++w) {
    if (w) out.push_back(U' ');
    const int l = len(rng);
    for (int i = 0; i < l; ++i) out.push_back(letters[pick(rng)]);
  }
  return u32_to_utf8(out);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("generated templates respect the margin and speakers invert") {
  ToySpecOptions o;
  o.speakers = 4;
  const auto spec = ToySpec::generate(o);
  for (Index i = 0; i < spec.templates.rows(); ++i)
    for (Index j = i + 1; j < spec.templates.rows(); ++j)
      CHECK((spec.templates.row(i) - spec.templates.row(j)).norm() >= o.min_margin);
  CHECK(spec.margin >= o.min_margin);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  Eigen::VectorXf v(spec.n_mels);
  for (Index i = 0; i < v.size(); ++i) v[i] = g(rng);
  for (const auto& t : spec.speakers) CHECK((t.invert(t.apply(v)) - v).norm() < 1e-4f);
}

TEST_CASE("render: length, determinism and unknown characters") {
  const auto spec = ToySpec::generate({});
  CHECK(render_toy_speech("a", 0, spec, Quality::kHigh).rows() == spec.frames_per_char);
  CHECK(render_toy_speech("ab c", 2, spec, Quality::kHigh).rows() == 4 * spec.frames_per_char);
  const auto a = render_toy_speech("abc", 1, spec, Quality::kLow, 42);
  const auto b = render_toy_speech("abc", 1, spec, Quality::kLow, 42);
  CHECK(a == b);
  CHECK(a != render_toy_speech("abc", 1, spec, Quality::kLow, 43));
  CHECK_THROWS_AS(render_toy_speech("", 0, spec, Quality::kHigh), ContractViolation);
  CHECK_THROWS_AS(render_toy_speech("az", 0, spec, Quality::kHigh), ContractViolation);
}

TEST_CASE("oracle inverts clean renders with and without a speaker hint") {
  ToySpecOptions o;
  o.speakers = 6;
  const auto spec = ToySpec::generate(o);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto text = random_sentence(spec, rng);
    const int spk = i % 6;
    const auto mel = render_toy_speech(text, spk, spec, Quality::kHigh);
    CHECK(oracle_decode(mel, spec, spk) == text);
    CHECK(oracle_decode(mel, spec) == text);
    // One trailing frame is tolerated.
    MelMatrix longer(mel.rows() + 1, mel.cols());
    longer.topRows(mel.rows()) = mel;
    longer.row(mel.rows()) = mel.row(mel.rows() - 1);
    CHECK(oracle_decode(longer, spec, spk) == text);
  }
}

TEST_CASE("oracle maps floor-valued and empty input to the unknown symbol") {
  const auto spec = ToySpec::generate({});
  const MelMatrix floor = MelMatrix::Constant(3 * spec.frames_per_char, spec.n_mels, -11.5f);
  CHECK(oracle_decode(floor, spec, 0) == "???");
  CHECK(oracle_decode(floor, spec) == "???");
  CHECK(oracle_decode(MelMatrix(0, spec.n_mels), spec) == "?");
}

TEST_CASE("oracle CER stays under 5% at half-margin noise") {
  ToySpecOptions o;
  o.frames_per_char = 8;
  o.speakers = 11;
  auto spec = ToySpec::generate(o);
  spec.noise_std = 0.5f * spec.margin;
  std::mt19937_64 rng(17);
  EvalReport report;
  for (int i = 0; i < 1000; ++i) {
    const auto text = random_sentence(spec, rng);
    const auto mel = render_toy_speech(text, i % 11, spec, Quality::kLow, static_cast<std::uint64_t>(i) + 1);
    report.add(std::to_string(i), text, oracle_decode(mel, spec));
  }
  MESSAGE("oracle CER at noise 0.5 margin: " << report.pooled_cer());
  CHECK(report.pooled_cer() < 5.0);
}

TEST_CASE("spec save and load round trip") {
  const auto spec = ToySpec::generate({});
  const auto path = fs::temp_directory_path() / "lowres-toy-spec.json";
  spec.save(path);
  const auto back = ToySpec::load(path);
  CHECK(back.alphabet == spec.alphabet);
  CHECK(back.templates == spec.templates);
  CHECK(back.positions == spec.positions);
  REQUIRE(back.speakers.size() == spec.speakers.size());
  CHECK(back.speakers[3].permutation == spec.speakers[3].permutation);
  CHECK(back.speakers[3].gain == spec.speakers[3].gain);
  const auto text = std::string("abc");
  CHECK(render_toy_speech(text, 3, back, Quality::kLow, 9) == render_toy_speech(text, 3, spec, Quality::kLow, 9));
}

TEST_CASE("corpora: sizes at scale 1/10, disjoint speakers, held-out texts") {
  ToyBundleOptions o;
  o.sizes.scale = 0.1;
  const auto b = gen_toy_corpora(o);
  CHECK(b.paired_high.size() == 5);
  CHECK(b.paired_low.size() == 100);
  CHECK(b.unpaired_seen.size() == 200);
  CHECK(b.unpaired_unseen.size() == 500);
  CHECK(b.unpaired_text.size() == 2000);

  std::set<int> seen(b.seen_speakers.begin(), b.seen_speakers.end());
  for (int s : b.unseen_speakers) CHECK_FALSE(seen.count(s));
  CHECK_FALSE(seen.count(b.target_speaker));
  for (const auto& u : b.unpaired_seen) CHECK(seen.count(*u.speaker));
  for (const auto& u : b.unpaired_unseen) CHECK_FALSE(seen.count(*u.speaker));
  for (const auto& u : b.paired_high) CHECK(*u.speaker == b.target_speaker);

  std::set<std::string> test_texts;
  for (const auto& u : b.test) test_texts.insert(*u.text);
  for (const auto* c : {&b.paired_high, &b.paired_low, &b.unpaired_text})
    for (const auto& u : *c) CHECK_FALSE(test_texts.count(*u.text));

  // Rich corpora use a disjoint alphabet apart from the space.
  for (const auto& u : b.rich_tts)
    for (char32_t c : utf8_to_u32(*u.text)) CHECK((c == U' ' || b.spec.char_index(c) < 0));
}

TEST_CASE("corpora: same seed gives byte-identical manifests") {
  ToyBundleOptions o;
  o.sizes.scale = 0.01;
  auto a = gen_toy_corpora(o);
  auto b = gen_toy_corpora(o);
  const auto da = fs::temp_directory_path() / "lowres-toy-a";
  const auto db = fs::temp_directory_path() / "lowres-toy-b";
  fs::remove_all(da);
  fs::remove_all(db);
  save_toy_bundle(da, a);
  save_toy_bundle(db, b);
  for (const auto& entry : fs::recursive_directory_iterator(da)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), da);
    REQUIRE(fs::exists(db / rel));
    CHECK_MESSAGE(slurp(entry.path()) == slurp(db / rel), rel.string());
  }
}
