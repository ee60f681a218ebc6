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

#include "lowres/audio.hpp"
#include "lowres/corpus.hpp"

#include <filesystem>
#include <fstream>
#include <map>

using namespace lowres;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("lowres-corpus-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::shared_ptr<const MelMatrix> ramp_mel(Index frames, Index mels, float base) {
  MelMatrix m(frames, mels);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = base + 0.25f * static_cast<float>(i);
  return std::make_shared<const MelMatrix>(std::move(m));
}

}  // namespace

TEST_CASE("normalize: date abbreviation and ordinal") {
  const auto rules = default_english_rules();
  CHECK(normalize_text("Sep 7th", rules) == "september seventh");
  CHECK(normalize_text("jan 21st and dec 31st", rules) == "january twenty first and december thirty first");
}

TEST_CASE("normalize: identity on normalized text and whitespace collapse") {
  const auto rules = default_english_rules();
  CHECK(normalize_text("already normal", rules) == "already normal");
  CHECK(normalize_text("a  b", {}) == "a b");
  CHECK(normalize_text("  a \t b  ", {}) == "a b");
}

TEST_CASE("normalize: literal rules respect word boundaries and longest match") {
  const auto rules = parse_rewrite_rules("# comment\nst\tstreet\nsept\tseptember\nsep\tseptember\n");
  REQUIRE(rules.size() == 3);
  CHECK(normalize_text("first st", rules) == "first street");
  CHECK(normalize_text("sept", rules) == "september");
}

TEST_CASE("normalize: pattern rules and residual character errors") {
  const auto rules = parse_rewrite_rules("re:([0-9])\\.([0-9])\t$1 point $2\n");
  CHECK(normalize_text("3.5", rules) == "3 point 5");
  const Vocabulary vocab(U"ab ");
  CHECK(normalize_text("AB ba", {}, &vocab) == "ab ba");
  try {
    normalize_text("abc", {}, &vocab);
    FAIL("expected a normalization error");
  } catch (const NormalizationError& e) {
    CHECK(e.character == U'c');
    CHECK(std::string(e.what()).find("c") != std::string::npos);
  }
}

TEST_CASE("vocabulary: lossless round trip and stable ordering") {
  const std::vector<std::string> texts{"hello world", "δέκα", "zebra"};
  const auto vocab = Vocabulary::from_texts(texts);
  for (const auto& t : texts) CHECK(vocab.decode(vocab.encode(t)) == t);
  CHECK(Vocabulary::deserialize(vocab.serialize()) == vocab);
  CHECK(Vocabulary::from_texts({"zebra", "hello world", "δέκα"}) == vocab);
  CHECK(vocab.encode("h").front() >= Vocabulary::kReserved);
  CHECK_THROWS_AS(vocab.encode("?"), NormalizationError);
  CHECK_THROWS(Vocabulary(U"aa"));
}

TEST_CASE("utf8: invalid and truncated sequences are rejected") {
  CHECK(utf8_to_u32("aé") == U"aé");
  CHECK_THROWS(utf8_to_u32(std::string("\xc3", 1)));
  CHECK_THROWS(utf8_to_u32(std::string("\xff", 1)));
  CHECK(u32_to_utf8(U"δ") == "δ");
}

TEST_CASE("manifest: empty file and order preservation") {
  const auto dir = scratch_dir("order");
  write_file(dir / "empty.tsv", "");
  CHECK(load_manifest(dir / "empty.tsv").empty());
  write_file(dir / "m.tsv", "c\t1\tH\tthird\t-\na\t-\tL\tfirst\t-\nb\t2\tL\t-\t-\n");
  CHECK_THROWS_AS(load_manifest(dir / "m.tsv"), CorpusError);  // "b" has neither text nor mel
  write_file(dir / "m.tsv", "c\t1\tH\tthird\t-\na\t-\tL\tfirst\t-\nb\t2\tL\tsecond\t-\n");
  const auto c = load_manifest(dir / "m.tsv");
  REQUIRE(c.size() == 3);
  CHECK(c[0].id == "c");
  CHECK(c[0].quality == Quality::kHigh);
  CHECK(*c[0].speaker == 1);
  CHECK_FALSE(c[1].speaker.has_value());
  CHECK(*c[2].text == "second");
}

TEST_CASE("manifest: validation errors carry the line number") {
  const auto dir = scratch_dir("errors");
  auto expect_error = [&](const std::string& body, const std::string& needle) {
    write_file(dir / "bad.tsv", body);
    try {
      load_manifest(dir / "bad.tsv");
      FAIL("expected a manifest error for: " << body);
    } catch (const CorpusError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
    }
  };
  expect_error("a\t-\tL\tx\t-\na\t-\tL\ty\t-\n", ":2:");
  expect_error("a\t-\tL\tx\tmissing.mel\n", ":1:");
  expect_error("a\t-\tX\tx\t-\n", ":1:");
  expect_error("a\tfoo\tL\tx\t-\n", ":1:");
  expect_error("ok\t-\tL\tx\t-\nshort\t-\tL\n", ":2:");
}

TEST_CASE("manifest: save then load reproduces the corpus") {
  const auto dir = scratch_dir("roundtrip");
  Corpus c(3);
  c[0].id = "p0";
  c[0].text = "paired one";
  c[0].mel = ramp_mel(5, 4, 0.0f);
  c[0].speaker = 3;
  c[0].quality = Quality::kHigh;
  c[1].id = "t1";
  c[1].text = "text only";
  c[2].id = "s2";
  c[2].mel = ramp_mel(7, 4, -2.0f);
  c[2].speaker = 0;
  c[2].origin = Origin::kPseudo;
  save_manifest(dir / "c.tsv", c);
  const auto back = load_manifest(dir / "c.tsv");
  REQUIRE(back.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(back[i].id == c[i].id);
    CHECK(back[i].text == c[i].text);
    CHECK(back[i].speaker == c[i].speaker);
    CHECK(back[i].quality == c[i].quality);
    CHECK(back[i].origin == c[i].origin);
    CHECK((back[i].mel == nullptr) == (c[i].mel == nullptr));
    if (c[i].mel) CHECK(*back[i].mel == *c[i].mel);
  }
}

TEST_CASE("mix_upsampled: counts, multiset and determinism") {
  Corpus paired(50), pseudo(2000);
  for (std::size_t i = 0; i < paired.size(); ++i) paired[i].id = "p" + std::to_string(i);
  for (std::size_t i = 0; i < pseudo.size(); ++i) pseudo[i].id = "x" + std::to_string(i);
  std::vector<const Utterance*> pp, xp;
  for (auto& u : paired) pp.push_back(&u);
  for (auto& u : pseudo) xp.push_back(&u);
  const auto mixed = mix_upsampled(pp, xp, 5);
  CHECK(mixed.size() == 4000);
  std::map<std::string, int> counts;
  for (const auto* u : mixed) ++counts[u->id];
  for (const auto& u : paired) CHECK(counts[u.id] == 40);
  for (const auto& u : pseudo) CHECK(counts[u.id] == 1);
  CHECK(mix_upsampled(pp, xp, 5) == mixed);
  CHECK(mix_upsampled(pp, xp, 6) != mixed);

  const auto same = mix_upsampled(pp, std::vector<const Utterance*>(xp.begin(), xp.begin() + 50), 1);
  CHECK(same.size() == 100);
  CHECK_THROWS_AS(mix_upsampled({}, xp, 1), ContractViolation);
}

TEST_CASE("batch_by_frames: greedy packing") {
  const auto b = batch_by_frames({6, 5, 4}, 10);
  REQUIRE(b.size() == 2);
  CHECK(b[0] == std::vector<std::size_t>{0});
  CHECK(b[1] == std::vector<std::size_t>{1, 2});
  const auto hundreds = batch_by_frames(std::vector<Index>(1000, 100));
  CHECK(hundreds.size() == 5);
  for (const auto& batch : hundreds) CHECK(batch.size() == 200);
  CHECK(batch_by_frames({7}, 10).size() == 1);
  CHECK_THROWS_AS(batch_by_frames({11}, 10), ContractViolation);
}
