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

#include "lowres/pipeline.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace lowres;
namespace fs = std::filesystem;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.hidden = 16;
  d.heads = 2;
  d.encoder_layers = 1;
  d.decoder_layers = 1;
  d.ffn_inner = 24;
  d.ffn_kernel = 3;
  d.n_mels = 8;
  d.prenet_hidden = 16;
  d.asr_filters = 4;
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TtsBundle small_tts() {
  const Vocabulary vocab(U"abc ");
  TtsBundle b{TtsModel<float>(small_dims(), vocab.size(), 3, 11), vocab, {}};
  b.optimizer = AdamState<float>::for_parameters(b.model.parameters());
  b.optimizer.step = 4;
  b.optimizer.first_moment[2].setConstant(0.5f);
  return b;
}

}  // namespace

TEST_CASE("container: header layout is little-endian and versioned") {
  Checkpoint c;
  c.metadata = "{}";
  c.sections.push_back({"w", {2, 3}, {1, 2, 3, 4, 5, 6}});
  const auto bytes = serialize_checkpoint(c);
  REQUIRE(bytes.size() == 4 + 4 + 4 + 2 + 4 + (4 + 1 + 4 + 8 + 24));
  CHECK(bytes.substr(0, 4) == "LRSK");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == kCheckpointVersion);
  const auto back = parse_checkpoint(bytes);
  CHECK(back.metadata == "{}");
  REQUIRE(back.sections.size() == 1);
  CHECK(back.sections[0].extents == std::vector<std::uint32_t>{2, 3});
  CHECK(back.sections[0].values == c.sections[0].values);
}

TEST_CASE("container: corrupt inputs are rejected with a reason") {
  Checkpoint c;
  c.metadata = "{}";
  c.sections.push_back({"w", {2}, {1, 2}});
  const auto bytes = serialize_checkpoint(c);
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), doctest::Contains("truncated"),
                       CheckpointError);
  CHECK_THROWS_WITH_AS(parse_checkpoint("XXXX" + bytes.substr(4)), doctest::Contains("magic"), CheckpointError);
  auto wrong_version = bytes;
  wrong_version[4] = 9;
  CHECK_THROWS_WITH_AS(parse_checkpoint(wrong_version), doctest::Contains("version"), CheckpointError);
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes + "z"), doctest::Contains("trailing"), CheckpointError);
}

TEST_CASE("model checkpoints: save, load, save is byte-identical") {
  const auto dir = fs::temp_directory_path() / "lowres-ckpt";
  fs::remove_all(dir);
  auto tts = small_tts();
  save_tts(dir / "a.lrsk", tts, {{"stage", "test"}});
  const auto loaded = load_tts(dir / "a.lrsk");
  save_tts(dir / "b.lrsk", loaded, {{"stage", "test"}});
  CHECK(slurp(dir / "a.lrsk") == slurp(dir / "b.lrsk"));
  CHECK(loaded.vocab == tts.vocab);
  CHECK(loaded.model.speaker_count() == 3);
  CHECK(loaded.optimizer.step == 4);
  CHECK(loaded.optimizer.first_moment[2] == tts.optimizer.first_moment[2]);

  const auto a = tts.model.parameters(), b = loaded.model.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor.value() == b[i].tensor.value());
}

TEST_CASE("model checkpoints: wrong kind, missing and mis-shaped parameters") {
  auto tts = small_tts();
  auto ckpt = to_checkpoint(tts);
  CHECK_THROWS_WITH_AS(asr_from_checkpoint(ckpt), doctest::Contains("asr"), CheckpointError);

  auto missing = ckpt;
  missing.sections.erase(missing.sections.begin() + 3);
  const auto name = ckpt.sections[3].name;
  CHECK_THROWS_WITH_AS(tts_from_checkpoint(missing), doctest::Contains(name.c_str()), CheckpointError);

  auto misshaped = ckpt;
  misshaped.sections[4].extents.back() += 1;
  misshaped.sections[4].values.resize(misshaped.sections[4].values.size() / (misshaped.sections[4].extents.back() - 1) *
                                      misshaped.sections[4].extents.back());
  CHECK_THROWS_WITH_AS(tts_from_checkpoint(misshaped), doctest::Contains("shape mismatch"), CheckpointError);
}

TEST_CASE("init from pretrained keeps the body and refreshes named tables") {
  auto tts = small_tts();
  const auto ckpt = to_checkpoint(tts);
  const Vocabulary other(U"xyzw ");
  const auto fresh = tts_init_from_pretrained(ckpt, other, 7, {"char_embedding", "speaker_table"}, 99);
  CHECK(fresh.model.vocab_size() == other.size());
  CHECK(fresh.model.speaker_count() == 7);
  const auto before = tts.model.parameters(), after = fresh.model.parameters();
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].name == "char_embedding" || before[i].name == "speaker_table") continue;
    CHECK_MESSAGE(before[i].tensor.value() == after[i].tensor.value(), before[i].name);
  }
  CHECK(fresh.optimizer.step == 0);
}
