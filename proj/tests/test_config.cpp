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

#include "lowres/config.hpp"
#include "lowres/pipeline.hpp"

using namespace lowres;

TEST_CASE("config: parse, typed getters, overrides") {
  auto c = Config::parse("# comment\nseed = 5\nmodel.hidden=64\nname = toy run\nflag = yes\nrate = 0.25\n");
  CHECK(c.get_int("seed", 0) == 5);
  CHECK(c.get_int("model.hidden", 0) == 64);
  CHECK(c.get_string("name", "") == "toy run");
  CHECK(c.get_bool("flag", false));
  CHECK(c.get_double("rate", 0) == 0.25);
  CHECK(c.get_int("missing", 7) == 7);
  c.apply_override("seed=9");
  CHECK(c.get_int("seed", 0) == 9);
  CHECK(c.unused_keys().empty());
  c.set("extra.key", "1");
  CHECK(c.unused_keys() == std::set<std::string>{"extra.key"});
  CHECK(c.dump().find("extra.key = 1\n") != std::string::npos);
}

TEST_CASE("config: errors name the line or key") {
  CHECK_THROWS_WITH_AS(Config::parse("a = 1\na = 2\n", "f.cfg"), doctest::Contains("f.cfg:2"), ConfigError);
  CHECK_THROWS_WITH_AS(Config::parse("novalue\n", "f.cfg"), doctest::Contains("f.cfg:1"), ConfigError);
  CHECK_THROWS_AS(Config::parse("bad key = 1\n"), ConfigError);
  const auto c = Config::parse("n = x\nb = maybe\n");
  CHECK_THROWS_WITH_AS(c.get_int("n", 0), doctest::Contains("'n'"), ConfigError);
  CHECK_THROWS_AS(c.get_double("n", 0), ConfigError);
  CHECK_THROWS_AS(c.get_bool("b", false), ConfigError);
  CHECK_THROWS_AS(c.require_string("absent"), ConfigError);
  Config o;
  CHECK_THROWS_AS(o.apply_override("noequals"), ConfigError);
}

TEST_CASE("seed derivation is stable and stream-separated") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
  CHECK(derive_seed(1, "a", 0) != derive_seed(1, "a", 1));
  // Pinned value guards against accidental changes to the derivation.
  CHECK(mix64(0) == 0xe220a8397b1dcdafULL);
}

TEST_CASE("pipeline config reads schedules and validates") {
  auto c = Config::parse("model.hidden = 32\nmodel.heads = 2\ndual.steps = 40\ndual.phase_switch = 10\n"
                         "distill.tts.steps = 7\nspecaugment.max_time_width = 3\n");
  const auto p = PipelineConfig::from_config(c);
  CHECK(p.dims.hidden == 32);
  CHECK(p.dt_steps == 40);
  CHECK(p.dt_phase_switch == 10);
  CHECK(p.kd_tts.steps == 7);
  CHECK(p.spec_augment.max_time_width == 3);
  CHECK(p.filter.wcr_min == 0.7);
  CHECK(p.filter.b == 10);
  CHECK(p.min_retention == 0.2);
  CHECK_THROWS_AS(PipelineConfig::from_config(Config::parse("model.heads = 5\n")), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_config(Config::parse("dual.steps = 5\ndual.phase_switch = 6\n")), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_config(Config::parse("pretrain.tts.warmup = 0\n")), ConfigError);
}
