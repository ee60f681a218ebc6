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

// Checkpoint container (all integers little-endian):
//
//   "LRSK"  u32 version  u32 metadata_bytes  metadata (UTF-8 JSON)
//   u32 section_count
//   per section: u32 name_bytes  name  u32 rank  u32 extents[rank]  f32 payload
//
// Sections hold model parameters by name; optimizer moments are stored as
// "adam.m/<name>" and "adam.v/<name>".

#pragma once

#include "lowres/corpus.hpp"
#include "lowres/models.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace lowres {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointSection {
  std::string name;
  std::vector<std::uint32_t> extents;
  std::vector<float> values;
};

struct Checkpoint {
  std::string metadata;
  std::vector<CheckpointSection> sections;

  const CheckpointSection* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Model description stored in the metadata block.
struct ModelMeta {
  std::string kind;  // "tts" or "asr"
  ModelDims dims;
  Vocabulary vocab;
  Index speakers = 0;  // TTS speaker table rows
  std::int64_t optimizer_step = 0;
  std::map<std::string, std::string> info;
};

std::string encode_meta(const ModelMeta& meta);
ModelMeta decode_meta(const std::string& metadata);

Checkpoint make_checkpoint(const ModelMeta& meta, const ParameterList<float>& params,
                           const AdamState<float>* optimizer);

/// Copies checkpoint sections into `params` by name. Names in `fresh` keep
/// their current values. Any other missing section or shape mismatch raises
/// CheckpointError naming the parameter.
void restore_parameters(ParameterList<float>& params, const Checkpoint& ckpt,
                        const std::set<std::string>& fresh = {});

/// Restores moments when present; otherwise resets to a fresh state.
AdamState<float> restore_optimizer(const ParameterList<float>& params, const Checkpoint& ckpt,
                                   std::int64_t step);

}  // namespace lowres
