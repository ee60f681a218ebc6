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

#include "lowres/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace lowres {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'R', 'S', 'K'};

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void take(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what + " at byte " +
                            std::to_string(pos_));
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v = 0;
    take(&v, 4, what);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    std::string s(n, '\0');
    take(s.data(), n, what);
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint32_t> extents_of(const Tensor<float>& t) {
  std::vector<std::uint32_t> e;
  for (Index d : t.shape()) e.push_back(static_cast<std::uint32_t>(d));
  return e;
}

std::string extents_string(const std::vector<std::uint32_t>& e) {
  std::string s = "(";
  for (std::size_t i = 0; i < e.size(); ++i) s += (i ? ", " : "") + std::to_string(e[i]);
  return s + ")";
}

CheckpointSection section_from(const std::string& name, const std::vector<std::uint32_t>& extents,
                               const Mat<float>& m) {
  return {name, extents, std::vector<float>(m.data(), m.data() + m.size())};
}

}  // namespace

const CheckpointSection* Checkpoint::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
  out += ckpt.metadata;
  put_u32(out, static_cast<std::uint32_t>(ckpt.sections.size()));
  for (const auto& s : ckpt.sections) {
    std::size_t count = 1;
    for (auto e : s.extents) count *= e;
    require(count == s.values.size(), "checkpoint section '" + s.name + "' has inconsistent extents");
    put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    out += s.name;
    put_u32(out, static_cast<std::uint32_t>(s.extents.size()));
    for (auto e : s.extents) put_u32(out, e);
    out.append(reinterpret_cast<const char*>(s.values.data()), s.values.size() * sizeof(float));
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  Checkpoint ckpt;
  ckpt.metadata = r.str(r.u32("metadata length"), "metadata");
  const auto count = r.u32("section count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointSection s;
    s.name = r.str(r.u32("section name length"), "section name");
    const auto rank = r.u32("section rank");
    if (rank == 0 || rank > 8) throw CheckpointError("section '" + s.name + "' has invalid rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      s.extents.push_back(r.u32("section extents"));
      n *= s.extents.back();
    }
    if (n * sizeof(float) > r.remaining())
      throw CheckpointError("truncated checkpoint: section '" + s.name + "' payload is incomplete");
    s.values.resize(n);
    r.take(s.values.data(), n * sizeof(float), "section payload");
    ckpt.sections.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_checkpoint(buf.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::string encode_meta(const ModelMeta& meta) {
  nlohmann::json j;
  j["kind"] = meta.kind;
  j["vocab"] = meta.vocab.serialize();
  j["speakers"] = meta.speakers;
  j["optimizer_step"] = meta.optimizer_step;
  const auto& d = meta.dims;
  j["dims"] = {{"hidden", d.hidden},
               {"heads", d.heads},
               {"encoder_layers", d.encoder_layers},
               {"decoder_layers", d.decoder_layers},
               {"ffn_inner", d.ffn_inner},
               {"ffn_kernel", d.ffn_kernel},
               {"n_mels", d.n_mels},
               {"prenet_hidden", d.prenet_hidden},
               {"prenet_dropout", d.prenet_dropout},
               {"prenet_dropout_at_inference", d.prenet_dropout_at_inference},
               {"dropout", d.dropout},
               {"asr_filters", d.asr_filters},
               {"share_speaker_module", d.share_speaker_module},
               {"stop_positive_weight", d.stop_positive_weight}};
  j["info"] = meta.info;
  return j.dump();
}

ModelMeta decode_meta(const std::string& metadata) {
  try {
    const auto j = nlohmann::json::parse(metadata);
    ModelMeta meta;
    meta.kind = j.at("kind").get<std::string>();
    meta.vocab = Vocabulary::deserialize(j.at("vocab").get<std::string>());
    meta.speakers = j.at("speakers").get<Index>();
    meta.optimizer_step = j.at("optimizer_step").get<std::int64_t>();
    const auto& d = j.at("dims");
    auto& m = meta.dims;
    m.hidden = d.at("hidden").get<Index>();
    m.heads = d.at("heads").get<Index>();
    m.encoder_layers = d.at("encoder_layers").get<Index>();
    m.decoder_layers = d.at("decoder_layers").get<Index>();
    m.ffn_inner = d.at("ffn_inner").get<Index>();
    m.ffn_kernel = d.at("ffn_kernel").get<Index>();
    m.n_mels = d.at("n_mels").get<Index>();
    m.prenet_hidden = d.at("prenet_hidden").get<Index>();
    m.prenet_dropout = d.at("prenet_dropout").get<double>();
    m.prenet_dropout_at_inference = d.at("prenet_dropout_at_inference").get<bool>();
    m.dropout = d.at("dropout").get<double>();
    m.asr_filters = d.at("asr_filters").get<Index>();
    m.share_speaker_module = d.at("share_speaker_module").get<bool>();
    m.stop_positive_weight = d.at("stop_positive_weight").get<double>();
    meta.info = j.at("info").get<std::map<std::string, std::string>>();
    return meta;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint metadata: ") + e.what());
  }
}

Checkpoint make_checkpoint(const ModelMeta& meta, const ParameterList<float>& params,
                           const AdamState<float>* optimizer) {
  Checkpoint ckpt;
  ckpt.metadata = encode_meta(meta);
  for (const auto& p : params) ckpt.sections.push_back(section_from(p.name, extents_of(p.tensor), p.tensor.value()));
  if (optimizer && !optimizer->first_moment.empty()) {
    require(optimizer->first_moment.size() == params.size(), "make_checkpoint: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i)
      ckpt.sections.push_back(
          section_from("adam.m/" + params[i].name, extents_of(params[i].tensor), optimizer->first_moment[i]));
    for (std::size_t i = 0; i < params.size(); ++i)
      ckpt.sections.push_back(
          section_from("adam.v/" + params[i].name, extents_of(params[i].tensor), optimizer->second_moment[i]));
  }
  return ckpt;
}

void restore_parameters(ParameterList<float>& params, const Checkpoint& ckpt, const std::set<std::string>& fresh) {
  for (auto& p : params) {
    if (fresh.count(p.name)) continue;
    const auto* s = ckpt.find(p.name);
    if (!s) throw CheckpointError("checkpoint has no parameter '" + p.name + "'");
    const auto expected = extents_of(p.tensor);
    if (s->extents != expected)
      throw CheckpointError("shape mismatch for parameter '" + p.name + "': checkpoint " + extents_string(s->extents) +
                            ", model " + extents_string(expected));
    std::memcpy(p.tensor.mutable_value().data(), s->values.data(), s->values.size() * sizeof(float));
  }
}

AdamState<float> restore_optimizer(const ParameterList<float>& params, const Checkpoint& ckpt, std::int64_t step) {
  auto state = AdamState<float>::for_parameters(params);
  bool any = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* m = ckpt.find("adam.m/" + params[i].name);
    const auto* v = ckpt.find("adam.v/" + params[i].name);
    if (!m || !v) continue;
    const auto expected = extents_of(params[i].tensor);
    if (m->extents != expected || v->extents != expected)
      throw CheckpointError("optimizer moment shape mismatch for '" + params[i].name + "'");
    std::memcpy(state.first_moment[i].data(), m->values.data(), m->values.size() * sizeof(float));
    std::memcpy(state.second_moment[i].data(), v->values.data(), v->values.size() * sizeof(float));
    any = true;
  }
  state.step = any ? step : 0;
  return state;
}

}  // namespace lowres
