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

#include "lowres/toy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <unordered_set>

#include "json.hpp"

namespace lowres {

namespace {

using Json = nlohmann::json;

void fill_gaussian(MelMatrix& m, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Eigen::VectorXf SpeakerTransform::apply(const Eigen::VectorXf& in) const {
  Eigen::VectorXf out(in.size());
  for (Index c = 0; c < in.size(); ++c) out[c] = gain[c] * in[permutation[static_cast<std::size_t>(c)]] + offset[c];
  return out;
}

Eigen::VectorXf SpeakerTransform::invert(const Eigen::VectorXf& out) const {
  Eigen::VectorXf in(out.size());
  for (Index c = 0; c < out.size(); ++c)
    in[permutation[static_cast<std::size_t>(c)]] = (out[c] - offset[c]) / gain[c];
  return in;
}

ToySpec ToySpec::generate(const ToySpecOptions& o) {
  require(o.frames_per_char >= 1, "toy spec: frames_per_char must be positive");
  require(o.n_mels >= 2, "toy spec: need at least two mel channels");
  require(o.speakers >= 1, "toy spec: need at least one speaker");
  require(o.gain_spread >= 0 && o.gain_spread < 1, "toy spec: gain_spread must lie in [0, 1)");
  ToySpec spec;
  spec.alphabet = utf8_to_u32(o.alphabet);
  require(!spec.alphabet.empty() && spec.alphabet.size() <= 30, "toy spec: alphabet must have 1..30 characters");
  require(std::set<char32_t>(spec.alphabet.begin(), spec.alphabet.end()).size() == spec.alphabet.size(),
          "toy spec: alphabet has repeated characters");
  spec.frames_per_char = o.frames_per_char;
  spec.n_mels = o.n_mels;
  spec.noise_std = o.noise_std;
  spec.seed = o.seed;

  std::mt19937_64 rng(o.seed);
  const Index n = static_cast<Index>(spec.alphabet.size());
  spec.templates = MelMatrix(n, o.n_mels);
  constexpr int kMaxDraws = 10000;
  for (Index i = 0; i < n; ++i) {
    bool ok = false;
    for (int draw = 0; draw < kMaxDraws && !ok; ++draw) {
      MelMatrix row(1, o.n_mels);
      fill_gaussian(row, o.template_scale, rng);
      ok = true;
      for (Index j = 0; j < i && ok; ++j) ok = (spec.templates.row(j) - row).norm() >= o.min_margin;
      if (ok) spec.templates.row(i) = row;
    }
    require(ok, "toy spec: could not place templates with the requested margin");
  }
  spec.margin = std::numeric_limits<float>::infinity();
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      spec.margin = std::min(spec.margin, (spec.templates.row(i) - spec.templates.row(j)).norm());
  if (n == 1) spec.margin = spec.templates.row(0).norm();

  spec.positions = MelMatrix(o.frames_per_char, o.n_mels);
  fill_gaussian(spec.positions, o.position_scale, rng);

  std::uniform_real_distribution<float> gain_dist(1.0f - o.gain_spread, 1.0f + o.gain_spread);
  std::normal_distribution<float> offset_dist(0.0f, o.offset_std);
  std::uniform_int_distribution<int> channel_dist(0, o.n_mels - 2);
  for (int s = 0; s < o.speakers; ++s) {
    SpeakerTransform t;
    t.permutation.resize(static_cast<std::size_t>(o.n_mels));
    for (int c = 0; c < o.n_mels; ++c) t.permutation[static_cast<std::size_t>(c)] = c;
    t.gain = Eigen::VectorXf::Ones(o.n_mels);
    t.offset = Eigen::VectorXf::Zero(o.n_mels);
    for (int k = 0; k < o.adjacent_swaps; ++k) {
      const auto c = static_cast<std::size_t>(channel_dist(rng));
      std::swap(t.permutation[c], t.permutation[c + 1]);
    }
    for (int c = 0; c < o.n_mels; ++c) t.gain[c] = gain_dist(rng);
    for (int c = 0; c < o.n_mels; ++c) t.offset[c] = offset_dist(rng);
    spec.speakers.push_back(std::move(t));
  }
  return spec;
}

int ToySpec::char_index(char32_t c) const {
  const auto pos = alphabet.find(c);
  return pos == std::u32string::npos ? -1 : static_cast<int>(pos);
}

float ToySpec::unknown_radius() const {
  const float rms = std::sqrt(templates.rowwise().squaredNorm().mean());
  return 5.0f * rms;
}

void ToySpec::save(const std::filesystem::path& path) const {
  Json j;
  j["alphabet"] = u32_to_utf8(alphabet);
  j["frames_per_char"] = frames_per_char;
  j["n_mels"] = n_mels;
  j["noise_std"] = noise_std;
  j["margin"] = margin;
  j["seed"] = seed;
  j["templates"] = std::vector<float>(templates.data(), templates.data() + templates.size());
  j["positions"] = std::vector<float>(positions.data(), positions.data() + positions.size());
  Json speaker_list = Json::array();
  for (const auto& s : speakers) {
    speaker_list.push_back({{"permutation", s.permutation},
                        {"gain", std::vector<float>(s.gain.data(), s.gain.data() + s.gain.size())},
                        {"offset", std::vector<float>(s.offset.data(), s.offset.data() + s.offset.size())}});
  }
  j["speakers"] = std::move(speaker_list);
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write toy spec " + path.string());
  out << j.dump(1) << '\n';
}

ToySpec ToySpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open toy spec " + path.string());
  Json j;
  try {
    in >> j;
    ToySpec spec;
    spec.alphabet = utf8_to_u32(j.at("alphabet").get<std::string>());
    spec.frames_per_char = j.at("frames_per_char").get<int>();
    spec.n_mels = j.at("n_mels").get<int>();
    spec.noise_std = j.at("noise_std").get<float>();
    spec.margin = j.at("margin").get<float>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    const auto n = static_cast<Index>(spec.alphabet.size());
    auto to_matrix = [](const std::vector<float>& v, Index rows, Index cols) {
      if (static_cast<Index>(v.size()) != rows * cols) throw CorpusError("toy spec: matrix size mismatch");
      MelMatrix m(rows, cols);
      std::copy(v.begin(), v.end(), m.data());
      return m;
    };
    spec.templates = to_matrix(j.at("templates").get<std::vector<float>>(), n, spec.n_mels);
    spec.positions = to_matrix(j.at("positions").get<std::vector<float>>(), spec.frames_per_char, spec.n_mels);
    for (const auto& s : j.at("speakers")) {
      SpeakerTransform t;
      t.permutation = s.at("permutation").get<std::vector<int>>();
      const auto gain = s.at("gain").get<std::vector<float>>();
      const auto offset = s.at("offset").get<std::vector<float>>();
      if (static_cast<int>(t.permutation.size()) != spec.n_mels || static_cast<int>(gain.size()) != spec.n_mels ||
          static_cast<int>(offset.size()) != spec.n_mels)
        throw CorpusError("toy spec: speaker transform has wrong width");
      t.gain = Eigen::Map<const Eigen::VectorXf>(gain.data(), spec.n_mels);
      t.offset = Eigen::Map<const Eigen::VectorXf>(offset.data(), spec.n_mels);
      spec.speakers.push_back(std::move(t));
    }
    return spec;
  } catch (const Json::exception& e) {
    throw CorpusError("malformed toy spec " + path.string() + ": " + e.what());
  }
}

MelMatrix render_toy_speech(const std::string& text, int speaker, const ToySpec& spec, Quality quality,
                            std::uint64_t noise_seed) {
  const std::u32string chars = utf8_to_u32(text);
  require(!chars.empty(), "render_toy_speech: empty text");
  require(speaker >= 0 && speaker < static_cast<int>(spec.speakers.size()),
          "render_toy_speech: unknown speaker " + std::to_string(speaker));
  const int fpc = spec.frames_per_char;
  MelMatrix mel(static_cast<Index>(chars.size()) * fpc, spec.n_mels);
  const auto& transform = spec.speakers[static_cast<std::size_t>(speaker)];
  Index row = 0;
  for (char32_t c : chars) {
    const int idx = spec.char_index(c);
    require(idx >= 0, "render_toy_speech: character '" + u32_to_utf8(std::u32string(1, c)) +
                          "' is not in the toy alphabet");
    for (int f = 0; f < fpc; ++f) {
      const Eigen::VectorXf clean = (spec.templates.row(idx) + spec.positions.row(f)).transpose();
      mel.row(row++) = transform.apply(clean).transpose();
    }
  }
  if (quality == Quality::kLow && spec.noise_std > 0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<float> noise(0.0f, spec.noise_std);
    for (Index i = 0; i < mel.size(); ++i) mel.data()[i] += noise(rng);
  }
  return mel;
}

namespace {

struct SlotDecode {
  std::u32string text;
  double distance = 0;
};

SlotDecode decode_with_speaker(const MelMatrix& mel, const ToySpec& spec, int speaker) {
  const int fpc = spec.frames_per_char;
  const Index frames = mel.rows();
  const Index slots = std::max<Index>(1, (frames + fpc / 2) / fpc);
  const auto& transform = spec.speakers[static_cast<std::size_t>(speaker)];
  const float radius = spec.unknown_radius();
  SlotDecode result;
  for (Index k = 0; k < slots; ++k) {
    const Index begin = k * frames / slots;
    const Index end = std::max(begin + 1, (k + 1) * frames / slots);
    const Index len = end - begin;
    Eigen::VectorXf estimate = Eigen::VectorXf::Zero(spec.n_mels);
    for (Index f = begin; f < end; ++f) {
      const Index pos = std::min<Index>(fpc - 1, (f - begin) * fpc / len);
      estimate += transform.invert(mel.row(f).transpose()) - spec.positions.row(pos).transpose();
    }
    estimate /= static_cast<float>(len);
    Index best = 0;
    const float dist = std::sqrt((spec.templates.rowwise() - estimate.transpose()).rowwise().squaredNorm().minCoeff(&best));
    result.distance += dist;
    result.text.push_back(dist > radius ? static_cast<char32_t>(kUnknownSymbol) : spec.alphabet[static_cast<std::size_t>(best)]);
  }
  return result;
}

}  // namespace

std::string oracle_decode(const MelMatrix& mel, const ToySpec& spec, std::optional<int> speaker_hint) {
  if (mel.rows() == 0 || mel.cols() != spec.n_mels || !mel.allFinite()) return std::string(1, kUnknownSymbol);
  if (speaker_hint) {
    require(*speaker_hint >= 0 && *speaker_hint < static_cast<int>(spec.speakers.size()),
            "oracle_decode: unknown speaker hint");
    return u32_to_utf8(decode_with_speaker(mel, spec, *speaker_hint).text);
  }
  SlotDecode best;
  best.distance = std::numeric_limits<double>::infinity();
  for (int s = 0; s < static_cast<int>(spec.speakers.size()); ++s) {
    auto candidate = decode_with_speaker(mel, spec, s);
    if (candidate.distance < best.distance) best = std::move(candidate);
  }
  return u32_to_utf8(best.text);
}

int ToyCorpusSizes::scaled(int n) const {
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(n) * scale)));
}

ToyBundleOptions::ToyBundleOptions() {
  rich_spec.alphabet = "αβγδεζηθικλμνξοπρστυφχψω ";
  rich_spec.seed = 2;
}

namespace {

class TextSampler {
 public:
  TextSampler(const std::u32string& alphabet, const ToyWordOptions& o, std::mt19937_64& rng) : o_(o) {
    std::u32string letters;
    for (char32_t c : alphabet)
      if (c != U' ') letters.push_back(c);
    require(!letters.empty(), "toy corpus: alphabet has no letters");
    std::uniform_int_distribution<std::size_t> letter(0, letters.size() - 1);
    std::uniform_int_distribution<int> length(o.min_word_length, o.max_word_length);
    std::set<std::u32string> seen;
    // Every letter appears in at least one word so the whole inventory is trainable.
    for (std::size_t i = 0; i < letters.size() && static_cast<int>(lexicon_.size()) < o.lexicon_size; ++i) {
      std::u32string w(1, letters[i]);
      const int len = length(rng);
      while (static_cast<int>(w.size()) < len) w.push_back(letters[letter(rng)]);
      std::shuffle(w.begin(), w.end(), rng);
      if (seen.insert(w).second) lexicon_.push_back(w);
    }
    int guard = 0;
    while (static_cast<int>(lexicon_.size()) < o.lexicon_size && ++guard < 100000) {
      std::u32string w;
      const int len = length(rng);
      while (static_cast<int>(w.size()) < len) w.push_back(letters[letter(rng)]);
      if (seen.insert(w).second) lexicon_.push_back(w);
    }
  }

  std::string sentence(std::mt19937_64& rng) const {
    std::uniform_int_distribution<int> count(o_.min_words, o_.max_words);
    std::uniform_int_distribution<std::size_t> pick(0, lexicon_.size() - 1);
    std::u32string s;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      if (i) s.push_back(U' ');
      s += lexicon_[pick(rng)];
    }
    return u32_to_utf8(s);
  }

 private:
  ToyWordOptions o_;
  std::vector<std::u32string> lexicon_;
};

std::string make_id(const std::string& prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05zu", prefix.c_str(), i);
  return buf;
}

}  // namespace

ToyBundle gen_toy_corpora(const ToyBundleOptions& options) {
  require(options.seen_speakers >= 1 && options.unseen_speakers >= 1 && options.rich_speakers >= 1,
          "gen_toy_corpora: every speaker group needs at least one speaker");
  require(options.sizes.scale > 0, "gen_toy_corpora: scale must be positive");
  ToyBundle b;
  auto spec_opts = options.spec;
  spec_opts.speakers = 1 + options.seen_speakers + options.unseen_speakers;
  b.spec = ToySpec::generate(spec_opts);
  auto rich_opts = options.rich_spec;
  rich_opts.speakers = 1 + options.rich_speakers;
  b.rich_spec = ToySpec::generate(rich_opts);
  {
    const auto low = b.spec.alphabet, rich = b.rich_spec.alphabet;
    for (char32_t c : rich)
      require(c == U' ' || low.find(c) == std::u32string::npos,
              "gen_toy_corpora: rich alphabet must be disjoint from the low-resource alphabet");
  }
  b.target_speaker = 0;
  for (int s = 1; s <= options.seen_speakers; ++s) b.seen_speakers.push_back(s);
  for (int s = 0; s < options.unseen_speakers; ++s) b.unseen_speakers.push_back(1 + options.seen_speakers + s);

  std::mt19937_64 rng(options.seed);
  const TextSampler low_text(b.spec.alphabet, options.words, rng);
  const TextSampler rich_text(b.rich_spec.alphabet, options.words, rng);
  const auto& sz = options.sizes;

  std::uint64_t noise_counter = 0;
  auto render = [&](const std::string& text, int speaker, const ToySpec& spec, Quality q) {
    return std::make_shared<const MelMatrix>(
        render_toy_speech(text, speaker, spec, q, mix_seed(options.seed, noise_counter++)));
  };

  // Held-out test texts first; training texts are redrawn on collision.
  std::unordered_set<std::string> test_texts;
  std::vector<int> all_speakers{b.target_speaker};
  all_speakers.insert(all_speakers.end(), b.seen_speakers.begin(), b.seen_speakers.end());
  all_speakers.insert(all_speakers.end(), b.unseen_speakers.begin(), b.unseen_speakers.end());
  const int n_test = sz.scaled(sz.test);
  for (int i = 0; i < n_test; ++i) {
    std::string t;
    int guard = 0;
    do t = low_text.sentence(rng);
    while (test_texts.count(t) && ++guard < 1000);
    test_texts.insert(t);
    Utterance u;
    u.id = make_id("test", static_cast<std::size_t>(i));
    u.text = t;
    u.speaker = all_speakers[static_cast<std::size_t>(i) % all_speakers.size()];
    u.quality = Quality::kLow;
    u.mel = render(t, *u.speaker, b.spec, Quality::kLow);
    b.test.push_back(std::move(u));
  }
  auto train_text = [&] {
    for (int guard = 0; guard < 10000; ++guard) {
      auto t = low_text.sentence(rng);
      if (!test_texts.count(t)) return t;
    }
    throw ContractViolation("gen_toy_corpora: lexicon too small to avoid the held-out texts");
  };

  for (int i = 0; i < sz.scaled(sz.paired_high); ++i) {
    Utterance u;
    u.id = make_id("dh", static_cast<std::size_t>(i));
    u.text = train_text();
    u.speaker = b.target_speaker;
    u.quality = Quality::kHigh;
    u.mel = render(*u.text, b.target_speaker, b.spec, Quality::kHigh);
    b.paired_high.push_back(std::move(u));
  }
  for (int i = 0; i < sz.scaled(sz.paired_low); ++i) {
    Utterance u;
    u.id = make_id("dl", static_cast<std::size_t>(i));
    u.text = train_text();
    u.speaker = b.seen_speakers[static_cast<std::size_t>(i) % b.seen_speakers.size()];
    u.quality = Quality::kLow;
    u.mel = render(*u.text, *u.speaker, b.spec, Quality::kLow);
    b.paired_low.push_back(std::move(u));
  }
  auto unpaired_speech = [&](const std::string& prefix, int count, const std::vector<int>& speakers, Corpus& out) {
    for (int i = 0; i < count; ++i) {
      Utterance u;
      u.id = make_id(prefix, static_cast<std::size_t>(i));
      u.speaker = speakers[static_cast<std::size_t>(i) % speakers.size()];
      u.quality = Quality::kLow;
      u.mel = render(train_text(), *u.speaker, b.spec, Quality::kLow);
      out.push_back(std::move(u));
    }
  };
  unpaired_speech("yu-seen", sz.scaled(sz.unpaired_speech_seen), b.seen_speakers, b.unpaired_seen);
  unpaired_speech("yu-unseen", sz.scaled(sz.unpaired_speech_unseen), b.unseen_speakers, b.unpaired_unseen);
  for (int i = 0; i < sz.scaled(sz.unpaired_text); ++i) {
    Utterance u;
    u.id = make_id("xu", static_cast<std::size_t>(i));
    u.text = train_text();
    u.quality = Quality::kLow;
    b.unpaired_text.push_back(std::move(u));
  }

  for (int i = 0; i < sz.scaled(sz.rich_tts); ++i) {
    Utterance u;
    u.id = make_id("rich-tts", static_cast<std::size_t>(i));
    u.text = rich_text.sentence(rng);
    u.speaker = 0;
    u.quality = Quality::kHigh;
    u.mel = render(*u.text, 0, b.rich_spec, Quality::kHigh);
    b.rich_tts.push_back(std::move(u));
  }
  for (int i = 0; i < sz.scaled(sz.rich_asr); ++i) {
    Utterance u;
    u.id = make_id("rich-asr", static_cast<std::size_t>(i));
    u.text = rich_text.sentence(rng);
    u.speaker = 1 + static_cast<int>(static_cast<std::size_t>(i) % static_cast<std::size_t>(options.rich_speakers));
    u.quality = Quality::kLow;
    u.mel = render(*u.text, *u.speaker, b.rich_spec, Quality::kLow);
    b.rich_asr.push_back(std::move(u));
  }
  return b;
}

void save_toy_bundle(const std::filesystem::path& dir, ToyBundle& bundle) {
  std::filesystem::create_directories(dir);
  bundle.spec.save(dir / "toy_spec.json");
  bundle.rich_spec.save(dir / "rich_spec.json");
  const std::pair<const char*, Corpus*> parts[] = {
      {"paired_high", &bundle.paired_high},         {"paired_low", &bundle.paired_low},
      {"unpaired_seen", &bundle.unpaired_seen},     {"unpaired_unseen", &bundle.unpaired_unseen},
      {"unpaired_text", &bundle.unpaired_text},     {"rich_tts", &bundle.rich_tts},
      {"rich_asr", &bundle.rich_asr},               {"test", &bundle.test}};
  for (const auto& [name, corpus] : parts) save_manifest(dir / (std::string(name) + ".tsv"), *corpus, "mels");
  Json j;
  j["target_speaker"] = bundle.target_speaker;
  j["seen_speakers"] = bundle.seen_speakers;
  j["unseen_speakers"] = bundle.unseen_speakers;
  std::ofstream out(dir / "speakers.json");
  out << j.dump(1) << '\n';
}

}  // namespace lowres
