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

#include "lowres/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace lowres {

// ---------------------------------------------------------------------------
// UTF-8

std::u32string utf8_to_u32(const std::string& s) {
  std::u32string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int extra = 0;
    char32_t cp = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1f;
      extra = 1;
    } else if ((c >> 4) == 0xe) {
      cp = c & 0x0f;
      extra = 2;
    } else if ((c >> 3) == 0x1e) {
      cp = c & 0x07;
      extra = 3;
    } else {
      throw CorpusError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + static_cast<std::size_t>(extra) >= s.size())
      throw CorpusError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (int k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
      if ((cc >> 6) != 0x2) throw CorpusError("invalid UTF-8 continuation at offset " + std::to_string(i));
      cp = (cp << 6) | (cc & 0x3f);
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(extra) + 1;
  }
  return out;
}

std::string u32_to_utf8(const std::u32string& s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t cp : s) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
      out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
  }
  return out;
}

namespace {

// Lowercasing for ASCII, Latin-1 and Latin Extended-A.
char32_t to_lower(char32_t c) {
  if (c >= U'A' && c <= U'Z') return c + 32;
  if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;
  if (c >= 0x100 && c <= 0x137) return (c % 2 == 0) ? c + 1 : c;
  if (c >= 0x139 && c <= 0x148) return (c % 2 == 1) ? c + 1 : c;
  if (c >= 0x14A && c <= 0x177) return (c % 2 == 0) ? c + 1 : c;
  if (c == 0x178) return 0xFF;
  if (c >= 0x179 && c <= 0x17E) return (c % 2 == 1) ? c + 1 : c;
  return c;
}

bool is_space(char32_t c) { return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == 0xA0; }

bool is_word_char(char32_t c) {
  return (c >= U'a' && c <= U'z') || (c >= U'0' && c <= U'9') || c >= 0xC0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::u32string symbols) : symbols_(std::move(symbols)) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (!index_.emplace(symbols_[i], static_cast<int>(i) + kReserved).second)
      throw CorpusError("duplicate vocabulary symbol '" + u32_to_utf8(std::u32string(1, symbols_[i])) + "'");
  }
}

Vocabulary Vocabulary::from_texts(const std::vector<std::string>& texts) {
  std::set<char32_t> chars;
  for (const auto& t : texts)
    for (char32_t c : utf8_to_u32(t)) chars.insert(c);
  return Vocabulary(std::u32string(chars.begin(), chars.end()));
}

TextSequence Vocabulary::encode(const std::string& text) const {
  TextSequence ids;
  for (char32_t c : utf8_to_u32(text)) {
    auto it = index_.find(c);
    if (it == index_.end())
      throw NormalizationError("character '" + u32_to_utf8(std::u32string(1, c)) + "' is not in the vocabulary", c);
    ids.push_back(it->second);
  }
  return ids;
}

std::string Vocabulary::decode(const TextSequence& ids) const {
  std::u32string out;
  for (int id : ids) {
    if (id < kReserved) continue;
    const auto k = static_cast<std::size_t>(id - kReserved);
    out.push_back(k < symbols_.size() ? symbols_[k] : U'?');
  }
  return u32_to_utf8(out);
}

// ---------------------------------------------------------------------------
// Normalization

std::vector<RewriteRule> parse_rewrite_rules(const std::string& text) {
  std::vector<RewriteRule> rules;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw CorpusError("rule line " + std::to_string(line_no) + ": expected <from>TAB<to>");
    RewriteRule rule;
    rule.from = line.substr(0, tab);
    rule.to = line.substr(tab + 1);
    if (rule.from.rfind("re:", 0) == 0) {
      rule.is_pattern = true;
      rule.from = rule.from.substr(3);
    }
    rules.push_back(std::move(rule));
  }
  return rules;
}

std::string normalize_text(const std::string& raw, const std::vector<RewriteRule>& rules,
                           const Vocabulary* vocab) {
  std::u32string lowered = utf8_to_u32(raw);
  for (auto& c : lowered) c = to_lower(c);
  const std::string text = u32_to_utf8(lowered);

  struct Compiled {
    std::string literal;
    std::optional<std::regex> pattern;
    std::string to;
  };
  std::vector<Compiled> compiled;
  for (const auto& r : rules) {
    Compiled c;
    c.to = r.to;
    if (r.is_pattern) {
      c.pattern.emplace(r.from, std::regex::ECMAScript);
    } else {
      std::u32string from = utf8_to_u32(r.from);
      for (auto& ch : from) ch = to_lower(ch);
      c.literal = u32_to_utf8(from);
    }
    compiled.push_back(std::move(c));
  }

  auto boundary_before = [&](std::size_t pos) {
    if (pos == 0) return true;
    // Step back to the start of the previous UTF-8 character.
    std::size_t p = pos - 1;
    while (p > 0 && (static_cast<unsigned char>(text[p]) >> 6) == 0x2) --p;
    return !is_word_char(utf8_to_u32(text.substr(p, pos - p)).front());
  };
  auto boundary_after = [&](std::size_t pos) {
    if (pos >= text.size()) return true;
    std::size_t len = 1;
    const auto c = static_cast<unsigned char>(text[pos]);
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    return !is_word_char(utf8_to_u32(text.substr(pos, len)).front());
  };

  std::string rewritten;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t best_len = 0;
    const Compiled* best = nullptr;
    std::string best_out;
    for (const auto& rule : compiled) {
      if (rule.pattern) {
        std::smatch m;
        const std::string rest = text.substr(pos);
        if (std::regex_search(rest, m, *rule.pattern, std::regex_constants::match_continuous) &&
            m.length(0) > 0 && static_cast<std::size_t>(m.length(0)) > best_len) {
          best_len = static_cast<std::size_t>(m.length(0));
          best = &rule;
          best_out = m.format(rule.to);
        }
      } else if (!rule.literal.empty() && rule.literal.size() > best_len &&
                 text.compare(pos, rule.literal.size(), rule.literal) == 0 && boundary_before(pos) &&
                 boundary_after(pos + rule.literal.size())) {
        best_len = rule.literal.size();
        best = &rule;
        best_out = rule.to;
      }
    }
    if (best) {
      rewritten += best_out;
      pos += best_len;
    } else {
      rewritten.push_back(text[pos]);
      ++pos;
    }
  }

  std::u32string collapsed;
  bool pending_space = false;
  for (char32_t c : utf8_to_u32(rewritten)) {
    c = to_lower(c);
    if (is_space(c)) {
      pending_space = !collapsed.empty();
      continue;
    }
    if (pending_space) collapsed.push_back(U' ');
    pending_space = false;
    collapsed.push_back(c);
  }
  if (vocab) {
    for (char32_t c : collapsed)
      if (!vocab->contains(c))
        throw NormalizationError("normalization left out-of-vocabulary character '" +
                                     u32_to_utf8(std::u32string(1, c)) + "'",
                                 c);
  }
  return u32_to_utf8(collapsed);
}

std::vector<RewriteRule> default_english_rules() {
  static const char* months[][2] = {{"jan", "january"},   {"feb", "february"}, {"mar", "march"},
                                    {"apr", "april"},     {"jun", "june"},     {"jul", "july"},
                                    {"aug", "august"},    {"sep", "september"}, {"sept", "september"},
                                    {"oct", "october"},   {"nov", "november"}, {"dec", "december"}};
  static const char* ordinals[] = {"first",   "second",  "third",     "fourth",   "fifth",
                                   "sixth",   "seventh", "eighth",    "ninth",    "tenth",
                                   "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth",
                                   "sixteenth", "seventeenth", "eighteenth", "nineteenth"};
  std::vector<RewriteRule> rules;
  for (const auto& m : months) rules.push_back({m[0], m[1], false});
  auto suffix = [](int n) {
    if (n % 100 >= 11 && n % 100 <= 13) return "th";
    switch (n % 10) {
      case 1: return "st";
      case 2: return "nd";
      case 3: return "rd";
      default: return "th";
    }
  };
  for (int n = 1; n <= 31; ++n) {
    std::string spoken;
    if (n < 20) spoken = ordinals[n - 1];
    else if (n == 20) spoken = "twentieth";
    else if (n < 30) spoken = std::string("twenty ") + ordinals[n - 21];
    else if (n == 30) spoken = "thirtieth";
    else spoken = "thirty first";
    rules.push_back({std::to_string(n) + suffix(n), spoken, false});
  }
  return rules;
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

}  // namespace

Corpus load_manifest(const std::filesystem::path& path, bool load_mels) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  Corpus corpus;
  std::unordered_set<std::string> ids;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 5 && f.size() != 6) fail("expected 5 tab-separated fields, found " + std::to_string(f.size()));
    Utterance u;
    u.id = f[0];
    if (u.id.empty() || u.id == "-") fail("missing utterance id");
    if (!ids.insert(u.id).second) fail("duplicate id '" + u.id + "'");
    if (f[1] != "-") {
      try {
        std::size_t used = 0;
        const int spk = std::stoi(f[1], &used);
        if (used != f[1].size() || spk < 0) throw std::invalid_argument("speaker");
        u.speaker = spk;
      } catch (const std::exception&) {
        fail("bad speaker field '" + f[1] + "'");
      }
    }
    if (f[2] == "H") u.quality = Quality::kHigh;
    else if (f[2] == "L") u.quality = Quality::kLow;
    else fail("quality must be H or L, got '" + f[2] + "'");
    if (f[3] != "-") u.text = f[3];
    if (f[4] != "-") {
      u.mel_path = f[4];
      const auto blob = std::filesystem::path(u.mel_path).is_absolute() ? std::filesystem::path(u.mel_path)
                                                                         : base / u.mel_path;
      if (!std::filesystem::exists(blob)) fail("mel blob '" + u.mel_path + "' does not exist");
      if (load_mels) {
        try {
          u.mel = std::make_shared<const MelMatrix>(read_mel_blob(blob));
        } catch (const AudioError& e) {
          fail(e.what());
        }
      }
    }
    if (!u.text && u.mel_path.empty()) fail("utterance has neither text nor mel");
    if (f.size() == 6) {
      if (f[5] == "pseudo") u.origin = Origin::kPseudo;
      else if (f[5] == "real") u.origin = Origin::kReal;
      else fail("origin must be real or pseudo, got '" + f[5] + "'");
    }
    corpus.push_back(std::move(u));
  }
  return corpus;
}

void save_manifest(const std::filesystem::path& path, Corpus& corpus, const std::string& blob_dir) {
  const auto base = path.parent_path();
  if (!base.empty()) std::filesystem::create_directories(base);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write manifest " + path.string());
  for (auto& u : corpus) {
    if (u.id.empty() || u.id.find('\t') != std::string::npos) throw CorpusError("invalid utterance id '" + u.id + "'");
    if (u.text && (u.text->find('\t') != std::string::npos || u.text->find('\n') != std::string::npos))
      throw CorpusError("text of '" + u.id + "' contains a tab or newline");
    if (u.mel && u.mel_path.empty()) {
      u.mel_path = blob_dir + "/" + u.id + ".mel";
      std::filesystem::create_directories(base / blob_dir);
      write_mel_blob(base / u.mel_path, *u.mel);
    }
    out << u.id << '\t' << (u.speaker ? std::to_string(*u.speaker) : "-") << '\t'
        << (u.quality == Quality::kHigh ? "H" : "L") << '\t' << (u.text ? *u.text : "-") << '\t'
        << (u.mel_path.empty() ? "-" : u.mel_path);
    if (u.origin == Origin::kPseudo) out << "\tpseudo";
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<const Utterance*> mix_upsampled(const std::vector<const Utterance*>& paired,
                                            const std::vector<const Utterance*>& pseudo,
                                            std::uint64_t seed) {
  if (paired.empty()) throw ContractViolation("mix_upsampled: paired corpus is empty");
  if (pseudo.empty()) throw ContractViolation("mix_upsampled: pseudo corpus is empty");
  const std::size_t repeats = (pseudo.size() + paired.size() - 1) / paired.size();
  std::vector<const Utterance*> mixed;
  mixed.reserve(2 * pseudo.size());
  for (std::size_t r = 0; r < repeats; ++r) mixed.insert(mixed.end(), paired.begin(), paired.end());
  mixed.resize(pseudo.size());
  mixed.insert(mixed.end(), pseudo.begin(), pseudo.end());
  std::mt19937_64 rng(seed);
  std::shuffle(mixed.begin(), mixed.end(), rng);
  return mixed;
}

std::vector<std::vector<std::size_t>> batch_by_frames(const std::vector<Index>& frame_counts,
                                                      Index max_frames) {
  require(max_frames > 0, "batch_by_frames: frame budget must be positive");
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  Index used = 0;
  for (std::size_t i = 0; i < frame_counts.size(); ++i) {
    const Index n = frame_counts[i];
    require(n <= max_frames, "batch_by_frames: sample " + std::to_string(i) + " has " + std::to_string(n) +
                                 " frames, above the budget of " + std::to_string(max_frames));
    if (used + n > max_frames && !current.empty()) {
      batches.push_back(std::move(current));
      current.clear();
      used = 0;
    }
    current.push_back(i);
    used += n;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

}  // namespace lowres
