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

// lowres: command-line driver for the training pipeline.
//
//   lowres <subcommand> [--config FILE] [--set key=value]...
//
// Every stage reads its inputs from and writes its outputs to run.dir
// (default "run"); data.dir defaults to <run.dir>/data.

#include "CLI11.hpp"
#include "json.hpp"
#include "lowres/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace lowres;
using Json = nlohmann::json;

namespace {

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kPrecondition = 4,
  kData = 5,
  kTraining = 6,
};

class Precondition : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Run {
  Config cfg;
  PipelineConfig pipe;
  fs::path dir;
  fs::path data;

  fs::path path(const std::string& key, const fs::path& fallback) const {
    return cfg.has(key) ? fs::path(cfg.get_string(key, "")) : fallback;
  }
  fs::path existing(const std::string& key, const fs::path& fallback, const std::string& produced_by) const {
    const auto p = path(key, fallback);
    if (!fs::exists(p))
      throw Precondition(p.string() + " does not exist" + (produced_by.empty() ? "" : "; run " + produced_by + " first"));
    return p;
  }
  Corpus corpus(const std::string& name, const std::string& produced_by = "gen-toy") const {
    return load_manifest(existing("data." + name, data / (name + ".tsv"), produced_by));
  }
  StageContext context() const {
    fs::create_directories(dir);
    StageContext ctx{pipe, MetricsLog(dir / "metrics.jsonl"), {}};
    if (pipe.checkpoint_every > 0) ctx.checkpoint_dir = dir / "checkpoints";
    return ctx;
  }
};

Json speaker_info(const Run& run) {
  const auto p = run.existing("data.speakers", run.data / "speakers.json", "gen-toy");
  std::ifstream in(p);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw CorpusError(p.string() + ": " + e.what());
  }
}

int max_speaker(const std::vector<const Corpus*>& corpora) {
  int top = -1;
  for (const auto* c : corpora)
    for (const auto& u : *c)
      if (u.speaker) top = std::max(top, *u.speaker);
  return top;
}

void write_report(const fs::path& path, const EvalReport& report) {
  std::ofstream out(path);
  report.write(out);
  std::cout << "report " << path.string() << ": WER " << report.pooled_wer() << "% CER " << report.pooled_cer()
            << "%\n";
}

// ---------------------------------------------------------------------------

void gen_toy(Run& run) {
  auto bundle = gen_toy_corpora(toy_bundle_options(run.cfg));
  save_toy_bundle(run.data, bundle);
  std::cout << "toy bundle written to " << run.data.string() << ": D_h " << bundle.paired_high.size() << ", D_l "
            << bundle.paired_low.size() << ", Y_seen " << bundle.unpaired_seen.size() << ", Y_unseen "
            << bundle.unpaired_unseen.size() << ", X " << bundle.unpaired_text.size() << ", test "
            << bundle.test.size() << '\n';
}

void pretrain_cmd(Run& run) {
  const auto rich_tts = run.corpus("rich_tts"), rich_asr = run.corpus("rich_asr");
  auto ctx = run.context();
  const auto r = pretrain(rich_tts, rich_asr, ctx);
  save_tts(run.dir / "pretrain-tts.lrsk", r.tts, {{"stage", "pretrain"}});
  save_asr(run.dir / "pretrain-asr.lrsk", r.asr, {{"stage", "pretrain"}});
}

void finetune_cmd(Run& run) {
  const auto tts_ckpt = read_checkpoint(run.existing("ckpt.pretrain_tts", run.dir / "pretrain-tts.lrsk", "pretrain"));
  const auto asr_ckpt = read_checkpoint(run.existing("ckpt.pretrain_asr", run.dir / "pretrain-asr.lrsk", "pretrain"));
  const auto high = run.corpus("paired_high"), low = run.corpus("paired_low");
  const auto text = run.corpus("unpaired_text");
  const auto vocab = vocabulary_for({&high, &low, &text});
  const Index speakers = max_speaker({&high, &low}) + 1;
  auto ctx = run.context();
  const auto r = finetune(tts_ckpt, asr_ckpt, vocab, speakers, high, low, ctx);
  if (!r.stage1_freeze_held) throw TrainingError("finetune: stage-1 freeze was violated");
  save_tts(run.dir / "finetune-tts.lrsk", r.tts, {{"stage", "finetune"}});
  save_asr(run.dir / "finetune-asr.lrsk", r.asr, {{"stage", "finetune"}});
}

void dual_cmd(Run& run) {
  auto tts = load_tts(run.existing("ckpt.finetune_tts", run.dir / "finetune-tts.lrsk", "finetune"));
  auto asr = load_asr(run.existing("ckpt.finetune_asr", run.dir / "finetune-asr.lrsk", "finetune"));
  const auto text = run.corpus("unpaired_text"), seen = run.corpus("unpaired_seen");
  const auto unseen = run.corpus("unpaired_unseen");
  const auto high = run.corpus("paired_high"), low = run.corpus("paired_low");
  auto ctx = run.context();
  const auto r = dual_transform(std::move(tts), std::move(asr), text, seen, unseen, high, low, ctx);
  save_tts(run.dir / "dual-tts.lrsk", r.tts, {{"stage", "dual"}});
  save_asr(run.dir / "dual-asr.lrsk", r.asr, {{"stage", "dual"}});
  if (r.tts_end_of_phase1) save_tts(run.dir / "dual-phase1-tts.lrsk", *r.tts_end_of_phase1, {{"stage", "dual1"}});
  if (r.asr_end_of_phase1) save_asr(run.dir / "dual-phase1-asr.lrsk", *r.asr_end_of_phase1, {{"stage", "dual1"}});
  std::ofstream out(run.dir / "provenance.tsv");
  out << "# step\tdirection\tsource\tspeaker\tphase\n";
  for (const auto& p : r.provenance)
    out << p.step << '\t' << p.direction << '\t' << p.source_id << '\t' << p.speaker << '\t' << p.phase << '\n';
}

void distill_tts_cmd(Run& run) {
  const auto teacher = load_tts(run.existing("ckpt.dual_tts", run.dir / "dual-tts.lrsk", "dual-transform"));
  const auto text = run.corpus("unpaired_text");
  const int target = static_cast<int>(run.cfg.get_int("distill.target_speaker", speaker_info(run).value("target_speaker", 0)));
  auto ctx = run.context();
  auto r = distill_tts(teacher, text, target, ctx);
  save_tts(run.dir / "distill-tts.lrsk", r.tts, {{"stage", "distill-tts"}});
  save_manifest(run.dir / "distill-tts-corpus.tsv", r.corpus, "distill-tts-mels");
  std::ofstream out(run.dir / "distill-tts-filter.tsv");
  out << "# id\twcr\tadr\tkeep\n";
  for (const auto& d : r.diagnostics) out << d.id << '\t' << d.scores.wcr << '\t' << d.scores.adr << '\t' << d.keep << '\n';
  std::cout << "retention " << r.retention << '\n';
}

void distill_asr_cmd(Run& run) {
  const auto asr = load_asr(run.existing("ckpt.dual_asr", run.dir / "dual-asr.lrsk", "dual-transform"));
  const auto tts = load_tts(run.existing("ckpt.dual_tts", run.dir / "dual-tts.lrsk", "dual-transform"));
  const auto text = run.corpus("unpaired_text");
  auto speech = run.corpus("unpaired_seen");
  const auto unseen = run.corpus("unpaired_unseen");
  speech.insert(speech.end(), unseen.begin(), unseen.end());
  const auto high = run.corpus("paired_high"), low = run.corpus("paired_low");
  auto ctx = run.context();
  const auto r = distill_asr(asr, tts, text, speech, high, low, ctx);
  save_asr(run.dir / "distill-asr.lrsk", r.asr, {{"stage", "distill-asr"}});
}

void synthesize_cmd(Run& run) {
  const auto tts = load_tts(run.existing("ckpt.tts", run.dir / "distill-tts.lrsk", "distill-tts"));
  const std::string text = normalize_text(run.cfg.require_string("text"), default_english_rules(), &tts.vocab);
  const int speaker = static_cast<int>(run.cfg.get_int("speaker", 0));
  const auto out = run.path("output", run.dir / "synth.mel");
  const auto s = synthesize(tts, text, speaker, run.pipe);
  write_mel_blob(out, s.mel);
  std::cout << "wrote " << s.mel.rows() << " frames to " << out.string() << (s.hit_max_frames ? " (hit frame cap)" : "")
            << '\n';
  if (run.cfg.has("wav")) {
    MelConfig mc;
    mc.n_mels = static_cast<int>(s.mel.cols());
    MelSequence seq{s.mel.cast<float>(), speaker};
    write_wav(run.cfg.get_string("wav", ""), griffin_lim(seq, mc, static_cast<int>(run.cfg.get_int("gl.iterations", 60))),
              mc.sample_rate);
  }
}

MelMatrix input_mel(const Run& run, int n_mels) {
  const auto in = run.existing("input", {}, "");
  if (in.extension() == ".wav") {
    MelConfig mc;
    mc.n_mels = n_mels;
    int sr = 0;
    const auto wave = read_wav(in, &sr);
    if (sr != mc.sample_rate) throw AudioError(in.string() + ": expected " + std::to_string(mc.sample_rate) + " Hz");
    return mel_spectrogram(wave, mc).frames;
  }
  return read_mel_blob(in);
}

void recognize_cmd(Run& run) {
  const auto asr = load_asr(run.existing("ckpt.asr", run.dir / "distill-asr.lrsk", "distill-asr"));
  std::cout << recognize(asr, input_mel(run, static_cast<int>(asr.model.dims().n_mels)), run.pipe) << '\n';
}

void evaluate_cmd(Run& run) {
  if (run.cfg.has("hyp")) {
    // Two manifests matched by id: references from data.test (or ref), hypotheses from hyp.
    const auto ref = load_manifest(run.existing("ref", run.data / "test.tsv", "gen-toy"), false);
    const auto hyp = load_manifest(run.existing("hyp", {}, ""), false);
    std::map<std::string, std::string> by_id;
    for (const auto& u : hyp) by_id[u.id] = u.text.value_or("");
    EvalReport report;
    for (const auto& u : ref) {
      if (!u.text) throw CorpusError("reference '" + u.id + "' has no text");
      const auto it = by_id.find(u.id);
      if (it == by_id.end()) throw CorpusError("no hypothesis for '" + u.id + "'");
      report.add(u.id, *u.text, it->second);
    }
    write_report(run.path("output", run.dir / "eval.tsv"), report);
    return;
  }
  const auto asr = load_asr(run.existing("ckpt.asr", run.dir / "distill-asr.lrsk", "distill-asr"));
  const auto test = run.corpus("test");
  fs::create_directories(run.dir);
  write_report(run.path("output", run.dir / "eval-asr.tsv"), evaluate_asr(asr, test, run.pipe));
  const auto tts_path = run.path("ckpt.tts", run.dir / "distill-tts.lrsk");
  const auto spec_path = run.data / "toy_spec.json";
  if (fs::exists(tts_path) && fs::exists(spec_path)) {
    const auto tts = load_tts(tts_path);
    const auto spec = ToySpec::load(spec_path);
    const auto info = speaker_info(run);
    write_report(run.dir / "eval-tts-toy.tsv",
                 evaluate_tts_toy(tts, test, spec, run.pipe, {}, info.value("target_speaker", 0)));
  }
}

void diagnose_cmd(Run& run) {
  const auto tts = load_tts(run.existing("ckpt.tts", run.dir / "dual-tts.lrsk", "dual-transform"));
  const auto texts = load_manifest(run.existing("input", run.data / "test.tsv", "gen-toy"), false);
  const int speaker = static_cast<int>(run.cfg.get_int("speaker", 0));
  const auto out_path = run.path("output", run.dir / "diagnostics.tsv");
  std::ofstream out(out_path);
  out << "# id\twcr\tadr\tkeep\n";
  std::size_t kept = 0, total = 0;
  for (const auto& u : texts) {
    if (!u.text || u.text->empty()) continue;
    const auto s = synthesize(tts, *u.text, speaker, run.pipe);
    const auto scores = diagnose(s.attention, WordSegmentation::from_text(*u.text), run.pipe.filter.b);
    const bool keep = filter_decision(scores, run.pipe.filter.wcr_min, run.pipe.filter.adr_min);
    out << u.id << '\t' << scores.wcr << '\t' << scores.adr << '\t' << keep << '\n';
    kept += keep;
    ++total;
  }
  std::cout << "kept " << kept << " of " << total << "; report " << out_path.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lowres: low-resource TTS/ASR training pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", overrides, "override a configuration key (key=value)");
  app.fallthrough();

  const std::vector<std::pair<std::string, void (*)(Run&)>> commands = {
      {"gen-toy", gen_toy},
      {"pretrain", pretrain_cmd},
      {"finetune", finetune_cmd},
      {"dual-transform", dual_cmd},
      {"distill-tts", distill_tts_cmd},
      {"distill-asr", distill_asr_cmd},
      {"synthesize", synthesize_cmd},
      {"recognize", recognize_cmd},
      {"evaluate", evaluate_cmd},
      {"diagnose-attention", diagnose_cmd},
  };
  for (const auto& [name, fn] : commands) app.add_subcommand(name);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    Run run;
    if (!config_path.empty()) run.cfg = Config::load(config_path);
    for (const auto& o : overrides) run.cfg.apply_override(o);
    run.pipe = PipelineConfig::from_config(run.cfg);
    run.dir = run.cfg.get_string("run.dir", "run");
    run.data = run.cfg.get_string("data.dir", (run.dir / "data").string());
    // One config file serves every stage, so the toy keys are validated here too.
    toy_bundle_options(run.cfg);
    std::cout << "# resolved configuration\n" << run.cfg.dump() << "# subcommand " << name << '\n';
    for (const auto& [cmd, fn] : commands)
      if (cmd == name) fn(run);
    // Catches typos in keys this subcommand would have read.
    for (const auto& key : run.cfg.unused_keys()) std::cerr << "warning: configuration key '" << key << "' was not used\n";
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const Precondition& e) {
    std::cerr << "precondition failed: " << e.what() << '\n';
    return kPrecondition;
  } catch (const StageAbort& e) {
    std::cerr << "stage aborted: " << e.what() << '\n';
    return kPrecondition;
  } catch (const CorpusError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kData;
  } catch (const AudioError& e) {
    std::cerr << "audio error: " << e.what() << '\n';
    return kData;
  } catch (const NormalizationError& e) {
    std::cerr << "text error: " << e.what() << '\n';
    return kData;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kTraining;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
