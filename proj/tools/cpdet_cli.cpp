// Command-line surface for the prompt-conditioned detector.
//
// Commands
//   gen-data            render a benchmark split to disk (index + images)
//   pretrain            train the full detector with text prompts
//   train-visual-prompt distill the exemplar prompt encoder on a frozen base
//   tune-prompt         optimize prompt embeddings on a frozen base
//   eval                evaluate a checkpoint on a split
//   grad-check          finite-difference verification battery
//   ablate              toggle architecture pieces and retrain
//
// Configuration is key = value text.  Every flag `--some-key v` overrides the
// config key `some_key`; command-level flags (--config, --spec, --split,
// --base, --ckpt, --out, --prompt-mode, --module, --toggle) route files and
// modes instead.  Exit status is zero only when the command's contract checks
// pass.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cpdet/config.hpp"
#include "cpdet/dataset.hpp"
#include "cpdet/gradcheck_suite.hpp"
#include "cpdet/model.hpp"
#include "cpdet/train.hpp"

namespace {

using cpdet::BenchmarkSplit;
using cpdet::Checkpoint;
using cpdet::CpDetr;
using cpdet::InputError;
using cpdet::KvConfig;
using cpdet::SplitDescription;
using cpdet::TrainConfig;

struct CommandLine {
  std::string command;
  std::map<std::string, std::string> flags;  // --some-key v  ->  some_key = v
};

CommandLine parse_command_line(int argc, char** argv) {
  CommandLine cl;
  if (argc < 2) throw InputError("no command given");
  cl.command = argv[1];
  for (int i = 2; i < argc; ++i) {
    std::string a = argv[i];
    if (a.rfind("--", 0) != 0) throw InputError("expected a --flag, got '" + a + "'");
    if (i + 1 >= argc) throw InputError("flag '" + a + "' is missing its value");
    std::string key = a.substr(2);
    for (char& c : key)
      if (c == '-') c = '_';
    if (key.empty()) throw InputError("empty flag name");
    if (cl.flags.count(key)) throw InputError("flag '" + a + "' given twice");
    cl.flags[key] = argv[++i];
  }
  return cl;
}

// Pop a command-level flag; the rest feed the config.
std::string take_flag(CommandLine& cl, const std::string& key, const std::string& fallback = "") {
  auto it = cl.flags.find(key);
  if (it == cl.flags.end()) return fallback;
  std::string v = it->second;
  cl.flags.erase(it);
  return v;
}

std::string require_flag(CommandLine& cl, const std::string& key) {
  std::string v = take_flag(cl, key);
  if (v.empty()) throw InputError("command '" + cl.command + "' requires --" + key);
  return v;
}

// Config file (optional) + every remaining flag as an override.
KvConfig merged_config(const CommandLine& cl, const std::string& path) {
  KvConfig kv;
  if (!path.empty()) kv = KvConfig::from_file(path);
  for (const auto& [key, value] : cl.flags) kv.set(key, value);
  return kv;
}

bool files_identical(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return sa == sb;
}

int check_line(const char* what, bool ok) {
  std::printf("  [%s] %s\n", ok ? "ok" : "FAILED", what);
  return ok ? 0 : 1;
}

TrainConfig config_from_checkpoint_or_flags(const Checkpoint& ckpt, CommandLine& cl) {
  KvConfig kv;
  if (ckpt.meta.contains("train_config"))
    kv = KvConfig::from_text(ckpt.meta.at("train_config").get<std::string>());
  std::string extra = take_flag(cl, "config");
  if (!extra.empty()) {
    KvConfig file = KvConfig::from_file(extra);
    for (const auto& [key, value] : file.values) kv.set(key, value);
  }
  for (const auto& [key, value] : cl.flags) kv.set(key, value);
  return TrainConfig::from_kv(kv);
}

void save_model(CpDetr<double>& model, const TrainConfig& cfg, const std::string& out,
                uint64_t step, const std::string& regime,
                const std::vector<std::string>& frozen = {}) {
  Checkpoint ckpt = model_checkpoint(model, step, regime, frozen);
  ckpt.meta["train_config"] = cfg.to_kv().to_text();
  save_checkpoint(out, ckpt);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(CommandLine cl) {
  std::string spec_path = require_flag(cl, "spec");
  std::string out = require_flag(cl, "out");
  SplitDescription desc = SplitDescription::from_kv(merged_config(cl, spec_path));
  BenchmarkSplit split = desc.build();
  cpdet::write_dataset(split, out);
  std::printf("gen-data: %zu scenes, %zu categories -> %s.jsonl + %s.images\n",
              split.scenes.size(), split.categories.size(), out.c_str(), out.c_str());

  int fails = 0;
  BenchmarkSplit reread = cpdet::read_dataset(out);
  bool images_match = reread.scenes.size() == split.scenes.size();
  for (size_t i = 0; images_match && i < split.scenes.size(); ++i)
    images_match = reread.scenes[i].image.data() == split.scenes[i].image.data();
  fails += check_line("written dataset reads back bit-identical", images_match);
  fails += check_line("scenes regenerate from recorded seeds", cpdet::dataset_regenerates(reread));
  return fails == 0 ? 0 : 1;
}

int cmd_pretrain(CommandLine cl) {
  std::string out = require_flag(cl, "out");
  std::string config_path = take_flag(cl, "config");
  KvConfig kv = merged_config(cl, config_path);
  kv.set("regime", "pretrain");
  TrainConfig cfg = TrainConfig::from_kv(kv);

  BenchmarkSplit split = cpdet::split_from_train_config(cfg);
  CpDetr<double> model(cpdet::model_config_from(cfg),
                       cpdet::vocabulary_from_phrases(split.categories));
  cpdet::TrainerState<double> state(cfg);
  std::vector<cpdet::LossBreakdown> history = cpdet::run_pretrain(model, split, state);
  cpdet::ApReport ap = cpdet::evaluate_text_prompts(model, split);
  std::printf("pretrain: %zu steps, loss %.4f -> %.4f, train AP %.4f\n", history.size(),
              history.front().total, history.back().total, ap.mean);

  save_model(model, cfg, out, cfg.steps, "pretrain");

  int fails = 0;
  bool finite = true;
  for (const auto& h : history) finite = finite && std::isfinite(h.total);
  fails += check_line("all training losses finite", finite);
  {
    CpDetr<double> reloaded = cpdet::model_from_checkpoint<double>(cpdet::load_checkpoint(out));
    std::string tmp = out + ".roundtrip";
    save_model(reloaded, cfg, tmp, cfg.steps, "pretrain");
    fails += check_line("checkpoint round-trips byte-identically", files_identical(out, tmp));
    std::remove(tmp.c_str());
  }
  return fails == 0 ? 0 : 1;
}

int cmd_train_visual_prompt(CommandLine cl) {
  std::string base = require_flag(cl, "base");
  std::string out = take_flag(cl, "out", base + ".visual");
  Checkpoint base_ckpt = cpdet::load_checkpoint(base);
  TrainConfig cfg = config_from_checkpoint_or_flags(base_ckpt, cl);
  cfg.regime = "visual-prompt";

  CpDetr<double> model = cpdet::model_from_checkpoint<double>(base_ckpt);
  BenchmarkSplit split = cpdet::split_from_train_config(cfg);
  cpdet::TrainerState<double> state(cfg);
  state.base_loaded = true;

  auto frozen_pred = [](const std::string& name) { return name.rfind("visual.", 0) != 0; };
  uint64_t frozen_before = cpdet::params_hash_where(model, frozen_pred);
  std::vector<cpdet::VisualStepOut> history =
      cpdet::run_visual_prompt_training(model, split, state);
  uint64_t frozen_after = cpdet::params_hash_where(model, frozen_pred);

  double cos = cpdet::mean_prompt_cosine(model, split);
  cpdet::ApReport inter = cpdet::interactive_eval(model, split, cfg.seed);
  std::printf("train-visual-prompt: %zu steps, distill %.5f -> %.5f, cos %.4f, interactive AP %.4f\n",
              history.size(), history.front().distill, history.back().distill, cos, inter.mean);

  std::vector<std::string> frozen;
  for (const auto& [name, t] : model.named_params())
    if (frozen_pred(name)) frozen.push_back(name);
  save_model(model, cfg, out, cfg.steps, "visual-prompt", frozen);

  int fails = 0;
  bool finite = true;
  for (const auto& h : history) finite = finite && std::isfinite(h.total);
  fails += check_line("all training losses finite", finite);
  fails += check_line("frozen base parameters untouched", frozen_before == frozen_after);
  return fails == 0 ? 0 : 1;
}

int cmd_tune_prompt(CommandLine cl) {
  std::string base = require_flag(cl, "base");
  std::string split_path = require_flag(cl, "split");
  std::string out = take_flag(cl, "out");
  std::string m_flag = take_flag(cl, "super_class");
  Checkpoint base_ckpt = cpdet::load_checkpoint(base);
  if (!m_flag.empty()) cl.flags["super_class_m"] = m_flag;
  TrainConfig cfg = config_from_checkpoint_or_flags(base_ckpt, cl);
  cfg.regime = "tune-prompt";

  CpDetr<double> model = cpdet::model_from_checkpoint<double>(base_ckpt);
  BenchmarkSplit split = SplitDescription::from_kv(KvConfig::from_file(split_path)).build();

  uint64_t model_before = cpdet::params_hash_where(model, [](const std::string&) { return true; });
  cpdet::TuneResult<double> res = cpdet::tune_optimized_prompt(model, split, cfg);
  uint64_t model_after = cpdet::params_hash_where(model, [](const std::string&) { return true; });

  for (const std::string& w : res.report.warnings) std::printf("warning: %s\n", w.c_str());
  std::printf("tune-prompt: M=%zu, AP %.4f -> %.4f (%zu classes skipped)\n", cfg.super_class_m,
              res.report.ap_before, res.report.ap_after, res.report.skipped.size());

  if (!out.empty()) {
    Checkpoint pc;
    pc.meta["kind"] = "cpdet-prompts";
    pc.meta["labels"] = res.prompts.labels;
    pc.meta["row_class"] = res.prompts.row_class;
    pc.meta["class_of_label"] = res.class_of_label;
    pc.meta["rows_per_class"] = cfg.super_class_m;
    pc.add("rows", res.prompts.rows);
    cpdet::save_checkpoint(out, pc);
    std::printf("tune-prompt: wrote %s\n", out.c_str());
  }

  int fails = 0;
  fails += check_line("frozen model untouched by tuning", model_before == model_after);
  fails += check_line("tuned AP finite and in range",
                      std::isfinite(res.report.ap_after) && res.report.ap_after >= 0.0 &&
                          res.report.ap_after <= 1.0);
  return fails == 0 ? 0 : 1;
}

int cmd_eval(CommandLine cl) {
  std::string ckpt_path = require_flag(cl, "ckpt");
  std::string split_path = require_flag(cl, "split");
  std::string mode = take_flag(cl, "prompt_mode", "text");
  // --seed stays a split override; the interactive sampler has its own flag.
  std::string seed_flag = take_flag(cl, "interactive_seed", "0");

  CpDetr<double> model = cpdet::model_from_checkpoint<double>(cpdet::load_checkpoint(ckpt_path));
  KvConfig kv = merged_config(cl, split_path);
  BenchmarkSplit split = SplitDescription::from_kv(kv).build();

  cpdet::ApReport ap;
  if (mode == "text") {
    ap = cpdet::evaluate_text_prompts(model, split);
  } else if (mode == "visual") {
    ap = cpdet::visual_eval(model, split);
  } else if (mode == "interactive") {
    ap = cpdet::interactive_eval(model, split, std::stoull(seed_flag));
  } else {
    throw InputError("prompt mode must be text, visual, or interactive; got '" + mode + "'");
  }
  std::printf("eval: mode %s, mean AP@[.5:.95] %.4f\n", mode.c_str(), ap.mean);
  for (size_t c = 0; c < ap.per_class.size(); ++c)
    std::printf("  %-16s %s %.4f\n", split.categories[c].c_str(),
                ap.evaluated[c] ? "AP" : "--", ap.per_class[c]);

  int fails = 0;
  bool in_range = std::isfinite(ap.mean) && ap.mean >= 0.0 && ap.mean <= 1.0;
  fails += check_line("mean AP finite and in range", in_range);
  return fails == 0 ? 0 : 1;
}

int cmd_grad_check(CommandLine cl) {
  std::string module = take_flag(cl, "module");
  if (!cl.flags.empty())
    throw InputError("grad-check accepts only --module");
  std::vector<cpdet::GradCheckCase> cases = cpdet::run_gradcheck(module);
  if (cases.empty()) throw InputError("no gradient case matches '" + module + "'");
  int fails = 0;
  for (const auto& c : cases) {
    std::printf("  %-24s max rel err %11.3e  %s\n", c.name.c_str(), c.max_rel_err,
                c.pass ? "pass" : "FAIL");
    if (!c.pass) ++fails;
  }
  std::printf("grad-check: %zu cases, %d failures\n", cases.size(), fails);
  return fails == 0 ? 0 : 1;
}

int cmd_ablate(CommandLine cl) {
  std::string toggle = take_flag(cl, "toggle");
  std::string config_path = take_flag(cl, "config");
  TrainConfig cfg = TrainConfig::from_kv(merged_config(cl, config_path));
  std::vector<std::string> toggles;
  if (!toggle.empty())
    toggles.push_back(toggle);
  else
    toggles = {"none", "mfg", "psf", "aux-head", "prompt-loss", "super-class"};

  int fails = 0;
  for (const std::string& t : toggles) {
    cpdet::AblateResult r = cpdet::ablate_run<double>(t, cfg);
    std::string note = r.note.empty() ? "" : "  (" + r.note + ")";
    std::printf("  %-12s loss %8.4f -> %8.4f  AP %.4f  %s%s\n", t.c_str(), r.first_loss,
                r.last_loss, r.ap, r.completed && r.structural_ok ? "ok" : "FAILED", note.c_str());
    if (!(r.completed && r.structural_ok)) ++fails;
  }
  return fails == 0 ? 0 : 1;
}

void usage() {
  std::printf(
      "usage: cpdet <command> [--flag value ...]\n"
      "  gen-data            --spec FILE --out PREFIX [--seed N ...]\n"
      "  pretrain            --config FILE --out CKPT [--steps N --lr X ...]\n"
      "  train-visual-prompt --base CKPT [--out CKPT --steps N ...]\n"
      "  tune-prompt         --base CKPT --split FILE [--super-class M --out CKPT ...]\n"
      "  eval                --ckpt CKPT --split FILE [--prompt-mode text|visual|interactive]\n"
      "  grad-check          [--module NAME]\n"
      "  ablate              [--toggle mfg|psf|aux-head|prompt-loss|super-class] [--config FILE]\n"
      "config files are key = value lines; every flag overrides its config key\n");
}

}  // namespace

int main(int argc, char** argv) {
  try {
    CommandLine cl = parse_command_line(argc, argv);
    if (cl.command == "gen-data") return cmd_gen_data(std::move(cl));
    if (cl.command == "pretrain") return cmd_pretrain(std::move(cl));
    if (cl.command == "train-visual-prompt") return cmd_train_visual_prompt(std::move(cl));
    if (cl.command == "tune-prompt") return cmd_tune_prompt(std::move(cl));
    if (cl.command == "eval") return cmd_eval(std::move(cl));
    if (cl.command == "grad-check") return cmd_grad_check(std::move(cl));
    if (cl.command == "ablate") return cmd_ablate(std::move(cl));
    if (cl.command == "help" || cl.command == "--help" || cl.command == "-h") {
      usage();
      return 0;
    }
    std::fprintf(stderr, "unknown command '%s'\n", cl.command.c_str());
    usage();
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
