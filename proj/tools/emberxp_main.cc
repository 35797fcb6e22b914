// emberxp command-line driver. Every subcommand reads the same JSON config;
// flags override individual keys.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "emberxp/error.h"
#include "emberxp/featurizer.h"
#include "emberxp/harness.h"
#include "emberxp/lora_planner.h"
#include "emberxp/synthetic.h"

namespace {

using emberxp::ConfigScope;
using nlohmann::json;

struct CommonFlags {
  std::string config_path;
  std::optional<std::string> dataset;
  std::optional<std::string> model;
  std::optional<uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::string> explainer;
  std::optional<int> workers;
  bool skip_corrupt = false;
};

void AddCommonFlags(CLI::App* app, CommonFlags& f) {
  app->add_option("-c,--config", f.config_path, "JSON config file");
  app->add_option("--dataset", f.dataset, "EMBER JSONL dataset (dataset_path)");
  app->add_option("--model", f.model, "LightGBM text model (model_path)");
  app->add_option("--seed", f.seed, "corpus selection seed");
  app->add_option("-o,--output-dir", f.output_dir, "output directory");
  app->add_option("--explainer", f.explainer, "path | interventional")
      ->check(CLI::IsMember({"path", "interventional"}));
  app->add_option("--workers", f.workers, "worker threads");
  app->add_flag("--skip-corrupt", f.skip_corrupt, "skip unparseable dataset lines");
}

json ReadJson(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw emberxp::ConfigError(fmt::format("cannot open config {}", path));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw emberxp::ConfigError(fmt::format("config {}: {}", path, e.what()));
  }
}

json RawConfig(const CommonFlags& f) {
  json j = f.config_path.empty() ? json::object() : ReadJson(f.config_path);
  if (f.dataset) j["dataset_path"] = *f.dataset;
  if (f.model) j["model_path"] = *f.model;
  if (f.seed) j["seed"] = *f.seed;
  if (f.output_dir) j["output_dir"] = *f.output_dir;
  if (f.explainer) j["explainer_mode"] = *f.explainer;
  if (f.workers) j["workers"] = *f.workers;
  if (f.skip_corrupt) j["skip_corrupt_lines"] = true;
  return j;
}

const std::vector<std::string>& SplitIds(const emberxp::Corpus& corpus, const std::string& split,
                                         std::vector<std::string>& scratch) {
  if (split == "train") return corpus.split.train;
  if (split == "test") return corpus.split.test;
  if (split == "focus") return corpus.split.focus;
  scratch = corpus.split.test;
  scratch.insert(scratch.end(), corpus.split.focus.begin(), corpus.split.focus.end());
  scratch.insert(scratch.end(), corpus.split.train.begin(), corpus.split.train.end());
  return scratch;
}

std::filesystem::path EnsureDir(const std::string& dir) {
  std::filesystem::create_directories(dir);
  return dir;
}

void WriteText(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw emberxp::Error(fmt::format("cannot write {}", path.string()));
  out << text;
}

std::vector<emberxp::ExplainedSample> ExplainSplit(const emberxp::HarnessConfig& cfg,
                                                   const emberxp::Corpus& corpus,
                                                   const std::vector<std::string>& ids) {
  const auto model = emberxp::LoadModel(cfg.model_path);
  std::vector<std::vector<double>> background;
  if (cfg.explainer_mode == emberxp::ExplainerMode::kInterventional) {
    background = emberxp::BackgroundRows(corpus, cfg.background_size);
  }
  return emberxp::ExplainSamples(model, corpus, ids, cfg.explainer_mode, background, cfg.workers);
}

int RunIngest(const CommonFlags& f) {
  const auto cfg = emberxp::ParseConfig(RawConfig(f), ConfigScope::kData);
  const auto corpus = emberxp::LoadCorpus(cfg);
  const auto dir = EnsureDir(cfg.output_dir);
  WriteText(dir / "split.json", emberxp::ToJson(corpus.split).dump(2) + "\n");
  fmt::print("labeled records: {} (skipped lines: {})\n", corpus.by_id.size(),
             corpus.skipped_lines);
  fmt::print("train {} / test {} / focus {} -> {}\n", corpus.split.train.size(),
             corpus.split.test.size(), corpus.split.focus.size(), (dir / "split.json").string());
  return 0;
}

int RunVectorize(const CommonFlags& f, const std::string& split) {
  const auto cfg = emberxp::ParseConfig(RawConfig(f), ConfigScope::kData);
  const auto corpus = emberxp::LoadCorpus(cfg);
  std::vector<std::string> scratch;
  const auto& ids = SplitIds(corpus, split, scratch);
  const auto path = EnsureDir(cfg.output_dir) / fmt::format("vectors_{}.bin", split);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw emberxp::Error(fmt::format("cannot write {}", path.string()));
  for (const auto& id : ids) emberxp::WriteVectorDump(out, emberxp::Vectorize(corpus.at(id)));
  fmt::print("{} vectors of {} features -> {}\n", ids.size(), emberxp::kFeatureDim, path.string());
  return 0;
}

int RunScore(const CommonFlags& f, const std::string& split) {
  const auto cfg = emberxp::ParseConfig(RawConfig(f), ConfigScope::kModel);
  const auto corpus = emberxp::LoadCorpus(cfg);
  const auto model = emberxp::LoadModel(cfg.model_path);
  std::vector<std::string> scratch;
  fmt::print("sample_id,label,score\n");
  for (const auto& id : SplitIds(corpus, split, scratch)) {
    const auto& rec = corpus.at(id);
    fmt::print("{},{},{:.6f}\n", id, emberxp::LabelName(rec.label),
               emberxp::PredictScore(model, emberxp::Vectorize(rec).values));
  }
  return 0;
}

int RunExplain(const CommonFlags& f, const std::string& split, bool dump_attributions) {
  const auto cfg = emberxp::ParseConfig(RawConfig(f), ConfigScope::kModel);
  const auto corpus = emberxp::LoadCorpus(cfg);
  std::vector<std::string> scratch;
  const auto explained = ExplainSplit(cfg, corpus, SplitIds(corpus, split, scratch));
  std::string csv = "sample_id,dimension,phi\n";
  for (const auto& s : explained) {
    fmt::print("{} ({}) score {}\n", s.sample_id, emberxp::LabelName(s.label),
               emberxp::FormatScore(s.score));
    for (std::size_t i = 0; i < s.top_groups.ranked.size(); ++i) {
      const auto& g = s.top_groups.ranked[i];
      fmt::print("  {}. {}: {}, {} impact (shap {:+.4f}, share {:.3f})\n", i + 1, g.display_name,
                 emberxp::DirectionName(g.direction), emberxp::ImpactName(g.impact), g.shap_sum,
                 g.abs_share);
    }
    if (dump_attributions) csv += emberxp::AttributionCsv(s.attribution);
  }
  if (dump_attributions) {
    const auto path = EnsureDir(cfg.output_dir) / fmt::format("attributions_{}.csv", split);
    WriteText(path, csv);
    fmt::print("attributions -> {}\n", path.string());
  }
  return 0;
}

int RunGenTruth(const CommonFlags& f, const std::string& split) {
  const auto cfg = emberxp::ParseConfig(RawConfig(f), ConfigScope::kModel);
  const auto corpus = emberxp::LoadCorpus(cfg);
  std::vector<std::string> scratch;
  const auto explained = ExplainSplit(cfg, corpus, SplitIds(corpus, split, scratch));
  const auto templates = emberxp::TemplatesFor(cfg);
  std::string lines;
  for (const auto& s : explained) {
    lines += emberxp::GenTruthJson(s, emberxp::MakeCase(s, templates)).dump() + "\n";
  }
  const auto path = EnsureDir(cfg.output_dir) / fmt::format("gen_truth_{}.jsonl", split);
  WriteText(path, lines);
  fmt::print("{} prompt/reference pairs -> {}\n", explained.size(), path.string());
  return 0;
}

int RunEvaluate(const CommonFlags& f, bool focus, bool mock) {
  json raw = RawConfig(f);
  if (focus) raw["use_focus"] = true;
  if (mock) {
    if (!raw.contains("mock") || !raw["mock"].is_object()) raw["mock"] = json::object();
    raw["mock"]["enabled"] = true;
    if (!raw["mock"].contains("rates")) {
      raw["mock"]["rates"] = {{"full", 0.1}, {"lora_r256", 0.15}, {"lora_r16", 0.5}};
    }
  }
  const auto cfg = emberxp::ParseConfig(raw, ConfigScope::kFull);
  const auto report = emberxp::RunEval(cfg);
  emberxp::EmitReport(report, cfg.output_dir);
  fmt::print("{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7} {:>8}\n", "model", "bleu", "rouge1",
             "rouge2", "rougeL", "semantic", "scored", "excluded");
  for (const auto& [model, s] : report.per_model) {
    fmt::print("{:<16} {:>8.4f} {:>8.4f} {:>8.4f} {:>8.4f} {:>8.4f} {:>7} {:>8}\n", model,
               s.means.bleu, s.means.rouge1, s.means.rouge2, s.means.rougeL, s.means.semantic,
               s.n_scored, s.n_excluded);
  }
  fmt::print("reports -> {}\n", cfg.output_dir);
  return 0;
}

int RunLoraPlan(const std::vector<int64_t>& ranks, bool csv, const std::string& output_dir) {
  const auto table = emberxp::PlanTable(emberxp::BaseModelSpec{}, ranks);
  const std::string text = csv ? emberxp::TableCsv(table) : emberxp::TableText(table);
  std::fputs(text.c_str(), stdout);
  if (!output_dir.empty()) {
    const auto path = EnsureDir(output_dir) / "lora_plan.csv";
    WriteText(path, emberxp::TableCsv(table));
  }
  return 0;
}

int RunSynth(const std::string& out_dir, const emberxp::SyntheticCorpusOptions& opts) {
  const auto dir = EnsureDir(out_dir);
  const auto fx = emberxp::BuildSyntheticFixture(opts);
  emberxp::WriteJsonl(fx.records, dir / "dataset.jsonl");
  WriteText(dir / "model.txt", emberxp::SerializeModel(fx.model));
  json cfg = {{"dataset_path", (dir / "dataset.jsonl").string()},
              {"model_path", (dir / "model.txt").string()},
              {"seed", 42},
              {"output_dir", (dir / "run").string()},
              {"explainer_mode", "path"},
              {"mock",
               {{"enabled", true},
                {"seed", 1234},
                {"rates", {{"full", 0.1}, {"lora_r256", 0.15}, {"lora_r16", 0.5}}}}},
              {"lora_ranks", emberxp::DefaultRanks()}};
  WriteText(dir / "config.json", cfg.dump(2) + "\n");
  fmt::print("{} records, {} trees -> {}\n", fx.records.size(), fx.model.trees.size(),
             dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emberxp: EMBER score explanations and narrative evaluation"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string split = "test";

  auto* ingest = app.add_subcommand("ingest", "validate the dataset and write split.json");
  AddCommonFlags(ingest, flags);

  auto* vectorize = app.add_subcommand("vectorize", "dump 2381-dim feature vectors");
  AddCommonFlags(vectorize, flags);
  vectorize->add_option("--split", split, "train | test | focus | all")
      ->check(CLI::IsMember({"train", "test", "focus", "all"}));

  auto* score = app.add_subcommand("score", "print EMBER scores");
  AddCommonFlags(score, flags);
  score->add_option("--split", split)->check(CLI::IsMember({"train", "test", "focus", "all"}));

  bool dump_attributions = false;
  auto* explain = app.add_subcommand("explain", "SHAP top-5 feature groups per sample");
  AddCommonFlags(explain, flags);
  explain->add_option("--split", split)->check(CLI::IsMember({"train", "test", "focus", "all"}));
  explain->add_flag("--attributions", dump_attributions, "also write per-dimension phi CSV");

  std::string truth_split = "train";
  auto* gen_truth = app.add_subcommand("gen-truth", "write prompt/reference pairs as JSONL");
  AddCommonFlags(gen_truth, flags);
  gen_truth->add_option("--split", truth_split)
      ->check(CLI::IsMember({"train", "test", "focus", "all"}));

  bool focus = false;
  bool mock = false;
  auto* evaluate = app.add_subcommand("evaluate", "generate, score and report per model");
  AddCommonFlags(evaluate, flags);
  evaluate->add_flag("--focus", focus, "evaluate the 5-sample focus split");
  evaluate->add_flag("--mock", mock, "use the offline mock provider");

  std::vector<int64_t> ranks = emberxp::DefaultRanks();
  bool csv = false;
  std::string plan_dir;
  auto* lora = app.add_subcommand("lora-plan", "LoRA adapter size table");
  lora->add_option("--ranks", ranks, "ranks to plan")->delimiter(',');
  lora->add_flag("--csv", csv, "print CSV instead of aligned text");
  lora->add_option("-o,--output-dir", plan_dir, "also write lora_plan.csv here");

  std::string synth_dir = "synthetic";
  emberxp::SyntheticCorpusOptions synth_opts;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset, model and config");
  synth->add_option("-o,--output-dir", synth_dir);
  synth->add_option("--benign", synth_opts.benign);
  synth->add_option("--malicious", synth_opts.malicious);
  synth->add_option("--seed", synth_opts.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return RunIngest(flags);
    if (*vectorize) return RunVectorize(flags, split);
    if (*score) return RunScore(flags, split);
    if (*explain) return RunExplain(flags, split, dump_attributions);
    if (*gen_truth) return RunGenTruth(flags, truth_split);
    if (*evaluate) return RunEvaluate(flags, focus, mock);
    if (*lora) return RunLoraPlan(ranks, csv, plan_dir);
    if (*synth) return RunSynth(synth_dir, synth_opts);
  } catch (const emberxp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
