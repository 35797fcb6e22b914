#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "emberxp/attribution_grouping.h"
#include "emberxp/ember_ingest.h"
#include "emberxp/eval_metrics.h"
#include "emberxp/gbdt.h"
#include "emberxp/lora_planner.h"
#include "emberxp/model_gateway.h"
#include "emberxp/narrative.h"
#include "emberxp/tree_shap.h"

namespace emberxp {

struct MockConfig {
  bool enabled = false;
  std::map<std::string, double> rates;  // model id -> degradation rate
  uint64_t seed = 0;
};

/// Resolved run configuration. Required keys: dataset_path, model_path, seed,
/// output_dir, and either endpoints or mock.enabled = true.
struct HarnessConfig {
  std::string dataset_path;
  std::string model_path;
  uint64_t seed = 0;
  SplitSizes split;
  std::vector<ModelEndpoint> endpoints;
  MockConfig mock;
  ExplainerMode explainer_mode = ExplainerMode::kPathDependent;
  std::string output_dir;
  /// Interventional mode uses the first background_size train-split samples.
  int background_size = 100;
  bool use_focus = false;  // evaluate the focus split instead of the test split
  std::optional<std::string> templates_path;
  std::map<std::string, double> timing_minutes;
  /// Appends the LoRA plan table to the report when present.
  std::optional<std::vector<int64_t>> lora_ranks;
  int workers = 4;
  bool skip_corrupt_lines = false;
};

/// How much of the configuration a command needs. kData requires
/// dataset_path, seed and output_dir; kModel adds model_path; kFull adds
/// endpoints or mock.enabled.
enum class ConfigScope { kData, kModel, kFull };

/// Throws ConfigError naming every missing key, or the first invalid value.
HarnessConfig ParseConfig(const nlohmann::json& j, ConfigScope scope = ConfigScope::kFull);
HarnessConfig LoadConfig(const std::filesystem::path& path,
                         ConfigScope scope = ConfigScope::kFull);
/// Full resolved configuration, defaults included; ParseConfig accepts it.
nlohmann::json ToJson(const HarnessConfig& config);

NarrativeTemplates TemplatesFor(const HarnessConfig& config);

/// Records and the deterministic split of a configured dataset.
struct Corpus {
  std::map<std::string, PESampleRecord> by_id;
  CorpusSplit split;
  std::size_t skipped_lines = 0;

  const PESampleRecord& at(const std::string& id) const;
};

Corpus LoadCorpus(const HarnessConfig& config);

/// Everything derived from one sample before generation.
struct ExplainedSample {
  std::string sample_id;
  Label label = Label::kBenign;
  std::optional<std::string> family;
  double score = 0.0;
  Attribution attribution;
  TopGroups top_groups;
};

/// Vectorize, score, explain and rank groups for each id, in parallel;
/// output follows `ids` order. `background` is only used in interventional mode.
std::vector<ExplainedSample> ExplainSamples(const Ensemble& model, const Corpus& corpus,
                                            const std::vector<std::string>& ids,
                                            ExplainerMode mode,
                                            const std::vector<std::vector<double>>& background,
                                            int workers);

/// Feature rows of the first `count` train-split ids.
std::vector<std::vector<double>> BackgroundRows(const Corpus& corpus, int count);

struct ExplanationCase {
  std::string sample_id;
  PromptCase prompt;
  ReferenceExplanation reference;
  std::map<std::string, std::string> candidates;
  std::map<std::string, MetricScores> scores;
  std::map<std::string, std::string> errors;  // model id -> error kind
};

ExplanationCase MakeCase(const ExplainedSample& sample, const NarrativeTemplates& templates);

struct SampleRow {
  std::string model_id;
  std::string sample_id;
  MetricScores scores;
  std::string status = "ok";  // "ok" or "error:<kind>"

  bool ok() const { return status == "ok"; }
};

struct ModelSummary {
  MetricScores means;
  std::size_t n_scored = 0;
  std::size_t n_excluded = 0;
};

struct EvaluationReport {
  std::vector<SampleRow> per_sample;  // sorted by (model_id, sample_id)
  std::map<std::string, ModelSummary> per_model;
  nlohmann::json config_echo;
  std::optional<LoraTable> lora_table;
  std::map<std::string, double> timing_minutes;
};

/// Means over ok rows, summed per model in ascending sample_id order.
std::map<std::string, ModelSummary> Summarize(const std::vector<SampleRow>& rows);

/// Generates and scores every (model, case) pair with `workers` threads.
/// Results are stored by index, so completion order never affects them.
/// Throws Error when some model has no successfully scored sample.
EvaluationReport Evaluate(std::vector<ExplanationCase>& cases, GenerationBackend& backend,
                          Embedder& embedder, int workers);

/// Builds the backend and embedder the configuration asks for: the mock
/// provider when mock.enabled, else the generation endpoints; semantic
/// similarity uses the first embedding endpoint, or FallbackEmbed.
EvaluationReport RunEval(const HarnessConfig& config);

/// Writes per_sample.csv, summary.json, plotdata.json and, with a LoRA table,
/// lora_plan.csv. Creates `dir` when needed.
void EmitReport(const EvaluationReport& report, const std::filesystem::path& dir);

std::string PerSampleCsv(const std::vector<SampleRow>& rows);
nlohmann::json SummaryJson(const EvaluationReport& report);
nlohmann::json PlotData(const EvaluationReport& report);

/// Shortest decimal that reads back to the same double.
std::string FormatDouble(double v);

/// Lines "sample_id,dimension,phi" for every nonzero phi, then
/// "sample_id,base,<base_value>".
std::string AttributionCsv(const Attribution& attribution);

/// One JSON object per case: sample id, label, score, top groups, the
/// rendered chat prompt, its messages and the reference text.
nlohmann::json GenTruthJson(const ExplainedSample& sample, const ExplanationCase& c);

}  // namespace emberxp
