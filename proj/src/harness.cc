#include "emberxp/harness.h"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <exception>
#include <fstream>
#include <mutex>
#include <tuple>
#include <thread>

#include <fmt/format.h>

#include "emberxp/error.h"
#include "emberxp/featurizer.h"

namespace emberxp {

using nlohmann::json;

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// thrown by any call is rethrown after all threads finish.
template <typename Fn>
void ParallelFor(std::size_t n, int workers, Fn fn) {
  const std::size_t threads = std::clamp<std::size_t>(workers < 1 ? 1 : workers, 1, n == 0 ? 1 : n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto loop = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  if (threads == 1) {
    loop();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(loop);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
}

SplitSizes SplitFromTotals(int train, int test, int focus) {
  SplitSizes s;
  s.train_benign = train / 2;
  s.train_malicious = train - train / 2;
  s.test_benign = test / 2;
  s.test_malicious = test - test / 2;
  s.focus_benign = focus / 2;
  s.focus_malicious = focus - focus / 2;
  return s;
}

json MetricsJson(const MetricScores& s) {
  return {{"bleu", s.bleu},
          {"rouge1", s.rouge1},
          {"rouge2", s.rouge2},
          {"rougeL", s.rougeL},
          {"semantic", s.semantic}};
}

void WriteFile(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  out << content;
  if (!out) throw Error(fmt::format("write failed for {}", path.string()));
}

constexpr std::string_view kMetricNames[] = {"bleu", "rouge1", "rouge2", "rougeL", "semantic"};

double MetricValue(const MetricScores& s, std::string_view name) {
  if (name == "bleu") return s.bleu;
  if (name == "rouge1") return s.rouge1;
  if (name == "rouge2") return s.rouge2;
  if (name == "rougeL") return s.rougeL;
  return s.semantic;
}

}  // namespace

HarnessConfig ParseConfig(const json& j, ConfigScope scope) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  HarnessConfig c;
  std::vector<std::string> missing;
  for (const char* key : {"dataset_path", "model_path", "seed", "output_dir"}) {
    if (scope == ConfigScope::kData && std::string_view(key) == "model_path") continue;
    if (!j.contains(key)) missing.push_back(key);
  }
  const bool mock = j.contains("mock") && j.at("mock").is_object() &&
                    j.at("mock").value("enabled", false);
  if (scope == ConfigScope::kFull && !mock && !j.contains("endpoints")) {
    missing.push_back("endpoints (or mock.enabled)");
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw ConfigError(fmt::format("config is missing required keys: {}", names));
  }

  try {
    c.dataset_path = j.at("dataset_path").get<std::string>();
    c.model_path = j.value("model_path", "");
    c.seed = j.at("seed").get<uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("split")) {
      const auto& s = j.at("split");
      c.split = SplitFromTotals(s.value("train", 1000), s.value("test", 50), s.value("focus", 5));
    }
    if (j.contains("endpoints")) c.endpoints = ParseEndpoints(j.at("endpoints"));
    c.mock.seed = c.seed;
    if (j.contains("mock")) {
      const auto& m = j.at("mock");
      c.mock.enabled = m.value("enabled", false);
      c.mock.seed = m.value("seed", c.seed);
      if (m.contains("rates")) c.mock.rates = m.at("rates").get<std::map<std::string, double>>();
    }
    const std::string mode = j.value("explainer_mode", "path");
    if (mode == "path") {
      c.explainer_mode = ExplainerMode::kPathDependent;
    } else if (mode == "interventional") {
      c.explainer_mode = ExplainerMode::kInterventional;
    } else {
      throw ConfigError(fmt::format("explainer_mode must be \"path\" or \"interventional\", got \"{}\"", mode));
    }
    c.background_size = j.value("background_size", c.background_size);
    c.use_focus = j.value("use_focus", c.use_focus);
    if (j.contains("templates_path") && !j.at("templates_path").is_null()) {
      c.templates_path = j.at("templates_path").get<std::string>();
    }
    if (j.contains("timing_minutes")) {
      c.timing_minutes = j.at("timing_minutes").get<std::map<std::string, double>>();
    }
    if (j.contains("lora_ranks") && !j.at("lora_ranks").is_null()) {
      c.lora_ranks = j.at("lora_ranks").get<std::vector<int64_t>>();
    }
    c.workers = j.value("workers", c.workers);
    c.skip_corrupt_lines = j.value("skip_corrupt_lines", c.skip_corrupt_lines);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config: {}", e.what()));
  }

  if (scope == ConfigScope::kFull && c.mock.enabled) {
    if (c.mock.rates.empty()) throw ConfigError("mock.enabled needs mock.rates");
    for (const auto& [id, rate] : c.mock.rates) {
      if (!(rate >= 0.0 && rate <= 1.0)) {
        throw ConfigError(fmt::format("mock rate for {} must be in [0, 1]", id));
      }
    }
  }
  if (c.background_size < 1) throw ConfigError("background_size must be >= 1");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  return c;
}

HarnessConfig LoadConfig(const std::filesystem::path& path, ConfigScope scope) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config {}: {}", path.string(), e.what()));
  }
  return ParseConfig(j, scope);
}

json ToJson(const HarnessConfig& c) {
  json j;
  j["dataset_path"] = c.dataset_path;
  j["model_path"] = c.model_path;
  j["seed"] = c.seed;
  j["split"] = {{"train", c.split.train_benign + c.split.train_malicious},
                {"test", c.split.test_benign + c.split.test_malicious},
                {"focus", c.split.focus_benign + c.split.focus_malicious}};
  j["endpoints"] = json::array();
  for (const auto& e : c.endpoints) j["endpoints"].push_back(ToJson(e));
  j["mock"] = {{"enabled", c.mock.enabled}, {"rates", c.mock.rates}, {"seed", c.mock.seed}};
  j["explainer_mode"] =
      c.explainer_mode == ExplainerMode::kPathDependent ? "path" : "interventional";
  j["output_dir"] = c.output_dir;
  j["background_size"] = c.background_size;
  j["use_focus"] = c.use_focus;
  j["templates_path"] = c.templates_path ? json(*c.templates_path) : json(nullptr);
  j["timing_minutes"] = c.timing_minutes;
  j["lora_ranks"] = c.lora_ranks ? json(*c.lora_ranks) : json(nullptr);
  j["workers"] = c.workers;
  j["skip_corrupt_lines"] = c.skip_corrupt_lines;
  return j;
}

NarrativeTemplates TemplatesFor(const HarnessConfig& config) {
  return config.templates_path ? NarrativeTemplates::Load(*config.templates_path)
                               : NarrativeTemplates::Default();
}

const PESampleRecord& Corpus::at(const std::string& id) const {
  auto it = by_id.find(id);
  if (it == by_id.end()) throw DatasetError(fmt::format("unknown sample id {}", id));
  return it->second;
}

Corpus LoadCorpus(const HarnessConfig& config) {
  Corpus corpus;
  auto records = LoadDataset(config.dataset_path, LabelFilter::kLabeledOnly,
                             config.skip_corrupt_lines ? CorruptLinePolicy::kSkip
                                                       : CorruptLinePolicy::kAbort,
                             &corpus.skipped_lines);
  corpus.split = SelectCorpus(records, config.seed, config.split);
  for (auto& r : records) corpus.by_id.try_emplace(r.sha256, std::move(r));
  return corpus;
}

std::vector<std::vector<double>> BackgroundRows(const Corpus& corpus, int count) {
  std::vector<std::vector<double>> rows;
  for (const auto& id : corpus.split.train) {
    if (static_cast<int>(rows.size()) >= count) break;
    rows.push_back(Vectorize(corpus.at(id)).values);
  }
  return rows;
}

std::vector<ExplainedSample> ExplainSamples(const Ensemble& model, const Corpus& corpus,
                                            const std::vector<std::string>& ids,
                                            ExplainerMode mode,
                                            const std::vector<std::vector<double>>& background,
                                            int workers) {
  std::vector<ExplainedSample> out(ids.size());
  ParallelFor(ids.size(), workers, [&](std::size_t i) {
    const auto& rec = corpus.at(ids[i]);
    const FeatureVector fv = Vectorize(rec);
    ExplainedSample& s = out[i];
    s.sample_id = rec.sha256;
    s.label = rec.label;
    s.family = rec.family;
    s.score = PredictScore(model, fv.values);
    s.attribution = mode == ExplainerMode::kPathDependent
                        ? Explain(model, fv)
                        : ExplainInterventional(model, fv.values, background);
    s.attribution.sample_id = rec.sha256;
    s.top_groups = TopK(Aggregate(s.attribution));
  });
  return out;
}

ExplanationCase MakeCase(const ExplainedSample& s, const NarrativeTemplates& templates) {
  ExplanationCase c;
  c.sample_id = s.sample_id;
  c.prompt = BuildPrompt(s.sample_id, s.score, s.label, s.top_groups, s.family, templates);
  c.reference = BuildReference(s.sample_id, s.score, s.label, s.top_groups, templates);
  return c;
}

std::map<std::string, ModelSummary> Summarize(const std::vector<SampleRow>& rows) {
  std::map<std::string, std::vector<const SampleRow*>> by_model;
  for (const auto& r : rows) by_model[r.model_id].push_back(&r);
  std::map<std::string, ModelSummary> out;
  for (auto& [model, list] : by_model) {
    std::sort(list.begin(), list.end(),
              [](const SampleRow* a, const SampleRow* b) { return a->sample_id < b->sample_id; });
    ModelSummary& s = out[model];
    MetricScores sum;
    for (const SampleRow* r : list) {
      if (!r->ok()) {
        ++s.n_excluded;
        continue;
      }
      ++s.n_scored;
      sum.bleu += r->scores.bleu;
      sum.rouge1 += r->scores.rouge1;
      sum.rouge2 += r->scores.rouge2;
      sum.rougeL += r->scores.rougeL;
      sum.semantic += r->scores.semantic;
    }
    if (s.n_scored > 0) {
      const double n = static_cast<double>(s.n_scored);
      s.means = {sum.bleu / n, sum.rouge1 / n, sum.rouge2 / n, sum.rougeL / n, sum.semantic / n};
    }
  }
  return out;
}

EvaluationReport Evaluate(std::vector<ExplanationCase>& cases, GenerationBackend& backend,
                          Embedder& embedder, int workers) {
  const auto models = backend.ModelIds();
  if (models.empty()) throw ConfigError("no generation models configured");

  struct Slot {
    std::string text;
    MetricScores scores;
    std::string error;
  };
  std::vector<Slot> slots(models.size() * cases.size());
  ParallelFor(slots.size(), workers, [&](std::size_t k) {
    const std::string& model = models[k / cases.size()];
    const ExplanationCase& c = cases[k % cases.size()];
    Slot& slot = slots[k];
    try {
      slot.text = backend.Generate(c.prompt, model).text;
      slot.scores = ScorePair(slot.text, c.reference.text, embedder);
    } catch (const GatewayError& e) {
      slot.error = std::string(e.kind());
    }
  });

  EvaluationReport report;
  for (std::size_t m = 0; m < models.size(); ++m) {
    for (std::size_t i = 0; i < cases.size(); ++i) {
      Slot& slot = slots[m * cases.size() + i];
      ExplanationCase& c = cases[i];
      SampleRow row;
      row.model_id = models[m];
      row.sample_id = c.sample_id;
      if (slot.error.empty()) {
        c.candidates[models[m]] = std::move(slot.text);
        c.scores[models[m]] = slot.scores;
        row.scores = slot.scores;
      } else {
        c.errors[models[m]] = slot.error;
        row.status = "error:" + slot.error;
      }
      report.per_sample.push_back(std::move(row));
    }
  }
  std::sort(report.per_sample.begin(), report.per_sample.end(),
            [](const SampleRow& a, const SampleRow& b) {
              return std::tie(a.model_id, a.sample_id) < std::tie(b.model_id, b.sample_id);
            });
  report.per_model = Summarize(report.per_sample);
  for (const auto& model : models) {
    if (report.per_model[model].n_scored == 0) {
      throw Error(fmt::format("every sample failed for model {}", model));
    }
  }
  return report;
}

EvaluationReport RunEval(const HarnessConfig& config) {
  const Corpus corpus = LoadCorpus(config);
  const Ensemble model = LoadModel(config.model_path);
  if (model.num_features != kFeatureDim) {
    throw DimensionError(fmt::format("model expects {} features, vectors have {}",
                                     model.num_features, kFeatureDim));
  }
  const auto& ids = config.use_focus ? corpus.split.focus : corpus.split.test;
  std::vector<std::vector<double>> background;
  if (config.explainer_mode == ExplainerMode::kInterventional) {
    background = BackgroundRows(corpus, config.background_size);
  }
  const auto explained =
      ExplainSamples(model, corpus, ids, config.explainer_mode, background, config.workers);
  const NarrativeTemplates templates = TemplatesFor(config);
  std::vector<ExplanationCase> cases;
  cases.reserve(explained.size());
  for (const auto& s : explained) cases.push_back(MakeCase(s, templates));

  ModelGateway gateway(ModelGateway::OptionsFromEnvironment());
  std::unique_ptr<GenerationBackend> backend;
  if (config.mock.enabled) {
    backend = std::make_unique<MockBackend>(config.mock.rates, config.mock.seed, templates);
  } else {
    backend = std::make_unique<HttpBackend>(gateway, config.endpoints);
  }
  std::unique_ptr<Embedder> embedder = std::make_unique<FallbackEmbedder>();
  if (!config.mock.enabled) {
    for (const auto& e : config.endpoints) {
      if (e.kind == EndpointKind::kEmbedding) {
        embedder = std::make_unique<HttpEmbedder>(gateway, e);
        break;
      }
    }
  }

  EvaluationReport report = Evaluate(cases, *backend, *embedder, config.workers);
  report.config_echo = ToJson(config);
  report.timing_minutes = config.timing_minutes;
  if (config.lora_ranks) report.lora_table = PlanTable(BaseModelSpec{}, *config.lora_ranks);
  return report;
}

std::string FormatDouble(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string PerSampleCsv(const std::vector<SampleRow>& rows) {
  std::string out = "model_id,sample_id,bleu,rouge1,rouge2,rougeL,semantic,status\n";
  for (const auto& r : rows) {
    if (r.ok()) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", r.model_id, r.sample_id,
                         FormatDouble(r.scores.bleu), FormatDouble(r.scores.rouge1),
                         FormatDouble(r.scores.rouge2), FormatDouble(r.scores.rougeL),
                         FormatDouble(r.scores.semantic), r.status);
    } else {
      out += fmt::format("{},{},,,,,,{}\n", r.model_id, r.sample_id, r.status);
    }
  }
  return out;
}

json SummaryJson(const EvaluationReport& report) {
  json j;
  j["config"] = report.config_echo;
  j["models"] = json::object();
  for (const auto& [model, s] : report.per_model) {
    j["models"][model] = {{"means", MetricsJson(s.means)},
                          {"n_scored", s.n_scored},
                          {"n_excluded", s.n_excluded}};
  }
  j["timing_minutes"] = report.timing_minutes;
  if (report.lora_table) {
    json rows = json::array();
    for (const auto& r : report.lora_table->rows) {
      rows.push_back({{"rank", r.rank},
                      {"trainable_params", r.trainable_params},
                      {"trainable_pct", r.trainable_pct},
                      {"adapter_bytes", r.adapter_bytes},
                      {"adapter_mib", r.adapter_mib}});
    }
    j["lora_plan"] = {{"rows", rows},
                      {"full_params", report.lora_table->full_params},
                      {"full_bytes", report.lora_table->full_bytes},
                      {"full_mib", report.lora_table->full_mib}};
  }
  return j;
}

json PlotData(const EvaluationReport& report) {
  json j;
  j["models"] = json::array();
  for (const auto& [model, s] : report.per_model) j["models"].push_back(model);
  j["metrics"] = json::object();
  for (auto name : kMetricNames) {
    json series = json::array();
    for (const auto& [model, s] : report.per_model) series.push_back(MetricValue(s.means, name));
    j["metrics"][std::string(name)] = series;
  }
  return j;
}

void EmitReport(const EvaluationReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  WriteFile(dir / "per_sample.csv", PerSampleCsv(report.per_sample));
  WriteFile(dir / "summary.json", SummaryJson(report).dump(2) + "\n");
  WriteFile(dir / "plotdata.json", PlotData(report).dump(2) + "\n");
  if (report.lora_table) WriteFile(dir / "lora_plan.csv", TableCsv(*report.lora_table));
}

std::string AttributionCsv(const Attribution& a) {
  std::string out;
  for (std::size_t d = 0; d < a.phi.size(); ++d) {
    if (a.phi[d] != 0.0) out += fmt::format("{},{},{}\n", a.sample_id, d, FormatDouble(a.phi[d]));
  }
  out += fmt::format("{},base,{}\n", a.sample_id, FormatDouble(a.base_value));
  return out;
}

json GenTruthJson(const ExplainedSample& s, const ExplanationCase& c) {
  json groups = json::array();
  for (const auto& g : s.top_groups.ranked) {
    groups.push_back({{"group", std::string(g.name)},
                      {"display_name", std::string(g.display_name)},
                      {"shap_sum", g.shap_sum},
                      {"abs_share", g.abs_share},
                      {"direction", std::string(DirectionName(g.direction))},
                      {"impact", std::string(ImpactName(g.impact))}});
  }
  json messages = json::array();
  for (const auto& m : c.prompt.transcript) {
    const bool assistant = m.role == ChatRole::kAssistant;
    messages.push_back({{"role", std::string(RoleName(m.role))},
                        {"content", assistant ? c.reference.text : m.content}});
  }
  return {{"sample_id", s.sample_id},
          {"label", LabelName(s.label)},
          {"family", s.family ? json(*s.family) : json(nullptr)},
          {"score", s.score},
          {"top_groups", groups},
          {"prompt", RenderChat(c.prompt.transcript)},
          {"messages", messages},
          {"reference", c.reference.text}};
}

}  // namespace emberxp
