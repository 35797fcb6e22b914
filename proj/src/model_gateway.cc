#include <httplib.h>

#include "emberxp/model_gateway.h"

#include <cmath>
#include <cstdlib>
#include <random>
#include <set>
#include <thread>

#include <fmt/format.h>

namespace emberxp {

using nlohmann::json;

namespace {

std::string KindName(EndpointKind k) {
  return k == EndpointKind::kGeneration ? "generation" : "embedding";
}

// "http://host:port/v1" -> {"http://host:port", "/v1"}
std::pair<std::string, std::string> SplitUrl(const std::string& url) {
  auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError(fmt::format("base_url {} has no scheme", url));
  auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, ""};
  std::string path = url.substr(slash);
  while (!path.empty() && path.back() == '/') path.pop_back();
  return {url.substr(0, slash), path};
}

struct Guard {
  ConcurrencyLimiter& limiter;
  explicit Guard(ConcurrencyLimiter& l) : limiter(l) { limiter.Acquire(); }
  ~Guard() { limiter.Release(); }
};

}  // namespace

ModelEndpoint EndpointFromJson(const json& j) {
  auto require = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw ConfigError(fmt::format("endpoint is missing key {}", key));
    return j.at(key);
  };
  ModelEndpoint e;
  try {
    e.id = require("id").get<std::string>();
    e.base_url = require("base_url").get<std::string>();
    e.model_name = j.value("model_name", e.id);
    std::string kind = j.value("kind", "generation");
    if (kind == "generation") {
      e.kind = EndpointKind::kGeneration;
    } else if (kind == "embedding") {
      e.kind = EndpointKind::kEmbedding;
    } else {
      throw ConfigError(fmt::format("endpoint {}: unknown kind \"{}\"", e.id, kind));
    }
    e.timeout_s = j.value("timeout_s", e.timeout_s);
    e.max_retries = j.value("max_retries", e.max_retries);
    e.max_concurrency = j.value("max_concurrency", e.max_concurrency);
    if (j.contains("params")) {
      const auto& p = j.at("params");
      e.params.temperature = p.value("temperature", e.params.temperature);
      e.params.max_tokens = p.value("max_tokens", e.params.max_tokens);
    }
  } catch (const json::exception& ex) {
    throw ConfigError(fmt::format("endpoint: {}", ex.what()));
  }
  if (!(e.timeout_s > 0.0)) throw ConfigError(fmt::format("endpoint {}: timeout_s must be > 0", e.id));
  if (e.max_retries < 0) throw ConfigError(fmt::format("endpoint {}: max_retries < 0", e.id));
  if (e.max_concurrency < 1) {
    throw ConfigError(fmt::format("endpoint {}: max_concurrency must be >= 1", e.id));
  }
  return e;
}

json ToJson(const ModelEndpoint& e) {
  return {{"id", e.id},
          {"base_url", e.base_url},
          {"model_name", e.model_name},
          {"kind", KindName(e.kind)},
          {"timeout_s", e.timeout_s},
          {"max_retries", e.max_retries},
          {"max_concurrency", e.max_concurrency},
          {"params", {{"temperature", e.params.temperature}, {"max_tokens", e.params.max_tokens}}}};
}

std::vector<ModelEndpoint> ParseEndpoints(const json& list) {
  if (!list.is_array()) throw ConfigError("endpoints must be an array");
  std::vector<ModelEndpoint> out;
  std::set<std::string> ids;
  for (const auto& item : list) {
    auto e = EndpointFromJson(item);
    if (!ids.insert(e.id).second) throw ConfigError(fmt::format("duplicate endpoint id {}", e.id));
    out.push_back(std::move(e));
  }
  return out;
}

std::string StripChatDelimiters(std::string_view text) {
  std::string s(text);
  for (std::string_view marker : {"<|assistant|>", "<|end|>", "<|im_end|>", "</s>", "<|eot_id|>"}) {
    for (auto pos = s.find(marker); pos != std::string::npos; pos = s.find(marker, pos)) {
      s.erase(pos, marker.size());
    }
  }
  // "<|im_start|>assistant" style headers
  for (auto pos = s.find("<|im_start|>"); pos != std::string::npos; pos = s.find("<|im_start|>")) {
    auto eol = s.find('\n', pos);
    s.erase(pos, eol == std::string::npos ? std::string::npos : eol - pos + 1);
  }
  auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

void ConcurrencyLimiter::Acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return in_flight_ < capacity_; });
  ++in_flight_;
  peak_ = std::max(peak_, in_flight_);
}

void ConcurrencyLimiter::Release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_one();
}

int ConcurrencyLimiter::peak() const {
  std::lock_guard lock(mu_);
  return peak_;
}

ModelGateway::ModelGateway() : ModelGateway(OptionsFromEnvironment()) {}

ModelGateway::ModelGateway(Options options) : options_(std::move(options)) {
  if (!options_.sleeper) {
    options_.sleeper = [](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); };
  }
}

ModelGateway::Options ModelGateway::OptionsFromEnvironment() {
  Options o;
  if (const char* token = std::getenv("EMBERXP_API_TOKEN")) o.bearer_token = token;
  return o;
}

ConcurrencyLimiter& ModelGateway::LimiterFor(const ModelEndpoint& endpoint) {
  std::lock_guard lock(mu_);
  auto& slot = limiters_[endpoint.id];
  if (!slot) slot = std::make_unique<ConcurrencyLimiter>(endpoint.max_concurrency);
  return *slot;
}

int ModelGateway::PeakInFlight(const std::string& endpoint_id) const {
  std::lock_guard lock(mu_);
  auto it = limiters_.find(endpoint_id);
  return it == limiters_.end() ? 0 : it->second->peak();
}

json ModelGateway::Post(const ModelEndpoint& endpoint, const std::string& route, const json& body,
                        int* retries) {
  auto [origin, prefix] = SplitUrl(endpoint.base_url);
  const std::string path = prefix + route;
  const std::string payload = body.dump();

  httplib::Headers headers;
  if (!options_.bearer_token.empty()) {
    headers.emplace("Authorization", "Bearer " + options_.bearer_token);
  }

  Guard guard(LimiterFor(endpoint));
  const auto whole = static_cast<time_t>(std::floor(endpoint.timeout_s));
  const auto micros = static_cast<time_t>((endpoint.timeout_s - whole) * 1e6);

  for (int attempt = 0;; ++attempt) {
    httplib::Client client(origin);
    client.set_connection_timeout(whole, micros);
    client.set_read_timeout(whole, micros);
    client.set_write_timeout(whole, micros);

    auto res = client.Post(path, headers, payload, "application/json");
    std::string failure;
    bool retryable = false;
    if (!res) {
      failure = fmt::format("{} {}: transport failure ({})", endpoint.id, path,
                            httplib::to_string(res.error()));
      retryable = true;
    } else if (res->status >= 500) {
      failure = fmt::format("{} {}: HTTP {}", endpoint.id, path, res->status);
      retryable = true;
    } else if (res->status < 200 || res->status >= 300) {
      throw HttpStatusError(fmt::format("{} {}: HTTP {}: {}", endpoint.id, path, res->status,
                                        res->body.substr(0, 200)),
                            res->status);
    } else {
      try {
        return json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw MalformedResponseError(fmt::format("{} {}: invalid JSON: {}", endpoint.id, path,
                                                 e.what()));
      }
    }

    if (retryable && attempt < endpoint.max_retries) {
      if (retries != nullptr) ++*retries;
      options_.sleeper(std::chrono::duration<double>(0.5 * std::pow(2.0, attempt)));
      continue;
    }
    if (res) throw HttpStatusError(failure, res->status);
    throw TransportError(failure);
  }
}

GenerationResult ModelGateway::Generate(const ModelEndpoint& endpoint, const Transcript& transcript,
                                        std::optional<GenerationParams> params) {
  if (endpoint.kind != EndpointKind::kGeneration) {
    throw ConfigError(fmt::format("endpoint {} is not a generation endpoint", endpoint.id));
  }
  const GenerationParams p = params.value_or(endpoint.params);
  json messages = json::array();
  for (std::size_t i = 0; i < transcript.size(); ++i) {
    const auto& m = transcript[i];
    // the open assistant slot is what we ask the server to fill
    if (i + 1 == transcript.size() && m.role == ChatRole::kAssistant && m.content.empty()) break;
    messages.push_back({{"role", RoleName(m.role)}, {"content", m.content}});
  }
  json body = {{"model", endpoint.model_name},
               {"messages", messages},
               {"temperature", p.temperature},
               {"max_tokens", p.max_tokens}};

  GenerationResult result;
  json response = Post(endpoint, "/chat/completions", body, &result.retries);
  try {
    const auto& content = response.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw MalformedResponseError("content is not a string");
    result.text = StripChatDelimiters(content.get<std::string>());
  } catch (const json::exception& e) {
    throw MalformedResponseError(fmt::format("{}: unexpected completion shape: {}", endpoint.id,
                                             e.what()));
  }
  if (result.text.empty()) {
    throw EmptyCompletionError(fmt::format("{}: empty completion", endpoint.id));
  }
  return result;
}

GenerationResult ModelGateway::Generate(const ModelEndpoint& endpoint,
                                        std::string_view rendered_chat,
                                        std::optional<GenerationParams> params) {
  return Generate(endpoint, ParseChat(rendered_chat), params);
}

std::vector<EmbeddingVector> ModelGateway::Embed(const ModelEndpoint& endpoint,
                                                 const std::vector<std::string>& texts) {
  if (endpoint.kind != EndpointKind::kEmbedding) {
    throw ConfigError(fmt::format("endpoint {} is not an embedding endpoint", endpoint.id));
  }
  if (texts.empty()) return {};
  json body = {{"model", endpoint.model_name}, {"input", texts}};
  json response = Post(endpoint, "/embeddings", body, nullptr);

  std::vector<EmbeddingVector> out;
  try {
    const auto& data = response.at("data");
    if (!data.is_array() || data.size() != texts.size()) {
      throw MalformedResponseError(fmt::format("{}: expected {} embeddings", endpoint.id,
                                               texts.size()));
    }
    for (const auto& item : data) {
      EmbeddingVector v;
      for (const auto& x : item.at("embedding")) {
        double d = x.get<double>();
        if (!std::isfinite(d)) throw MalformedResponseError("non-finite embedding value");
        v.values.push_back(d);
      }
      if (v.values.empty()) throw MalformedResponseError("empty embedding");
      if (!out.empty() && v.dim() != out.front().dim()) {
        throw MalformedResponseError(fmt::format("{}: embedding dims differ within a batch ({} vs {})",
                                                 endpoint.id, out.front().dim(), v.dim()));
      }
      out.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw MalformedResponseError(fmt::format("{}: unexpected embedding shape: {}", endpoint.id,
                                             e.what()));
  }

  std::lock_guard lock(mu_);
  auto [it, inserted] = embedding_dims_.emplace(endpoint.id, out.front().dim());
  if (!inserted && it->second != out.front().dim()) {
    throw MalformedResponseError(fmt::format("{}: embedding dim changed from {} to {}", endpoint.id,
                                             it->second, out.front().dim()));
  }
  return out;
}

namespace {

uint64_t Fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string MockGenerate(const PromptCase& prompt, std::string_view model_id, uint64_t seed,
                         double rate, const NarrativeTemplates& templates) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw ConfigError(fmt::format("degradation rate {} for {} outside [0, 1]", rate, model_id));
  }
  const std::string reference =
      BuildReference(prompt.sample_id, prompt.ember_score, prompt.label, prompt.top_groups, templates)
          .text;

  char seed_bytes[8];
  for (int i = 0; i < 8; ++i) seed_bytes[i] = static_cast<char>((seed >> (8 * i)) & 0xff);
  uint64_t h = Fnv1a64(std::string_view(seed_bytes, 8));
  h = Fnv1a64(prompt.sample_id, h);
  h = Fnv1a64(std::string_view("\0", 1), h);
  h = Fnv1a64(model_id, h);
  std::mt19937_64 rng(h);

  auto is_space = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; };
  std::string out;
  std::size_t pos = 0;
  // leading whitespace belongs to the first token
  std::size_t token_start = 0;
  while (pos < reference.size() && is_space(reference[pos])) ++pos;
  while (pos < reference.size()) {
    while (pos < reference.size() && !is_space(reference[pos])) ++pos;
    while (pos < reference.size() && is_space(reference[pos])) ++pos;
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    if (!(u < rate)) out.append(reference, token_start, pos - token_start);
    token_start = pos;
  }
  return out;
}

MockBackend::MockBackend(std::map<std::string, double> rates, uint64_t seed,
                         NarrativeTemplates templates)
    : rates_(std::move(rates)), seed_(seed), templates_(std::move(templates)) {
  for (const auto& [id, rate] : rates_) {
    if (!(rate >= 0.0 && rate <= 1.0)) {
      throw ConfigError(fmt::format("degradation rate {} for {} outside [0, 1]", rate, id));
    }
  }
}

std::vector<std::string> MockBackend::ModelIds() const {
  std::vector<std::string> ids;
  for (const auto& [id, rate] : rates_) ids.push_back(id);
  return ids;
}

GenerationResult MockBackend::Generate(const PromptCase& prompt, const std::string& model_id) {
  auto it = rates_.find(model_id);
  if (it == rates_.end()) throw UnknownModelError(fmt::format("unknown mock model {}", model_id));
  GenerationResult r;
  r.text = MockGenerate(prompt, model_id, seed_, it->second, templates_);
  if (r.text.empty()) throw EmptyCompletionError(fmt::format("{}: empty completion", model_id));
  return r;
}

HttpBackend::HttpBackend(ModelGateway& gateway, const std::vector<ModelEndpoint>& endpoints)
    : gateway_(gateway) {
  for (const auto& e : endpoints) {
    if (e.kind == EndpointKind::kGeneration) endpoints_.emplace(e.id, e);
  }
}

std::vector<std::string> HttpBackend::ModelIds() const {
  std::vector<std::string> ids;
  for (const auto& [id, e] : endpoints_) ids.push_back(id);
  return ids;
}

GenerationResult HttpBackend::Generate(const PromptCase& prompt, const std::string& model_id) {
  auto it = endpoints_.find(model_id);
  if (it == endpoints_.end()) throw UnknownModelError(fmt::format("unknown model {}", model_id));
  return gateway_.Generate(it->second, prompt.transcript);
}

}  // namespace emberxp
