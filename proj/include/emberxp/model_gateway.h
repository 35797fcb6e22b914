#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "emberxp/error.h"
#include "emberxp/eval_metrics.h"
#include "emberxp/narrative.h"

namespace emberxp {

enum class EndpointKind { kGeneration, kEmbedding };

struct GenerationParams {
  double temperature = 0.0;
  int max_tokens = 512;
};

struct ModelEndpoint {
  std::string id;
  std::string base_url;  // e.g. "http://127.0.0.1:8000/v1"
  std::string model_name;
  EndpointKind kind = EndpointKind::kGeneration;
  double timeout_s = 60.0;
  int max_retries = 3;
  int max_concurrency = 4;
  GenerationParams params;
};

ModelEndpoint EndpointFromJson(const nlohmann::json& j);
nlohmann::json ToJson(const ModelEndpoint& e);
/// Parses an endpoint list; ids must be unique and timeouts positive.
std::vector<ModelEndpoint> ParseEndpoints(const nlohmann::json& list);

class GatewayError : public Error {
 public:
  using Error::Error;
  virtual std::string_view kind() const = 0;
};

class TransportError : public GatewayError {
 public:
  using GatewayError::GatewayError;
  std::string_view kind() const override { return "transport"; }
};

class HttpStatusError : public GatewayError {
 public:
  HttpStatusError(const std::string& what, int status) : GatewayError(what), status_(status) {}
  int status() const { return status_; }
  std::string_view kind() const override { return "http_status"; }

 private:
  int status_;
};

class MalformedResponseError : public GatewayError {
 public:
  using GatewayError::GatewayError;
  std::string_view kind() const override { return "malformed_response"; }
};

class EmptyCompletionError : public GatewayError {
 public:
  using GatewayError::GatewayError;
  std::string_view kind() const override { return "empty_completion"; }
};

class UnknownModelError : public GatewayError {
 public:
  using GatewayError::GatewayError;
  std::string_view kind() const override { return "unknown_model"; }
};

struct GenerationResult {
  std::string text;
  int retries = 0;
};

/// Strips chat delimiters ("<|assistant|>", "<|end|>", "<|im_start|>...",
/// "<|im_end|>", "</s>") and surrounding whitespace from a completion.
std::string StripChatDelimiters(std::string_view text);

/// Blocking counting limiter that also records the peak in-flight count.
class ConcurrencyLimiter {
 public:
  explicit ConcurrencyLimiter(int capacity) : capacity_(capacity < 1 ? 1 : capacity) {}

  void Acquire();
  void Release();
  int peak() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  int capacity_;
  int in_flight_ = 0;
  int peak_ = 0;
};

/// OpenAI-compatible chat-completions / embeddings client.
///
/// Transport failures and 5xx responses are retried up to max_retries times
/// with backoff 0.5 s * 2^attempt; 4xx fails immediately. Requests per
/// endpoint are bounded by its max_concurrency. Shareable across threads.
class ModelGateway {
 public:
  using Sleeper = std::function<void(std::chrono::duration<double>)>;

  struct Options {
    /// Sent as "Authorization: Bearer <token>" when non-empty.
    std::string bearer_token;
    Sleeper sleeper;  // defaults to std::this_thread::sleep_for
  };

  ModelGateway();
  explicit ModelGateway(Options options);

  /// Reads the bearer token from EMBERXP_API_TOKEN when set.
  static Options OptionsFromEnvironment();

  GenerationResult Generate(const ModelEndpoint& endpoint, const Transcript& transcript,
                            std::optional<GenerationParams> params = std::nullopt);
  /// Accepts rendered chat markup (see RenderChat).
  GenerationResult Generate(const ModelEndpoint& endpoint, std::string_view rendered_chat,
                            std::optional<GenerationParams> params = std::nullopt);

  std::vector<EmbeddingVector> Embed(const ModelEndpoint& endpoint,
                                     const std::vector<std::string>& texts);

  /// Highest concurrent request count seen for an endpoint id so far.
  int PeakInFlight(const std::string& endpoint_id) const;

 private:
  nlohmann::json Post(const ModelEndpoint& endpoint, const std::string& route,
                      const nlohmann::json& body, int* retries);
  ConcurrencyLimiter& LimiterFor(const ModelEndpoint& endpoint);

  Options options_;
  mutable std::mutex mu_;
  std::map<std::string, std::unique_ptr<ConcurrencyLimiter>> limiters_;
  std::map<std::string, std::size_t> embedding_dims_;
};

class HttpEmbedder : public Embedder {
 public:
  HttpEmbedder(ModelGateway& gateway, ModelEndpoint endpoint)
      : gateway_(gateway), endpoint_(std::move(endpoint)) {}
  std::vector<EmbeddingVector> Embed(const std::vector<std::string>& texts) override {
    return gateway_.Embed(endpoint_, texts);
  }

 private:
  ModelGateway& gateway_;
  ModelEndpoint endpoint_;
};

/// Deterministic offline stand-in for a fine-tuned model: the reference
/// explanation with each whitespace-delimited token (and the whitespace that
/// follows it) dropped independently with probability `rate`. The PRNG is a
/// std::mt19937_64 seeded with the FNV-1a 64 hash of (seed as 8 little-endian
/// bytes, sample_id, '\0', model_id); a token is dropped when the top 53 bits
/// of a draw, scaled to [0, 1), fall below `rate`.
std::string MockGenerate(const PromptCase& prompt, std::string_view model_id, uint64_t seed,
                         double rate,
                         const NarrativeTemplates& templates = NarrativeTemplates::Default());

/// Source of candidate explanations for the harness.
class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;
  /// Sorted model ids served by this backend.
  virtual std::vector<std::string> ModelIds() const = 0;
  virtual GenerationResult Generate(const PromptCase& prompt, const std::string& model_id) = 0;
};

class MockBackend : public GenerationBackend {
 public:
  /// `rates` maps model id to degradation rate in [0, 1].
  MockBackend(std::map<std::string, double> rates, uint64_t seed,
              NarrativeTemplates templates = NarrativeTemplates::Default());

  std::vector<std::string> ModelIds() const override;
  GenerationResult Generate(const PromptCase& prompt, const std::string& model_id) override;

 private:
  std::map<std::string, double> rates_;
  uint64_t seed_;
  NarrativeTemplates templates_;
};

class HttpBackend : public GenerationBackend {
 public:
  /// Uses every generation-kind endpoint.
  HttpBackend(ModelGateway& gateway, const std::vector<ModelEndpoint>& endpoints);

  std::vector<std::string> ModelIds() const override;
  GenerationResult Generate(const PromptCase& prompt, const std::string& model_id) override;

 private:
  ModelGateway& gateway_;
  std::map<std::string, ModelEndpoint> endpoints_;
};

}  // namespace emberxp
