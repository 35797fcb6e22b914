#include "emberxp/model_gateway.h"

#include <atomic>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "emberxp/eval_metrics.h"

namespace emberxp {
namespace {

using nlohmann::json;

// Minimal OpenAI-compatible server on an ephemeral loopback port.
class FakeServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  FakeServer() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  void OnChat(Handler h) { Route("/v1/chat/completions", std::move(h)); }
  void OnEmbeddings(Handler h) { Route("/v1/embeddings", std::move(h)); }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int hits() const { return hits_; }
  json last_body() {
    std::lock_guard lock(mu_);
    return last_body_;
  }
  std::string last_auth() {
    std::lock_guard lock(mu_);
    return last_auth_;
  }

 private:
  void Route(const std::string& path, Handler h) {
    server_.Post(path, [this, h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      {
        std::lock_guard lock(mu_);
        last_body_ = json::parse(req.body, nullptr, false);
        last_auth_ = req.get_header_value("Authorization");
      }
      h(req, res);
    });
  }

  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> hits_{0};
  std::mutex mu_;
  json last_body_;
  std::string last_auth_;
};

void ReplyText(httplib::Response& res, const std::string& text) {
  json body = {{"id", "x"},
               {"object", "chat.completion"},
               {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}}}}};
  res.set_content(body.dump(), "application/json");
}

ModelEndpoint GenEndpoint(const FakeServer& s, int retries = 3) {
  ModelEndpoint e;
  e.id = "full";
  e.base_url = s.base_url();
  e.model_name = "tinyllama-full";
  e.timeout_s = 5.0;
  e.max_retries = retries;
  return e;
}

ModelEndpoint EmbEndpoint(const FakeServer& s) {
  ModelEndpoint e = GenEndpoint(s);
  e.id = "embed";
  e.model_name = "minilm";
  e.kind = EndpointKind::kEmbedding;
  return e;
}

struct RecordingSleeper {
  std::shared_ptr<std::vector<double>> delays = std::make_shared<std::vector<double>>();
  ModelGateway::Options options() const {
    ModelGateway::Options o;
    auto d = delays;
    o.sleeper = [d](std::chrono::duration<double> s) { d->push_back(s.count()); };
    return o;
  }
};

const Transcript kChat = {{ChatRole::kSystem, "sys"}, {ChatRole::kUser, "explain"},
                          {ChatRole::kAssistant, ""}};

TEST(Gateway, ChatRequestShape) {
  FakeServer server;
  server.OnChat([](auto&, auto& res) { ReplyText(res, "It is malicious."); });
  ModelGateway gw(ModelGateway::Options{});
  auto r = gw.Generate(GenEndpoint(server), kChat, GenerationParams{0.0, 64});
  EXPECT_EQ(r.text, "It is malicious.");
  EXPECT_EQ(r.retries, 0);
  json body = server.last_body();
  EXPECT_EQ(body["model"], "tinyllama-full");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 64);
  ASSERT_EQ(body["messages"].size(), 2u);
  EXPECT_EQ(body["messages"][0], (json{{"role", "system"}, {"content", "sys"}}));
  EXPECT_EQ(body["messages"][1], (json{{"role", "user"}, {"content", "explain"}}));
  EXPECT_EQ(server.last_auth(), "");
}

TEST(Gateway, RenderedChatOverloadAndBearer) {
  FakeServer server;
  server.OnChat([](auto&, auto& res) { ReplyText(res, "ok"); });
  ModelGateway::Options o;
  o.bearer_token = "secret";
  ModelGateway gw(o);
  gw.Generate(GenEndpoint(server), RenderChat(kChat));
  EXPECT_EQ(server.last_body()["messages"].size(), 2u);
  EXPECT_EQ(server.last_auth(), "Bearer secret");
}

TEST(Gateway, RetriesServerErrorsWithBackoff) {
  FakeServer server;
  std::atomic<int> calls{0};
  server.OnChat([&](auto&, auto& res) {
    if (calls++ < 2) {
      res.status = 503;
      return;
    }
    ReplyText(res, "third time");
  });
  RecordingSleeper sleeper;
  ModelGateway gw(sleeper.options());
  auto r = gw.Generate(GenEndpoint(server, 2), kChat);
  EXPECT_EQ(r.text, "third time");
  EXPECT_EQ(r.retries, 2);
  EXPECT_EQ(*sleeper.delays, (std::vector<double>{0.5, 1.0}));
}

TEST(Gateway, ServerErrorsExhaustRetries) {
  FakeServer server;
  server.OnChat([](auto&, auto& res) { res.status = 500; });
  RecordingSleeper sleeper;
  ModelGateway gw(sleeper.options());
  try {
    gw.Generate(GenEndpoint(server, 3), kChat);
    FAIL() << "expected HttpStatusError";
  } catch (const HttpStatusError& e) {
    EXPECT_EQ(e.status(), 500);
    EXPECT_EQ(e.kind(), "http_status");
  }
  EXPECT_EQ(server.hits(), 4);
  EXPECT_EQ(*sleeper.delays, (std::vector<double>{0.5, 1.0, 2.0}));
}

TEST(Gateway, ClientErrorFailsFast) {
  FakeServer server;
  server.OnChat([](auto&, auto& res) {
    res.status = 400;
    res.set_content("{\"error\":\"bad\"}", "application/json");
  });
  RecordingSleeper sleeper;
  ModelGateway gw(sleeper.options());
  try {
    gw.Generate(GenEndpoint(server), kChat);
    FAIL() << "expected HttpStatusError";
  } catch (const HttpStatusError& e) {
    EXPECT_EQ(e.status(), 400);
  }
  EXPECT_EQ(server.hits(), 1);
  EXPECT_TRUE(sleeper.delays->empty());
}

TEST(Gateway, TransportFailure) {
  int port = 0;
  {
    FakeServer gone;
    port = std::stoi(gone.base_url().substr(gone.base_url().rfind(':') + 1));
  }
  ModelEndpoint e;
  e.id = "dead";
  e.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
  e.timeout_s = 1.0;
  e.max_retries = 1;
  RecordingSleeper sleeper;
  ModelGateway gw(sleeper.options());
  try {
    gw.Generate(e, kChat);
    FAIL() << "expected TransportError";
  } catch (const TransportError& err) {
    EXPECT_EQ(err.kind(), "transport");
  }
  EXPECT_EQ(sleeper.delays->size(), 1u);
}

TEST(Gateway, MalformedAndEmptyCompletions) {
  FakeServer server;
  std::atomic<int> mode{0};
  server.OnChat([&](auto&, auto& res) {
    switch (mode.load()) {
      case 0:
        res.set_content("not json", "application/json");
        break;
      case 1:
        res.set_content("{\"choices\":[]}", "application/json");
        break;
      case 2:
        ReplyText(res, "  <|end|>\n ");
        break;
      default:
        ReplyText(res, "<|assistant|>\nThe score is high.<|end|>\n");
    }
  });
  ModelGateway gw(ModelGateway::Options{});
  EXPECT_THROW(gw.Generate(GenEndpoint(server), kChat), MalformedResponseError);
  mode = 1;
  EXPECT_THROW(gw.Generate(GenEndpoint(server), kChat), MalformedResponseError);
  mode = 2;
  EXPECT_THROW(gw.Generate(GenEndpoint(server), kChat), EmptyCompletionError);
  mode = 3;
  EXPECT_EQ(gw.Generate(GenEndpoint(server), kChat).text, "The score is high.");
}

TEST(StripChatDelimiters, KnownMarkers) {
  EXPECT_EQ(StripChatDelimiters("<|im_start|>assistant\nhello<|im_end|>"), "hello");
  EXPECT_EQ(StripChatDelimiters(" text </s>"), "text");
  EXPECT_EQ(StripChatDelimiters("a<|end|>b"), "ab");
  EXPECT_EQ(StripChatDelimiters("\n\t "), "");
}

TEST(Gateway, EmbeddingsKeepOrder) {
  FakeServer server;
  server.OnEmbeddings([](const httplib::Request& req, httplib::Response& res) {
    json in = json::parse(req.body);
    json data = json::array();
    // Reply with the text length in slot 0 so order is observable.
    for (const auto& t : in["input"]) {
      data.push_back({{"embedding", {static_cast<double>(t.get<std::string>().size()), 1.0}}});
    }
    res.set_content(json{{"data", data}}.dump(), "application/json");
  });
  ModelGateway gw(ModelGateway::Options{});
  auto v = gw.Embed(EmbEndpoint(server), {"a", "abc", "ab"});
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].values, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(v[1].values, (std::vector<double>{3.0, 1.0}));
  EXPECT_EQ(v[2].values, (std::vector<double>{2.0, 1.0}));
  EXPECT_EQ(server.last_body()["model"], "minilm");

  HttpEmbedder embedder(gw, EmbEndpoint(server));
  EXPECT_EQ(embedder.Embed({"xyzw"})[0].values[0], 4.0);
}

TEST(Gateway, EmbeddingDimensionChecks) {
  FakeServer server;
  std::atomic<int> mode{0};
  server.OnEmbeddings([&](auto&, auto& res) {
    json data;
    if (mode == 0) data = json::array({{{"embedding", {1.0, 2.0}}}, {{"embedding", {1.0}}}});
    if (mode == 1) data = json::array({{{"embedding", {1.0, 2.0}}}, {{"embedding", {3.0, 4.0}}}});
    if (mode == 2) data = json::array({{{"embedding", {1.0, 2.0, 3.0}}}, {{"embedding", {1.0, 2.0, 3.0}}}});
    if (mode == 3) data = json::array({{{"embedding", {1.0}}}});
    res.set_content(json{{"data", data}}.dump(), "application/json");
  });
  ModelGateway gw(ModelGateway::Options{});
  EXPECT_THROW(gw.Embed(EmbEndpoint(server), {"a", "b"}), MalformedResponseError);
  mode = 1;
  EXPECT_EQ(gw.Embed(EmbEndpoint(server), {"a", "b"}).size(), 2u);
  mode = 2;
  EXPECT_THROW(gw.Embed(EmbEndpoint(server), {"a", "b"}), MalformedResponseError);
  mode = 3;
  EXPECT_THROW(gw.Embed(EmbEndpoint(server), {"a", "b"}), MalformedResponseError);
}

TEST(Gateway, KindMismatchRejected) {
  FakeServer server;
  ModelGateway gw(ModelGateway::Options{});
  EXPECT_THROW(gw.Embed(GenEndpoint(server), {"a"}), ConfigError);
  EXPECT_THROW(gw.Generate(EmbEndpoint(server), kChat), ConfigError);
}

TEST(Gateway, ConcurrencyCapPerEndpoint) {
  FakeServer server;
  std::atomic<int> active{0}, peak{0};
  server.OnChat([&](auto&, auto& res) {
    int now = ++active;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(40));
    --active;
    ReplyText(res, "ok");
  });
  ModelEndpoint e = GenEndpoint(server);
  e.max_concurrency = 2;
  ModelGateway gw(ModelGateway::Options{});
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&] { gw.Generate(e, kChat); });
  for (auto& t : threads) t.join();
  EXPECT_EQ(server.hits(), 8);
  EXPECT_LE(peak.load(), 2);
  EXPECT_EQ(gw.PeakInFlight("full"), 2);
  EXPECT_EQ(gw.PeakInFlight("unused"), 0);
}

TEST(ParseEndpoints, DefaultsAndValidation) {
  auto eps = ParseEndpoints(json::parse(R"([
    {"id": "full", "base_url": "http://h:1/v1"},
    {"id": "emb", "base_url": "http://h:2/v1", "kind": "embedding", "model_name": "m",
     "timeout_s": 2.5, "max_retries": 0, "max_concurrency": 1,
     "params": {"temperature": 0.7, "max_tokens": 100}}
  ])"));
  ASSERT_EQ(eps.size(), 2u);
  EXPECT_EQ(eps[0].model_name, "full");
  EXPECT_EQ(eps[0].kind, EndpointKind::kGeneration);
  EXPECT_EQ(eps[0].max_retries, 3);
  EXPECT_EQ(eps[1].kind, EndpointKind::kEmbedding);
  EXPECT_EQ(eps[1].timeout_s, 2.5);
  EXPECT_EQ(eps[1].params.max_tokens, 100);
  EXPECT_EQ(EndpointFromJson(ToJson(eps[1])).params.temperature, 0.7);

  EXPECT_THROW(ParseEndpoints(json::object()), ConfigError);
  EXPECT_THROW(ParseEndpoints(json::parse(R"([{"base_url": "http://h/v1"}])")), ConfigError);
  EXPECT_THROW(ParseEndpoints(json::parse(R"([{"id": "a", "base_url": "http://h/v1"},
                                              {"id": "a", "base_url": "http://h/v1"}])")),
               ConfigError);
  EXPECT_THROW(ParseEndpoints(json::parse(R"([{"id": "a", "base_url": "http://h", "timeout_s": 0}])")),
               ConfigError);
  EXPECT_THROW(ParseEndpoints(json::parse(R"([{"id": "a", "base_url": "http://h", "kind": "x"}])")),
               ConfigError);
  EXPECT_THROW(
      ParseEndpoints(json::parse(R"([{"id": "a", "base_url": "http://h", "max_concurrency": 0}])")),
      ConfigError);
}

PromptCase SamplePrompt(const std::string& id = "s1") {
  TopGroups top;
  for (int i : {6, 1, 3, 5, 8}) {
    GroupAttribution g{};
    g.group = static_cast<FeatureGroup>(i);
    g.display_name = DisplayName(g.group);
    g.direction = i % 2 ? Direction::kTowardMalware : Direction::kTowardBenign;
    g.impact = Impact::kModerate;
    top.ranked.push_back(g);
  }
  return BuildPrompt(id, 0.93, Label::kMalicious, top, std::nullopt);
}

std::string ReferenceOf(const PromptCase& p) {
  return BuildReference(p.sample_id, p.ember_score, p.label, p.top_groups).text;
}

TEST(Mock, RateZeroIsReferenceRateOneIsEmpty) {
  auto p = SamplePrompt();
  EXPECT_EQ(MockGenerate(p, "full", 1, 0.0), ReferenceOf(p));
  EXPECT_EQ(MockGenerate(p, "full", 1, 1.0), "");
  EXPECT_THROW(MockGenerate(p, "full", 1, 1.5), ConfigError);
}

TEST(Mock, DeterministicAndKeyedOnModelAndSample) {
  auto p = SamplePrompt();
  EXPECT_EQ(MockGenerate(p, "a", 5, 0.4), MockGenerate(p, "a", 5, 0.4));
  EXPECT_NE(MockGenerate(p, "a", 5, 0.4), MockGenerate(p, "b", 5, 0.4));
  EXPECT_NE(MockGenerate(p, "a", 5, 0.4), MockGenerate(p, "a", 6, 0.4));
  EXPECT_NE(MockGenerate(SamplePrompt("s2"), "a", 5, 0.4), MockGenerate(p, "a", 5, 0.4));
}

TEST(Mock, OutputIsSubsequenceOfReferenceTokens) {
  auto p = SamplePrompt();
  auto ref = Tokenize(ReferenceOf(p));
  auto out = Tokenize(MockGenerate(p, "m", 3, 0.3));
  EXPECT_EQ(LcsLength(out, ref), out.size());
}

TEST(Mock, LowerRateScoresHigherOnAverage) {
  double low = 0.0, high = 0.0;
  for (int i = 0; i < 50; ++i) {
    auto p = SamplePrompt("s" + std::to_string(i));
    auto ref = Tokenize(ReferenceOf(p));
    low += RougeN(Tokenize(MockGenerate(p, "m", 9, 0.2)), ref, 1);
    high += RougeN(Tokenize(MockGenerate(p, "m", 9, 0.6)), ref, 1);
  }
  EXPECT_GT(low, high);
}

TEST(MockBackend, ModelsAndErrors) {
  MockBackend backend({{"lora_r16", 0.5}, {"full", 0.1}}, 7);
  EXPECT_EQ(backend.ModelIds(), (std::vector<std::string>{"full", "lora_r16"}));
  auto p = SamplePrompt();
  EXPECT_EQ(backend.Generate(p, "full").text, MockGenerate(p, "full", 7, 0.1));
  EXPECT_THROW(backend.Generate(p, "nope"), UnknownModelError);
  EXPECT_THROW(MockBackend({{"x", -0.1}}, 1), ConfigError);
  MockBackend silent({{"mute", 1.0}}, 1);
  EXPECT_THROW(silent.Generate(p, "mute"), EmptyCompletionError);
}

TEST(HttpBackend, RoutesByModelId) {
  FakeServer server;
  server.OnChat([](auto&, auto& res) { ReplyText(res, "from server"); });
  ModelGateway gw(ModelGateway::Options{});
  HttpBackend backend(gw, {GenEndpoint(server), EmbEndpoint(server)});
  EXPECT_EQ(backend.ModelIds(), std::vector<std::string>{"full"});
  EXPECT_EQ(backend.Generate(SamplePrompt(), "full").text, "from server");
  EXPECT_THROW(backend.Generate(SamplePrompt(), "embed"), UnknownModelError);
}

}  // namespace
}  // namespace emberxp
