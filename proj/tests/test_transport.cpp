// HTTP transport: the mock server's wire protocol, the client session, and
// their equivalence with the in-process session.
//
// Layering note: the client session pre-validates k and bias against the
// advertised capabilities (capability_mismatch, no wire traffic), so the
// server's 400 paths are exercised with raw POSTs, and the client's
// wire-error mapping with fixture servers that return canned failures.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

// Library headers (which pull in Eigen) must precede httplib.h: httplib
// drags in <resolv.h>, whose _res macro mangles Eigen's parameter names.
#include "llmimg/client.hpp"
#include "llmimg/errors.hpp"
#include "llmimg/extract.hpp"
#include "llmimg/mock_model.hpp"
#include "llmimg/server.hpp"
#include "llmimg/session.hpp"

#include "httplib.h"
#include "json.hpp"

using namespace llmimg;

namespace {

MockModelSpec spec_v100() {
    MockModelSpec spec;
    spec.v = 100;
    spec.d = 16;
    spec.seed = 555;
    return spec;
}

std::shared_ptr<const MockModel> model_v100() {
    static const auto model =
        std::make_shared<const MockModel>(spec_v100());
    return model;
}

// One shared live server over the common fixture model.
MockServer& shared_server() {
    static MockServer server(model_v100(), ServeOptions{});
    static const bool started = [] {
        server.start();
        return true;
    }();
    (void)started;
    return server;
}

ConnectOptions fast_failing_options() {
    ConnectOptions options;
    options.max_retries = 0;
    options.backoff_base_ms = 1;
    return options;
}

bool bitwise_equal(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(),
                       sizeof(double) * static_cast<std::size_t>(a.size())) ==
           0;
}

// Minimal scripted HTTP server for client-behavior tests.
class FixtureServer {
  public:
    explicit FixtureServer(
        const std::function<void(httplib::Server&)>& routes) {
        routes(server_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        REQUIRE(port_ > 0);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FixtureServer() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }
    std::string url() const {
        return "http://127.0.0.1:" + std::to_string(port_);
    }

  private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
};

const char* kFixtureCaps =
    R"({"v":100,"k_max":5,"beta_max":100.0,"stochastic":false,)"
    R"("model_id":"fixture"})";

void serve_fixture_caps(httplib::Server& server) {
    server.Get("/v1/capabilities",
               [](const httplib::Request&, httplib::Response& res) {
                   res.set_content(kFixtureCaps, "application/json");
               });
}

std::string error_body(const std::string& code) {
    return R"({"error":{"code":")" + code + R"(","message":"scripted"}})";
}

}  // namespace

// ---------------------------------------------------------------------------
// wire protocol

TEST_CASE("healthz and capabilities speak the documented shapes") {
    MockServer& server = shared_server();
    httplib::Client cli(server.base_url());

    const auto health = cli.Get("/healthz");
    REQUIRE(bool(health));
    CHECK(health->status == 200);
    CHECK(health->body == "{\"status\":\"ok\"}");

    const uint64_t before = server.requests_served();
    const auto caps = cli.Get("/v1/capabilities");
    REQUIRE(bool(caps));
    CHECK(caps->status == 200);
    const auto parsed = nlohmann::json::parse(caps->body);
    CHECK(parsed.at("v").get<int64_t>() == 100);
    CHECK(parsed.at("k_max").get<int>() == 5);
    CHECK(parsed.at("beta_max").get<double>() == 100.0);
    CHECK(parsed.at("stochastic").get<bool>() == false);
    CHECK(parsed.at("model_id").get<std::string>() ==
          model_v100()->spec().resolved_model_id());

    // Only /v1/query posts count as served requests.
    CHECK(server.requests_served() == before);
}

TEST_CASE("query responses carry 17-significant-digit logprobs") {
    MockServer& server = shared_server();
    httplib::Client cli(server.base_url());

    const auto res = cli.Post("/v1/query",
                              R"({"context":"wire:0","top_logprobs":3})",
                              "application/json");
    REQUIRE(bool(res));
    REQUIRE(res->status == 200);

    // The serialized logprobs parse back to the exact doubles the model
    // computed (same replica stream: first draw of a fresh salt-0 chooser
    // on a single-replica model is replica 0).
    const TopKResponse oracle =
        model_v100()->api_query("wire:0", BiasSpec{}, 3, 0);
    const auto parsed = nlohmann::json::parse(res->body);
    CHECK(parsed.at("model_id").get<std::string>() ==
          model_v100()->spec().resolved_model_id());
    const auto& entries = parsed.at("top_logprobs");
    REQUIRE(entries.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(entries[i].at("token").get<int32_t>() ==
              oracle.entries[i].token);
        CHECK(entries[i].at("logprob").get<double>() ==
              oracle.entries[i].logprob);
    }
    CHECK_FALSE(parsed.contains("replica_hint"));
    (void)server;
}

TEST_CASE("the server rejects malformed queries with typed 400s") {
    MockServer& server = shared_server();
    httplib::Client cli(server.base_url());

    const auto post = [&](const std::string& body) {
        const auto res = cli.Post("/v1/query", body, "application/json");
        REQUIRE(bool(res));
        CHECK(res->status == 400);
        return nlohmann::json::parse(res->body).at("error").at("code")
            .get<std::string>();
    };

    CHECK(post(R"({"context":"x","logit_bias":{"0":101.0}})") ==
          "bias_too_large");
    CHECK(post(R"({"context":"x","top_logprobs":6})") == "k_too_large");
    CHECK(post(R"({"context":"x","top_logprobs":0})") == "k_too_large");
    CHECK(post(R"({"context":"x","logit_bias":{"abc":1.0}})") ==
          "bad_token_id");
    CHECK(post(R"({"context":"x","logit_bias":{"12junk":1.0}})") ==
          "bad_token_id");
    CHECK(post(R"({"context":"x","logit_bias":{"9999":1.0}})") ==
          "bad_token_id");
    CHECK(post("this is not json") == "bad_request");
    CHECK(post(R"({"context":"x","top_logprobs":"five"})") == "bad_request");
    (void)server;
}

TEST_CASE("echo_replica is returned only when the server allows it") {
    const auto model = model_v100();

    MockServer echoing(model, ServeOptions{});
    echoing.start();
    ConnectOptions options;
    options.echo_replica = true;
    auto session = connect(echoing.base_url(), options);
    const TopKResponse with_hint = session->query("echo:0", {}, 3);
    REQUIRE(with_hint.replica_hint.has_value());
    CHECK(*with_hint.replica_hint == 0);  // single-replica model

    ServeOptions gated;
    gated.allow_echo_replica = false;
    MockServer muted(model, gated);
    muted.start();
    auto muted_session = connect(muted.base_url(), options);
    const TopKResponse without_hint = muted_session->query("echo:0", {}, 3);
    CHECK_FALSE(without_hint.replica_hint.has_value());
    // The probability content is unaffected by hint suppression.
    REQUIRE(without_hint.entries.size() == with_hint.entries.size());
    for (std::size_t i = 0; i < with_hint.entries.size(); ++i) {
        CHECK(without_hint.entries[i].token == with_hint.entries[i].token);
        CHECK(without_hint.entries[i].logprob == with_hint.entries[i].logprob);
    }
}

// ---------------------------------------------------------------------------
// transport equivalence

TEST_CASE("HTTP and in-process sessions return bit-identical responses") {
    MockServer& server = shared_server();
    auto http = connect(server.base_url());
    auto local = make_in_process_session(model_v100());

    CHECK(http->capabilities().vocab_size == 100);
    CHECK(http->capabilities().k_max == 5);
    CHECK(http->capabilities().beta_max == 100.0);
    CHECK(http->capabilities().stochastic == false);
    CHECK(http->capabilities().model_id ==
          local->capabilities().model_id);

    const BiasSpec no_bias;
    BiasSpec mixed;
    mixed.entries = {{3, 50.0}, {7, -10.0}, {41, 99.5}};
    struct Probe {
        std::string context;
        BiasSpec bias;
        int k;
    };
    const std::vector<Probe> probes = {
        {"eq:0", no_bias, 5},
        {"eq:0", mixed, 5},
        {"eq:1", mixed, 1},
        {"", no_bias, 2},
    };
    for (const Probe& probe : probes) {
        const TopKResponse a = http->query(probe.context, probe.bias, probe.k);
        const TopKResponse b = local->query(probe.context, probe.bias, probe.k);
        REQUIRE(a.entries.size() == b.entries.size());
        for (std::size_t i = 0; i < a.entries.size(); ++i) {
            CHECK(a.entries[i].token == b.entries[i].token);
            CHECK(a.entries[i].logprob == b.entries[i].logprob);
        }
        CHECK(a.raw_body.find("top_logprobs") != std::string::npos);
    }
}

TEST_CASE("full extraction over HTTP equals the in-process result") {
    MockServer& server = shared_server();
    auto http = connect(server.base_url());
    auto local = make_in_process_session(model_v100());

    const uint64_t before = http->call_count();
    const ProbVector over_wire = extract_stable(*http, "wire-extract:0");
    CHECK(http->call_count() - before == 26);  // 1 + ceil(99/4)

    const ProbVector in_process = extract_stable(*local, "wire-extract:0");
    CHECK(bitwise_equal(over_wire.values(), in_process.values()));
    (void)server;
}

TEST_CASE("concurrent extraction over HTTP is deterministic") {
    MockServer& server = shared_server();
    FastOptions eight;
    eight.concurrency = 8;

    auto first = connect(server.base_url());
    const ProbVector a = extract_fast(*first, "conc:0", eight);
    auto second = connect(server.base_url());
    const ProbVector b = extract_fast(*second, "conc:0", eight);
    CHECK(bitwise_equal(a.values(), b.values()));
}

TEST_CASE("the session cache suppresses repeat wire traffic") {
    const auto model = model_v100();
    MockServer server(model, ServeOptions{});
    server.start();
    auto session = connect(server.base_url());

    REQUIRE(server.requests_served() == 0);
    (void)session->query("cache:0", {}, 5);
    (void)session->query("cache:0", {}, 5);
    CHECK(server.requests_served() == 1);
    CHECK(session->call_count() == 1);

    session->set_cache_enabled(false);
    (void)session->query("cache:0", {}, 5);
    CHECK(server.requests_served() == 2);
    CHECK(session->call_count() == 2);

    // Capability pre-validation fails before any wire traffic.
    try {
        (void)session->query("cache:1", {}, 6);
        FAIL("expected capability_mismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::capability_mismatch);
    }
    BiasSpec huge;
    huge.entries = {{0, 101.0}};
    try {
        (void)session->query("cache:1", huge, 5);
        FAIL("expected capability_mismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::capability_mismatch);
    }
    CHECK(server.requests_served() == 2);
}

TEST_CASE("replica draws align between transports") {
    MockModelSpec spec = spec_v100();
    spec.seed = 606;
    spec.n_replicas = 4;
    spec.replica_noise = 1e-3;
    const auto model = std::make_shared<const MockModel>(spec);

    MockServer server(model, ServeOptions{});
    server.start();
    ConnectOptions copts;
    copts.echo_replica = true;
    auto http = connect(server.base_url(), copts);
    InProcessOptions iopts;
    iopts.echo_replica = true;
    auto local = make_in_process_session(model, iopts);

    CHECK(http->capabilities().stochastic);
    std::vector<int32_t> hints;
    for (int i = 0; i < 12; ++i) {
        const std::string context = "rep:" + std::to_string(i);
        const TopKResponse a = http->query(context, {}, 3);
        const TopKResponse b = local->query(context, {}, 3);
        REQUIRE(a.replica_hint.has_value());
        REQUIRE(b.replica_hint.has_value());
        CHECK(*a.replica_hint == *b.replica_hint);
        REQUIRE(a.entries.size() == b.entries.size());
        for (std::size_t j = 0; j < a.entries.size(); ++j) {
            CHECK(a.entries[j].token == b.entries[j].token);
            CHECK(a.entries[j].logprob == b.entries[j].logprob);
        }
        hints.push_back(*a.replica_hint);
    }
    // Four replicas, twelve draws: the stream visits more than one replica.
    CHECK(std::count(hints.begin(), hints.end(), hints.front()) <
          static_cast<long>(hints.size()));

    // A different draw salt yields a different draw stream.
    ServeOptions salted;
    salted.draw_salt = 7;
    MockServer other(model, salted);
    other.start();
    auto http2 = connect(other.base_url(), copts);
    std::vector<int32_t> salted_hints;
    for (int i = 0; i < 12; ++i) {
        const TopKResponse r =
            http2->query("rep:" + std::to_string(i), {}, 3);
        REQUIRE(r.replica_hint.has_value());
        salted_hints.push_back(*r.replica_hint);
    }
    CHECK(salted_hints != hints);
}

// ---------------------------------------------------------------------------
// client behavior against scripted endpoints

TEST_CASE("wire error codes map to typed exceptions without retries") {
    std::atomic<int> attempts{0};
    std::string next_code = "bias_too_large";
    std::mutex code_mutex;

    FixtureServer fixture([&](httplib::Server& s) {
        serve_fixture_caps(s);
        s.Post("/v1/query",
               [&](const httplib::Request&, httplib::Response& res) {
                   attempts.fetch_add(1);
                   std::lock_guard<std::mutex> lock(code_mutex);
                   res.status = next_code == "auth" ? 401 : 400;
                   res.set_content(error_body(next_code), "application/json");
               });
    });
    ConnectOptions options;
    options.max_retries = 5;
    options.backoff_base_ms = 1;
    auto session = connect(fixture.url(), options);

    const auto expect = [&](const std::string& code, ErrorCode want) {
        {
            std::lock_guard<std::mutex> lock(code_mutex);
            next_code = code;
        }
        attempts.store(0);
        try {
            // Benign parameters: the session's own validation passes and
            // the scripted failure comes back over the wire.
            (void)session->query("err:" + code, {}, 2);
            FAIL(("expected error for code " + code));
        } catch (const Error& e) {
            CHECK(e.code() == want);
        }
        CHECK(attempts.load() == 1);  // 4xx/auth never retries
    };

    expect("bias_too_large", ErrorCode::bias_too_large);
    expect("k_too_large", ErrorCode::k_too_large);
    expect("bad_token_id", ErrorCode::bad_token_id);
    expect("mystery_code", ErrorCode::protocol_error);
    expect("auth", ErrorCode::auth_error);
}

TEST_CASE("5xx responses retry with backoff until the server recovers") {
    std::atomic<int> attempts{0};
    FixtureServer fixture([&](httplib::Server& s) {
        serve_fixture_caps(s);
        s.Post("/v1/query",
               [&](const httplib::Request&, httplib::Response& res) {
                   if (attempts.fetch_add(1) < 2) {
                       res.status = 500;
                       res.set_content("overloaded", "text/plain");
                       return;
                   }
                   res.set_content(
                       R"({"model_id":"fixture","top_logprobs":[)"
                       R"({"token":0,"logprob":-0.5},)"
                       R"({"token":1,"logprob":-1.0}]})",
                       "application/json");
               });
    });
    ConnectOptions options;
    options.max_retries = 5;
    options.backoff_base_ms = 1;
    auto session = connect(fixture.url(), options);

    const TopKResponse resp = session->query("retry:0", {}, 2);
    CHECK(attempts.load() == 3);
    REQUIRE(resp.entries.size() == 2);
    CHECK(resp.entries[0].token == 0);
    CHECK(resp.entries[0].logprob == -0.5);
}

TEST_CASE("exhausted retries and unreachable hosts raise protocol_error") {
    std::atomic<int> attempts{0};
    FixtureServer fixture([&](httplib::Server& s) {
        serve_fixture_caps(s);
        s.Post("/v1/query",
               [&](const httplib::Request&, httplib::Response& res) {
                   attempts.fetch_add(1);
                   res.status = 503;
               });
    });
    ConnectOptions options;
    options.max_retries = 2;
    options.backoff_base_ms = 1;
    auto session = connect(fixture.url(), options);
    try {
        (void)session->query("down:0", {}, 2);
        FAIL("expected protocol_error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::protocol_error);
    }
    CHECK(attempts.load() == 3);  // initial try + 2 retries

    // Nothing listens on port 9 (discard) of localhost.
    try {
        (void)connect("http://127.0.0.1:9", fast_failing_options());
        FAIL("expected protocol_error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::protocol_error);
    }
}

TEST_CASE("bearer tokens reach both the capabilities fetch and queries") {
    std::mutex seen_mutex;
    std::string caps_auth;
    std::string query_auth;

    FixtureServer fixture([&](httplib::Server& s) {
        s.Get("/v1/capabilities",
              [&](const httplib::Request& req, httplib::Response& res) {
                  {
                      std::lock_guard<std::mutex> lock(seen_mutex);
                      caps_auth = req.get_header_value("Authorization");
                  }
                  res.set_content(kFixtureCaps, "application/json");
              });
        s.Post("/v1/query",
               [&](const httplib::Request& req, httplib::Response& res) {
                   {
                       std::lock_guard<std::mutex> lock(seen_mutex);
                       query_auth = req.get_header_value("Authorization");
                   }
                   res.set_content(
                       R"({"model_id":"fixture","top_logprobs":[)"
                       R"({"token":0,"logprob":-0.1}]})",
                       "application/json");
               });
    });

    ConnectOptions options;
    options.bearer_token = "sekret";
    auto session = connect(fixture.url(), options);
    (void)session->query("auth:0", {}, 1);
    {
        std::lock_guard<std::mutex> lock(seen_mutex);
        CHECK(caps_auth == "Bearer sekret");
        CHECK(query_auth == "Bearer sekret");
    }

    // Environment fallback, and explicit tokens win over it.
    setenv("LLMIMG_API_KEY", "envkey", 1);
    auto env_session = connect(fixture.url());
    (void)env_session->query("auth:1", {}, 1);
    {
        std::lock_guard<std::mutex> lock(seen_mutex);
        CHECK(query_auth == "Bearer envkey");
    }
    auto override_session = connect(fixture.url(), options);
    (void)override_session->query("auth:2", {}, 1);
    unsetenv("LLMIMG_API_KEY");
    {
        std::lock_guard<std::mutex> lock(seen_mutex);
        CHECK(query_auth == "Bearer sekret");
    }
}

TEST_CASE("base URLs may carry a path prefix and trailing slashes") {
    FixtureServer fixture([&](httplib::Server& s) {
        s.Get("/proxy/v1/capabilities",
              [](const httplib::Request&, httplib::Response& res) {
                  res.set_content(kFixtureCaps, "application/json");
              });
        s.Post("/proxy/v1/query",
               [](const httplib::Request&, httplib::Response& res) {
                   res.set_content(
                       R"({"model_id":"fixture","top_logprobs":[)"
                       R"({"token":3,"logprob":-0.2}]})",
                       "application/json");
               });
    });
    auto session = connect(fixture.url() + "/proxy/");
    const TopKResponse resp = session->query("prefix:0", {}, 1);
    REQUIRE(resp.entries.size() == 1);
    CHECK(resp.entries[0].token == 3);

    try {
        (void)connect("127.0.0.1:1234");
        FAIL("expected invalid_argument");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::invalid_argument);
    }
}

TEST_CASE("the chat-completions profile emits the public body shape") {
    std::mutex body_mutex;
    std::string last_body;

    FixtureServer fixture([&](httplib::Server& s) {
        s.Post("/v1/chat/completions",
               [&](const httplib::Request& req, httplib::Response& res) {
                   {
                       std::lock_guard<std::mutex> lock(body_mutex);
                       last_body = req.body;
                   }
                   const bool bad =
                       req.body.find("badtoken") != std::string::npos;
                   const char* good =
                       R"({"choices":[{"logprobs":{"content":[{)"
                       R"("top_logprobs":[)"
                       R"({"token":"2","logprob":-0.2},)"
                       R"({"token":0,"logprob":-1.7}]}]}}]})";
                   const char* text_tokens =
                       R"({"choices":[{"logprobs":{"content":[{)"
                       R"("top_logprobs":[)"
                       R"({"token":"hello","logprob":-0.2}]}]}}]})";
                   res.set_content(bad ? text_tokens : good,
                                   "application/json");
               });
    });

    Capabilities caps;
    caps.vocab_size = 100;
    caps.k_max = 5;
    caps.beta_max = 100.0;
    caps.model_id = "provider-x";

    ConnectOptions options;
    options.profile = ApiProfile::openai_compatible;
    options.capability_override = caps;
    options.model_hint = "provider-model-7";
    auto session = connect(fixture.url(), options);

    BiasSpec bias;
    bias.entries = {{3, 5.0}, {11, -2.5}};
    const TopKResponse resp = session->query("shape:0", bias, 2);
    REQUIRE(resp.entries.size() == 2);
    CHECK(resp.entries[0].token == 2);    // string-form token id
    CHECK(resp.entries[0].logprob == -0.2);
    CHECK(resp.entries[1].token == 0);    // integer-form token id

    {
        std::lock_guard<std::mutex> lock(body_mutex);
        const auto body = nlohmann::json::parse(last_body);
        CHECK(body.at("model").get<std::string>() == "provider-model-7");
        CHECK(body.at("messages").at(0).at("role").get<std::string>() ==
              "user");
        CHECK(body.at("messages").at(0).at("content").get<std::string>() ==
              "shape:0");
        CHECK(body.at("logprobs").get<bool>() == true);
        CHECK(body.at("top_logprobs").get<int>() == 2);
        CHECK(body.at("max_tokens").get<int>() == 1);
        CHECK(body.at("logit_bias").at("3").get<double>() == 5.0);
        CHECK(body.at("logit_bias").at("11").get<double>() == -2.5);
    }

    // Token text instead of an id is a protocol violation, not a crash.
    try {
        (void)session->query("badtoken", {}, 1);
        FAIL("expected protocol_error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::protocol_error);
    }
}

TEST_CASE("profile and capability-override pairing is enforced") {
    MockServer& server = shared_server();

    Capabilities caps;
    caps.vocab_size = 100;
    caps.k_max = 5;
    caps.beta_max = 100.0;

    ConnectOptions openai_missing;
    openai_missing.profile = ApiProfile::openai_compatible;
    try {
        (void)connect(server.base_url(), openai_missing);
        FAIL("expected invalid_argument");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::invalid_argument);
    }

    ConnectOptions native_with_override;
    native_with_override.capability_override = caps;
    try {
        (void)connect(server.base_url(), native_with_override);
        FAIL("expected invalid_argument");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::invalid_argument);
    }

    ConnectOptions unusable;
    unusable.profile = ApiProfile::openai_compatible;
    caps.k_max = 0;
    unusable.capability_override = caps;
    try {
        (void)connect(server.base_url(), unusable);
        FAIL("expected capability_mismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::capability_mismatch);
    }
}

TEST_CASE("unusable advertised capabilities are rejected at connect") {
    FixtureServer fixture([&](httplib::Server& s) {
        s.Get("/v1/capabilities",
              [](const httplib::Request&, httplib::Response& res) {
                  res.set_content(
                      R"({"v":1,"k_max":5,"beta_max":100.0})",
                      "application/json");
              });
    });
    try {
        (void)connect(fixture.url());
        FAIL("expected capability_mismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::capability_mismatch);
    }
}

// ---------------------------------------------------------------------------
// server lifecycle

TEST_CASE("server lifecycle: free-port binding, conflicts, idempotent start") {
    const auto model = model_v100();
    MockServer a(model, ServeOptions{});
    a.start();
    a.start();  // second start is a no-op
    CHECK(a.port() > 0);
    CHECK(a.base_url() == "http://127.0.0.1:" + std::to_string(a.port()));

    ServeOptions conflict;
    conflict.port = a.port();
    MockServer b(model, conflict);
    try {
        b.start();
        FAIL("expected bind_failure");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::bind_failure);
    }

    a.stop();
    a.stop();  // second stop is a no-op
}

TEST_CASE("the rate limiter spaces out query handling") {
    const auto model = model_v100();
    ServeOptions throttled;
    throttled.rate_limit_rps = 200;
    MockServer server(model, throttled);
    server.start();
    auto session = connect(server.base_url());

    const auto begin = std::chrono::steady_clock::now();
    for (int i = 0; i < 10; ++i) {
        (void)session->query("rate:" + std::to_string(i), {}, 1);
    }
    const auto elapsed = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - begin)
                             .count();
    // Ten requests at 200 rps occupy at least nine 5 ms slots.
    CHECK(elapsed >= 0.030);
}
