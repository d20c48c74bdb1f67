#include "llmimg/client.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

#include "llmimg/errors.hpp"

#include "httplib.h"
#include "json.hpp"

namespace llmimg {
namespace {

struct ParsedUrl {
    std::string origin;  // scheme://host:port, what httplib::Client wants
    std::string prefix;  // path prefix, no trailing slash
};

ParsedUrl parse_base_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        raise(ErrorCode::invalid_argument,
              "base_url must include a scheme, got '" + url + "'");
    }
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl parsed;
    if (path_start == std::string::npos) {
        parsed.origin = url;
    } else {
        parsed.origin = url.substr(0, path_start);
        parsed.prefix = url.substr(path_start);
        while (!parsed.prefix.empty() && parsed.prefix.back() == '/') {
            parsed.prefix.pop_back();
        }
    }
    return parsed;
}

// Fixed-size pool of keep-alive connections so extraction workers can query
// in parallel without a handshake per call.
class ClientPool {
  public:
    ClientPool(const std::string& origin, int size, const std::string& bearer) {
        for (int i = 0; i < size; ++i) {
            auto cli = std::make_unique<httplib::Client>(origin);
            cli->set_connection_timeout(10, 0);
            cli->set_read_timeout(60, 0);
            cli->set_keep_alive(true);
            // Without TCP_NODELAY, Nagle + delayed ACK can stall every
            // small request/response pair by ~40ms, which dominates the
            // sub-millisecond queries this API serves.
            cli->set_tcp_nodelay(true);
            if (!bearer.empty()) {
                cli->set_bearer_token_auth(bearer);
            }
            idle_.push_back(std::move(cli));
        }
    }

    std::unique_ptr<httplib::Client> acquire() {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [this] { return !idle_.empty(); });
        auto cli = std::move(idle_.back());
        idle_.pop_back();
        return cli;
    }

    void release(std::unique_ptr<httplib::Client> cli) {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            idle_.push_back(std::move(cli));
        }
        cv_.notify_one();
    }

  private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::vector<std::unique_ptr<httplib::Client>> idle_;
};

struct PoolLease {
    ClientPool& pool;
    std::unique_ptr<httplib::Client> cli;
    explicit PoolLease(ClientPool& p) : pool(p), cli(p.acquire()) {}
    ~PoolLease() { pool.release(std::move(cli)); }
};

[[noreturn]] void raise_wire_error(int status, const std::string& body) {
    std::string code = "unknown";
    std::string message = body;
    try {
        const auto parsed = nlohmann::json::parse(body);
        if (parsed.contains("error")) {
            const auto& err = parsed.at("error");
            code = err.value("code", code);
            message = err.value("message", message);
        }
    } catch (const nlohmann::json::exception&) {
        // Non-JSON error body; keep it verbatim.
    }
    if (status == 401 || status == 403) {
        raise(ErrorCode::auth_error,
              "authentication rejected (HTTP " + std::to_string(status) +
                  "): " + message);
    }
    ErrorCode mapped = ErrorCode::protocol_error;
    if (code == "bias_too_large") mapped = ErrorCode::bias_too_large;
    else if (code == "k_too_large") mapped = ErrorCode::k_too_large;
    else if (code == "bad_token_id") mapped = ErrorCode::bad_token_id;
    raise(mapped, "HTTP " + std::to_string(status) + " " + code + ": " + message);
}

class HttpSession final : public CachingSession {
  public:
    HttpSession(Capabilities caps, ParsedUrl url, ConnectOptions options,
                std::string bearer)
        : CachingSession(std::move(caps), options.cache),
          url_(std::move(url)),
          options_(std::move(options)),
          pool_(url_.origin, std::max(1, options_.pool_size), bearer) {}

  protected:
    TopKResponse transport_query(const std::string& context,
                                 const BiasSpec& bias, int k) override {
        const std::string path = url_.prefix + (options_.profile ==
                                                        ApiProfile::native
                                                    ? "/v1/query"
                                                    : "/v1/chat/completions");
        const std::string body = request_body(context, bias, k);
        const std::string response = post_with_retry(path, body);
        return options_.profile == ApiProfile::native
                   ? parse_native(response)
                   : parse_openai(response);
    }

  private:
    std::string request_body(const std::string& context, const BiasSpec& bias,
                             int k) const {
        nlohmann::json logit_bias = nlohmann::json::object();
        for (const auto& [token, value] : bias.entries) {
            logit_bias[std::to_string(token)] = value;
        }
        if (options_.profile == ApiProfile::native) {
            nlohmann::json body{{"context", context}, {"top_logprobs", k}};
            if (!logit_bias.empty()) body["logit_bias"] = logit_bias;
            if (options_.echo_replica) body["echo_replica"] = true;
            return body.dump();
        }
        nlohmann::json body{
            {"model", options_.model_hint},
            {"messages",
             nlohmann::json::array(
                 {nlohmann::json{{"role", "user"}, {"content", context}}})},
            {"logprobs", true},
            {"top_logprobs", k},
            {"max_tokens", 1},
        };
        if (!logit_bias.empty()) body["logit_bias"] = logit_bias;
        return body.dump();
    }

    // Transient transport failures and 5xx retry with exponential backoff;
    // 4xx means the request itself is wrong and retrying cannot help.
    std::string post_with_retry(const std::string& path,
                                const std::string& body) {
        int delay_ms = std::max(1, options_.backoff_base_ms);
        std::string last_failure;
        for (int attempt = 0;; ++attempt) {
            {
                PoolLease lease(pool_);
                httplib::Result result =
                    lease.cli->Post(path, body, "application/json");
                if (result) {
                    if (result->status >= 200 && result->status < 300) {
                        return result->body;
                    }
                    if (result->status >= 400 && result->status < 500) {
                        raise_wire_error(result->status, result->body);
                    }
                    last_failure = "HTTP " + std::to_string(result->status);
                } else {
                    last_failure = httplib::to_string(result.error());
                }
            }
            if (attempt >= options_.max_retries) {
                raise(ErrorCode::protocol_error,
                      "request to " + url_.origin + path + " failed after " +
                          std::to_string(attempt + 1) +
                          " attempts: " + last_failure);
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            delay_ms = std::min(delay_ms * 2, 10'000);
        }
    }

    TopKResponse parse_native(const std::string& body) const {
        TopKResponse resp;
        resp.raw_body = body;
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(body);
            for (const auto& entry : parsed.at("top_logprobs")) {
                resp.entries.push_back(TopEntry{
                    entry.at("token").get<int32_t>(),
                    entry.at("logprob").get<double>(),
                });
            }
            if (parsed.contains("replica_hint")) {
                resp.replica_hint = parsed.at("replica_hint").get<int32_t>();
            }
        } catch (const nlohmann::json::exception& e) {
            raise(ErrorCode::protocol_error,
                  std::string("malformed query response: ") + e.what());
        }
        return resp;
    }

    // Chat-completions shape: entries live under
    // choices[0].logprobs.content[0].top_logprobs, and since this toolkit
    // works on token ids (never token text) the "token" field must hold the
    // integer id, either as a number or as its decimal string.
    TopKResponse parse_openai(const std::string& body) const {
        TopKResponse resp;
        resp.raw_body = body;
        try {
            const auto parsed = nlohmann::json::parse(body);
            const auto& slots = parsed.at("choices").at(0).at("logprobs")
                                    .at("content").at(0).at("top_logprobs");
            for (const auto& entry : slots) {
                const auto& token = entry.at("token");
                const int32_t id =
                    token.is_string()
                        ? static_cast<int32_t>(std::stol(
                              token.get<std::string>()))
                        : token.get<int32_t>();
                resp.entries.push_back(
                    TopEntry{id, entry.at("logprob").get<double>()});
            }
        } catch (const nlohmann::json::exception& e) {
            raise(ErrorCode::protocol_error,
                  std::string("malformed chat-completions response: ") +
                      e.what());
        } catch (const std::logic_error&) {
            raise(ErrorCode::protocol_error,
                  "chat-completions token field is not an integer id");
        }
        return resp;
    }

    ParsedUrl url_;
    ConnectOptions options_;
    ClientPool pool_;
};

Capabilities fetch_capabilities(const ParsedUrl& url,
                                const ConnectOptions& options,
                                const std::string& bearer) {
    httplib::Client cli(url.origin);
    cli.set_connection_timeout(10, 0);
    cli.set_read_timeout(30, 0);
    cli.set_tcp_nodelay(true);
    if (!bearer.empty()) {
        cli.set_bearer_token_auth(bearer);
    }
    int delay_ms = std::max(1, options.backoff_base_ms);
    std::string last_failure;
    for (int attempt = 0;; ++attempt) {
        httplib::Result result = cli.Get(url.prefix + "/v1/capabilities");
        if (result) {
            if (result->status >= 200 && result->status < 300) {
                try {
                    const auto body = nlohmann::json::parse(result->body);
                    Capabilities caps;
                    caps.vocab_size = body.at("v").get<int64_t>();
                    caps.k_max = body.at("k_max").get<int32_t>();
                    caps.beta_max = body.at("beta_max").get<double>();
                    caps.stochastic = body.value("stochastic", false);
                    caps.model_id = body.value("model_id", std::string());
                    return caps;
                } catch (const nlohmann::json::exception& e) {
                    raise(ErrorCode::protocol_error,
                          std::string("malformed capabilities response: ") +
                              e.what());
                }
            }
            if (result->status == 401 || result->status == 403) {
                raise_wire_error(result->status, result->body);
            }
            if (result->status >= 400 && result->status < 500) {
                raise_wire_error(result->status, result->body);
            }
            last_failure = "HTTP " + std::to_string(result->status);
        } else {
            last_failure = httplib::to_string(result.error());
        }
        if (attempt >= options.max_retries) {
            raise(ErrorCode::protocol_error,
                  "capabilities fetch from " + url.origin +
                      " failed after " + std::to_string(attempt + 1) +
                      " attempts: " + last_failure);
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
        delay_ms = std::min(delay_ms * 2, 10'000);
    }
}

}  // namespace

std::unique_ptr<ApiSession> connect(const std::string& base_url,
                                    const ConnectOptions& options) {
    const ParsedUrl url = parse_base_url(base_url);

    std::string bearer = options.bearer_token;
    if (bearer.empty()) {
        if (const char* env = std::getenv("LLMIMG_API_KEY")) bearer = env;
    }

    Capabilities caps;
    if (options.profile == ApiProfile::native) {
        caps = fetch_capabilities(url, options, bearer);
        if (options.capability_override) {
            raise(ErrorCode::invalid_argument,
                  "capability_override is only for openai_compatible "
                  "endpoints; the native capabilities endpoint is "
                  "authoritative");
        }
    } else {
        if (!options.capability_override) {
            raise(ErrorCode::invalid_argument,
                  "openai_compatible endpoints expose no capabilities "
                  "route; pass capability_override with v, k_max and "
                  "beta_max");
        }
        caps = *options.capability_override;
    }
    if (caps.vocab_size < 2 || caps.k_max < 1 || caps.beta_max <= 0) {
        raise(ErrorCode::capability_mismatch,
              "endpoint advertises unusable capabilities (v=" +
                  std::to_string(caps.vocab_size) +
                  ", k_max=" + std::to_string(caps.k_max) + ")");
    }

    return std::make_unique<HttpSession>(std::move(caps), url, options,
                                         bearer);
}

}  // namespace llmimg
