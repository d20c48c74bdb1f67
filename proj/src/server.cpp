#include "llmimg/server.hpp"

#include <atomic>
#include <chrono>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "llmimg/csv.hpp"
#include "llmimg/session.hpp"
#include "llmimg/telemetry.hpp"

namespace llmimg {

namespace {

const char* wire_error_code(ErrorCode code) {
    switch (code) {
        case ErrorCode::bias_too_large: return "bias_too_large";
        case ErrorCode::k_too_large:    return "k_too_large";
        case ErrorCode::bad_token_id:   return "bad_token_id";
        default:                        return "bad_request";
    }
}

void send_error(httplib::Response& res, int status, const std::string& code,
                const std::string& message) {
    nlohmann::json body{{"error", {{"code", code}, {"message", message}}}};
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

// Response serialization is hand-rolled so logprobs carry 17 significant
// digits; nlohmann would print shortest-roundtrip which is also exact, but
// a fixed format keeps the wire bytes deterministic across library versions.
std::string serialize_response(const std::string& model_id,
                               const TopKResponse& resp) {
    std::string out = "{\"model_id\":";
    out += nlohmann::json(model_id).dump();
    out += ",\"top_logprobs\":[";
    for (std::size_t i = 0; i < resp.entries.size(); ++i) {
        if (i) out += ',';
        out += "{\"token\":";
        out += std::to_string(resp.entries[i].token);
        out += ",\"logprob\":";
        out += format_double(resp.entries[i].logprob);
        out += '}';
    }
    out += ']';
    if (resp.replica_hint) {
        out += ",\"replica_hint\":";
        out += std::to_string(*resp.replica_hint);
    }
    out += '}';
    return out;
}

}  // namespace

struct MockServer::Impl {
    std::shared_ptr<const MockModel> model;
    ServeOptions options;
    httplib::Server server;
    std::thread thread;
    std::unique_ptr<ReplicaChooser> chooser;
    std::atomic<uint64_t> requests{0};
    std::atomic<bool> running{false};
    int bound_port = 0;

    // Simple token-bucket-free limiter: serialize and sleep to the
    // configured request rate.
    std::mutex rate_mutex;
    std::chrono::steady_clock::time_point next_slot =
        std::chrono::steady_clock::now();

    void rate_limit() {
        if (options.rate_limit_rps <= 0) {
            return;
        }
        const auto interval = std::chrono::duration_cast<
            std::chrono::steady_clock::duration>(
            std::chrono::duration<double>(1.0 / options.rate_limit_rps));
        std::chrono::steady_clock::time_point wake;
        {
            std::lock_guard<std::mutex> lock(rate_mutex);
            const auto now = std::chrono::steady_clock::now();
            if (next_slot < now) {
                next_slot = now;
            }
            wake = next_slot;
            next_slot += interval;
        }
        std::this_thread::sleep_until(wake);
    }
};

MockServer::MockServer(std::shared_ptr<const MockModel> model,
                       ServeOptions options)
    : impl_(std::make_unique<Impl>()) {
    impl_->model = std::move(model);
    impl_->options = std::move(options);
    impl_->chooser = std::make_unique<ReplicaChooser>(
        impl_->model->spec().seed, impl_->model->spec().n_replicas,
        impl_->options.draw_salt);

    // Claim the port exclusively. httplib's default options include
    // SO_REUSEPORT, under which two servers could silently share a port and
    // split the request stream between them; a port conflict must fail loudly
    // instead. SO_REUSEADDR alone keeps restarts painless.
    impl_->server.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR,
                   reinterpret_cast<const char*>(&yes), sizeof(yes));
    });

    // Answer small responses immediately instead of letting Nagle hold
    // them back for the peer's delayed ACK (~40ms per request otherwise).
    impl_->server.set_tcp_nodelay(true);

    impl_->server.Get("/healthz", [](const httplib::Request&,
                                     httplib::Response& res) {
        res.set_content("{\"status\":\"ok\"}", "application/json");
    });

    impl_->server.Get("/v1/capabilities", [impl = impl_.get()](
                                              const httplib::Request&,
                                              httplib::Response& res) {
        const Capabilities caps = impl->model->capabilities();
        nlohmann::json body{
            {"v", caps.vocab_size},
            {"k_max", caps.k_max},
            {"beta_max", caps.beta_max},
            {"stochastic", caps.stochastic},
            {"model_id", caps.model_id},
        };
        res.set_content(body.dump(), "application/json");
    });

    impl_->server.Post("/v1/query", [impl = impl_.get()](
                                        const httplib::Request& req,
                                        httplib::Response& res) {
        impl->rate_limit();
        impl->requests.fetch_add(1, std::memory_order_relaxed);

        nlohmann::json body;
        try {
            body = nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::exception& e) {
            send_error(res, 400, "bad_request",
                       std::string("invalid JSON: ") + e.what());
            return;
        }

        std::string context;
        BiasSpec bias;
        int k = impl->model->spec().k_max;
        bool echo = false;
        try {
            context = body.value("context", std::string());
            if (body.contains("top_logprobs")) {
                k = body.at("top_logprobs").get<int>();
            }
            echo = body.value("echo_replica", false);
            if (body.contains("logit_bias")) {
                for (const auto& [key, value] :
                     body.at("logit_bias").items()) {
                    std::size_t pos = 0;
                    int32_t token = 0;
                    try {
                        token = std::stoi(key, &pos);
                    } catch (const std::exception&) {
                        pos = std::string::npos;
                    }
                    if (pos != key.size()) {
                        send_error(res, 400, "bad_token_id",
                                   "logit_bias key '" + key +
                                       "' is not a token id");
                        return;
                    }
                    bias.entries[token] = value.get<double>();
                }
            }
        } catch (const nlohmann::json::exception& e) {
            send_error(res, 400, "bad_request",
                       std::string("mistyped field: ") + e.what());
            return;
        }

        try {
            const bool echo_ok = echo && impl->options.allow_echo_replica;
            const TopKResponse resp = impl->model->api_query(
                context, bias, k, impl->chooser->next(), echo_ok);
            res.set_content(
                serialize_response(impl->model->spec().resolved_model_id(),
                                   resp),
                "application/json");
        } catch (const Error& e) {
            send_error(res, 400, wire_error_code(e.code()), e.what());
        }
    });
}

MockServer::~MockServer() {
    stop();
}

void MockServer::start() {
    if (impl_->running.load()) {
        return;
    }
    if (impl_->options.port == 0) {
        impl_->bound_port =
            impl_->server.bind_to_any_port(impl_->options.host);
        if (impl_->bound_port <= 0) {
            raise(ErrorCode::bind_failure,
                  "cannot bind to " + impl_->options.host);
        }
    } else {
        if (!impl_->server.bind_to_port(impl_->options.host,
                                        impl_->options.port)) {
            raise(ErrorCode::bind_failure,
                  "cannot bind to " + impl_->options.host + ":" +
                      std::to_string(impl_->options.port));
        }
        impl_->bound_port = impl_->options.port;
    }
    impl_->running.store(true);
    impl_->thread = std::thread([this] {
        impl_->server.listen_after_bind();
    });
    impl_->server.wait_until_ready();
    telemetry::emit("server.start", {{"port", impl_->bound_port}});
}

void MockServer::stop() {
    if (!impl_->running.exchange(false)) {
        return;
    }
    impl_->server.stop();
    if (impl_->thread.joinable()) {
        impl_->thread.join();
    }
}

int MockServer::port() const { return impl_->bound_port; }

std::string MockServer::base_url() const {
    return "http://" + impl_->options.host + ":" +
           std::to_string(impl_->bound_port);
}

uint64_t MockServer::requests_served() const {
    return impl_->requests.load(std::memory_order_relaxed);
}

}  // namespace llmimg
