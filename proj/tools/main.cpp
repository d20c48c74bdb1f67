// llmimg command-line interface.
//
// Commands: mock-serve (run the bundled mock endpoint), extract (one full
// distribution), image collect / embed-size / spectrum / fast-extract,
// audit (classify an update between two checkpoints), attribute (match an
// output to a checkpoint), cost (call/price table). Every network command
// records a RunManifest whose call_count equals the session's transport
// counter. Exit codes: 0 success, 2 validation/config, 3 protocol/API,
// 4 numerical failure.

#include "llmimg/algebra.hpp"
#include "llmimg/client.hpp"
#include "llmimg/container.hpp"
#include "llmimg/cost.hpp"
#include "llmimg/csv.hpp"
#include "llmimg/errors.hpp"
#include "llmimg/extract.hpp"
#include "llmimg/image.hpp"
#include "llmimg/mock_model.hpp"
#include "llmimg/rng.hpp"
#include "llmimg/server.hpp"
#include "llmimg/session.hpp"
#include "llmimg/telemetry.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <csignal>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace llmimg;

namespace {

// ---------------------------------------------------------------------------
// small helpers

std::string slurp_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::io_error, "cannot open " + path);
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::vector<std::string> read_context_lines(const std::string& path) {
    std::istringstream in(slurp_file(path));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.empty()) {
        throw Error(ErrorCode::invalid_argument,
                    "probe-contexts file " + path + " holds no contexts");
    }
    return lines;
}

void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error(ErrorCode::io_error, "cannot write " + tmp);
        }
        out << text;
        if (!out) {
            throw Error(ErrorCode::io_error, "short write to " + tmp);
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw Error(ErrorCode::io_error,
                    "cannot move " + tmp + " to " + path + ": " + ec.message());
    }
}

std::string file_digest_hex(const std::string& path) {
    const std::string bytes = slurp_file(path);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(bytes));
    return buf;
}

json capabilities_json(const Capabilities& caps) {
    return json{{"v", caps.vocab_size},
                {"k_max", caps.k_max},
                {"beta_max", caps.beta_max},
                {"stochastic", caps.stochastic},
                {"model_id", caps.model_id}};
}

// Non-finite doubles have no JSON literal; report them as strings.
json finite_or_string(double x) {
    if (std::isfinite(x)) return x;
    if (std::isnan(x)) return "nan";
    return x > 0 ? "inf" : "-inf";
}

void print_json_line(const json& j) {
    std::cout << j.dump() << std::endl;
}

// ---------------------------------------------------------------------------
// run manifests

class ManifestRecorder {
  public:
    ManifestRecorder(std::string command, json parameters)
        : command_(std::move(command)),
          parameters_(std::move(parameters)),
          begin_(std::chrono::steady_clock::now()) {}

    void set_capabilities(const Capabilities& caps) {
        capabilities_ = capabilities_json(caps);
    }
    void set_call_count(uint64_t n) { call_count_ = n; }
    void add_output(const std::string& path) { outputs_.push_back(path); }

    void write(const std::string& path) const {
        json outputs = json::array();
        for (const std::string& out : outputs_) {
            outputs.push_back(
                json{{"path", out},
                     {"bytes", static_cast<int64_t>(fs::file_size(out))},
                     {"fnv1a64", file_digest_hex(out)}});
        }
        const double wall = std::chrono::duration<double>(
                                std::chrono::steady_clock::now() - begin_)
                                .count();
        const json manifest{{"command", command_},
                            {"parameters", parameters_},
                            {"capabilities", capabilities_},
                            {"call_count", call_count_},
                            {"wall_time_sec", wall},
                            {"outputs", outputs}};
        write_text_atomic(path, manifest.dump(2) + "\n");
    }

  private:
    std::string command_;
    json parameters_;
    json capabilities_;  // null until a session reports in
    uint64_t call_count_ = 0;
    std::vector<std::string> outputs_;
    std::chrono::steady_clock::time_point begin_;
};

std::string default_manifest_path(const std::string& explicit_path,
                                  const std::string& primary_output) {
    if (!explicit_path.empty()) return explicit_path;
    return primary_output + ".manifest.json";
}

// ---------------------------------------------------------------------------
// shared connection flags

struct ConnFlags {
    std::string url;
    std::string bearer;
    int max_retries = 5;
    int backoff_ms = 100;
    bool no_cache = false;
};

void add_connection_flags(CLI::App* cmd, ConnFlags& flags) {
    cmd->add_option("--url", flags.url, "API base URL")->required();
    cmd->add_option("--bearer-token", flags.bearer,
                    "Bearer token (default: $LLMIMG_API_KEY)");
    cmd->add_option("--max-retries", flags.max_retries,
                    "transport retries on 5xx/connect failure")
        ->capture_default_str();
    cmd->add_option("--backoff-ms", flags.backoff_ms,
                    "base retry backoff in milliseconds")
        ->capture_default_str();
    cmd->add_flag("--no-cache", flags.no_cache,
                  "disable response memoization");
}

std::unique_ptr<ApiSession> open_session(const ConnFlags& flags) {
    ConnectOptions options;
    options.bearer_token = flags.bearer;
    options.cache = !flags.no_cache;
    options.max_retries = flags.max_retries;
    options.backoff_base_ms = flags.backoff_ms;
    return connect(flags.url, options);
}

bool g_quiet = false;

void arm_telemetry() { telemetry::enable(!g_quiet); }

// ---------------------------------------------------------------------------
// mock-serve

std::atomic<bool> g_interrupted{false};

extern "C" void handle_stop_signal(int) { g_interrupted.store(true); }

struct MockServeArgs {
    std::string config_path;
    MockModelSpec spec;  // flag-built spec; defaults below
    std::string host = "127.0.0.1";
    int port = 8821;
    double rate_limit_rps = 0.0;
    uint64_t draw_salt = 0;
    bool no_echo_replica = false;
    bool config_from_flags = false;
};

int cmd_mock_serve(const MockServeArgs& args) {
    arm_telemetry();
    MockModelSpec spec = args.spec;
    if (!args.config_path.empty()) {
        if (args.config_from_flags) {
            throw Error(ErrorCode::invalid_argument,
                        "--config conflicts with the individual model flags");
        }
        spec = MockModelSpec::from_json_text(slurp_file(args.config_path));
    }
    const auto model = std::make_shared<const MockModel>(spec);

    ServeOptions options;
    options.host = args.host;
    options.port = args.port;
    options.rate_limit_rps = args.rate_limit_rps;
    options.draw_salt = args.draw_salt;
    options.allow_echo_replica = !args.no_echo_replica;

    MockServer server(model, options);
    server.start();
    print_json_line(json{{"base_url", server.base_url()},
                         {"capabilities",
                          capabilities_json(model->capabilities())}});

    std::signal(SIGINT, handle_stop_signal);
    std::signal(SIGTERM, handle_stop_signal);
    while (!g_interrupted.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    server.stop();
    telemetry::emit("serve.stop",
                    {{"requests_served", server.requests_served()}});
    return 0;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractArgs {
    ConnFlags conn;
    std::string context;
    std::string strategy = "stable";
    std::string out;
    std::string gaps_out;
    std::string manifest;
    std::optional<double> bias;
    double epsilon = 1e-6;
    int concurrency = 8;
    std::optional<int> n_hint;
    std::optional<uint64_t> call_budget;
    bool use_replica_hint = false;
};

ProbVector run_extraction(ApiSession& session, const ExtractArgs& args,
                          ManifestRecorder& manifest) {
    if (args.strategy == "fast") {
        FastOptions options;
        options.bias = args.bias;
        options.concurrency = args.concurrency;
        try {
            return extract_fast(session, args.context, options);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::numerical_instability) {
                throw Error(e.code(),
                            std::string(e.what()) +
                                " (hint: --strategy stable tolerates any "
                                "usable bias)");
            }
            throw;
        }
    }
    if (args.strategy == "stable") {
        StableOptions options;
        options.bias = args.bias;
        options.concurrency = args.concurrency;
        return extract_stable(session, args.context, options);
    }
    if (args.strategy == "stochastic") {
        StochasticOptions options;
        options.bias = args.bias;
        options.n_hint = args.n_hint;
        options.call_budget = args.call_budget;
        options.use_replica_hint = args.use_replica_hint;
        const StochasticResult result =
            extract_stochastic(session, args.context, options);
        int complete = 0;
        for (const StochasticOutput& output : result.outputs) {
            if (output.complete) ++complete;
        }
        telemetry::emit("extract.stochastic.groups",
                        {{"groups", result.outputs.size()},
                         {"complete", complete},
                         {"calls_used", result.calls_used}});
        if (!session.capabilities().stochastic ||
            result.outputs.size() == 1) {
            telemetry::emit("extract.stochastic.degenerate",
                            {{"note", "endpoint behaved deterministically; "
                                      "--strategy stable is cheaper"}});
        }
        if (result.completed_index < 0) {
            throw Error(ErrorCode::budget_exhausted,
                        "no replica's distribution completed within the call "
                        "budget; raise --call-budget");
        }
        return *result.outputs[static_cast<std::size_t>(
                                   result.completed_index)]
                    .distribution;
    }
    // logprob-free
    LogprobFreeOptions options;
    options.epsilon = args.epsilon;
    options.concurrency = args.concurrency;
    const LogprobFreeResult result =
        extract_logprob_free(session, args.context, options);
    if (!result.unargmaxable.empty()) {
        telemetry::emit(
            "extract.unargmaxable",
            {{"count", result.unargmaxable.size()},
             {"note", "gap to the top token exceeds beta_max; probabilities "
                      "for these tokens are upper bounds"}});
    }
    if (!args.gaps_out.empty()) {
        write_vector_csv(args.gaps_out, result.logit_gaps);
        manifest.add_output(args.gaps_out);
    }
    return result.distribution;
}

int cmd_extract(const ExtractArgs& args) {
    arm_telemetry();
    ManifestRecorder manifest(
        "extract", json{{"url", args.conn.url},
                        {"context", args.context},
                        {"strategy", args.strategy},
                        {"out", args.out}});
    auto session = open_session(args.conn);
    manifest.set_capabilities(session->capabilities());

    const ProbVector distribution = run_extraction(*session, args, manifest);
    write_vector_csv(args.out, distribution.values());
    manifest.add_output(args.out);
    manifest.set_call_count(session->call_count());
    const std::string manifest_path =
        default_manifest_path(args.manifest, args.out);
    manifest.write(manifest_path);

    print_json_line(json{{"out", args.out},
                         {"manifest", manifest_path},
                         {"calls", session->call_count()},
                         {"v", distribution.values().size()}});
    return 0;
}

// ---------------------------------------------------------------------------
// image subcommands

Extractor make_extractor(const std::string& strategy,
                         std::optional<double> bias) {
    if (strategy == "fast") {
        FastOptions options;
        options.bias = bias;
        options.concurrency = 1;  // collection parallelizes across columns
        return [options](ApiSession& session, const std::string& context) {
            return extract_fast(session, context, options);
        };
    }
    StableOptions options;
    options.bias = bias;
    options.concurrency = 1;
    return [options](ApiSession& session, const std::string& context) {
        return extract_stable(session, context, options);
    };
}

struct ImageCollectArgs {
    ConnFlags conn;
    std::string out;
    std::string manifest;
    std::string strategy = "stable";
    std::optional<double> bias;
    int margin = 100;
    int batch = 64;
    int extra_columns = 0;
    double tolerance = 1e-6;
    int concurrency = 8;
    std::string source_id;
    std::string context_prefix = "img:";
    std::string created_at;
};

int cmd_image_collect(const ImageCollectArgs& args) {
    arm_telemetry();
    ManifestRecorder manifest(
        "image collect", json{{"url", args.conn.url},
                              {"out", args.out},
                              {"strategy", args.strategy},
                              {"margin", args.margin},
                              {"batch", args.batch},
                              {"extra_columns", args.extra_columns},
                              {"tolerance", args.tolerance}});
    auto session = open_session(args.conn);
    manifest.set_capabilities(session->capabilities());

    CollectOptions options;
    options.margin = args.margin;
    options.batch = args.batch;
    options.extra_columns = args.extra_columns;
    options.tolerance = args.tolerance;
    options.concurrency = args.concurrency;
    options.source_id = args.source_id.empty()
                            ? session->capabilities().model_id
                            : args.source_id;
    options.context_prefix = args.context_prefix;
    options.created_at = args.created_at;

    const ModelImage image = collect_image(
        *session, make_extractor(args.strategy, args.bias), options);
    write_image(args.out, image);
    manifest.add_output(args.out);
    manifest.set_call_count(session->call_count());
    const std::string manifest_path =
        default_manifest_path(args.manifest, args.out);
    manifest.write(manifest_path);

    print_json_line(json{{"out", args.out},
                         {"manifest", manifest_path},
                         {"d_estimate", image.d_estimate},
                         {"columns", image.columns()},
                         {"v", image.vocab_size()},
                         {"calls", session->call_count()}});
    return 0;
}

struct EmbedSizeArgs {
    std::string image_path;
    std::string matrix_path;
    std::string spectrum_out;
    double tolerance = 1e-6;
};

int cmd_image_embed_size(const EmbedSizeArgs& args) {
    arm_telemetry();
    Eigen::MatrixXd matrix;
    if (!args.image_path.empty()) {
        matrix = read_image(args.image_path).matrix;
    } else {
        matrix = read_matrix_csv(args.matrix_path);
    }
    const EmbeddingEstimate estimate =
        estimate_embedding_size(matrix, args.tolerance);
    json summary{{"d_estimate", estimate.d},
                 {"gap_index", estimate.gap_index},
                 {"plateau", estimate.plateau},
                 {"columns", matrix.cols()},
                 {"v", matrix.rows()}};
    if (!args.spectrum_out.empty()) {
        write_spectrum_csv(args.spectrum_out, estimate.spectrum);
        summary["spectrum_out"] = args.spectrum_out;
    }
    print_json_line(summary);
    return 0;
}

struct SpectrumArgs {
    std::string image_path;
    std::string out;
};

int cmd_image_spectrum(const SpectrumArgs& args) {
    arm_telemetry();
    const ModelImage image = read_image(args.image_path);
    write_spectrum_csv(args.out, image.spectrum);
    print_json_line(json{{"out", args.out},
                         {"entries", image.spectrum.values.size()},
                         {"d_estimate", image.d_estimate}});
    return 0;
}

struct FastExtractArgs {
    ConnFlags conn;
    std::string image_path;
    std::string context;
    std::string out;
    std::string manifest;
    std::optional<double> bias;
    double mismatch_tol = 1e-4;
};

int cmd_image_fast_extract(const FastExtractArgs& args) {
    arm_telemetry();
    ManifestRecorder manifest(
        "image fast-extract", json{{"url", args.conn.url},
                                   {"image", args.image_path},
                                   {"context", args.context},
                                   {"out", args.out}});
    const ModelImage image = read_image(args.image_path);
    auto session = open_session(args.conn);
    manifest.set_capabilities(session->capabilities());

    FastExtractOptions options;
    options.bias = args.bias;
    options.mismatch_tol = args.mismatch_tol;
    const ProbVector distribution =
        fast_extract(image, *session, args.context, options);
    write_vector_csv(args.out, distribution.values());
    manifest.add_output(args.out);
    manifest.set_call_count(session->call_count());
    const std::string manifest_path =
        default_manifest_path(args.manifest, args.out);
    manifest.write(manifest_path);

    print_json_line(json{{"out", args.out},
                         {"manifest", manifest_path},
                         {"calls", session->call_count()},
                         {"d", image.d_estimate}});
    return 0;
}

// ---------------------------------------------------------------------------
// audit

struct AuditArgs {
    std::string image_a;
    std::string image_b;
    std::string url_a;
    std::string url_b;
    std::string probe_contexts;
    std::string out;
    std::string manifest;
    std::string strategy = "stable";
    double tolerance = 1e-6;
};

int cmd_audit(const AuditArgs& args) {
    arm_telemetry();
    ManifestRecorder manifest("audit", json{{"image_a", args.image_a},
                                            {"image_b", args.image_b},
                                            {"tolerance", args.tolerance}});
    const ModelImage a = read_image(args.image_a);
    const ModelImage b = read_image(args.image_b);
    const ImageChange change = compare_images(a, b, args.tolerance);

    bool probed = false;
    bool logit_change = false;
    uint64_t calls = 0;
    if (!args.url_a.empty()) {
        auto conn = [&](const std::string& url) {
            ConnFlags flags;
            flags.url = url;
            return open_session(flags);
        };
        auto session_a = conn(args.url_a);
        auto session_b = conn(args.url_b);
        manifest.set_capabilities(session_a->capabilities());
        const std::vector<std::string> contexts =
            read_context_lines(args.probe_contexts);
        logit_change = probe_logit_change(
            *session_a, *session_b, contexts,
            make_extractor(args.strategy, std::nullopt), args.tolerance);
        probed = true;
        calls = session_a->call_count() + session_b->call_count();
    }

    const UpdateClass classification = classify_update(logit_change, change);
    const json report{
        {"classification", update_class_name(classification)},
        {"image_change", json{{"kind", image_change_kind_name(change.kind)},
                              {"rank_delta", change.rank_delta},
                              {"union_rank", change.union_rank}}},
        {"logit_change", logit_change},
        {"probed", probed},
        {"d_a", a.d_estimate},
        {"d_b", b.d_estimate}};
    print_json_line(report);
    if (!args.out.empty()) {
        write_text_atomic(args.out, report.dump(2) + "\n");
        manifest.add_output(args.out);
    }
    manifest.set_call_count(calls);
    if (!args.manifest.empty()) {
        manifest.write(args.manifest);
    } else if (!args.out.empty()) {
        manifest.write(default_manifest_path("", args.out));
    }
    return 0;
}

// ---------------------------------------------------------------------------
// attribute

struct AttributeArgs {
    std::string images_dir;
    std::string output_csv;
    std::string space = "prob";
    std::string report_path;
    double threshold_scale = 1e-6;
    double margin_min = 100.0;
};

int cmd_attribute(const AttributeArgs& args) {
    arm_telemetry();
    std::vector<std::string> paths;
    for (const fs::directory_entry& entry :
         fs::directory_iterator(args.images_dir)) {
        if (entry.path().extension() == ".llmimg") {
            paths.push_back(entry.path().string());
        }
    }
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) {
        throw Error(ErrorCode::invalid_argument,
                    "no .llmimg images in " + args.images_dir);
    }
    std::vector<ModelImage> images;
    images.reserve(paths.size());
    for (const std::string& path : paths) {
        images.push_back(read_image(path));
    }
    std::vector<const ModelImage*> candidates;
    candidates.reserve(images.size());
    for (const ModelImage& image : images) {
        candidates.push_back(&image);
    }

    const Eigen::VectorXd values = read_vector_csv(args.output_csv);
    const ClrVector output = args.space == "clr"
                                 ? ClrVector(values)
                                 : clr(ProbVector(values));

    AttributeOptions options;
    options.threshold_scale = args.threshold_scale;
    options.margin_min = args.margin_min;
    const AttributionReport report = attribute(candidates, output, options);

    json entries = json::array();
    for (const AttributionEntry& entry : report.entries) {
        entries.push_back(json{{"source_id", entry.source_id},
                               {"residual", entry.residual}});
    }
    const json out{{"best_match", report.best_match
                                      ? json(*report.best_match)
                                      : json(nullptr)},
                   {"margin", finite_or_string(report.margin)},
                   {"entries", entries}};
    print_json_line(out);
    if (!args.report_path.empty()) {
        write_text_atomic(args.report_path, out.dump(2) + "\n");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// cost

struct CostArgs {
    CostQuery query;
    bool as_json = false;
    std::string out;
};

int cmd_cost(const CostArgs& args) {
    arm_telemetry();
    const CostEstimate estimate = estimate_cost(args.query);
    if (args.as_json) {
        json rows = json::array();
        for (const CostRow& row : estimate.rows) {
            rows.push_back(
                json{{"strategy", row.strategy},
                     {"display_name", row.display_name},
                     {"calls_per_output", row.calls_per_output},
                     {"price_usd", row.price_usd ? json(*row.price_usd)
                                                 : json(nullptr)}});
        }
        print_json_line(json{{"rows", rows}});
    } else {
        std::printf("%-16s %-28s %16s %18s\n", "strategy", "name",
                    "calls/output", "image price (USD)");
        for (const CostRow& row : estimate.rows) {
            std::printf("%-16s %-28s %16.6g ", row.strategy.c_str(),
                        row.display_name.c_str(), row.calls_per_output);
            if (row.price_usd) {
                std::printf("%18.6g\n", *row.price_usd);
            } else {
                std::printf("%18s\n", "-");
            }
        }
        std::fflush(stdout);
    }
    if (!args.out.empty()) {
        std::string csv = "strategy,calls_per_output,price_usd\n";
        for (const CostRow& row : estimate.rows) {
            csv += row.strategy + "," + format_double(row.calls_per_output) +
                   ",";
            if (row.price_usd) csv += format_double(*row.price_usd);
            csv += "\n";
        }
        write_text_atomic(args.out, csv);
    }
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{
        "llmimg: full-distribution extraction, image collection and update "
        "auditing for top-k logit-bias LLM APIs"};
    app.require_subcommand(1);
    app.add_flag("--quiet", g_quiet, "suppress telemetry lines on stderr");

    int rc = 0;

    // mock-serve ------------------------------------------------------------
    MockServeArgs serve_args;
    serve_args.spec.v = 1000;
    serve_args.spec.d = 64;
    serve_args.spec.seed = 0;
    {
        CLI::App* cmd = app.add_subcommand(
            "mock-serve", "serve a deterministic mock model over HTTP");
        CLI::Option* config =
            cmd->add_option("--config", serve_args.config_path,
                            "model spec JSON file (see README)");
        std::vector<CLI::Option*> model_flags = {
            cmd->add_option("--v", serve_args.spec.v, "vocabulary size")
                ->capture_default_str(),
            cmd->add_option("--d", serve_args.spec.d, "embedding size")
                ->capture_default_str(),
            cmd->add_option("--seed", serve_args.spec.seed, "weight seed")
                ->capture_default_str(),
            cmd->add_option("--n-replicas", serve_args.spec.n_replicas,
                            "replica count (queries draw one uniformly)")
                ->capture_default_str(),
            cmd->add_option("--replica-noise", serve_args.spec.replica_noise,
                            "per-replica weight perturbation stddev")
                ->capture_default_str(),
            cmd->add_option("--k-max", serve_args.spec.k_max,
                            "largest top-k a query may request")
                ->capture_default_str(),
            cmd->add_option("--beta-max", serve_args.spec.beta_max,
                            "largest |logit bias| accepted")
                ->capture_default_str(),
            cmd->add_option("--logit-scale", serve_args.spec.logit_scale,
                            "embedding norm; logits ~ N(0, scale^2/d)")
                ->capture_default_str(),
            cmd->add_option("--model-id", serve_args.spec.model_id,
                            "advertised model id"),
        };
        cmd->add_option("--host", serve_args.host, "bind address")
            ->capture_default_str();
        cmd->add_option("--port", serve_args.port, "bind port (0 = ephemeral)")
            ->capture_default_str();
        cmd->add_option("--rate-limit-rps", serve_args.rate_limit_rps,
                        "throttle query handling (0 = unlimited)")
            ->capture_default_str();
        cmd->add_option("--draw-salt", serve_args.draw_salt,
                        "replica-draw stream salt")
            ->capture_default_str();
        cmd->add_flag("--no-echo-replica", serve_args.no_echo_replica,
                      "never reveal which replica answered");
        cmd->callback([&serve_args, config, model_flags, &rc] {
            for (const CLI::Option* flag : model_flags) {
                if (flag->count() > 0) serve_args.config_from_flags = true;
            }
            if (config->count() == 0) serve_args.config_path.clear();
            rc = cmd_mock_serve(serve_args);
        });
    }

    // extract ----------------------------------------------------------------
    ExtractArgs extract_args;
    {
        CLI::App* cmd = app.add_subcommand(
            "extract", "extract one full next-token distribution");
        add_connection_flags(cmd, extract_args.conn);
        cmd->add_option("--context", extract_args.context, "prompt context")
            ->required();
        cmd->add_option("--strategy", extract_args.strategy,
                        "extraction strategy")
            ->check(CLI::IsMember(
                {"fast", "stable", "stochastic", "logprob-free"}))
            ->capture_default_str();
        cmd->add_option("--out", extract_args.out, "distribution CSV path")
            ->required();
        cmd->add_option("--gaps-out", extract_args.gaps_out,
                        "logit-gap CSV path (logprob-free only)");
        cmd->add_option("--manifest", extract_args.manifest,
                        "manifest path (default: <out>.manifest.json)");
        double bias = 0.0;
        CLI::Option* bias_opt =
            cmd->add_option("--bias", bias, "logit bias magnitude");
        cmd->add_option("--epsilon", extract_args.epsilon,
                        "logit-gap resolution (logprob-free)")
            ->capture_default_str();
        cmd->add_option("--concurrency", extract_args.concurrency,
                        "parallel in-flight batches")
            ->capture_default_str();
        int n_hint = 0;
        CLI::Option* n_hint_opt = cmd->add_option(
            "--n-hint", n_hint, "expected replica count (stochastic)");
        uint64_t budget = 0;
        CLI::Option* budget_opt = cmd->add_option(
            "--call-budget", budget, "call budget (stochastic)");
        cmd->add_flag("--use-replica-hint", extract_args.use_replica_hint,
                      "trust echoed replica ids (stochastic)");
        cmd->callback([&, bias_opt, n_hint_opt, budget_opt] {
            if (bias_opt->count() > 0) extract_args.bias = bias;
            if (n_hint_opt->count() > 0) extract_args.n_hint = n_hint;
            if (budget_opt->count() > 0) extract_args.call_budget = budget;
            rc = cmd_extract(extract_args);
        });
    }

    // image -------------------------------------------------------------------
    CLI::App* image = app.add_subcommand(
        "image", "collect and use model images (clr output collections)");
    image->require_subcommand(1);

    ImageCollectArgs collect_args;
    {
        CLI::App* cmd = image->add_subcommand(
            "collect", "collect outputs until the rank plateaus");
        add_connection_flags(cmd, collect_args.conn);
        cmd->add_option("--out", collect_args.out, "image file path")
            ->required();
        cmd->add_option("--manifest", collect_args.manifest,
                        "manifest path (default: <out>.manifest.json)");
        cmd->add_option("--strategy", collect_args.strategy,
                        "per-column extraction strategy")
            ->check(CLI::IsMember({"fast", "stable"}))
            ->capture_default_str();
        double bias = 0.0;
        CLI::Option* bias_opt =
            cmd->add_option("--bias", bias, "logit bias magnitude");
        cmd->add_option("--margin", collect_args.margin,
                        "stop after this many columns without rank growth")
            ->capture_default_str();
        cmd->add_option("--batch", collect_args.batch,
                        "parallel chunk size and SVD cross-check cadence")
            ->capture_default_str();
        cmd->add_option("--extra-columns", collect_args.extra_columns,
                        "over-collect beyond the plateau")
            ->capture_default_str();
        cmd->add_option("--tolerance", collect_args.tolerance,
                        "relative rank tolerance")
            ->capture_default_str();
        cmd->add_option("--concurrency", collect_args.concurrency,
                        "parallel column extractions")
            ->capture_default_str();
        cmd->add_option("--source-id", collect_args.source_id,
                        "recorded source id (default: the model id)");
        cmd->add_option("--context-prefix", collect_args.context_prefix,
                        "collection prompts are <prefix><index>")
            ->capture_default_str();
        cmd->add_option("--created-at", collect_args.created_at,
                        "override the recorded UTC timestamp");
        cmd->callback([&, bias_opt] {
            if (bias_opt->count() > 0) collect_args.bias = bias;
            rc = cmd_image_collect(collect_args);
        });
    }

    EmbedSizeArgs embed_args;
    {
        CLI::App* cmd = image->add_subcommand(
            "embed-size", "estimate the embedding size from a collection");
        CLI::Option* img = cmd->add_option("--image", embed_args.image_path,
                                           "image file");
        CLI::Option* mat = cmd->add_option("--matrix", embed_args.matrix_path,
                                           "clr output matrix CSV");
        img->excludes(mat);
        cmd->add_option("--tolerance", embed_args.tolerance,
                        "relative rank tolerance")
            ->capture_default_str();
        cmd->add_option("--spectrum-out", embed_args.spectrum_out,
                        "write the singular spectrum CSV here");
        cmd->callback([&] {
            if (embed_args.image_path.empty() &&
                embed_args.matrix_path.empty()) {
                throw CLI::RequiredError("--image or --matrix");
            }
            rc = cmd_image_embed_size(embed_args);
        });
    }

    SpectrumArgs spectrum_args;
    {
        CLI::App* cmd = image->add_subcommand(
            "spectrum", "export an image's stored singular spectrum");
        cmd->add_option("--image", spectrum_args.image_path, "image file")
            ->required();
        cmd->add_option("--out", spectrum_args.out, "spectrum CSV path")
            ->required();
        cmd->callback([&] { rc = cmd_image_spectrum(spectrum_args); });
    }

    FastExtractArgs fast_args;
    {
        CLI::App* cmd = image->add_subcommand(
            "fast-extract",
            "extract a distribution with O(d) calls using an image");
        add_connection_flags(cmd, fast_args.conn);
        cmd->add_option("--image", fast_args.image_path, "image file")
            ->required();
        cmd->add_option("--context", fast_args.context, "prompt context")
            ->required();
        cmd->add_option("--out", fast_args.out, "distribution CSV path")
            ->required();
        cmd->add_option("--manifest", fast_args.manifest,
                        "manifest path (default: <out>.manifest.json)");
        double bias = 0.0;
        CLI::Option* bias_opt =
            cmd->add_option("--bias", bias, "logit bias magnitude");
        cmd->add_option("--mismatch-tol", fast_args.mismatch_tol,
                        "observed-vs-reconstructed disagreement gate")
            ->capture_default_str();
        cmd->callback([&, bias_opt] {
            if (bias_opt->count() > 0) fast_args.bias = bias;
            rc = cmd_image_fast_extract(fast_args);
        });
    }

    // audit --------------------------------------------------------------------
    AuditArgs audit_args;
    {
        CLI::App* cmd = app.add_subcommand(
            "audit", "classify the update between two checkpoints");
        cmd->add_option("--image-a", audit_args.image_a, "first image file")
            ->required();
        cmd->add_option("--image-b", audit_args.image_b, "second image file")
            ->required();
        CLI::Option* url_a =
            cmd->add_option("--url-a", audit_args.url_a, "first endpoint");
        CLI::Option* url_b =
            cmd->add_option("--url-b", audit_args.url_b, "second endpoint");
        CLI::Option* probes = cmd->add_option(
            "--probe-contexts", audit_args.probe_contexts,
            "file with one probe context per line (enables the logit-change "
            "test)");
        url_a->needs(url_b);
        url_a->needs(probes);
        url_b->needs(url_a);
        probes->needs(url_a);
        cmd->add_option("--strategy", audit_args.strategy,
                        "probe extraction strategy")
            ->check(CLI::IsMember({"fast", "stable"}))
            ->capture_default_str();
        cmd->add_option("--tolerance", audit_args.tolerance,
                        "rank and clr comparison tolerance")
            ->capture_default_str();
        cmd->add_option("--out", audit_args.out, "write the report JSON here");
        cmd->add_option("--manifest", audit_args.manifest, "manifest path");
        cmd->callback([&] { rc = cmd_audit(audit_args); });
    }

    // attribute ------------------------------------------------------------------
    AttributeArgs attribute_args;
    {
        CLI::App* cmd = app.add_subcommand(
            "attribute", "match an output vector to a checkpoint image");
        cmd->add_option("--images", attribute_args.images_dir,
                        "directory of .llmimg candidates")
            ->required();
        cmd->add_option("--output", attribute_args.output_csv,
                        "observed distribution CSV")
            ->required();
        cmd->add_option("--space", attribute_args.space,
                        "CSV value space")
            ->check(CLI::IsMember({"prob", "clr"}))
            ->capture_default_str();
        cmd->add_option("--threshold-scale", attribute_args.threshold_scale,
                        "match gate: best residual < scale * ||output||")
            ->capture_default_str();
        cmd->add_option("--margin-min", attribute_args.margin_min,
                        "match gate: second-best / best residual")
            ->capture_default_str();
        cmd->add_option("--report", attribute_args.report_path,
                        "write the report JSON here");
        cmd->callback([&] { rc = cmd_attribute(attribute_args); });
    }

    // cost -------------------------------------------------------------------------
    CostArgs cost_args;
    {
        CLI::App* cmd = app.add_subcommand(
            "cost", "calls-per-output and image-price table");
        cmd->add_option("--v", cost_args.query.v, "vocabulary size")
            ->required();
        cmd->add_option("--k", cost_args.query.k, "top-k size")
            ->capture_default_str();
        int d = 0;
        CLI::Option* d_opt = cmd->add_option(
            "--d", d, "embedding size (enables the image-assisted row)");
        cmd->add_option("--n", cost_args.query.n,
                        "replica count for the stochastic row")
            ->capture_default_str();
        cmd->add_option("--beta-max", cost_args.query.beta_max,
                        "largest usable logit bias")
            ->capture_default_str();
        cmd->add_option("--epsilon", cost_args.query.epsilon,
                        "logit-gap resolution for the logprob-free row")
            ->capture_default_str();
        cmd->add_option("--price-per-call", cost_args.query.price_per_call,
                        "USD per API call")
            ->capture_default_str();
        cmd->add_flag("--json", cost_args.as_json, "print JSON instead of a "
                                                   "table");
        cmd->add_option("--out", cost_args.out, "also write a CSV here");
        cmd->callback([&, d_opt] {
            if (d_opt->count() > 0) cost_args.query.d = d;
            rc = cmd_cost(cost_args);
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s [%s]\n", e.what(),
                     error_code_name(e.code()));
        return error_exit_code(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return rc;
}
