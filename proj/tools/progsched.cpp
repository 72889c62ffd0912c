#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "progsched/experiment.hpp"
#include "progsched/gateway.hpp"
#include "progsched/workload.hpp"

using namespace progsched;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open " + path);
    return json::parse(in);
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text << "\n";
        return;
    }
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::ConfigError, "cannot write " + path);
    out << text << "\n";
}

// "const", "geo:<base>", "exp:<rate>".
DecaySpec parse_decay(const std::string& s) {
    if (s == "const" || s == "constant") return DecaySpec::constant1();
    const auto colon = s.find(':');
    const auto kind = s.substr(0, colon);
    const double param = colon == std::string::npos ? 0.0 : std::stod(s.substr(colon + 1));
    if (kind == "geo" || kind == "geometric") return DecaySpec::geometric(colon == std::string::npos ? 2.0 : param);
    if (kind == "exp" || kind == "exponential") return DecaySpec::exponential(colon == std::string::npos ? 1.0 : param);
    throw Error(ErrorCode::ConfigError, "unknown decay '" + s + "' (expected const, geo:<base> or exp:<rate>)");
}

// Experiment flags shared by run and sweep. Unset flags keep the value from
// --spec (or the built-in default).
struct SpecFlags {
    std::string spec_path;
    std::string preset;
    std::string trace;
    std::optional<std::size_t> n_programs;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> concurrency;
    std::optional<bool> recycle;
    std::string policy;
    std::optional<std::size_t> backends;
    std::optional<TokenCount> capacity;
    std::optional<Tick> duration;
    std::optional<Tick> delta_t;
    std::optional<TokenCount> chunk;
    std::optional<double> lambda_max;
    std::optional<double> lambda_min;
    std::string decay;
    std::optional<Tick> ttl;
    bool async_prep = false;
    std::string out;

    void add_to(CLI::App* app, bool with_policy) {
        app->add_option("--spec", spec_path, "ExperimentSpec JSON file used as the base");
        app->add_option("--preset", preset, "mini-swe | heavy-init | stochastic-tools");
        app->add_option("--trace", trace, "load this trace file instead of generating one");
        app->add_option("-n,--programs", n_programs, "programs in the generated trace");
        app->add_option("--seed", seed, "trace seed");
        if (with_policy) {
            app->add_option("-c,--concurrency", concurrency, "closed-loop concurrency N");
            app->add_option("--policy", policy, "program-aware | pinned | request-aware | ttl-pin");
        }
        app->add_option("--recycle", recycle, "wrap the trace when exhausted");
        app->add_option("--backends", backends, "backend replicas");
        app->add_option("--capacity", capacity, "KV capacity per backend in tokens");
        app->add_option("--duration", duration, "tick budget");
        app->add_option("--delta-t", delta_t, "scheduler period in ticks");
        app->add_option("--chunk", chunk, "KV allocation chunk in tokens");
        app->add_option("--lambda-max", lambda_max, "high watermark");
        app->add_option("--lambda-min", lambda_min, "low watermark");
        app->add_option("--decay", decay, "const | geo:<base> | exp:<rate>");
        app->add_option("--ttl", ttl, "constant pin TTL for ttl-pin");
        app->add_flag("--async-prep", async_prep, "prepare tool environments ahead of restore");
        app->add_option("-o,--out", out, "output directory");
    }

    ExperimentSpec build() const {
        ExperimentSpec s = spec_path.empty() ? ExperimentSpec{} : spec_from_json(read_json(spec_path));
        if (!preset.empty()) s.preset = preset;
        if (!trace.empty()) s.trace_path = trace;
        if (n_programs) s.n_programs = *n_programs;
        if (seed) s.seed = *seed;
        if (concurrency) s.arrival.concurrency = *concurrency;
        if (recycle) s.arrival.recycle = *recycle;
        if (!policy.empty()) s.sim.policy = policy_from_string(policy);
        if (backends) s.sim.backends = *backends;
        if (capacity) s.sim.capacity = *capacity;
        if (duration) s.sim.duration = *duration;
        if (delta_t) s.sim.scheduler.delta_t = *delta_t;
        if (chunk) s.sim.scheduler.chunk = *chunk;
        if (lambda_max) s.sim.scheduler.lambda_max = *lambda_max;
        if (lambda_min) s.sim.scheduler.lambda_min = *lambda_min;
        if (!decay.empty()) s.sim.scheduler.decay = parse_decay(decay);
        if (ttl) s.sim.ttl.constant = *ttl;
        if (async_prep) s.sim.async_prep = true;
        if (!out.empty()) s.output_dir = out;
        return s;
    }
};

void print_verdicts(const Comparison& c) {
    std::cout << c.table();
    for (const auto& v : c.verdicts) {
        std::cout << (v.pass ? "PASS " : "FAIL ") << v.name << ": " << v.detail << "\n";
    }
}

std::atomic<bool> g_stop{false};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Program-aware scheduling engine: simulator, experiment harness and gateway"};
    app.require_subcommand(1);

    // gen-trace
    auto* gen = app.add_subcommand("gen-trace", "Generate a reproducible workload trace");
    std::string gen_preset = "mini-swe";
    std::size_t gen_n = 96;
    std::uint64_t gen_seed = 7;
    std::string gen_out = "-";
    std::optional<TokenCount> gen_prefix;
    gen->add_option("--preset", gen_preset, "mini-swe | heavy-init | stochastic-tools");
    gen->add_option("-n,--programs", gen_n, "number of programs");
    gen->add_option("--seed", gen_seed, "seed");
    gen->add_option("--shared-prefix", gen_prefix, "tokens of system prompt shared by every program");
    gen->add_option("-o,--out", gen_out, "output file ('-' for stdout)");

    // run
    auto* run = app.add_subcommand("run", "Run one experiment on the simulator");
    SpecFlags run_flags;
    run_flags.add_to(run, true);

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Run a policy x concurrency grid and compare");
    SpecFlags sweep_flags;
    sweep_flags.add_to(sweep, false);
    std::vector<std::string> sweep_policies{"program-aware", "request-aware"};
    std::vector<std::size_t> sweep_n{8, 16, 32, 64, 96};
    unsigned sweep_workers = 0;
    std::optional<std::size_t> sweep_sat;
    sweep->add_option("--policies", sweep_policies, "policies to compare")->delimiter(',');
    sweep->add_option("--concurrency", sweep_n, "concurrency levels")->delimiter(',');
    sweep->add_option("--workers", sweep_workers, "parallel runs (0: hardware threads)");
    sweep->add_option("--saturation-n", sweep_sat, "stability is checked at N >= 2x this");

    // compare
    auto* cmp = app.add_subcommand("compare", "Compare summary.json files from earlier runs");
    std::vector<std::string> cmp_files;
    std::optional<std::size_t> cmp_sat;
    cmp->add_option("summaries", cmp_files, "summary.json files")->required();
    cmp->add_option("--saturation-n", cmp_sat, "stability is checked at N >= 2x this");

    // serve
    auto* serve = app.add_subcommand("serve", "Run the gateway over simulated backends");
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t serve_backends = 2;
    TokenCount serve_capacity = 65536;
    int tick_ms = 100;
    int park_ms = 30000;
    Tick serve_delta = 5;
    std::string serve_decay = "const";
    std::vector<std::string> upstreams;
    serve->add_option("--host", host, "bind address");
    serve->add_option("--port", port, "bind port");
    serve->add_option("--backends", serve_backends, "simulated backends");
    serve->add_option("--capacity", serve_capacity, "KV capacity per backend in tokens");
    serve->add_option("--tick-ms", tick_ms, "wall-clock milliseconds per tick");
    serve->add_option("--park-timeout-ms", park_ms, "how long a paused program's request may wait");
    serve->add_option("--delta-t", serve_delta, "scheduler period in ticks");
    serve->add_option("--decay", serve_decay, "const | geo:<base> | exp:<rate>");
    serve->add_option("--upstream", upstreams, "real completion endpoints (http://host:port) instead of simulated ones");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            TraceOptions o = preset_options(gen_preset);
            if (gen_prefix) o.shared_prefix = *gen_prefix;
            write_text(gen_out, to_json(generate_trace(o, gen_n, gen_seed)).dump(2));
            return 0;
        }
        if (*run) {
            const auto report = run_experiment(run_flags.build());
            std::cout << summary_json(report).dump(2) << "\n";
            return 0;
        }
        if (*sweep) {
            std::vector<PolicyKind> policies;
            for (const auto& p : sweep_policies) policies.push_back(policy_from_string(p));
            const auto reports = run_sweep(sweep_flags.build(), policies, sweep_n, sweep_workers);
            CompareOptions opts;
            opts.saturation_n = sweep_sat;
            const auto c = compare(reports, opts);
            print_verdicts(c);
            return c.all_pass() ? 0 : 1;
        }
        if (*cmp) {
            std::vector<json> summaries;
            for (const auto& f : cmp_files) summaries.push_back(read_json(f));
            CompareOptions opts;
            opts.saturation_n = cmp_sat;
            const auto c = compare_summaries(summaries, opts);
            print_verdicts(c);
            return c.all_pass() ? 0 : 1;
        }
        if (*serve) {
            GatewayConfig cfg;
            cfg.scheduler.delta_t = serve_delta;
            cfg.scheduler.decay = parse_decay(serve_decay);
            cfg.park_timeout = std::chrono::milliseconds(park_ms);
            std::vector<std::unique_ptr<CompletionBackend>> backends;
            if (upstreams.empty()) {
                for (std::size_t i = 0; i < serve_backends; ++i) {
                    backends.push_back(std::make_unique<SimCompletionBackend>("sim-" + std::to_string(i), serve_capacity));
                }
            } else {
                for (const auto& u : upstreams) backends.push_back(std::make_unique<HttpCompletionBackend>(u, serve_capacity));
            }
            Gateway gateway(cfg, std::move(backends));
            gateway.start_clock(std::chrono::milliseconds(tick_ms));
            GatewayServer server(gateway);
            const int bound = server.start(host, port);
            std::cerr << "gateway listening on " << host << ":" << bound << "\n";
            std::signal(SIGINT, [](int) { g_stop = true; });
            std::signal(SIGTERM, [](int) { g_stop = true; });
            while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
            server.stop();
            gateway.stop_clock();
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
