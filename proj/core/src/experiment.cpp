#include "progsched/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <sstream>
#include <thread>

#include "progsched/rng.hpp"

namespace progsched {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string decay_kind_name(DecaySpec::Kind k) {
    switch (k) {
        case DecaySpec::Kind::Constant1: return "constant";
        case DecaySpec::Kind::Geometric: return "geometric";
        case DecaySpec::Kind::Exponential: return "exponential";
    }
    return "constant";
}

}  // namespace

json to_json(const ExperimentSpec& s) {
    const auto& sc = s.sim.scheduler;
    json decay = {{"kind", decay_kind_name(sc.decay.kind())}};
    if (sc.decay.kind() == DecaySpec::Kind::Geometric) decay["base"] = sc.decay.parameter();
    if (sc.decay.kind() == DecaySpec::Kind::Exponential) decay["rate"] = sc.decay.parameter();
    return {
        {"preset", s.preset},
        {"n_programs", s.n_programs},
        {"seed", s.seed},
        {"trace_path", s.trace_path},
        {"arrival",
         {{"kind", s.arrival.kind == ArrivalSpec::Kind::ClosedLoop ? "closed-loop" : "open-loop"},
          {"concurrency", s.arrival.concurrency},
          {"recycle", s.arrival.recycle},
          {"interval", s.arrival.interval}}},
        {"policy", std::string(to_string(s.sim.policy))},
        {"scheduler",
         {{"delta_t", sc.delta_t},
          {"lambda_max", sc.lambda_max},
          {"lambda_min", sc.lambda_min},
          {"decay", decay},
          {"chunk", sc.chunk},
          {"decode_step_guard", sc.decode_step_guard}}},
        {"backends", s.sim.backends},
        {"capacity", s.sim.capacity},
        {"duration", s.sim.duration},
        {"ticks_per_minute", s.sim.ticks_per_minute},
        {"pools", {{"disk_capacity", s.sim.disk_capacity}, {"port_first", s.sim.port_first}, {"port_last", s.sim.port_last}}},
        {"gc_hooks", s.sim.gc_hooks},
        {"async_prep", s.sim.async_prep},
        {"prep_lookahead", s.sim.prep_lookahead},
        {"ttl",
         {{"kind", s.sim.ttl.kind == TtlEstimator::Kind::Constant ? "constant" : "lagged-mean"},
          {"constant", s.sim.ttl.constant},
          {"initial", s.sim.ttl.initial}}},
        {"routing", s.sim.routing == Routing::Hash ? "hash" : "round-robin"},
        {"stop_when_done", s.sim.stop_when_done},
        {"output_dir", s.output_dir},
    };
}

ExperimentSpec spec_from_json(const json& j) {
    ExperimentSpec s;
    try {
        s.preset = j.value("preset", s.preset);
        s.n_programs = j.value("n_programs", s.n_programs);
        s.seed = j.value("seed", s.seed);
        s.trace_path = j.value("trace_path", s.trace_path);
        if (j.contains("arrival")) {
            const auto& a = j["arrival"];
            s.arrival.kind = a.value("kind", std::string("closed-loop")) == "open-loop" ? ArrivalSpec::Kind::OpenLoop
                                                                                        : ArrivalSpec::Kind::ClosedLoop;
            s.arrival.concurrency = a.value("concurrency", s.arrival.concurrency);
            s.arrival.recycle = a.value("recycle", s.arrival.recycle);
            s.arrival.interval = a.value("interval", s.arrival.interval);
        }
        if (j.contains("policy")) s.sim.policy = policy_from_string(j["policy"].get<std::string>());
        if (j.contains("scheduler")) {
            const auto& c = j["scheduler"];
            auto& sc = s.sim.scheduler;
            sc.delta_t = c.value("delta_t", sc.delta_t);
            sc.lambda_max = c.value("lambda_max", sc.lambda_max);
            sc.lambda_min = c.value("lambda_min", sc.lambda_min);
            sc.chunk = c.value("chunk", sc.chunk);
            sc.decode_step_guard = c.value("decode_step_guard", sc.decode_step_guard);
            if (c.contains("decay")) {
                const auto& d = c["decay"];
                const auto kind = d.value("kind", std::string("geometric"));
                if (kind == "constant") {
                    sc.decay = DecaySpec::constant1();
                } else if (kind == "geometric") {
                    sc.decay = DecaySpec::geometric(d.value("base", 2.0));
                } else if (kind == "exponential") {
                    sc.decay = DecaySpec::exponential(d.value("rate", 1.0));
                } else {
                    throw Error(ErrorCode::ConfigError, "unknown decay kind '" + kind + "'");
                }
            }
        }
        s.sim.backends = j.value("backends", s.sim.backends);
        s.sim.capacity = j.value("capacity", s.sim.capacity);
        s.sim.duration = j.value("duration", s.sim.duration);
        s.sim.ticks_per_minute = j.value("ticks_per_minute", s.sim.ticks_per_minute);
        if (j.contains("pools")) {
            const auto& p = j["pools"];
            s.sim.disk_capacity = p.value("disk_capacity", s.sim.disk_capacity);
            s.sim.port_first = p.value("port_first", s.sim.port_first);
            s.sim.port_last = p.value("port_last", s.sim.port_last);
        }
        s.sim.gc_hooks = j.value("gc_hooks", s.sim.gc_hooks);
        s.sim.async_prep = j.value("async_prep", s.sim.async_prep);
        s.sim.prep_lookahead = j.value("prep_lookahead", s.sim.prep_lookahead);
        if (j.contains("ttl")) {
            const auto& t = j["ttl"];
            s.sim.ttl.kind = t.value("kind", std::string("constant")) == "lagged-mean" ? TtlEstimator::Kind::LaggedMean
                                                                                       : TtlEstimator::Kind::Constant;
            s.sim.ttl.constant = t.value("constant", s.sim.ttl.constant);
            s.sim.ttl.initial = t.value("initial", s.sim.ttl.initial);
        }
        if (j.contains("routing")) s.sim.routing = j["routing"] == "round-robin" ? Routing::RoundRobin : Routing::Hash;
        s.sim.stop_when_done = j.value("stop_when_done", s.sim.stop_when_done);
        s.output_dir = j.value("output_dir", s.output_dir);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("experiment spec: ") + e.what());
    } catch (const Error& e) {
        if (e.code() == ErrorCode::InvalidSpec || e.code() == ErrorCode::InvalidArgument) {
            throw Error(ErrorCode::ConfigError, e.what());
        }
        throw;
    }
    return s;
}

std::uint64_t spec_hash(const ExperimentSpec& spec) {
    json j = to_json(spec);
    j.erase("output_dir");  // where results land does not change them
    return fnv1a(j.dump());
}

WorkloadTrace materialize_trace(const ExperimentSpec& spec) {
    WorkloadTrace t;
    if (!spec.trace_path.empty()) {
        std::ifstream in(spec.trace_path);
        if (!in) throw Error(ErrorCode::ConfigError, "cannot open trace " + spec.trace_path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw Error(ErrorCode::InvalidSpec, std::string("malformed trace: ") + e.what());
        }
        t = trace_from_json(j);
    } else {
        t = generate_trace(spec.preset, spec.n_programs, spec.seed);
    }
    t.arrival = spec.arrival;
    return t;
}

json metrics_to_json(const MetricsReport& m) {
    json breakdown;
    for (auto c : kAllComponents) breakdown[std::string(to_string(c))] = m.cost_breakdown[c];
    return {
        {"throughput_steps_per_min", m.throughput_steps_per_min},
        {"kv_hit_rate", m.kv_hit_rate},
        {"max_imbalance", m.max_imbalance},
        {"per_step_latency",
         {{"count", m.per_step_latency.count},
          {"mean", m.per_step_latency.mean},
          {"p50", m.per_step_latency.p50},
          {"p95", m.per_step_latency.p95},
          {"p99", m.per_step_latency.p99}}},
        {"cost_breakdown", breakdown},
        {"cost_total", m.cost_breakdown.total()},
        {"disk_peak", m.disk_peak},
        {"prep_overlap_savings", m.prep_overlap_savings},
        {"total_steps", m.total_steps},
        {"duration_ticks", m.duration_ticks},
    };
}

namespace {

char hex_digit(unsigned v) { return static_cast<char>(v < 10 ? '0' + v : 'a' + v - 10); }

std::string hex64(std::uint64_t v) {
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = hex_digit(static_cast<unsigned>(v & 0xF));
    return s;
}

json summary_body(const ExperimentReport& r) {
    return {
        {"preset", r.preset},
        {"policy", std::string(to_string(r.spec.sim.policy))},
        {"concurrency", r.spec.arrival.concurrency},
        {"seed", r.spec.seed},
        {"spec", to_json(r.spec)},
        {"spec_hash", hex64(r.spec_hash)},
        {"event_hash", hex64(r.event_hash)},
        {"metrics", metrics_to_json(r.metrics)},
    };
}

}  // namespace

json summary_json(const ExperimentReport& r) {
    json j = summary_body(r);
    j["report_hash"] = hex64(r.report_hash);
    return j;
}

ExperimentReport run_experiment(const ExperimentSpec& spec) {
    ExperimentReport r;
    r.spec = spec;
    r.spec_hash = spec_hash(spec);
    const WorkloadTrace trace = materialize_trace(spec);
    r.preset = trace.preset;

    SimConfig cfg = spec.sim;
    std::ofstream events;
    if (!spec.output_dir.empty()) {
        fs::create_directories(spec.output_dir);
        events.open(fs::path(spec.output_dir) / "events.ndjson");
        if (!events) throw Error(ErrorCode::ConfigError, "cannot write to " + spec.output_dir);
        cfg.event_stream = &events;
    }
    r.run = run_policy(trace, cfg);
    r.metrics = r.run.report;
    r.event_hash = r.run.event_hash;
    r.report_hash = fnv1a(summary_body(r).dump());

    if (!spec.output_dir.empty()) {
        std::ofstream csv(fs::path(spec.output_dir) / "metrics.csv");
        write_csv_header(csv);
        for (const auto& row : r.run.intervals) write_csv_row(csv, row);
        std::ofstream summary(fs::path(spec.output_dir) / "summary.json");
        summary << summary_json(r).dump(2) << '\n';
    }
    return r;
}

std::vector<ExperimentReport> run_sweep(const ExperimentSpec& base, const std::vector<PolicyKind>& policies,
                                        const std::vector<std::size_t>& concurrency, unsigned workers) {
    std::vector<ExperimentSpec> specs;
    for (auto p : policies) {
        for (auto n : concurrency) {
            ExperimentSpec s = base;
            s.sim.policy = p;
            s.arrival.concurrency = n;
            if (!base.output_dir.empty()) {
                s.output_dir = (fs::path(base.output_dir) / (std::string(to_string(p)) + "-n" + std::to_string(n))).string();
            }
            specs.push_back(std::move(s));
        }
    }
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<ExperimentReport> out(specs.size());
    std::size_t next = 0;
    while (next < specs.size()) {
        std::vector<std::future<ExperimentReport>> batch;
        for (unsigned w = 0; w < workers && next < specs.size(); ++w, ++next) {
            batch.push_back(std::async(std::launch::async, [&specs, i = next] { return run_experiment(specs[i]); }));
        }
        const std::size_t first = next - batch.size();
        for (std::size_t i = 0; i < batch.size(); ++i) out[first + i] = batch[i].get();
    }
    return out;
}

bool Comparison::all_pass() const {
    return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.pass; });
}

std::string Comparison::table() const {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-14s %6s %6s %12s %9s %10s %14s %14s %9s\n", "policy", "N", "seed", "steps/min",
                  "hit_rate", "imbalance", "caching", "recompute", "p95_lat");
    os << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-14s %6zu %6llu %12.2f %9.4f %10.4f %14lld %14lld %9.1f\n", r.policy.c_str(),
                      r.concurrency, static_cast<unsigned long long>(r.seed), r.steps_per_min, r.hit_rate,
                      r.max_imbalance, static_cast<long long>(r.caching), static_cast<long long>(r.recompute),
                      r.p95_latency);
        os << buf;
    }
    for (const auto& v : verdicts) os << (v.pass ? "PASS " : "FAIL ") << v.name << ": " << v.detail << '\n';
    return os.str();
}

Comparison compare(const std::vector<ExperimentReport>& reports, const CompareOptions& options) {
    std::vector<json> summaries;
    summaries.reserve(reports.size());
    for (const auto& r : reports) summaries.push_back(summary_json(r));
    return compare_summaries(summaries, options);
}

Comparison compare_summaries(const std::vector<json>& summaries, const CompareOptions& options) {
    Comparison out;
    if (summaries.empty()) return out;
    const std::string preset = summaries.front().at("preset").get<std::string>();
    for (const auto& s : summaries) {
        const auto p = s.at("preset").get<std::string>();
        if (p != preset) {
            throw Error(ErrorCode::IncomparableReports, "reports mix trace presets '" + preset + "' and '" + p + "'");
        }
        const auto& m = s.at("metrics");
        ComparisonRow row;
        row.policy = s.at("policy").get<std::string>();
        row.concurrency = s.at("concurrency").get<std::size_t>();
        row.seed = s.at("seed").get<std::uint64_t>();
        row.steps_per_min = m.at("throughput_steps_per_min").get<double>();
        row.hit_rate = m.at("kv_hit_rate").get<double>();
        row.max_imbalance = m.at("max_imbalance").get<double>();
        row.caching = m.at("cost_breakdown").at("caching").get<TokenTicks>();
        row.recompute = m.at("cost_breakdown").at("recompute").get<TokenTicks>();
        row.p95_latency = m.at("per_step_latency").at("p95").get<double>();
        out.rows.push_back(row);
    }
    std::sort(out.rows.begin(), out.rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
        return std::tie(a.policy, a.concurrency, a.seed) < std::tie(b.policy, b.concurrency, b.seed);
    });
    if (out.rows.size() < 2) return out;

    char buf[256];
    const std::string aware(to_string(PolicyKind::ProgramAware));
    // (policy, N) -> mean steps/min over seeds
    std::map<std::pair<std::string, std::size_t>, std::vector<double>> by_key;
    for (const auto& r : out.rows) by_key[{r.policy, r.concurrency}].push_back(r.steps_per_min);
    auto mean_of = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };

    // Stability of the program-aware curve.
    std::vector<std::pair<std::size_t, double>> curve;
    for (const auto& [k, v] : by_key) {
        if (k.first == aware) curve.emplace_back(k.second, mean_of(v));
    }
    if (curve.size() >= 2) {
        auto peak = std::max_element(curve.begin(), curve.end(),
                                     [](const auto& a, const auto& b) { return a.second < b.second; });
        const std::size_t from = options.saturation_n ? 2 * *options.saturation_n : peak->first + 1;
        bool pass = true;
        std::string detail;
        std::snprintf(buf, sizeof buf, "peak %.2f at N=%zu;", peak->second, peak->first);
        detail = buf;
        for (const auto& [n, v] : curve) {
            if (n < from) continue;
            const bool ok = v >= (1.0 - options.stability_tolerance) * peak->second;
            pass = pass && ok;
            std::snprintf(buf, sizeof buf, " N=%zu %.2f (%.1f%%)", n, v, 100.0 * v / peak->second);
            detail += buf;
        }
        out.verdicts.push_back({"stability " + aware, pass, detail});
    }

    // Ordering against every other policy at shared concurrency levels.
    std::map<std::string, std::vector<std::size_t>> others;
    for (const auto& [k, v] : by_key) {
        if (k.first != aware && by_key.count({aware, k.second})) others[k.first].push_back(k.second);
    }
    for (const auto& [policy, ns] : others) {
        bool pass = true;
        std::string detail;
        for (auto n : ns) {
            const double a = mean_of(by_key[{aware, n}]);
            const double o = mean_of(by_key[{policy, n}]);
            pass = pass && a > o;
            std::snprintf(buf, sizeof buf, " N=%zu %.2f vs %.2f;", n, a, o);
            detail += buf;
        }
        out.verdicts.push_back({"ordering " + aware + " > " + policy, pass, detail});
    }

    // Replication across seeds.
    for (const auto& [k, v] : by_key) {
        if (v.size() < 2) continue;
        const double m = mean_of(v);
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        const bool pass = m > 0 ? std::max(m - *lo, *hi - m) / m <= options.replication_band : *hi == *lo;
        std::snprintf(buf, sizeof buf, "%zu seeds, min %.2f max %.2f mean %.2f", v.size(), *lo, *hi, m);
        out.verdicts.push_back({"replication " + k.first + " N=" + std::to_string(k.second), pass, buf});
    }
    return out;
}

}  // namespace progsched
