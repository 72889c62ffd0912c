#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "progsched/simulator.hpp"
#include "progsched/workload.hpp"

namespace progsched {

struct ExperimentSpec {
    std::string preset = "mini-swe";
    std::size_t n_programs = 96;
    std::uint64_t seed = 7;
    std::string trace_path;  // load this trace instead of generating one
    ArrivalSpec arrival;
    SimConfig sim;           // stream and retention fields are not serialized
    std::string output_dir;  // empty: no files written
};

nlohmann::json to_json(const ExperimentSpec& spec);
// Missing keys keep their defaults; throws Error{ConfigError} on bad values.
ExperimentSpec spec_from_json(const nlohmann::json& j);
std::uint64_t spec_hash(const ExperimentSpec& spec);

// The trace the spec runs: loaded or generated, with the spec's arrival.
WorkloadTrace materialize_trace(const ExperimentSpec& spec);

struct ExperimentReport {
    ExperimentSpec spec;
    std::string preset;
    std::uint64_t spec_hash = 0;
    std::uint64_t event_hash = 0;
    std::uint64_t report_hash = 0;
    MetricsReport metrics;
    RunResult run;
};

nlohmann::json metrics_to_json(const MetricsReport& m);
nlohmann::json summary_json(const ExperimentReport& r);

// Runs one experiment. With an output directory, writes metrics.csv,
// summary.json and events.ndjson there.
ExperimentReport run_experiment(const ExperimentSpec& spec);

// One experiment per (policy, concurrency); runs execute concurrently on up
// to `workers` threads (0: hardware concurrency). Output directories get a
// per-run subdirectory.
std::vector<ExperimentReport> run_sweep(const ExperimentSpec& base, const std::vector<PolicyKind>& policies,
                                        const std::vector<std::size_t>& concurrency, unsigned workers = 0);

struct ComparisonRow {
    std::string policy;
    std::size_t concurrency = 0;
    std::uint64_t seed = 0;
    double steps_per_min = 0.0;
    double hit_rate = 0.0;
    double max_imbalance = 0.0;
    TokenTicks caching = 0;
    TokenTicks recompute = 0;
    double p95_latency = 0.0;
};

struct Verdict {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct CompareOptions {
    double stability_tolerance = 0.10;
    double replication_band = 0.05;
    // Stability is checked at N >= 2 * saturation_n; unset: every N above
    // the program-aware peak.
    std::optional<std::size_t> saturation_n;
};

struct Comparison {
    std::vector<ComparisonRow> rows;
    std::vector<Verdict> verdicts;

    bool all_pass() const;
    std::string table() const;
};

// Throws Error{IncomparableReports} when the reports mix trace presets.
Comparison compare(const std::vector<ExperimentReport>& reports, const CompareOptions& options = {});
Comparison compare_summaries(const std::vector<nlohmann::json>& summaries, const CompareOptions& options = {});

}  // namespace progsched
