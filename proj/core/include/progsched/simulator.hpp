#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "progsched/backend_sim.hpp"
#include "progsched/cost_ledger.hpp"
#include "progsched/scheduler.hpp"
#include "progsched/workload.hpp"

namespace progsched {

enum class PolicyKind {
    ProgramAware,   // global queue, pause/restore
    PinnedRouting,  // same scheduler, one queue per replica, program bound to its replica
    RequestAware,   // every turn is an independent request; LRU reuse of idle caches
    TtlPin,         // RequestAware plus a pin on the idle cache for a predicted tool time
};

std::string_view to_string(PolicyKind p) noexcept;
// Accepts "program-aware", "pinned", "request-aware", "ttl-pin"; throws
// Error{InvalidArgument}.
PolicyKind policy_from_string(std::string_view s);

struct TtlEstimator {
    enum class Kind { Constant, LaggedMean };
    Kind kind = Kind::Constant;
    Tick constant = 30;
    // LaggedMean: mean of tool latencies completed so far, `initial` before
    // the first observation.
    Tick initial = 30;
};

enum class Routing { Hash, RoundRobin };

struct SimConfig {
    PolicyKind policy = PolicyKind::ProgramAware;
    SchedulerConfig scheduler;
    std::size_t backends = 2;
    TokenCount capacity = 65536;
    Tick duration = 20000;
    Tick ticks_per_minute = 60;

    std::int64_t disk_capacity = 1'000'000;
    int port_first = 20000;
    int port_last = 29999;
    bool gc_hooks = true;
    bool async_prep = false;
    std::size_t prep_lookahead = 0;  // 0: backends * 2

    TtlEstimator ttl;
    Routing routing = Routing::Hash;

    // Stop before `duration` once every program has finished and none is
    // left to arrive.
    bool stop_when_done = true;
    // Run the tool-environment leak audit after every tick.
    bool audit_leaks = false;

    bool keep_events = false;
    std::ostream* event_stream = nullptr;
    bool retain_samples = false;

    // Throws Error{ConfigError}.
    void validate() const;
};

struct ProgramOutcome {
    std::string id;
    Tick arrival = 0;
    std::optional<Tick> finished;
    std::int64_t steps = 0;
    TokenCount total_tokens = 0;
    TokenCount scripted_tokens = 0;
    std::optional<Tick> first_call;        // first ToolCallIssued
    std::optional<Tick> first_step_done;   // first tool result
    std::optional<Tick> prep_started;
    Tick prep_latency = 0;
    std::int64_t disk_units = 0;
};

struct UnusedAudit {
    std::int64_t intervals_checked = 0;
    std::int64_t intervals_excluded = 0;  // a program left the replica mid-interval
    std::int64_t violations = 0;
    TokenTicks worst_ratio_numerator = 0;  // Unused of the tightest checked interval
    TokenTicks worst_ratio_bound = 1;      // its c_min * delta_t
    std::string first_violation;
};

struct RunResult {
    MetricsReport report;
    CostLedger ledger;
    std::uint64_t event_hash = 0;
    std::uint64_t event_count = 0;
    std::vector<SimEvent> events;
    std::vector<IntervalRow> intervals;
    std::vector<double> interval_imbalance;  // max over the ticks of each interval
    std::vector<std::int64_t> disk_series;   // disk in use at each interval boundary
    std::vector<ProgramOutcome> programs;

    bool pool_bound_held = true;
    // Re-prefill of KV the engine took from a Reasoning program (idle
    // reclaim or preemption), and the number of admissions that paid it.
    TokenCount reasoning_eviction_recompute = 0;
    std::int64_t reasoning_evictions = 0;
    // Re-prefill after the scheduler paused a Reasoning program.
    TokenCount reasoning_pause_recompute = 0;
    // Allocations the engine could not serve, summed over ticks.
    TokenTicks stalled_token_ticks = 0;
    UnusedAudit unused;
    std::size_t max_orphans = 0;
    std::int64_t leak_ticks = 0;
    std::int64_t final_disk = 0;
    std::size_t max_concurrency = 0;
    std::int64_t max_footprint = 0;  // largest single environment
    std::int64_t preemptions = 0;
    std::int64_t idle_evictions = 0;
    std::int64_t pauses = 0;
    std::int64_t restores = 0;
};

// Runs the trace under one policy. Deterministic: identical inputs give a
// bit-identical event log.
RunResult run_policy(const WorkloadTrace& trace, const SimConfig& config);

}  // namespace progsched
