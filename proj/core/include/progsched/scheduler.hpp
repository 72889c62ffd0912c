#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "progsched/program.hpp"

namespace progsched {

// Time-decay applied to an Acting program's tokens in the capacity check,
// as a function of elapsed ticks in the current tool call.
class DecaySpec {
public:
    enum class Kind { Constant1, Geometric, Exponential };

    static DecaySpec constant1() { return DecaySpec(Kind::Constant1, 0.0); }
    // f(t) = base^-t; base must exceed 1.
    static DecaySpec geometric(double base);
    // f(t) = exp(-rate * t); rate must be positive.
    static DecaySpec exponential(double rate);

    Kind kind() const noexcept { return kind_; }
    double parameter() const noexcept { return param_; }

    double operator()(double elapsed) const;

    bool operator==(const DecaySpec&) const = default;

private:
    DecaySpec(Kind k, double p) : kind_(k), param_(p) {}
    Kind kind_;
    double param_;
};

// Throws Error{InvalidArgument} for negative t.
double decay_eval(const DecaySpec& spec, double elapsed);

struct SchedulerConfig {
    Tick delta_t = 5;
    double lambda_max = 1.0;
    double lambda_min = 1.0;
    DecaySpec decay = DecaySpec::geometric(2.0);
    TokenCount chunk = 256;
    // Optional per-decode-step guard; off by default.
    bool decode_step_guard = false;

    // Throws Error{ConfigError}.
    void validate() const;
};

// Scheduler-facing projection of a program.
struct ProgramView {
    ProgramId id;
    TokenCount context_tokens = 0;
    ProgramPhase phase = ProgramPhase::Reasoning;
    StatusKind status = StatusKind::Paused;
    Tick acting_since = 0;
    Tick paused_since = 0;
    std::optional<BackendId> placement;
    // Paused program whose KV is still resident on this replica; restore
    // prefers it over the least-loaded one when both pass the watermarks.
    std::optional<BackendId> warm_on;
};

ProgramView view_of(const AgentProgram& p);

struct BackendView {
    BackendId id = 0;
    TokenCount capacity = 0;
    bool healthy = true;
    std::vector<ProgramView> programs;  // placed here, status Reasoning|Acting
    // Allocation demand the replica could not serve at its last step. Added
    // to the pressure so a pool that is exactly full and stalled still
    // releases something.
    TokenCount stalled_tokens = 0;
};

struct ClusterSnapshot {
    Tick taken_at = 0;
    std::vector<BackendView> backends;
};

// Weight of one placed program in the capacity check.
double effective_weight(const ProgramView& p, const DecaySpec& decay, Tick now);

// Sum of Reasoning contexts plus decayed Acting contexts.
double effective_load(std::span<const ProgramView> programs, const DecaySpec& decay, Tick now);

// Tokens that must be released to get back under the high watermark.
double thrashing_pressure(TokenCount capacity, double effective_load, double lambda_max);

double restore_score(TokenCount context_tokens, ProgramPhase phase);
double pause_score(TokenCount context_tokens, ProgramPhase phase);

struct EvictionCandidate {
    ProgramId id;
    TokenCount context_tokens = 0;
    ProgramPhase phase = ProgramPhase::Acting;
    Tick acting_since = 0;
    // Amount the candidate removes from the effective load; defaults to its
    // full context when negative.
    double weight = -1.0;

    double released() const { return weight < 0 ? static_cast<double>(context_tokens) : weight; }
};

struct EvictionResult {
    std::vector<ProgramId> selected;
    // Uncovered remainder when every candidate together falls short.
    double shortfall = 0.0;
};

// Shortest-first within tier, Acting tier before Reasoning tier, until the
// released amount covers `required`; picks the rest already cover are then
// dropped. Equal sizes pause the most recent tool call first, then by id.
EvictionResult select_evictions(std::vector<EvictionCandidate> candidates, double required);

// Transitions for the Pause and Restore primitives. restore() enforces that
// the target stays at or under lambda_max * capacity.
AgentProgram pause(const AgentProgram& program, Tick now);

struct BackendLoad {
    BackendId id = 0;
    TokenCount capacity = 0;
    double effective_load = 0.0;
};

AgentProgram restore(const AgentProgram& program, const BackendLoad& target, const SchedulerConfig& config,
                     Tick now);

// Paused programs across all backends, ordered by restore score (desc),
// then paused_since, then id.
class GlobalWaitQueue {
public:
    void upsert(const ProgramView& p);
    bool erase(const ProgramId& id);
    bool contains(const ProgramId& id) const { return entries_.count(id) != 0; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::vector<ProgramView> ordered() const;
    std::optional<TokenCount> min_context() const;

    // Times the entry was found larger than every backend's watermark.
    std::int64_t starvation(const ProgramId& id) const;
    void note_oversized(const ProgramId& id);

private:
    struct Entry {
        ProgramView view;
        std::int64_t starved = 0;
    };
    std::map<ProgramId, Entry> entries_;
};

bool restore_before(const ProgramView& a, const ProgramView& b);

struct ScheduleDecision {
    enum class Kind { Pause, Restore, Noop };
    Kind kind = Kind::Noop;
    ProgramId program;
    BackendId backend = 0;

    bool operator==(const ScheduleDecision&) const = default;
};

struct DecisionBatch {
    std::vector<ScheduleDecision> decisions;
    // Queued programs whose context exceeds every backend's high watermark.
    std::vector<ProgramId> oversized;

    bool is_noop() const { return decisions.empty(); }
};

// One monitor pass: pause on every backend under pressure, then restore from
// the queue onto the least-loaded backend below the low watermark that keeps
// the restored program under the high watermark. Pure: the caller applies
// the decisions. `queue` is only updated for oversize bookkeeping.
DecisionBatch schedule_tick(const ClusterSnapshot& cluster, GlobalWaitQueue& queue,
                            const SchedulerConfig& config, Tick now);

}  // namespace progsched
