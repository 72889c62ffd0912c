#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "progsched/program.hpp"
#include "progsched/rng.hpp"

namespace progsched {

namespace sampler {
struct Deterministic {
    Tick ticks = 1;
};
struct Exponential {
    double mean = 1.0;
};
// Piecewise log-linear inverse CDF through (0.5, p50), (0.95, p95),
// (0.99, p99) with the tail capped at `cap`.
struct HeavyTailed {
    double p50 = 1.0;
    double p95 = 1.0;
    double p99 = 1.0;
    double cap = 1.0;
};
}  // namespace sampler

using LatencySampler = std::variant<sampler::Deterministic, sampler::Exponential, sampler::HeavyTailed>;

// Validates sampler parameters; throws Error{InvalidSpec}.
void validate_sampler(const LatencySampler& s);

// Every draw is at least one tick.
Tick draw_latency(const LatencySampler& s, Rng& rng);

enum class PrepStatus { Preparing, Ready, Released };

struct EnvSpec {
    std::string profile;
    std::int64_t disk_units = 1;
    Tick prep_latency = 0;
};

struct ToolEnvironment {
    std::string env_id;
    ProgramId owner;
    std::string profile;
    std::int64_t disk_units = 0;
    std::optional<int> port;
    PrepStatus status = PrepStatus::Preparing;
    Tick ready_at = 0;
    Tick prep_latency = 0;
    Tick prep_started = 0;
};

struct ResourcePools {
    std::int64_t disk_capacity = 0;
    std::int64_t disk_used = 0;
    int port_first = 20000;
    int port_last = 20999;
    std::set<int> ports_free;

    static ResourcePools make(std::int64_t disk_capacity, int port_first, int port_last);
};

struct Reclaimed {
    std::int64_t disk_units = 0;
    std::int64_t ports = 0;
    std::int64_t environments = 0;

    bool operator==(const Reclaimed&) const = default;
};

struct Orphan {
    std::string env_id;
    ProgramId owner;
    std::int64_t disk_units = 0;
};

class ToolManager {
public:
    explicit ToolManager(ResourcePools pools) : pools_(std::move(pools)) {}

    // Claims disk and a port; the environment is Preparing until
    // now + prep_latency. Throws DiskExhausted / PortsExhausted.
    const ToolEnvironment& acquire_env(const ProgramId& owner, const EnvSpec& spec, Tick now);

    // Starts preparing the owner's environment ahead of its restore. Throws
    // Error{AlreadyPreparing} if it already has a live environment for
    // `spec.profile`.
    const ToolEnvironment& prepare_async(const ProgramId& owner, const EnvSpec& spec, Tick now);

    // Live (non-Released) environment of `owner` for `profile`, if any.
    const ToolEnvironment* find_env(const ProgramId& owner, const std::string& profile) const;
    const ToolEnvironment* env(const std::string& env_id) const;

    // Ticks the owner would still block on before the environment is usable.
    Tick residual_wait(const std::string& env_id, Tick now) const;

    // Promotes Preparing environments whose ready_at has passed.
    void advance(Tick now);

    // Returns the completion tick of one tool call. Throws EnvNotReady (with
    // the residual wait in the message) or WrongOwner.
    Tick execute_tool(const std::string& env_id, const ProgramId& caller, const LatencySampler& s, Rng& rng,
                      Tick now);

    // Reclaims every environment owned by a Stopped program. Throws
    // ProgramStillActive otherwise; a second call reclaims nothing.
    Reclaimed release_hooks(const AgentProgram& program);

    // Stopped owners whose environments were never released.
    std::vector<Orphan> leak_audit(const ProgramRegistry& registry) const;

    // Test hook: the next release of this environment fails silently.
    void inject_release_failure(const std::string& env_id) { failing_.insert(env_id); }

    const ResourcePools& pools() const noexcept { return pools_; }
    std::int64_t disk_peak() const noexcept { return disk_peak_; }
    std::size_t live_count() const;
    const std::map<std::string, ToolEnvironment>& environments() const noexcept { return envs_; }

private:
    ResourcePools pools_;
    std::map<std::string, ToolEnvironment> envs_;
    std::set<std::string> failing_;
    std::uint64_t next_env_ = 0;
    std::int64_t disk_peak_ = 0;
};

}  // namespace progsched
