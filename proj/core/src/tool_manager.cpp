#include "progsched/tool_manager.hpp"

#include <algorithm>
#include <cmath>

namespace progsched {

void validate_sampler(const LatencySampler& s) {
    if (const auto* d = std::get_if<sampler::Deterministic>(&s)) {
        if (d->ticks < 1) throw Error(ErrorCode::InvalidSpec, "deterministic latency must be >= 1 tick");
    } else if (const auto* e = std::get_if<sampler::Exponential>(&s)) {
        if (!(e->mean > 0.0)) throw Error(ErrorCode::InvalidSpec, "exponential mean must be > 0");
    } else if (const auto* h = std::get_if<sampler::HeavyTailed>(&s)) {
        if (!(h->p50 >= 1.0 && h->p50 <= h->p95 && h->p95 <= h->p99 && h->p99 <= h->cap)) {
            throw Error(ErrorCode::InvalidSpec, "heavy-tailed quantiles must satisfy 1 <= p50 <= p95 <= p99 <= cap");
        }
    }
}

namespace {

double log_lerp(double u, double u0, double x0, double u1, double x1) {
    const double w = (u - u0) / (u1 - u0);
    return std::exp(std::log(x0) + w * (std::log(x1) - std::log(x0)));
}

double heavy_tailed_quantile(const sampler::HeavyTailed& h, double u) {
    // The lower anchor sits at one tick so the body spans [1, p50].
    if (u < 0.5) return log_lerp(u, 0.0, 1.0, 0.5, h.p50);
    if (u < 0.95) return log_lerp(u, 0.5, h.p50, 0.95, h.p95);
    if (u < 0.99) return log_lerp(u, 0.95, h.p95, 0.99, h.p99);
    return log_lerp(u, 0.99, h.p99, 1.0, h.cap);
}

}  // namespace

Tick draw_latency(const LatencySampler& s, Rng& rng) {
    if (const auto* d = std::get_if<sampler::Deterministic>(&s)) return std::max<Tick>(1, d->ticks);
    if (const auto* e = std::get_if<sampler::Exponential>(&s)) {
        // Ceiling of an exponential is geometric, which keeps the integer
        // draws exactly memoryless.
        const double x = -e->mean * std::log1p(-rng.uniform());
        return std::max<Tick>(1, static_cast<Tick>(std::ceil(x)));
    }
    const auto& h = std::get<sampler::HeavyTailed>(s);
    return std::max<Tick>(1, static_cast<Tick>(std::llround(heavy_tailed_quantile(h, rng.uniform()))));
}

ResourcePools ResourcePools::make(std::int64_t disk_capacity, int port_first, int port_last) {
    if (disk_capacity < 0 || port_last < port_first) {
        throw Error(ErrorCode::ConfigError, "invalid resource pool bounds");
    }
    ResourcePools p;
    p.disk_capacity = disk_capacity;
    p.port_first = port_first;
    p.port_last = port_last;
    for (int port = port_first; port <= port_last; ++port) p.ports_free.insert(port);
    return p;
}

const ToolEnvironment& ToolManager::acquire_env(const ProgramId& owner, const EnvSpec& spec, Tick now) {
    if (spec.disk_units < 1 || spec.prep_latency < 0) {
        throw Error(ErrorCode::InvalidArgument, "environment needs disk_units >= 1 and prep_latency >= 0");
    }
    if (pools_.disk_used + spec.disk_units > pools_.disk_capacity) {
        throw Error(ErrorCode::DiskExhausted, "disk pool: " + std::to_string(pools_.disk_used) + "/" +
                                                  std::to_string(pools_.disk_capacity) + " units in use");
    }
    if (pools_.ports_free.empty()) {
        throw Error(ErrorCode::PortsExhausted, "port pool: no free port in [" + std::to_string(pools_.port_first) +
                                                   ", " + std::to_string(pools_.port_last) + "]");
    }
    ToolEnvironment env;
    env.env_id = "env-" + std::to_string(next_env_++);
    env.owner = owner;
    env.profile = spec.profile;
    env.disk_units = spec.disk_units;
    env.port = *pools_.ports_free.begin();
    pools_.ports_free.erase(pools_.ports_free.begin());
    env.prep_latency = spec.prep_latency;
    env.prep_started = now;
    env.ready_at = now + spec.prep_latency;
    env.status = spec.prep_latency == 0 ? PrepStatus::Ready : PrepStatus::Preparing;

    pools_.disk_used += spec.disk_units;
    disk_peak_ = std::max(disk_peak_, pools_.disk_used);
    auto [it, _] = envs_.emplace(env.env_id, std::move(env));
    return it->second;
}

const ToolEnvironment& ToolManager::prepare_async(const ProgramId& owner, const EnvSpec& spec, Tick now) {
    if (find_env(owner, spec.profile) != nullptr) {
        throw Error(ErrorCode::AlreadyPreparing, "program " + owner.value + " already has a " + spec.profile +
                                                     " environment");
    }
    return acquire_env(owner, spec, now);
}

const ToolEnvironment* ToolManager::find_env(const ProgramId& owner, const std::string& profile) const {
    for (const auto& [id, env] : envs_) {
        if (env.owner == owner && env.profile == profile && env.status != PrepStatus::Released) return &env;
    }
    return nullptr;
}

const ToolEnvironment* ToolManager::env(const std::string& env_id) const {
    auto it = envs_.find(env_id);
    return it == envs_.end() ? nullptr : &it->second;
}

Tick ToolManager::residual_wait(const std::string& env_id, Tick now) const {
    const auto* e = env(env_id);
    if (e == nullptr || e->status == PrepStatus::Released) return 0;
    return std::max<Tick>(0, e->ready_at - now);
}

void ToolManager::advance(Tick now) {
    for (auto& [id, env] : envs_) {
        if (env.status == PrepStatus::Preparing && env.ready_at <= now) env.status = PrepStatus::Ready;
    }
}

Tick ToolManager::execute_tool(const std::string& env_id, const ProgramId& caller, const LatencySampler& s,
                               Rng& rng, Tick now) {
    auto it = envs_.find(env_id);
    if (it == envs_.end() || it->second.status == PrepStatus::Released) {
        throw Error(ErrorCode::EnvNotReady, "environment " + env_id + " does not exist");
    }
    auto& e = it->second;
    if (e.owner != caller) {
        throw Error(ErrorCode::WrongOwner, "environment " + env_id + " belongs to " + e.owner.value);
    }
    if (e.status == PrepStatus::Preparing && e.ready_at <= now) e.status = PrepStatus::Ready;
    if (e.status != PrepStatus::Ready) {
        throw Error(ErrorCode::EnvNotReady, "environment " + env_id + " ready in " +
                                                std::to_string(e.ready_at - now) + " ticks");
    }
    return now + draw_latency(s, rng);
}

Reclaimed ToolManager::release_hooks(const AgentProgram& program) {
    if (program.status.kind != StatusKind::Stopped) {
        throw Error(ErrorCode::ProgramStillActive, "program " + program.id.value + " is " +
                                                       std::string(to_string(program.status.kind)));
    }
    Reclaimed r;
    for (auto& [id, env] : envs_) {
        if (env.owner != program.id || env.status == PrepStatus::Released) continue;
        if (failing_.erase(id)) continue;
        pools_.disk_used -= env.disk_units;
        r.disk_units += env.disk_units;
        if (env.port) {
            pools_.ports_free.insert(*env.port);
            env.port.reset();
            ++r.ports;
        }
        env.disk_units = 0;
        env.status = PrepStatus::Released;
        ++r.environments;
    }
    return r;
}

std::vector<Orphan> ToolManager::leak_audit(const ProgramRegistry& registry) const {
    std::vector<Orphan> out;
    for (const auto& [id, env] : envs_) {
        if (env.status == PrepStatus::Released) continue;
        const auto* owner = registry.find(env.owner);
        if (owner != nullptr && owner->status.kind == StatusKind::Stopped) {
            out.push_back({id, env.owner, env.disk_units});
        }
    }
    return out;
}

std::size_t ToolManager::live_count() const {
    return static_cast<std::size_t>(std::count_if(envs_.begin(), envs_.end(), [](const auto& kv) {
        return kv.second.status != PrepStatus::Released;
    }));
}

}  // namespace progsched
