#include "progsched/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace progsched {

DecaySpec DecaySpec::geometric(double base) {
    if (!(base > 1.0) || !std::isfinite(base)) {
        throw Error(ErrorCode::InvalidSpec, "geometric decay base must be > 1");
    }
    return DecaySpec(Kind::Geometric, base);
}

DecaySpec DecaySpec::exponential(double rate) {
    if (!(rate > 0.0) || !std::isfinite(rate)) {
        throw Error(ErrorCode::InvalidSpec, "exponential decay rate must be > 0");
    }
    return DecaySpec(Kind::Exponential, rate);
}

double DecaySpec::operator()(double t) const {
    switch (kind_) {
        case Kind::Constant1: return 1.0;
        case Kind::Geometric: return std::pow(param_, -t);
        case Kind::Exponential: return std::exp(-param_ * t);
    }
    return 1.0;
}

double decay_eval(const DecaySpec& spec, double elapsed) {
    if (elapsed < 0 || std::isnan(elapsed)) throw Error(ErrorCode::InvalidArgument, "elapsed time must be >= 0");
    return spec(elapsed);
}

void SchedulerConfig::validate() const {
    if (delta_t < 1) throw Error(ErrorCode::ConfigError, "delta_t must be >= 1");
    if (!(lambda_min > 0.0) || lambda_min > lambda_max || lambda_max > 1.0) {
        throw Error(ErrorCode::ConfigError, "watermarks must satisfy 0 < lambda_min <= lambda_max <= 1");
    }
    if (chunk < 1) throw Error(ErrorCode::ConfigError, "chunk must be >= 1");
}

ProgramView view_of(const AgentProgram& p) {
    ProgramView v;
    v.id = p.id;
    v.context_tokens = p.context_tokens;
    v.phase = p.phase;
    v.status = p.status.kind;
    v.acting_since = p.status.acting_since;
    v.paused_since = p.status.paused_since;
    v.placement = p.placement;
    return v;
}

double effective_weight(const ProgramView& p, const DecaySpec& decay, Tick now) {
    const auto c = static_cast<double>(p.context_tokens);
    if (p.phase == ProgramPhase::Reasoning) return c;
    const Tick elapsed = std::max<Tick>(0, now - p.acting_since);
    return c * decay(static_cast<double>(elapsed));
}

double effective_load(std::span<const ProgramView> programs, const DecaySpec& decay, Tick now) {
    double load = 0.0;
    for (const auto& p : programs) load += effective_weight(p, decay, now);
    return load;
}

double thrashing_pressure(TokenCount capacity, double load, double lambda_max) {
    if (capacity <= 0) throw Error(ErrorCode::InvalidArgument, "capacity must be > 0");
    return std::max(0.0, load - lambda_max * static_cast<double>(capacity));
}

namespace {
double inverse_size(TokenCount c) {
    // A zero-token program gets the largest finite size score.
    return c > 0 ? 1.0 / static_cast<double>(c) : 1.0;
}
}  // namespace

double restore_score(TokenCount c, ProgramPhase phase) {
    return inverse_size(c) + (phase == ProgramPhase::Reasoning ? 1.0 : 0.0);
}

double pause_score(TokenCount c, ProgramPhase phase) {
    return inverse_size(c) + (phase == ProgramPhase::Acting ? 1.0 : 0.0);
}

EvictionResult select_evictions(std::vector<EvictionCandidate> candidates, double required) {
    EvictionResult out;
    if (required <= 0.0) return out;
    // Tier first, then size; comparing tiers and sizes directly keeps the
    // order exact where the additive score would round.
    std::sort(candidates.begin(), candidates.end(), [](const EvictionCandidate& a, const EvictionCandidate& b) {
        if (a.phase != b.phase) return a.phase == ProgramPhase::Acting;
        if (a.context_tokens != b.context_tokens) return a.context_tokens < b.context_tokens;
        if (a.acting_since != b.acting_since) return a.acting_since > b.acting_since;
        return a.id < b.id;
    });
    double released = 0.0;
    std::vector<const EvictionCandidate*> picked;
    for (const auto& c : candidates) {
        if (released >= required) break;
        picked.push_back(&c);
        released += c.released();
    }
    if (released < required) {
        out.shortfall = required - released;
    } else {
        // A large final pick can make earlier small ones redundant; drop
        // them, latest pick first, so no program is paused needlessly.
        for (auto i = picked.size(); i-- > 0;) {
            if (released - picked[i]->released() >= required) {
                released -= picked[i]->released();
                picked[i] = nullptr;
            }
        }
    }
    for (const auto* c : picked) {
        if (c != nullptr) out.selected.push_back(c->id);
    }
    return out;
}

AgentProgram pause(const AgentProgram& program, Tick now) {
    return apply_event(program, event::PauseRequested{}, now);
}

AgentProgram restore(const AgentProgram& program, const BackendLoad& target, const SchedulerConfig& config,
                     Tick now) {
    if (program.status.kind != StatusKind::Paused) {
        return apply_event(program, event::RestoreGranted{target.id}, now);  // throws
    }
    const double weight = effective_weight(view_of(program), config.decay, now);
    const double limit = config.lambda_max * static_cast<double>(target.capacity);
    if (target.effective_load + weight > limit) {
        throw Error(ErrorCode::CapacityExceeded,
                    "program " + program.id.value + " does not fit under the high watermark of backend " +
                        std::to_string(target.id));
    }
    return apply_event(program, event::RestoreGranted{target.id}, now);
}

bool restore_before(const ProgramView& a, const ProgramView& b) {
    if (a.phase != b.phase) return a.phase == ProgramPhase::Reasoning;
    if (a.context_tokens != b.context_tokens) return a.context_tokens < b.context_tokens;
    if (a.paused_since != b.paused_since) return a.paused_since < b.paused_since;
    return a.id < b.id;
}

void GlobalWaitQueue::upsert(const ProgramView& p) {
    auto it = entries_.find(p.id);
    if (it == entries_.end()) {
        entries_.emplace(p.id, Entry{p, 0});
    } else {
        it->second.view = p;
    }
}

bool GlobalWaitQueue::erase(const ProgramId& id) { return entries_.erase(id) != 0; }

std::vector<ProgramView> GlobalWaitQueue::ordered() const {
    std::vector<ProgramView> out;
    out.reserve(entries_.size());
    for (const auto& [id, e] : entries_) out.push_back(e.view);
    std::sort(out.begin(), out.end(), restore_before);
    return out;
}

std::optional<TokenCount> GlobalWaitQueue::min_context() const {
    std::optional<TokenCount> best;
    for (const auto& [id, e] : entries_) {
        if (!best || e.view.context_tokens < *best) best = e.view.context_tokens;
    }
    return best;
}

std::int64_t GlobalWaitQueue::starvation(const ProgramId& id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? 0 : it->second.starved;
}

void GlobalWaitQueue::note_oversized(const ProgramId& id) {
    auto it = entries_.find(id);
    if (it != entries_.end()) ++it->second.starved;
}

DecisionBatch schedule_tick(const ClusterSnapshot& cluster, GlobalWaitQueue& queue, const SchedulerConfig& config,
                            Tick now) {
    DecisionBatch batch;
    // A program paused in this pass may move to another replica at once,
    // but never straight back to the one it left.
    std::map<ProgramId, BackendId> paused_from;

    struct Load {
        BackendId id;
        double capacity;
        double load;
    };
    std::vector<Load> loads;

    for (const auto& b : cluster.backends) {
        if (!b.healthy) continue;
        double load = effective_load(b.programs, config.decay, now);
        const double pressure =
            thrashing_pressure(b.capacity, load + static_cast<double>(b.stalled_tokens), config.lambda_max);
        if (pressure > 0.0) {
            std::vector<EvictionCandidate> cands;
            cands.reserve(b.programs.size());
            for (const auto& p : b.programs) {
                cands.push_back({p.id, p.context_tokens, p.phase, p.acting_since, effective_weight(p, config.decay, now)});
            }
            const auto result = select_evictions(std::move(cands), pressure);
            for (const auto& id : result.selected) {
                batch.decisions.push_back({ScheduleDecision::Kind::Pause, id, b.id});
                paused_from.emplace(id, b.id);
                for (const auto& p : b.programs) {
                    if (p.id == id) load -= effective_weight(p, config.decay, now);
                }
            }
        }
        loads.push_back({b.id, static_cast<double>(b.capacity), std::max(0.0, load)});
    }

    if (loads.empty() || (queue.empty() && paused_from.empty())) return batch;

    double max_limit = 0.0;
    for (const auto& l : loads) max_limit = std::max(max_limit, config.lambda_max * l.capacity);

    // Every queued program that fits somewhere is placed, not only the head:
    // a large head must not strand capacity a smaller program could use.
    std::vector<ProgramView> pending = queue.ordered();
    for (const auto& [id, from] : paused_from) {
        for (const auto& b : cluster.backends) {
            for (const auto& p : b.programs) {
                if (p.id != id) continue;
                ProgramView v = p;
                v.status = StatusKind::Paused;
                v.paused_since = now;
                v.placement.reset();
                pending.push_back(v);
            }
        }
    }
    std::sort(pending.begin(), pending.end(), restore_before);
    for (const auto& p : pending) {
        const double w = effective_weight(p, config.decay, now);
        if (w > max_limit) {
            queue.note_oversized(p.id);
            batch.oversized.push_back(p.id);
            continue;
        }
        const auto from = paused_from.find(p.id);
        Load* best = nullptr;
        for (auto& l : loads) {
            if (from != paused_from.end() && from->second == l.id) continue;
            if (l.load >= config.lambda_min * l.capacity) continue;
            if (l.load + w > config.lambda_max * l.capacity) continue;
            if (p.warm_on == l.id) {
                best = &l;
                break;
            }
            if (best == nullptr || l.load < best->load) best = &l;
        }
        if (best == nullptr) continue;
        best->load += w;
        batch.decisions.push_back({ScheduleDecision::Kind::Restore, p.id, best->id});
    }
    return batch;
}

}  // namespace progsched
