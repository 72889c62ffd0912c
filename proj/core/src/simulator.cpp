#include "progsched/simulator.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "progsched/rng.hpp"
#include "progsched/tool_manager.hpp"

namespace progsched {

std::string_view to_string(PolicyKind p) noexcept {
    switch (p) {
        case PolicyKind::ProgramAware: return "program-aware";
        case PolicyKind::PinnedRouting: return "pinned";
        case PolicyKind::RequestAware: return "request-aware";
        case PolicyKind::TtlPin: return "ttl-pin";
    }
    return "unknown";
}

PolicyKind policy_from_string(std::string_view s) {
    for (auto p : {PolicyKind::ProgramAware, PolicyKind::PinnedRouting, PolicyKind::RequestAware, PolicyKind::TtlPin}) {
        if (s == to_string(p)) return p;
    }
    throw Error(ErrorCode::InvalidArgument,
                "unknown policy '" + std::string(s) + "' (expected program-aware, pinned, request-aware or ttl-pin)");
}

void SimConfig::validate() const {
    scheduler.validate();
    if (backends < 1) throw Error(ErrorCode::ConfigError, "need at least one backend");
    if (capacity <= 0) throw Error(ErrorCode::ConfigError, "backend capacity must be > 0");
    if (scheduler.chunk > capacity) throw Error(ErrorCode::ConfigError, "prefill chunk exceeds backend capacity");
    if (duration < 0) throw Error(ErrorCode::ConfigError, "duration must be >= 0");
    if (ticks_per_minute <= 0) throw Error(ErrorCode::ConfigError, "ticks_per_minute must be > 0");
    if (disk_capacity < 0 || port_last < port_first) throw Error(ErrorCode::ConfigError, "invalid resource pools");
    if (ttl.constant < 0 || ttl.initial < 0) throw Error(ErrorCode::ConfigError, "TTL estimates must be >= 0");
}

namespace {

struct ProgState {
    const TraceProgram* script = nullptr;
    std::size_t step = 0;
    TokenCount decode_left = 0;
    TokenCount computed = 0;  // tokens whose KV was produced at some point
    TokenCount admit_h = 0;
    TokenCount admit_k = 0;
    Tick step_start = 0;
    Tick call_tick = 0;
    bool reasoning_evicted = false;  // lost its cache while Reasoning
    bool reasoning_paused = false;   // paused while Reasoning, not yet re-admitted
    std::optional<BackendId> released_on;
    std::optional<BackendId> bound;
    bool live = true;
    ProgramOutcome outcome;
};

class Cluster {
public:
    Cluster(const WorkloadTrace& trace, const SimConfig& cfg)
        : trace_(trace),
          cfg_(cfg),
          log_(cfg.keep_events, cfg.event_stream),
          tm_(ResourcePools::make(cfg.disk_capacity, cfg.port_first, cfg.port_last)),
          queues_(cfg.backends),
          placed_(cfg.backends),
          stalled_(cfg.backends, 0),
          unused_acc_(cfg.backends, 0),
          cmin_(cfg.backends),
          left_(cfg.backends, false),
          prev_totals_(cfg.backends) {
        const bool aware = scheduled();
        SimBackend::Options o;
        o.shared_prefix = trace.shared_prefix_tokens;
        o.capacity = cfg.capacity;
        o.chunk = cfg.scheduler.chunk;
        if (aware) {
            // Without decay every placed program keeps its memory reserved,
            // so the engine never drops an idle cache on its own.
            o.pressure = PressureMode::Stall;
            o.evict_idle = cfg.scheduler.decay.kind() != DecaySpec::Kind::Constant1;
        } else {
            o.pressure = PressureMode::PreemptLatest;
            o.evict_idle = true;
        }
        for (std::size_t b = 0; b < cfg.backends; ++b) {
            o.id = static_cast<BackendId>(b);
            backends_.emplace_back(o);
            ledgers_.emplace_back(cfg.retain_samples);
        }
    }

    RunResult run();

private:
    bool scheduled() const {
        return cfg_.policy == PolicyKind::ProgramAware || cfg_.policy == PolicyKind::PinnedRouting;
    }
    GlobalWaitQueue& queue_for(const ProgState& st) {
        return cfg_.policy == PolicyKind::PinnedRouting ? queues_[*st.bound] : queues_[0];
    }
    std::size_t lookahead() const { return cfg_.prep_lookahead ? cfg_.prep_lookahead : cfg_.backends * 2; }

    bool more_to_arrive() const {
        if (trace_.arrival.kind == ArrivalSpec::Kind::ClosedLoop && trace_.arrival.recycle) return true;
        return next_ < trace_.programs.size();
    }

    void arrive(Tick now);
    void admit(const ProgramId& id, ProgState& st, BackendId b, Tick now);
    void pause_program(const ProgramId& id, ProgState& st, BackendId b, Tick now);
    void restore_program(const ProgramId& id, ProgState& st, BackendId b, Tick now);
    void tool_call(const ProgramId& id, ProgState& st, Tick now);
    bool start_tool(const ProgramId& id, ProgState& st, Tick now);
    void tool_done(const ProgramId& id, Tick now);
    void finish(const ProgramId& id, ProgState& st, Tick now);
    void prepare(const ProgramId& id, ProgState& st, Tick now);
    void schedule(Tick now);
    void advance_backends(Tick now);
    void account(Tick now);
    void close_audit(Tick now);
    void close_interval(Tick now);
    Tick predicted_ttl() const;

    const WorkloadTrace& trace_;
    SimConfig cfg_;
    EventLog log_;
    std::vector<SimBackend> backends_;
    std::vector<CostLedger> ledgers_;
    ProgramRegistry registry_;
    ToolManager tm_;
    std::vector<GlobalWaitQueue> queues_;  // one shared queue unless pinned
    std::vector<std::set<ProgramId>> placed_;
    std::map<ProgramId, ProgState> states_;
    std::multimap<Tick, ProgramId> completions_;
    std::vector<ProgramId> blocked_;  // tool calls waiting for disk or a port
    std::vector<TokenCount> stalled_;
    Rng rng_{0};

    std::size_t next_ = 0;
    std::size_t arrivals_ = 0;
    std::size_t live_ = 0;
    std::int64_t steps_ = 0;
    std::vector<Tick> step_latency_;
    Tick observed_sum_ = 0;
    std::int64_t observed_n_ = 0;

    std::vector<TokenTicks> unused_acc_;
    std::vector<std::optional<TokenCount>> cmin_;
    std::vector<bool> left_;
    Tick audit_from_ = 0;
    std::vector<ComponentTotals> prev_totals_;
    double tick_imbalance_max_ = 0.0;
    bool arrived_now_ = false;

    RunResult res_;
};

void Cluster::arrive(Tick now) {
    const std::size_t n = trace_.programs.size();
    const std::size_t idx = next_++;
    const TraceProgram& tp = trace_.programs[idx % n];
    std::string id = tp.id;
    if (idx >= n) id += "~" + std::to_string(idx / n);
    const ProgramId pid(id);
    registry_.create_program(pid, tp.prompt_tokens, {tp.profile}, now);

    ProgState st;
    st.script = &tp;
    st.decode_left = tp.steps.front().reasoning_tokens;
    st.step_start = now;
    st.outcome.id = id;
    st.outcome.arrival = now;
    st.outcome.scripted_tokens = tp.scripted_tokens();
    const auto& prof = trace_.profile(tp.profile);
    st.outcome.prep_latency = prof.prep_latency;
    st.outcome.disk_units = prof.disk_units;
    res_.max_footprint = std::max(res_.max_footprint, prof.disk_units);

    const auto nb = cfg_.backends;
    if (cfg_.policy == PolicyKind::PinnedRouting) {
        st.bound = static_cast<BackendId>(cfg_.routing == Routing::Hash ? fnv1a(id) % nb : arrivals_ % nb);
    } else if (!scheduled()) {
        st.bound = static_cast<BackendId>(arrivals_ % nb);
    }
    ++arrivals_;
    ++live_;
    arrived_now_ = true;
    res_.max_concurrency = std::max(res_.max_concurrency, live_);
    log_.append({now, SimEventKind::ProgramArrived, id, st.bound, tp.prompt_tokens});

    auto [it, _] = states_.emplace(pid, std::move(st));
    ProgState& s = it->second;
    if (scheduled()) {
        queue_for(s).upsert(view_of(registry_.get(pid)));
    } else {
        // Request-level engines have no program queue: every program is
        // active from the start and its turns queue inside the engine.
        registry_.apply(pid, event::RestoreGranted{*s.bound}, now);
        if (cfg_.async_prep) prepare(pid, s, now);
        const auto& p = registry_.get(pid);
        backends_[*s.bound].submit(pid, p.context_tokens, s.computed, s.decode_left);
        s.computed = p.context_tokens;
    }
}

void Cluster::prepare(const ProgramId& id, ProgState& st, Tick now) {
    const auto& prof = trace_.profile(st.script->profile);
    if (prof.prep_latency == 0 || tm_.find_env(id, prof.name) != nullptr) return;
    try {
        tm_.prepare_async(id, {prof.name, prof.disk_units, prof.prep_latency}, now);
        st.outcome.prep_started = now;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::DiskExhausted && e.code() != ErrorCode::PortsExhausted) throw;
    }
}

void Cluster::admit(const ProgramId& id, ProgState& st, BackendId b, Tick now) {
    const auto& p = registry_.get(id);
    const ResumeOutcome out = backends_[b].admit(id, p.context_tokens, st.computed, st.decode_left, now, ledgers_[b], log_);
    st.admit_h = st.computed;
    st.admit_k = out.cached;
    st.computed = p.context_tokens;
    if (out.recompute > 0) {
        if (st.reasoning_evicted) {
            res_.reasoning_eviction_recompute += out.recompute;
            ++res_.reasoning_evictions;
        } else if (st.reasoning_paused) {
            res_.reasoning_pause_recompute += out.recompute;
        }
    }
    st.reasoning_evicted = false;
    st.reasoning_paused = false;
}

void Cluster::pause_program(const ProgramId& id, ProgState& st, BackendId b, Tick now) {
    auto& be = backends_[b];
    const auto& p = registry_.get(id);
    const bool had_job = be.has_job(id);
    // The cache stays resident but becomes the first thing the replica
    // reclaims; restoring here before that reuses it.
    const TokenCount processed = be.release(id, now, log_);
    if (had_job) st.computed = std::max(st.admit_h, std::min(p.context_tokens, st.admit_k + processed));
    if (p.status.kind == StatusKind::Reasoning) st.reasoning_paused = true;
    registry_.apply(id, event::PauseRequested{}, now);
    placed_[b].erase(id);
    st.released_on = b;
    queue_for(st).upsert(view_of(registry_.get(id)));
    ++res_.pauses;
    log_.append({now, SimEventKind::Paused, id.value, b, registry_.get(id).context_tokens});
}

void Cluster::restore_program(const ProgramId& id, ProgState& st, BackendId b, Tick now) {
    registry_.apply(id, event::RestoreGranted{b}, now);
    queue_for(st).erase(id);
    // Caches are node-local: a copy left on another replica is useless.
    if (st.released_on && *st.released_on != b) backends_[*st.released_on].drop(id, now, log_);
    if (st.released_on && *st.released_on == b) backends_[b].retain(id);
    st.released_on.reset();
    placed_[b].insert(id);
    ++res_.restores;
    const auto& p = registry_.get(id);
    log_.append({now, SimEventKind::Restored, id.value, b, p.context_tokens});
    if (cfg_.async_prep) prepare(id, st, now);
    // An Acting program only regains its slot; its prefill waits for the
    // tool result.
    if (p.phase == ProgramPhase::Reasoning) admit(id, st, b, now);
}

Tick Cluster::predicted_ttl() const {
    if (cfg_.ttl.kind == TtlEstimator::Kind::Constant) return cfg_.ttl.constant;
    if (observed_n_ == 0) return cfg_.ttl.initial;
    return (observed_sum_ + observed_n_ / 2) / observed_n_;
}

void Cluster::tool_call(const ProgramId& id, ProgState& st, Tick now) {
    registry_.apply(id, event::ToolCallIssued{st.script->profile}, now);
    ++steps_;
    st.call_tick = now;
    if (!st.outcome.first_call) st.outcome.first_call = now;
    log_.append({now, SimEventKind::ToolCallIssued, id.value, registry_.get(id).placement, 0});
    if (cfg_.policy == PolicyKind::TtlPin) backends_[*st.bound].pin_until(id, now + predicted_ttl());
    if (!start_tool(id, st, now)) blocked_.push_back(id);
}

bool Cluster::start_tool(const ProgramId& id, ProgState& st, Tick now) {
    const auto& prof = trace_.profile(st.script->profile);
    const ToolEnvironment* env = tm_.find_env(id, prof.name);
    if (env == nullptr) {
        try {
            env = &tm_.acquire_env(id, {prof.name, prof.disk_units, prof.prep_latency}, now);
            if (!st.outcome.prep_started) st.outcome.prep_started = now;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DiskExhausted && e.code() != ErrorCode::PortsExhausted) throw;
            return false;
        }
    }
    // Blocks for whatever preparation is still outstanding.
    const Tick start = std::max(now, env->ready_at);
    const Tick latency = st.script->steps[st.step].tool_latency;
    const Tick done = tm_.execute_tool(env->env_id, id, sampler::Deterministic{latency}, rng_, start);
    completions_.emplace(done, id);
    return true;
}

void Cluster::tool_done(const ProgramId& id, Tick now) {
    ProgState& st = states_.at(id);
    if (!st.live) return;
    const TraceStep& step = st.script->steps[st.step];
    registry_.apply(id, event::ToolResultReady{step.result_tokens}, now);
    step_latency_.push_back(now - st.step_start);
    st.step_start = now;
    if (st.step == 0) st.outcome.first_step_done = now;
    observed_sum_ += now - st.call_tick;
    ++observed_n_;
    log_.append({now, SimEventKind::ToolResultReady, id.value, registry_.get(id).placement, step.result_tokens});

    if (++st.step == st.script->steps.size()) {
        finish(id, st, now);
        return;
    }
    st.decode_left = st.script->steps[st.step].reasoning_tokens;
    const auto& p = registry_.get(id);
    if (scheduled()) {
        if (p.status.kind == StatusKind::Paused) {
            queue_for(st).upsert(view_of(p));
        } else {
            admit(id, st, *p.placement, now);
        }
    } else {
        auto& be = backends_[*st.bound];
        be.unpin(id);
        be.submit(id, p.context_tokens, st.computed, st.decode_left);
        st.computed = p.context_tokens;
    }
}

void Cluster::finish(const ProgramId& id, ProgState& st, Tick now) {
    registry_.apply(id, event::ReleaseRequested{}, now);
    for (std::size_t b = 0; b < backends_.size(); ++b) {
        if (placed_[b].erase(id) || backends_[b].resident(id) > 0 || backends_[b].is_busy(id)) left_[b] = true;
        backends_[b].drop(id, now, log_);
        backends_[b].unpin(id);
    }
    if (scheduled()) queue_for(st).erase(id);
    if (cfg_.gc_hooks) tm_.release_hooks(registry_.get(id));
    st.live = false;
    st.outcome.finished = now;
    --live_;
    log_.append({now, SimEventKind::Released, id.value, std::nullopt, registry_.get(id).context_tokens});
    if (trace_.arrival.kind == ArrivalSpec::Kind::ClosedLoop && more_to_arrive()) arrive(now);
}

void Cluster::schedule(Tick now) {
    const std::size_t groups = cfg_.policy == PolicyKind::PinnedRouting ? backends_.size() : 1;
    for (std::size_t g = 0; g < groups; ++g) {
        ClusterSnapshot snap;
        snap.taken_at = now;
        for (std::size_t b = 0; b < backends_.size(); ++b) {
            if (groups > 1 && b != g) continue;
            BackendView v;
            v.id = static_cast<BackendId>(b);
            v.capacity = cfg_.capacity;
            v.healthy = backends_[b].healthy();
            v.stalled_tokens = stalled_[b];
            for (const auto& id : placed_[b]) v.programs.push_back(view_of(registry_.get(id)));
            snap.backends.push_back(std::move(v));
        }
        for (const auto& v : queues_[g].ordered()) {
            const ProgState& st = states_.at(v.id);
            std::optional<BackendId> warm;
            if (st.released_on && backends_[*st.released_on].resident(v.id) > 0) warm = st.released_on;
            if (warm != v.warm_on) {
                ProgramView u = v;
                u.warm_on = warm;
                queues_[g].upsert(u);
            }
        }
        const DecisionBatch batch = schedule_tick(snap, queues_[g], cfg_.scheduler, now);
        for (const auto& d : batch.decisions) {
            ProgState& st = states_.at(d.program);
            if (d.kind == ScheduleDecision::Kind::Pause) {
                pause_program(d.program, st, d.backend, now);
            } else if (d.kind == ScheduleDecision::Kind::Restore) {
                restore_program(d.program, st, d.backend, now);
            }
        }
        if (cfg_.async_prep) {
            const auto order = queues_[g].ordered();
            const std::size_t k = std::min(order.size(), groups > 1 ? std::max<std::size_t>(1, lookahead() / groups)
                                                                    : lookahead());
            for (std::size_t i = 0; i < k; ++i) prepare(order[i].id, states_.at(order[i].id), now);
        }
    }
}

void Cluster::advance_backends(Tick now) {
    for (std::size_t b = 0; b < backends_.size(); ++b) {
        AdvanceResult r = backends_[b].advance(now, ledgers_[b], log_);
        stalled_[b] = r.stalled_tokens;
        res_.stalled_token_ticks += r.stalled_tokens;
        for (const auto& id : r.decoded) {
            registry_.apply(id, event::TokensDecoded{1}, now);
            ProgState& st = states_.at(id);
            --st.decode_left;
            ++st.computed;
        }
        for (const auto& id : r.segment_done) tool_call(id, states_.at(id), now);
        auto note_loss = [&](const ProgramId& id) {
            if (registry_.get(id).status.kind == StatusKind::Reasoning) states_.at(id).reasoning_evicted = true;
        };
        for (const auto& id : r.evicted_idle) {
            ++res_.idle_evictions;
            note_loss(id);
        }
        for (const auto& id : r.preempted) {
            ++res_.preemptions;
            note_loss(id);
        }
        for (const auto& [id, out] : r.admitted) {
            ProgState& st = states_.at(id);
            if (st.reasoning_evicted && out.recompute > 0) {
                res_.reasoning_eviction_recompute += out.recompute;
                ++res_.reasoning_evictions;
            }
            st.reasoning_evicted = false;
        }
    }
}

void Cluster::account(Tick now) {
    std::vector<TokenCount> footprint;
    footprint.reserve(backends_.size());
    for (std::size_t b = 0; b < backends_.size(); ++b) {
        auto& be = backends_[b];
        if (be.resident_total() > be.capacity()) res_.pool_bound_held = false;

        // Idle KV held through a tool call; reclaimable leftovers are free.
        for (const auto& [id, tokens] : be.residents()) {
            if (tokens > 0 && !be.is_decoding(id) && !be.has_job(id) && be.holds_reserved(id, now)) {
                ledgers_[b].record({cfg_.retain_samples ? std::optional<ProgramId>(id) : std::nullopt,
                                    static_cast<BackendId>(b), CostComponent::Caching, tokens, 1});
            }
        }

        // Memory held for active work: placed programs' contexts under a
        // program scheduler, resident plus pending allocations otherwise.
        bool queued = false;
        TokenCount committed = 0;
        if (scheduled()) {
            queued = !queues_[cfg_.policy == PolicyKind::PinnedRouting ? b : 0].empty();
            for (const auto& id : placed_[b]) committed += registry_.get(id).context_tokens;
        } else {
            queued = be.waiting_count() > 0;
            committed = be.committed_total();
        }
        footprint.push_back(std::min(committed, be.capacity()));
        if (queued && be.healthy()) {
            const TokenCount unused = std::max<TokenCount>(0, be.capacity() - committed);
            if (unused > 0) {
                ledgers_[b].record({std::nullopt, static_cast<BackendId>(b), CostComponent::Unused, unused, 1});
            }
            unused_acc_[b] += unused;
        }
    }
    if (backends_.size() >= 2) {
        tick_imbalance_max_ = std::max(tick_imbalance_max_, imbalance_of(footprint, cfg_.capacity));
    }
    if (cfg_.audit_leaks) {
        const auto orphans = tm_.leak_audit(registry_).size();
        res_.max_orphans = std::max(res_.max_orphans, orphans);
        if (orphans > 0) ++res_.leak_ticks;
    }
    (void)now;
}

// The audit window runs from one scheduler pass to the next; passes fire
// on arrivals as well as on the period.
void Cluster::close_audit(Tick now) {
    const TokenTicks len = now - audit_from_;
    audit_from_ = now;
    if (len <= 0) return;
    for (std::size_t b = 0; b < backends_.size(); ++b) {
        if (scheduled() && cmin_[b]) {
            if (left_[b]) {
                ++res_.unused.intervals_excluded;
            } else {
                ++res_.unused.intervals_checked;
                const TokenTicks bound = *cmin_[b] * len;
                if (unused_acc_[b] >= bound) {
                    if (res_.unused.violations++ == 0) {
                        res_.unused.first_violation = "backend " + std::to_string(b) + " interval ending " +
                                                      std::to_string(now) + ": unused " +
                                                      std::to_string(unused_acc_[b]) + " >= " + std::to_string(bound);
                    }
                }
                // Track the tightest interval as numerator / bound.
                if (unused_acc_[b] * res_.unused.worst_ratio_bound > res_.unused.worst_ratio_numerator * bound) {
                    res_.unused.worst_ratio_numerator = unused_acc_[b];
                    res_.unused.worst_ratio_bound = bound;
                }
            }
        }
        unused_acc_[b] = 0;
        left_[b] = false;
    }
}

void Cluster::close_interval(Tick now) {
    close_audit(now);
    for (std::size_t b = 0; b < backends_.size(); ++b) {
        IntervalRow row;
        row.tick = now;
        row.backend = static_cast<BackendId>(b);
        row.resident_tokens = backends_[b].resident_total();
        const ComponentTotals cur = ledgers_[b].decompose();
        for (auto c : kAllComponents) row.components[c] = cur[c] - prev_totals_[b][c];
        prev_totals_[b] = cur;
        const auto denom = ledgers_[b].hit_tokens() + ledgers_[b].miss_tokens();
        row.hit_rate = denom > 0 ? kv_hit_rate(ledgers_[b]) : 0.0;
        row.imbalance = tick_imbalance_max_;
        res_.intervals.push_back(row);
    }
    if (backends_.size() >= 2) res_.interval_imbalance.push_back(tick_imbalance_max_);
    tick_imbalance_max_ = 0.0;
    res_.disk_series.push_back(tm_.pools().disk_used);
}

RunResult Cluster::run() {
    const Tick dt = cfg_.scheduler.delta_t;
    const bool closed = trace_.arrival.kind == ArrivalSpec::Kind::ClosedLoop;
    Tick now = 0;
    for (; now < cfg_.duration; ++now) {
        if (closed) {
            while (now == 0 && live_ < trace_.arrival.concurrency && more_to_arrive()) arrive(now);
        } else {
            const Tick iv = trace_.arrival.interval;
            while (next_ < trace_.programs.size() && (iv == 0 ? now == 0 : static_cast<Tick>(next_) * iv == now)) {
                arrive(now);
            }
        }

        while (!completions_.empty() && completions_.begin()->first <= now) {
            const ProgramId id = completions_.begin()->second;
            completions_.erase(completions_.begin());
            tool_done(id, now);
        }
        if (!blocked_.empty()) {
            std::vector<ProgramId> still;
            for (const auto& id : blocked_) {
                ProgState& st = states_.at(id);
                if (st.live && !start_tool(id, st, now)) still.push_back(id);
            }
            blocked_ = std::move(still);
        }
        tm_.advance(now);

        const bool boundary = now % dt == 0;
        if (boundary && now > 0) close_interval(now);
        // New programs are admitted on arrival; everything else waits for
        // the periodic check.
        const bool pass = scheduled() && (boundary || arrived_now_ || cfg_.scheduler.decode_step_guard);
        if (pass) {
            if (!boundary) close_audit(now);
            schedule(now);
        }
        arrived_now_ = false;
        if (pass) {
            for (std::size_t b = 0; b < backends_.size(); ++b) {
                const auto& q = queues_[cfg_.policy == PolicyKind::PinnedRouting ? b : 0];
                cmin_[b] = q.min_context();
            }
        }

        advance_backends(now);
        account(now);

        if (cfg_.stop_when_done && live_ == 0 && !more_to_arrive()) {
            ++now;
            break;
        }
    }
    if (now > 0) close_interval(now);

    RunResult out = std::move(res_);
    out.ledger = CostLedger(cfg_.retain_samples);
    for (const auto& l : ledgers_) out.ledger.merge(l);
    out.event_hash = log_.hash();
    out.event_count = log_.size();
    out.events = log_.events();
    out.final_disk = tm_.pools().disk_used;

    MetricsReport& r = out.report;
    r.duration_ticks = now;
    r.total_steps = steps_;
    r.throughput_steps_per_min =
        now > 0 ? static_cast<double>(steps_) * static_cast<double>(cfg_.ticks_per_minute) / static_cast<double>(now)
                : 0.0;
    r.kv_hit_rate = out.ledger.hit_tokens() + out.ledger.miss_tokens() > 0 ? kv_hit_rate(out.ledger) : 0.0;
    for (double v : out.interval_imbalance) r.max_imbalance = std::max(r.max_imbalance, v);
    r.per_step_latency = summarize_latency(step_latency_);
    r.cost_breakdown = out.ledger.decompose();
    r.disk_peak = tm_.disk_peak();
    for (auto& [id, st] : states_) {
        st.outcome.steps = registry_.get(id).step_count;
        st.outcome.total_tokens = registry_.get(id).total_tokens;
        if (st.outcome.prep_started && st.outcome.first_call) {
            r.prep_overlap_savings +=
                std::min(st.outcome.prep_latency, *st.outcome.first_call - *st.outcome.prep_started);
        }
        out.programs.push_back(st.outcome);
    }
    std::sort(out.programs.begin(), out.programs.end(), [](const ProgramOutcome& a, const ProgramOutcome& b) {
        return a.arrival != b.arrival ? a.arrival < b.arrival : a.id < b.id;
    });
    return out;
}

}  // namespace

RunResult run_policy(const WorkloadTrace& trace, const SimConfig& config) {
    trace.validate();
    config.validate();
    Cluster cluster(trace, config);
    return cluster.run();
}

}  // namespace progsched
