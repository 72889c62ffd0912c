#include "progsched/backend_sim.hpp"

#include <algorithm>
#include <cassert>
#include <tuple>
#include <ostream>

#include "progsched/rng.hpp"

namespace progsched {

std::string_view to_string(SimEventKind k) noexcept {
    switch (k) {
        case SimEventKind::ProgramArrived: return "ProgramArrived";
        case SimEventKind::PrefillChunkDone: return "PrefillChunkDone";
        case SimEventKind::DecodeToken: return "DecodeToken";
        case SimEventKind::StepEmissionComplete: return "StepEmissionComplete";
        case SimEventKind::ToolCallIssued: return "ToolCallIssued";
        case SimEventKind::ToolResultReady: return "ToolResultReady";
        case SimEventKind::EvictionPerformed: return "EvictionPerformed";
        case SimEventKind::Preempted: return "Preempted";
        case SimEventKind::ResumeHit: return "ResumeHit";
        case SimEventKind::ResumeMiss: return "ResumeMiss";
        case SimEventKind::Paused: return "Paused";
        case SimEventKind::Restored: return "Restored";
        case SimEventKind::Released: return "Released";
    }
    return "Unknown";
}

std::string to_ndjson(const SimEvent& ev) {
    // Program ids are generated identifiers; only quote and backslash need
    // escaping.
    std::string prog;
    prog.reserve(ev.program.size());
    for (char ch : ev.program) {
        if (ch == '"' || ch == '\\') prog.push_back('\\');
        prog.push_back(ch);
    }
    std::string out = "{\"tick\":" + std::to_string(ev.tick) + ",\"kind\":\"" + std::string(to_string(ev.kind)) +
                      "\",\"program\":\"" + prog + "\",\"backend\":";
    out += ev.backend ? std::to_string(*ev.backend) : std::string("null");
    out += ",\"tokens\":" + std::to_string(ev.tokens) + "}";
    return out;
}

void EventLog::append(SimEvent ev) {
    const std::string line = to_ndjson(ev);
    hash_ = fnv1a(line, hash_);
    hash_ = fnv1a("\n", hash_);
    ++count_;
    if (out_ != nullptr) *out_ << line << '\n';
    if (keep_) events_.push_back(std::move(ev));
}

SimBackend::SimBackend(Options opts) : opts_(opts) {
    if (opts_.capacity <= 0) throw Error(ErrorCode::ConfigError, "backend capacity must be > 0");
    if (opts_.chunk <= 0) throw Error(ErrorCode::ConfigError, "prefill chunk must be > 0");
}

TokenCount SimBackend::resident(const ProgramId& program) const {
    auto it = resident_.find(program);
    return it == resident_.end() ? 0 : it->second;
}

bool SimBackend::has_job(const ProgramId& program) const {
    return std::any_of(prefill_.begin(), prefill_.end(), [&](const Job& j) { return j.program == program; });
}

bool SimBackend::is_busy(const ProgramId& program) const {
    if (decoding_.count(program) || has_job(program)) return true;
    return std::any_of(waiting_.begin(), waiting_.end(), [&](const Waiting& w) { return w.program == program; });
}

TokenCount SimBackend::committed_total() const {
    TokenCount total = resident_total();
    for (const auto& j : prefill_) total += j.recompute_left + j.prefill_left;
    for (const auto& w : waiting_) total += std::max<TokenCount>(0, w.context - resident(w.program));
    return total;
}

TokenCount SimBackend::shared_extent() const noexcept {
    const TokenCount s = opts_.shared_prefix;
    if (s == 0) return 0;
    if (full_prefix_ > 0) return s;
    TokenCount best = 0;
    for (const auto& [p, n] : resident_) best = std::max(best, n);
    return std::min(best, s);
}

void SimBackend::add_resident(const ProgramId& p, TokenCount n) {
    const TokenCount s = opts_.shared_prefix;
    TokenCount& r = resident_[p];
    const TokenCount before = r;
    r += n;
    private_total_ += std::max<TokenCount>(0, r - s) - std::max<TokenCount>(0, before - s);
    if (s > 0 && before < s && r >= s) ++full_prefix_;
    assert(resident_total() <= opts_.capacity && "KV pool overflow");
}

ResumeOutcome SimBackend::plan(const ProgramId& program, TokenCount context, TokenCount historical,
                               TokenCount decode_budget, Job& job) const {
    ResumeOutcome out;
    // The shared prefix counts as cached once any cache here holds it.
    const TokenCount k = std::min(std::max(resident(program), shared_extent()), context);
    const TokenCount h = std::min(std::max(historical, k), context);
    out.cached = k;
    out.hit = k > 0;
    out.recompute = h - k;
    out.fresh = context - h;
    job.program = program;
    job.recompute_left = out.recompute;
    job.prefill_left = out.fresh;
    job.decode_budget = decode_budget;
    return out;
}

void SimBackend::note_resume(const ProgramId& program, TokenCount historical, const ResumeOutcome& out, Tick now,
                             CostLedger& ledger, EventLog& log) {
    // Shared-prefix tokens picked up from other caches become this
    // program's own.
    if (const TokenCount r = resident(program); out.cached > r) add_resident(program, out.cached - r);
    // Hit accounting covers the program's own history only.
    const TokenCount own = std::min(out.cached, historical);
    if (own + out.recompute == 0) return;
    ledger.record_resume(own, out.recompute);
    const bool hit = own > 0 && out.recompute == 0;
    log.append({now, hit ? SimEventKind::ResumeHit : SimEventKind::ResumeMiss, program.value, opts_.id,
                hit ? own : out.recompute});
}

ResumeOutcome SimBackend::admit(const ProgramId& program, TokenCount context, TokenCount historical,
                                TokenCount decode_budget, Tick now, CostLedger& ledger, EventLog& log) {
    if (is_busy(program)) {
        throw Error(ErrorCode::AlreadyResident, "program " + program.value + " already active on backend " +
                                                    std::to_string(opts_.id));
    }
    if (context < 0 || historical < 0 || decode_budget < 0) {
        throw Error(ErrorCode::InvalidArgument, "admit: negative token count");
    }
    released_.erase(program);
    Job job;
    ResumeOutcome out = plan(program, context, historical, decode_budget, job);
    job.seq = ++seq_;
    note_resume(program, historical, out, now, ledger, log);
    last_used_[program] = now;
    if (job.recompute_left + job.prefill_left == 0) {
        if (decode_budget > 0) decoding_[program] = Decoder{decode_budget, job.seq};
    } else {
        prefill_.push_back(std::move(job));
    }
    return out;
}

void SimBackend::submit(const ProgramId& program, TokenCount context, TokenCount historical,
                        TokenCount decode_budget) {
    if (is_busy(program)) {
        throw Error(ErrorCode::AlreadyResident, "program " + program.value + " already active on backend " +
                                                    std::to_string(opts_.id));
    }
    released_.erase(program);
    waiting_.push_back({program, context, historical, decode_budget});
}

TokenCount SimBackend::release(const ProgramId& program, Tick now, EventLog& log) {
    TokenCount processed = 0;
    for (auto it = prefill_.begin(); it != prefill_.end();) {
        if (it->program == program) {
            processed += it->processed;
            it = prefill_.erase(it);
        } else {
            ++it;
        }
    }
    decoding_.erase(program);
    waiting_.erase(std::remove_if(waiting_.begin(), waiting_.end(), [&](const Waiting& w) { return w.program == program; }),
                   waiting_.end());
    pinned_until_.erase(program);
    if (resident(program) > 0) {
        released_.insert(program);
        last_used_[program] = now;
    } else {
        resident_.erase(program);
        last_used_.erase(program);
    }
    (void)log;
    return processed;
}

TokenCount SimBackend::evict(const ProgramId& program, Tick now, EventLog& log, TokenCount* wasted) {
    const bool held = resident_.count(program) || is_busy(program);
    if (!held) {
        throw Error(ErrorCode::NotResident, "program " + program.value + " holds nothing on backend " +
                                                std::to_string(opts_.id));
    }
    TokenCount sunk = 0;
    for (auto it = prefill_.begin(); it != prefill_.end();) {
        if (it->program == program) {
            sunk += it->processed;
            it = prefill_.erase(it);
        } else {
            ++it;
        }
    }
    decoding_.erase(program);
    waiting_.erase(std::remove_if(waiting_.begin(), waiting_.end(), [&](const Waiting& w) { return w.program == program; }),
                   waiting_.end());
    pinned_until_.erase(program);
    if (wasted != nullptr) *wasted = sunk;
    return drop_cache(program, now, log);
}

TokenCount SimBackend::drop_cache(const ProgramId& program, Tick now, EventLog& log) {
    TokenCount freed = 0;
    if (auto it = resident_.find(program); it != resident_.end()) {
        const TokenCount before = resident_total();
        const TokenCount s = opts_.shared_prefix;
        private_total_ -= std::max<TokenCount>(0, it->second - s);
        if (s > 0 && it->second >= s) --full_prefix_;
        resident_.erase(it);
        freed = before - resident_total();
    }
    last_used_.erase(program);
    released_.erase(program);
    log.append({now, SimEventKind::EvictionPerformed, program.value, opts_.id, freed});
    return freed;
}

TokenCount SimBackend::drop(const ProgramId& program, Tick now, EventLog& log) {
    if (!resident_.count(program) && !is_busy(program)) return 0;
    return evict(program, now, log);
}

void SimBackend::pin_until(const ProgramId& program, Tick until) { pinned_until_[program] = until; }

bool SimBackend::holds_reserved(const ProgramId& program, Tick now) const {
    if (released_.count(program)) return false;
    if (!opts_.evict_idle) return true;
    const auto pin = pinned_until_.find(program);
    return pin != pinned_until_.end() && pin->second > now;
}

std::vector<ProgramId> SimBackend::idle_programs() const {
    std::vector<std::tuple<bool, Tick, ProgramId>> idle;
    for (const auto& [p, n] : resident_) {
        if (decoding_.count(p) || has_job(p)) continue;
        auto lu = last_used_.find(p);
        idle.emplace_back(!released_.count(p), lu == last_used_.end() ? 0 : lu->second, p);
    }
    std::sort(idle.begin(), idle.end());
    std::vector<ProgramId> out;
    out.reserve(idle.size());
    for (auto& [r, t, p] : idle) out.push_back(std::move(p));
    return out;
}

bool SimBackend::reclaim(TokenCount need, Tick now, EventLog& log, AdvanceResult& res, const ProgramId* requester) {
    if (free_tokens() >= need) return true;
    for (const auto& p : idle_programs()) {
        if (free_tokens() >= need) break;
        if (!opts_.evict_idle && !released_.count(p)) break;  // released caches sort first
        if (requester != nullptr && p == *requester) continue;
        if (auto pin = pinned_until_.find(p); pin != pinned_until_.end() && pin->second > now) continue;
        // A waiting request loses its cached prefix but stays queued.
        drop_cache(p, now, log);
        res.evicted_idle.push_back(p);
    }
    return free_tokens() >= need;
}

bool SimBackend::preempt_latest(Tick now, EventLog& log, AdvanceResult& res, const ProgramId& requester) {
    // Latest-admitted running request, whether decoding or prefilling.
    const ProgramId* victim = nullptr;
    std::uint64_t best = 0;
    for (const auto& [p, d] : decoding_) {
        if (d.seq >= best) {
            best = d.seq;
            victim = &p;
        }
    }
    for (const auto& j : prefill_) {
        if (j.seq >= best) {
            best = j.seq;
            victim = &j.program;
        }
    }
    if (victim == nullptr) return false;
    const ProgramId v = *victim;
    const TokenCount held = resident(v);
    Waiting w{v, held, held, 0};
    if (auto d = decoding_.find(v); d != decoding_.end()) {
        w.decode_budget = d->second.remaining;
    } else {
        for (const auto& j : prefill_) {
            if (j.program == v) {
                w.context = held + j.recompute_left + j.prefill_left;
                w.historical = held + j.recompute_left;
                w.decode_budget = j.decode_budget;
            }
        }
    }
    evict(v, now, log);
    log.append({now, SimEventKind::Preempted, v.value, opts_.id, held});
    waiting_.push_front(std::move(w));
    res.preempted.push_back(v);
    (void)requester;
    return true;
}

AdvanceResult SimBackend::advance(Tick now, CostLedger& ledger, EventLog& log) {
    AdvanceResult res;
    if (!healthy_) return res;
    const bool retain = ledger.retains_samples();
    auto sample = [&](const ProgramId& p, CostComponent c, TokenCount tokens) {
        if (retain) {
            ledger.record({p, opts_.id, c, tokens, 1});
        } else {
            ledger.record({std::nullopt, opts_.id, c, tokens, 1});
        }
    };

    // Engine-side admission, FIFO.
    while (!waiting_.empty()) {
        Waiting& w = waiting_.front();
        Job job;
        ResumeOutcome out = plan(w.program, w.context, w.historical, w.decode_budget, job);
        // Admitted prompts hold their blocks before their chunks run.
        TokenCount outstanding = 0;
        for (const auto& j : prefill_) outstanding += j.recompute_left + j.prefill_left;
        const TokenCount need = out.recompute + out.fresh + outstanding;
        if (free_tokens() < need && !reclaim(need, now, log, res, &w.program)) break;
        // Reclaim may have dropped this program's own cache; re-plan.
        out = plan(w.program, w.context, w.historical, w.decode_budget, job);
        job.seq = ++seq_;
        note_resume(w.program, w.historical, out, now, ledger, log);
        last_used_[w.program] = now;
        res.admitted.emplace_back(w.program, out);
        const ProgramId p = w.program;
        const TokenCount budget = w.decode_budget;
        waiting_.pop_front();
        if (job.recompute_left + job.prefill_left == 0) {
            if (budget > 0) decoding_[p] = Decoder{budget, job.seq};
        } else {
            prefill_.push_back(std::move(job));
        }
    }

    // Decode: one token per running program.
    std::vector<ProgramId> order;
    order.reserve(decoding_.size());
    for (const auto& [p, d] : decoding_) order.push_back(p);
    TokenCount decoded = 0;
    for (const auto& p : order) {
        if (!decoding_.count(p)) continue;
        bool ok = reclaim(1, now, log, res, &p);
        while (!ok && opts_.pressure == PressureMode::PreemptLatest && decoding_.count(p)) {
            if (!preempt_latest(now, log, res, p)) break;
            ok = free_tokens() >= 1;
        }
        if (!decoding_.count(p)) continue;  // preempted itself
        if (!ok) {
            res.stalled_tokens += 1;
            continue;
        }
        add_resident(p, 1);
        ++decoded;
        sample(p, CostComponent::Decode, resident(p));
        res.decoded.push_back(p);
        last_used_[p] = now;
        auto& d = decoding_[p];
        if (--d.remaining == 0) {
            decoding_.erase(p);
            res.segment_done.push_back(p);
            log.append({now, SimEventKind::StepEmissionComplete, p.value, opts_.id, resident(p)});
        }
    }
    if (decoded > 0) log.append({now, SimEventKind::DecodeToken, "", opts_.id, decoded});

    // Chunked prefill: `chunk` tokens of budget per tick, shared FIFO.
    TokenCount budget = opts_.chunk;
    while (budget > 0 && !prefill_.empty()) {
        Job& job = prefill_.front();
        const ProgramId p = job.program;
        const TokenCount want = std::min(budget, job.recompute_left + job.prefill_left);
        bool ok = reclaim(want, now, log, res, &p);
        while (!ok && opts_.pressure == PressureMode::PreemptLatest && has_job(p)) {
            if (!preempt_latest(now, log, res, p)) break;
            ok = free_tokens() >= want;
        }
        if (prefill_.empty() || prefill_.front().program != p) continue;  // head was preempted
        Job& head = prefill_.front();
        const TokenCount amt = std::min(want, free_tokens());
        if (amt < want) res.stalled_tokens += want - amt;
        if (amt <= 0) break;
        const TokenCount from_recompute = std::min(amt, head.recompute_left);
        head.recompute_left -= from_recompute;
        head.prefill_left -= amt - from_recompute;
        head.processed += amt;
        res.recompute_tokens += from_recompute;
        add_resident(p, amt);
        budget -= amt;
        last_used_[p] = now;
        sample(p, from_recompute > 0 ? CostComponent::Recompute : CostComponent::Prefill, resident(p));
        log.append({now, SimEventKind::PrefillChunkDone, p.value, opts_.id, amt});
        if (head.recompute_left + head.prefill_left == 0) {
            const TokenCount db = head.decode_budget;
            const std::uint64_t seq = head.seq;
            prefill_.pop_front();
            if (db > 0) decoding_[p] = Decoder{db, seq};
        } else if (amt < want) {
            break;  // pool exhausted
        }
    }
    return res;
}

}  // namespace progsched
