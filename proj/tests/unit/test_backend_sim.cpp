#include "doctest.h"

#include "progsched/backend_sim.hpp"
#include "progsched/simulator.hpp"
#include "progsched/workload.hpp"

using namespace progsched;

namespace {

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an Error");
    return ErrorCode::InvalidArgument;
}

SimBackend make(TokenCount capacity, TokenCount chunk, bool evict_idle = true,
                PressureMode mode = PressureMode::Stall) {
    SimBackend::Options o;
    o.capacity = capacity;
    o.chunk = chunk;
    o.evict_idle = evict_idle;
    o.pressure = mode;
    return SimBackend(o);
}

const ProgramId P("p1");

}  // namespace

TEST_CASE("decode grows the cache one token per tick") {
    auto be = make(1000, 256);
    CostLedger ledger;
    EventLog log;
    be.admit(P, 100, 0, 5, 0, ledger, log);
    be.advance(0, ledger, log);  // prefill 100 in one chunk
    CHECK(be.resident(P) == 100);
    CostLedger after;
    const auto r = be.advance(1, after, log);
    CHECK(be.resident(P) == 101);
    CHECK(r.decoded == std::vector<ProgramId>{P});
    REQUIRE(after.samples().size() == 1);
    CHECK(after.samples()[0].component == CostComponent::Decode);
    CHECK(after.samples()[0].tokens == 101);
    CHECK(after.samples()[0].duration == 1);
}

TEST_CASE("chunked prefill takes ceil(c / chunk) ticks") {
    auto be = make(1000, 2);
    CostLedger ledger;
    EventLog log;
    be.admit(P, 8, 0, 0, 0, ledger, log);
    int ticks = 0;
    while (be.has_job(P)) {
        be.advance(ticks, ledger, log);
        ++ticks;
    }
    CHECK(ticks == 4);
    CHECK(ledger.decompose()[CostComponent::Prefill] == 2 + 4 + 6 + 8);
}

TEST_CASE("fully evicted resume is charged as the recompute staircase") {
    auto be = make(1000, 2);
    CostLedger ledger;
    EventLog log;
    const auto out = be.admit(P, 8, 8, 0, 0, ledger, log);
    CHECK_FALSE(out.hit);
    CHECK(out.recompute == 8);
    for (Tick t = 0; t < 4; ++t) be.advance(t, ledger, log);
    CHECK(ledger.decompose()[CostComponent::Recompute] == recompute_cost_of(8, 2));
    CHECK(ledger.decompose()[CostComponent::Recompute] == 20);
    CHECK(ledger.miss_tokens() == 8);
}

TEST_CASE("partial residency resumes as a hit") {
    auto be = make(1000, 256);
    CostLedger ledger;
    EventLog log;
    be.admit(P, 180, 0, 0, 0, ledger, log);
    be.advance(0, ledger, log);
    CostLedger resume;
    const auto out = be.admit(P, 200, 180, 0, 1, resume, log);
    CHECK(out.hit);
    CHECK(out.cached == 180);
    CHECK(out.recompute == 0);
    CHECK(out.fresh == 20);
    CHECK(resume.hit_tokens() == 180);
    CHECK(resume.miss_tokens() == 0);
}

TEST_CASE("a cache on another replica does not help") {
    auto a = make(1000, 256);
    auto b = make(1000, 256);
    CostLedger ledger;
    EventLog log;
    a.admit(P, 200, 0, 0, 0, ledger, log);
    a.advance(0, ledger, log);
    const auto out = b.admit(P, 200, 200, 0, 1, ledger, log);
    CHECK_FALSE(out.hit);
    CHECK(out.recompute == 200);
}

TEST_CASE("admit twice is AlreadyResident") {
    auto be = make(1000, 4);
    CostLedger ledger;
    EventLog log;
    be.admit(P, 100, 0, 3, 0, ledger, log);
    CHECK(code_of([&] { be.admit(P, 100, 0, 3, 0, ledger, log); }) == ErrorCode::AlreadyResident);
}

TEST_CASE("evict frees the cache, a second evict is NotResident") {
    auto be = make(1000, 512);
    CostLedger ledger;
    EventLog log(true);
    be.admit(P, 500, 0, 0, 0, ledger, log);
    be.advance(0, ledger, log);
    CHECK(be.evict(P, 1, log) == 500);
    CHECK(be.resident_total() == 0);
    CHECK(log.events().back().kind == SimEventKind::EvictionPerformed);
    CHECK(code_of([&] { be.evict(P, 2, log); }) == ErrorCode::NotResident);
}

TEST_CASE("evicting mid-prefill cancels the job and reports the sunk chunks") {
    auto be = make(1000, 2);
    CostLedger ledger;
    EventLog log;
    be.admit(P, 8, 0, 0, 0, ledger, log);
    be.advance(0, ledger, log);
    be.advance(1, ledger, log);
    TokenCount wasted = 0;
    CHECK(be.evict(P, 2, log, &wasted) == 4);
    CHECK(wasted == 4);
    CHECK_FALSE(be.is_busy(P));
    CHECK(be.resident(P) == 0);
}

TEST_CASE("release keeps the cache reclaimable, retain takes it back") {
    auto be = make(1000, 512);
    CostLedger ledger;
    EventLog log;
    be.admit(P, 300, 0, 0, 0, ledger, log);
    be.advance(0, ledger, log);
    CHECK_FALSE(be.holds_reserved(P, 1));  // idle and unpinned: reclaimable
    be.pin_until(P, 10);
    CHECK(be.holds_reserved(P, 1));
    be.release(P, 1, log);
    CHECK(be.is_released(P));
    CHECK(be.resident(P) == 300);
    CHECK_FALSE(be.holds_reserved(P, 1));
    be.retain(P);
    CHECK_FALSE(be.holds_reserved(P, 1));  // release dropped the pin
    auto keep = make(1000, 512, false);
    keep.admit(P, 10, 0, 0, 0, ledger, log);
    keep.advance(0, ledger, log);
    CHECK(keep.holds_reserved(P, 1));
}

TEST_CASE("pinned caches are reserved until the pin expires") {
    auto be = make(1000, 512);
    CostLedger ledger;
    EventLog log;
    be.admit(P, 10, 0, 0, 0, ledger, log);
    be.advance(0, ledger, log);
    be.pin_until(P, 5);
    CHECK(be.holds_reserved(P, 4));
    CHECK_FALSE(be.holds_reserved(P, 6));
}

TEST_CASE("idle caches are reclaimed for new work, released ones first") {
    auto be = make(100, 100);
    CostLedger ledger;
    EventLog log;
    const ProgramId a("a"), b("b"), c("c");
    be.admit(a, 40, 0, 0, 0, ledger, log);
    be.advance(0, ledger, log);
    be.admit(b, 40, 0, 0, 1, ledger, log);
    be.advance(1, ledger, log);
    be.release(b, 2, log);
    be.admit(c, 40, 0, 0, 3, ledger, log);
    const auto r = be.advance(3, ledger, log);
    CHECK(r.evicted_idle == std::vector<ProgramId>{b});
    CHECK(be.resident(a) == 40);
    CHECK(be.resident(c) == 40);
    CHECK(be.resident_total() <= be.capacity());
}

TEST_CASE("request path waits in the engine queue") {
    auto be = make(100, 100, false);
    CostLedger ledger;
    EventLog log;
    be.submit(ProgramId("a"), 80, 0, 50);
    be.submit(ProgramId("b"), 50, 0, 1);
    auto r = be.advance(0, ledger, log);
    CHECK(r.admitted.size() == 1);
    CHECK(be.waiting_count() == 1);
    CHECK(be.committed_total() == 80 + 50);
}

TEST_CASE("event log ndjson and hash") {
    const SimEvent ev{3, SimEventKind::ResumeHit, "p", BackendId{1}, 180};
    const auto line = to_ndjson(ev);
    CHECK(line.find("\"tick\":3") != std::string::npos);
    CHECK(line.find("\"kind\":\"ResumeHit\"") != std::string::npos);
    EventLog a, b;
    a.append(ev);
    b.append(ev);
    CHECK(a.hash() == b.hash());
    b.append(ev);
    CHECK(a.hash() != b.hash());
}

namespace {

SimConfig small_config(PolicyKind p) {
    SimConfig c;
    c.policy = p;
    c.capacity = 40000;
    c.scheduler.chunk = 64;
    c.scheduler.decay = DecaySpec::constant1();
    c.duration = 200000;
    return c;
}

WorkloadTrace small_trace(std::size_t n, std::size_t concurrency) {
    auto t = generate_trace("mini-swe", n, 7);
    t.arrival.concurrency = concurrency;
    t.arrival.recycle = false;
    return t;
}

}  // namespace

TEST_CASE("run_policy is deterministic and conserves scripted tokens") {
    const auto trace = small_trace(12, 6);
    TokenCount scripted = 0;
    for (const auto& p : trace.programs) scripted += p.scripted_tokens();
    for (auto policy : {PolicyKind::ProgramAware, PolicyKind::PinnedRouting, PolicyKind::RequestAware,
                        PolicyKind::TtlPin}) {
        const auto a = run_policy(trace, small_config(policy));
        const auto b = run_policy(trace, small_config(policy));
        CHECK(a.event_hash == b.event_hash);
        CHECK(a.event_count == b.event_count);
        CHECK(a.pool_bound_held);
        TokenCount total = 0;
        for (const auto& p : a.programs) {
            CHECK(p.finished.has_value());
            total += p.total_tokens;
        }
        CHECK(total == scripted);
        CHECK(a.report.cost_breakdown.total() == a.ledger.total());
    }
}

TEST_CASE("without pressure every policy hits") {
    const auto trace = small_trace(4, 2);
    for (auto policy : {PolicyKind::ProgramAware, PolicyKind::RequestAware}) {
        auto cfg = small_config(policy);
        cfg.capacity = 400000;
        const auto r = run_policy(trace, cfg);
        CHECK(r.report.kv_hit_rate == doctest::Approx(1.0));
    }
}

TEST_CASE("under pressure program-aware hits more than request-aware") {
    const auto trace = small_trace(48, 48);
    const auto pa = run_policy(trace, small_config(PolicyKind::ProgramAware));
    const auto ra = run_policy(trace, small_config(PolicyKind::RequestAware));
    CHECK(pa.report.kv_hit_rate > ra.report.kv_hit_rate);
}

TEST_CASE("config validation") {
    auto c = small_config(PolicyKind::ProgramAware);
    c.backends = 0;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::ConfigError);
    CHECK(policy_from_string("ttl-pin") == PolicyKind::TtlPin);
    CHECK(code_of([] { policy_from_string("fifo"); }) == ErrorCode::InvalidArgument);
}
