#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "doctest.h"

#include "progsched/rng.hpp"
#include "progsched/scheduler.hpp"

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

EvictionCandidate acting(const std::string& id, TokenCount c, Tick since = 0) {
    return {ProgramId(id), c, ProgramPhase::Acting, since};
}

EvictionCandidate reasoning(const std::string& id, TokenCount c) {
    return {ProgramId(id), c, ProgramPhase::Reasoning, 0};
}

std::vector<std::string> ids(const std::vector<ProgramId>& v) {
    std::vector<std::string> out;
    for (const auto& id : v) out.push_back(id.value);
    return out;
}

ProgramView view(const std::string& id, TokenCount c, ProgramPhase phase, StatusKind status,
                 Tick acting_since = 0, Tick paused_since = 0) {
    ProgramView v;
    v.id = ProgramId(id);
    v.context_tokens = c;
    v.phase = phase;
    v.status = status;
    v.acting_since = acting_since;
    v.paused_since = paused_since;
    return v;
}

SchedulerConfig constant_config() {
    SchedulerConfig c;
    c.decay = DecaySpec::constant1();
    return c;
}

}  // namespace

TEST_CASE("decay_eval") {
    const auto g = DecaySpec::geometric(2.0);
    CHECK(decay_eval(g, 0) == 1.0);
    CHECK(decay_eval(g, 3) == 0.125);
    CHECK(decay_eval(g, 5) * decay_eval(g, 7) == doctest::Approx(decay_eval(g, 12)).epsilon(1e-12));
    for (int t = 0; t <= 40; ++t) CHECK(decay_eval(g, t) == std::ldexp(1.0, -t));
    CHECK(decay_eval(DecaySpec::constant1(), 1e6) == 1.0);
    CHECK(decay_eval(DecaySpec::exponential(0.3), 0) == 1.0);
    CHECK(code_of([] { DecaySpec::geometric(1.0); }) == ErrorCode::InvalidSpec);
    CHECK(code_of([] { DecaySpec::exponential(0.0); }) == ErrorCode::InvalidSpec);
    CHECK(code_of([&] { decay_eval(g, -1); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("decay semigroup over random pairs") {
    Rng rng(3);
    for (const auto& f : {DecaySpec::geometric(2.0), DecaySpec::exponential(0.3)}) {
        for (int i = 0; i < 10000; ++i) {
            const double a = rng.uniform() * 50, b = rng.uniform() * 50;
            const double lhs = f(a + b), rhs = f(a) * f(b);
            CHECK(std::abs(lhs - rhs) <= 1e-12 * std::abs(lhs));
        }
    }
}

TEST_CASE("effective_load") {
    const auto g = DecaySpec::geometric(2.0);
    std::vector<ProgramView> ps{view("r", 100, ProgramPhase::Reasoning, StatusKind::Reasoning),
                                view("a", 200, ProgramPhase::Acting, StatusKind::Acting, 9)};
    CHECK(effective_load(ps, g, 10) == 200.0);
    std::vector<ProgramView> plain{view("r", 100, ProgramPhase::Reasoning, StatusKind::Reasoning),
                                   view("s", 50, ProgramPhase::Reasoning, StatusKind::Reasoning)};
    CHECK(effective_load(plain, g, 99) == 150.0);
    std::vector<ProgramView> one{view("a", 1024, ProgramPhase::Acting, StatusKind::Acting, 0)};
    CHECK(effective_load(one, g, 10) == 1.0);
}

TEST_CASE("thrashing_pressure") {
    CHECK(thrashing_pressure(1000, 900, 1.0) == 0.0);
    CHECK(thrashing_pressure(1000, 1300, 1.0) == 300.0);
    CHECK(thrashing_pressure(1000, 950, 0.9) == doctest::Approx(50.0));
}

TEST_CASE("select_evictions examples") {
    CHECK(ids(select_evictions({acting("a", 3), acting("b", 5), acting("c", 8)}, 7).selected) ==
          std::vector<std::string>{"a", "b"});
    CHECK(select_evictions({acting("a", 3)}, 0).selected.empty());
    CHECK(ids(select_evictions({acting("big", 9), reasoning("r1", 2), reasoning("r2", 2)}, 4).selected) ==
          std::vector<std::string>{"big"});
}

TEST_CASE("select_evictions shortfall takes everything") {
    const auto r = select_evictions({acting("a", 3), reasoning("b", 4)}, 10);
    CHECK(r.selected.size() == 2);
    CHECK(r.shortfall == 3.0);
}

TEST_CASE("select_evictions drops picks a later one made redundant") {
    const auto r = select_evictions({acting("a", 2), acting("b", 3), acting("c", 10)}, 10);
    CHECK(ids(r.selected) == std::vector<std::string>{"c"});
    CHECK(r.shortfall == 0.0);
}

TEST_CASE("select_evictions ties pause the latest tool call first") {
    const auto r = select_evictions({acting("old", 5, 1), acting("new", 5, 9), acting("x", 5, 9)}, 5);
    CHECK(ids(r.selected) == std::vector<std::string>{"new"});
}

TEST_CASE("select_evictions uses decayed weights") {
    std::vector<EvictionCandidate> cands{acting("a", 100), acting("b", 200)};
    cands[0].weight = 10;
    cands[1].weight = 50;
    CHECK(ids(select_evictions(cands, 40).selected) == std::vector<std::string>{"b"});
}

TEST_CASE("select_evictions is optimal when the greedy prefix covers exactly") {
    Rng rng(5);
    int checked = 0;
    while (checked < 300) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 12));
        std::vector<EvictionCandidate> cands;
        for (std::size_t i = 0; i < n; ++i) cands.push_back(acting("p" + std::to_string(i), rng.uniform_int(1, 60)));
        auto sorted = cands;
        std::sort(sorted.begin(), sorted.end(),
                  [](const auto& a, const auto& b) { return a.context_tokens < b.context_tokens; });
        const auto k = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(n)));
        TokenCount required = 0;
        for (std::size_t i = 0; i < k; ++i) required += sorted[i].context_tokens;

        std::int64_t best = std::numeric_limits<std::int64_t>::max();
        for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
            TokenCount sum = 0;
            std::int64_t sq = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (mask & (1u << i)) sum += cands[i].context_tokens, sq += cands[i].context_tokens * cands[i].context_tokens;
            }
            if (sum >= required) best = std::min(best, sq);
        }
        const auto r = select_evictions(cands, static_cast<double>(required));
        std::int64_t got = 0;
        TokenCount covered = 0;
        for (const auto& id : r.selected) {
            for (const auto& c : cands) {
                if (c.id == id) got += c.context_tokens * c.context_tokens, covered += c.context_tokens;
            }
        }
        CHECK(covered >= required);
        CHECK(got == best);
        ++checked;
    }
}

TEST_CASE("pause and restore primitives") {
    auto p = make_program(ProgramId("p"), 400, {});
    p = apply_event(p, event::RestoreGranted{0}, 0);
    p = apply_event(p, event::ToolCallIssued{"t"}, 1);
    const auto paused = pause(p, 2);
    CHECK(paused.status.kind == StatusKind::Paused);
    CHECK_FALSE(paused.placement.has_value());
    CHECK(code_of([&] { pause(paused, 3); }) == ErrorCode::IllegalTransition);

    const auto cfg = constant_config();
    const auto back = restore(paused, {1, 1000, 400.0}, cfg, 4);
    CHECK(back.status.kind == StatusKind::Acting);
    CHECK(back.placement == std::optional<BackendId>(1));

    auto big = make_program(ProgramId("big"), 700, {});
    CHECK(code_of([&] { restore(big, {0, 1000, 400.0}, cfg, 0); }) == ErrorCode::CapacityExceeded);
    CHECK(code_of([&] { restore(back, {0, 1000, 0.0}, cfg, 0); }) == ErrorCode::IllegalTransition);
}

TEST_CASE("restore order prefers Reasoning, then size, paused_since, id") {
    GlobalWaitQueue q;
    q.upsert(view("acting", 50, ProgramPhase::Acting, StatusKind::Paused));
    q.upsert(view("reason", 100, ProgramPhase::Reasoning, StatusKind::Paused));
    CHECK(q.ordered().front().id.value == "reason");
    CHECK(restore_score(100, ProgramPhase::Reasoning) == doctest::Approx(1.01));
    CHECK(restore_score(50, ProgramPhase::Acting) == doctest::Approx(0.02));
    CHECK(pause_score(50, ProgramPhase::Acting) > pause_score(10, ProgramPhase::Reasoning));
}

TEST_CASE("queue order does not depend on insertion order") {
    std::vector<ProgramView> vs;
    Rng rng(9);
    for (int i = 0; i < 40; ++i) {
        vs.push_back(view("p" + std::to_string(i), rng.uniform_int(1, 5) * 10,
                          rng.uniform_int(0, 1) ? ProgramPhase::Acting : ProgramPhase::Reasoning, StatusKind::Paused,
                          0, rng.uniform_int(0, 3)));
    }
    GlobalWaitQueue a, b;
    for (const auto& v : vs) a.upsert(v);
    for (auto it = vs.rbegin(); it != vs.rend(); ++it) b.upsert(*it);
    const auto oa = a.ordered(), ob = b.ordered();
    REQUIRE(oa.size() == ob.size());
    for (std::size_t i = 0; i < oa.size(); ++i) CHECK(oa[i].id == ob[i].id);
    CHECK(a.min_context() == std::optional<TokenCount>(10));
    CHECK(a.erase(vs[0].id));
    CHECK_FALSE(a.erase(vs[0].id));
}

TEST_CASE("schedule_tick: balanced cluster is a noop") {
    ClusterSnapshot snap;
    snap.backends.push_back({0, 1000, true, {view("a", 400, ProgramPhase::Reasoning, StatusKind::Reasoning)}, 0});
    snap.backends.push_back({1, 1000, true, {view("b", 400, ProgramPhase::Reasoning, StatusKind::Reasoning)}, 0});
    GlobalWaitQueue q;
    CHECK(schedule_tick(snap, q, constant_config(), 10).is_noop());
}

TEST_CASE("schedule_tick: pressure pauses shortest Acting first") {
    ClusterSnapshot snap;
    snap.backends.push_back({0, 1000, true,
                             {view("r", 550, ProgramPhase::Reasoning, StatusKind::Reasoning),
                              view("a100", 100, ProgramPhase::Acting, StatusKind::Acting),
                              view("a250", 250, ProgramPhase::Acting, StatusKind::Acting),
                              view("a400", 400, ProgramPhase::Acting, StatusKind::Acting)},
                             0});
    GlobalWaitQueue q;
    const auto batch = schedule_tick(snap, q, constant_config(), 10);
    std::vector<std::string> paused;
    for (const auto& d : batch.decisions) {
        if (d.kind == ScheduleDecision::Kind::Pause) paused.push_back(d.program.value);
        // A paused program never goes straight back to the replica it left.
        if (d.kind == ScheduleDecision::Kind::Restore) CHECK(d.backend != 0);
    }
    CHECK(paused == std::vector<std::string>{"a100", "a250"});
}

TEST_CASE("schedule_tick: global queue fills the empty backend") {
    ClusterSnapshot snap;
    snap.backends.push_back({0, 1000, true, {view("full", 1000, ProgramPhase::Reasoning, StatusKind::Reasoning)}, 0});
    snap.backends.push_back({1, 1000, true, {}, 0});
    GlobalWaitQueue q;
    for (int i = 0; i < 3; ++i) q.upsert(view("q" + std::to_string(i), 300, ProgramPhase::Reasoning, StatusKind::Paused));
    const auto batch = schedule_tick(snap, q, constant_config(), 10);
    REQUIRE(batch.decisions.size() == 3);
    for (const auto& d : batch.decisions) {
        CHECK(d.kind == ScheduleDecision::Kind::Restore);
        CHECK(d.backend == 1);
    }
}

TEST_CASE("schedule_tick: oversized programs are flagged, smaller ones still placed") {
    ClusterSnapshot snap;
    snap.backends.push_back({0, 1000, true, {}, 0});
    GlobalWaitQueue q;
    q.upsert(view("huge", 5000, ProgramPhase::Reasoning, StatusKind::Paused));
    q.upsert(view("small", 100, ProgramPhase::Acting, StatusKind::Paused));
    const auto batch = schedule_tick(snap, q, constant_config(), 1);
    CHECK(batch.oversized == std::vector<ProgramId>{ProgramId("huge")});
    CHECK(q.starvation(ProgramId("huge")) == 1);
    REQUIRE(batch.decisions.size() == 1);
    CHECK(batch.decisions[0].program.value == "small");
}

TEST_CASE("schedule_tick: unhealthy backends receive nothing") {
    ClusterSnapshot snap;
    snap.backends.push_back({0, 1000, false, {}, 0});
    snap.backends.push_back({1, 1000, true, {}, 0});
    GlobalWaitQueue q;
    q.upsert(view("p", 10, ProgramPhase::Reasoning, StatusKind::Paused));
    const auto batch = schedule_tick(snap, q, constant_config(), 1);
    REQUIRE(batch.decisions.size() == 1);
    CHECK(batch.decisions[0].backend == 1);
}

TEST_CASE("schedule_tick: watermark safety on random clusters") {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        SchedulerConfig cfg;
        cfg.decay = DecaySpec::geometric(2.0);
        cfg.lambda_max = 0.9;
        cfg.lambda_min = 0.7;
        const Tick now = 20;
        ClusterSnapshot snap;
        std::map<ProgramId, double> weight;
        for (BackendId b = 0; b < 3; ++b) {
            BackendView bv{b, 2000, true, {}, 0};
            const auto n = rng.uniform_int(0, 8);
            for (int i = 0; i < n; ++i) {
                const bool act = rng.uniform_int(0, 1) == 1;
                auto v = view("b" + std::to_string(b) + "p" + std::to_string(i), rng.uniform_int(1, 600),
                              act ? ProgramPhase::Acting : ProgramPhase::Reasoning,
                              act ? StatusKind::Acting : StatusKind::Reasoning, now - rng.uniform_int(0, 4));
                v.placement = b;
                weight[v.id] = effective_weight(v, cfg.decay, now);
                bv.programs.push_back(v);
            }
            snap.backends.push_back(bv);
        }
        GlobalWaitQueue q;
        for (int i = 0; i < rng.uniform_int(0, 6); ++i) {
            auto v = view("q" + std::to_string(i), rng.uniform_int(1, 900), ProgramPhase::Reasoning, StatusKind::Paused);
            weight[v.id] = effective_weight(v, cfg.decay, now);
            q.upsert(v);
        }
        const auto batch = schedule_tick(snap, q, cfg, now);
        std::map<BackendId, double> load;
        std::map<ProgramId, BackendId> where;
        bool any_shortfall = false;
        for (const auto& b : snap.backends) {
            load[b.id] = effective_load(b.programs, cfg.decay, now);
            for (const auto& p : b.programs) where[p.id] = b.id;
        }
        // A program appears once, or twice when it migrates: paused on one
        // replica, then restored to another.
        std::map<ProgramId, std::vector<ScheduleDecision>> per;
        for (const auto& d : batch.decisions) per[d.program].push_back(d);
        for (const auto& [id, ds] : per) {
            REQUIRE(ds.size() <= 2);
            if (ds.size() == 2) {
                CHECK(ds[0].kind == ScheduleDecision::Kind::Pause);
                CHECK(ds[1].kind == ScheduleDecision::Kind::Restore);
                CHECK(ds[0].backend != ds[1].backend);
            }
        }
        for (const auto& d : batch.decisions) {
            if (d.kind == ScheduleDecision::Kind::Pause) {
                load[d.backend] -= weight[d.program];
            } else {
                load[d.backend] += weight[d.program];
            }
        }
        for (const auto& b : snap.backends) {
            double all = 0;
            for (const auto& p : b.programs) all += weight[p.id];
            if (all > cfg.lambda_max * b.capacity && load[b.id] > cfg.lambda_max * b.capacity + 1e-9) any_shortfall = true;
        }
        if (!any_shortfall) {
            for (const auto& [b, l] : load) CHECK(l <= cfg.lambda_max * 2000 + 1e-9);
        }
    }
}

TEST_CASE("config validation") {
    SchedulerConfig c;
    CHECK_NOTHROW(c.validate());
    c.lambda_min = 0.95;
    c.lambda_max = 0.9;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::ConfigError);
    SchedulerConfig d;
    d.delta_t = 0;
    CHECK(code_of([&] { d.validate(); }) == ErrorCode::ConfigError);
    SchedulerConfig e;
    CHECK(e.delta_t == 5);
    CHECK(e.lambda_max == 1.0);
    CHECK(e.lambda_min == 1.0);
    CHECK(e.decay == DecaySpec::geometric(2.0));
}
