#include <algorithm>
#include <set>

#include "doctest.h"

#include "progsched/tool_manager.hpp"

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

AgentProgram stopped(const std::string& id) {
    auto p = make_program(ProgramId(id), 10, {});
    return apply_event(p, event::ReleaseRequested{}, 1);
}

std::int64_t live_disk(const ToolManager& tm) {
    std::int64_t sum = 0;
    for (const auto& [id, e] : tm.environments()) {
        if (e.status != PrepStatus::Released) sum += e.disk_units;
    }
    return sum;
}

double quantile(std::vector<Tick> v, double q) {
    std::sort(v.begin(), v.end());
    const auto idx = static_cast<std::size_t>(q * static_cast<double>(v.size()));
    return static_cast<double>(v[std::min(idx, v.size() - 1)]);
}

}  // namespace

TEST_CASE("acquire claims disk and a port") {
    ToolManager tm(ResourcePools::make(100, 1000, 1009));
    const auto& env = tm.acquire_env(ProgramId("p"), {"repoA", 10, 30}, 5);
    CHECK(env.status == PrepStatus::Preparing);
    CHECK(env.ready_at == 35);
    CHECK(env.port.has_value());
    CHECK(tm.pools().disk_used == 10);
    CHECK(tm.pools().ports_free.size() == 9);
}

TEST_CASE("port exhaustion") {
    ToolManager tm(ResourcePools::make(100, 1000, 1000));
    tm.acquire_env(ProgramId("a"), {"x", 1, 0}, 0);
    CHECK(code_of([&] { tm.acquire_env(ProgramId("b"), {"x", 1, 0}, 0); }) == ErrorCode::PortsExhausted);
}

TEST_CASE("disk exhaustion at the (capacity / disk + 1)-th acquire") {
    ToolManager tm(ResourcePools::make(100, 1000, 1999));
    int calls = 0;
    try {
        for (;;) {
            ++calls;
            tm.acquire_env(ProgramId("p" + std::to_string(calls)), {"x", 10, 0}, 0);
        }
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DiskExhausted);
        CHECK(std::string(e.what()).find("disk") != std::string::npos);
    }
    CHECK(calls == 11);
    CHECK(tm.pools().disk_used == 100);
}

TEST_CASE("async preparation blocks only for the residual") {
    ToolManager tm(ResourcePools::make(100, 1000, 1009));
    const auto id = tm.prepare_async(ProgramId("p"), {"x", 1, 30}, 0).env_id;
    CHECK(tm.residual_wait(id, 10) == 20);
    CHECK(tm.residual_wait(id, 30) == 0);
    CHECK(tm.residual_wait(id, 45) == 0);
    CHECK(code_of([&] { tm.prepare_async(ProgramId("p"), {"x", 1, 30}, 1); }) == ErrorCode::AlreadyPreparing);
    CHECK(tm.find_env(ProgramId("p"), "x") != nullptr);
    CHECK(tm.find_env(ProgramId("p"), "y") == nullptr);
}

TEST_CASE("execute_tool") {
    ToolManager tm(ResourcePools::make(100, 1000, 1009));
    Rng rng(1);
    const auto id = tm.acquire_env(ProgramId("p"), {"x", 1, 10}, 0).env_id;
    try {
        tm.execute_tool(id, ProgramId("p"), sampler::Deterministic{12}, rng, 4);
        FAIL("expected EnvNotReady");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::EnvNotReady);
        CHECK(std::string(e.what()).find("6") != std::string::npos);
    }
    tm.advance(10);
    CHECK(tm.env(id)->status == PrepStatus::Ready);
    CHECK(tm.execute_tool(id, ProgramId("p"), sampler::Deterministic{12}, rng, 10) == 22);
    CHECK(code_of([&] { tm.execute_tool(id, ProgramId("q"), sampler::Deterministic{1}, rng, 10); }) ==
          ErrorCode::WrongOwner);
}

TEST_CASE("exponential draws are memoryless") {
    Rng rng(7);
    const LatencySampler s = sampler::Exponential{20.0};
    std::vector<Tick> v;
    for (int i = 0; i < 100000; ++i) v.push_back(draw_latency(s, rng));
    const Tick a = 15, b = 10;
    double gt_a = 0, gt_ab = 0, gt_b = 0;
    for (auto x : v) {
        gt_a += x > a;
        gt_ab += x > a + b;
        gt_b += x > b;
    }
    const double cond = gt_ab / gt_a, marg = gt_b / static_cast<double>(v.size());
    CHECK(std::abs(cond - marg) < 0.02);
    CHECK(*std::min_element(v.begin(), v.end()) >= 1);
}

TEST_CASE("heavy-tailed draws match their quantiles") {
    Rng rng(9);
    const LatencySampler s = sampler::HeavyTailed{2, 30, 120, 600};
    std::vector<Tick> v;
    for (int i = 0; i < 100000; ++i) v.push_back(draw_latency(s, rng));
    CHECK(quantile(v, 0.50) == doctest::Approx(2).epsilon(0.10));
    CHECK(quantile(v, 0.95) == doctest::Approx(30).epsilon(0.10));
    CHECK(quantile(v, 0.99) == doctest::Approx(120).epsilon(0.10));
    CHECK(*std::max_element(v.begin(), v.end()) <= 600);
    CHECK(code_of([] { validate_sampler(sampler::HeavyTailed{10, 5, 120, 600}); }) == ErrorCode::InvalidSpec);
    CHECK(code_of([] { validate_sampler(sampler::Deterministic{0}); }) == ErrorCode::InvalidSpec);
}

TEST_CASE("release hooks reclaim everything once") {
    ToolManager tm(ResourcePools::make(100, 1000, 1009));
    tm.acquire_env(ProgramId("p"), {"a", 10, 0}, 0);
    tm.acquire_env(ProgramId("p"), {"b", 5, 0}, 0);
    tm.acquire_env(ProgramId("q"), {"a", 3, 0}, 0);
    auto running = make_program(ProgramId("p"), 1, {});
    CHECK(code_of([&] { tm.release_hooks(running); }) == ErrorCode::ProgramStillActive);
    const auto r = tm.release_hooks(stopped("p"));
    CHECK(r.disk_units == 15);
    CHECK(r.ports == 2);
    CHECK(r.environments == 2);
    CHECK(tm.release_hooks(stopped("p")) == Reclaimed{});
    CHECK(tm.pools().disk_used == 3);
    CHECK(tm.live_count() == 1);
    CHECK(tm.disk_peak() == 18);
}

TEST_CASE("leak audit") {
    ToolManager tm(ResourcePools::make(1000, 1000, 1099));
    ProgramRegistry reg;
    std::vector<std::string> envs;
    for (int i = 0; i < 10; ++i) {
        const ProgramId id("p" + std::to_string(i));
        reg.create_program(id, 1, {});
        envs.push_back(tm.acquire_env(id, {"x", 2, 0}, 0).env_id);
        reg.apply(id, event::ReleaseRequested{}, 1);
    }
    CHECK(tm.leak_audit(reg).size() == 10);

    tm.inject_release_failure(envs[3]);
    for (int i = 0; i < 10; ++i) tm.release_hooks(reg.get(ProgramId("p" + std::to_string(i))));
    const auto orphans = tm.leak_audit(reg);
    REQUIRE(orphans.size() == 1);
    CHECK(orphans[0].env_id == envs[3]);
    CHECK(orphans[0].owner == ProgramId("p3"));
}

TEST_CASE("disk conservation and port uniqueness under random churn") {
    ToolManager tm(ResourcePools::make(200, 5000, 5029));
    Rng rng(13);
    std::vector<ProgramId> live;
    int next = 0;
    for (int step = 0; step < 2000; ++step) {
        if (live.empty() || rng.uniform_int(0, 2) != 0) {
            const ProgramId id("p" + std::to_string(next++));
            try {
                tm.acquire_env(id, {"x", rng.uniform_int(1, 12), rng.uniform_int(0, 5)}, step);
                live.push_back(id);
            } catch (const Error& e) {
                CHECK((e.code() == ErrorCode::DiskExhausted || e.code() == ErrorCode::PortsExhausted));
            }
        } else {
            const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(live.size()) - 1));
            tm.release_hooks(stopped(live[k].value));
            live.erase(live.begin() + static_cast<std::ptrdiff_t>(k));
        }
        tm.advance(step);
        CHECK(tm.pools().disk_used == live_disk(tm));
        CHECK(tm.pools().disk_used <= tm.pools().disk_capacity);
        std::set<int> ports;
        for (const auto& [id, e] : tm.environments()) {
            if (e.status == PrepStatus::Released) {
                CHECK_FALSE(e.port.has_value());
                CHECK(e.disk_units == 0);
            } else {
                REQUIRE(e.port.has_value());
                CHECK(ports.insert(*e.port).second);
                CHECK(tm.pools().ports_free.count(*e.port) == 0);
            }
        }
    }
}
