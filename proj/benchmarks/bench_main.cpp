#include <benchmark/benchmark.h>

#include <random>
#include <string>
#include <vector>

#include "progsched/scheduler.hpp"
#include "progsched/simulator.hpp"
#include "progsched/workload.hpp"

using namespace progsched;

namespace {

std::vector<EvictionCandidate> candidates(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenCount> size(100, 20000);
    std::bernoulli_distribution acting(0.6);
    std::vector<EvictionCandidate> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        EvictionCandidate c;
        c.id = ProgramId("p" + std::to_string(i));
        c.context_tokens = size(rng);
        c.phase = acting(rng) ? ProgramPhase::Acting : ProgramPhase::Reasoning;
        c.acting_since = static_cast<Tick>(i);
        out.push_back(std::move(c));
    }
    return out;
}

void BM_SelectEvictions(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto cands = candidates(n, 7);
    double total = 0;
    for (const auto& c : cands) total += c.released();
    for (auto _ : state) {
        auto r = select_evictions(cands, total / 4);
        benchmark::DoNotOptimize(r);
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SelectEvictions)->RangeMultiplier(4)->Range(16, 4096)->Complexity();

ClusterSnapshot cluster(std::size_t backends, std::size_t per_backend, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenCount> size(500, 8000);
    std::bernoulli_distribution acting(0.5);
    ClusterSnapshot c;
    c.taken_at = 100;
    for (std::size_t b = 0; b < backends; ++b) {
        BackendView v;
        v.id = b;
        v.capacity = 65536;
        for (std::size_t i = 0; i < per_backend; ++i) {
            ProgramView p;
            p.id = ProgramId("b" + std::to_string(b) + "-" + std::to_string(i));
            p.context_tokens = size(rng);
            const bool a = acting(rng);
            p.phase = a ? ProgramPhase::Acting : ProgramPhase::Reasoning;
            p.status = a ? StatusKind::Acting : StatusKind::Reasoning;
            p.acting_since = 100 - static_cast<Tick>(i % 50);
            p.placement = b;
            v.programs.push_back(std::move(p));
        }
        c.backends.push_back(std::move(v));
    }
    return c;
}

void BM_ScheduleTick(benchmark::State& state) {
    const auto per = static_cast<std::size_t>(state.range(0));
    const auto snap = cluster(4, per, 11);
    GlobalWaitQueue base;
    for (std::size_t i = 0; i < per; ++i) {
        ProgramView p;
        p.id = ProgramId("q" + std::to_string(i));
        p.context_tokens = 1000 + static_cast<TokenCount>(i * 37 % 5000);
        p.phase = ProgramPhase::Reasoning;
        p.status = StatusKind::Paused;
        p.paused_since = static_cast<Tick>(i);
        base.upsert(p);
    }
    SchedulerConfig cfg;
    for (auto _ : state) {
        GlobalWaitQueue q = base;
        auto batch = schedule_tick(snap, q, cfg, 100);
        benchmark::DoNotOptimize(batch);
    }
}
BENCHMARK(BM_ScheduleTick)->Arg(8)->Arg(32)->Arg(128);

void BM_RunPolicy(benchmark::State& state) {
    const auto trace = generate_trace("mini-swe", static_cast<std::size_t>(state.range(0)), 1);
    SimConfig cfg;
    cfg.policy = static_cast<PolicyKind>(state.range(1));
    for (auto _ : state) {
        auto r = run_policy(trace, cfg);
        benchmark::DoNotOptimize(r.event_hash);
    }
}
BENCHMARK(BM_RunPolicy)
    ->Args({16, static_cast<int>(PolicyKind::ProgramAware)})
    ->Args({16, static_cast<int>(PolicyKind::RequestAware)})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
