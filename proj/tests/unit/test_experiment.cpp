#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "progsched/experiment.hpp"

using namespace progsched;
namespace fs = std::filesystem;

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

ExperimentSpec small_spec() {
    ExperimentSpec s;
    s.preset = "mini-swe";
    s.n_programs = 8;
    s.seed = 3;
    s.arrival.concurrency = 4;
    s.arrival.recycle = false;
    s.sim.capacity = 40000;
    s.sim.scheduler.chunk = 64;
    s.sim.duration = 100000;
    return s;
}

}  // namespace

TEST_CASE("same spec twice gives identical hashes") {
    const auto a = run_experiment(small_spec());
    const auto b = run_experiment(small_spec());
    CHECK(a.spec_hash == b.spec_hash);
    CHECK(a.event_hash == b.event_hash);
    CHECK(a.report_hash == b.report_hash);
    CHECK(summary_json(a) == summary_json(b));
    auto other = small_spec();
    other.seed = 4;
    CHECK(spec_hash(other) != a.spec_hash);
}

TEST_CASE("duration 0 gives an empty report") {
    auto s = small_spec();
    s.sim.duration = 0;
    const auto r = run_experiment(s);
    CHECK(r.metrics.duration_ticks == 0);
    CHECK(r.metrics.total_steps == 0);
    CHECK(r.metrics.throughput_steps_per_min == 0.0);
    CHECK(r.metrics.cost_breakdown.total() == 0);
}

TEST_CASE("spec round-trips through JSON") {
    auto s = small_spec();
    s.sim.policy = PolicyKind::TtlPin;
    s.sim.scheduler.decay = DecaySpec::exponential(0.5);
    s.sim.ttl.constant = 17;
    const auto back = spec_from_json(to_json(s));
    CHECK(to_json(back) == to_json(s));
    CHECK(spec_hash(back) == spec_hash(s));
    CHECK(code_of([] { spec_from_json(nlohmann::json{{"policy", "bogus"}}); }) == ErrorCode::ConfigError);
}

TEST_CASE("output files") {
    const auto dir = fs::temp_directory_path() / "progsched_experiment_test";
    fs::remove_all(dir);
    auto s = small_spec();
    s.output_dir = dir.string();
    const auto r = run_experiment(s);
    CHECK(fs::exists(dir / "summary.json"));
    CHECK(fs::exists(dir / "events.ndjson"));
    std::ifstream csv(dir / "metrics.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.rfind("tick,backend,resident_tokens", 0) == 0);
    std::ifstream ev(dir / "events.ndjson");
    std::size_t lines = 0;
    for (std::string line; std::getline(ev, line);) ++lines;
    CHECK(lines == r.run.event_count);
    fs::remove_all(dir);
}

TEST_CASE("compare") {
    auto base = small_spec();
    const auto reports = run_sweep(base, {PolicyKind::ProgramAware, PolicyKind::RequestAware}, {2, 4}, 2);
    REQUIRE(reports.size() == 4);
    const auto c = compare(reports);
    CHECK(c.rows.size() == 4);
    bool has_stability = false, has_ordering = false;
    for (const auto& v : c.verdicts) {
        has_stability |= v.name.rfind("stability", 0) == 0;
        has_ordering |= v.name.rfind("ordering", 0) == 0;
    }
    CHECK(has_stability);
    CHECK(has_ordering);
    CHECK(c.table().find("steps/min") != std::string::npos);

    const auto one = compare({reports[0]});
    CHECK(one.rows.size() == 1);
    CHECK(one.verdicts.empty());

    auto other = small_spec();
    other.preset = "heavy-init";
    const auto heavy = run_experiment(other);
    CHECK(code_of([&] { compare({reports[0], heavy}); }) == ErrorCode::IncomparableReports);
}

TEST_CASE("replication verdict across seeds") {
    std::vector<nlohmann::json> sums;
    for (std::uint64_t seed : {1, 2}) {
        auto s = small_spec();
        s.seed = seed;
        sums.push_back(summary_json(run_experiment(s)));
    }
    const auto c = compare_summaries(sums);
    bool found = false;
    for (const auto& v : c.verdicts) found |= v.name.rfind("replication", 0) == 0;
    CHECK(found);
}

TEST_CASE("compare verdicts follow the thresholds") {
    auto row = [](const std::string& policy, std::size_t n, double spm) {
        return nlohmann::json{{"preset", "mini-swe"}, {"policy", policy}, {"concurrency", n}, {"seed", 1},
                              {"metrics",
                               {{"throughput_steps_per_min", spm},
                                {"kv_hit_rate", 1.0},
                                {"max_imbalance", 0.0},
                                {"cost_breakdown", {{"caching", 0}, {"recompute", 0}}},
                                {"per_step_latency", {{"p95", 0.0}}}}}};
    };
    const auto good = compare_summaries({row("program-aware", 8, 10), row("program-aware", 16, 9.5),
                                         row("request-aware", 8, 9), row("request-aware", 16, 5)});
    CHECK(good.all_pass());
    const auto bad = compare_summaries({row("program-aware", 8, 10), row("program-aware", 16, 8.5),
                                        row("request-aware", 8, 11), row("request-aware", 16, 5)});
    CHECK_FALSE(bad.all_pass());
}
