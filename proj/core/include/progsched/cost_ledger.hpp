#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "progsched/program.hpp"

namespace progsched {

// Space-time product, in token * tick.
using TokenTicks = std::int64_t;

enum class CostComponent { Decode, Prefill, Recompute, Unused, Caching };

inline constexpr std::array<CostComponent, 5> kAllComponents = {
    CostComponent::Decode, CostComponent::Prefill, CostComponent::Recompute, CostComponent::Unused,
    CostComponent::Caching};

std::string_view to_string(CostComponent c) noexcept;

struct StpSample {
    std::optional<ProgramId> program;
    BackendId backend = 0;
    CostComponent component = CostComponent::Decode;
    TokenCount tokens = 0;
    Tick duration = 1;
};

struct ComponentTotals {
    std::array<TokenTicks, 5> by_component{};

    TokenTicks operator[](CostComponent c) const { return by_component[static_cast<std::size_t>(c)]; }
    TokenTicks& operator[](CostComponent c) { return by_component[static_cast<std::size_t>(c)]; }
    TokenTicks total() const;
    bool operator==(const ComponentTotals&) const = default;
};

// Append-only STP ledger. Accumulators are always maintained; the raw sample
// sequence is retained only when requested (long simulations would otherwise
// hold millions of per-tick samples).
class CostLedger {
public:
    explicit CostLedger(bool retain_samples = true) : retain_(retain_samples) {}

    // Throws Error{InvalidArgument} on tokens < 0, duration <= 0, or an
    // Unused sample that names a program.
    void record(const StpSample& sample);

    // Resume-time accounting for the hit rate: `hit` historical tokens found
    // resident, `miss` historical tokens that had to be re-prefilled.
    void record_resume(TokenCount hit, TokenCount miss);

    ComponentTotals decompose() const { return totals_; }
    TokenTicks total() const { return totals_.total(); }

    TokenCount hit_tokens() const noexcept { return hit_tokens_; }
    TokenCount miss_tokens() const noexcept { return miss_tokens_; }
    std::int64_t resume_count() const noexcept { return resumes_; }

    bool retains_samples() const noexcept { return retain_; }
    const std::vector<StpSample>& samples() const noexcept { return samples_; }

    void merge(const CostLedger& other);

private:
    bool retain_;
    std::vector<StpSample> samples_;
    ComponentTotals totals_;
    TokenCount hit_tokens_ = 0;
    TokenCount miss_tokens_ = 0;
    std::int64_t resumes_ = 0;
};

// Fold of the sample sequence, independent of the running accumulators.
ComponentTotals fold_samples(std::span<const StpSample> samples);

// Throws Error{NoPrefillActivity} when no resume has been recorded.
double kv_hit_rate(const CostLedger& ledger);

// STP of re-prefilling `context_tokens` at `chunk` tokens per tick: the
// footprint after each chunk, summed over the chunks.
TokenTicks recompute_cost_of(TokenCount context_tokens, TokenCount chunk);

// Largest (max - min) / capacity over a sequence of per-backend footprint
// snapshots. Throws Error{FewerThanTwoBackends}.
double max_imbalance(std::span<const std::vector<TokenCount>> snapshots, TokenCount capacity);
double imbalance_of(std::span<const TokenCount> footprints, TokenCount capacity);

struct LatencySummary {
    std::int64_t count = 0;
    double mean = 0.0;
    double p50 = 0.0;
    double p95 = 0.0;
    double p99 = 0.0;
};

// Nearest-rank percentiles.
LatencySummary summarize_latency(std::vector<Tick> samples);

struct IntervalRow {
    Tick tick = 0;
    BackendId backend = 0;
    TokenCount resident_tokens = 0;
    ComponentTotals components;
    double hit_rate = 0.0;
    double imbalance = 0.0;
};

struct MetricsReport {
    double throughput_steps_per_min = 0.0;
    double kv_hit_rate = 0.0;
    double max_imbalance = 0.0;
    LatencySummary per_step_latency;
    ComponentTotals cost_breakdown;
    std::int64_t disk_peak = 0;
    Tick prep_overlap_savings = 0;
    std::int64_t total_steps = 0;
    Tick duration_ticks = 0;
};

void write_csv_header(std::ostream& os);
void write_csv_row(std::ostream& os, const IntervalRow& row);

}  // namespace progsched
