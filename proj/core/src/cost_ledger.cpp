#include "progsched/cost_ledger.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace progsched {

std::string_view to_string(CostComponent c) noexcept {
    switch (c) {
        case CostComponent::Decode: return "decode";
        case CostComponent::Prefill: return "prefill";
        case CostComponent::Recompute: return "recompute";
        case CostComponent::Unused: return "unused";
        case CostComponent::Caching: return "caching";
    }
    return "unknown";
}

TokenTicks ComponentTotals::total() const {
    return std::accumulate(by_component.begin(), by_component.end(), TokenTicks{0});
}

void CostLedger::record(const StpSample& s) {
    if (s.tokens < 0) throw Error(ErrorCode::InvalidArgument, "sample tokens must be >= 0");
    if (s.duration <= 0) throw Error(ErrorCode::InvalidArgument, "sample duration must be > 0");
    if (s.component == CostComponent::Unused && s.program) {
        throw Error(ErrorCode::InvalidArgument, "Unused samples carry no program");
    }
    totals_[s.component] += s.tokens * s.duration;
    if (retain_) samples_.push_back(s);
}

void CostLedger::record_resume(TokenCount hit, TokenCount miss) {
    if (hit < 0 || miss < 0) throw Error(ErrorCode::InvalidArgument, "resume tokens must be >= 0");
    hit_tokens_ += hit;
    miss_tokens_ += miss;
    ++resumes_;
}

void CostLedger::merge(const CostLedger& other) {
    for (auto c : kAllComponents) totals_[c] += other.totals_[c];
    hit_tokens_ += other.hit_tokens_;
    miss_tokens_ += other.miss_tokens_;
    resumes_ += other.resumes_;
    if (retain_) samples_.insert(samples_.end(), other.samples_.begin(), other.samples_.end());
}

ComponentTotals fold_samples(std::span<const StpSample> samples) {
    ComponentTotals t;
    for (const auto& s : samples) t[s.component] += s.tokens * s.duration;
    return t;
}

double kv_hit_rate(const CostLedger& ledger) {
    const TokenCount denom = ledger.hit_tokens() + ledger.miss_tokens();
    if (denom == 0) throw Error(ErrorCode::NoPrefillActivity, "no resume-time prefill recorded");
    return static_cast<double>(ledger.hit_tokens()) / static_cast<double>(denom);
}

TokenTicks recompute_cost_of(TokenCount c, TokenCount chunk) {
    if (chunk <= 0) throw Error(ErrorCode::InvalidChunk, "chunk must be >= 1");
    if (c <= 0) return 0;
    // Full chunks contribute chunk*(1 + 2 + ... + q); a trailing partial
    // chunk is held at c for its final tick.
    const TokenCount q = c / chunk;
    TokenTicks cost = chunk * (q * (q + 1) / 2);
    if (c % chunk != 0) cost += c;
    return cost;
}

double imbalance_of(std::span<const TokenCount> footprints, TokenCount capacity) {
    if (footprints.size() < 2) throw Error(ErrorCode::FewerThanTwoBackends, "need at least two backends");
    if (capacity <= 0) throw Error(ErrorCode::InvalidArgument, "capacity must be > 0");
    auto [lo, hi] = std::minmax_element(footprints.begin(), footprints.end());
    return static_cast<double>(*hi - *lo) / static_cast<double>(capacity);
}

double max_imbalance(std::span<const std::vector<TokenCount>> snapshots, TokenCount capacity) {
    double worst = 0.0;
    for (const auto& snap : snapshots) worst = std::max(worst, imbalance_of(snap, capacity));
    return worst;
}

LatencySummary summarize_latency(std::vector<Tick> samples) {
    LatencySummary out;
    if (samples.empty()) return out;
    std::sort(samples.begin(), samples.end());
    out.count = static_cast<std::int64_t>(samples.size());
    long double sum = 0;
    for (auto v : samples) sum += v;
    out.mean = static_cast<double>(sum / samples.size());
    auto rank = [&](double q) {
        auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(samples.size())));
        idx = std::clamp<std::size_t>(idx, 1, samples.size());
        return static_cast<double>(samples[idx - 1]);
    };
    out.p50 = rank(0.50);
    out.p95 = rank(0.95);
    out.p99 = rank(0.99);
    return out;
}

void write_csv_header(std::ostream& os) {
    os << "tick,backend,resident_tokens";
    for (auto c : kAllComponents) os << ',' << to_string(c);
    os << ",hit_rate,imbalance\n";
}

void write_csv_row(std::ostream& os, const IntervalRow& row) {
    os << row.tick << ',' << row.backend << ',' << row.resident_tokens;
    for (auto c : kAllComponents) os << ',' << row.components[c];
    char buf[64];
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", row.hit_rate, row.imbalance);
    os << buf;
}

}  // namespace progsched
