#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "progsched/program.hpp"
#include "progsched/tool_manager.hpp"

namespace progsched {

struct ToolProfile {
    std::string name;
    std::int64_t disk_units = 1;
    Tick prep_latency = 0;
    LatencySampler sampler = sampler::Deterministic{1};
};

struct TraceStep {
    TokenCount reasoning_tokens = 1;
    Tick tool_latency = 1;  // pre-drawn from the profile's sampler
    TokenCount result_tokens = 0;
};

struct TraceProgram {
    std::string id;
    TokenCount prompt_tokens = 0;
    std::string profile;
    std::vector<TraceStep> steps;

    TokenCount scripted_tokens() const;  // prompt + all decode and result tokens
};

struct ArrivalSpec {
    enum class Kind { ClosedLoop, OpenLoop };
    Kind kind = Kind::ClosedLoop;
    // Closed loop: programs kept in flight; a finished program is replaced
    // by the next one in the trace.
    std::size_t concurrency = 8;
    // Wrap around the trace (with fresh ids) once it is exhausted.
    bool recycle = true;
    // Open loop: one arrival every `interval` ticks; 0 releases everything
    // at tick 0.
    Tick interval = 0;
};

struct WorkloadTrace {
    std::string preset;
    std::uint64_t seed = 0;
    std::vector<ToolProfile> profiles;
    std::vector<TraceProgram> programs;
    ArrivalSpec arrival;
    // Leading prompt tokens common to every program (the system prompt).
    TokenCount shared_prefix_tokens = 0;

    const ToolProfile& profile(const std::string& name) const;
    // Throws Error{InvalidSpec}.
    void validate() const;
};

// Knobs behind the named presets. All token counts are synthetic.
struct TraceOptions {
    std::string preset;
    TokenCount prompt_min = 1200;
    TokenCount prompt_max = 1800;
    TokenCount shared_prefix = 1000;  // part of every prompt
    std::int64_t steps_min = 10;
    std::int64_t steps_max = 20;
    double reasoning_mean = 400.0;  // log-normal
    double reasoning_sigma = 0.5;
    TokenCount result_min = 150;
    TokenCount result_max = 450;
    ToolProfile profile;
    // Deterministic presets draw a fixed per-step duration from
    // [tool_min, tool_max]; otherwise the profile's sampler is used.
    Tick tool_min = 10;
    Tick tool_max = 40;
    bool fixed_tools = true;
};

// "mini-swe", "heavy-init" or "stochastic-tools"; throws Error{UnknownPreset}.
TraceOptions preset_options(const std::string& preset);

WorkloadTrace generate_trace(const std::string& preset, std::size_t n_programs, std::uint64_t seed);
WorkloadTrace generate_trace(const TraceOptions& options, std::size_t n_programs, std::uint64_t seed);

nlohmann::json to_json(const WorkloadTrace& trace);
WorkloadTrace trace_from_json(const nlohmann::json& j);
nlohmann::json sampler_to_json(const LatencySampler& s);
LatencySampler sampler_from_json(const nlohmann::json& j);

}  // namespace progsched
