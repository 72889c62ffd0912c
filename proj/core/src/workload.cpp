#include "progsched/workload.hpp"

#include <algorithm>
#include <cmath>

#include "progsched/rng.hpp"

namespace progsched {

using nlohmann::json;

TokenCount TraceProgram::scripted_tokens() const {
    TokenCount total = prompt_tokens;
    for (const auto& s : steps) total += s.reasoning_tokens + s.result_tokens;
    return total;
}

const ToolProfile& WorkloadTrace::profile(const std::string& name) const {
    for (const auto& p : profiles) {
        if (p.name == name) return p;
    }
    throw Error(ErrorCode::InvalidSpec, "trace has no tool profile '" + name + "'");
}

void WorkloadTrace::validate() const {
    if (programs.empty()) throw Error(ErrorCode::InvalidSpec, "trace has no programs");
    if (arrival.kind == ArrivalSpec::Kind::ClosedLoop && arrival.concurrency == 0) {
        throw Error(ErrorCode::InvalidSpec, "closed-loop concurrency must be >= 1");
    }
    if (arrival.interval < 0) throw Error(ErrorCode::InvalidSpec, "arrival interval must be >= 0");
    if (shared_prefix_tokens < 0) throw Error(ErrorCode::InvalidSpec, "shared prefix must be >= 0");
    for (const auto& p : profiles) {
        validate_sampler(p.sampler);
        if (p.disk_units < 1 || p.prep_latency < 0) {
            throw Error(ErrorCode::InvalidSpec, "profile '" + p.name + "' has invalid disk or prep latency");
        }
    }
    for (const auto& p : programs) {
        (void)profile(p.profile);
        if (p.prompt_tokens < shared_prefix_tokens || p.steps.empty()) {
            throw Error(ErrorCode::InvalidSpec,
                        "program " + p.id + " needs a prompt covering the shared prefix and at least one step");
        }
        for (const auto& s : p.steps) {
            if (s.reasoning_tokens < 1 || s.tool_latency < 1 || s.result_tokens < 0) {
                throw Error(ErrorCode::InvalidSpec, "program " + p.id + " has an invalid step");
            }
        }
    }
}

TraceOptions preset_options(const std::string& preset) {
    TraceOptions o;
    o.preset = preset;
    if (preset == "mini-swe") {
        o.profile = {"mini-swe", 2, 5, sampler::Deterministic{20}};
    } else if (preset == "heavy-init") {
        o.profile = {"openhands", 10, 60, sampler::Deterministic{20}};
    } else if (preset == "stochastic-tools") {
        o.profile = {"stochastic", 2, 5, sampler::HeavyTailed{2.0, 30.0, 120.0, 600.0}};
        o.fixed_tools = false;
    } else {
        throw Error(ErrorCode::UnknownPreset, "unknown preset '" + preset +
                                                  "' (expected mini-swe, heavy-init or stochastic-tools)");
    }
    return o;
}

WorkloadTrace generate_trace(const std::string& preset, std::size_t n_programs, std::uint64_t seed) {
    return generate_trace(preset_options(preset), n_programs, seed);
}

namespace {

double standard_normal(Rng& rng) {
    // Box-Muller on the portable uniform; 1 - u keeps the log argument > 0.
    const double u1 = 1.0 - rng.uniform();
    const double u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

WorkloadTrace generate_trace(const TraceOptions& o, std::size_t n_programs, std::uint64_t seed) {
    if (n_programs < 1) throw Error(ErrorCode::InvalidArgument, "n_programs must be >= 1");
    if (o.shared_prefix < 0 || o.shared_prefix > o.prompt_min) {
        throw Error(ErrorCode::InvalidArgument, "shared prefix must lie within every prompt");
    }
    validate_sampler(o.profile.sampler);
    WorkloadTrace t;
    t.preset = o.preset;
    t.seed = seed;
    t.shared_prefix_tokens = o.shared_prefix;
    t.profiles.push_back(o.profile);
    const double mu = std::log(o.reasoning_mean) - 0.5 * o.reasoning_sigma * o.reasoning_sigma;
    for (std::size_t i = 0; i < n_programs; ++i) {
        TraceProgram p;
        p.id = "p" + std::to_string(i);
        p.profile = o.profile.name;
        Rng shape = Rng::stream(seed, "shape", i);
        p.prompt_tokens = shape.uniform_int(o.prompt_min, o.prompt_max);
        const auto n_steps = shape.uniform_int(o.steps_min, o.steps_max);
        Rng reasoning = Rng::stream(seed, "reasoning", i);
        Rng results = Rng::stream(seed, "result", i);
        Rng tools = Rng::stream(seed, "tool/" + o.profile.name, i);
        for (std::int64_t s = 0; s < n_steps; ++s) {
            TraceStep step;
            const double r = std::exp(mu + o.reasoning_sigma * standard_normal(reasoning));
            step.reasoning_tokens = std::max<TokenCount>(1, std::llround(r));
            step.result_tokens = results.uniform_int(o.result_min, o.result_max);
            step.tool_latency = o.fixed_tools ? tools.uniform_int(o.tool_min, o.tool_max)
                                              : draw_latency(o.profile.sampler, tools);
            p.steps.push_back(step);
        }
        t.programs.push_back(std::move(p));
    }
    return t;
}

json sampler_to_json(const LatencySampler& s) {
    if (const auto* d = std::get_if<sampler::Deterministic>(&s)) return {{"kind", "deterministic"}, {"ticks", d->ticks}};
    if (const auto* e = std::get_if<sampler::Exponential>(&s)) return {{"kind", "exponential"}, {"mean", e->mean}};
    const auto& h = std::get<sampler::HeavyTailed>(s);
    return {{"kind", "heavy-tailed"}, {"p50", h.p50}, {"p95", h.p95}, {"p99", h.p99}, {"cap", h.cap}};
}

LatencySampler sampler_from_json(const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "deterministic") return sampler::Deterministic{j.at("ticks").get<Tick>()};
    if (kind == "exponential") return sampler::Exponential{j.at("mean").get<double>()};
    if (kind == "heavy-tailed") {
        return sampler::HeavyTailed{j.at("p50").get<double>(), j.at("p95").get<double>(), j.at("p99").get<double>(),
                                    j.at("cap").get<double>()};
    }
    throw Error(ErrorCode::InvalidSpec, "unknown sampler kind '" + kind + "'");
}

json to_json(const WorkloadTrace& t) {
    json j;
    j["preset"] = t.preset;
    j["seed"] = t.seed;
    j["shared_prefix_tokens"] = t.shared_prefix_tokens;
    j["arrival"] = {{"kind", t.arrival.kind == ArrivalSpec::Kind::ClosedLoop ? "closed-loop" : "open-loop"},
                    {"concurrency", t.arrival.concurrency},
                    {"recycle", t.arrival.recycle},
                    {"interval", t.arrival.interval}};
    j["profiles"] = json::array();
    for (const auto& p : t.profiles) {
        j["profiles"].push_back({{"name", p.name},
                                 {"disk_units", p.disk_units},
                                 {"prep_latency", p.prep_latency},
                                 {"sampler", sampler_to_json(p.sampler)}});
    }
    j["programs"] = json::array();
    for (const auto& p : t.programs) {
        json steps = json::array();
        for (const auto& s : p.steps) steps.push_back({s.reasoning_tokens, s.tool_latency, s.result_tokens});
        j["programs"].push_back({{"id", p.id}, {"prompt_tokens", p.prompt_tokens}, {"profile", p.profile},
                                 {"steps", std::move(steps)}});
    }
    return j;
}

WorkloadTrace trace_from_json(const json& j) {
    try {
        WorkloadTrace t;
        t.preset = j.at("preset").get<std::string>();
        t.seed = j.at("seed").get<std::uint64_t>();
        t.shared_prefix_tokens = j.value("shared_prefix_tokens", TokenCount{0});
        const auto& a = j.at("arrival");
        t.arrival.kind =
            a.at("kind").get<std::string>() == "open-loop" ? ArrivalSpec::Kind::OpenLoop : ArrivalSpec::Kind::ClosedLoop;
        t.arrival.concurrency = a.at("concurrency").get<std::size_t>();
        t.arrival.recycle = a.value("recycle", true);
        t.arrival.interval = a.value("interval", Tick{0});
        for (const auto& p : j.at("profiles")) {
            t.profiles.push_back({p.at("name").get<std::string>(), p.at("disk_units").get<std::int64_t>(),
                                  p.at("prep_latency").get<Tick>(), sampler_from_json(p.at("sampler"))});
        }
        for (const auto& p : j.at("programs")) {
            TraceProgram tp;
            tp.id = p.at("id").get<std::string>();
            tp.prompt_tokens = p.at("prompt_tokens").get<TokenCount>();
            tp.profile = p.at("profile").get<std::string>();
            for (const auto& s : p.at("steps")) {
                tp.steps.push_back({s.at(0).get<TokenCount>(), s.at(1).get<Tick>(), s.at(2).get<TokenCount>()});
            }
            t.programs.push_back(std::move(tp));
        }
        t.validate();
        return t;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidSpec, std::string("malformed trace: ") + e.what());
    }
}

}  // namespace progsched
