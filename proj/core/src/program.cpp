#include "progsched/program.hpp"

#include <sstream>

namespace progsched {

std::string_view to_string(ProgramPhase phase) noexcept {
    return phase == ProgramPhase::Reasoning ? "REASONING" : "ACTING";
}

std::string_view to_string(StatusKind kind) noexcept {
    switch (kind) {
        case StatusKind::Reasoning: return "REASONING";
        case StatusKind::Acting: return "ACTING";
        case StatusKind::Paused: return "PAUSED";
        case StatusKind::Stopped: return "STOPPED";
    }
    return "UNKNOWN";
}

std::string_view event_name(const ProgramEvent& ev) noexcept {
    struct Visitor {
        std::string_view operator()(const event::ToolCallIssued&) const { return "ToolCallIssued"; }
        std::string_view operator()(const event::ToolResultReady&) const { return "ToolResultReady"; }
        std::string_view operator()(const event::TokensDecoded&) const { return "TokensDecoded"; }
        std::string_view operator()(const event::PauseRequested&) const { return "PauseRequested"; }
        std::string_view operator()(const event::RestoreGranted&) const { return "RestoreGranted"; }
        std::string_view operator()(const event::ReleaseRequested&) const { return "ReleaseRequested"; }
    };
    return std::visit(Visitor{}, ev);
}

AgentProgram make_program(ProgramId id, TokenCount prompt_tokens, std::set<std::string> tool_envs,
                          Tick now) {
    if (prompt_tokens < 0) {
        throw Error(ErrorCode::InvalidArgument, "prompt_tokens must be nonnegative");
    }
    AgentProgram p;
    p.id = std::move(id);
    p.prompt_tokens = prompt_tokens;
    p.context_tokens = prompt_tokens;
    p.total_tokens = prompt_tokens;
    p.tool_envs = std::move(tool_envs);
    p.phase = ProgramPhase::Reasoning;
    p.status.kind = StatusKind::Paused;
    p.status.paused_since = now;
    return p;
}

namespace {

[[noreturn]] void illegal(const AgentProgram& p, const ProgramEvent& ev) {
    std::ostringstream os;
    os << "program " << p.id.value << ": " << event_name(ev) << " not allowed from "
       << to_string(p.status.kind);
    throw Error(ErrorCode::IllegalTransition, os.str());
}

void require_nonnegative(TokenCount n) {
    if (n < 0) throw Error(ErrorCode::InvalidArgument, "token payload must be nonnegative");
}

StatusKind status_for(ProgramPhase phase) {
    return phase == ProgramPhase::Reasoning ? StatusKind::Reasoning : StatusKind::Acting;
}

}  // namespace

void apply_in_place(AgentProgram& p, const ProgramEvent& ev, Tick now) {
    const StatusKind kind = p.status.kind;
    if (kind == StatusKind::Stopped) illegal(p, ev);

    if (const auto* e = std::get_if<event::TokensDecoded>(&ev)) {
        require_nonnegative(e->n);
        if (kind != StatusKind::Reasoning) illegal(p, ev);
        p.context_tokens += e->n;
        p.total_tokens += e->n;
    } else if (std::holds_alternative<event::ToolCallIssued>(ev)) {
        if (kind != StatusKind::Reasoning) illegal(p, ev);
        p.phase = ProgramPhase::Acting;
        p.status.kind = StatusKind::Acting;
        p.status.acting_since = now;
        ++p.step_count;
    } else if (const auto* e = std::get_if<event::ToolResultReady>(&ev)) {
        require_nonnegative(e->result_tokens);
        // A paused program's tool keeps running off-GPU; its result lands
        // while it waits and flips the phase it will resume into.
        if (p.phase != ProgramPhase::Acting || (kind != StatusKind::Acting && kind != StatusKind::Paused)) {
            illegal(p, ev);
        }
        p.context_tokens += e->result_tokens;
        p.total_tokens += e->result_tokens;
        p.phase = ProgramPhase::Reasoning;
        if (kind == StatusKind::Acting) p.status.kind = StatusKind::Reasoning;
    } else if (std::holds_alternative<event::PauseRequested>(ev)) {
        if (!p.status.active()) illegal(p, ev);
        p.status.kind = StatusKind::Paused;
        p.status.paused_since = now;
        p.placement.reset();
    } else if (const auto* e = std::get_if<event::RestoreGranted>(&ev)) {
        if (kind != StatusKind::Paused) illegal(p, ev);
        p.status.kind = status_for(p.phase);
        p.placement = e->backend;
    } else if (std::holds_alternative<event::ReleaseRequested>(ev)) {
        p.status.kind = StatusKind::Stopped;
        p.placement.reset();
    }
}

AgentProgram apply_event(AgentProgram p, const ProgramEvent& ev, Tick now) {
    apply_in_place(p, ev, now);
    return p;
}

const AgentProgram& ProgramRegistry::create_program(const ProgramId& id, TokenCount prompt_tokens,
                                                    std::set<std::string> tool_specs, Tick now) {
    if (programs_.count(id)) {
        throw Error(ErrorCode::DuplicateId, "program " + id.value + " already registered");
    }
    auto [it, _] = programs_.emplace(id, make_program(id, prompt_tokens, std::move(tool_specs), now));
    return it->second;
}

const AgentProgram& ProgramRegistry::apply(const ProgramId& id, const ProgramEvent& ev, Tick now) {
    auto it = programs_.find(id);
    if (it == programs_.end()) throw Error(ErrorCode::UnknownProgram, id.value);
    apply_in_place(it->second, ev, now);
    return it->second;
}

const AgentProgram& ProgramRegistry::get(const ProgramId& id) const {
    auto it = programs_.find(id);
    if (it == programs_.end()) throw Error(ErrorCode::UnknownProgram, id.value);
    return it->second;
}

const AgentProgram* ProgramRegistry::find(const ProgramId& id) const {
    auto it = programs_.find(id);
    return it == programs_.end() ? nullptr : &it->second;
}

std::vector<ProgramId> ProgramRegistry::ids_with_status(StatusKind kind) const {
    std::vector<ProgramId> out;
    for (const auto& [id, p] : programs_) {
        if (p.status.kind == kind) out.push_back(id);
    }
    return out;
}

}  // namespace progsched
