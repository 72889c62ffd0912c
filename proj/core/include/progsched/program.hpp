#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "progsched/error.hpp"

namespace progsched {

using Tick = std::int64_t;
using TokenCount = std::int64_t;
using BackendId = std::uint32_t;

struct ProgramId {
    std::string value;

    ProgramId() = default;
    explicit ProgramId(std::string v) : value(std::move(v)) {}

    auto operator<=>(const ProgramId&) const = default;
    bool operator==(const ProgramId&) const = default;
};

enum class ProgramPhase { Reasoning, Acting };

enum class StatusKind { Reasoning, Acting, Paused, Stopped };

// Lifecycle status. acting_since is the tick at which the current tool call
// started (reset per call); paused_since is meaningful only while Paused.
struct ProgramStatus {
    StatusKind kind = StatusKind::Paused;
    Tick acting_since = 0;
    Tick paused_since = 0;

    bool active() const noexcept {
        return kind == StatusKind::Reasoning || kind == StatusKind::Acting;
    }
    bool operator==(const ProgramStatus&) const = default;
};

std::string_view to_string(ProgramPhase phase) noexcept;
std::string_view to_string(StatusKind kind) noexcept;

struct AgentProgram {
    ProgramId id;
    TokenCount prompt_tokens = 0;
    TokenCount context_tokens = 0;
    std::set<std::string> tool_envs;
    std::optional<BackendId> placement;
    // Pre-pause phase is retained while Paused; Restore resumes it.
    ProgramPhase phase = ProgramPhase::Reasoning;
    ProgramStatus status;
    std::int64_t step_count = 0;
    TokenCount total_tokens = 0;

    bool operator==(const AgentProgram&) const = default;
};

namespace event {
struct ToolCallIssued {
    std::string tool_id;
};
struct ToolResultReady {
    TokenCount result_tokens = 0;
};
struct TokensDecoded {
    TokenCount n = 0;
};
struct PauseRequested {};
struct RestoreGranted {
    BackendId backend = 0;
};
struct ReleaseRequested {};
}  // namespace event

using ProgramEvent = std::variant<event::ToolCallIssued, event::ToolResultReady, event::TokensDecoded,
                                  event::PauseRequested, event::RestoreGranted, event::ReleaseRequested>;

std::string_view event_name(const ProgramEvent& ev) noexcept;

// New programs start Paused with no placement; admission goes through the
// same Restore path as re-admission.
AgentProgram make_program(ProgramId id, TokenCount prompt_tokens, std::set<std::string> tool_envs,
                          Tick now = 0);

// Pure transition function. Throws Error{IllegalTransition} naming the
// rejected edge, or Error{InvalidArgument} on negative payloads.
AgentProgram apply_event(AgentProgram program, const ProgramEvent& ev, Tick now);

// Same transition applied in place; every check runs before any field
// changes, so a throw leaves `program` untouched.
void apply_in_place(AgentProgram& program, const ProgramEvent& ev, Tick now);

// Owns every program ever created by one engine instance. Ids of stopped
// programs stay registered so they are never reused.
class ProgramRegistry {
public:
    const AgentProgram& create_program(const ProgramId& id, TokenCount prompt_tokens,
                                       std::set<std::string> tool_specs, Tick now = 0);

    const AgentProgram& apply(const ProgramId& id, const ProgramEvent& ev, Tick now);

    bool contains(const ProgramId& id) const { return programs_.count(id) != 0; }
    const AgentProgram& get(const ProgramId& id) const;
    const AgentProgram* find(const ProgramId& id) const;

    std::size_t size() const noexcept { return programs_.size(); }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (const auto& [id, p] : programs_) fn(p);
    }

    std::vector<ProgramId> ids_with_status(StatusKind kind) const;

private:
    std::map<ProgramId, AgentProgram> programs_;
};

}  // namespace progsched

template <>
struct std::hash<progsched::ProgramId> {
    std::size_t operator()(const progsched::ProgramId& id) const noexcept {
        return std::hash<std::string>{}(id.value);
    }
};
