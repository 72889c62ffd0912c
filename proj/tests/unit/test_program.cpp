#include "doctest.h"

#include "progsched/program.hpp"
#include "progsched/rng.hpp"

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

AgentProgram reasoning(TokenCount c) {
    auto p = make_program(ProgramId("p"), c, {});
    return apply_event(p, event::RestoreGranted{0}, 0);
}

}  // namespace

TEST_CASE("create_program starts Paused with no placement") {
    ProgramRegistry reg;
    const auto& p = reg.create_program(ProgramId("p1"), 512, {"docker:repoA"});
    CHECK(p.status.kind == StatusKind::Paused);
    CHECK_FALSE(p.placement.has_value());
    CHECK(p.context_tokens == 512);
    CHECK(p.step_count == 0);
    CHECK(p.tool_envs == std::set<std::string>{"docker:repoA"});
}

TEST_CASE("duplicate id is rejected") {
    ProgramRegistry reg;
    reg.create_program(ProgramId("p1"), 512, {});
    CHECK(code_of([&] { reg.create_program(ProgramId("p1"), 1, {}); }) == ErrorCode::DuplicateId);
}

TEST_CASE("empty prompt is legal") {
    ProgramRegistry reg;
    const auto& p = reg.create_program(ProgramId("p2"), 0, {});
    CHECK(p.context_tokens == 0);
    CHECK(p.status.kind == StatusKind::Paused);
}

TEST_CASE("TokensDecoded adds to context") {
    const auto p = apply_event(reasoning(100), event::TokensDecoded{50}, 1);
    CHECK(p.status.kind == StatusKind::Reasoning);
    CHECK(p.context_tokens == 150);
    CHECK(p.total_tokens == 150);
}

TEST_CASE("ToolResultReady extends context and returns to Reasoning") {
    auto p = apply_event(reasoning(100), event::TokensDecoded{50}, 1);
    p = apply_event(p, event::ToolCallIssued{"t"}, 2);
    CHECK(p.status.kind == StatusKind::Acting);
    CHECK(p.status.acting_since == 2);
    CHECK(p.step_count == 1);
    p = apply_event(p, event::ToolResultReady{30}, 5);
    CHECK(p.status.kind == StatusKind::Reasoning);
    CHECK(p.phase == ProgramPhase::Reasoning);
    CHECK(p.context_tokens == 180);
}

TEST_CASE("Stopped is terminal") {
    const auto p = apply_event(reasoning(10), event::ReleaseRequested{}, 1);
    CHECK(p.status.kind == StatusKind::Stopped);
    CHECK_FALSE(p.placement.has_value());
    CHECK(code_of([&] { apply_event(p, event::TokensDecoded{1}, 2); }) == ErrorCode::IllegalTransition);
    CHECK(code_of([&] { apply_event(p, event::RestoreGranted{0}, 2); }) == ErrorCode::IllegalTransition);
}

TEST_CASE("illegal edges name the event and leave the program untouched") {
    auto p = make_program(ProgramId("p"), 10, {});
    const auto before = p;
    try {
        apply_in_place(p, event::TokensDecoded{1}, 3);
        FAIL("expected IllegalTransition");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::IllegalTransition);
        CHECK(std::string(e.what()).find("TokensDecoded") != std::string::npos);
        CHECK(std::string(e.what()).find("PAUSED") != std::string::npos);
    }
    CHECK(p == before);
    CHECK(code_of([&] { apply_event(p, event::PauseRequested{}, 1); }) == ErrorCode::IllegalTransition);
}

TEST_CASE("negative payloads are rejected") {
    CHECK(code_of([] { apply_event(reasoning(1), event::TokensDecoded{-1}, 0); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("a paused program's tool result flips the resume phase") {
    auto p = apply_event(reasoning(10), event::ToolCallIssued{"t"}, 1);
    p = apply_event(p, event::PauseRequested{}, 2);
    p = apply_event(p, event::ToolResultReady{5}, 3);
    CHECK(p.status.kind == StatusKind::Paused);
    CHECK(p.phase == ProgramPhase::Reasoning);
    p = apply_event(p, event::RestoreGranted{1}, 4);
    CHECK(p.status.kind == StatusKind::Reasoning);
    CHECK(p.placement == std::optional<BackendId>(1));
}

TEST_CASE("random legal sequences conserve tokens, keep placement iff active, replay identically") {
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed);
        auto run = [&](Rng r) {
            auto p = make_program(ProgramId("p"), 100, {});
            TokenCount added = 0;
            std::int64_t steps = 0;
            for (Tick t = 1; t < 300; ++t) {
                std::vector<ProgramEvent> legal;
                const auto k = p.status.kind;
                if (k == StatusKind::Reasoning) {
                    legal.push_back(event::TokensDecoded{r.uniform_int(0, 20)});
                    legal.push_back(event::ToolCallIssued{"t"});
                }
                if (k == StatusKind::Acting || (k == StatusKind::Paused && p.phase == ProgramPhase::Acting)) {
                    legal.push_back(event::ToolResultReady{r.uniform_int(0, 20)});
                }
                if (p.status.active()) legal.push_back(event::PauseRequested{});
                if (k == StatusKind::Paused) legal.push_back(event::RestoreGranted{static_cast<BackendId>(r.uniform_int(0, 3))});
                const auto ev = legal[static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(legal.size()) - 1))];
                const TokenCount before = p.context_tokens;
                const auto before_steps = p.step_count;
                apply_in_place(p, ev, t);
                if (const auto* d = std::get_if<event::TokensDecoded>(&ev)) added += d->n;
                if (const auto* d = std::get_if<event::ToolResultReady>(&ev)) added += d->result_tokens;
                if (std::holds_alternative<event::ToolCallIssued>(ev)) ++steps;
                CHECK(p.context_tokens >= before);
                CHECK(p.step_count - before_steps <= 1);
                CHECK(p.placement.has_value() == p.status.active());
            }
            CHECK(p.context_tokens == 100 + added);
            CHECK(p.step_count == steps);
            return p;
        };
        CHECK(run(rng) == run(rng));
    }
}

TEST_CASE("registry reports unknown ids") {
    ProgramRegistry reg;
    CHECK(code_of([&] { reg.get(ProgramId("x")); }) == ErrorCode::UnknownProgram);
    CHECK(reg.find(ProgramId("x")) == nullptr);
    reg.create_program(ProgramId("a"), 1, {});
    reg.create_program(ProgramId("b"), 1, {});
    reg.apply(ProgramId("a"), event::RestoreGranted{0}, 1);
    CHECK(reg.ids_with_status(StatusKind::Paused) == std::vector<ProgramId>{ProgramId("b")});
    CHECK(reg.ids_with_status(StatusKind::Reasoning) == std::vector<ProgramId>{ProgramId("a")});
}
