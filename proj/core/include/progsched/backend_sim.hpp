#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "progsched/cost_ledger.hpp"
#include "progsched/program.hpp"

namespace progsched {

enum class SimEventKind {
    ProgramArrived,
    PrefillChunkDone,
    DecodeToken,
    StepEmissionComplete,
    ToolCallIssued,
    ToolResultReady,
    EvictionPerformed,
    Preempted,
    ResumeHit,
    ResumeMiss,
    Paused,
    Restored,
    Released,
};

std::string_view to_string(SimEventKind k) noexcept;

struct SimEvent {
    Tick tick = 0;
    SimEventKind kind = SimEventKind::DecodeToken;
    std::string program;  // empty for backend-level aggregates
    std::optional<BackendId> backend;
    TokenCount tokens = 0;

    bool operator==(const SimEvent&) const = default;
};

// One NDJSON record per event: {"tick","kind","program","backend","tokens"}.
std::string to_ndjson(const SimEvent& ev);

// Totally ordered event log. Always hashes; optionally keeps events in
// memory and/or streams NDJSON.
class EventLog {
public:
    explicit EventLog(bool keep = false, std::ostream* out = nullptr) : keep_(keep), out_(out) {}

    void append(SimEvent ev);

    std::uint64_t hash() const noexcept { return hash_; }
    std::uint64_t size() const noexcept { return count_; }
    const std::vector<SimEvent>& events() const noexcept { return events_; }

private:
    bool keep_;
    std::ostream* out_;
    std::vector<SimEvent> events_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
    std::uint64_t count_ = 0;
};

// What the engine does when an allocation cannot be served after idle
// caches (if allowed) are reclaimed.
enum class PressureMode {
    Stall,          // the allocation waits for a later tick
    PreemptLatest,  // the most recently admitted running request is evicted
};

struct ResumeOutcome {
    bool hit = false;
    TokenCount cached = 0;     // resident tokens reused
    TokenCount recompute = 0;  // historical tokens re-prefilled
    TokenCount fresh = 0;      // never-computed tokens prefilled
};

// Per-tick report back to the cluster simulator.
struct AdvanceResult {
    std::vector<ProgramId> decoded;          // emitted one token this tick
    std::vector<ProgramId> segment_done;     // finished their decode budget
    std::vector<ProgramId> evicted_idle;     // idle caches reclaimed for space
    std::vector<ProgramId> preempted;        // running requests evicted
    std::vector<std::pair<ProgramId, ResumeOutcome>> admitted;  // left the waiting queue
    TokenCount stalled_tokens = 0;           // demand that could not be allocated
    TokenCount recompute_tokens = 0;
};

// A data-parallel replica: KV pool, FIFO chunked-prefill queue, decoders
// emitting one token per tick, and an optional engine-side waiting queue for
// request-level admission.
class SimBackend {
public:
    struct Options {
        BackendId id = 0;
        TokenCount capacity = 0;
        TokenCount chunk = 256;
        PressureMode pressure = PressureMode::Stall;
        bool evict_idle = true;
        // Every context starts with the same `shared_prefix` tokens, which
        // the pool stores once no matter how many caches hold them.
        TokenCount shared_prefix = 0;
    };

    explicit SimBackend(Options opts);

    BackendId id() const noexcept { return opts_.id; }
    TokenCount capacity() const noexcept { return opts_.capacity; }
    TokenCount chunk() const noexcept { return opts_.chunk; }
    bool healthy() const noexcept { return healthy_; }
    void set_healthy(bool h) { healthy_ = h; }

    // Schedules prefill of the uncached part of a `context`-token program of
    // which `historical` tokens were computed at some point. Resident
    // historical tokens are reused; evicted ones are recomputed. After the
    // prefill the program decodes `decode_budget` tokens. Throws
    // Error{AlreadyResident} if the program already has work here.
    ResumeOutcome admit(const ProgramId& program, TokenCount context, TokenCount historical,
                        TokenCount decode_budget, Tick now, CostLedger& ledger, EventLog& log);

    // Request-level path: the request waits in the engine queue until the
    // pool can hold its uncached tokens.
    void submit(const ProgramId& program, TokenCount context, TokenCount historical, TokenCount decode_budget);

    // Drops the program's KV and any queued work. Throws Error{NotResident}
    // when nothing is held. Returns the freed tokens; sunk chunks of a
    // cancelled prefill are reported through `wasted`.
    TokenCount evict(const ProgramId& program, Tick now, EventLog& log, TokenCount* wasted = nullptr);

    // Cancels the program's queued work but leaves its KV resident and
    // reclaimable ahead of any other idle cache; a later admit() here reuses
    // whatever survived. Returns the tokens prefilled by a cancelled job.
    TokenCount release(const ProgramId& program, Tick now, EventLog& log);
    bool is_released(const ProgramId& program) const { return released_.count(program) != 0; }
    // Takes a released cache back into the reserved set.
    void retain(const ProgramId& program) { released_.erase(program); }

    // Like evict(), but a no-op for programs with nothing on this backend.
    TokenCount drop(const ProgramId& program, Tick now, EventLog& log);

    // Pins an idle cache against reclamation until `until`.
    void pin_until(const ProgramId& program, Tick until);
    void unpin(const ProgramId& program) { pinned_until_.erase(program); }
    // True when the program's idle cache is held against reclamation at
    // `now`: reserved by the scheduler or pinned. Released and plain LRU
    // caches are reclaimable and count as free memory.
    bool holds_reserved(const ProgramId& program, Tick now) const;

    AdvanceResult advance(Tick now, CostLedger& ledger, EventLog& log);

    // Tokens of the program's context held here, shared prefix included.
    TokenCount resident(const ProgramId& program) const;
    // Pool usage: private tokens plus one copy of the shared prefix.
    TokenCount resident_total() const noexcept { return private_total_ + shared_extent(); }
    TokenCount free_tokens() const noexcept { return opts_.capacity - resident_total(); }
    // Resident tokens plus outstanding prefill of queued and waiting work.
    TokenCount committed_total() const;
    std::size_t waiting_count() const noexcept { return waiting_.size(); }
    bool is_busy(const ProgramId& program) const;  // decoding or prefill queued or waiting
    bool is_decoding(const ProgramId& program) const { return decoding_.count(program) != 0; }
    bool has_job(const ProgramId& program) const;

    // Idle residents in eviction order: released caches first, then the
    // rest, each oldest use first.
    std::vector<ProgramId> idle_programs() const;
    const std::map<ProgramId, TokenCount>& residents() const noexcept { return resident_; }

private:
    struct Job {
        ProgramId program;
        TokenCount recompute_left = 0;
        TokenCount prefill_left = 0;
        TokenCount decode_budget = 0;
        TokenCount processed = 0;
        std::uint64_t seq = 0;
    };
    struct Waiting {
        ProgramId program;
        TokenCount context = 0;
        TokenCount historical = 0;
        TokenCount decode_budget = 0;
    };
    struct Decoder {
        TokenCount remaining = 0;
        std::uint64_t seq = 0;
    };

    bool reclaim(TokenCount need, Tick now, EventLog& log, AdvanceResult& res, const ProgramId* requester);
    bool preempt_latest(Tick now, EventLog& log, AdvanceResult& res, const ProgramId& requester);
    void add_resident(const ProgramId& p, TokenCount n);
    TokenCount shared_extent() const noexcept;
    TokenCount drop_cache(const ProgramId& p, Tick now, EventLog& log);
    void note_resume(const ProgramId& program, TokenCount historical, const ResumeOutcome& out, Tick now,
                     CostLedger& ledger, EventLog& log);
    ResumeOutcome plan(const ProgramId& program, TokenCount context, TokenCount historical,
                       TokenCount decode_budget, Job& job) const;

    Options opts_;
    bool healthy_ = true;
    std::map<ProgramId, TokenCount> resident_;
    std::map<ProgramId, Tick> last_used_;
    std::map<ProgramId, Tick> pinned_until_;
    std::set<ProgramId> released_;
    std::deque<Job> prefill_;
    std::map<ProgramId, Decoder> decoding_;
    std::deque<Waiting> waiting_;
    TokenCount private_total_ = 0;
    std::size_t full_prefix_ = 0;  // caches holding the whole shared prefix
    std::uint64_t seq_ = 0;
};

}  // namespace progsched
