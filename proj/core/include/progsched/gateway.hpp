#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "progsched/program.hpp"
#include "progsched/scheduler.hpp"
#include "progsched/tool_manager.hpp"

namespace progsched {

// Completion endpoint behind the gateway. Implementations must be safe to
// call from several request threads at once.
class CompletionBackend {
public:
    virtual ~CompletionBackend() = default;

    virtual std::string endpoint() const = 0;
    // Static cache capacity in tokens, fetched once at startup.
    virtual TokenCount capacity() const = 0;
    virtual bool healthy() const = 0;
    // Forwards a completion-style JSON body and returns the raw response
    // body. Throws Error{BackendUnhealthy} when the endpoint is unreachable.
    virtual std::string complete(const std::string& body) = 0;

    // Residency notifications from the gateway.
    virtual void on_place(const ProgramId& id, TokenCount tokens) = 0;
    virtual void on_evict(const ProgramId& id) = 0;
    // Tokens held by placed programs as the backend reports them.
    virtual TokenCount active_program_tokens() const = 0;
};

// Deterministic in-process stand-in for an inference engine. The response
// is a pure function of the request body.
class SimCompletionBackend : public CompletionBackend {
public:
    SimCompletionBackend(std::string name, TokenCount capacity);

    std::string endpoint() const override { return name_; }
    TokenCount capacity() const override { return capacity_; }
    bool healthy() const override;
    std::string complete(const std::string& body) override;
    void on_place(const ProgramId& id, TokenCount tokens) override;
    void on_evict(const ProgramId& id) override;
    TokenCount active_program_tokens() const override;

    void set_healthy(bool healthy);
    // Last body received, for passthrough checks.
    std::string last_request() const;
    std::int64_t requests() const;
    std::map<ProgramId, TokenCount> residents() const;

private:
    std::string name_;
    TokenCount capacity_;
    mutable std::mutex mu_;
    bool healthy_ = true;
    std::string last_request_;
    std::int64_t requests_ = 0;
    std::map<ProgramId, TokenCount> residents_;
};

// Forwards to a real completion-style HTTP endpoint ("http://host:port").
class HttpCompletionBackend : public CompletionBackend {
public:
    HttpCompletionBackend(std::string base_url, TokenCount capacity);

    std::string endpoint() const override { return base_url_; }
    TokenCount capacity() const override { return capacity_; }
    bool healthy() const override;
    std::string complete(const std::string& body) override;
    void on_place(const ProgramId& id, TokenCount tokens) override;
    void on_evict(const ProgramId& id) override;
    TokenCount active_program_tokens() const override;

private:
    std::string base_url_;
    TokenCount capacity_;
    mutable std::mutex mu_;
    bool healthy_ = true;
    std::map<ProgramId, TokenCount> residents_;
};

struct BackendSnapshot {
    BackendId id = 0;
    std::string endpoint;
    bool healthy = true;
    std::optional<TokenCount> cache_capacity;
    TokenCount active_program_tokens = 0;
    Tick taken_at = 0;
};

struct ToolOutput {
    std::string output;
    TokenCount result_tokens = 0;
};

using ToolRunner = std::function<ToolOutput(const std::string& command, const std::string& sandbox)>;

struct GatewayConfig {
    SchedulerConfig scheduler;
    std::chrono::milliseconds park_timeout{30000};
    // Environment profile used for every sandbox.
    std::int64_t env_disk_units = 2;
    Tick env_prep_latency = 0;
    LatencySampler tool_latency = sampler::Deterministic{1};
    std::int64_t disk_capacity = 1'000'000;
    int port_first = 40000;
    int port_last = 49999;
    std::uint64_t seed = 7;
    // Default runner echoes the command and reports this many tokens.
    TokenCount default_result_tokens = 100;
    ToolRunner runner;
};

struct ReleaseAck {
    ProgramId id;
    bool already_stopped = false;
    TokenCount kv_tokens = 0;
    Reclaimed resources;
    bool cancelled_tool = false;
};

nlohmann::json to_json(const ReleaseAck& ack);

// Service surface of the engine. Chat and tool calls block their caller;
// time advances only through tick().
class Gateway {
public:
    Gateway(GatewayConfig config, std::vector<std::unique_ptr<CompletionBackend>> backends);
    ~Gateway();

    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    // Completion-style JSON body carrying extra.program_id (or a top-level
    // program_id). Returns the backend response unchanged. Throws
    // MissingProgramId, ProgramStopped, ParkTimeout, InvalidArgument.
    std::string handle_chat(const std::string& body);

    // {command, sandbox, program_id}. Blocks for the tool's duration in
    // ticks. Throws UnknownProgram, ProgramStopped, InvalidArgument.
    nlohmann::json handle_tool(const nlohmann::json& request);

    // Throws UnknownProgram. A second release acks with nothing reclaimed.
    ReleaseAck handle_release(const ProgramId& id);

    // One snapshot per backend; unhealthy backends have their programs
    // paused back to the queue.
    std::vector<BackendSnapshot> poll_backends();

    // Advances the clock one tick; every delta_t ticks polls and schedules.
    void tick();
    // Drives tick() on a background thread until stop_clock().
    void start_clock(std::chrono::milliseconds per_tick);
    void stop_clock();

    Tick now() const;
    std::optional<AgentProgram> program(const ProgramId& id) const;
    nlohmann::json program_json(const ProgramId& id) const;
    nlohmann::json metrics() const;

    // Programs whose resources are still held after release.
    std::vector<Orphan> leak_audit() const;
    // Scheduler passes that consumed a snapshot older than the pass.
    std::int64_t stale_snapshot_uses() const;

    const CompletionBackend& backend(BackendId id) const { return *backends_.at(id); }
    std::size_t backend_count() const noexcept { return backends_.size(); }

private:
    struct Runtime {
        bool busy = false;            // completion in flight
        bool pause_pending = false;   // pause deferred until it returns
        bool tool_in_flight = false;
        bool cancel_tool = false;
        std::int64_t tool_calls = 0;
    };

    void schedule_locked();
    std::vector<BackendSnapshot> poll_locked();
    void place_locked(const ProgramId& id);
    void pause_locked(const ProgramId& id);
    void wait_active_locked(std::unique_lock<std::mutex>& lock, const ProgramId& id);
    std::string extract_program_id(nlohmann::json& body) const;

    GatewayConfig config_;
    std::vector<std::unique_ptr<CompletionBackend>> backends_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    Tick now_ = 0;
    ProgramRegistry registry_;
    GlobalWaitQueue queue_;
    ToolManager tools_;
    std::map<ProgramId, Runtime> runtime_;
    std::vector<BackendSnapshot> last_snapshots_;
    std::int64_t stale_uses_ = 0;

    std::int64_t chats_ = 0;
    std::int64_t tool_calls_ = 0;
    std::int64_t pauses_ = 0;
    std::int64_t restores_ = 0;
    std::int64_t park_timeouts_ = 0;
    std::int64_t parked_ = 0;

    std::thread clock_;
    bool clock_stop_ = false;
    std::condition_variable clock_cv_;
};

// HTTP binding of a Gateway:
//   POST /v1/chat/completions, POST /tools/run, POST /programs/release,
//   GET /metrics, GET /programs/{id}.
// Errors return {"error": {"code": <ErrorCode name>, "message": ...}}.
class GatewayServer {
public:
    // Parked requests hold a worker each, so the pool should exceed the
    // number of concurrent client sessions.
    explicit GatewayServer(Gateway& gateway, std::size_t worker_threads = 128);
    ~GatewayServer();

    GatewayServer(const GatewayServer&) = delete;
    GatewayServer& operator=(const GatewayServer&) = delete;

    // Binds and serves on a background thread. Port 0 picks a free port.
    // Returns the bound port; throws Error{ConfigError} if binding fails.
    int start(const std::string& host, int port);
    // Serves on the calling thread until stop() is called elsewhere.
    void listen_blocking(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

int http_status(ErrorCode code) noexcept;

}  // namespace progsched
