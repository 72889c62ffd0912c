#include "progsched/gateway.hpp"

#include <algorithm>
#include <cstdio>
#include <utility>

#include "httplib.h"

#include "progsched/rng.hpp"

namespace progsched {

using nlohmann::json;

namespace {

// Rough tokenizer stand-in: four characters per token plus a small
// per-message overhead.
TokenCount estimate_prompt_tokens(const json& body) {
    TokenCount chars = 0;
    TokenCount messages = 0;
    const auto it = body.find("messages");
    if (it != body.end() && it->is_array()) {
        for (const auto& m : *it) {
            ++messages;
            const auto c = m.find("content");
            if (c == m.end()) continue;
            chars += static_cast<TokenCount>(c->is_string() ? c->get_ref<const std::string&>().size() : c->dump().size());
        }
    } else if (it != body.end()) {
        chars = static_cast<TokenCount>(it->dump().size());
    }
    return std::max<TokenCount>(1, chars / 4 + 4 * messages);
}

TokenCount completion_tokens_of(const std::string& response) {
    const json r = json::parse(response, nullptr, false);
    if (!r.is_discarded() && r.is_object()) {
        const auto u = r.find("usage");
        if (u != r.end() && u->is_object()) {
            const auto c = u->find("completion_tokens");
            if (c != u->end() && c->is_number_integer()) return std::max<TokenCount>(0, c->get<TokenCount>());
        }
    }
    return static_cast<TokenCount>(response.size() / 4);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

// SimCompletionBackend

SimCompletionBackend::SimCompletionBackend(std::string name, TokenCount capacity)
    : name_(std::move(name)), capacity_(capacity) {
    if (capacity_ < 1) throw Error(ErrorCode::ConfigError, "backend capacity must be >= 1");
}

bool SimCompletionBackend::healthy() const {
    std::lock_guard lock(mu_);
    return healthy_;
}

void SimCompletionBackend::set_healthy(bool healthy) {
    std::lock_guard lock(mu_);
    healthy_ = healthy;
}

std::string SimCompletionBackend::complete(const std::string& body) {
    {
        std::lock_guard lock(mu_);
        if (!healthy_) throw Error(ErrorCode::BackendUnhealthy, "backend " + name_ + " is down");
        last_request_ = body;
        ++requests_;
    }
    const json req = json::parse(body, nullptr, false);
    const std::uint64_t h = fnv1a(body);
    TokenCount n = 16 + static_cast<TokenCount>(h % 112);
    if (!req.is_discarded() && req.contains("max_tokens") && req["max_tokens"].is_number_integer()) {
        n = std::clamp<TokenCount>(req["max_tokens"].get<TokenCount>(), 1, n);
    }
    const TokenCount prompt = req.is_discarded() ? 1 : estimate_prompt_tokens(req);
    json r;
    r["id"] = "cmpl-" + hex64(h);
    r["object"] = "chat.completion";
    r["model"] = !req.is_discarded() && req.contains("model") ? req["model"] : json("sim");
    r["choices"] = json::array({{{"index", 0},
                                 {"message", {{"role", "assistant"}, {"content", "reply " + hex64(h) + " from " + name_}}},
                                 {"finish_reason", "stop"}}});
    r["usage"] = {{"prompt_tokens", prompt}, {"completion_tokens", n}, {"total_tokens", prompt + n}};
    return r.dump();
}

void SimCompletionBackend::on_place(const ProgramId& id, TokenCount tokens) {
    std::lock_guard lock(mu_);
    residents_[id] = tokens;
}

void SimCompletionBackend::on_evict(const ProgramId& id) {
    std::lock_guard lock(mu_);
    residents_.erase(id);
}

TokenCount SimCompletionBackend::active_program_tokens() const {
    std::lock_guard lock(mu_);
    TokenCount total = 0;
    for (const auto& [id, t] : residents_) total += t;
    return total;
}

std::string SimCompletionBackend::last_request() const {
    std::lock_guard lock(mu_);
    return last_request_;
}

std::int64_t SimCompletionBackend::requests() const {
    std::lock_guard lock(mu_);
    return requests_;
}

std::map<ProgramId, TokenCount> SimCompletionBackend::residents() const {
    std::lock_guard lock(mu_);
    return residents_;
}

// HttpCompletionBackend

HttpCompletionBackend::HttpCompletionBackend(std::string base_url, TokenCount capacity)
    : base_url_(std::move(base_url)), capacity_(capacity) {
    if (capacity_ < 1) throw Error(ErrorCode::ConfigError, "backend capacity must be >= 1");
}

bool HttpCompletionBackend::healthy() const {
    std::lock_guard lock(mu_);
    return healthy_;
}

std::string HttpCompletionBackend::complete(const std::string& body) {
    httplib::Client client(base_url_);
    client.set_read_timeout(600, 0);
    auto res = client.Post("/v1/chat/completions", body, "application/json");
    std::lock_guard lock(mu_);
    if (!res) {
        healthy_ = false;
        throw Error(ErrorCode::BackendUnhealthy, "backend " + base_url_ + " unreachable");
    }
    healthy_ = res->status < 500;
    if (!healthy_) throw Error(ErrorCode::BackendUnhealthy, "backend " + base_url_ + " returned " + std::to_string(res->status));
    return res->body;
}

void HttpCompletionBackend::on_place(const ProgramId& id, TokenCount tokens) {
    std::lock_guard lock(mu_);
    residents_[id] = tokens;
}

void HttpCompletionBackend::on_evict(const ProgramId& id) {
    std::lock_guard lock(mu_);
    residents_.erase(id);
}

TokenCount HttpCompletionBackend::active_program_tokens() const {
    std::lock_guard lock(mu_);
    TokenCount total = 0;
    for (const auto& [id, t] : residents_) total += t;
    return total;
}

// Gateway

json to_json(const ReleaseAck& ack) {
    return {{"program_id", ack.id.value},
            {"status", "STOPPED"},
            {"already_stopped", ack.already_stopped},
            {"cancelled_tool", ack.cancelled_tool},
            {"reclaimed",
             {{"kv_tokens", ack.kv_tokens},
              {"disk_units", ack.resources.disk_units},
              {"ports", ack.resources.ports},
              {"environments", ack.resources.environments}}}};
}

Gateway::Gateway(GatewayConfig config, std::vector<std::unique_ptr<CompletionBackend>> backends)
    : config_(std::move(config)),
      backends_(std::move(backends)),
      tools_(ResourcePools::make(config_.disk_capacity, config_.port_first, config_.port_last)) {
    config_.scheduler.validate();
    validate_sampler(config_.tool_latency);
    if (backends_.empty()) throw Error(ErrorCode::ConfigError, "gateway needs at least one backend");
    if (config_.env_disk_units < 1 || config_.env_prep_latency < 0) {
        throw Error(ErrorCode::ConfigError, "environment needs disk_units >= 1 and prep_latency >= 0");
    }
    if (!config_.runner) {
        const TokenCount n = config_.default_result_tokens;
        config_.runner = [n](const std::string& command, const std::string&) {
            return ToolOutput{"ok: " + command, n};
        };
    }
    std::lock_guard lock(mu_);
    last_snapshots_ = poll_locked();
}

Gateway::~Gateway() { stop_clock(); }

std::string Gateway::extract_program_id(json& body) const {
    std::string id;
    const auto extra = body.find("extra");
    if (extra != body.end() && extra->is_object() && extra->contains("program_id")) {
        const auto& v = (*extra)["program_id"];
        if (v.is_string()) id = v.get<std::string>();
        extra->erase("program_id");
        if (extra->empty()) body.erase("extra");
    } else if (body.contains("program_id")) {
        const auto& v = body["program_id"];
        if (v.is_string()) id = v.get<std::string>();
        body.erase("program_id");
    }
    if (id.empty()) {
        throw Error(ErrorCode::MissingProgramId,
                    "chat requests must carry a nonempty string at extra.program_id (or extra_body={\"program_id\": ...})");
    }
    return id;
}

void Gateway::place_locked(const ProgramId& id) {
    const auto& p = registry_.get(id);
    if (p.placement) backends_[*p.placement]->on_place(id, p.context_tokens);
}

void Gateway::pause_locked(const ProgramId& id) {
    const auto& p = registry_.get(id);
    if (!p.status.active()) return;
    auto& rt = runtime_[id];
    if (rt.busy) {
        rt.pause_pending = true;
        return;
    }
    const BackendId from = *p.placement;
    registry_.apply(id, event::PauseRequested{}, now_);
    backends_[from]->on_evict(id);
    queue_.upsert(view_of(registry_.get(id)));
    ++pauses_;
}

std::vector<BackendSnapshot> Gateway::poll_locked() {
    std::vector<BackendSnapshot> out;
    out.reserve(backends_.size());
    for (BackendId b = 0; b < backends_.size(); ++b) {
        const auto& be = *backends_[b];
        BackendSnapshot s;
        s.id = b;
        s.endpoint = be.endpoint();
        s.healthy = be.healthy();
        s.cache_capacity = be.capacity();
        s.active_program_tokens = be.active_program_tokens();
        s.taken_at = now_;
        out.push_back(std::move(s));
    }
    for (const auto& s : out) {
        if (s.healthy) continue;
        std::vector<ProgramId> placed;
        registry_.for_each([&](const AgentProgram& p) {
            if (p.status.active() && p.placement == s.id) placed.push_back(p.id);
        });
        for (const auto& id : placed) pause_locked(id);
    }
    return out;
}

std::vector<BackendSnapshot> Gateway::poll_backends() {
    std::lock_guard lock(mu_);
    last_snapshots_ = poll_locked();
    cv_.notify_all();
    return last_snapshots_;
}

void Gateway::schedule_locked() {
    last_snapshots_ = poll_locked();
    ClusterSnapshot cluster;
    cluster.taken_at = now_;
    for (const auto& s : last_snapshots_) {
        if (s.taken_at < now_) ++stale_uses_;
        BackendView v;
        v.id = s.id;
        v.capacity = *s.cache_capacity;
        v.healthy = s.healthy;
        cluster.backends.push_back(std::move(v));
    }
    registry_.for_each([&](const AgentProgram& p) {
        if (p.status.active() && p.placement) cluster.backends[*p.placement].programs.push_back(view_of(p));
    });
    const auto batch = schedule_tick(cluster, queue_, config_.scheduler, now_);
    for (const auto& d : batch.decisions) {
        if (d.kind == ScheduleDecision::Kind::Pause) {
            pause_locked(d.program);
        } else if (d.kind == ScheduleDecision::Kind::Restore) {
            // A pause deferred behind an in-flight completion leaves the
            // program active; its restore waits for a later pass.
            if (registry_.get(d.program).status.kind != StatusKind::Paused) continue;
            registry_.apply(d.program, event::RestoreGranted{d.backend}, now_);
            queue_.erase(d.program);
            place_locked(d.program);
            ++restores_;
        }
    }
    cv_.notify_all();
}

void Gateway::wait_active_locked(std::unique_lock<std::mutex>& lock, const ProgramId& id) {
    const auto deadline = std::chrono::steady_clock::now() + config_.park_timeout;
    bool parked = false;
    struct Unpark {
        std::int64_t& gauge;
        bool& flag;
        ~Unpark() {
            if (flag) --gauge;
        }
    } unpark{parked_, parked};
    for (;;) {
        const auto& p = registry_.get(id);
        if (p.status.kind == StatusKind::Stopped) {
            throw Error(ErrorCode::ProgramStopped, "program " + id.value + " was released");
        }
        if (p.status.active()) return;
        if (!parked) {
            parked = true;
            ++parked_;
        }
        if (cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
            const auto& q = registry_.get(id);
            if (q.status.active() || q.status.kind == StatusKind::Stopped) continue;
            ++park_timeouts_;
            throw Error(ErrorCode::ParkTimeout, "program " + id.value + " is still queued; retry later");
        }
    }
}

std::string Gateway::handle_chat(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::InvalidArgument, "chat body must be a JSON object");
    const ProgramId id(extract_program_id(j));
    const TokenCount prompt = estimate_prompt_tokens(j);
    const std::string forward = j.dump();

    std::unique_lock lock(mu_);
    ++chats_;
    if (!registry_.contains(id)) {
        registry_.create_program(id, prompt, {}, now_);
        runtime_[id];
        queue_.upsert(view_of(registry_.get(id)));
        schedule_locked();
    }
    for (;;) {
        wait_active_locked(lock, id);
        const auto& p = registry_.get(id);
        if (p.status.kind == StatusKind::Acting) {
            throw Error(ErrorCode::IllegalTransition, "program " + id.value + " has a tool call in flight");
        }
        if (prompt > p.context_tokens) {
            registry_.apply(id, event::TokensDecoded{prompt - p.context_tokens}, now_);
            place_locked(id);
        }
        const BackendId b = *registry_.get(id).placement;
        auto& rt = runtime_[id];
        rt.busy = true;
        lock.unlock();
        std::string response;
        bool unhealthy = false;
        try {
            response = backends_[b]->complete(forward);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::BackendUnhealthy) {
                lock.lock();
                rt.busy = false;
                throw;
            }
            unhealthy = true;
        }
        lock.lock();
        rt.busy = false;
        const bool pause_pending = std::exchange(rt.pause_pending, false);
        if (unhealthy) {
            // Re-park: the program goes back to the queue and waits for a
            // healthy replica.
            pause_locked(id);
            schedule_locked();
            continue;
        }
        const auto& q = registry_.get(id);
        if (q.status.kind == StatusKind::Reasoning) {
            registry_.apply(id, event::TokensDecoded{completion_tokens_of(response)}, now_);
            place_locked(id);
            if (pause_pending) pause_locked(id);
        }
        cv_.notify_all();
        return response;
    }
}

json Gateway::handle_tool(const json& request) {
    if (!request.is_object()) throw Error(ErrorCode::InvalidArgument, "tool body must be a JSON object");
    const auto pid = request.value("program_id", std::string());
    if (pid.empty()) throw Error(ErrorCode::MissingProgramId, "tool calls must carry a nonempty program_id");
    const auto command = request.value("command", std::string());
    const auto sandbox = request.value("sandbox", std::string("default"));
    const ProgramId id(pid);

    std::unique_lock lock(mu_);
    if (!registry_.contains(id)) throw Error(ErrorCode::UnknownProgram, "no program " + id.value);
    wait_active_locked(lock, id);
    if (registry_.get(id).status.kind == StatusKind::Acting) {
        throw Error(ErrorCode::IllegalTransition, "program " + id.value + " already has a tool call in flight");
    }
    const ToolEnvironment* env = tools_.find_env(id, sandbox);
    if (env == nullptr) env = &tools_.acquire_env(id, {sandbox, config_.env_disk_units, config_.env_prep_latency}, now_);
    const std::string env_id = env->env_id;

    const Tick issued = now_;
    registry_.apply(id, event::ToolCallIssued{env_id}, now_);
    ++tool_calls_;
    auto& rt = runtime_[id];
    rt.tool_in_flight = true;
    rt.cancel_tool = false;
    const auto cancelled = [&] {
        if (!rt.cancel_tool) return false;
        rt.tool_in_flight = false;
        rt.cancel_tool = false;
        return true;
    };
    const auto stopped = [&] {
        return Error(ErrorCode::ProgramStopped, "program " + id.value + " was released during its tool call");
    };

    // A still-preparing environment delays the call by its residual wait.
    const Tick prep_wait = tools_.residual_wait(env_id, now_);
    cv_.wait(lock, [&] { return rt.cancel_tool || tools_.residual_wait(env_id, now_) == 0; });
    if (cancelled()) throw stopped();
    tools_.advance(now_);
    Rng rng = Rng::stream(config_.seed, "tool/" + id.value, static_cast<std::uint64_t>(rt.tool_calls++));
    const Tick done = tools_.execute_tool(env_id, id, config_.tool_latency, rng, now_);

    lock.unlock();
    const ToolOutput out = config_.runner(command, sandbox);
    lock.lock();

    cv_.wait(lock, [&] { return rt.cancel_tool || now_ >= done; });
    if (cancelled()) throw stopped();
    rt.tool_in_flight = false;
    registry_.apply(id, event::ToolResultReady{out.result_tokens}, now_);
    place_locked(id);
    cv_.notify_all();
    return {{"program_id", id.value},
            {"output", out.output},
            {"result_tokens", out.result_tokens},
            {"env_id", env_id},
            {"issued_at", issued},
            {"completed_at", now_},
            {"prep_wait", prep_wait}};
}

ReleaseAck Gateway::handle_release(const ProgramId& id) {
    std::lock_guard lock(mu_);
    const auto* p = registry_.find(id);
    if (p == nullptr) throw Error(ErrorCode::UnknownProgram, "no program " + id.value);
    ReleaseAck ack;
    ack.id = id;
    if (p->status.kind == StatusKind::Stopped) {
        ack.already_stopped = true;
        return ack;
    }
    if (p->placement) {
        ack.kv_tokens = p->context_tokens;
        backends_[*p->placement]->on_evict(id);
    }
    auto& rt = runtime_[id];
    if (rt.tool_in_flight) {
        rt.cancel_tool = true;
        ack.cancelled_tool = true;
    }
    rt.pause_pending = false;
    registry_.apply(id, event::ReleaseRequested{}, now_);
    queue_.erase(id);
    ack.resources = tools_.release_hooks(registry_.get(id));
    schedule_locked();
    return ack;
}

void Gateway::tick() {
    std::lock_guard lock(mu_);
    ++now_;
    tools_.advance(now_);
    if (now_ % config_.scheduler.delta_t == 0) schedule_locked();
    cv_.notify_all();
}

void Gateway::start_clock(std::chrono::milliseconds per_tick) {
    stop_clock();
    {
        std::lock_guard lock(mu_);
        clock_stop_ = false;
    }
    clock_ = std::thread([this, per_tick] {
        std::unique_lock lock(mu_);
        while (!clock_cv_.wait_for(lock, per_tick, [this] { return clock_stop_; })) {
            lock.unlock();
            tick();
            lock.lock();
        }
    });
}

void Gateway::stop_clock() {
    {
        std::lock_guard lock(mu_);
        clock_stop_ = true;
    }
    clock_cv_.notify_all();
    if (clock_.joinable()) clock_.join();
}

Tick Gateway::now() const {
    std::lock_guard lock(mu_);
    return now_;
}

std::optional<AgentProgram> Gateway::program(const ProgramId& id) const {
    std::lock_guard lock(mu_);
    const auto* p = registry_.find(id);
    if (p == nullptr) return std::nullopt;
    return *p;
}

json Gateway::program_json(const ProgramId& id) const {
    std::lock_guard lock(mu_);
    const auto* p = registry_.find(id);
    if (p == nullptr) throw Error(ErrorCode::UnknownProgram, "no program " + id.value);
    json envs = json::array();
    for (const auto& [env_id, env] : tools_.environments()) {
        if (env.owner == id && env.status != PrepStatus::Released) envs.push_back(env_id);
    }
    return {{"program_id", p->id.value},
            {"status", to_string(p->status.kind)},
            {"phase", to_string(p->phase)},
            {"context_tokens", p->context_tokens},
            {"prompt_tokens", p->prompt_tokens},
            {"total_tokens", p->total_tokens},
            {"step_count", p->step_count},
            {"backend", p->placement ? json(*p->placement) : json(nullptr)},
            {"acting_since", p->status.acting_since},
            {"paused_since", p->status.paused_since},
            {"queued", queue_.contains(id)},
            {"tool_envs", std::move(envs)}};
}

json Gateway::metrics() const {
    std::lock_guard lock(mu_);
    json status = {{"REASONING", 0}, {"ACTING", 0}, {"PAUSED", 0}, {"STOPPED", 0}};
    std::int64_t steps = 0;
    registry_.for_each([&](const AgentProgram& p) {
        status[std::string(to_string(p.status.kind))] = status[std::string(to_string(p.status.kind))].get<int>() + 1;
        steps += p.step_count;
    });
    json backends = json::array();
    for (const auto& s : last_snapshots_) {
        backends.push_back({{"id", s.id},
                            {"endpoint", s.endpoint},
                            {"healthy", s.healthy},
                            {"cache_capacity", s.cache_capacity.value_or(0)},
                            {"active_program_tokens", s.active_program_tokens},
                            {"taken_at", s.taken_at}});
    }
    return {{"now", now_},
            {"programs", status},
            {"queue", queue_.size()},
            {"parked", parked_},
            {"total_steps", steps},
            {"chat_requests", chats_},
            {"tool_calls", tool_calls_},
            {"pauses", pauses_},
            {"restores", restores_},
            {"park_timeouts", park_timeouts_},
            {"disk_used", tools_.pools().disk_used},
            {"disk_peak", tools_.disk_peak()},
            {"live_environments", tools_.live_count()},
            {"stale_snapshot_uses", stale_uses_},
            {"backends", std::move(backends)}};
}

std::vector<Orphan> Gateway::leak_audit() const {
    std::lock_guard lock(mu_);
    return tools_.leak_audit(registry_);
}

std::int64_t Gateway::stale_snapshot_uses() const {
    std::lock_guard lock(mu_);
    return stale_uses_;
}

}  // namespace progsched
