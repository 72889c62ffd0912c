#include <algorithm>
#include <thread>

#include "httplib.h"

#include "progsched/gateway.hpp"

namespace progsched {

using nlohmann::json;

int http_status(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::MissingProgramId:
        case ErrorCode::InvalidArgument:
        case ErrorCode::InvalidSpec:
            return 400;
        case ErrorCode::UnknownProgram:
            return 404;
        case ErrorCode::ProgramStopped:
        case ErrorCode::IllegalTransition:
        case ErrorCode::WrongOwner:
            return 409;
        case ErrorCode::ParkTimeout:
        case ErrorCode::BackendUnhealthy:
        case ErrorCode::DiskExhausted:
        case ErrorCode::PortsExhausted:
            return 503;
        default:
            return 500;
    }
}

namespace {

void send_error(httplib::Response& res, ErrorCode code, const std::string& message) {
    res.status = http_status(code);
    const json body = {{"error", {{"code", error_code_name(code)}, {"message", message}}}};
    res.set_content(body.dump(), "application/json");
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        send_error(res, e.code(), e.what());
    } catch (const json::exception& e) {
        send_error(res, ErrorCode::InvalidArgument, e.what());
    } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(json{{"error", {{"code", "Internal"}, {"message", e.what()}}}}.dump(), "application/json");
    }
}

json parse_object(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::InvalidArgument, "body must be a JSON object");
    return j;
}

}  // namespace

struct GatewayServer::Impl {
    Gateway& gateway;
    httplib::Server server;
    std::thread thread;

    Impl(Gateway& g, std::size_t workers) : gateway(g) {
        server.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
        server.set_read_timeout(600, 0);
        server.set_write_timeout(600, 0);
        server.set_keep_alive_timeout(600);
        server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { res.set_content(gateway.handle_chat(req.body), "application/json"); });
        });
        server.Post("/tools/run", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { res.set_content(gateway.handle_tool(parse_object(req.body)).dump(), "application/json"); });
        });
        server.Post("/programs/release", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto j = parse_object(req.body);
                const auto id = j.value("program_id", std::string());
                if (id.empty()) throw Error(ErrorCode::MissingProgramId, "release needs a nonempty program_id");
                res.set_content(to_json(gateway.handle_release(ProgramId(id))).dump(), "application/json");
            });
        });
        server.Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { res.set_content(gateway.metrics().dump(), "application/json"); });
        });
        server.Get(R"(/programs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                res.set_content(gateway.program_json(ProgramId(req.matches[1].str())).dump(), "application/json");
            });
        });
    }
};

GatewayServer::GatewayServer(Gateway& gateway, std::size_t worker_threads)
    : impl_(std::make_unique<Impl>(gateway, std::max<std::size_t>(1, worker_threads))) {}

GatewayServer::~GatewayServer() { stop(); }

int GatewayServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw Error(ErrorCode::ConfigError, "cannot bind " + host + ":" + std::to_string(port));
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void GatewayServer::listen_blocking(const std::string& host, int port) {
    if (!impl_->server.listen(host, port)) {
        throw Error(ErrorCode::ConfigError, "cannot serve on " + host + ":" + std::to_string(port));
    }
}

void GatewayServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace progsched
