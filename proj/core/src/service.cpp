#include "scenepainter/service.hpp"

// Bursts of clients stepping the same session must queue, not be refused.
#define CPPHTTPLIB_LISTEN_BACKLOG 128
#include <httplib.h>

#include <condition_variable>
#include <ctime>
#include <map>
#include <mutex>
#include <regex>
#include <thread>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/eval.hpp"
#include "scenepainter/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace scenepainter::service {

std::string to_string(Status s) {
    switch (s) {
        case Status::Constructing: return "constructing";
        case Status::Ready: return "ready";
        case Status::Stepping: return "stepping";
        case Status::Refining: return "refining";
        case Status::Error: return "error";
    }
    return "error";
}

namespace {

Status status_from_string(const std::string& s) {
    if (s == "constructing") return Status::Constructing;
    if (s == "ready") return Status::Ready;
    if (s == "stepping") return Status::Stepping;
    if (s == "refining") return Status::Refining;
    return Status::Error;
}

std::string now_utc() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string numbered(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", i);
    return buf;
}

bool valid_id(const std::string& id) {
    static const std::regex re("[A-Za-z0-9_-]{1,64}");
    return std::regex_match(id, re);
}

std::string base64_decode(const std::string& in) {
    static const std::string chars = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    int val = 0, bits = -8;
    for (unsigned char c : in) {
        if (c == '=' || std::isspace(c)) continue;
        const auto pos = chars.find(static_cast<char>(c));
        if (pos == std::string::npos) throw Error(ErrorCode::IoError, "invalid base64 payload");
        val = (val << 6) + static_cast<int>(pos);
        bits += 6;
        if (bits >= 0) {
            out.push_back(static_cast<char>((val >> bits) & 0xFF));
            bits -= 8;
        }
    }
    return out;
}

json error_body(const std::string& code, const std::string& message) { return {{"code", code}, {"message", message}}; }

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, const Error& e) {
    reply(res, http_status(e.code()), error_body(std::string(to_string(e.code())), e.detail()));
}

std::optional<json> read_session_doc(const fs::path& dir) {
    try {
        if (!fs::exists(dir / "session.json")) return std::nullopt;
        return json::parse(read_file(dir / "session.json"));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace

json to_json(const SessionManifest& m) {
    json j{{"id", m.id},
           {"status", to_string(m.status)},
           {"frame_count", m.frame_count},
           {"graph_version", m.graph_version},
           {"created", m.created},
           {"updated", m.updated}};
    if (!m.error_code.empty()) j["error"] = error_body(m.error_code, m.error);
    return j;
}

int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownSession: return 404;
        case ErrorCode::SessionBusy: return 409;
        case ErrorCode::ImageTooLarge: return 413;
        case ErrorCode::TrajectoryExhausted:
        case ErrorCode::InvalidInstruction:
        case ErrorCode::UnknownHandle:
        case ErrorCode::MutedEndpoint:
        case ErrorCode::SegmentationEmpty:
        case ErrorCode::UnknownToken:
        case ErrorCode::AllUnknownWithoutPrompt: return 422;
        case ErrorCode::DuplicateHandle:
        case ErrorCode::MissingParentRegion:
        case ErrorCode::InvalidEdgeKind:
        case ErrorCode::DuplicateEdge:
        case ErrorCode::InvalidGraph:
        case ErrorCode::MaskSizeMismatch:
        case ErrorCode::MaskSubsetViolation:
        case ErrorCode::NotLevelThree:
        case ErrorCode::UnknownNode:
        case ErrorCode::UnknownEdge:
        case ErrorCode::CorruptMask:
        case ErrorCode::CorruptDocument:
        case ErrorCode::SchemaVersionMismatch:
        case ErrorCode::EmptyImage:
        case ErrorCode::EmptyGraph:
        case ErrorCode::InvalidConfig:
        case ErrorCode::IoError: return 400;
        default: return 500;
    }
}

struct Service::Impl {
    ServiceConfig config;
    pipeline::Backends backends;
    httplib::Server server;

    mutable std::mutex mu;
    std::condition_variable idle;
    int running = 0;
    std::map<std::string, SessionManifest> sessions;
    std::vector<std::thread> workers;

    Impl(ServiceConfig c, pipeline::Backends b) : config(std::move(c)), backends(std::move(b)) {
        fs::create_directories(config.root);
        scan();
        routes();
    }

    ~Impl() {
        server.stop();
        for (auto& w : workers)
            if (w.joinable()) w.join();
    }

    fs::path dir_of(const std::string& id) const { return config.root / id; }

    void persist(const SessionManifest& m) const {
        try {
            write_file_atomic(dir_of(m.id) / "manifest.json", to_json(m).dump(1));
        } catch (const Error&) {
        }
    }

    // Sessions found on disk at startup. Anything that was mid-construction
    // when the process died is marked failed; mid-step sessions are ready
    // again because the last committed state is on disk.
    void scan() {
        for (const auto& entry : fs::directory_iterator(config.root)) {
            if (!entry.is_directory()) continue;
            const auto id = entry.path().filename().string();
            if (!valid_id(id)) continue;
            SessionManifest m;
            m.id = id;
            if (auto prev = read_file_json(entry.path() / "manifest.json")) {
                m.created = prev->value("created", std::string{});
                m.status = status_from_string(prev->value("status", std::string("error")));
            }
            if (auto doc = read_session_doc(entry.path())) {
                m.status = m.status == Status::Error ? Status::Error : Status::Ready;
                refresh_counts(m, *doc);
            } else if (fs::exists(entry.path() / "manifest.json")) {
                m.status = Status::Error;
                m.error_code = std::string(to_string(ErrorCode::IoError));
                m.error = "construction did not finish";
            } else {
                continue;
            }
            if (m.created.empty()) m.created = now_utc();
            m.updated = now_utc();
            sessions[id] = m;
            persist(m);
        }
    }

    static std::optional<json> read_file_json(const fs::path& p) {
        try {
            if (!fs::exists(p)) return std::nullopt;
            return json::parse(read_file(p));
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }

    static void refresh_counts(SessionManifest& m, const json& doc) {
        m.frame_count = static_cast<int>(doc.value("frames", json::array()).size());
        m.graph_version = doc.value("graph_version", 0);
    }

    std::optional<SessionManifest> get(const std::string& id) const {
        std::lock_guard lock(mu);
        auto it = sessions.find(id);
        if (it == sessions.end()) return std::nullopt;
        return it->second;
    }

    void update(const std::string& id, Status status, const std::optional<json>& doc = std::nullopt,
                const std::string& code = {}, const std::string& message = {}) {
        std::lock_guard lock(mu);
        auto& m = sessions[id];
        m.status = status;
        m.updated = now_utc();
        if (doc) refresh_counts(m, *doc);
        m.error_code = code;
        m.error = message;
        persist(m);
    }

    template <typename F>
    void spawn(F&& task) {
        std::lock_guard lock(mu);
        ++running;
        workers.emplace_back([this, task = std::forward<F>(task)]() mutable {
            {
                // Destroy the task, and any lease it owns, before reporting idle.
                auto owned = std::move(task);
                owned();
            }
            std::lock_guard inner(mu);
            --running;
            idle.notify_all();
        });
    }

    SessionManifest require(const std::string& id) const {
        auto m = get(id);
        if (!m) throw Error(ErrorCode::UnknownSession, "no session '" + id + "'");
        return *m;
    }

    // ---------------------------------------------------------------------
    // Handlers

    void create(const httplib::Request& req, httplib::Response& res) {
        std::string png, id;
        json spec_doc, config_doc = json::object();
        try {
            if (req.is_multipart_form_data()) {
                if (!req.has_file("image") || !req.has_file("spec"))
                    throw Error(ErrorCode::InvalidConfig, "multipart body needs 'image' and 'spec' parts");
                png = req.get_file_value("image").content;
                spec_doc = json::parse(req.get_file_value("spec").content);
                if (req.has_file("config")) config_doc = json::parse(req.get_file_value("config").content);
                if (req.has_file("id")) id = req.get_file_value("id").content;
            } else {
                const auto body = json::parse(req.body);
                png = base64_decode(body.at("image_base64").get<std::string>());
                spec_doc = body.at("spec");
                if (body.contains("config")) config_doc = body.at("config");
                id = body.value("id", std::string{});
            }
        } catch (const json::exception& ex) {
            throw Error(ErrorCode::CorruptDocument, std::string("request body: ") + ex.what());
        }

        const Image image = decode_png(reinterpret_cast<const std::uint8_t*>(png.data()), png.size());
        if (image.height() > config.max_image_side || image.width() > config.max_image_side)
            throw Error(ErrorCode::ImageTooLarge, std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                                                      " exceeds " + std::to_string(config.max_image_side));
        json merged = pipeline::to_json(config.defaults);
        if (!config_doc.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be an object");
        merged.update(config_doc);
        auto session_config = pipeline::session_config_from_json(merged);
        session_config.max_image_side = std::min(session_config.max_image_side, config.max_image_side);
        const auto spec = pipeline::scene_spec_from_json(spec_doc, image.height(), image.width());
        graph::build_graph(image.height(), image.width(), spec.concepts, spec.relations);

        if (id.empty()) {
            std::random_device rd;
            char buf[24];
            std::snprintf(buf, sizeof buf, "s%08x%04x", rd(), rd() & 0xffff);
            id = buf;
        }
        if (!valid_id(id)) throw Error(ErrorCode::InvalidConfig, "session id must match [A-Za-z0-9_-]{1,64}");
        const auto dir = dir_of(id);
        {
            std::lock_guard lock(mu);
            if (sessions.count(id) || fs::exists(dir / "session.json"))
                throw Error(ErrorCode::InvalidConfig, "session '" + id + "' already exists");
            SessionManifest m;
            m.id = id;
            m.created = m.updated = now_utc();
            sessions[id] = m;
        }
        auto lease = pipeline::SessionLease::try_acquire(dir);
        if (!lease) {
            std::lock_guard lock(mu);
            sessions.erase(id);
            throw Error(ErrorCode::SessionBusy, "session directory is locked");
        }
        persist(*get(id));

        spawn([this, id, dir, image, spec, session_config, lease = std::move(*lease)]() mutable {
            try {
                pipeline::init_session(dir, image, spec, session_config, backends);
                update(id, Status::Ready, read_session_doc(dir));
            } catch (const Error& e) {
                update(id, Status::Error, std::nullopt, std::string(to_string(e.code())), e.detail());
            } catch (const std::exception& e) {
                update(id, Status::Error, std::nullopt, "Internal", e.what());
            }
        });
        reply(res, 202, to_json(*get(id)));
    }

    void step(const std::string& id, const httplib::Request& req, httplib::Response& res) {
        const auto m = require(id);
        if (m.status == Status::Constructing || m.status == Status::Stepping || m.status == Status::Refining)
            throw Error(ErrorCode::SessionBusy, "session is " + to_string(m.status));
        if (m.status == Status::Error) throw Error(ErrorCode::InvalidConfig, "session failed: " + m.error);

        auto lease = pipeline::SessionLease::try_acquire(dir_of(id));
        if (!lease) throw Error(ErrorCode::SessionBusy, "another mutation holds the session");

        auto session = pipeline::open_session(dir_of(id), backends);
        std::optional<graph::RefineInstruction> instruction;
        std::optional<std::vector<std::string>> prompt;
        try {
            const auto body = req.body.empty() ? json::object() : json::parse(req.body);
            if (body.contains("instruction") && !body.at("instruction").is_null())
                instruction = graph::instruction_from_json(body.at("instruction"), session.graph().height(),
                                                           session.graph().width());
            if (body.contains("prompt") && !body.at("prompt").is_null())
                prompt = body.at("prompt").get<std::vector<std::string>>();
        } catch (const json::exception& ex) {
            throw Error(ErrorCode::InvalidInstruction, std::string("step body: ") + ex.what());
        } catch (const Error& e) {
            throw Error(ErrorCode::InvalidInstruction, e.what());
        }
        if (session.frames().size() >= session.trajectory().size())
            throw Error(ErrorCode::TrajectoryExhausted,
                        "trajectory has " + std::to_string(session.trajectory().size()) + " cameras");
        if (instruction) {
            try {
                pipeline::validate_instruction(session.graph(), *instruction);
            } catch (const Error& e) {
                reply(res, 422, error_body(std::string(to_string(e.code())), e.detail()));
                return;
            }
            update(id, Status::Refining, std::nullopt);
            const int next_index = static_cast<int>(session.frames().size());
            spawn([this, id, instruction, prompt, session = std::move(session), lease = std::move(*lease)]() mutable {
                try {
                    const auto r = session.step(instruction, prompt);
                    std::string code, message;
                    if (r.instruction && r.instruction->status == "failed") {
                        code = r.instruction->error_code;
                        message = r.instruction->error;
                    }
                    update(id, Status::Ready, read_session_doc(dir_of(id)), code, message);
                } catch (const Error& e) {
                    update(id, Status::Ready, read_session_doc(dir_of(id)), std::string(to_string(e.code())),
                           e.detail());
                }
            });
            json body = to_json(*get(id));
            body["frame_index"] = next_index;
            reply(res, 202, body);
            return;
        }

        update(id, Status::Stepping, std::nullopt);
        try {
            const auto r = session.step(std::nullopt, prompt);
            update(id, Status::Ready, read_session_doc(dir_of(id)));
            json body = pipeline::frame_metadata(r.frame);
            if (r.instruction) body["instruction"] = pipeline::to_json(*r.instruction);
            reply(res, 200, body);
        } catch (const Error& e) {
            update(id, Status::Ready, read_session_doc(dir_of(id)), std::string(to_string(e.code())), e.detail());
            throw;
        }
    }

    json committed_doc(const std::string& id) const {
        require(id);
        auto doc = read_session_doc(dir_of(id));
        if (!doc) throw Error(ErrorCode::UnknownSession, "session '" + id + "' is not ready");
        return *doc;
    }

    void graph_doc(const std::string& id, httplib::Response& res) const {
        const auto doc = committed_doc(id);
        const int v = doc.at("graph_version");
        auto g = json::parse(read_file(dir_of(id) / "graph" / (numbered(v) + ".json")));
        g["revision"] = v;
        reply(res, 200, g);
    }

    void frame(const std::string& id, int index, const std::string& ext, httplib::Response& res) const {
        const auto doc = committed_doc(id);
        const auto& frames = doc.at("frames");
        if (index < 0 || index >= static_cast<int>(frames.size()))
            throw Error(ErrorCode::UnknownSession, "no frame " + std::to_string(index));
        if (ext == "png") {
            const auto bytes = read_file(dir_of(id) / "frames" / (numbered(index) + ".png"));
            res.status = 200;
            res.set_content(bytes, "image/png");
        } else {
            reply(res, 200, frames.at(static_cast<std::size_t>(index)));
        }
    }

    void metrics(const std::string& id, const httplib::Request& req, httplib::Response& res) const {
        const auto doc = committed_doc(id);
        const auto cfg = pipeline::session_config_from_json(doc.at("config"));
        const auto embedder = eval::make_embedder(cfg.embedder, cfg.embedder_command);
        const auto& frames = doc.at("frames");
        const Image initial = read_png(dir_of(id) / "frames" / (numbered(0) + ".png"));
        std::vector<Image> generated;
        for (std::size_t i = 1; i < frames.size(); ++i)
            generated.push_back(read_png(dir_of(id) / "frames" / (numbered(static_cast<int>(i)) + ".png")));
        if (generated.empty()) generated.push_back(initial);
        auto mode = eval::FidelityMode::InitialVsEach;
        if (req.has_param("mode")) {
            const auto m = req.get_param_value("mode");
            if (m == "all_pairs") mode = eval::FidelityMode::AllPairs;
            else if (m != "initial_vs_each") throw Error(ErrorCode::InvalidConfig, "unknown mode '" + m + "'");
        }
        reply(res, 200, eval::to_json(eval::scene_fidelity_report(initial, generated, *embedder, mode)));
    }

    template <typename F>
    httplib::Server::Handler guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const Error& e) {
                reply_error(res, e);
            } catch (const std::exception& e) {
                reply(res, 500, error_body("Internal", e.what()));
            }
        };
    }

    void routes() {
        const std::string sid = "([A-Za-z0-9_-]+)";
        server.Post("/v1/sessions", guarded([this](const auto& req, auto& res) { create(req, res); }));
        server.Get("/v1/sessions", guarded([this](const auto&, auto& res) {
                       json list = json::array();
                       for (const auto& m : manifests()) list.push_back(to_json(m));
                       reply(res, 200, {{"sessions", list}});
                   }));
        server.Get("/v1/sessions/" + sid, guarded([this](const auto& req, auto& res) {
                       auto m = require(req.matches[1]);
                       if (m.status == Status::Ready)
                           if (auto doc = read_session_doc(dir_of(m.id))) refresh_counts(m, *doc);
                       reply(res, 200, to_json(m));
                   }));
        server.Post("/v1/sessions/" + sid + "/step",
                    guarded([this](const auto& req, auto& res) { step(req.matches[1], req, res); }));
        server.Get("/v1/sessions/" + sid + "/graph",
                   guarded([this](const auto& req, auto& res) { graph_doc(req.matches[1], res); }));
        server.Get("/v1/sessions/" + sid + "/frames/([0-9]+)\\.(png|json)",
                   guarded([this](const auto& req, auto& res) {
                       frame(req.matches[1], std::stoi(req.matches[2]), req.matches[3], res);
                   }));
        server.Get("/v1/sessions/" + sid + "/metrics",
                   guarded([this](const auto& req, auto& res) { metrics(req.matches[1], req, res); }));
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) res.set_content(error_body("NotFound", "no such route").dump(), "application/json");
        });
    }

    std::vector<SessionManifest> manifests() const {
        std::lock_guard lock(mu);
        std::vector<SessionManifest> out;
        for (const auto& [_, m] : sessions) out.push_back(m);
        return out;
    }
};

Service::Service(ServiceConfig config, pipeline::Backends backends)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(backends))) {}

Service::~Service() = default;

int Service::bind(const std::string& host, int port) {
    if (port < 0 || port > 65535) return -1;
    if (port == 0) return impl_->server.bind_to_any_port(host);
    return impl_->server.bind_to_port(host, port) ? port : -1;
}

void Service::listen() { impl_->server.listen_after_bind(); }

void Service::stop() { impl_->server.stop(); }

void Service::wait_idle() {
    std::unique_lock lock(impl_->mu);
    impl_->idle.wait(lock, [this] { return impl_->running == 0; });
}

std::vector<SessionManifest> Service::manifests() const { return impl_->manifests(); }

std::optional<SessionManifest> Service::manifest(const std::string& id) const { return impl_->get(id); }

}  // namespace scenepainter::service
