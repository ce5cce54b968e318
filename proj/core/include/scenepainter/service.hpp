#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/pipeline.hpp"

namespace scenepainter::service {

enum class Status { Constructing, Ready, Stepping, Refining, Error };

std::string to_string(Status status);

struct SessionManifest {
    std::string id;
    Status status = Status::Constructing;
    int frame_count = 0;
    int graph_version = 0;
    std::string created;
    std::string updated;
    std::string error_code;
    std::string error;
};

nlohmann::json to_json(const SessionManifest& manifest);

struct ServiceConfig {
    std::filesystem::path root;
    int max_image_side = 512;
    pipeline::SessionConfig defaults;
};

/// HTTP front end over a directory of sessions. Every route lives under /v1;
/// errors are {code, message}. Mutations take the session lease and answer
/// 409 when it is held elsewhere.
class Service {
public:
    explicit Service(ServiceConfig config, pipeline::Backends backends = pipeline::toy_backends());
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds `host:port` (port 0 picks a free one) and returns the bound
    /// port, or -1 on failure.
    int bind(const std::string& host, int port);
    /// Serves until stop(); call after bind().
    void listen();
    void stop();

    /// Blocks until no background construction or refinement is running.
    void wait_idle();

    std::vector<SessionManifest> manifests() const;
    std::optional<SessionManifest> manifest(const std::string& id) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// HTTP status used for a domain error code.
int http_status(ErrorCode code);

}  // namespace scenepainter::service
