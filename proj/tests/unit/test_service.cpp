#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <future>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "scenepainter/image_io.hpp"
#include "scenepainter/service.hpp"
#include "test_support.hpp"

using namespace scenepainter;
using nlohmann::json;

namespace {

pipeline::SessionConfig fast_defaults() {
    pipeline::SessionConfig c;
    c.train.phase1_steps = 4;
    c.train.phase2_steps = 4;
    c.train.prior_samples = 1;
    c.train.prior_sample_steps = 2;
    c.train.refine_steps = 3;
    c.outpaint_steps = 3;
    c.trajectory_steps = 6;
    return c;
}

/// Service bound to a loopback port, serving on a background thread.
struct Running {
    explicit Running(const std::filesystem::path& root, int max_side = 64)
        : service(service::ServiceConfig{root, max_side, fast_defaults()}) {
        port = service.bind("127.0.0.1", 0);
        REQUIRE(port > 0);
        thread = std::thread([this] { service.listen(); });
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        client->set_read_timeout(120, 0);
        for (int i = 0; i < 200 && !client->Get("/v1/sessions"); ++i)
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ~Running() {
        service.wait_idle();
        service.stop();
        thread.join();
    }

    httplib::Result create(const std::string& id, const Image& img, const json& spec, const json& config = json::object()) {
        const auto png = encode_png(img);
        httplib::MultipartFormDataItems items{
            {"image", std::string(png.begin(), png.end()), "image.png", "image/png"},
            {"spec", spec.dump(), "spec.json", "application/json"},
            {"config", config.dump(), "config.json", "application/json"},
            {"id", id, "", ""},
        };
        return client->Post("/v1/sessions", items);
    }

    json wait_ready(const std::string& id) {
        service.wait_idle();
        const auto r = client->Get("/v1/sessions/" + id);
        REQUIRE(r);
        REQUIRE(r->status == 200);
        return json::parse(r->body);
    }

    httplib::Result step(const std::string& id, const json& body = json::object()) {
        return client->Post("/v1/sessions/" + id + "/step", body.dump(), "application/json");
    }

    service::Service service;
    int port = -1;
    std::thread thread;
    std::unique_ptr<httplib::Client> client;
};

json sky_ground_spec() {
    return json::parse(R"({"concepts": [
        {"name": "sky", "level": "region", "rect": [0, 0, 8, 16]},
        {"name": "ground", "level": "region", "rect": [8, 0, 16, 16]}]})");
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("http status mapping") {
    CHECK(service::http_status(ErrorCode::UnknownSession) == 404);
    CHECK(service::http_status(ErrorCode::SessionBusy) == 409);
    CHECK(service::http_status(ErrorCode::ImageTooLarge) == 413);
    CHECK(service::http_status(ErrorCode::TrajectoryExhausted) == 422);
    CHECK(service::http_status(ErrorCode::DuplicateHandle) == 400);
}

TEST_CASE("session lifecycle over http") {
    sptest::TempDir root("svc");
    Running srv(root.path());
    const Image img = sptest::sky_ground_image(16, 16);

    auto r = srv.create("demo", img, sky_ground_spec());
    REQUIRE(r);
    CHECK(r->status == 202);
    CHECK(json::parse(r->body)["id"] == "demo");

    auto m = srv.wait_ready("demo");
    CHECK(m["status"] == "ready");
    CHECK(m["frame_count"] == 1);

    r = srv.client->Get("/v1/sessions/demo/frames/0.png");
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(decode_png(reinterpret_cast<const std::uint8_t*>(r->body.data()), r->body.size()) == img);

    r = srv.step("demo");
    REQUIRE(r);
    CHECK(r->status == 200);
    const auto frame = json::parse(r->body);
    CHECK(frame["index"] == 1);
    r = srv.client->Get("/v1/sessions/demo/frames/1.json");
    REQUIRE(r);
    CHECK(json::parse(r->body)["index"] == 1);

    r = srv.step("demo", {{"instruction", {{"kind", "mute"}, {"target", "<sky>"}}}});
    REQUIRE(r);
    CHECK(r->status == 202);
    CHECK(json::parse(r->body)["frame_index"] == 2);
    m = srv.wait_ready("demo");
    CHECK(m["graph_version"] == 1);
    CHECK(m["frame_count"] == 3);

    r = srv.client->Get("/v1/sessions/demo/graph");
    REQUIRE(r);
    const auto g = json::parse(r->body);
    CHECK(g["revision"] == 1);
    bool muted = false;
    for (const auto& n : g["nodes"])
        if (n["handle"] == "<sky>") muted = n["muted"];
    CHECK(muted);

    r = srv.step("demo", {{"instruction", {{"kind", "mute"}, {"target", "<lake>"}}}});
    REQUIRE(r);
    CHECK(r->status == 422);
    CHECK(json::parse(r->body)["code"] == "UnknownHandle");

    r = srv.client->Get("/v1/sessions/demo/metrics");
    REQUIRE(r);
    CHECK(r->status == 200);
    const double metric = json::parse(r->body)["metric"];
    CHECK(metric <= 1.0);
    CHECK(metric > -1.0);

    r = srv.client->Get("/v1/sessions");
    REQUIRE(r);
    CHECK(json::parse(r->body)["sessions"].size() == 1);
}

TEST_CASE("metrics on a session without generated frames is one") {
    sptest::TempDir root("svc");
    Running srv(root.path());
    srv.create("m", sptest::sky_ground_image(16, 16), sky_ground_spec());
    srv.wait_ready("m");
    const auto r = srv.client->Get("/v1/sessions/m/metrics");
    REQUIRE(r);
    CHECK(json::parse(r->body)["metric"].get<double>() == doctest::Approx(1.0));
}

TEST_CASE("creation errors") {
    sptest::TempDir root("svc");
    Running srv(root.path(), 32);
    auto spec = sky_ground_spec();
    spec["concepts"][1]["name"] = "sky";
    auto r = srv.create("dup", sptest::sky_ground_image(16, 16), spec);
    REQUIRE(r);
    CHECK(r->status == 400);
    CHECK(json::parse(r->body)["code"] == "DuplicateHandle");

    r = srv.create("big", Image(40, 40), sky_ground_spec());
    REQUIRE(r);
    CHECK(r->status == 413);
    CHECK(json::parse(r->body)["code"] == "ImageTooLarge");

    r = srv.client->Post("/v1/sessions", "{not json", "application/json");
    REQUIRE(r);
    CHECK(r->status >= 400);
    CHECK(r->status < 500);

    REQUIRE(srv.create("once", sptest::sky_ground_image(16, 16), sky_ground_spec())->status == 202);
    CHECK(srv.create("once", sptest::sky_ground_image(16, 16), sky_ground_spec())->status == 400);
}

TEST_CASE("json body with base64 image") {
    sptest::TempDir root("svc");
    Running srv(root.path());
    const auto png = encode_png(sptest::sky_ground_image(16, 16));
    static const char* chars = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string b64;
    for (std::size_t i = 0; i < png.size(); i += 3) {
        const std::uint32_t n = (std::uint32_t(png[i]) << 16) | (i + 1 < png.size() ? png[i + 1] << 8 : 0) |
                                (i + 2 < png.size() ? png[i + 2] : 0);
        b64 += chars[(n >> 18) & 63];
        b64 += chars[(n >> 12) & 63];
        b64 += i + 1 < png.size() ? chars[(n >> 6) & 63] : '=';
        b64 += i + 2 < png.size() ? chars[n & 63] : '=';
    }
    const json body{{"image_base64", b64}, {"spec", sky_ground_spec()}, {"id", "b64"}};
    const auto r = srv.client->Post("/v1/sessions", body.dump(), "application/json");
    REQUIRE(r);
    CHECK(r->status == 202);
    CHECK(srv.wait_ready("b64")["status"] == "ready");
}

TEST_CASE("unknown routes and sessions are 404") {
    sptest::TempDir root("svc");
    Running srv(root.path());
    for (const char* path : {"/v1/sessions/nope", "/v1/sessions/nope/graph", "/v1/sessions/nope/frames/0.png",
                             "/v1/sessions/nope/metrics", "/v2/anything"}) {
        const auto r = srv.client->Get(path);
        REQUIRE(r);
        CHECK_MESSAGE(r->status == 404, path);
        CHECK(json::parse(r->body).contains("code"));
    }
    CHECK(srv.step("nope")->status == 404);
    srv.create("one", sptest::sky_ground_image(16, 16), sky_ground_spec());
    srv.wait_ready("one");
    CHECK(srv.client->Get("/v1/sessions/one/frames/7.png")->status == 404);
}

TEST_CASE("exhausted trajectory is 422") {
    sptest::TempDir root("svc");
    Running srv(root.path());
    srv.create("short", sptest::sky_ground_image(16, 16), sky_ground_spec(), {{"trajectory_steps", 1}});
    srv.wait_ready("short");
    CHECK(srv.step("short")->status == 200);
    const auto r = srv.step("short");
    REQUIRE(r);
    CHECK(r->status == 422);
    CHECK(json::parse(r->body)["code"] == "TrajectoryExhausted");
}

TEST_CASE("concurrent steps never interleave") {
    sptest::TempDir root("svc");
    Running srv(root.path());
    srv.create("busy", sptest::sky_ground_image(16, 16), sky_ground_spec(), {{"trajectory_steps", 200}});
    srv.wait_ready("busy");

    std::vector<std::future<std::pair<int, int>>> calls;
    for (int i = 0; i < 100; ++i)
        calls.push_back(std::async(std::launch::async, [&] {
            httplib::Client c("127.0.0.1", srv.port);
            c.set_read_timeout(120, 0);
            const auto r = c.Post("/v1/sessions/busy/step", "{}", "application/json");
            if (!r) return std::pair{-1, -1};
            return std::pair{r->status, r->status == 200 ? json::parse(r->body)["index"].get<int>() : -1};
        }));
    std::vector<int> indices;
    int busy = 0;
    for (auto& f : calls) {
        const auto [status, index] = f.get();
        CHECK_MESSAGE((status == 200 || status == 409), "status ", status);
        if (status == 200) indices.push_back(index);
        if (status == 409) ++busy;
    }
    std::sort(indices.begin(), indices.end());
    REQUIRE_FALSE(indices.empty());
    for (std::size_t i = 0; i < indices.size(); ++i) CHECK(indices[i] == int(i) + 1);
    const auto m = srv.wait_ready("busy");
    CHECK(m["frame_count"] == int(indices.size()) + 1);
    CHECK(pipeline::validate_session_dir(root / "busy").empty());
    MESSAGE("accepted ", indices.size(), " of 100, rejected ", busy);
}

TEST_CASE("held lease answers 409") {
    sptest::TempDir root("svc");
    Running srv(root.path());
    srv.create("locked", sptest::sky_ground_image(16, 16), sky_ground_spec());
    srv.wait_ready("locked");
    auto lease = pipeline::SessionLease::acquire(root / "locked");
    const auto r = srv.step("locked");
    REQUIRE(r);
    CHECK(r->status == 409);
    CHECK(json::parse(r->body)["code"] == "SessionBusy");
}

TEST_CASE("restart picks up existing sessions") {
    sptest::TempDir root("svc");
    {
        Running srv(root.path());
        srv.create("keep", sptest::sky_ground_image(16, 16), sky_ground_spec());
        srv.wait_ready("keep");
        REQUIRE(srv.step("keep")->status == 200);
    }
    Running again(root.path());
    const auto m = again.wait_ready("keep");
    CHECK(m["status"] == "ready");
    CHECK(m["frame_count"] == 2);
    const auto r = again.step("keep");
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(json::parse(r->body)["index"] == 2);
}

}  // TEST_SUITE
