#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <sys/wait.h>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "scenepainter/image_io.hpp"
#include "scenepainter/pipeline.hpp"
#include "test_support.hpp"

#ifdef SCENEPAINTER_CLI

using namespace scenepainter;
using nlohmann::json;

namespace {

struct Outcome {
    int exit_code = -1;
    std::string out;
    json doc() const {
        const auto nl = out.find_last_of('\n', out.size() >= 2 ? out.size() - 2 : 0);
        return json::parse(nl == std::string::npos ? out : out.substr(nl + 1));
    }
};

Outcome cli(const std::string& args) {
    const std::string cmd = std::string(SCENEPAINTER_CLI) + " " + args + " 2>/dev/null";
    Outcome o;
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p);
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) o.out.append(buf, n);
    const int status = ::pclose(p);
    o.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return o;
}

/// Image, spec and a fast config written under `dir`.
struct Inputs {
    explicit Inputs(const sptest::TempDir& dir) {
        image = (dir / "in.png").string();
        spec = (dir / "spec.json").string();
        config = (dir / "config.json").string();
        write_png(sptest::sky_ground_image(16, 16), image);
        write_file_atomic(spec, R"({"concepts": [
            {"name": "sky", "level": "region", "rect": [0, 0, 8, 16]},
            {"name": "ground", "level": "region", "rect": [8, 0, 16, 16]}]})");
        write_file_atomic(config, R"({"seed": 4, "outpaint_steps": 3, "trajectory_steps": 8,
            "train": {"phase1_steps": 4, "phase2_steps": 4, "prior_samples": 1, "prior_sample_steps": 2,
                      "refine_steps": 3}})");
    }
    std::string construct(const std::string& out) const {
        return "--json construct --image " + image + " --spec " + spec + " --config " + config + " --out " + out;
    }
    std::string image, spec, config;
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("construct, generate and inspect") {
    sptest::TempDir dir("cli");
    const Inputs in(dir);
    const auto s = (dir / "s").string();
    auto r = cli(in.construct(s));
    REQUIRE(r.exit_code == 0);
    CHECK(r.doc()["frames"] == 1);
    CHECK(r.doc()["schema"] == 1);

    r = cli("--json generate --session " + s + " --frames 0");
    CHECK(r.exit_code == 0);
    CHECK(r.doc()["frames"] == 1);

    r = cli("--json generate --session " + s + " --frames 2");
    CHECK(r.exit_code == 0);
    CHECK(r.doc()["new_frames"] == json::array({1, 2}));

    CHECK(cli("validate --session " + s).exit_code == 0);
    r = cli("--json graph --session " + s);
    CHECK(r.exit_code == 0);
    CHECK(r.doc()["nodes"].size() == 3);

    r = cli("--json eval --session " + s);
    CHECK(r.exit_code == 0);
    CHECK(r.doc()["per_image"].size() == 2);
}

TEST_CASE("eval with nothing generated is one") {
    sptest::TempDir dir("cli");
    const Inputs in(dir);
    const auto s = (dir / "s").string();
    REQUIRE(cli(in.construct(s)).exit_code == 0);
    const auto r = cli("--json eval --session " + s);
    CHECK(r.exit_code == 0);
    CHECK(r.doc()["metric"].get<double>() == doctest::Approx(1.0));
}

TEST_CASE("split generation matches one run") {
    sptest::TempDir dir("cli");
    const Inputs in(dir);
    const auto a = (dir / "a").string(), b = (dir / "b").string();
    REQUIRE(cli(in.construct(a)).exit_code == 0);
    REQUIRE(cli(in.construct(b)).exit_code == 0);
    REQUIRE(cli("generate --session " + a + " --frames 3").exit_code == 0);
    REQUIRE(cli("generate --session " + a + " --frames 3").exit_code == 0);
    REQUIRE(cli("generate --session " + b + " --frames 6").exit_code == 0);
    for (int i = 0; i <= 6; ++i) {
        char name[16];
        std::snprintf(name, sizeof name, "%03d.png", i);
        CHECK_MESSAGE(read_file(dir / ("a/frames/" + std::string(name))) ==
                          read_file(dir / ("b/frames/" + std::string(name))),
                      name);
    }
}

TEST_CASE("refine through the cli") {
    sptest::TempDir dir("cli");
    const Inputs in(dir);
    const auto s = (dir / "s").string();
    REQUIRE(cli(in.construct(s)).exit_code == 0);
    const auto before = pipeline::open_session(s).graph();

    auto r = cli("--json refine --session " + s + " --add pond --hint-rect 10,2,15,10");
    REQUIRE(r.exit_code == 0);
    CHECK(r.doc()["queued"]["kind"] == "add");
    REQUIRE(cli("generate --session " + s + " --frames 1").exit_code == 0);
    const auto after = pipeline::open_session(s).graph();
    CHECK(after.nodes().size() == before.nodes().size() + 1);
    CHECK(after.edges().size() == before.edges().size() + 1);

    r = cli("--json refine --session " + s + " --mute lake");
    CHECK(r.exit_code == 1);
    CHECK(r.doc()["error"]["code"] == "UnknownHandle");

    r = cli("--json refine --session " + s + " --mute sky --now");
    CHECK(r.exit_code == 0);
    CHECK(pipeline::open_session(s).graph().find_node("<sky>")->muted);
    CHECK(cli("refine --session " + s).exit_code == 2);
}

TEST_CASE("error exit codes") {
    sptest::TempDir dir("cli");
    const Inputs in(dir);
    CHECK(cli("construct --image " + in.image + " --spec " + (dir / "none.json").string() + " --out " +
              (dir / "x").string())
              .exit_code == 2);
    write_file_atomic(dir / "dup.json", R"({"concepts": [
        {"name": "sky", "level": "region", "rect": [0, 0, 8, 16]},
        {"name": "sky", "level": "region", "rect": [8, 0, 16, 16]}]})");
    auto r = cli("--json construct --image " + in.image + " --spec " + (dir / "dup.json").string() + " --out " +
                 (dir / "y").string());
    CHECK(r.exit_code == 1);
    CHECK(r.doc()["error"]["code"] == "DuplicateHandle");
    CHECK(cli("").exit_code == 2);
    CHECK(cli("generate --session " + (dir / "missing").string() + " --frames 1").exit_code == 1);
    CHECK(cli("generate --session " + (dir / "missing").string() + " --frames -1").exit_code == 2);
    CHECK(cli("serve --port 70000 --root " + dir.path().string()).exit_code == 2);
    CHECK(cli("serve --port 0 --root " + dir.path().string()).exit_code == 2);
}

TEST_CASE("exhausted trajectory exits 1") {
    sptest::TempDir dir("cli");
    const Inputs in(dir);
    const auto s = (dir / "s").string();
    REQUIRE(cli(in.construct(s)).exit_code == 0);
    CHECK(cli("generate --session " + s + " --frames 8").exit_code == 0);
    const auto r = cli("--json generate --session " + s + " --frames 1");
    CHECK(r.exit_code == 1);
    CHECK(r.doc()["error"]["code"] == "TrajectoryExhausted");
}

TEST_CASE("serve lists constructed sessions") {
    sptest::TempDir dir("cli");
    const Inputs in(dir);
    REQUIRE(cli(in.construct((dir / "root/made").string())).exit_code == 0);
    const int port = 20000 + static_cast<int>(::getpid() % 20000);
    const auto pidfile = (dir / "pid").string();
    REQUIRE(std::system((std::string(SCENEPAINTER_CLI) + " serve --port " + std::to_string(port) + " --root " +
                         (dir / "root").string() + " >/dev/null 2>&1 & echo $! > " + pidfile)
                            .c_str()) == 0);
    httplib::Client c("127.0.0.1", port);
    httplib::Result r;
    for (int i = 0; i < 300 && !(r = c.Get("/v1/sessions")); ++i)
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    REQUIRE(r);
    CHECK(r->status == 200);
    const auto list = json::parse(r->body)["sessions"];
    REQUIRE(list.size() == 1);
    CHECK(list[0]["id"] == "made");
    CHECK(list[0]["status"] == "ready");
    std::system(("kill $(cat " + pidfile + ")").c_str());
}

}  // TEST_SUITE

#endif
