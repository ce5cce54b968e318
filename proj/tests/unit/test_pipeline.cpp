#include <doctest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/image_io.hpp"
#include "scenepainter/outpaint.hpp"
#include "scenepainter/pipeline.hpp"
#include "test_support.hpp"

using namespace scenepainter;
using namespace scenepainter::pipeline;
using nlohmann::json;

namespace {

SessionConfig quick_config(int train_steps = 10) {
    SessionConfig c;
    c.seed = 3;
    c.train.phase1_steps = train_steps;
    c.train.phase2_steps = train_steps;
    c.train.prior_samples = 1;
    c.train.prior_sample_steps = 4;
    c.train.refine_steps = 5;
    c.outpaint_steps = 5;
    c.trajectory_steps = 8;
    c.step_size = 0.25;
    return c;
}

SceneSpec sky_ground_spec(int h, int w) {
    return {{{"sky", graph::Level::Region, sptest::top_half(h, w), {}},
             {"ground", graph::Level::Region, sptest::bottom_half(h, w), {}}},
            std::nullopt};
}

Session fresh(const sptest::TempDir& dir, SessionConfig c = quick_config(), Backends b = toy_backends()) {
    return init_session(dir / "s", sptest::sky_ground_image(16, 16), sky_ground_spec(16, 16), c, std::move(b));
}

class EmptySegmenter final : public SegmenterBackend {
public:
    Mask segment(const Image& image, const std::string&, const std::optional<Mask>&) const override {
        return Mask::zeros(image.height(), image.width());
    }
    std::string id() const override { return "empty"; }
};

graph::RefineInstruction mute(const std::string& h) { return {graph::RefineInstruction::Kind::Mute, h, "", {}}; }

graph::RefineInstruction add(const std::string& d, Mask hint) {
    return {graph::RefineInstruction::Kind::Add, "", d, std::move(hint)};
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("assemble_prompt") {
    const auto g = graph::build_graph(8, 8, {{"env", graph::Level::Environment, {}, {}},
                                             {"forest", graph::Level::Region, sptest::top_half(8, 8), {}}},
                                      std::vector<graph::RelationSpec>{{graph::EdgeKind::R1, "env", "forest"}});
    CHECK(assemble_prompt(g) == std::vector<std::string>{"<env>", "<r01>", "<forest>"});
    const auto muted = graph::apply_instruction(g, mute("<forest>"), {}).graph;
    CHECK(assemble_prompt(muted) == std::vector<std::string>{"<env>"});

    const auto g3 = graph::build_graph(8, 8, {{"forest", graph::Level::Region, sptest::top_half(8, 8), {}},
                                              {"tree", graph::Level::Object, sptest::rect_mask(8, 8, 0, 0, 2, 2), "forest"}});
    for (const auto& e : g3.edges())
        if (e.kind == graph::EdgeKind::R3)
            CHECK(assemble_prompt(g3, e.id) == std::vector<std::string>{"<tree>", e.handle, "<forest>"});
}

TEST_CASE("init with zero training steps") {
    sptest::TempDir dir("pipe");
    const auto s = fresh(dir, quick_config(0));
    CHECK(s.frames().size() == 1);
    CHECK(s.scene().size() == 16u * 16u);
    CHECK(s.graph_version() == 0);
    CHECK(s.frames()[0].image == sptest::sky_ground_image(16, 16));
    CHECK(validate_session_dir(dir / "s").empty());
    for (const char* f : {"session.json", "graph/000.json", "ckpt/000.bin", "frames/000.png", "frames/000.depth.npyish",
                          "scene.xyzrgb", "train.log"})
        CHECK_MESSAGE(std::filesystem::exists(dir / "s" / f), f);
}

TEST_CASE("trained session passes the validator and logs every step") {
    sptest::TempDir dir("pipe");
    const auto s = fresh(dir);
    CHECK(validate_session_dir(dir / "s").empty());
    std::ifstream log(dir / "s" / "train.log");
    int lines = 0;
    for (std::string line; std::getline(log, line);) {
        const auto j = json::parse(line);
        if (j.value("event", "") == "construct") {
            ++lines;
            for (const char* k : {"step", "phase", "edge", "t", "L_rec", "L_prior", "L_attn", "L_total"}) CHECK(j.contains(k));
        }
    }
    CHECK(lines == 20);
    const auto doc = json::parse(read_file(dir / "s" / "session.json"));
    CHECK(doc["format"] == "scenepainter-session");
    CHECK(doc["config"]["seed"] == 3);
}

TEST_CASE("init refuses an existing session and bad inputs") {
    sptest::TempDir dir("pipe");
    fresh(dir, quick_config(0));
    CHECK_THROWS_AS(fresh(dir, quick_config(0)), Error);
    CHECK_THROWS_AS(init_session(dir / "t", Image(10, 10), {}, quick_config(0)), Error);
    try {
        auto spec = sky_ground_spec(16, 16);
        spec.concepts[1].name = "sky";
        init_session(dir / "u", sptest::sky_ground_image(16, 16), spec, quick_config(0));
        FAIL("expected DuplicateHandle");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DuplicateHandle);
    }
}

TEST_CASE("unchanged camera reproduces the previous frame") {
    sptest::TempDir dir("pipe");
    auto c = quick_config(0);
    c.step_size = 0.0;
    auto s = fresh(dir, c);
    const auto before = s.model();
    const auto r = s.step();
    CHECK(r.frame.fill_mask.none_set());
    CHECK(r.frame.image == s.frames()[0].image);
    CHECK(r.frame.points_added == 0);
    CHECK(s.model() == before);
}

TEST_CASE("frames keep known pixels and grow the scene") {
    sptest::TempDir dir("pipe");
    auto s = fresh(dir);
    std::size_t points = s.scene().size();
    const auto frames = s.run(3);
    REQUIRE(frames.size() == 3);
    for (int i = 0; i < 3; ++i) {
        const auto& f = frames[static_cast<std::size_t>(i)];
        CHECK(f.index == i + 1);
        CHECK(f.fill_mask.popcount() > 0);
        CHECK(sptest::psnr(f.image, f.partial, ~f.fill_mask) > 40.0);
        CHECK(f.points_added == f.fill_mask.popcount());
    }
    CHECK(s.scene().size() == points + frames[0].points_added + frames[1].points_added + frames[2].points_added);
    CHECK(s.run(0).empty());
    CHECK(validate_session_dir(dir / "s").empty());
}

TEST_CASE("mute step removes the handle from later prompts") {
    sptest::TempDir dir("pipe");
    auto s = fresh(dir);
    const auto r = s.step(mute("<sky>"));
    REQUIRE(r.instruction);
    CHECK(r.instruction->status == "applied");
    CHECK(s.graph_version() == 1);
    const auto later = s.run(2);
    for (const auto& f : later)
        for (const auto& tok : f.prompt) CHECK(tok != "<sky>");
    CHECK(validate_session_dir(dir / "s").empty());
    try {
        s.step(std::nullopt, std::vector<std::string>{"<env>", "<sky>"});
        FAIL("expected MutedEndpoint");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MutedEndpoint);
    }
}

TEST_CASE("add step creates a version and trains the new handles") {
    sptest::TempDir dir("pipe");
    auto s = fresh(dir);
    const auto r = s.step(add("pond", sptest::rect_mask(16, 16, 10, 2, 15, 10)));
    REQUIRE(r.instruction);
    CHECK(r.instruction->status == "applied");
    CHECK(s.graph().nodes().size() == 4);
    CHECK(s.graph_history().size() == 2);
    CHECK(std::filesystem::exists(dir / "s" / "ckpt" / "001.bin"));
    CHECK(std::filesystem::exists(dir / "s" / "graph" / "001.json"));
    const auto prompt = assemble_prompt(s.graph());
    CHECK(prompt.size() == 7);
    for (const auto& tok : prompt) CHECK(s.model().embeddings().contains(tok));
}

TEST_CASE("failed refinement commits the frame and rolls back") {
    sptest::TempDir dir("pipe");
    auto b = toy_backends();
    b.segmenter = std::make_shared<EmptySegmenter>();
    auto s = fresh(dir, quick_config(), b);
    const auto model = s.model();
    const auto r = s.step(add("cloud", sptest::rect_mask(16, 16, 0, 0, 4, 4)));
    REQUIRE(r.instruction);
    CHECK(r.instruction->status == "failed");
    CHECK(r.instruction->error_code == "SegmentationEmpty");
    CHECK(s.frames().size() == 2);
    CHECK(s.graph_version() == 0);
    CHECK(s.model() == model);
}

TEST_CASE("invalid instructions are rejected before generating") {
    sptest::TempDir dir("pipe");
    auto s = fresh(dir);
    try {
        s.step(mute("<lake>"));
        FAIL("expected UnknownHandle");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnknownHandle);
    }
    CHECK(s.frames().size() == 1);
    CHECK_THROWS_AS(s.queue_instruction(add("", Mask::ones(16, 16))), Error);
    CHECK_THROWS_AS(s.step(add("pond", Mask::ones(8, 8))), Error);
    CHECK(s.frames().size() == 1);
}

TEST_CASE("queued instructions apply on the next step") {
    sptest::TempDir dir("pipe");
    {
        auto s = fresh(dir);
        s.queue_instruction(mute("<ground>"));
    }
    auto s = open_session(dir / "s");
    const auto r = s.step();
    REQUIRE(r.instruction);
    CHECK(r.instruction->instruction == mute("<ground>"));
    CHECK(s.graph().find_node("<ground>")->muted);
    CHECK_FALSE(s.step().instruction);
}

TEST_CASE("refine_now trains on the latest frame without generating") {
    sptest::TempDir dir("pipe");
    auto s = fresh(dir);
    s.run(1);
    const auto rec = s.refine_now({graph::RefineInstruction::Kind::Change, "<ground>", "sand", {}});
    CHECK(rec.status == "applied");
    CHECK(rec.frame == 1);
    CHECK(s.frames().size() == 2);
    CHECK(s.graph_version() == 1);
    CHECK(s.instructions().size() == 1);
}

TEST_CASE("trajectory exhaustion and changes") {
    sptest::TempDir dir("pipe");
    auto c = quick_config(0);
    c.trajectory_steps = 2;
    auto s = fresh(dir, c);
    s.set_trajectory(geometry::TrajectoryKind::Translate);
    CHECK(s.config().trajectory == geometry::TrajectoryKind::Translate);
    s.run(2);
    try {
        s.step();
        FAIL("expected TrajectoryExhausted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::TrajectoryExhausted);
    }
    CHECK_THROWS_AS(s.set_trajectory(geometry::TrajectoryKind::Orbit), Error);
}

TEST_CASE("split run after reload matches an uninterrupted run") {
    sptest::TempDir dir("pipe");
    auto c = quick_config();
    auto straight = init_session(dir / "a", sptest::sky_ground_image(16, 16), sky_ground_spec(16, 16), c);
    straight.step();
    straight.step(add("pond", sptest::rect_mask(16, 16, 10, 2, 15, 10)));
    straight.run(3);

    {
        auto first = init_session(dir / "b", sptest::sky_ground_image(16, 16), sky_ground_spec(16, 16), c);
        first.step();
        first.step(add("pond", sptest::rect_mask(16, 16, 10, 2, 15, 10)));
    }
    auto resumed = open_session(dir / "b");
    CHECK(resumed.model() == straight.model());
    resumed.run(3);

    REQUIRE(resumed.frames().size() == straight.frames().size());
    for (std::size_t i = 0; i < straight.frames().size(); ++i) {
        CHECK(resumed.frames()[i].image == straight.frames()[i].image);
        CHECK(resumed.frames()[i].depth == straight.frames()[i].depth);
        CHECK(resumed.frames()[i].prompt == straight.frames()[i].prompt);
    }
    CHECK(resumed.scene() == straight.scene());
    CHECK(resumed.graph() == straight.graph());
}

TEST_CASE("generation seed changes later frames only") {
    sptest::TempDir dir("pipe");
    auto c = quick_config(0);
    c.step_size = 0.6;
    auto a = init_session(dir / "a", sptest::sky_ground_image(16, 16), sky_ground_spec(16, 16), c);
    auto b = init_session(dir / "b", sptest::sky_ground_image(16, 16), sky_ground_spec(16, 16), c);
    a.run(1);
    b.run(1);
    b.set_generation_seed(99);
    a.run(1);
    b.run(1);
    CHECK(a.frames()[1].image == b.frames()[1].image);
    REQUIRE_FALSE(outpaint::mask_to_latent(a.frames()[2].fill_mask, 4, 4).none_set());
    CHECK_FALSE(a.frames()[2].image == b.frames()[2].image);
    CHECK(open_session(dir / "b").generation_seed() == 99);
}

TEST_CASE("auto refine creates a version per step") {
    sptest::TempDir dir("pipe");
    auto c = quick_config();
    c.auto_refine = true;
    auto s = fresh(dir, c);
    s.run(2);
    CHECK(s.graph_version() == 2);
    CHECK(s.graph_history()[1] == s.graph_history()[0]);
    CHECK(validate_session_dir(dir / "s").empty());
}

TEST_CASE("open_session errors") {
    sptest::TempDir dir("pipe");
    try {
        open_session(dir / "nothing");
        FAIL("expected UnknownSession");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnknownSession);
    }
    fresh(dir, quick_config(0));
    auto doc = json::parse(read_file(dir / "s" / "session.json"));
    doc["version"] = 99;
    write_file_atomic(dir / "s" / "session.json", doc.dump());
    try {
        open_session(dir / "s");
        FAIL("expected SchemaVersionMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SchemaVersionMismatch);
    }
    write_file_atomic(dir / "s" / "session.json", "{not json");
    CHECK_THROWS_AS(open_session(dir / "s"), Error);
}

TEST_CASE("validator reports damaged sessions") {
    sptest::TempDir dir("pipe");
    auto s = fresh(dir, quick_config(0));
    s.run(1);
    REQUIRE(validate_session_dir(dir / "s").empty());

    Image tampered = read_png(dir / "s" / "frames" / "001.png");
    const auto& f = s.frames()[1];
    for (std::size_t i = 0; i < f.fill_mask.size(); ++i)
        if (!f.fill_mask[i]) {
            tampered[i] ^= 0xff;
            break;
        }
    write_png(tampered, dir / "s" / "frames" / "001.png");
    CHECK_FALSE(validate_session_dir(dir / "s").empty());
    write_png(f.image, dir / "s" / "frames" / "001.png");
    CHECK(validate_session_dir(dir / "s").empty());

    std::filesystem::remove(dir / "s" / "ckpt" / "000.bin");
    CHECK_FALSE(validate_session_dir(dir / "s").empty());
}

TEST_CASE("session lease is exclusive") {
    sptest::TempDir dir("pipe");
    auto first = SessionLease::try_acquire(dir.path());
    REQUIRE(first);
    CHECK_FALSE(SessionLease::try_acquire(dir.path()));
    try {
        SessionLease::acquire(dir.path());
        FAIL("expected SessionBusy");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SessionBusy);
    }
    first.reset();
    CHECK(SessionLease::try_acquire(dir.path()));
}

TEST_CASE("scene spec and config documents") {
    const auto spec = scene_spec_from_json(json::parse(R"({
        "concepts": [
            {"name": "sky", "level": "region", "rect": [0, 0, 8, 16]},
            {"name": "ground", "level": 2, "rle": "128,128"},
            {"name": "rock", "level": "object", "rect": [12, 0, 16, 4], "parent": "ground"}
        ],
        "relations": [{"kind": "R1", "first": "env", "second": "sky"}]
    })"), 16, 16);
    REQUIRE(spec.concepts.size() == 3);
    CHECK(spec.concepts[0].mask == sptest::top_half(16, 16));
    CHECK(spec.concepts[1].mask == sptest::bottom_half(16, 16));
    CHECK(spec.concepts[2].parent == "ground");
    REQUIRE(spec.relations);
    CHECK(spec.relations->size() == 1);
    const auto again = scene_spec_from_json(to_json(spec), 16, 16);
    CHECK(again.concepts[2].mask == spec.concepts[2].mask);
    CHECK_THROWS_AS(scene_spec_from_json(json::parse(R"({"concepts":[{"name":"x","rect":[0,0,20,4]}]})"), 16, 16), Error);
    CHECK_THROWS_AS(scene_spec_from_json(json::parse(R"({"concepts":[{"name":"x"}]})"), 16, 16), Error);

    const auto c = quick_config();
    const auto round = session_config_from_json(to_json(c));
    CHECK(to_json(round) == to_json(c));
    CHECK(session_config_from_json(json::parse(R"({"model": {"features": 4}})")).model.features == 4);
    CHECK_THROWS_AS(session_config_from_json(json::parse(R"({"outpaint_steps": 0})")), Error);
    CHECK_THROWS_AS(session_config_from_json(json::parse(R"({"trajectory": "spiral"})")), Error);
}

TEST_CASE("toy backends") {
    const ToyDepth depth(1.0, 2.0);
    const auto d = depth.estimate(Image(5, 3));
    CHECK(d(4, 0) == 1.0);
    CHECK(d(0, 2) == 2.0);
    CHECK(d(2, 1) == doctest::Approx(1.5));

    const ToySegmenter seg;
    const Image img = sptest::sky_ground_image(16, 16);
    const Mask whole = seg.segment(img, "anything", std::nullopt);
    CHECK(whole.popcount() > 0);
    const Mask hint = sptest::rect_mask(16, 16, 0, 0, 4, 4);
    const Mask clipped = seg.segment(img, "sky", hint);
    CHECK(clipped.popcount() > 0);
    CHECK(clipped.subset_of(hint));
    CHECK(seg.segment(img, "sky", hint) == clipped);
    CHECK_THROWS_AS(seg.segment(img, "sky", Mask::zeros(16, 16)), Error);
}

}  // TEST_SUITE
