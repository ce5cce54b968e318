#include "scenepainter/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/image_io.hpp"
#include "scenepainter/outpaint.hpp"
#include "scenepainter/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace scenepainter::pipeline {

// ---------------------------------------------------------------------------
// Toy backends

DepthMap ToyDepth::estimate(const Image& image) const {
    if (image.empty()) throw Error(ErrorCode::EmptyImage, "depth of an empty image");
    const int H = image.height();
    DepthMap d(H, image.width());
    for (int y = 0; y < H; ++y) {
        const double frac = H == 1 ? 0.0 : static_cast<double>(H - 1 - y) / (H - 1);
        const double v = near_ + (far_ - near_) * frac;
        for (int x = 0; x < image.width(); ++x) d(y, x) = v;
    }
    return d;
}

Mask ToySegmenter::segment(const Image& image, const std::string&, const std::optional<Mask>& hint) const {
    if (image.empty()) throw Error(ErrorCode::EmptyImage, "cannot segment an empty image");
    const int H = image.height(), W = image.width();
    if (hint && !hint->same_extent(image)) throw Error(ErrorCode::MaskSizeMismatch, "hint does not match the frame");
    if (hint && hint->none_set()) throw Error(ErrorCode::SegmentationEmpty, "hint mask is empty");

    const std::size_t plane = image.plane_size();
    std::vector<double> lum(plane);
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
        lum[i] = 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i];
        mean += lum[i];
    }
    mean /= static_cast<double>(plane);

    std::size_t seed = static_cast<std::size_t>(H / 2) * W + W / 2;
    if (hint) {
        double cy = 0.0, cx = 0.0;
        const double n = static_cast<double>(hint->popcount());
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if ((*hint)(y, x)) cy += y / n, cx += x / n;
        double best = std::numeric_limits<double>::infinity();
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!(*hint)(y, x)) continue;
                const double d = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                if (d < best) best = d, seed = static_cast<std::size_t>(y) * W + x;
            }
    }

    const bool bright = lum[seed] > mean;
    Mask out = Mask::zeros(H, W);
    std::deque<std::size_t> queue{seed};
    out[seed] = 1;
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop_front();
        const int y = static_cast<int>(i / W), x = static_cast<int>(i % W);
        const int ny[4] = {y - 1, y + 1, y, y};
        const int nx[4] = {x, x, x - 1, x + 1};
        for (int k = 0; k < 4; ++k) {
            if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= W) continue;
            const std::size_t j = static_cast<std::size_t>(ny[k]) * W + nx[k];
            if (out[j] || (lum[j] > mean) != bright || (hint && !(*hint)[j])) continue;
            out[j] = 1;
            queue.push_back(j);
        }
    }
    return out;
}

Backends toy_backends() {
    return {std::make_shared<ToyDepth>(), std::make_shared<ToySegmenter>(), std::make_shared<diffusion::ToyCodec>(4)};
}

// ---------------------------------------------------------------------------
// Config and spec documents

json to_json(const SessionConfig& c) {
    return {{"seed", c.seed},
            {"model", diffusion::to_json(c.model)},
            {"train", customization::to_json(c.train)},
            {"outpaint_steps", c.outpaint_steps},
            {"focal", c.focal},
            {"trajectory", geometry::to_string(c.trajectory)},
            {"trajectory_steps", c.trajectory_steps},
            {"step_size", c.step_size},
            {"look_at_distance", c.look_at_distance},
            {"splat_radius", c.splat_radius},
            {"auto_refine", c.auto_refine},
            {"max_image_side", c.max_image_side},
            {"embedder", c.embedder},
            {"embedder_command", c.embedder_command}};
}

SessionConfig session_config_from_json(const json& j) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be a JSON object");
    SessionConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        if (j.contains("model")) {
            json merged = diffusion::to_json(c.model);
            merged.update(j.at("model"));
            c.model = diffusion::toy_config_from_json(merged);
        }
        if (j.contains("train")) c.train = customization::train_config_from_json(j.at("train"));
        c.outpaint_steps = j.value("outpaint_steps", c.outpaint_steps);
        c.focal = j.value("focal", c.focal);
        if (j.contains("trajectory"))
            c.trajectory = geometry::trajectory_kind_from_string(j.at("trajectory").get<std::string>());
        c.trajectory_steps = j.value("trajectory_steps", c.trajectory_steps);
        c.step_size = j.value("step_size", c.step_size);
        c.look_at_distance = j.value("look_at_distance", c.look_at_distance);
        c.splat_radius = j.value("splat_radius", c.splat_radius);
        c.auto_refine = j.value("auto_refine", c.auto_refine);
        c.max_image_side = j.value("max_image_side", c.max_image_side);
        c.embedder = j.value("embedder", c.embedder);
        c.embedder_command = j.value("embedder_command", c.embedder_command);
    } catch (const json::exception& ex) {
        throw Error(ErrorCode::InvalidConfig, ex.what());
    }
    validate(c);
    return c;
}

void validate(const SessionConfig& c) {
    customization::validate(c.train);
    if (c.outpaint_steps < 1) throw Error(ErrorCode::InvalidConfig, "outpaint_steps must be at least 1");
    if (c.trajectory_steps < 0) throw Error(ErrorCode::InvalidConfig, "trajectory_steps must be non-negative");
    if (!std::isfinite(c.step_size) || !std::isfinite(c.look_at_distance))
        throw Error(ErrorCode::InvalidConfig, "trajectory parameters must be finite");
    if (!(c.focal >= 0.0)) throw Error(ErrorCode::InvalidConfig, "focal must be non-negative");
    if (c.splat_radius < 1) throw Error(ErrorCode::InvalidConfig, "splat_radius must be at least 1");
    if (c.max_image_side < 8) throw Error(ErrorCode::InvalidConfig, "max_image_side must be at least 8");
    if (c.embedder != "toy" && c.embedder != "adapter")
        throw Error(ErrorCode::InvalidConfig, "embedder must be 'toy' or 'adapter'");
}

namespace {

graph::Level level_from_json(const json& j) {
    if (j.is_number_integer()) {
        const int v = j.get<int>();
        if (v < 1 || v > 3) throw Error(ErrorCode::InvalidConfig, "level must be 1, 2 or 3");
        return static_cast<graph::Level>(v);
    }
    const auto s = j.get<std::string>();
    if (s == "environment") return graph::Level::Environment;
    if (s == "region") return graph::Level::Region;
    if (s == "object") return graph::Level::Object;
    throw Error(ErrorCode::InvalidConfig, "unknown level '" + s + "'");
}

Mask mask_from_json(const json& c, int h, int w, graph::Level level) {
    if (c.contains("rle")) return graph::decode_rle(c.at("rle").get<std::string>(), h, w);
    if (c.contains("mask") && c.at("mask").is_string()) return graph::decode_rle(c.at("mask").get<std::string>(), h, w);
    if (c.contains("rect")) {
        const auto& r = c.at("rect");
        const int y0 = r.at(0), x0 = r.at(1), y1 = r.at(2), x1 = r.at(3);
        if (y0 < 0 || x0 < 0 || y1 > h || x1 > w || y0 >= y1 || x0 >= x1)
            throw Error(ErrorCode::MaskSizeMismatch, "rect outside the image or empty");
        Mask m = Mask::zeros(h, w);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) m(y, x) = 1;
        return m;
    }
    if (level == graph::Level::Environment) return Mask::ones(h, w);
    throw Error(ErrorCode::InvalidConfig, "concept needs a mask ('rle' or 'rect')");
}

}  // namespace

SceneSpec scene_spec_from_json(const json& j, int height, int width) {
    SceneSpec spec;
    try {
        for (const auto& c : j.at("concepts")) {
            graph::ConceptSpec cs;
            cs.name = c.value("name", std::string{});
            cs.level = c.contains("level") ? level_from_json(c.at("level")) : graph::Level::Region;
            cs.mask = mask_from_json(c, height, width, cs.level);
            if (c.contains("parent")) cs.parent = c.at("parent").get<std::string>();
            spec.concepts.push_back(std::move(cs));
        }
        if (j.contains("relations")) {
            std::vector<graph::RelationSpec> rels;
            for (const auto& r : j.at("relations"))
                rels.push_back({graph::edge_kind_from_string(r.at("kind").get<std::string>()),
                                r.at("first").get<std::string>(), r.at("second").get<std::string>()});
            spec.relations = std::move(rels);
        }
    } catch (const json::exception& ex) {
        throw Error(ErrorCode::CorruptDocument, std::string("scene spec: ") + ex.what());
    }
    return spec;
}

json to_json(const SceneSpec& spec) {
    json concepts = json::array();
    for (const auto& c : spec.concepts) {
        json o{{"name", c.name}, {"level", static_cast<int>(c.level)}, {"rle", graph::encode_rle(c.mask)}};
        if (c.parent) o["parent"] = *c.parent;
        concepts.push_back(std::move(o));
    }
    json out{{"concepts", std::move(concepts)}};
    if (spec.relations) {
        json rels = json::array();
        for (const auto& r : *spec.relations)
            rels.push_back({{"kind", std::string(graph::to_string(r.kind))}, {"first", r.first}, {"second", r.second}});
        out["relations"] = std::move(rels);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt assembly

std::vector<std::string> assemble_prompt(const graph::SceneConceptGraph& g, std::optional<graph::EdgeId> focus) {
    if (focus) {
        const auto t = graph::prompt_triple(g, *focus);
        return {t.tokens.begin(), t.tokens.end()};
    }
    const auto& env = g.environment();
    std::vector<std::string> out{env.handle};
    std::vector<const graph::ConceptNode*> regions;
    for (const auto& n : g.nodes())
        if (n.level == graph::Level::Region && !n.muted) regions.push_back(&n);
    std::sort(regions.begin(), regions.end(), [](auto* a, auto* b) { return a->id < b->id; });
    for (const auto* n : regions) {
        if (auto e = g.edge_between(env.id, n->id)) out.push_back(g.edge(*e).handle);
        out.push_back(n->handle);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lease

std::optional<SessionLease> SessionLease::try_acquire(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    const auto path = dir / ".lease";
    const int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd < 0) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd);
        return std::nullopt;
    }
    return SessionLease(fd);
}

SessionLease SessionLease::acquire(const fs::path& dir) {
    auto lease = try_acquire(dir);
    if (!lease) throw Error(ErrorCode::SessionBusy, "session " + dir.string() + " is being modified");
    return std::move(*lease);
}

SessionLease::SessionLease(SessionLease&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

SessionLease& SessionLease::operator=(SessionLease&& other) noexcept {
    if (this != &other) {
        if (fd_ >= 0) ::close(fd_);
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

SessionLease::~SessionLease() {
    if (fd_ >= 0) ::close(fd_);
}

// ---------------------------------------------------------------------------
// Session

namespace {

std::string numbered(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", i);
    return buf;
}

fs::path graph_path(const fs::path& dir, int v) { return dir / "graph" / (numbered(v) + ".json"); }
fs::path ckpt_path(const fs::path& dir, int v) { return dir / "ckpt" / (numbered(v) + ".bin"); }
fs::path image_path(const fs::path& dir, int i) { return dir / "frames" / (numbered(i) + ".png"); }
fs::path partial_path(const fs::path& dir, int i) { return dir / "frames" / (numbered(i) + ".partial.png"); }
fs::path depth_path(const fs::path& dir, int i) { return dir / "frames" / (numbered(i) + ".depth.npyish"); }

void check_image(const Image& image, const SessionConfig& config, const diffusion::LatentCodec& codec) {
    if (image.empty()) throw Error(ErrorCode::EmptyImage, "initial image is empty");
    const int unit = codec.factor() * 2;
    if (image.height() % unit != 0 || image.width() % unit != 0)
        throw Error(ErrorCode::InvalidConfig,
                    "image sides must be multiples of " + std::to_string(unit) + " for the toy model");
    if (image.height() > config.max_image_side || image.width() > config.max_image_side)
        throw Error(ErrorCode::InvalidConfig, "image exceeds max_image_side");
}

std::vector<geometry::Camera> build_trajectory(const SessionConfig& c, int h, int w) {
    const auto start = geometry::Camera::centered(h, w, c.focal > 0.0 ? c.focal : static_cast<double>(w));
    return geometry::make_trajectory(c.trajectory, c.trajectory_steps, c.step_size, start, c.look_at_distance);
}

void check_depth(const DepthMap& d, const Image& image) {
    if (!d.same_extent(image)) throw Error(ErrorCode::ShapeMismatch, "depth backend returned the wrong size");
    for (double v : d.storage())
        if (!(v > 0.0) || !std::isfinite(v)) throw Error(ErrorCode::NonPositiveDepth, "depth backend output");
}

void append_lines(const fs::path& path, const std::vector<std::string>& lines) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw Error(ErrorCode::IoError, "cannot append to " + path.string());
    for (const auto& l : lines) os << l << '\n';
}

/// Graph with only the environment, the changed concept (new mask) and the
/// edge joining them; used as the refinement target for change instructions.
graph::SceneConceptGraph change_target(const graph::SceneConceptGraph& g, graph::EdgeId edge, Mask mask) {
    const auto& e = g.edge(edge);
    std::vector<graph::ConceptNode> nodes;
    for (auto id : {e.endpoints.first, e.endpoints.second}) {
        auto n = g.node(id);
        if (n.level != graph::Level::Environment) n.mask = mask;
        n.parent_region.reset();
        nodes.push_back(std::move(n));
    }
    return graph::SceneConceptGraph::from_parts(g.height(), g.width(), std::move(nodes), {e});
}

}  // namespace

void validate_instruction(const graph::SceneConceptGraph& g, const graph::RefineInstruction& in) {
    using Kind = graph::RefineInstruction::Kind;
    if (in.mask_hint && (in.mask_hint->height() != g.height() || in.mask_hint->width() != g.width()))
        throw Error(ErrorCode::MaskSizeMismatch, "mask hint does not match the frame size");
    if (in.kind == Kind::Add) {
        if (in.description.empty()) throw Error(ErrorCode::InvalidInstruction, "add requires a description");
        return;
    }
    graph::apply_instruction(g, in, {});
}

std::uint64_t Session::frame_seed(int index) const {
    return derive_seed(generation_seed_, static_cast<std::uint64_t>(index));
}

void Session::log(const json& line) const {
    append_lines(dir_ / "train.log", {line.dump()});
    if (sink_) sink_(line);
}

void Session::commit_version(graph::SceneConceptGraph g, diffusion::ToyModel m) {
    const int v = static_cast<int>(graphs_.size());
    write_file_atomic(graph_path(dir_, v), graph::serialize(g).dump(1));
    diffusion::save_checkpoint(m, ckpt_path(dir_, v));
    graphs_.push_back(std::move(g));
    model_ = std::make_shared<diffusion::ToyModel>(std::move(m));
}

json frame_metadata(const Frame& f) {
    return {{"index", f.index},
            {"image", "frames/" + numbered(f.index) + ".png"},
            {"partial", "frames/" + numbered(f.index) + ".partial.png"},
            {"depth", "frames/" + numbered(f.index) + ".depth.npyish"},
            {"height", f.image.height()},
            {"width", f.image.width()},
            {"camera", geometry::to_json(f.camera)},
            {"prompt", f.prompt},
            {"seed", f.seed},
            {"graph_version", f.graph_version},
            {"points_added", f.points_added},
            {"fill_mask", graph::encode_rle(f.fill_mask)},
            {"filled_pixels", f.fill_mask.popcount()}};
}

json to_json(const InstructionRecord& r) {
    json j{{"frame", r.frame},
           {"instruction", graph::instruction_to_json(r.instruction)},
           {"status", r.status},
           {"graph_version", r.graph_version}};
    if (!r.error_code.empty()) j["error"] = {{"code", r.error_code}, {"message", r.error}};
    return j;
}

void Session::persist_frame(const Frame& f) const {
    write_png(f.image, image_path(dir_, f.index));
    write_png(f.partial, partial_path(dir_, f.index));
    write_depth(f.depth, depth_path(dir_, f.index));
}

void Session::persist_session_json() const {
    json frames = json::array();
    for (const auto& f : frames_) frames.push_back(frame_metadata(f));
    json instructions = json::array();
    for (const auto& r : instructions_) instructions.push_back(to_json(r));
    json pending = json::array();
    for (const auto& p : pending_) pending.push_back(graph::instruction_to_json(p));
    json cameras = json::array();
    for (const auto& c : trajectory_) cameras.push_back(geometry::to_json(c));
    const json doc{{"format", "scenepainter-session"},
                   {"version", kSessionFormatVersion},
                   {"id", id()},
                   {"image_size", {graph().height(), graph().width()}},
                   {"seed", config_.seed},
                   {"generation_seed", generation_seed_},
                   {"config", to_json(config_)},
                   {"spec", to_json(spec_)},
                   {"graph_version", graph_version()},
                   {"trajectory", {{"kind", geometry::to_string(config_.trajectory)}, {"cameras", cameras}}},
                   {"frames", frames},
                   {"scene_points", scene_.size()},
                   {"instructions", instructions},
                   {"pending", pending},
                   {"backends", {{"depth", backends_.depth->id()}, {"segmenter", backends_.segmenter->id()}}}};
    write_file_atomic(dir_ / "session.json", doc.dump(1));
}

Session init_session(const fs::path& dir, const Image& image, const SceneSpec& spec, const SessionConfig& config,
                     Backends backends, LogSink sink) {
    validate(config);
    if (!backends.depth || !backends.segmenter || !backends.codec)
        throw Error(ErrorCode::InvalidConfig, "incomplete backend set");
    check_image(image, config, *backends.codec);
    if (fs::exists(dir / "session.json")) throw Error(ErrorCode::InvalidConfig, dir.string() + " already holds a session");
    for (const char* sub : {"graph", "frames", "ckpt"}) fs::create_directories(dir / sub);

    Session s;
    s.dir_ = dir;
    s.config_ = config;
    s.spec_ = spec;
    s.backends_ = std::move(backends);
    s.sink_ = std::move(sink);
    s.generation_seed_ = config.seed;
    const int H = image.height(), W = image.width();

    auto g0 = graph::build_graph(H, W, spec.concepts, spec.relations);

    auto mc = config.model;
    mc.latent_channels = s.backends_.codec->latent_channels();
    mc.latent_height = H / s.backends_.codec->factor();
    mc.latent_width = W / s.backends_.codec->factor();
    auto base = diffusion::ToyModel::initialized(
        mc, diffusion::NoiseSchedule::linear(),
        diffusion::EmbeddingTable::with_base_vocabulary(mc.embed_dim, derive_seed(config.seed, 1)),
        derive_seed(config.seed, 2));

    auto tc = config.train;
    tc.seed = derive_seed(config.seed, 0x636f6e7374ULL + config.train.seed);
    diffusion::ToyModel trained = base;
    if (tc.phase1_steps + tc.phase2_steps > 0) {
        std::vector<std::string> lines;
        auto record = [&](const customization::StepRecord& r) {
            auto j = customization::to_json(r);
            j["event"] = "construct";
            j["frame"] = 0;
            lines.push_back(j.dump());
        };
        try {
            trained = customization::train_construction(g0, image, base, *s.backends_.codec, tc, record).model;
        } catch (const Error& e) {
            append_lines(dir / "train.log", lines);
            if (e.code() == ErrorCode::DivergedLoss) throw Error(ErrorCode::ConstructionDiverged, e.detail());
            throw;
        }
        append_lines(dir / "train.log", lines);
        if (s.sink_)
            for (const auto& l : lines) s.sink_(json::parse(l));
    } else {
        customization::ensure_handles(trained, g0, tc.seed);
        append_lines(dir / "train.log", {});
    }
    s.log({{"event", "constructed"}, {"train_seed", tc.seed}, {"steps", tc.phase1_steps + tc.phase2_steps}});

    s.trajectory_ = build_trajectory(config, H, W);
    s.commit_version(std::move(g0), std::move(trained));

    Frame f;
    f.index = 0;
    f.image = image;
    f.camera = s.trajectory_.front();
    f.depth = s.backends_.depth->estimate(image);
    check_depth(f.depth, image);
    f.partial = image;
    f.fill_mask = Mask::zeros(H, W);
    f.prompt = assemble_prompt(s.graph());
    f.seed = s.frame_seed(0);
    f.graph_version = 0;
    auto pts = geometry::unproject(image, f.depth, f.camera, 0);
    f.points_added = pts.size();
    s.scene_ = geometry::merge(s.scene_, pts);

    s.persist_frame(f);
    s.frames_.push_back(std::move(f));
    geometry::write_xyzrgb(s.scene_, dir / "scene.xyzrgb");
    s.persist_session_json();
    return s;
}

InstructionRecord Session::apply_refinement(const graph::RefineInstruction& in, const Image& frame, int frame_index) {
    InstructionRecord record;
    record.frame = frame_index;
    record.instruction = in;
    try {
        const auto& seg = *backends_.segmenter;
        auto segmenter = [&](const std::string& desc, const std::optional<Mask>& hint) {
            return seg.segment(frame, desc, hint);
        };
        auto res = graph::apply_instruction(graph(), in, segmenter);
        diffusion::ToyModel next = *model_;
        if (res.affected_edge) {
            auto target = res.graph;
            if (in.kind == graph::RefineInstruction::Kind::Change) {
                Mask m = segmenter(in.description, in.mask_hint);
                if (m.none_set()) throw Error(ErrorCode::SegmentationEmpty, "no region found for '" + in.description + "'");
                target = change_target(res.graph, *res.affected_edge, std::move(m));
            }
            auto tc = config_.train;
            tc.seed = derive_seed(config_.seed, 0x72656600000ULL + static_cast<std::uint64_t>(frame_index) * 64 +
                                                    instructions_.size());
            std::vector<std::string> lines;
            auto sink = [&](const customization::StepRecord& r) {
                auto j = customization::to_json(r);
                j["event"] = "refine";
                j["frame"] = frame_index;
                lines.push_back(j.dump());
            };
            try {
                next = customization::train_refine(target, *res.affected_edge, frame, next, *backends_.codec, tc, sink)
                           .model;
            } catch (...) {
                append_lines(dir_ / "train.log", lines);
                throw;
            }
            append_lines(dir_ / "train.log", lines);
            if (sink_)
                for (const auto& l : lines) sink_(json::parse(l));
        }
        commit_version(std::move(res.graph), std::move(next));
        record.status = "applied";
    } catch (const Error& e) {
        record.status = "failed";
        record.error_code = std::string(to_string(e.code()));
        record.error = e.detail();
    }
    record.graph_version = graph_version();
    log({{"event", "instruction"}, {"record", to_json(record)}});
    instructions_.push_back(record);
    return record;
}

void Session::auto_refine(const Image& frame, int frame_index) {
    std::vector<graph::EdgeId> edges;
    const auto& g = graph();
    for (const auto& e : g.edges())
        if (e.kind == graph::EdgeKind::R1 && !g.node(e.endpoints.first).muted && !g.node(e.endpoints.second).muted)
            edges.push_back(e.id);
    if (edges.empty()) return;
    const auto edge = edges[static_cast<std::size_t>(frame_index) % edges.size()];
    auto tc = config_.train;
    tc.seed = derive_seed(config_.seed, 0x6175746fULL + static_cast<std::uint64_t>(frame_index));
    std::vector<std::string> lines;
    auto sink = [&](const customization::StepRecord& r) {
        auto j = customization::to_json(r);
        j["event"] = "auto_refine";
        j["frame"] = frame_index;
        lines.push_back(j.dump());
    };
    try {
        auto trained = customization::train_refine(g, edge, frame, *model_, *backends_.codec, tc, sink).model;
        append_lines(dir_ / "train.log", lines);
        commit_version(g, std::move(trained));
    } catch (const Error& e) {
        append_lines(dir_ / "train.log", lines);
        log({{"event", "auto_refine_failed"}, {"frame", frame_index}, {"code", std::string(to_string(e.code()))},
             {"message", e.detail()}});
    }
}

StepResult Session::step(std::optional<graph::RefineInstruction> instruction,
                         std::optional<std::vector<std::string>> prompt_override) {
    if (frames_.empty()) throw Error(ErrorCode::InvalidConfig, "session has no initial frame");
    const int index = static_cast<int>(frames_.size());
    if (static_cast<std::size_t>(index) >= trajectory_.size())
        throw Error(ErrorCode::TrajectoryExhausted,
                    "trajectory has " + std::to_string(trajectory_.size()) + " cameras");
    bool from_queue = false;
    if (!instruction && !pending_.empty()) {
        instruction = pending_.front();
        from_queue = true;
    }
    if (instruction) validate_instruction(graph(), *instruction);
    if (prompt_override) {
        for (const auto& tok : *prompt_override) {
            if (const auto* n = graph().find_node(tok); n && n->muted)
                throw Error(ErrorCode::MutedEndpoint, tok + " is muted");
            model_->embeddings().at(tok);
        }
    }

    Frame f;
    f.index = index;
    f.camera = trajectory_[static_cast<std::size_t>(index)];
    const auto rr = geometry::render(scene_, f.camera, {config_.splat_radius, geometry::kNearPlane});
    f.partial = rr.partial_image;
    f.fill_mask = rr.fill_mask;
    f.prompt = prompt_override ? *prompt_override : assemble_prompt(graph());
    f.seed = frame_seed(index);
    f.graph_version = graph_version();

    const auto outpainter = outpaint::to_outpainter(model_, backends_.codec);
    f.image = outpainter.outpaint({rr.partial_image, rr.fill_mask, f.prompt, f.seed, config_.outpaint_steps}).image;

    StepResult result;
    if (from_queue) pending_.erase(pending_.begin());
    if (instruction) result.instruction = apply_refinement(*instruction, f.image, index);
    else if (config_.auto_refine) auto_refine(f.image, index);

    const auto estimated = backends_.depth->estimate(f.image);
    check_depth(estimated, f.image);
    const auto aligned = geometry::align_depth(estimated, rr);
    if (aligned.degenerate) log({{"event", "degenerate_fit"}, {"frame", index}});
    f.depth = aligned.depth;
    auto pts = geometry::unproject(f.image, f.depth, f.camera, static_cast<std::uint32_t>(index), rr.fill_mask);
    f.points_added = pts.size();
    scene_ = geometry::merge(scene_, pts);

    persist_frame(f);
    frames_.push_back(f);
    geometry::write_xyzrgb(scene_, dir_ / "scene.xyzrgb");
    persist_session_json();
    result.frame = std::move(f);
    return result;
}

std::vector<Frame> Session::run(int n) {
    if (n < 0) throw Error(ErrorCode::InvalidConfig, "frame count must be non-negative");
    std::vector<Frame> out;
    for (int i = 0; i < n; ++i) out.push_back(step().frame);
    return out;
}

InstructionRecord Session::refine_now(const graph::RefineInstruction& instruction) {
    validate_instruction(graph(), instruction);
    const auto& latest = frames_.back();
    auto record = apply_refinement(instruction, latest.image, latest.index);
    persist_session_json();
    return record;
}

void Session::queue_instruction(const graph::RefineInstruction& instruction) {
    validate_instruction(graph(), instruction);
    pending_.push_back(instruction);
    persist_session_json();
}

void Session::set_generation_seed(std::uint64_t seed) {
    if (seed == generation_seed_) return;
    generation_seed_ = seed;
    log({{"event", "generation_seed"}, {"seed", seed}, {"from_frame", frames_.size()}});
    persist_session_json();
}

void Session::set_trajectory(geometry::TrajectoryKind kind) {
    if (kind == config_.trajectory) return;
    if (frames_.size() > 1)
        throw Error(ErrorCode::InvalidConfig, "trajectory is fixed once frames beyond the first exist");
    config_.trajectory = kind;
    trajectory_ = build_trajectory(config_, graph().height(), graph().width());
    persist_session_json();
}

Session open_session(const fs::path& dir, Backends backends) {
    const auto doc_path = dir / "session.json";
    if (!fs::exists(doc_path)) throw Error(ErrorCode::UnknownSession, dir.string() + " has no session.json");
    json doc;
    try {
        doc = json::parse(read_file(doc_path));
    } catch (const json::exception& ex) {
        throw Error(ErrorCode::CorruptDocument, std::string("session.json: ") + ex.what());
    }
    if (doc.value("format", std::string{}) != "scenepainter-session")
        throw Error(ErrorCode::CorruptDocument, "session.json has the wrong format tag");
    if (doc.value("version", -1) != kSessionFormatVersion)
        throw Error(ErrorCode::SchemaVersionMismatch, "session format version " + doc.value("version", json(-1)).dump());

    Session s;
    s.dir_ = dir;
    s.backends_ = std::move(backends);
    try {
        s.config_ = session_config_from_json(doc.at("config"));
        const int H = doc.at("image_size").at(0), W = doc.at("image_size").at(1);
        s.spec_ = scene_spec_from_json(doc.at("spec"), H, W);
        s.generation_seed_ = doc.at("generation_seed").get<std::uint64_t>();
        const int version = doc.at("graph_version");
        for (int v = 0; v <= version; ++v)
            s.graphs_.push_back(graph::deserialize(json::parse(read_file(graph_path(dir, v)))));
        s.model_ = std::make_shared<diffusion::ToyModel>(diffusion::load_checkpoint(ckpt_path(dir, version)));
        s.trajectory_ = build_trajectory(s.config_, H, W);

        std::size_t total_points = 0;
        for (const auto& m : doc.at("frames")) {
            Frame f;
            f.index = m.at("index");
            if (f.index != static_cast<int>(s.frames_.size()))
                throw Error(ErrorCode::CorruptDocument, "frame indices are not contiguous");
            f.image = read_png(image_path(dir, f.index));
            f.partial = read_png(partial_path(dir, f.index));
            f.depth = read_depth(depth_path(dir, f.index));
            f.camera = geometry::camera_from_json(m.at("camera"));
            f.prompt = m.at("prompt").get<std::vector<std::string>>();
            f.seed = m.at("seed").get<std::uint64_t>();
            f.graph_version = m.at("graph_version");
            f.points_added = m.at("points_added").get<std::size_t>();
            f.fill_mask = graph::decode_rle(m.at("fill_mask").get<std::string>(), H, W);
            total_points += f.points_added;
            s.frames_.push_back(std::move(f));
        }
        for (const auto& r : doc.at("instructions")) {
            InstructionRecord rec;
            rec.frame = r.at("frame");
            rec.instruction = graph::instruction_from_json(r.at("instruction"), H, W);
            rec.status = r.at("status");
            rec.graph_version = r.at("graph_version");
            if (r.contains("error")) {
                rec.error_code = r.at("error").at("code");
                rec.error = r.at("error").at("message");
            }
            s.instructions_.push_back(std::move(rec));
        }
        for (const auto& p : doc.at("pending")) s.pending_.push_back(graph::instruction_from_json(p, H, W));

        // Points written after the last session.json commit are dropped.
        auto pts = geometry::read_xyzrgb(dir / "scene.xyzrgb");
        if (pts.size() < total_points) throw Error(ErrorCode::CorruptDocument, "scene.xyzrgb is missing points");
        pts.resize(total_points);
        std::size_t k = 0;
        for (const auto& f : s.frames_)
            for (std::size_t i = 0; i < f.points_added; ++i) pts[k++].source_frame = static_cast<std::uint32_t>(f.index);
        s.scene_ = geometry::PointCloudScene(std::move(pts));
    } catch (const json::exception& ex) {
        throw Error(ErrorCode::CorruptDocument, std::string("session.json: ") + ex.what());
    }
    if (s.frames_.empty()) throw Error(ErrorCode::CorruptDocument, "session has no frames");
    return s;
}

std::vector<std::string> validate_session_dir(const fs::path& dir) {
    std::vector<std::string> problems;
    std::optional<Session> s;
    try {
        s.emplace(open_session(dir));
    } catch (const Error& e) {
        problems.push_back(std::string(to_string(e.code())) + ": " + e.detail());
        return problems;
    }
    for (int v = 0; v <= s->graph_version(); ++v) {
        for (const auto& p : graph::invariant_violations(s->graph_history()[static_cast<std::size_t>(v)]))
            problems.push_back("graph " + numbered(v) + ": " + p);
        if (!fs::exists(ckpt_path(dir, v))) problems.push_back("missing checkpoint " + numbered(v));
    }
    for (const auto& f : s->frames()) {
        const std::string tag = "frame " + numbered(f.index) + ": ";
        if (!f.image.same_extent(f.partial) || !f.image.same_extent(f.depth) || !f.image.same_extent(f.fill_mask))
            problems.push_back(tag + "raster sizes disagree");
        for (double d : f.depth.storage())
            if (!(d > 0.0) || !std::isfinite(d)) {
                problems.push_back(tag + "non-positive depth");
                break;
            }
        const std::size_t plane = f.image.plane_size();
        for (std::size_t i = 0; i < plane && f.image.same_extent(f.fill_mask); ++i)
            if (!f.fill_mask[i] && (f.image[i] != f.partial[i] || f.image[plane + i] != f.partial[plane + i] ||
                                    f.image[2 * plane + i] != f.partial[2 * plane + i])) {
                problems.push_back(tag + "known pixels differ from the render");
                break;
            }
        if (f.graph_version > s->graph_version()) problems.push_back(tag + "refers to a future graph version");
        else {
            const auto& g = s->graph_history()[static_cast<std::size_t>(f.graph_version)];
            for (const auto& tok : f.prompt)
                if (const auto* n = g.find_node(tok); n && n->muted) problems.push_back(tag + "prompt uses muted " + tok);
        }
    }
    std::ifstream log(dir / "train.log");
    if (!log) problems.push_back("missing train.log");
    std::string line;
    int lineno = 0;
    while (std::getline(log, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (!json::accept(line)) problems.push_back("train.log line " + std::to_string(lineno) + " is not JSON");
    }
    return problems;
}

}  // namespace scenepainter::pipeline
