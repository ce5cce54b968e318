#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scenepainter/customization.hpp"
#include "scenepainter/diffusion.hpp"
#include "scenepainter/geometry.hpp"
#include "scenepainter/raster.hpp"
#include "scenepainter/scene_graph.hpp"

namespace scenepainter::pipeline {

class DepthBackend {
public:
    virtual ~DepthBackend() = default;
    virtual DepthMap estimate(const Image& image) const = 0;
    virtual std::string id() const = 0;
    virtual bool deterministic() const { return true; }
};

/// Depth depends on the row only: `near` on the bottom row, `far` on the
/// top row, linear in between.
class ToyDepth final : public DepthBackend {
public:
    explicit ToyDepth(double near = 1.0, double far = 2.0) : near_(near), far_(far) {}
    DepthMap estimate(const Image& image) const override;
    std::string id() const override { return "toy-depth"; }

private:
    double near_;
    double far_;
};

class SegmenterBackend {
public:
    virtual ~SegmenterBackend() = default;
    virtual Mask segment(const Image& image, const std::string& description,
                         const std::optional<Mask>& hint) const = 0;
    virtual std::string id() const = 0;
    virtual bool deterministic() const { return true; }
};

/// Thresholds luminance at the image mean and flood-fills (4-connected) the
/// side containing the seed pixel. The seed is the hint pixel closest to the
/// hint centroid, or the image centre; the result is clipped to the hint.
/// The description is ignored.
class ToySegmenter final : public SegmenterBackend {
public:
    Mask segment(const Image& image, const std::string& description, const std::optional<Mask>& hint) const override;
    std::string id() const override { return "toy-segmenter"; }
};

struct Backends {
    std::shared_ptr<const DepthBackend> depth;
    std::shared_ptr<const SegmenterBackend> segmenter;
    std::shared_ptr<const diffusion::LatentCodec> codec;
};

Backends toy_backends();

struct SessionConfig {
    std::uint64_t seed = 0;
    diffusion::ToyConfig model;
    customization::TrainConfig train;
    int outpaint_steps = 20;
    /// Focal length in pixels; 0 means the image width.
    double focal = 0.0;
    geometry::TrajectoryKind trajectory = geometry::TrajectoryKind::Recede;
    int trajectory_steps = 16;
    double step_size = 0.05;
    double look_at_distance = 1.5;
    int splat_radius = 1;
    /// Refine after every step even without an instruction.
    bool auto_refine = false;
    int max_image_side = 512;
    std::string embedder = "toy";
    std::string embedder_command;
};

nlohmann::json to_json(const SessionConfig& config);
SessionConfig session_config_from_json(const nlohmann::json& j);
void validate(const SessionConfig& config);

/// Concepts and optional relations used to build the initial graph.
struct SceneSpec {
    std::vector<graph::ConceptSpec> concepts;
    std::optional<std::vector<graph::RelationSpec>> relations;
};

/// Accepts masks as RLE strings ("rle") or inclusive-exclusive rectangles
/// ("rect": [y0, x0, y1, x1]); level as 1..3 or a name.
SceneSpec scene_spec_from_json(const nlohmann::json& j, int height, int width);
nlohmann::json to_json(const SceneSpec& spec);

struct Frame {
    int index = 0;
    Image image;
    DepthMap depth;
    geometry::Camera camera;
    Image partial;
    Mask fill_mask;
    std::vector<std::string> prompt;
    std::uint64_t seed = 0;
    int graph_version = 0;
    std::size_t points_added = 0;
};

struct InstructionRecord {
    int frame = 0;
    graph::RefineInstruction instruction;
    /// "pending", "applied" or "failed".
    std::string status = "pending";
    std::string error_code;
    std::string error;
    int graph_version = 0;
};

struct StepResult {
    Frame frame;
    /// Set when the step consumed an instruction. A failed refinement leaves
    /// graph and model at their previous version.
    std::optional<InstructionRecord> instruction;
};

using LogSink = std::function<void(const nlohmann::json&)>;

/// Level-1 handle, then each unmuted level-2 concept preceded by its R1
/// relation handle, in node-id order. With a focus edge: exactly its triple.
std::vector<std::string> assemble_prompt(const graph::SceneConceptGraph& graph,
                                         std::optional<graph::EdgeId> focus_edge = std::nullopt);

/// Rejects instructions that cannot apply to `graph` (unknown or muted-level
/// targets, missing description, wrong hint size) without segmenting.
void validate_instruction(const graph::SceneConceptGraph& graph, const graph::RefineInstruction& instruction);

/// Exclusive advisory lock on `<dir>/.lease`, shared by every process that
/// mutates a session.
class SessionLease {
public:
    static std::optional<SessionLease> try_acquire(const std::filesystem::path& dir);
    /// Throws SessionBusy.
    static SessionLease acquire(const std::filesystem::path& dir);

    SessionLease(SessionLease&& other) noexcept;
    SessionLease& operator=(SessionLease&& other) noexcept;
    SessionLease(const SessionLease&) = delete;
    SessionLease& operator=(const SessionLease&) = delete;
    ~SessionLease();

private:
    explicit SessionLease(int fd) : fd_(fd) {}
    int fd_ = -1;
};

inline constexpr int kSessionFormatVersion = 1;

/// One generation session, persisted under its directory after every
/// mutation. Callers hold the session lease while mutating.
class Session {
public:
    const std::filesystem::path& dir() const noexcept { return dir_; }
    std::string id() const { return dir_.filename().string(); }
    const SessionConfig& config() const noexcept { return config_; }
    const SceneSpec& spec() const noexcept { return spec_; }
    const std::vector<Frame>& frames() const noexcept { return frames_; }
    const graph::SceneConceptGraph& graph() const noexcept { return graphs_.back(); }
    const std::vector<graph::SceneConceptGraph>& graph_history() const noexcept { return graphs_; }
    int graph_version() const noexcept { return static_cast<int>(graphs_.size()) - 1; }
    const diffusion::ToyModel& model() const noexcept { return *model_; }
    const geometry::PointCloudScene& scene() const noexcept { return scene_; }
    const std::vector<geometry::Camera>& trajectory() const noexcept { return trajectory_; }
    const std::vector<InstructionRecord>& instructions() const noexcept { return instructions_; }
    std::uint64_t generation_seed() const noexcept { return generation_seed_; }
    const Backends& backends() const noexcept { return backends_; }

    /// Render, outpaint, optionally refine, lift new pixels into the scene.
    StepResult step(std::optional<graph::RefineInstruction> instruction = std::nullopt,
                    std::optional<std::vector<std::string>> prompt_override = std::nullopt);
    /// n steps without explicit instructions (queued ones are consumed).
    std::vector<Frame> run(int n);
    /// Applies an instruction against the latest frame without generating.
    InstructionRecord refine_now(const graph::RefineInstruction& instruction);
    /// Stores an instruction for the next step.
    void queue_instruction(const graph::RefineInstruction& instruction);
    /// Seed for subsequent frames; frame i uses derive_seed(seed, i).
    void set_generation_seed(std::uint64_t seed);
    /// Only allowed while the session holds frame 0 alone.
    void set_trajectory(geometry::TrajectoryKind kind);

    void set_log_sink(LogSink sink) { sink_ = std::move(sink); }

private:
    friend Session init_session(const std::filesystem::path&, const Image&, const SceneSpec&, const SessionConfig&,
                                Backends, LogSink);
    friend Session open_session(const std::filesystem::path&, Backends);

    Session() = default;

    InstructionRecord apply_refinement(const graph::RefineInstruction& instruction, const Image& frame,
                                       int frame_index);
    void auto_refine(const Image& frame, int frame_index);
    void commit_version(graph::SceneConceptGraph graph, diffusion::ToyModel model);
    void persist_session_json() const;
    void persist_frame(const Frame& frame) const;
    void log(const nlohmann::json& line) const;
    std::uint64_t frame_seed(int index) const;

    std::filesystem::path dir_;
    SessionConfig config_;
    SceneSpec spec_;
    Backends backends_;
    std::vector<graph::SceneConceptGraph> graphs_;
    std::shared_ptr<diffusion::ToyModel> model_;
    geometry::PointCloudScene scene_;
    std::vector<Frame> frames_;
    std::vector<geometry::Camera> trajectory_;
    std::vector<InstructionRecord> instructions_;
    std::vector<graph::RefineInstruction> pending_;
    std::uint64_t generation_seed_ = 0;
    LogSink sink_;
};

/// Builds the graph, trains the customised model, lifts I_0 into the scene
/// and writes the session directory.
Session init_session(const std::filesystem::path& dir, const Image& image, const SceneSpec& spec,
                     const SessionConfig& config, Backends backends = toy_backends(), LogSink sink = {});

Session open_session(const std::filesystem::path& dir, Backends backends = toy_backends());

/// Problems found in a session directory; empty when it is well formed.
std::vector<std::string> validate_session_dir(const std::filesystem::path& dir);

nlohmann::json frame_metadata(const Frame& frame);
nlohmann::json to_json(const InstructionRecord& record);

}  // namespace scenepainter::pipeline
