#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scenepainter/raster.hpp"

namespace scenepainter::geometry {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 identity3();
Mat3 multiply(const Mat3& a, const Mat3& b);
Mat3 transpose(const Mat3& m);
Vec3 apply(const Mat3& m, const Vec3& v);
/// Rotation by `angle` radians about a unit axis (Rodrigues).
Mat3 axis_angle(const Vec3& axis, double angle);
/// max |R^T R - I|.
double orthonormality_error(const Mat3& r);

struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    bool operator==(const Intrinsics&) const = default;
};

/// Pinhole camera. Pixel (u, v) has its centre at integer coordinates; the
/// pose maps world to camera: X_cam = R X_world + t.
struct Camera {
    Intrinsics intrinsics;
    Mat3 rotation = identity3();
    Vec3 translation{0.0, 0.0, 0.0};
    int height = 0;
    int width = 0;

    /// Centred principal point with focal length `focal` pixels.
    static Camera centered(int height, int width, double focal);

    Vec3 center() const;        // camera centre in world coordinates
    Vec3 view_axis() const;     // +z of the camera in world coordinates
    Vec3 right_axis() const;    // +x
    Vec3 up_axis() const;       // +y (image down)
    Camera with_center(const Vec3& c) const;
    void validate() const;

    bool operator==(const Camera&) const = default;
};

nlohmann::json to_json(const Camera& camera);
Camera camera_from_json(const nlohmann::json& j);

struct ScenePoint {
    Vec3 position;
    std::array<std::uint8_t, 3> color;
    std::uint32_t source_frame = 0;
    bool operator==(const ScenePoint&) const = default;
};

/// Accumulated world-space point cloud. Append-only.
class PointCloudScene {
public:
    PointCloudScene() = default;
    explicit PointCloudScene(std::vector<ScenePoint> points) : points_(std::move(points)) {}

    const std::vector<ScenePoint>& points() const noexcept { return points_; }
    std::size_t size() const noexcept { return points_.size(); }
    bool empty() const noexcept { return points_.empty(); }
    bool operator==(const PointCloudScene&) const = default;

private:
    std::vector<ScenePoint> points_;
};

inline constexpr double kNearPlane = 1e-4;

/// One point per pixel where `select` is set (every pixel when empty).
std::vector<ScenePoint> unproject(const Image& image, const DepthMap& depth, const Camera& camera,
                                  std::uint32_t source_frame = 0, const Mask& select = {});

/// Concatenation; no deduplication.
PointCloudScene merge(const PointCloudScene& scene, const std::vector<ScenePoint>& points);

struct RenderResult {
    Image partial_image;  // holes are 0
    Mask fill_mask;       // 1 where no point survived
    DepthMap rendered_depth;  // camera-frame z where fill_mask = 0, 0 elsewhere
};

struct RenderOptions {
    /// Splat footprint in pixels; 1 = nearest pixel only.
    int splat_radius = 1;
    double near_plane = kNearPlane;
};

/// Z-buffer point rendering. Equal depths keep the earlier point.
RenderResult render(const PointCloudScene& scene, const Camera& camera, const RenderOptions& options = {});

struct DepthAlignment {
    double scale = 1.0;
    double shift = 0.0;
    bool degenerate = false;
    DepthMap depth;
};

/// Least-squares scale/shift of estimated depth onto rendered depth over
/// known pixels; falls back to identity when under-determined.
DepthAlignment align_depth(const DepthMap& estimated, const RenderResult& render_result,
                           double near_plane = kNearPlane);

enum class TrajectoryKind { Recede, Translate, Orbit };

TrajectoryKind trajectory_kind_from_string(const std::string& text);
std::string to_string(TrajectoryKind kind);

/// `steps + 1` cameras starting at `start`. Recede moves the centre along
/// -view axis by `step_size` per step; translate moves along +right axis;
/// orbit rotates by `step_size` radians per step about the up axis through
/// the look-at point `look_at_distance` ahead of the start camera.
std::vector<Camera> make_trajectory(TrajectoryKind kind, int steps, double step_size, const Camera& start,
                                    double look_at_distance = 1.0);

/// ASCII "x y z r g b" per line after a short header.
void write_xyzrgb(const PointCloudScene& scene, const std::filesystem::path& path);
std::vector<ScenePoint> read_xyzrgb(const std::filesystem::path& path);

}  // namespace scenepainter::geometry
