#include "scenepainter/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"

namespace scenepainter::geometry {

Mat3 identity3() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

Mat3 multiply(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

Mat3 transpose(const Mat3& m) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[i][j] = m[j][i];
    return r;
}

Vec3 apply(const Mat3& m, const Vec3& v) {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

Mat3 axis_angle(const Vec3& axis, double angle) {
    const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    const double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
    const double c = std::cos(angle), s = std::sin(angle), C = 1.0 - c;
    return {{{c + x * x * C, x * y * C - z * s, x * z * C + y * s},
             {y * x * C + z * s, c + y * y * C, y * z * C - x * s},
             {z * x * C - y * s, z * y * C + x * s, c + z * z * C}}};
}

double orthonormality_error(const Mat3& r) {
    const auto p = multiply(transpose(r), r);
    double err = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) err = std::max(err, std::abs(p[i][j] - (i == j ? 1.0 : 0.0)));
    return err;
}

// ---------------------------------------------------------------------------
// Camera

Camera Camera::centered(int height, int width, double focal) {
    Camera c;
    c.height = height;
    c.width = width;
    c.intrinsics = {focal, focal, (width - 1) / 2.0, (height - 1) / 2.0};
    return c;
}

Vec3 Camera::center() const {
    const auto rt = transpose(rotation);
    const auto c = apply(rt, translation);
    return {-c[0], -c[1], -c[2]};
}

Vec3 Camera::view_axis() const { return {rotation[2][0], rotation[2][1], rotation[2][2]}; }
Vec3 Camera::right_axis() const { return {rotation[0][0], rotation[0][1], rotation[0][2]}; }
Vec3 Camera::up_axis() const { return {rotation[1][0], rotation[1][1], rotation[1][2]}; }

Camera Camera::with_center(const Vec3& c) const {
    Camera out = *this;
    const auto rc = apply(rotation, c);
    out.translation = {-rc[0], -rc[1], -rc[2]};
    return out;
}

void Camera::validate() const {
    if (!(intrinsics.fx > 0) || !(intrinsics.fy > 0))
        throw Error(ErrorCode::InvalidConfig, "camera focal lengths must be positive");
    if (height <= 0 || width <= 0) throw Error(ErrorCode::InvalidConfig, "camera image size must be positive");
    if (orthonormality_error(rotation) > 1e-9) throw Error(ErrorCode::InvalidConfig, "camera rotation is not orthonormal");
}

nlohmann::json to_json(const Camera& c) {
    return {{"fx", c.intrinsics.fx}, {"fy", c.intrinsics.fy},       {"cx", c.intrinsics.cx},
            {"cy", c.intrinsics.cy}, {"rotation", c.rotation},      {"translation", c.translation},
            {"height", c.height},    {"width", c.width}};
}

Camera camera_from_json(const nlohmann::json& j) {
    try {
        Camera c;
        c.intrinsics = {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                        j.at("cy").get<double>()};
        c.rotation = j.at("rotation").get<Mat3>();
        c.translation = j.at("translation").get<Vec3>();
        c.height = j.at("height").get<int>();
        c.width = j.at("width").get<int>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::CorruptDocument, std::string("camera: ") + ex.what());
    }
}

// ---------------------------------------------------------------------------
// Points

std::vector<ScenePoint> unproject(const Image& image, const DepthMap& depth, const Camera& camera,
                                  std::uint32_t source_frame, const Mask& select) {
    if (!image.same_extent(depth) || image.height() != camera.height || image.width() != camera.width)
        throw Error(ErrorCode::ShapeMismatch, "image, depth and camera sizes disagree");
    if (!select.empty() && !select.same_extent(image))
        throw Error(ErrorCode::MaskSizeMismatch, "selection mask does not match the image");
    const auto rt = transpose(camera.rotation);
    const auto& k = camera.intrinsics;
    const std::size_t plane = image.plane_size();
    std::vector<ScenePoint> pts;
    pts.reserve(select.empty() ? plane : select.popcount());
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x) {
            if (!select.empty() && !select(y, x)) continue;
            const double d = depth(y, x);
            if (!(d > 0.0) || !std::isfinite(d))
                throw Error(ErrorCode::NonPositiveDepth, "depth at (" + std::to_string(y) + ", " + std::to_string(x) +
                                                             ") is not positive");
            const Vec3 cam{(x - k.cx) / k.fx * d, (y - k.cy) / k.fy * d, d};
            const Vec3 rel{cam[0] - camera.translation[0], cam[1] - camera.translation[1],
                           cam[2] - camera.translation[2]};
            const std::size_t i = static_cast<std::size_t>(y) * image.width() + x;
            pts.push_back({apply(rt, rel), {image[i], image[plane + i], image[2 * plane + i]}, source_frame});
        }
    return pts;
}

PointCloudScene merge(const PointCloudScene& scene, const std::vector<ScenePoint>& points) {
    std::vector<ScenePoint> all;
    all.reserve(scene.size() + points.size());
    all.insert(all.end(), scene.points().begin(), scene.points().end());
    all.insert(all.end(), points.begin(), points.end());
    return PointCloudScene(std::move(all));
}

RenderResult render(const PointCloudScene& scene, const Camera& camera, const RenderOptions& options) {
    if (scene.empty()) throw Error(ErrorCode::EmptyScene, "nothing to render");
    const int H = camera.height, W = camera.width;
    RenderResult r;
    r.partial_image = Image(H, W);
    r.fill_mask = Mask::ones(H, W);
    r.rendered_depth = DepthMap(H, W, 0.0);
    std::vector<double> zbuf(static_cast<std::size_t>(H) * W, std::numeric_limits<double>::infinity());
    std::vector<const ScenePoint*> owner(zbuf.size(), nullptr);
    const auto& k = camera.intrinsics;
    const int reach = std::max(options.splat_radius, 1) - 1;

    for (const auto& p : scene.points()) {
        const auto c = apply(camera.rotation, p.position);
        const Vec3 cam{c[0] + camera.translation[0], c[1] + camera.translation[1], c[2] + camera.translation[2]};
        if (!(cam[2] > options.near_plane)) continue;
        const double u = k.fx * cam[0] / cam[2] + k.cx;
        const double v = k.fy * cam[1] / cam[2] + k.cy;
        if (!std::isfinite(u) || !std::isfinite(v)) continue;
        const long px = std::lround(u);
        const long py = std::lround(v);
        for (long yy = py - reach; yy <= py + reach; ++yy)
            for (long xx = px - reach; xx <= px + reach; ++xx) {
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                const std::size_t i = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx);
                if (cam[2] < zbuf[i]) {
                    zbuf[i] = cam[2];
                    owner[i] = &p;
                }
            }
    }

    const std::size_t plane = r.partial_image.plane_size();
    for (std::size_t i = 0; i < plane; ++i) {
        if (owner[i] == nullptr) continue;
        r.fill_mask[i] = 0;
        r.rendered_depth[i] = zbuf[i];
        for (int ch = 0; ch < 3; ++ch) r.partial_image[ch * plane + i] = owner[i]->color[ch];
    }
    return r;
}

DepthAlignment align_depth(const DepthMap& estimated, const RenderResult& rr, double near_plane) {
    if (!estimated.same_extent(rr.fill_mask)) throw Error(ErrorCode::ShapeMismatch, "depth and render sizes differ");
    DepthAlignment out;
    double n = 0.0, se = 0.0, sr = 0.0;
    for (std::size_t i = 0; i < estimated.size(); ++i)
        if (!rr.fill_mask[i]) {
            n += 1.0;
            se += estimated[i];
            sr += rr.rendered_depth[i];
        }
    if (n >= 2.0) {
        const double me = se / n, mr = sr / n;
        double cov = 0.0, var = 0.0;
        for (std::size_t i = 0; i < estimated.size(); ++i)
            if (!rr.fill_mask[i]) {
                const double de = estimated[i] - me;
                cov += de * (rr.rendered_depth[i] - mr);
                var += de * de;
            }
        if (var > 1e-12 * n * std::max(1.0, me * me)) {
            out.scale = cov / var;
            out.shift = mr - out.scale * me;
        } else {
            out.degenerate = true;
        }
    } else {
        out.degenerate = true;
    }
    if (!std::isfinite(out.scale) || !std::isfinite(out.shift) || out.scale <= 0.0) {
        out.degenerate = true;
        out.scale = 1.0;
        out.shift = 0.0;
    }
    if (out.degenerate) {
        out.scale = 1.0;
        out.shift = 0.0;
    }
    out.depth = DepthMap(estimated.height(), estimated.width());
    const double floor_value = std::nextafter(near_plane, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < estimated.size(); ++i)
        out.depth[i] = std::max(out.scale * estimated[i] + out.shift, floor_value);
    return out;
}

// ---------------------------------------------------------------------------
// Trajectories

TrajectoryKind trajectory_kind_from_string(const std::string& text) {
    if (text == "recede") return TrajectoryKind::Recede;
    if (text == "translate") return TrajectoryKind::Translate;
    if (text == "orbit") return TrajectoryKind::Orbit;
    throw Error(ErrorCode::InvalidConfig, "unknown trajectory '" + text + "'");
}

std::string to_string(TrajectoryKind kind) {
    switch (kind) {
        case TrajectoryKind::Recede: return "recede";
        case TrajectoryKind::Translate: return "translate";
        case TrajectoryKind::Orbit: return "orbit";
    }
    return "recede";
}

std::vector<Camera> make_trajectory(TrajectoryKind kind, int steps, double step_size, const Camera& start,
                                    double look_at_distance) {
    if (steps < 0) throw Error(ErrorCode::InvalidConfig, "trajectory steps must be non-negative");
    std::vector<Camera> out;
    out.reserve(static_cast<std::size_t>(steps) + 1);
    out.push_back(start);
    const Vec3 c0 = start.center();
    const Vec3 view = start.view_axis();
    const Vec3 right = start.right_axis();
    const Vec3 up = start.up_axis();
    const Vec3 target{c0[0] + look_at_distance * view[0], c0[1] + look_at_distance * view[1],
                      c0[2] + look_at_distance * view[2]};
    for (int k = 1; k <= steps; ++k) {
        const double d = step_size * k;
        switch (kind) {
            case TrajectoryKind::Recede:
                out.push_back(start.with_center({c0[0] - d * view[0], c0[1] - d * view[1], c0[2] - d * view[2]}));
                break;
            case TrajectoryKind::Translate:
                out.push_back(start.with_center({c0[0] + d * right[0], c0[1] + d * right[1], c0[2] + d * right[2]}));
                break;
            case TrajectoryKind::Orbit: {
                const Mat3 q = axis_angle(up, d);
                const Vec3 rel{c0[0] - target[0], c0[1] - target[1], c0[2] - target[2]};
                const Vec3 moved = apply(q, rel);
                Camera cam = start;
                cam.rotation = multiply(start.rotation, transpose(q));
                cam = cam.with_center({target[0] + moved[0], target[1] + moved[1], target[2] + moved[2]});
                out.push_back(cam);
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Export

void write_xyzrgb(const PointCloudScene& scene, const std::filesystem::path& path) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::FILE* f = std::fopen(tmp.c_str(), "w");
        if (!f) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
        std::fprintf(f, "# xyzrgb 1\n# points %zu\n", scene.size());
        for (const auto& p : scene.points())
            std::fprintf(f, "%.17g %.17g %.17g %u %u %u\n", p.position[0], p.position[1], p.position[2],
                         static_cast<unsigned>(p.color[0]), static_cast<unsigned>(p.color[1]),
                         static_cast<unsigned>(p.color[2]));
        if (std::fclose(f) != 0) throw Error(ErrorCode::IoError, "failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::vector<ScenePoint> read_xyzrgb(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    std::vector<ScenePoint> pts;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        ScenePoint p{};
        unsigned r = 0, g = 0, b = 0;
        std::string xs, ys, zs;
        if (!(ls >> xs >> ys >> zs >> r >> g >> b) || r > 255 || g > 255 || b > 255)
            throw Error(ErrorCode::CorruptDocument, "bad point line in " + path.string());
        p.position = {std::strtod(xs.c_str(), nullptr), std::strtod(ys.c_str(), nullptr),
                      std::strtod(zs.c_str(), nullptr)};
        p.color = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
        pts.push_back(p);
    }
    return pts;
}

}  // namespace scenepainter::geometry
