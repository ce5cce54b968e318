#pragma once

// Independent reference implementations shared by the unit and acceptance
// binaries.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "scenepainter/geometry.hpp"
#include "scenepainter/scene_graph.hpp"
#include "test_support.hpp"

namespace sptest {

using namespace scenepainter::geometry;
using namespace scenepainter::graph;

inline double norm3(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

inline Camera random_camera(Rng& rng, int h, int w) {
    Camera c = Camera::centered(h, w, uniform_real(rng, 0.5, 2.0) * w);
    const Vec3 axis_raw{uniform_real(rng, -1, 1), uniform_real(rng, -1, 1), uniform_real(rng, -1, 1)};
    const double n = norm3(axis_raw);
    const Vec3 axis{axis_raw[0] / n, axis_raw[1] / n, axis_raw[2] / n};
    c.rotation = axis_angle(axis, uniform_real(rng, -3.0, 3.0));
    c.translation = {uniform_real(rng, -2, 2), uniform_real(rng, -2, 2), uniform_real(rng, -2, 2)};
    return c;
}

inline DepthMap random_depth(Rng& rng, int h, int w) {
    DepthMap d(h, w);
    for (auto& v : d.storage()) v = uniform_real(rng, 0.5, 5.0);
    return d;
}

// Pixel-centric z-buffer: for every pixel scan every point.
inline RenderResult brute_force_render(const PointCloudScene& scene, const Camera& cam) {
    RenderResult r{Image(cam.height, cam.width), Mask::ones(cam.height, cam.width), DepthMap(cam.height, cam.width, 0.0)};
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            double best = INFINITY;
            const ScenePoint* owner = nullptr;
            for (const auto& p : scene.points()) {
                Vec3 q{};
                for (int i = 0; i < 3; ++i)
                    q[i] = cam.rotation[i][0] * p.position[0] + cam.rotation[i][1] * p.position[1] +
                           cam.rotation[i][2] * p.position[2] + cam.translation[i];
                if (q[2] <= kNearPlane) continue;
                const double u = cam.intrinsics.fx * q[0] / q[2] + cam.intrinsics.cx;
                const double v = cam.intrinsics.fy * q[1] / q[2] + cam.intrinsics.cy;
                if (std::lround(u) != x || std::lround(v) != y) continue;
                if (q[2] < best) {
                    best = q[2];
                    owner = &p;
                }
            }
            if (!owner) continue;
            r.fill_mask(y, x) = 0;
            r.rendered_depth(y, x) = best;
            for (int c = 0; c < 3; ++c) r.partial_image.at(c, y, x) = owner->color[c];
        }
    return r;
}

// Independent pixel-loop checker of every structural rule.
inline std::vector<std::string> oracle_violations(const SceneConceptGraph& g) {
    std::vector<std::string> out;
    std::map<std::uint32_t, const ConceptNode*> by_id;
    std::set<std::string> handles;
    int envs = 0;
    for (const auto& n : g.nodes()) {
        by_id[n.id.value] = &n;
        if (!handles.insert(n.handle).second) out.push_back("dup handle");
        if (n.mask.height() != g.height() || n.mask.width() != g.width()) out.push_back("size");
        for (int y = 0; y < n.mask.height(); ++y)
            for (int x = 0; x < n.mask.width(); ++x)
                if (n.mask(y, x) > 1) out.push_back("non-binary");
        if (n.level == Level::Environment) {
            ++envs;
            for (int y = 0; y < n.mask.height(); ++y)
                for (int x = 0; x < n.mask.width(); ++x)
                    if (n.mask(y, x) != 1) out.push_back("env mask");
        }
        if ((n.level == Level::Object) != n.parent_region.has_value()) out.push_back("parent presence");
    }
    if (envs != 1) out.push_back("env count");
    for (const auto& n : g.nodes()) {
        if (n.level != Level::Object || !n.parent_region) continue;
        auto it = by_id.find(n.parent_region->value);
        if (it == by_id.end() || it->second->level != Level::Region) {
            out.push_back("parent");
            continue;
        }
        for (int y = 0; y < n.mask.height(); ++y)
            for (int x = 0; x < n.mask.width(); ++x)
                if (n.mask(y, x) && !it->second->mask(y, x)) out.push_back("subset");
    }
    std::set<std::pair<std::uint32_t, std::uint32_t>> pairs;
    for (const auto& e : g.edges()) {
        if (!handles.insert(e.handle).second) out.push_back("dup handle");
        auto a = by_id.find(e.endpoints.first.value);
        auto b = by_id.find(e.endpoints.second.value);
        if (a == by_id.end() || b == by_id.end()) {
            out.push_back("dangling");
            continue;
        }
        const auto la = a->second->level, lb = b->second->level;
        bool ok = false;
        switch (e.kind) {
            case EdgeKind::R1: ok = la == Level::Environment && lb == Level::Region; break;
            case EdgeKind::R2: ok = la == Level::Region && lb == Level::Region && a != b; break;
            case EdgeKind::R3:
                ok = la == Level::Object && lb == Level::Region && a->second->parent_region->value == b->first;
                break;
        }
        if (!ok) out.push_back("kind");
        auto p = std::minmax(e.endpoints.first.value, e.endpoints.second.value);
        if (!pairs.insert(p).second) out.push_back("dup pair");
    }
    return out;
}

struct RandomScene {
    SceneConceptGraph graph;
    // object handle -> region handle, as supplied to build_graph
    std::map<std::string, std::string> parent_of;
};

inline RandomScene random_scene(Rng& rng, int h, int w) {
    std::vector<ConceptSpec> specs;
    RandomScene out;
    const int regions = uniform_int(rng, 1, 4);
    std::vector<std::pair<std::string, Mask>> region_masks;
    for (int r = 0; r < regions; ++r) {
        Mask m = random_mask(rng, h, w, 0.5);
        m[static_cast<std::size_t>(r) % m.size()] = 1;
        const std::string name = "region" + std::to_string(r);
        specs.push_back({name, Level::Region, m, {}});
        region_masks.emplace_back(name, m);
    }
    const int objects = uniform_int(rng, 0, 4);
    for (int o = 0; o < objects; ++o) {
        const auto& [parent, pm] = region_masks[static_cast<std::size_t>(uniform_int(rng, 0, regions - 1))];
        Mask m = random_mask(rng, h, w, 0.5) & pm;
        const std::string name = "object" + std::to_string(o);
        specs.push_back({name, Level::Object, m, parent});
        out.parent_of["<" + name + ">"] = "<" + parent + ">";
    }
    if (uniform_int(rng, 0, 1)) specs.insert(specs.begin(), {"sky", Level::Environment, {}, {}});
    out.graph = build_graph(h, w, specs);
    return out;
}

}  // namespace sptest
