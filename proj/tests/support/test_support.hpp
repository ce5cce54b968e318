#pragma once

// Shared fixtures and hand-rolled generators for the test binaries.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "scenepainter/customization.hpp"
#include "scenepainter/diffusion.hpp"
#include "scenepainter/raster.hpp"
#include "scenepainter/random.hpp"
#include "scenepainter/scene_graph.hpp"

namespace sptest {

using namespace scenepainter;

inline int uniform_int(Rng& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Mask random_mask(Rng& rng, int h, int w, double p = 0.5) {
    Mask m(h, w);
    std::bernoulli_distribution coin(p);
    for (auto& v : m.storage()) v = coin(rng) ? 1 : 0;
    return m;
}

inline Mask rect_mask(int h, int w, int y0, int x0, int y1, int x1) {
    Mask m(h, w);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m(y, x) = 1;
    return m;
}

inline Mask top_half(int h, int w) { return rect_mask(h, w, 0, 0, h / 2, w); }
inline Mask bottom_half(int h, int w) { return rect_mask(h, w, h / 2, 0, h, w); }

inline Image random_image(Rng& rng, int h, int w) {
    Image img(h, w);
    for (auto& v : img.storage()) v = static_cast<std::uint8_t>(rng() & 0xff);
    return img;
}

inline Tensor random_tensor(Rng& rng, int c, int h, int w) { return gaussian_tensor(c, h, w, rng); }

/// Bright sky over a darker ground, with mild texture.
inline Image sky_ground_image(int h, int w, std::uint64_t seed = 0) {
    Rng rng(seed);
    Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool top = y < h / 2;
            img.at(0, y, x) = static_cast<std::uint8_t>((top ? 90 + (4 * x * 16) / w : 40) + rng() % 30);
            img.at(1, y, x) = static_cast<std::uint8_t>(top ? 140 : 120 + (3 * y * 16) / h);
            img.at(2, y, x) = static_cast<std::uint8_t>(top ? 220 : 50);
        }
    return img;
}

/// env + "sky" (top half) + "ground" (bottom half), default edge set.
inline graph::SceneConceptGraph sky_ground_graph(int h, int w) {
    return graph::build_graph(h, w,
                              {{"sky", graph::Level::Region, top_half(h, w), {}},
                               {"ground", graph::Level::Region, bottom_half(h, w), {}}});
}

/// Seeded toy model sized for an h x w image (latent = image / 4) with
/// embeddings for every handle of `g`.
inline diffusion::ToyModel toy_model(const graph::SceneConceptGraph& g, std::uint64_t seed = 7,
                                     diffusion::ToyConfig cfg = {}) {
    cfg.latent_height = g.height() / 4;
    cfg.latent_width = g.width() / 4;
    auto m = diffusion::ToyModel::initialized(cfg, diffusion::NoiseSchedule::linear(),
                                              diffusion::EmbeddingTable::with_base_vocabulary(cfg.embed_dim, seed),
                                              seed + 1);
    customization::ensure_handles(m, g, seed + 2);
    return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "sp") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor) between analytic and
/// central-difference derivatives.
inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Five-point central differences of loss_total over every model parameter
/// and every embedding of the sample's tokens. The fourth-order stencil lets
/// the step stay large enough that cancellation noise on large losses does
/// not swamp small derivatives.
inline GradCheck gradient_check(const customization::TrainingSample& sample, const diffusion::ToyModel& model, int t,
                                const Tensor& eps, const customization::LossWeights& weights, double step = 1e-4,
                                double floor = 1e-6) {
    using customization::loss_total;
    const auto analytic = customization::loss_total_with_grad(sample, model, t, eps, weights);
    GradCheck out;
    auto probe = model;
    auto numeric = [&](double& slot) {
        const double saved = slot;
        auto at = [&](double offset) {
            slot = saved + offset;
            return loss_total(sample, probe, t, eps, weights).total;
        };
        const double d1 = at(step) - at(-step);
        const double d2 = at(2.0 * step) - at(-2.0 * step);
        slot = saved;
        return (8.0 * d1 - d2) / (12.0 * step);
    };
    auto params = probe.mutable_params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic.param_grad[i], numeric(params[i]), floor));
        ++out.checked;
    }
    for (const auto& token : sample.tokens) {
        auto vec = probe.mutable_embeddings().handle(token);
        const auto& grad = analytic.embedding_grad.at(token);
        for (std::size_t d = 0; d < vec.size(); ++d) {
            out.max_rel_error = std::max(out.max_rel_error, relative_error(grad[d], numeric(vec[d]), floor));
            ++out.checked;
        }
    }
    return out;
}

/// Toy model with every parameter and handle embedding perturbed, so no
/// gradient is structurally zero.
inline diffusion::ToyModel perturbed_model(const graph::SceneConceptGraph& g, std::uint64_t seed, double scale = 0.3) {
    auto m = toy_model(g, seed);
    Rng rng(derive_seed(seed, 99));
    for (auto& p : m.mutable_params()) p += scale * uniform_real(rng, -1.0, 1.0);
    for (const auto& h : g.handles())
        for (auto& v : m.mutable_embeddings().handle(h)) v = uniform_real(rng, -1.0, 1.0);
    return m;
}

inline double psnr(const Image& a, const Image& b, const Mask& select) {
    double se = 0.0;
    std::size_t n = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < a.height(); ++y)
            for (int x = 0; x < a.width(); ++x) {
                if (!select(y, x)) continue;
                const double d = double(a.at(c, y, x)) - double(b.at(c, y, x));
                se += d * d;
                ++n;
            }
    if (n == 0 || se == 0.0) return INFINITY;
    return 10.0 * std::log10(255.0 * 255.0 / (se / double(n)));
}

}  // namespace sptest
