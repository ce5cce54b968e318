#pragma once

#include <cstdint>
#include <random>

#include "scenepainter/raster.hpp"

namespace scenepainter {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; derives independent stream seeds from one base seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
    return mix_seed(mix_seed(base) ^ (stream * 0xd1342543de82ef95ULL + 1));
}

/// Standard-normal tensor of shape (channels, height, width).
inline Tensor gaussian_tensor(int channels, int height, int width, Rng& rng) {
    Tensor t(height, width, channels);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : t.storage()) v = normal(rng);
    return t;
}

}  // namespace scenepainter
