#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace scenepainter {

/// Planar multi-channel grid stored channel-major (c, y, x).
template <typename T>
class Raster {
public:
    Raster() = default;
    Raster(int height, int width, int channels = 1, T fill = T{})
        : height_(height), width_(width), channels_(channels),
          data_(static_cast<std::size_t>(height) * width * channels, fill) {}

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height_) * width_; }
    bool empty() const noexcept { return data_.empty(); }

    bool same_shape(const Raster& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }
    template <typename U>
    bool same_extent(const Raster<U>& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    std::size_t index(int c, int y, int x) const noexcept {
        return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
    }
    T& at(int c, int y, int x) noexcept { return data_[index(c, y, x)]; }
    const T& at(int c, int y, int x) const noexcept { return data_[index(c, y, x)]; }
    T& operator()(int y, int x) noexcept { return data_[index(0, y, x)]; }
    const T& operator()(int y, int x) const noexcept { return data_[index(0, y, x)]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool operator==(const Raster&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<T> data_;
};

/// 8-bit RGB image, planar.
class Image : public Raster<std::uint8_t> {
public:
    Image() = default;
    Image(int height, int width, std::uint8_t fill = 0) : Raster(height, width, 3, fill) {}
    bool operator==(const Image&) const = default;
};

/// Binary raster; every value is 0 or 1.
class Mask : public Raster<std::uint8_t> {
public:
    Mask() = default;
    Mask(int height, int width, bool fill = false) : Raster(height, width, 1, fill ? 1 : 0) {}

    static Mask ones(int height, int width) { return Mask(height, width, true); }
    static Mask zeros(int height, int width) { return Mask(height, width, false); }

    std::size_t popcount() const noexcept;
    bool all_set() const noexcept { return popcount() == size(); }
    bool none_set() const noexcept { return popcount() == 0; }
    bool is_binary() const noexcept;
    bool subset_of(const Mask& other) const noexcept;
    Mask operator|(const Mask& other) const;
    Mask operator&(const Mask& other) const;
    Mask operator~() const;
    bool operator==(const Mask&) const = default;
};

/// Real-valued tensor used for latents, noise and attention maps.
using Tensor = Raster<double>;

/// Per-pixel camera-frame depth, single channel.
class DepthMap : public Raster<double> {
public:
    DepthMap() = default;
    DepthMap(int height, int width, double fill = 1.0) : Raster(height, width, 1, fill) {}
    bool operator==(const DepthMap&) const = default;
};

}  // namespace scenepainter
