#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scenepainter/raster.hpp"

namespace scenepainter {

/// Lossless 8-bit RGB PNG. Grayscale and alpha inputs are converted to RGB.
std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(const std::uint8_t* data, std::size_t size);

Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

/// Flat depth file: magic "SPDEPTH1", int32 height, int32 width, then
/// row-major little-endian float64 values.
void write_depth(const DepthMap& depth, const std::filesystem::path& path);
DepthMap read_depth(const std::filesystem::path& path);

/// Writes to `path.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace scenepainter
