#include "scenepainter/image_io.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "scenepainter/error.hpp"

namespace scenepainter {

namespace {

struct ReadCursor {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos;
};

void read_cb(png_structp png, png_bytep out, png_size_t n) {
    auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cur->pos + n > cur->size) png_error(png, "truncated PNG");
    std::memcpy(out, cur->data + cur->pos, n);
    cur->pos += n;
}

void write_cb(png_structp png, png_bytep in, png_size_t n) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), in, in + n);
}

void flush_cb(png_structp) {}

void error_cb(png_structp, png_const_charp msg) { throw Error(ErrorCode::IoError, std::string("png: ") + msg); }

void warning_cb(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
    if (image.empty()) throw Error(ErrorCode::EmptyImage, "cannot encode an empty image");
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_cb, warning_cb);
    png_infop info = png_create_info_struct(png);
    const int H = image.height(), W = image.width();
    const std::size_t plane = image.plane_size();
    std::vector<std::uint8_t> row(static_cast<std::size_t>(W) * 3);
    try {
        png_set_write_fn(png, &out, write_cb, flush_cb);
        png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < 3; ++c)
                    row[static_cast<std::size_t>(x) * 3 + c] = image[c * plane + static_cast<std::size_t>(y) * W + x];
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

Image decode_png(const std::uint8_t* data, std::size_t size) {
    if (size < 8 || png_sig_cmp(data, 0, 8) != 0) throw Error(ErrorCode::IoError, "not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_cb, warning_cb);
    png_infop info = png_create_info_struct(png);
    ReadCursor cur{data, size, 0};
    Image image;
    try {
        png_set_read_fn(png, &cur, read_cb);
        png_read_info(png, info);
        const int H = static_cast<int>(png_get_image_height(png, info));
        const int W = static_cast<int>(png_get_image_width(png, info));
        const int color = png_get_color_type(png, info);
        if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
        const bool trns = png_get_valid(png, info, PNG_INFO_tRNS) != 0;
        if (trns) png_set_tRNS_to_alpha(png);
        if ((color & PNG_COLOR_MASK_ALPHA) || trns) png_set_strip_alpha(png);
        png_set_interlace_handling(png);
        png_read_update_info(png, info);
        if (png_get_rowbytes(png, info) != static_cast<png_size_t>(W) * 3)
            throw Error(ErrorCode::IoError, "unsupported PNG layout");
        std::vector<std::uint8_t> pixels(static_cast<std::size_t>(H) * W * 3);
        std::vector<png_bytep> rows(static_cast<std::size_t>(H));
        for (int y = 0; y < H; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * W * 3;
        png_read_image(png, rows.data());
        image = Image(H, W);
        const std::size_t plane = image.plane_size();
        for (std::size_t i = 0; i < plane; ++i)
            for (int c = 0; c < 3; ++c) image[c * plane + i] = pixels[i * 3 + c];
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return image;
}

Image read_png(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    return decode_png(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
}

void write_png(const Image& image, const std::filesystem::path& path) {
    const auto bytes = encode_png(image);
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

namespace {
constexpr char kDepthMagic[8] = {'S', 'P', 'D', 'E', 'P', 'T', 'H', '1'};
}

void write_depth(const DepthMap& depth, const std::filesystem::path& path) {
    std::string bytes(kDepthMagic, sizeof kDepthMagic);
    const std::int32_t dims[2] = {depth.height(), depth.width()};
    bytes.append(reinterpret_cast<const char*>(dims), sizeof dims);
    bytes.append(reinterpret_cast<const char*>(depth.storage().data()), depth.size() * sizeof(double));
    write_file_atomic(path, bytes);
}

DepthMap read_depth(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kDepthMagic, 8) != 0)
        throw Error(ErrorCode::CorruptDocument, "bad depth header in " + path.string());
    std::int32_t dims[2];
    std::memcpy(dims, bytes.data() + 8, sizeof dims);
    if (dims[0] < 0 || dims[1] < 0 ||
        bytes.size() != 16 + static_cast<std::size_t>(dims[0]) * dims[1] * sizeof(double))
        throw Error(ErrorCode::CorruptDocument, "bad depth payload in " + path.string());
    DepthMap d(dims[0], dims[1]);
    std::memcpy(d.storage().data(), bytes.data() + 16, d.size() * sizeof(double));
    return d;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw Error(ErrorCode::IoError, "failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace scenepainter
