#include "scenepainter/resample.hpp"

#include "scenepainter/error.hpp"

namespace scenepainter {

namespace {

template <typename Raster>
Tensor block_mean(const Raster& in, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0 || in.height() % out_h != 0 || in.width() % out_w != 0)
        throw Error(ErrorCode::ShapeMismatch, "area_average needs an integer downscale factor");
    const int fy = in.height() / out_h;
    const int fx = in.width() / out_w;
    const double area = static_cast<double>(fy) * fx;
    Tensor out(out_h, out_w, 1);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            double sum = 0.0;
            for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx) sum += static_cast<double>(in(y * fy + dy, x * fx + dx));
            out(y, x) = sum / area;
        }
    return out;
}

}  // namespace

Tensor area_average(const Mask& mask, int out_height, int out_width) {
    return block_mean(mask, out_height, out_width);
}

Tensor area_average(const Tensor& plane, int out_height, int out_width) {
    if (plane.channels() != 1) throw Error(ErrorCode::ShapeMismatch, "area_average expects one channel");
    return block_mean(plane, out_height, out_width);
}

Mask binarize(const Tensor& plane, double threshold) {
    Mask out(plane.height(), plane.width());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = plane[i] >= threshold ? 1 : 0;
    return out;
}

Mask upsample_nearest(const Mask& mask, int factor) {
    Mask out(mask.height() * factor, mask.width() * factor);
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x) out(y, x) = mask(y / factor, x / factor);
    return out;
}

}  // namespace scenepainter
