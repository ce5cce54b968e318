#pragma once

#include "scenepainter/raster.hpp"

namespace scenepainter {

/// Mean of each (H/out_h) x (W/out_w) block; the input size must be an exact
/// multiple of the output size.
Tensor area_average(const Mask& mask, int out_height, int out_width);
Tensor area_average(const Tensor& plane, int out_height, int out_width);

/// 1 where value >= threshold.
Mask binarize(const Tensor& plane, double threshold);

/// Nearest-neighbour upsample of a mask by an integer factor.
Mask upsample_nearest(const Mask& mask, int factor);

}  // namespace scenepainter
