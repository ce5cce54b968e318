#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "scenepainter/diffusion.hpp"
#include "scenepainter/raster.hpp"

namespace scenepainter::outpaint {

/// Fill-mask polarity everywhere: 1 = unknown (generate), 0 = known (keep).
struct OutpaintRequest {
    Image partial_image;
    Mask fill_mask;
    std::vector<std::string> prompt_tokens;
    std::uint64_t seed = 0;
    int steps = 20;
};

struct OutpaintResult {
    Image image;
    /// Final blended latent; equals encode(partial_image) on known latent cells.
    Tensor latent;
    Mask latent_fill;
};

struct OutpaintOptions {
    /// Copy known pixels of the request back into the decoded image.
    bool pixel_composite = true;
    /// Binarisation threshold for the latent fill mask; ties go to "generate".
    double mask_threshold = 0.5;
};

/// Area-average downsample then threshold. Monotone in the pixel mask.
Mask mask_to_latent(const Mask& fill_mask, int latent_height, int latent_width, double threshold = 0.5);

/// Blended latent denoising wrapper around a text-to-image backend. Holds the
/// backend by reference, so later weight updates are visible.
class Outpainter {
public:
    Outpainter(std::shared_ptr<const diffusion::DiffusionBackend> model,
               std::shared_ptr<const diffusion::LatentCodec> codec, OutpaintOptions options = {});

    OutpaintResult outpaint(const OutpaintRequest& request) const;

    /// Latent-level entry point used for prior-preservation samples.
    Tensor outpaint_latent(const Tensor& known_latent, const Mask& latent_fill,
                           const std::vector<std::string>& prompt_tokens, std::uint64_t seed, int steps) const;

    /// One blend: latent <- m * latent + (1 - m) * noise_to(known, t, eps_fixed).
    static void blend(Tensor& latent, const Mask& latent_fill, const diffusion::NoiseSchedule& schedule,
                      const Tensor& known_latent, int t, const Tensor& eps_fixed);

    const diffusion::DiffusionBackend& model() const noexcept { return *model_; }
    const diffusion::LatentCodec& codec() const noexcept { return *codec_; }
    const OutpaintOptions& options() const noexcept { return options_; }

private:
    std::shared_ptr<const diffusion::DiffusionBackend> model_;
    std::shared_ptr<const diffusion::LatentCodec> codec_;
    OutpaintOptions options_;
};

Outpainter to_outpainter(std::shared_ptr<const diffusion::DiffusionBackend> model,
                         std::shared_ptr<const diffusion::LatentCodec> codec, OutpaintOptions options = {});

/// Seed of the fixed known-region noise for a request seed.
std::uint64_t known_noise_seed(std::uint64_t seed) noexcept;

}  // namespace scenepainter::outpaint
