#include "scenepainter/outpaint.hpp"

#include "scenepainter/error.hpp"
#include "scenepainter/random.hpp"
#include "scenepainter/resample.hpp"

namespace scenepainter::outpaint {

Mask mask_to_latent(const Mask& fill_mask, int latent_height, int latent_width, double threshold) {
    return binarize(area_average(fill_mask, latent_height, latent_width), threshold);
}

std::uint64_t known_noise_seed(std::uint64_t seed) noexcept { return derive_seed(seed, 0x6b6e6f776eULL); }

Outpainter::Outpainter(std::shared_ptr<const diffusion::DiffusionBackend> model,
                       std::shared_ptr<const diffusion::LatentCodec> codec, OutpaintOptions options)
    : model_(std::move(model)), codec_(std::move(codec)), options_(options) {
    if (!model_ || !codec_) throw Error(ErrorCode::InvalidConfig, "outpainter needs a model and a codec");
}

Outpainter to_outpainter(std::shared_ptr<const diffusion::DiffusionBackend> model,
                         std::shared_ptr<const diffusion::LatentCodec> codec, OutpaintOptions options) {
    return Outpainter(std::move(model), std::move(codec), options);
}

void Outpainter::blend(Tensor& latent, const Mask& latent_fill, const diffusion::NoiseSchedule& schedule,
                       const Tensor& known_latent, int t, const Tensor& eps_fixed) {
    const auto known = diffusion::noise_to(schedule, known_latent, t, eps_fixed);
    const std::size_t plane = latent.plane_size();
    for (int c = 0; c < latent.channels(); ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t k = c * plane + i;
            if (!latent_fill[i]) latent[k] = known[k];
        }
}

Tensor Outpainter::outpaint_latent(const Tensor& known_latent, const Mask& latent_fill,
                                   const std::vector<std::string>& prompt_tokens, std::uint64_t seed,
                                   int steps) const {
    const auto shape = model_->latent_shape();
    if (known_latent.channels() != shape.channels || known_latent.height() != shape.height ||
        known_latent.width() != shape.width)
        throw Error(ErrorCode::ShapeMismatch, "known latent does not match the model");
    if (latent_fill.height() != shape.height || latent_fill.width() != shape.width)
        throw Error(ErrorCode::MaskSizeMismatch, "latent fill mask does not match the model");
    const auto& schedule = model_->schedule();
    if (latent_fill.none_set()) return known_latent;

    const Tensor prompt = model_->encode_prompt(prompt_tokens);
    Rng eps_rng(known_noise_seed(seed));
    const Tensor eps_fixed = gaussian_tensor(shape.channels, shape.height, shape.width, eps_rng);
    Tensor z = diffusion::initial_noise(shape, seed);
    const auto ts = diffusion::ddim_timesteps(schedule.steps(), steps);
    blend(z, latent_fill, schedule, known_latent, ts.empty() ? 0 : ts.front(), eps_fixed);
    return diffusion::sample_from(*model_, std::move(z), prompt, steps, [&](Tensor& latent, int t) {
        blend(latent, latent_fill, schedule, known_latent, t, eps_fixed);
    });
}

OutpaintResult Outpainter::outpaint(const OutpaintRequest& request) const {
    if (request.partial_image.empty()) throw Error(ErrorCode::EmptyImage, "partial image is empty");
    if (!request.partial_image.same_extent(request.fill_mask))
        throw Error(ErrorCode::MaskSizeMismatch, "fill mask does not match the partial image");
    if (request.fill_mask.all_set() && request.prompt_tokens.empty())
        throw Error(ErrorCode::AllUnknownWithoutPrompt, "nothing known and no prompt to generate from");

    const Tensor known = codec_->encode(request.partial_image);
    OutpaintResult result;
    result.latent_fill = mask_to_latent(request.fill_mask, known.height(), known.width(), options_.mask_threshold);
    result.latent = outpaint_latent(known, result.latent_fill, request.prompt_tokens, request.seed, request.steps);
    result.image = codec_->decode(result.latent);
    if (options_.pixel_composite) {
        const std::size_t plane = result.image.plane_size();
        for (int c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                if (!request.fill_mask[i]) result.image[c * plane + i] = request.partial_image[c * plane + i];
    }
    return result;
}

}  // namespace scenepainter::outpaint
