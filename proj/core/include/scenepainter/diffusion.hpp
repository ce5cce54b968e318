#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scenepainter/raster.hpp"

namespace scenepainter::diffusion {

/// Discrete variance-preserving schedule with timesteps 1..T; alpha_bar(0)
/// is defined as 1 so that t = 0 denotes the clean signal.
class NoiseSchedule {
public:
    NoiseSchedule() : NoiseSchedule(linear()) {}

    static NoiseSchedule linear(int steps = 100, double beta_start = 1e-4, double beta_end = 2e-2);

    int steps() const noexcept { return static_cast<int>(betas_.size()); }
    double beta_start() const noexcept { return beta_start_; }
    double beta_end() const noexcept { return beta_end_; }
    double beta(int t) const;
    double alpha_bar(int t) const;

    bool operator==(const NoiseSchedule&) const = default;

private:
    struct Empty {};
    explicit NoiseSchedule(Empty) {}

    double beta_start_ = 0.0;
    double beta_end_ = 0.0;
    std::vector<double> betas_;       // index t-1
    std::vector<double> alpha_bars_;  // index t, alpha_bars_[0] = 1
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps for 1 <= t <= T.
Tensor add_noise(const NoiseSchedule& schedule, const Tensor& z0, int t, const Tensor& eps);

/// Same closed form but also accepts t = 0 (returns z0 exactly).
Tensor noise_to(const NoiseSchedule& schedule, const Tensor& z0, int t, const Tensor& eps);

/// Token vectors. Base vocabulary entries are frozen; handle entries are the
/// trainable placeholders.
class EmbeddingTable {
public:
    explicit EmbeddingTable(int dim = 8) : dim_(dim) {}

    /// Small frozen vocabulary with seeded vectors.
    static EmbeddingTable with_base_vocabulary(int dim, std::uint64_t seed);

    int dim() const noexcept { return dim_; }
    bool contains(const std::string& token) const noexcept;
    bool is_handle(const std::string& token) const noexcept { return handles_.count(token) != 0; }

    void set_base(const std::string& token, std::vector<double> vec);
    void set_handle(const std::string& token, std::vector<double> vec);
    /// Deterministic small-norm initialisation keyed on (seed, token).
    void init_handle(const std::string& token, std::uint64_t seed);

    std::span<const double> at(const std::string& token) const;
    std::span<double> handle(const std::string& token);

    const std::map<std::string, std::vector<double>>& base_entries() const noexcept { return base_; }
    const std::map<std::string, std::vector<double>>& handle_entries() const noexcept { return handles_; }

    bool operator==(const EmbeddingTable&) const = default;

private:
    int dim_;
    std::map<std::string, std::vector<double>> base_;
    std::map<std::string, std::vector<double>> handles_;
};

/// Prompt embedding p_s: one row per token (height = tokens, width = dim).
Tensor encode_prompt(const EmbeddingTable& table, std::span<const std::string> tokens);

struct DenoiserOutput {
    Tensor eps_hat;
    /// One map per prompt token at attention resolution, values in [0, 1].
    std::vector<Tensor> attention_maps;
};

struct LatentShape {
    int channels = 0;
    int height = 0;
    int width = 0;
    bool operator==(const LatentShape&) const = default;
};

/// Contract every denoising backend satisfies, including adapters around
/// external pretrained models.
class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;
    virtual const NoiseSchedule& schedule() const = 0;
    virtual const EmbeddingTable& embeddings() const = 0;
    virtual LatentShape latent_shape() const = 0;
    virtual DenoiserOutput denoise(const Tensor& z_t, int t, const Tensor& prompt) const = 0;
    /// Declares how per-layer cross-attention maps are combined into one map
    /// per token.
    virtual std::string attention_aggregation() const = 0;

    Tensor encode_prompt(std::span<const std::string> tokens) const {
        return diffusion::encode_prompt(embeddings(), tokens);
    }
};

/// Pixel <-> latent mapping.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual int factor() const = 0;
    virtual int latent_channels() const = 0;
    virtual Tensor encode(const Image& image) const = 0;
    virtual Image decode(const Tensor& latent) const = 0;
};

/// Area-average downsample by `factor` to values in [-1, 1]; nearest
/// upsample on decode. encode(decode(z)) == z for any z produced by encode.
class ToyCodec final : public LatentCodec {
public:
    explicit ToyCodec(int factor = 4) : factor_(factor) {}
    int factor() const override { return factor_; }
    int latent_channels() const override { return 3; }
    Tensor encode(const Image& image) const override;
    Image decode(const Tensor& latent) const override;

private:
    int factor_;
};

struct ToyConfig {
    int latent_channels = 3;
    int latent_height = 4;
    int latent_width = 4;
    int features = 8;
    int key_dim = 8;
    int embed_dim = 8;
    int time_features = 4;
    /// Fixed multipliers between stored and effective parameters
    /// (equalised learning rate).
    double conv_gain = 1.0;
    double time_gain = 1.0;
    double query_gain = 1.0;
    double key_gain = 1.0;
    double value_gain = 1.0;
    double out_gain = 1.0;
    double position_gain = 8.0;
    double skip_gain = 1.0;

    int attention_height() const noexcept { return latent_height / 2; }
    int attention_width() const noexcept { return latent_width / 2; }
    bool operator==(const ToyConfig&) const = default;
};

nlohmann::json to_json(const ToyConfig& config);
ToyConfig toy_config_from_json(const nlohmann::json& j);

/// Named slices of the flat parameter vector.
struct ParamLayout {
    std::size_t conv_w, conv_b, time_w, query_w, key_w, value_w, out_w, out_b, position, skip, total;
    explicit ParamLayout(const ToyConfig& c);
};

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
    Tensor z;
    int t = 0;
    Tensor prompt;
    std::vector<double> time_feat;
    Tensor h1;       // F x h x w
    Tensor pooled;   // F x ha x wa
    std::vector<double> query;   // S x dk
    std::vector<double> key;     // L x dk
    std::vector<double> value;   // L x F
    std::vector<double> attn;    // L x S
    std::vector<int> argmax;     // L
    Tensor h2;       // F x h x w
    Tensor x0;       // C x h x w
};

struct Gradients {
    std::vector<double> params;
    /// Gradient w.r.t. each prompt row (height = tokens, width = dim).
    Tensor prompt;
};

/// Small convolutional denoiser with a single cross-attention block. It
/// predicts a clean-latent estimate x0 and reports
/// eps_hat = (s * z_t - sqrt(abar) * x0) / sqrt(1 - abar) with a learned skip
/// scale s, so all-zero parameters give eps_hat = 0.
class ToyModel final : public DiffusionBackend {
public:
    ToyModel() = default;
    ToyModel(ToyConfig config, NoiseSchedule schedule, EmbeddingTable table);

    /// Seeded initialisation (skip scale 1, position map 0, small random rest).
    static ToyModel initialized(ToyConfig config, NoiseSchedule schedule, EmbeddingTable table, std::uint64_t seed);

    const ToyConfig& config() const noexcept { return config_; }
    const ParamLayout& layout() const noexcept { return layout_; }
    const NoiseSchedule& schedule() const override { return schedule_; }
    const EmbeddingTable& embeddings() const override { return table_; }
    EmbeddingTable& mutable_embeddings() noexcept { return table_; }
    LatentShape latent_shape() const override {
        return {config_.latent_channels, config_.latent_height, config_.latent_width};
    }
    std::span<const double> params() const noexcept { return params_; }
    std::span<double> mutable_params() noexcept { return params_; }

    DenoiserOutput denoise(const Tensor& z_t, int t, const Tensor& prompt) const override;
    std::string attention_aggregation() const override { return "single-block"; }

    DenoiserOutput forward(const Tensor& z_t, int t, const Tensor& prompt, ForwardCache* cache) const;
    /// Backpropagates d(loss)/d(eps_hat) and d(loss)/d(attention map) into
    /// the stored parameters and the prompt rows. `attn_grads` may be empty.
    Gradients backward(const ForwardCache& cache, const Tensor& eps_grad, std::span<const Tensor> attn_grads) const;

    bool operator==(const ToyModel& other) const {
        return config_ == other.config_ && schedule_ == other.schedule_ && table_ == other.table_ &&
               params_ == other.params_;
    }

private:
    ToyConfig config_;
    ParamLayout layout_{config_};
    NoiseSchedule schedule_;
    EmbeddingTable table_;
    std::vector<double> params_;
};

std::vector<double> time_features(int t, int total_steps, int count);

/// Evenly spaced descending DDIM timesteps, e.g. T=100, steps=4 -> 100 75 50 25.
std::vector<int> ddim_timesteps(int total_steps, int steps);

/// Called after every reverse step with the updated latent and the timestep
/// it now represents (0 after the final step). May overwrite the latent.
using StepHook = std::function<void(Tensor& latent, int t)>;

/// Deterministic (eta = 0) reverse process from the given initial latent.
Tensor sample_from(const DiffusionBackend& model, Tensor initial, const Tensor& prompt, int steps,
                   const StepHook& hook = {});

/// Draws the initial latent from `seed` and runs sample_from.
Tensor sample(const DiffusionBackend& model, LatentShape shape, const Tensor& prompt, int steps, std::uint64_t seed,
              const StepHook& hook = {});

Tensor initial_noise(LatentShape shape, std::uint64_t seed);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint: magic, version, JSON header (config, schedule, token
/// list), then raw little-endian doubles. Round trips bit-exact.
void save_checkpoint(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_checkpoint(const std::filesystem::path& path);

}  // namespace scenepainter::diffusion
