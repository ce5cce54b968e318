#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scenepainter/diffusion.hpp"
#include "scenepainter/outpaint.hpp"
#include "scenepainter/raster.hpp"
#include "scenepainter/scene_graph.hpp"

namespace scenepainter::customization {

enum class Origin { Original, Prior };

/// One relation-concept training unit at latent resolution.
struct TrainingSample {
    Tensor z0;
    std::array<std::string, 3> tokens;
    Mask union_mask;
    std::array<Mask, 3> handle_masks;
    Origin origin = Origin::Original;
};

/// How the three loss terms are assigned to samples.
enum class LossAssignment {
    /// L_rec on original samples, L_prior on prior samples, L_attn on both.
    SplitByOrigin,
    /// Every term on every sample.
    JointOnAll,
};

struct LossWeights {
    double lambda_prior = 1.0;
    double lambda_attn = 0.01;
    // Ablation switches.
    bool use_rec = true;
    bool use_prior = true;
    bool use_attn = true;
    LossAssignment assignment = LossAssignment::SplitByOrigin;
};

struct TrainConfig {
    int phase1_steps = 400;
    double phase1_lr = 1e-6;
    int phase2_steps = 400;
    double phase2_lr = 1e-4;
    int refine_steps = 50;
    double refine_lr = 1e-4;
    int batch_size = 1;
    std::uint64_t seed = 0;
    int prior_samples = 4;
    int prior_sample_steps = 20;
    bool phase2_train_embeddings = true;
    LossWeights weights;
};

void validate(const TrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Mean over all elements of (m * (eps - eps_hat))^2, mask broadcast over
/// channels.
double loss_rec(const Tensor& eps, const Tensor& eps_hat, const Mask& union_mask);
double loss_prior(const Tensor& eps, const Tensor& eps_hat);

/// Mean over handles of the mean squared difference between the handle's
/// attention map and its mask (area-averaged to attention resolution).
double loss_attn(const std::map<std::string, Tensor>& maps, const std::vector<std::string>& handles,
                 const std::map<std::string, Mask>& masks);

/// d loss_rec / d eps_hat.
Tensor loss_rec_grad(const Tensor& eps, const Tensor& eps_hat, const Mask& union_mask);

struct LossBreakdown {
    double rec = 0.0;
    double prior = 0.0;
    double attn = 0.0;
    double total = 0.0;
};

struct LossWithGrad {
    LossBreakdown loss;
    std::vector<double> param_grad;
    /// Gradient per prompt token (tokens may repeat; gradients accumulate).
    std::map<std::string, std::vector<double>> embedding_grad;
};

/// Terms active for a sample's origin under `weights`.
struct ActiveTerms {
    double rec = 0.0;
    double prior = 0.0;
    double attn = 0.0;
};
ActiveTerms active_terms(Origin origin, const LossWeights& weights);

LossBreakdown loss_total(const TrainingSample& sample, const diffusion::ToyModel& model, int t, const Tensor& eps,
                         const LossWeights& weights);
LossWithGrad loss_total_with_grad(const TrainingSample& sample, const diffusion::ToyModel& model, int t,
                                  const Tensor& eps, const LossWeights& weights);

/// Latent-resolution sample for one edge of the graph.
TrainingSample make_sample(const graph::SceneConceptGraph& graph, graph::EdgeId edge, const Tensor& z0);

/// Keeps the edge's two concepts and regenerates the rest of the latent.
std::vector<TrainingSample> make_prior_samples(const graph::SceneConceptGraph& graph, graph::EdgeId edge,
                                               const Tensor& source_latent, const outpaint::Outpainter& outpainter,
                                               int count, std::uint64_t seed, int steps = 20);

struct StepRecord {
    int step = 0;
    std::string phase;
    std::uint32_t edge = 0;
    int t = 0;
    Origin origin = Origin::Original;
    LossBreakdown loss;
};

nlohmann::json to_json(const StepRecord& record);

using StepSink = std::function<void(const StepRecord&)>;

struct TrainResult {
    diffusion::ToyModel model;
    std::vector<StepRecord> log;
};

/// Two-phase construction: phase 1 trains handle embeddings only, phase 2
/// trains model weights (and embeddings when enabled).
TrainResult train_construction(const graph::SceneConceptGraph& graph, const Image& image,
                               const diffusion::ToyModel& model, const diffusion::LatentCodec& codec,
                               const TrainConfig& config, const StepSink& sink = {});

/// Test-time refinement on a single edge: weights plus the edge's relation
/// handle and non-environment concept handle, L_rec + lambda_attn L_attn.
TrainResult train_refine(const graph::SceneConceptGraph& graph, graph::EdgeId edge, const Image& frame,
                         const diffusion::ToyModel& model, const diffusion::LatentCodec& codec,
                         const TrainConfig& config, const StepSink& sink = {});

/// Adds embedding entries for any graph handle missing from the table.
void ensure_handles(diffusion::ToyModel& model, const graph::SceneConceptGraph& graph, std::uint64_t seed);

/// Mean loss over a fixed set of (t, eps) draws; used to compare a model
/// before and after training without sampling noise.
LossBreakdown probe_loss(const TrainingSample& sample, const diffusion::ToyModel& model, const LossWeights& weights,
                         int draws, std::uint64_t seed);

}  // namespace scenepainter::customization
