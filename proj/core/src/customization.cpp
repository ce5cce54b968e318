#include "scenepainter/customization.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/random.hpp"
#include "scenepainter/resample.hpp"

namespace scenepainter::customization {

namespace {

void check_shapes(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "eps and eps_hat shapes differ");
}

void check_mask(const Tensor& eps, const Mask& m) {
    if (!eps.same_extent(m)) throw Error(ErrorCode::ShapeMismatch, "mask does not match latent resolution");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void validate(const TrainConfig& c) {
    if (c.phase1_steps < 0 || c.phase2_steps < 0 || c.refine_steps < 0)
        throw Error(ErrorCode::InvalidConfig, "step counts must be non-negative");
    if (!(c.phase1_lr > 0) || !(c.phase2_lr > 0) || !(c.refine_lr > 0))
        throw Error(ErrorCode::InvalidConfig, "learning rates must be positive");
    if (c.batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch size must be at least 1");
    if (c.prior_samples < 0 || c.prior_sample_steps < 0)
        throw Error(ErrorCode::InvalidConfig, "prior sample settings must be non-negative");
    if (c.weights.lambda_prior < 0 || c.weights.lambda_attn < 0)
        throw Error(ErrorCode::InvalidConfig, "loss weights must be non-negative");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"phase1_steps", c.phase1_steps},
            {"phase1_lr", c.phase1_lr},
            {"phase2_steps", c.phase2_steps},
            {"phase2_lr", c.phase2_lr},
            {"refine_steps", c.refine_steps},
            {"refine_lr", c.refine_lr},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"prior_samples", c.prior_samples},
            {"prior_sample_steps", c.prior_sample_steps},
            {"phase2_train_embeddings", c.phase2_train_embeddings},
            {"lambda_prior", c.weights.lambda_prior},
            {"lambda_attn", c.weights.lambda_attn},
            {"use_rec", c.weights.use_rec},
            {"use_prior", c.weights.use_prior},
            {"use_attn", c.weights.use_attn},
            {"loss_assignment",
             c.weights.assignment == LossAssignment::SplitByOrigin ? "split_by_origin" : "joint"}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.phase1_steps = j.value("phase1_steps", c.phase1_steps);
        c.phase1_lr = j.value("phase1_lr", c.phase1_lr);
        c.phase2_steps = j.value("phase2_steps", c.phase2_steps);
        c.phase2_lr = j.value("phase2_lr", c.phase2_lr);
        c.refine_steps = j.value("refine_steps", c.refine_steps);
        c.refine_lr = j.value("refine_lr", c.refine_lr);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.prior_samples = j.value("prior_samples", c.prior_samples);
        c.prior_sample_steps = j.value("prior_sample_steps", c.prior_sample_steps);
        c.phase2_train_embeddings = j.value("phase2_train_embeddings", c.phase2_train_embeddings);
        c.weights.lambda_prior = j.value("lambda_prior", c.weights.lambda_prior);
        c.weights.lambda_attn = j.value("lambda_attn", c.weights.lambda_attn);
        c.weights.use_rec = j.value("use_rec", c.weights.use_rec);
        c.weights.use_prior = j.value("use_prior", c.weights.use_prior);
        c.weights.use_attn = j.value("use_attn", c.weights.use_attn);
        const auto assignment = j.value("loss_assignment", std::string("split_by_origin"));
        if (assignment == "split_by_origin") c.weights.assignment = LossAssignment::SplitByOrigin;
        else if (assignment == "joint") c.weights.assignment = LossAssignment::JointOnAll;
        else throw Error(ErrorCode::InvalidConfig, "unknown loss_assignment '" + assignment + "'");
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::InvalidConfig, ex.what());
    }
    validate(c);
    return c;
}

// ---------------------------------------------------------------------------
// Losses

double loss_rec(const Tensor& eps, const Tensor& eps_hat, const Mask& m) {
    check_shapes(eps, eps_hat);
    check_mask(eps, m);
    const std::size_t plane = eps.plane_size();
    double sum = 0.0;
    for (int c = 0; c < eps.channels(); ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t k = c * plane + i;
            const double r = m[i] ? eps[k] - eps_hat[k] : 0.0;
            sum += r * r;
        }
    return sum / static_cast<double>(eps.size());
}

Tensor loss_rec_grad(const Tensor& eps, const Tensor& eps_hat, const Mask& m) {
    check_shapes(eps, eps_hat);
    check_mask(eps, m);
    Tensor g(eps.height(), eps.width(), eps.channels());
    const std::size_t plane = eps.plane_size();
    const double scale = -2.0 / static_cast<double>(eps.size());
    for (int c = 0; c < eps.channels(); ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t k = c * plane + i;
            g[k] = m[i] ? scale * (eps[k] - eps_hat[k]) : 0.0;
        }
    return g;
}

double loss_prior(const Tensor& eps, const Tensor& eps_hat) {
    check_shapes(eps, eps_hat);
    double sum = 0.0;
    for (std::size_t k = 0; k < eps.size(); ++k) {
        const double r = eps[k] - eps_hat[k];
        sum += r * r;
    }
    return sum / static_cast<double>(eps.size());
}

double loss_attn(const std::map<std::string, Tensor>& maps, const std::vector<std::string>& handles,
                 const std::map<std::string, Mask>& masks) {
    if (handles.empty()) return 0.0;
    double total = 0.0;
    for (const auto& h : handles) {
        auto mi = maps.find(h);
        if (mi == maps.end()) throw Error(ErrorCode::MissingMap, "no attention map for " + h);
        auto ki = masks.find(h);
        if (ki == masks.end()) throw Error(ErrorCode::MissingMask, "no mask for " + h);
        const Tensor& map = mi->second;
        const Tensor target = area_average(ki->second, map.height(), map.width());
        double sum = 0.0;
        for (std::size_t i = 0; i < map.size(); ++i) {
            const double r = map[i] - target[i];
            sum += r * r;
        }
        total += sum / static_cast<double>(map.size());
    }
    return total / static_cast<double>(handles.size());
}

ActiveTerms active_terms(Origin origin, const LossWeights& w) {
    ActiveTerms a;
    const bool joint = w.assignment == LossAssignment::JointOnAll;
    if (w.use_rec && (joint || origin == Origin::Original)) a.rec = 1.0;
    if (w.use_prior && (joint || origin == Origin::Prior)) a.prior = w.lambda_prior;
    if (w.use_attn) a.attn = w.lambda_attn;
    return a;
}

namespace {

struct Evaluation {
    LossBreakdown loss;
    diffusion::ForwardCache cache;
    diffusion::DenoiserOutput out;
    std::array<Tensor, 3> attn_targets;
};

Evaluation evaluate(const TrainingSample& s, const diffusion::ToyModel& model, int t, const Tensor& eps,
                    const LossWeights& w, bool keep_cache) {
    if (!s.z0.same_shape(eps)) throw Error(ErrorCode::ShapeMismatch, "noise does not match the latent");
    Evaluation ev;
    const Tensor zt = diffusion::add_noise(model.schedule(), s.z0, t, eps);
    const Tensor prompt = model.encode_prompt(s.tokens);
    ev.out = model.forward(zt, t, prompt, keep_cache ? &ev.cache : nullptr);

    std::map<std::string, Tensor> maps;
    std::map<std::string, Mask> masks;
    std::vector<std::string> handles(s.tokens.begin(), s.tokens.end());
    for (std::size_t j = 0; j < 3; ++j) {
        maps[s.tokens[j]] = ev.out.attention_maps[j];
        masks[s.tokens[j]] = s.handle_masks[j];
        const auto& map = ev.out.attention_maps[j];
        ev.attn_targets[j] = area_average(s.handle_masks[j], map.height(), map.width());
    }
    const auto terms = active_terms(s.origin, w);
    ev.loss.rec = loss_rec(eps, ev.out.eps_hat, s.union_mask);
    ev.loss.prior = loss_prior(eps, ev.out.eps_hat);
    ev.loss.attn = loss_attn(maps, handles, masks);
    ev.loss.total = terms.rec * ev.loss.rec + terms.prior * ev.loss.prior + terms.attn * ev.loss.attn;
    return ev;
}

}  // namespace

LossBreakdown loss_total(const TrainingSample& sample, const diffusion::ToyModel& model, int t, const Tensor& eps,
                         const LossWeights& weights) {
    return evaluate(sample, model, t, eps, weights, false).loss;
}

LossWithGrad loss_total_with_grad(const TrainingSample& s, const diffusion::ToyModel& model, int t,
                                  const Tensor& eps, const LossWeights& w) {
    auto ev = evaluate(s, model, t, eps, w, true);
    const auto terms = active_terms(s.origin, w);

    Tensor eps_grad(eps.height(), eps.width(), eps.channels());
    if (terms.rec != 0.0) {
        const Tensor g = loss_rec_grad(eps, ev.out.eps_hat, s.union_mask);
        for (std::size_t k = 0; k < g.size(); ++k) eps_grad[k] += terms.rec * g[k];
    }
    if (terms.prior != 0.0) {
        const double scale = -2.0 / static_cast<double>(eps.size());
        for (std::size_t k = 0; k < eps.size(); ++k) eps_grad[k] += terms.prior * scale * (eps[k] - ev.out.eps_hat[k]);
    }
    std::vector<Tensor> attn_grads;
    if (terms.attn != 0.0) {
        for (std::size_t j = 0; j < 3; ++j) {
            const auto& map = ev.out.attention_maps[j];
            Tensor g(map.height(), map.width(), 1);
            const double scale = terms.attn * 2.0 / (3.0 * static_cast<double>(map.size()));
            for (std::size_t i = 0; i < map.size(); ++i) g[i] = scale * (map[i] - ev.attn_targets[j][i]);
            attn_grads.push_back(std::move(g));
        }
    }

    auto grads = model.backward(ev.cache, eps_grad, attn_grads);
    LossWithGrad result;
    result.loss = ev.loss;
    result.param_grad = std::move(grads.params);
    const int d = grads.prompt.width();
    for (std::size_t j = 0; j < 3; ++j) {
        auto& acc = result.embedding_grad[s.tokens[j]];
        acc.resize(static_cast<std::size_t>(d), 0.0);
        for (int e = 0; e < d; ++e) acc[e] += grads.prompt.at(0, static_cast<int>(j), e);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Samples

TrainingSample make_sample(const graph::SceneConceptGraph& g, graph::EdgeId edge, const Tensor& z0) {
    const auto triple = graph::prompt_triple(g, edge);
    TrainingSample s;
    s.z0 = z0;
    s.tokens = triple.tokens;
    const Mask a = outpaint::mask_to_latent(triple.handle_masks[0], z0.height(), z0.width());
    const Mask b = outpaint::mask_to_latent(triple.handle_masks[2], z0.height(), z0.width());
    s.union_mask = a | b;
    s.handle_masks = {a, s.union_mask, b};
    return s;
}

std::vector<TrainingSample> make_prior_samples(const graph::SceneConceptGraph& g, graph::EdgeId edge,
                                               const Tensor& source_latent, const outpaint::Outpainter& outpainter,
                                               int count, std::uint64_t seed, int steps) {
    std::vector<TrainingSample> out;
    if (count <= 0) return out;
    const TrainingSample base = make_sample(g, edge, source_latent);
    const Mask fill = ~base.union_mask;
    const std::vector<std::string> tokens(base.tokens.begin(), base.tokens.end());
    out.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
        TrainingSample s = base;
        s.origin = Origin::Prior;
        s.z0 = outpainter.outpaint_latent(source_latent, fill, tokens, derive_seed(seed, static_cast<std::uint64_t>(k)),
                                          steps);
        for (double v : s.z0.storage())
            if (!std::isfinite(v)) throw Error(ErrorCode::OutpaintFailure, "prior sample is not finite");
        out.push_back(std::move(s));
    }
    return out;
}

nlohmann::json to_json(const StepRecord& r) {
    return {{"step", r.step},
            {"phase", r.phase},
            {"edge", r.edge},
            {"t", r.t},
            {"origin", r.origin == Origin::Original ? "original" : "prior"},
            {"L_rec", r.loss.rec},
            {"L_prior", r.loss.prior},
            {"L_attn", r.loss.attn},
            {"L_total", r.loss.total}};
}

void ensure_handles(diffusion::ToyModel& model, const graph::SceneConceptGraph& g, std::uint64_t seed) {
    auto& table = model.mutable_embeddings();
    for (const auto& h : g.handles())
        if (!table.contains(h)) table.init_handle(h, seed);
}

LossBreakdown probe_loss(const TrainingSample& sample, const diffusion::ToyModel& model, const LossWeights& weights,
                         int draws, std::uint64_t seed) {
    LossBreakdown mean;
    if (draws <= 0) return mean;
    Rng rng(seed);
    const int T = model.schedule().steps();
    for (int i = 0; i < draws; ++i) {
        const int t = 1 + static_cast<int>((static_cast<long long>(i) * T) / draws);
        const Tensor eps = gaussian_tensor(sample.z0.channels(), sample.z0.height(), sample.z0.width(), rng);
        const auto l = loss_total(sample, model, t, eps, weights);
        mean.rec += l.rec / draws;
        mean.prior += l.prior / draws;
        mean.attn += l.attn / draws;
        mean.total += l.total / draws;
    }
    return mean;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct EdgeData {
    graph::EdgeId id;
    TrainingSample original;
    std::vector<TrainingSample> priors;
};

struct Trainable {
    bool params = false;
    std::set<std::string> handles;
};

class Trainer {
public:
    Trainer(diffusion::ToyModel& model, std::vector<EdgeData> edges, const TrainConfig& config, const StepSink& sink,
            std::vector<StepRecord>& log)
        : model_(model), edges_(std::move(edges)), config_(config), sink_(sink), log_(log),
          rng_(config.seed) {}

    void run(const std::string& phase, int steps, double lr, const Trainable& trainable, const LossWeights& weights) {
        const int T = model_.schedule().steps();
        const auto shape = model_.latent_shape();
        std::uniform_int_distribution<std::size_t> pick_edge(0, edges_.size() - 1);
        std::uniform_int_distribution<int> pick_t(1, T);
        for (int step = 0; step < steps; ++step) {
            std::vector<double> param_grad(model_.params().size(), 0.0);
            std::map<std::string, std::vector<double>> emb_grad;
            for (int b = 0; b < config_.batch_size; ++b) {
                const auto& e = edges_[pick_edge(rng_)];
                const bool use_prior = (global_step_ % 2 == 1) && !e.priors.empty();
                const TrainingSample* s = &e.original;
                if (use_prior) {
                    std::uniform_int_distribution<std::size_t> pick(0, e.priors.size() - 1);
                    s = &e.priors[pick(rng_)];
                }
                const int t = pick_t(rng_);
                const Tensor eps = gaussian_tensor(shape.channels, shape.height, shape.width, rng_);
                auto r = loss_total_with_grad(*s, model_, t, eps, weights);
                if (!std::isfinite(r.loss.total))
                    throw Error(ErrorCode::DivergedLoss, phase + " loss is not finite at step " + std::to_string(step));
                const double inv_b = 1.0 / config_.batch_size;
                for (std::size_t i = 0; i < param_grad.size(); ++i) param_grad[i] += inv_b * r.param_grad[i];
                for (auto& [tok, g] : r.embedding_grad) {
                    auto& acc = emb_grad[tok];
                    acc.resize(g.size(), 0.0);
                    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += inv_b * g[i];
                }
                StepRecord rec{step, phase, e.id.value, t, s->origin, r.loss};
                if (sink_) sink_(rec);
                log_.push_back(std::move(rec));
            }
            if (trainable.params) {
                auto p = model_.mutable_params();
                for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * param_grad[i];
            }
            for (const auto& [tok, g] : emb_grad) {
                if (!trainable.handles.count(tok)) continue;
                auto v = model_.mutable_embeddings().handle(tok);
                for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
            }
            ++global_step_;
        }
    }

private:
    diffusion::ToyModel& model_;
    std::vector<EdgeData> edges_;
    const TrainConfig& config_;
    const StepSink& sink_;
    std::vector<StepRecord>& log_;
    Rng rng_;
    long long global_step_ = 0;
};

Tensor encode_for(const diffusion::ToyModel& model, const diffusion::LatentCodec& codec, const Image& image) {
    Tensor z = codec.encode(image);
    const auto shape = model.latent_shape();
    if (z.channels() != shape.channels || z.height() != shape.height || z.width() != shape.width)
        throw Error(ErrorCode::ShapeMismatch, "image latent does not match the model's latent shape");
    return z;
}

}  // namespace

TrainResult train_construction(const graph::SceneConceptGraph& g, const Image& image,
                               const diffusion::ToyModel& model, const diffusion::LatentCodec& codec,
                               const TrainConfig& config, const StepSink& sink) {
    validate(config);
    if (g.edges().empty()) throw Error(ErrorCode::EmptyGraph, "graph has no relation edges to train on");
    const Tensor z0 = encode_for(model, codec, image);

    TrainResult result{model, {}};
    ensure_handles(result.model, g, config.seed);

    std::vector<EdgeData> edges;
    for (const auto& e : g.edges()) {
        if (g.node(e.endpoints.first).muted || g.node(e.endpoints.second).muted) continue;
        edges.push_back({e.id, make_sample(g, e.id, z0), {}});
    }
    if (edges.empty()) throw Error(ErrorCode::EmptyGraph, "every edge has a muted endpoint");

    const bool want_priors = config.prior_samples > 0 && config.weights.use_prior &&
                             (config.phase1_steps > 0 || config.phase2_steps > 0);
    if (want_priors) {
        // Prior samples come from the model as it stands before customisation.
        auto frozen = std::make_shared<const diffusion::ToyModel>(result.model);
        auto codec_ref = std::shared_ptr<const diffusion::LatentCodec>(&codec, [](const auto*) {});
        const auto outpainter = outpaint::to_outpainter(frozen, codec_ref);
        for (auto& e : edges)
            e.priors = make_prior_samples(g, e.id, z0, outpainter, config.prior_samples,
                                          derive_seed(config.seed, 0x70726900ULL + e.id.value), config.prior_sample_steps);
    }

    std::set<std::string> handles;
    for (const auto& h : g.handles()) handles.insert(h);

    Trainer trainer(result.model, std::move(edges), config, sink, result.log);
    trainer.run("phase1", config.phase1_steps, config.phase1_lr, Trainable{false, handles}, config.weights);
    trainer.run("phase2", config.phase2_steps, config.phase2_lr,
                Trainable{true, config.phase2_train_embeddings ? handles : std::set<std::string>{}}, config.weights);
    return result;
}

TrainResult train_refine(const graph::SceneConceptGraph& g, graph::EdgeId edge, const Image& frame,
                         const diffusion::ToyModel& model, const diffusion::LatentCodec& codec,
                         const TrainConfig& config, const StepSink& sink) {
    validate(config);
    const Tensor z0 = encode_for(model, codec, frame);
    TrainResult result{model, {}};
    ensure_handles(result.model, g, config.seed);

    EdgeData data{edge, make_sample(g, edge, z0), {}};
    const auto& e = g.edge(edge);
    std::set<std::string> handles{e.handle};
    for (auto id : {e.endpoints.first, e.endpoints.second}) {
        const auto& n = g.node(id);
        if (n.level != graph::Level::Environment) handles.insert(n.handle);
    }

    LossWeights weights = config.weights;
    weights.assignment = LossAssignment::SplitByOrigin;  // original samples only: L_rec + lambda_attn L_attn

    std::vector<EdgeData> edges;
    edges.push_back(std::move(data));
    Trainer trainer(result.model, std::move(edges), config, sink, result.log);
    trainer.run("refine", config.refine_steps, config.refine_lr, Trainable{true, handles}, weights);
    return result;
}

}  // namespace scenepainter::customization
