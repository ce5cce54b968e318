#include "scenepainter/diffusion.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/random.hpp"

namespace scenepainter::diffusion {

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps <= 0 || !(beta_start > 0.0) || beta_end < beta_start || !(beta_end < 1.0))
        throw Error(ErrorCode::InvalidConfig, "schedule needs 0 < beta_start <= beta_end < 1 and T > 0");
    NoiseSchedule s{Empty{}};
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.betas_.resize(static_cast<std::size_t>(steps));
    s.alpha_bars_.resize(static_cast<std::size_t>(steps) + 1);
    s.alpha_bars_[0] = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        s.betas_[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bars_[i + 1] = s.alpha_bars_[i] * (1.0 - s.betas_[i]);
    }
    return s;
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > steps()) throw Error(ErrorCode::TimestepOutOfRange, "t = " + std::to_string(t));
    return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > steps()) throw Error(ErrorCode::TimestepOutOfRange, "t = " + std::to_string(t));
    return alpha_bars_[t];
}

Tensor noise_to(const NoiseSchedule& schedule, const Tensor& z0, int t, const Tensor& eps) {
    if (!z0.same_shape(eps)) throw Error(ErrorCode::ShapeMismatch, "noise and latent shapes differ");
    if (t == 0) return z0;
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    Tensor out = z0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

Tensor add_noise(const NoiseSchedule& schedule, const Tensor& z0, int t, const Tensor& eps) {
    if (t < 1 || t > schedule.steps()) throw Error(ErrorCode::TimestepOutOfRange, "t = " + std::to_string(t));
    return noise_to(schedule, z0, t, eps);
}

// ---------------------------------------------------------------------------
// Embeddings

namespace {

constexpr const char* kBaseVocabulary[] = {"a", "photo", "of", "the", "scene", "with", "and", "in", "view"};

std::uint64_t token_hash(const std::string& token) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : token) h = (h ^ c) * 1099511628211ULL;
    return h;
}

std::vector<double> seeded_vector(int dim, std::uint64_t seed, double scale) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = normal(rng);
    return v;
}

}  // namespace

EmbeddingTable EmbeddingTable::with_base_vocabulary(int dim, std::uint64_t seed) {
    EmbeddingTable table(dim);
    for (const char* word : kBaseVocabulary)
        table.set_base(word, seeded_vector(dim, derive_seed(seed, token_hash(word)), 1.0));
    return table;
}

bool EmbeddingTable::contains(const std::string& token) const noexcept {
    return base_.count(token) != 0 || handles_.count(token) != 0;
}

void EmbeddingTable::set_base(const std::string& token, std::vector<double> vec) {
    if (static_cast<int>(vec.size()) != dim_) throw Error(ErrorCode::ShapeMismatch, "embedding dimension");
    base_[token] = std::move(vec);
}

void EmbeddingTable::set_handle(const std::string& token, std::vector<double> vec) {
    if (static_cast<int>(vec.size()) != dim_) throw Error(ErrorCode::ShapeMismatch, "embedding dimension");
    handles_[token] = std::move(vec);
}

void EmbeddingTable::init_handle(const std::string& token, std::uint64_t seed) {
    set_handle(token, seeded_vector(dim_, derive_seed(seed, token_hash(token)), 0.5));
}

std::span<const double> EmbeddingTable::at(const std::string& token) const {
    if (auto it = handles_.find(token); it != handles_.end()) return it->second;
    if (auto it = base_.find(token); it != base_.end()) return it->second;
    throw Error(ErrorCode::UnknownToken, "token '" + token + "' is not in the embedding table");
}

std::span<double> EmbeddingTable::handle(const std::string& token) {
    auto it = handles_.find(token);
    if (it == handles_.end()) throw Error(ErrorCode::UnknownToken, "handle '" + token + "' is not in the table");
    return it->second;
}

Tensor encode_prompt(const EmbeddingTable& table, std::span<const std::string> tokens) {
    Tensor p(static_cast<int>(tokens.size()), table.dim(), 1);
    for (std::size_t j = 0; j < tokens.size(); ++j) {
        auto v = table.at(tokens[j]);
        std::copy(v.begin(), v.end(), p.storage().begin() + static_cast<std::ptrdiff_t>(j * table.dim()));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Codec

Tensor ToyCodec::encode(const Image& image) const {
    if (image.empty()) throw Error(ErrorCode::EmptyImage, "cannot encode an empty image");
    if (image.height() % factor_ != 0 || image.width() % factor_ != 0)
        throw Error(ErrorCode::ShapeMismatch, "image size must be a multiple of the codec factor");
    const int h = image.height() / factor_;
    const int w = image.width() / factor_;
    Tensor z(h, w, 3);
    const double area = static_cast<double>(factor_) * factor_;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                unsigned sum = 0;
                for (int dy = 0; dy < factor_; ++dy)
                    for (int dx = 0; dx < factor_; ++dx) sum += image.at(c, y * factor_ + dy, x * factor_ + dx);
                z.at(c, y, x) = (sum / area) / 127.5 - 1.0;
            }
    return z;
}

Image ToyCodec::decode(const Tensor& latent) const {
    if (latent.channels() != 3) throw Error(ErrorCode::ShapeMismatch, "toy codec expects 3 latent channels");
    Image img(latent.height() * factor_, latent.width() * factor_);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < latent.height(); ++y)
            for (int x = 0; x < latent.width(); ++x) {
                const double v = std::clamp(std::round((latent.at(c, y, x) + 1.0) * 127.5), 0.0, 255.0);
                const auto px = static_cast<std::uint8_t>(v);
                for (int dy = 0; dy < factor_; ++dy)
                    for (int dx = 0; dx < factor_; ++dx) img.at(c, y * factor_ + dy, x * factor_ + dx) = px;
            }
    return img;
}

// ---------------------------------------------------------------------------
// Toy denoiser

ParamLayout::ParamLayout(const ToyConfig& c) {
    std::size_t o = 0;
    auto take = [&o](std::size_t n) {
        const auto at = o;
        o += n;
        return at;
    };
    const std::size_t F = c.features, C = c.latent_channels, K = c.time_features, dk = c.key_dim, d = c.embed_dim;
    conv_w = take(F * C * 9);
    conv_b = take(F);
    time_w = take(F * K);
    query_w = take(dk * F);
    key_w = take(dk * d);
    value_w = take(F * d);
    out_w = take(C * F);
    out_b = take(C);
    position = take(C * static_cast<std::size_t>(c.latent_height) * c.latent_width);
    skip = take(1);
    total = o;
}

ToyModel::ToyModel(ToyConfig config, NoiseSchedule schedule, EmbeddingTable table)
    : config_(config), layout_(config_), schedule_(std::move(schedule)), table_(std::move(table)),
      params_(layout_.total, 0.0) {
    if (config_.latent_height % 2 != 0 || config_.latent_width % 2 != 0 || config_.latent_height <= 0 ||
        config_.latent_width <= 0)
        throw Error(ErrorCode::InvalidConfig, "latent size must be positive and even");
    if (table_.dim() != config_.embed_dim) throw Error(ErrorCode::InvalidConfig, "embedding dimension mismatch");
}

ToyModel ToyModel::initialized(ToyConfig config, NoiseSchedule schedule, EmbeddingTable table, std::uint64_t seed) {
    ToyModel m(config, std::move(schedule), std::move(table));
    Rng rng(seed);
    const auto& L = m.layout_;
    auto fill = [&](std::size_t begin, std::size_t end, double scale) {
        std::normal_distribution<double> normal(0.0, scale);
        for (std::size_t i = begin; i < end; ++i) m.params_[i] = normal(rng);
    };
    fill(L.conv_w, L.conv_b, 1.0 / std::sqrt(9.0 * config.latent_channels));
    fill(L.time_w, L.query_w, 0.1);
    fill(L.query_w, L.key_w, 1.0 / std::sqrt(static_cast<double>(config.features)));
    fill(L.key_w, L.value_w, 1.0 / std::sqrt(static_cast<double>(config.embed_dim)));
    fill(L.value_w, L.out_w, 0.1 / std::sqrt(static_cast<double>(config.embed_dim)));
    fill(L.out_w, L.out_b, 0.1 / std::sqrt(static_cast<double>(config.features)));
    m.params_[L.skip] = 1.0 / config.skip_gain;
    return m;
}

std::vector<double> time_features(int t, int total_steps, int count) {
    std::vector<double> f(static_cast<std::size_t>(count));
    const double u = static_cast<double>(t) / total_steps;
    for (int k = 0; k < count; ++k) {
        const double freq = std::numbers::pi * (k / 2 + 1);
        f[k] = (k % 2 == 0) ? std::sin(freq * u) : std::cos(freq * u);
    }
    return f;
}

DenoiserOutput ToyModel::denoise(const Tensor& z_t, int t, const Tensor& prompt) const {
    return forward(z_t, t, prompt, nullptr);
}

DenoiserOutput ToyModel::forward(const Tensor& z, int t, const Tensor& prompt, ForwardCache* cache) const {
    const auto& c = config_;
    const int C = c.latent_channels, H = c.latent_height, W = c.latent_width, F = c.features, dk = c.key_dim,
              d = c.embed_dim, K = c.time_features;
    const int Ha = c.attention_height(), Wa = c.attention_width(), S = Ha * Wa;
    if (z.channels() != C || z.height() != H || z.width() != W)
        throw Error(ErrorCode::ShapeMismatch, "latent shape does not match the denoiser");
    if (prompt.channels() != 1 || (prompt.height() > 0 && prompt.width() != d))
        throw Error(ErrorCode::ShapeMismatch, "prompt embedding dimension does not match the denoiser");
    const int T = schedule_.steps();
    if (t < 1 || t > T) throw Error(ErrorCode::TimestepOutOfRange, "t = " + std::to_string(t));
    const int Ltok = prompt.height();
    const auto& P = params_;
    const auto& Lay = layout_;

    const auto tf = time_features(t, T, K);

    // conv3x3 + bias + time projection, tanh
    Tensor h1(H, W, F);
    for (int f = 0; f < F; ++f) {
        double base = c.conv_gain * P[Lay.conv_b + f];
        for (int k = 0; k < K; ++k) base += c.time_gain * P[Lay.time_w + f * K + k] * tf[k];
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = base;
                for (int ch = 0; ch < C; ++ch)
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yy = y + ky - 1;
                        if (yy < 0 || yy >= H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = x + kx - 1;
                            if (xx < 0 || xx >= W) continue;
                            acc += c.conv_gain * P[Lay.conv_w + ((f * C + ch) * 3 + ky) * 3 + kx] * z.at(ch, yy, xx);
                        }
                    }
                h1.at(f, y, x) = std::tanh(acc);
            }
    }

    Tensor pooled(Ha, Wa, F);
    for (int f = 0; f < F; ++f)
        for (int y = 0; y < Ha; ++y)
            for (int x = 0; x < Wa; ++x)
                pooled.at(f, y, x) = 0.25 * (h1.at(f, 2 * y, 2 * x) + h1.at(f, 2 * y, 2 * x + 1) +
                                             h1.at(f, 2 * y + 1, 2 * x) + h1.at(f, 2 * y + 1, 2 * x + 1));

    std::vector<double> query(static_cast<std::size_t>(S) * dk, 0.0);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < dk; ++a) {
            double acc = 0.0;
            for (int f = 0; f < F; ++f) acc += P[Lay.query_w + a * F + f] * pooled[pooled.index(f, 0, 0) + s];
            query[s * dk + a] = c.query_gain * acc;
        }
    std::vector<double> key(static_cast<std::size_t>(Ltok) * dk, 0.0);
    std::vector<double> value(static_cast<std::size_t>(Ltok) * F, 0.0);
    for (int j = 0; j < Ltok; ++j) {
        for (int a = 0; a < dk; ++a) {
            double acc = 0.0;
            for (int e = 0; e < d; ++e) acc += P[Lay.key_w + a * d + e] * prompt.at(0, j, e);
            key[j * dk + a] = c.key_gain * acc;
        }
        for (int f = 0; f < F; ++f) {
            double acc = 0.0;
            for (int e = 0; e < d; ++e) acc += P[Lay.value_w + f * d + e] * prompt.at(0, j, e);
            value[j * F + f] = c.value_gain * acc;
        }
    }

    // Spatial softmax per token divided by its maximum, i.e. exp(l - max l).
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<double> attn(static_cast<std::size_t>(Ltok) * S, 0.0);
    std::vector<int> argmax(static_cast<std::size_t>(Ltok), 0);
    DenoiserOutput out;
    out.attention_maps.reserve(static_cast<std::size_t>(Ltok));
    for (int j = 0; j < Ltok; ++j) {
        std::vector<double> logits(static_cast<std::size_t>(S));
        for (int s = 0; s < S; ++s) {
            double acc = 0.0;
            for (int a = 0; a < dk; ++a) acc += query[s * dk + a] * key[j * dk + a];
            logits[s] = acc * inv_sqrt_dk;
        }
        const auto m = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        argmax[j] = m;
        Tensor map(Ha, Wa, 1);
        for (int s = 0; s < S; ++s) {
            attn[j * S + s] = s == m ? 1.0 : std::exp(logits[s] - logits[m]);
            map[s] = attn[j * S + s];
        }
        out.attention_maps.push_back(std::move(map));
    }

    Tensor h2 = h1;
    if (Ltok > 0) {
        const double inv_l = 1.0 / Ltok;
        for (int f = 0; f < F; ++f)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int s = (y / 2) * Wa + (x / 2);
                    double acc = 0.0;
                    for (int j = 0; j < Ltok; ++j) acc += attn[j * S + s] * value[j * F + f];
                    h2.at(f, y, x) += inv_l * acc;
                }
    }

    Tensor x0(H, W, C);
    for (int ch = 0; ch < C; ++ch)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int f = 0; f < F; ++f) acc += P[Lay.out_w + ch * F + f] * h2.at(f, y, x);
                x0.at(ch, y, x) = c.out_gain * (acc + P[Lay.out_b + ch]) +
                                  c.position_gain * P[Lay.position + (ch * H + y) * W + x];
            }

    const double ab = schedule_.alpha_bar(t);
    const double sa = std::sqrt(ab);
    const double inv_sn = 1.0 / std::sqrt(1.0 - ab);
    const double skip = c.skip_gain * P[Lay.skip];
    out.eps_hat = Tensor(H, W, C);
    for (std::size_t i = 0; i < z.size(); ++i) out.eps_hat[i] = (skip * z[i] - sa * x0[i]) * inv_sn;

    if (cache) {
        cache->z = z;
        cache->t = t;
        cache->prompt = prompt;
        cache->time_feat = tf;
        cache->h1 = std::move(h1);
        cache->pooled = std::move(pooled);
        cache->query = std::move(query);
        cache->key = std::move(key);
        cache->value = std::move(value);
        cache->attn = std::move(attn);
        cache->argmax = std::move(argmax);
        cache->h2 = std::move(h2);
        cache->x0 = std::move(x0);
    }
    return out;
}

Gradients ToyModel::backward(const ForwardCache& k, const Tensor& eps_grad, std::span<const Tensor> attn_grads) const {
    const auto& c = config_;
    const int C = c.latent_channels, H = c.latent_height, W = c.latent_width, F = c.features, dk = c.key_dim,
              d = c.embed_dim, K = c.time_features;
    const int Wa = c.attention_width(), S = c.attention_height() * Wa;
    const int Ltok = k.prompt.height();
    const auto& P = params_;
    const auto& Lay = layout_;
    if (!eps_grad.same_shape(k.z)) throw Error(ErrorCode::ShapeMismatch, "eps gradient shape");
    if (!attn_grads.empty() && static_cast<int>(attn_grads.size()) != Ltok)
        throw Error(ErrorCode::ShapeMismatch, "one attention gradient per token expected");

    Gradients g;
    g.params.assign(Lay.total, 0.0);
    g.prompt = Tensor(Ltok, d, 1);
    auto& G = g.params;

    const double ab = schedule_.alpha_bar(k.t);
    const double sa = std::sqrt(ab);
    const double inv_sn = 1.0 / std::sqrt(1.0 - ab);

    // eps_hat = (skip*z - sa*x0) * inv_sn
    Tensor dx0(H, W, C);
    double dskip = 0.0;
    for (std::size_t i = 0; i < k.z.size(); ++i) {
        dskip += eps_grad[i] * k.z[i] * inv_sn;
        dx0[i] = -sa * inv_sn * eps_grad[i];
    }
    G[Lay.skip] = c.skip_gain * dskip;

    Tensor dh2(H, W, F);
    for (int ch = 0; ch < C; ++ch) {
        double db = 0.0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double gx = dx0.at(ch, y, x);
                db += gx;
                G[Lay.position + (ch * H + y) * W + x] = c.position_gain * gx;
                for (int f = 0; f < F; ++f) {
                    G[Lay.out_w + ch * F + f] += c.out_gain * gx * k.h2.at(f, y, x);
                    dh2.at(f, y, x) += c.out_gain * P[Lay.out_w + ch * F + f] * gx;
                }
            }
        G[Lay.out_b + ch] = c.out_gain * db;
    }

    Tensor dh1 = dh2;

    // attention block
    std::vector<double> d_attn_out(static_cast<std::size_t>(F) * S, 0.0);
    for (int f = 0; f < F; ++f)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) d_attn_out[f * S + (y / 2) * Wa + (x / 2)] += dh2.at(f, y, x);

    std::vector<double> dquery(static_cast<std::size_t>(S) * dk, 0.0);
    std::vector<double> dkey(static_cast<std::size_t>(Ltok) * dk, 0.0);
    std::vector<double> dvalue(static_cast<std::size_t>(Ltok) * F, 0.0);
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    const double inv_l = Ltok > 0 ? 1.0 / Ltok : 0.0;
    for (int j = 0; j < Ltok; ++j) {
        std::vector<double> dattn(static_cast<std::size_t>(S), 0.0);
        for (int s = 0; s < S; ++s) {
            double acc = attn_grads.empty() ? 0.0 : attn_grads[j][s];
            for (int f = 0; f < F; ++f) {
                acc += inv_l * d_attn_out[f * S + s] * k.value[j * F + f];
                dvalue[j * F + f] += inv_l * k.attn[j * S + s] * d_attn_out[f * S + s];
            }
            dattn[s] = acc;
        }
        // map_s = exp(l_s - l_m): dl_s = map_s * dmap_s, dl_m -= sum_s map_s * dmap_s
        std::vector<double> dlogit(static_cast<std::size_t>(S));
        double total = 0.0;
        for (int s = 0; s < S; ++s) {
            dlogit[s] = k.attn[j * S + s] * dattn[s];
            total += dlogit[s];
        }
        dlogit[k.argmax[j]] -= total;
        for (int s = 0; s < S; ++s) {
            const double gl = dlogit[s] * inv_sqrt_dk;
            for (int a = 0; a < dk; ++a) {
                dquery[s * dk + a] += gl * k.key[j * dk + a];
                dkey[j * dk + a] += gl * k.query[s * dk + a];
            }
        }
    }

    for (int j = 0; j < Ltok; ++j) {
        for (int a = 0; a < dk; ++a) {
            const double gk = c.key_gain * dkey[j * dk + a];
            for (int e = 0; e < d; ++e) {
                G[Lay.key_w + a * d + e] += gk * k.prompt.at(0, j, e);
                g.prompt.at(0, j, e) += gk * P[Lay.key_w + a * d + e];
            }
        }
        for (int f = 0; f < F; ++f) {
            const double gv = c.value_gain * dvalue[j * F + f];
            for (int e = 0; e < d; ++e) {
                G[Lay.value_w + f * d + e] += gv * k.prompt.at(0, j, e);
                g.prompt.at(0, j, e) += gv * P[Lay.value_w + f * d + e];
            }
        }
    }

    Tensor dpooled(c.attention_height(), Wa, F);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < dk; ++a) {
            const double gq = c.query_gain * dquery[s * dk + a];
            for (int f = 0; f < F; ++f) {
                G[Lay.query_w + a * F + f] += gq * k.pooled[k.pooled.index(f, 0, 0) + s];
                dpooled[dpooled.index(f, 0, 0) + s] += gq * P[Lay.query_w + a * F + f];
            }
        }
    for (int f = 0; f < F; ++f)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) dh1.at(f, y, x) += 0.25 * dpooled.at(f, y / 2, x / 2);

    // tanh and conv
    for (int f = 0; f < F; ++f) {
        double db = 0.0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double hv = k.h1.at(f, y, x);
                const double gp = dh1.at(f, y, x) * (1.0 - hv * hv);
                db += gp;
                for (int ch = 0; ch < C; ++ch)
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yy = y + ky - 1;
                        if (yy < 0 || yy >= H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = x + kx - 1;
                            if (xx < 0 || xx >= W) continue;
                            G[Lay.conv_w + ((f * C + ch) * 3 + ky) * 3 + kx] += c.conv_gain * gp * k.z.at(ch, yy, xx);
                        }
                    }
            }
        G[Lay.conv_b + f] = c.conv_gain * db;
        for (int kk = 0; kk < K; ++kk) G[Lay.time_w + f * K + kk] = c.time_gain * db * k.time_feat[kk];
    }
    return g;
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<int> ddim_timesteps(int total_steps, int steps) {
    if (steps < 0 || steps > total_steps)
        throw Error(ErrorCode::TimestepOutOfRange, "sampler steps must lie in [0, T]");
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) ts.push_back(total_steps - (i * total_steps) / steps);
    return ts;
}

Tensor initial_noise(LatentShape shape, std::uint64_t seed) {
    Rng rng(seed);
    return gaussian_tensor(shape.channels, shape.height, shape.width, rng);
}

Tensor sample_from(const DiffusionBackend& model, Tensor z, const Tensor& prompt, int steps, const StepHook& hook) {
    const auto& schedule = model.schedule();
    const auto ts = ddim_timesteps(schedule.steps(), steps);
    const auto shape = model.latent_shape();
    if (z.channels() != shape.channels || z.height() != shape.height || z.width() != shape.width)
        throw Error(ErrorCode::ShapeMismatch, "initial latent does not match the model");
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_next = i + 1 < ts.size() ? ts[i + 1] : 0;
        const auto out = model.denoise(z, t, prompt);
        const double ab = schedule.alpha_bar(t);
        const double ab_next = schedule.alpha_bar(t_next);
        const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        const double sa_next = std::sqrt(ab_next), sn_next = std::sqrt(1.0 - ab_next);
        for (std::size_t e = 0; e < z.size(); ++e) {
            const double x0 = (z[e] - sn * out.eps_hat[e]) / sa;
            z[e] = sa_next * x0 + sn_next * out.eps_hat[e];
        }
        if (hook) hook(z, t_next);
    }
    return z;
}

Tensor sample(const DiffusionBackend& model, LatentShape shape, const Tensor& prompt, int steps, std::uint64_t seed,
              const StepHook& hook) {
    if (steps > model.schedule().steps() || steps < 0)
        throw Error(ErrorCode::TimestepOutOfRange, "sampler steps must lie in [0, T]");
    return sample_from(model, initial_noise(shape, seed), prompt, steps, hook);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'P', 'C', 'K', 'P', 'T', '\0', '\1'};

void write_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        const int ch = is.get();
        if (ch == std::char_traits<char>::eof()) throw Error(ErrorCode::IoError, "truncated checkpoint");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(ch)) << (8 * i);
    }
    return v;
}

void write_doubles(std::ostream& os, std::span<const double> values) {
    for (double v : values) write_u64(os, std::bit_cast<std::uint64_t>(v));
}

std::vector<double> read_doubles(std::istream& is, std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = std::bit_cast<double>(read_u64(is));
    return out;
}

}  // namespace

nlohmann::json to_json(const ToyConfig& c) {
    return {{"latent_channels", c.latent_channels}, {"latent_height", c.latent_height},
            {"latent_width", c.latent_width},       {"features", c.features},
            {"key_dim", c.key_dim},                 {"embed_dim", c.embed_dim},
            {"time_features", c.time_features},     {"conv_gain", c.conv_gain},
            {"time_gain", c.time_gain},             {"query_gain", c.query_gain},
            {"key_gain", c.key_gain},               {"value_gain", c.value_gain},
            {"out_gain", c.out_gain},               {"position_gain", c.position_gain},
            {"skip_gain", c.skip_gain}};
}

ToyConfig toy_config_from_json(const nlohmann::json& j) {
    ToyConfig c;
    c.latent_channels = j.at("latent_channels");
    c.latent_height = j.at("latent_height");
    c.latent_width = j.at("latent_width");
    c.features = j.at("features");
    c.key_dim = j.at("key_dim");
    c.embed_dim = j.at("embed_dim");
    c.time_features = j.at("time_features");
    c.conv_gain = j.at("conv_gain");
    c.time_gain = j.at("time_gain");
    c.query_gain = j.at("query_gain");
    c.key_gain = j.at("key_gain");
    c.value_gain = j.at("value_gain");
    c.out_gain = j.at("out_gain");
    c.position_gain = j.at("position_gain");
    c.skip_gain = j.at("skip_gain");
    return c;
}

void save_checkpoint(const ToyModel& model, const std::filesystem::path& path) {
    const auto& sched = model.schedule();
    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["config"] = to_json(model.config());
    // Schedule endpoints are written as raw bits so the rebuilt schedule is
    // bit-identical.
    header["schedule"] = {{"steps", sched.steps()},
                          {"beta_start_bits", std::bit_cast<std::uint64_t>(sched.beta_start())},
                          {"beta_end_bits", std::bit_cast<std::uint64_t>(sched.beta_end())}};
    header["param_count"] = model.params().size();
    header["embed_dim"] = model.embeddings().dim();
    auto& base = header["base_tokens"] = nlohmann::json::array();
    for (const auto& [tok, _] : model.embeddings().base_entries()) base.push_back(tok);
    auto& handles = header["handle_tokens"] = nlohmann::json::array();
    for (const auto& [tok, _] : model.embeddings().handle_entries()) handles.push_back(tok);
    const std::string text = header.dump();

    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
        os.write(kMagic, sizeof kMagic);
        write_u64(os, kCheckpointVersion);
        write_u64(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        write_doubles(os, model.params());
        for (const auto& [_, v] : model.embeddings().base_entries()) write_doubles(os, v);
        for (const auto& [_, v] : model.embeddings().handle_entries()) write_doubles(os, v);
        if (!os) throw Error(ErrorCode::IoError, "failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

ToyModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::IoError, "cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw Error(ErrorCode::CorruptDocument, path.string() + " is not a checkpoint");
    const auto version = read_u64(is);
    if (version != kCheckpointVersion)
        throw Error(ErrorCode::SchemaVersionMismatch, "checkpoint version " + std::to_string(version));
    const auto len = read_u64(is);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw Error(ErrorCode::IoError, "truncated checkpoint header");
    try {
        const auto header = nlohmann::json::parse(text);
        const auto config = toy_config_from_json(header.at("config"));
        const auto& s = header.at("schedule");
        auto schedule = NoiseSchedule::linear(s.at("steps").get<int>(),
                                              std::bit_cast<double>(s.at("beta_start_bits").get<std::uint64_t>()),
                                              std::bit_cast<double>(s.at("beta_end_bits").get<std::uint64_t>()));
        const int dim = header.at("embed_dim").get<int>();
        ToyModel model(config, std::move(schedule), EmbeddingTable(dim));
        const auto count = header.at("param_count").get<std::size_t>();
        if (count != model.params().size()) throw Error(ErrorCode::CorruptDocument, "parameter count mismatch");
        auto params = read_doubles(is, count);
        std::copy(params.begin(), params.end(), model.mutable_params().begin());
        auto& table = model.mutable_embeddings();
        for (const auto& tok : header.at("base_tokens")) table.set_base(tok.get<std::string>(), read_doubles(is, dim));
        for (const auto& tok : header.at("handle_tokens"))
            table.set_handle(tok.get<std::string>(), read_doubles(is, dim));
        return model;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::CorruptDocument, ex.what());
    }
}

}  // namespace scenepainter::diffusion
