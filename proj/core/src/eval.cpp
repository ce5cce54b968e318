#include "scenepainter/eval.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"
#include "scenepainter/image_io.hpp"

namespace scenepainter::eval {

namespace {

std::vector<double> normalized(std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorCode::InvalidConfig, "embedding has no direction");
    for (double& x : v) x /= n;
    return v;
}

}  // namespace

std::vector<double> ToyEmbedder::embed(const Image& image) const {
    if (image.empty()) throw Error(ErrorCode::EmptyImage, "cannot embed an empty image");
    const int H = image.height(), W = image.width();
    const std::size_t plane = image.plane_size();
    constexpr int kGrid = 4, kBins = 4;
    std::vector<double> v(kGrid * kGrid * 3 + 3 * kBins, 0.0);
    std::vector<double> counts(kGrid * kGrid, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int cell = (y * kGrid / H) * kGrid + x * kGrid / W;
            counts[cell] += 1.0;
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            for (int c = 0; c < 3; ++c) {
                const double px = image[c * plane + i] / 255.0;
                v[cell * 3 + c] += px;
                v[kGrid * kGrid * 3 + c * kBins + std::min(kBins - 1, image[c * plane + i] * kBins / 256)] +=
                    1.0 / static_cast<double>(plane);
            }
        }
    for (int cell = 0; cell < kGrid * kGrid; ++cell)
        for (int c = 0; c < 3; ++c)
            if (counts[cell] > 0) v[cell * 3 + c] /= counts[cell];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double& x : v) x -= mean;
    // A constant image centres to zero; fall back to a fixed direction.
    double n = 0.0;
    for (double x : v) n += x * x;
    if (n < 1e-24) {
        std::fill(v.begin(), v.end(), 0.0);
        v[0] = 1.0;
    }
    return normalized(std::move(v));
}

std::vector<double> CommandEmbedder::embed(const Image& image) const {
    if (command_.empty()) throw Error(ErrorCode::InvalidConfig, "adapter embedder needs a command");
    char tmpl[] = "/tmp/scenepainter-embed-XXXXXX";
    const int fd = ::mkstemp(tmpl);
    if (fd < 0) throw Error(ErrorCode::IoError, "cannot create a temporary file");
    ::close(fd);
    const std::filesystem::path png = std::string(tmpl) + ".png";
    std::filesystem::rename(tmpl, png);
    write_png(image, png);
    const std::string cmd = command_ + " '" + png.string() + "'";
    std::string out;
    if (FILE* p = ::popen(cmd.c_str(), "r")) {
        char buf[4096];
        std::size_t n;
        while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) out.append(buf, n);
        const int status = ::pclose(p);
        std::filesystem::remove(png);
        if (status != 0) throw Error(ErrorCode::IoError, "embedder command failed: " + command_);
    } else {
        std::filesystem::remove(png);
        throw Error(ErrorCode::IoError, "cannot run embedder command: " + command_);
    }
    std::istringstream is(out);
    std::vector<double> v;
    for (double x; is >> x;) v.push_back(x);
    if (v.empty()) throw Error(ErrorCode::IoError, "embedder command printed no numbers");
    return normalized(std::move(v));
}

std::unique_ptr<EmbeddingBackend> make_embedder(const std::string& name, const std::string& command) {
    if (name == "toy") return std::make_unique<ToyEmbedder>();
    if (name == "adapter") return std::make_unique<CommandEmbedder>(command);
    throw Error(ErrorCode::InvalidConfig, "unknown embedder '" + name + "'");
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "embedding sizes differ");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double c = dot / std::sqrt(na * nb);
    return std::clamp(c, -1.0, 1.0);
}

FidelityReport scene_fidelity_report(const Image& initial, const std::vector<Image>& generated,
                                     const EmbeddingBackend& backend, FidelityMode mode) {
    if (generated.empty()) throw Error(ErrorCode::EmptySet, "no generated images to score");
    FidelityReport r;
    r.backend_id = backend.id();
    r.mode = mode;
    std::vector<std::vector<double>> emb;
    emb.reserve(generated.size());
    for (const auto& g : generated) emb.push_back(backend.embed(g));
    double sum = 0.0;
    if (mode == FidelityMode::InitialVsEach) {
        const auto e0 = backend.embed(initial);
        for (const auto& e : emb) {
            r.per_image.push_back(cosine(e0, e));
            sum += r.per_image.back();
        }
        r.metric = sum / static_cast<double>(emb.size());
    } else {
        if (emb.size() < 2) throw Error(ErrorCode::EmptySet, "all-pairs mode needs at least two images");
        std::size_t pairs = 0;
        r.per_image.assign(emb.size(), 0.0);
        for (std::size_t i = 0; i < emb.size(); ++i)
            for (std::size_t j = i + 1; j < emb.size(); ++j) {
                const double c = cosine(emb[i], emb[j]);
                sum += c;
                r.per_image[i] += c / static_cast<double>(emb.size() - 1);
                r.per_image[j] += c / static_cast<double>(emb.size() - 1);
                ++pairs;
            }
        r.metric = sum / static_cast<double>(pairs);
    }
    return r;
}

double scene_fidelity(const Image& initial, const std::vector<Image>& generated, const EmbeddingBackend& backend,
                      FidelityMode mode) {
    return scene_fidelity_report(initial, generated, backend, mode).metric;
}

nlohmann::json to_json(const FidelityReport& r) {
    return {{"metric", r.metric},
            {"per_image", r.per_image},
            {"backend_id", r.backend_id},
            {"mode", r.mode == FidelityMode::InitialVsEach ? "initial_vs_each" : "all_pairs"}};
}

}  // namespace scenepainter::eval
