#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scenepainter/raster.hpp"

namespace scenepainter::eval {

/// Image -> unit-norm vector.
class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    virtual std::vector<double> embed(const Image& image) const = 0;
    virtual std::string id() const = 0;
    /// False when embed() must not be called concurrently.
    virtual bool thread_safe() const { return true; }
};

/// Colour statistics: a 4x4 grid of mean colours plus a 4-bin histogram per
/// channel, centred and normalised.
class ToyEmbedder final : public EmbeddingBackend {
public:
    std::vector<double> embed(const Image& image) const override;
    std::string id() const override { return "toy"; }
};

/// Runs `command <png-path>` and reads whitespace-separated floats from its
/// stdout; the vector is normalised here.
class CommandEmbedder final : public EmbeddingBackend {
public:
    explicit CommandEmbedder(std::string command) : command_(std::move(command)) {}
    std::vector<double> embed(const Image& image) const override;
    std::string id() const override { return "adapter:" + command_; }

private:
    std::string command_;
};

std::unique_ptr<EmbeddingBackend> make_embedder(const std::string& name, const std::string& command = {});

double cosine(const std::vector<double>& a, const std::vector<double>& b);

enum class FidelityMode {
    /// Mean similarity between the initial image and each generated image.
    InitialVsEach,
    /// Mean similarity over all unordered pairs of generated images.
    AllPairs,
};

struct FidelityReport {
    double metric = 0.0;
    std::vector<double> per_image;
    std::string backend_id;
    FidelityMode mode = FidelityMode::InitialVsEach;
};

FidelityReport scene_fidelity_report(const Image& initial, const std::vector<Image>& generated,
                                     const EmbeddingBackend& backend,
                                     FidelityMode mode = FidelityMode::InitialVsEach);

double scene_fidelity(const Image& initial, const std::vector<Image>& generated, const EmbeddingBackend& backend,
                      FidelityMode mode = FidelityMode::InitialVsEach);

nlohmann::json to_json(const FidelityReport& report);

}  // namespace scenepainter::eval
