#include <benchmark/benchmark.h>

#include <random>

#include "scenepainter/customization.hpp"
#include "scenepainter/diffusion.hpp"
#include "scenepainter/geometry.hpp"
#include "scenepainter/outpaint.hpp"
#include "scenepainter/random.hpp"
#include "scenepainter/scene_graph.hpp"

using namespace scenepainter;

namespace {

Mask half_mask(int n, bool top) {
    Mask m(n, n);
    for (int y = top ? 0 : n / 2; y < (top ? n / 2 : n); ++y)
        for (int x = 0; x < n; ++x) m(y, x) = 1;
    return m;
}

Image noise_image(int n, std::uint64_t seed) {
    Rng rng(seed);
    Image img(n, n);
    for (auto& v : img.storage()) v = static_cast<std::uint8_t>(rng() & 0xff);
    return img;
}

struct Stack {
    explicit Stack(int n)
        : graph(graph::build_graph(n, n, {{"sky", graph::Level::Region, half_mask(n, true), {}},
                                          {"ground", graph::Level::Region, half_mask(n, false), {}}})) {
        diffusion::ToyConfig cfg;
        cfg.latent_height = n / 4;
        cfg.latent_width = n / 4;
        model = diffusion::ToyModel::initialized(cfg, diffusion::NoiseSchedule::linear(),
                                                 diffusion::EmbeddingTable::with_base_vocabulary(cfg.embed_dim, 1), 2);
        customization::ensure_handles(model, graph, 3);
    }
    graph::SceneConceptGraph graph;
    diffusion::ToyModel model;
};

void BM_Denoise(benchmark::State& state) {
    const Stack s(static_cast<int>(state.range(0)));
    const auto shape = s.model.latent_shape();
    const Tensor z = diffusion::initial_noise(shape, 4);
    const std::vector<std::string> tokens{"<env>", "<r01>", "<sky>"};
    const Tensor prompt = s.model.encode_prompt(tokens);
    for (auto _ : state) benchmark::DoNotOptimize(s.model.denoise(z, 50, prompt));
}
BENCHMARK(BM_Denoise)->Arg(16)->Arg(64);

void BM_LossWithGrad(benchmark::State& state) {
    const Stack s(static_cast<int>(state.range(0)));
    const diffusion::ToyCodec codec;
    const auto sample = customization::make_sample(s.graph, s.graph.edges().front().id,
                                                   codec.encode(noise_image(static_cast<int>(state.range(0)), 5)));
    const Tensor eps = diffusion::initial_noise(s.model.latent_shape(), 6);
    for (auto _ : state)
        benchmark::DoNotOptimize(customization::loss_total_with_grad(sample, s.model, 50, eps, {}));
}
BENCHMARK(BM_LossWithGrad)->Arg(16)->Arg(64);

void BM_Render(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto cam = geometry::Camera::centered(n, n, n);
    const geometry::PointCloudScene scene(geometry::unproject(noise_image(n, 7), DepthMap(n, n, 1.5), cam));
    const auto view = geometry::make_trajectory(geometry::TrajectoryKind::Recede, 1, 0.1, cam)[1];
    for (auto _ : state) benchmark::DoNotOptimize(geometry::render(scene, view));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(scene.size()));
}
BENCHMARK(BM_Render)->Arg(64)->Arg(256);

void BM_Outpaint(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Stack s(n);
    const auto op = outpaint::to_outpainter(std::make_shared<const diffusion::ToyModel>(s.model),
                                            std::make_shared<const diffusion::ToyCodec>());
    const Image img = noise_image(n, 8);
    const Mask fill = half_mask(n, false);
    for (auto _ : state) benchmark::DoNotOptimize(op.outpaint({img, fill, {"<env>", "<r01>", "<sky>"}, 9, 20}));
}
BENCHMARK(BM_Outpaint)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
