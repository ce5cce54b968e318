#include <doctest.h>

#include "scenepainter/error.hpp"
#include "scenepainter/outpaint.hpp"
#include "test_support.hpp"

using namespace scenepainter;
using namespace scenepainter::outpaint;

namespace {

struct Stack {
    graph::SceneConceptGraph graph = sptest::sky_ground_graph(16, 16);
    std::shared_ptr<diffusion::ToyModel> model =
        std::make_shared<diffusion::ToyModel>(sptest::perturbed_model(graph, 3, 0.05));
    std::shared_ptr<const diffusion::ToyCodec> codec = std::make_shared<const diffusion::ToyCodec>();
    std::vector<std::string> prompt{"<env>", "<r01>", "<sky>"};
};

OutpaintRequest request(const Image& img, const Mask& fill, std::vector<std::string> prompt, std::uint64_t seed = 5) {
    return {img, fill, std::move(prompt), seed, 20};
}

}  // namespace

TEST_SUITE("outpaint") {

TEST_CASE("mask_to_latent examples") {
    CHECK(mask_to_latent(Mask::ones(16, 16), 4, 4).all_set());
    CHECK(mask_to_latent(Mask::zeros(16, 16), 4, 4).none_set());
    const Mask block = sptest::rect_mask(16, 16, 4, 8, 8, 12);
    const Mask lat = mask_to_latent(block, 4, 4);
    CHECK(lat.popcount() == 1);
    CHECK(lat(1, 2) == 1);
    // Exactly half covered ties toward generating.
    CHECK(mask_to_latent(sptest::rect_mask(4, 4, 0, 0, 2, 4), 1, 1)(0, 0) == 1);
    CHECK(mask_to_latent(sptest::rect_mask(4, 4, 0, 0, 1, 4), 1, 1)(0, 0) == 0);
}

TEST_CASE("property: mask_to_latent is monotone") {
    Rng rng(1);
    for (int trial = 0; trial < 500; ++trial) {
        const Mask a = sptest::random_mask(rng, 16, 16, sptest::uniform_real(rng, 0.0, 1.0));
        const Mask b = a | sptest::random_mask(rng, 16, 16, 0.2);
        CHECK(mask_to_latent(a, 4, 4).subset_of(mask_to_latent(b, 4, 4)));
    }
}

TEST_CASE("nothing to fill returns the input") {
    Stack s;
    Rng rng(2);
    const Image img = sptest::random_image(rng, 16, 16);
    const auto op = to_outpainter(s.model, s.codec);
    CHECK(op.outpaint(request(img, Mask::zeros(16, 16), s.prompt)).image == img);
    const auto raw = to_outpainter(s.model, s.codec, {false, 0.5});
    CHECK(raw.outpaint(request(img, Mask::zeros(16, 16), s.prompt)).image == s.codec->decode(s.codec->encode(img)));
}

TEST_CASE("fully unknown frame is plain sampling") {
    Stack s;
    Rng rng(3);
    const auto op = to_outpainter(s.model, s.codec);
    const auto r = op.outpaint(request(sptest::random_image(rng, 16, 16), Mask::ones(16, 16), s.prompt, 11));
    const Tensor expected = diffusion::sample(*s.model, s.model->latent_shape(), s.model->encode_prompt(s.prompt), 20, 11);
    CHECK(r.latent == expected);
    CHECK(r.image == s.codec->decode(expected));
    try {
        op.outpaint(request(r.image, Mask::ones(16, 16), {}));
        FAIL("expected AllUnknownWithoutPrompt");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::AllUnknownWithoutPrompt);
    }
    CHECK_THROWS_AS(op.outpaint(request(Image(), Mask(), s.prompt)), Error);
}

TEST_CASE("half-frame mask keeps the known half exactly") {
    Stack s;
    Rng rng(4);
    const Image img = sptest::random_image(rng, 16, 16);
    const Mask fill = sptest::bottom_half(16, 16);
    const auto raw = to_outpainter(s.model, s.codec, {false, 0.5});
    const auto r = raw.outpaint(request(img, fill, s.prompt));
    const Tensor known = s.codec->encode(img);
    const Image reference = s.codec->decode(known);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 4; ++x) CHECK(r.latent.at(c, y, x) == known.at(c, y, x));
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 16; ++x) CHECK(r.image.at(c, y, x) == reference.at(c, y, x));
    }
    const auto composite = to_outpainter(s.model, s.codec).outpaint(request(img, fill, s.prompt));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 16; ++x) CHECK(composite.image.at(c, y, x) == img.at(c, y, x));
}

TEST_CASE("property: known pixels survive any mask") {
    Stack s;
    Rng rng(5);
    const auto op = to_outpainter(s.model, s.codec);
    for (int trial = 0; trial < 40; ++trial) {
        const Image img = sptest::random_image(rng, 16, 16);
        Mask fill = sptest::random_mask(rng, 16, 16, sptest::uniform_real(rng, 0.0, 1.0));
        fill[0] = 0;
        const auto r = op.outpaint(request(img, fill, s.prompt, rng()));
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x)
                    if (!fill(y, x)) CHECK(r.image.at(c, y, x) == img.at(c, y, x));
    }
}

TEST_CASE("conversion is stateless and tracks the live weights") {
    Stack s;
    Rng rng(6);
    const Image img = sptest::random_image(rng, 16, 16);
    const Mask fill = sptest::rect_mask(16, 16, 0, 8, 16, 16);
    const auto a = to_outpainter(s.model, s.codec);
    const auto b = to_outpainter(s.model, s.codec);
    const auto before = a.outpaint(request(img, fill, s.prompt));
    CHECK(before.image == b.outpaint(request(img, fill, s.prompt)).image);
    CHECK(before.image == a.outpaint(request(img, fill, s.prompt)).image);

    for (auto& p : s.model->mutable_params()) p *= 1.5;
    const auto after = a.outpaint(request(img, fill, s.prompt));
    CHECK_FALSE(after.latent == before.latent);
    const auto fresh = to_outpainter(std::make_shared<const diffusion::ToyModel>(*s.model), s.codec);
    CHECK(after.latent == fresh.outpaint(request(img, fill, s.prompt)).latent);
    CHECK_FALSE(a.outpaint(request(img, fill, s.prompt, 6)).latent == after.latent);
}

TEST_CASE("blend is idempotent") {
    Rng rng(7);
    const auto schedule = diffusion::NoiseSchedule::linear();
    const Tensor known = sptest::random_tensor(rng, 3, 4, 4);
    const Tensor eps = sptest::random_tensor(rng, 3, 4, 4);
    const Mask fill = sptest::random_mask(rng, 4, 4);
    Tensor z = sptest::random_tensor(rng, 3, 4, 4);
    Outpainter::blend(z, fill, schedule, known, 40, eps);
    const Tensor once = z;
    Outpainter::blend(z, fill, schedule, known, 40, eps);
    CHECK(z == once);
    Outpainter::blend(z, fill, schedule, known, 0, eps);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                if (!fill(y, x)) CHECK(z.at(c, y, x) == known.at(c, y, x));
}

}  // TEST_SUITE
