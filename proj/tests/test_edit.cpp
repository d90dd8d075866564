#include <catch2/catch_amalgamated.hpp>

#include "testutil.hpp"
#include "uimm/edit.hpp"

namespace {

uimm::ToyLdmBundleT<float> make_bundle(bool randomize_attn) {
    auto bundle = uimm::ToyLdmBundleT<float>::init(testutil::tiny_hp<uimm::ModelHp>());
    if (randomize_attn) {
        uimm::Rng rng(404);
        for (auto& block : bundle.denoiser.blocks) {
            block.wca.fill_uniform(rng, -0.3f, 0.3f);
        }
    }
    return bundle;
}

uimm::Tensor test_image(int size, uint64_t seed) {
    uimm::Rng rng(seed);
    uimm::Tensor x = uimm::Tensor::zeros({3, size, size});
    x.fill_uniform(rng, 0.05f, 0.95f);
    return x;
}

}  // namespace

TEST_CASE("ddim grid shape and ordering", "[edit]") {
    SECTION("full schedule, one point per step") {
        auto grid = uimm::ddim_grid(40, 50, 50);
        REQUIRE(grid.size() == 40);
        REQUIRE(grid.front() == 40);
        REQUIRE(grid.back() == 1);
        for (size_t i = 1; i < grid.size(); ++i) REQUIRE(grid[i] == grid[i - 1] - 1);
    }
    SECTION("prorated budget") {
        auto grid = uimm::ddim_grid(40, 50, 5);
        REQUIRE(grid.size() <= 5);
        REQUIRE(grid.front() == 40);
        REQUIRE(grid.back() == 1);
        for (size_t i = 1; i < grid.size(); ++i) REQUIRE(grid[i] < grid[i - 1]);
    }
    SECTION("degenerate single step") {
        auto grid = uimm::ddim_grid(1, 50, 50);
        REQUIRE(grid == std::vector<int>{1});
    }
    SECTION("k_start == k_max") {
        auto grid = uimm::ddim_grid(50, 50, 50);
        REQUIRE(grid.size() == 50);
        REQUIRE(grid.front() == 50);
        REQUIRE(grid.back() == 1);
    }
    SECTION("validation") {
        REQUIRE_THROWS_AS(uimm::ddim_grid(0, 50, 50), uimm::UsageError);
        REQUIRE_THROWS_AS(uimm::ddim_grid(51, 50, 50), uimm::UsageError);
        REQUIRE_THROWS_AS(uimm::ddim_grid(10, 50, 0), uimm::UsageError);
    }
}

TEST_CASE("edit parameter validation", "[edit]") {
    auto bundle = make_bundle(false);
    auto x = test_image(bundle.hp.image_size, 1);
    uimm::EditParams p;

    p.strength = -0.1;
    REQUIRE_THROWS_AS(uimm::edit_img2img(bundle, x, "a photo", p, 0), uimm::UsageError);
    p.strength = 1.5;
    REQUIRE_THROWS_AS(uimm::edit_img2img(bundle, x, "a photo", p, 0), uimm::UsageError);
    p.strength = 0.8;
    p.steps = 0;
    REQUIRE_THROWS_AS(uimm::edit_img2img(bundle, x, "a photo", p, 0), uimm::UsageError);
    p.steps = 50;
    p.guidance = std::nan("");
    REQUIRE_THROWS_AS(uimm::edit_img2img(bundle, x, "a photo", p, 0), uimm::UsageError);
}

TEST_CASE("edit is deterministic in the seed", "[edit]") {
    auto bundle = make_bundle(true);
    auto x = test_image(bundle.hp.image_size, 2);
    uimm::EditParams p;
    p.steps = 10;  // tiny model, keep the rollout short

    auto a = uimm::edit_img2img(bundle, x, "a photo of a red circle", p, 123);
    auto b = uimm::edit_img2img(bundle, x, "a photo of a red circle", p, 123);
    REQUIRE(a.vec() == b.vec());

    auto c = uimm::edit_img2img(bundle, x, "a photo of a red circle", p, 124);
    REQUIRE(a.vec() != c.vec());
}

TEST_CASE("edit output is a unit-range image of the input size", "[edit]") {
    auto bundle = make_bundle(true);
    auto x = test_image(bundle.hp.image_size, 3);
    uimm::EditParams p;
    p.steps = 10;
    for (double strength : {0.4, 1.0}) {
        p.strength = strength;
        auto y = uimm::edit_img2img(bundle, x, "a photo of a blue square", p, 7);
        REQUIRE(y.shape() == x.shape());
        REQUIRE(testutil::all_finite_t(y));
        for (int64_t i = 0; i < y.numel(); ++i) {
            REQUIRE(y.data()[i] >= 0.0f);
            REQUIRE(y.data()[i] <= 1.0f);
        }
    }
}

TEST_CASE("zero strength degenerates to the autoencoder round trip", "[edit]") {
    auto bundle = make_bundle(true);
    auto x = test_image(bundle.hp.image_size, 4);
    uimm::EditParams p;
    p.strength = 0.0;

    auto edited = uimm::edit_img2img(bundle, x, "a photo of a green triangle", p, 55);

    uimm::Tape tape;
    tape.set_recording(false);
    auto roundtrip = bundle.vae.decode(tape, bundle.vae.encode(tape, x));
    REQUIRE(edited.vec() == roundtrip.vec());

    // Seed and prompt are irrelevant in the limit case.
    auto edited2 = uimm::edit_img2img(bundle, x, "something else entirely", p, 99);
    REQUIRE(edited.vec() == edited2.vec());
}

TEST_CASE("zero guidance equals a hand-rolled unconditional rollout", "[edit]") {
    auto bundle = make_bundle(true);
    auto x = test_image(bundle.hp.image_size, 5);
    uimm::EditParams p;
    p.strength = 0.5;
    p.guidance = 0.0;
    p.steps = 8;
    const uint64_t seed = 31;

    auto got = uimm::edit_img2img(bundle, x, "a photo of a red circle", p, seed);

    // Reference: identical arithmetic with the conditional branch ignored.
    uimm::Tape tape;
    tape.set_recording(false);
    auto z = bundle.vae.encode(tape, x);
    const int k_start = static_cast<int>(std::ceil(p.strength * bundle.hp.k_max));
    uimm::Rng rng(seed);
    uimm::Tensor eps = uimm::Tensor::zeros(z.shape());
    eps.fill_normal(rng, 0.0f, 1.0f);
    z = uimm::add_noise(tape, bundle.schedule, z, k_start, eps);
    auto uncond = bundle.text.uncond_embedding();
    auto grid = uimm::ddim_grid(k_start, bundle.hp.k_max, p.steps);
    for (size_t i = 0; i < grid.size(); ++i) {
        const int k = grid[i];
        const int k_next = (i + 1 < grid.size()) ? grid[i + 1] : 0;
        auto eps_u = bundle.denoiser.predict_eps(tape, z, k, uncond);
        // guidance 0: eps_hat = 1*eps_u + 0*eps_c, bitwise equal to eps_u.
        const float sa = bundle.schedule.signal_coeff(k);
        const float na = bundle.schedule.noise_coeff(k);
        auto x0_pred = uimm::axpby(tape, 1.0f / sa, z, -na / sa, eps_u);
        z = uimm::axpby(tape, bundle.schedule.signal_coeff(k_next), x0_pred, bundle.schedule.noise_coeff(k_next),
                        eps_u);
    }
    auto expect = bundle.vae.decode(tape, z);
    REQUIRE(got.vec() == expect.vec());
}

TEST_CASE("prompts change the edit once cross-attention is active", "[edit]") {
    auto bundle = make_bundle(true);
    auto x = test_image(bundle.hp.image_size, 6);
    uimm::EditParams p;
    p.steps = 6;

    // Short prompts: the tiny embedder truncates to 4 tokens, so the prompts
    // must differ inside the kept prefix.
    auto a = uimm::edit_img2img(bundle, x, "red circle", p, 17);
    auto b = uimm::edit_img2img(bundle, x, "blue square", p, 17);
    REQUIRE(a.vec() != b.vec());

    // With the output projections zeroed (fresh init), conditioning is inert.
    auto inert = make_bundle(false);
    auto c = uimm::edit_img2img(inert, x, "red circle", p, 17);
    auto d = uimm::edit_img2img(inert, x, "blue square", p, 17);
    REQUIRE(c.vec() == d.vec());
}
