#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "testutil.hpp"
#include "uimm/uap.hpp"

namespace fs = std::filesystem;

namespace {

uimm::ToyLdmBundleT<float> make_bundle() {
    auto bundle = uimm::ToyLdmBundleT<float>::init(testutil::tiny_hp<uimm::ModelHp>());
    uimm::Rng rng(777);
    for (auto& block : bundle.denoiser.blocks) block.wca.fill_uniform(rng, -0.3f, 0.3f);
    bundle.set_trainable(false);
    return bundle;
}

std::vector<uimm::TrainSample> make_samples(int n, int size, uint64_t seed) {
    std::vector<uimm::TrainSample> out;
    uimm::Rng rng(seed);
    const char* prompts[] = {"red circle", "blue square", "green triangle"};
    for (int i = 0; i < n; ++i) {
        uimm::TrainSample s;
        s.image = uimm::Tensor::zeros({3, size, size});
        s.image.fill_uniform(rng, 0.05f, 0.95f);
        s.prompt = prompts[i % 3];
        out.push_back(std::move(s));
    }
    return out;
}

uimm::Tensor make_target(int size, uint64_t seed) {
    uimm::Rng rng(seed);
    uimm::Tensor t = uimm::Tensor::zeros({3, size, size});
    t.fill_uniform(rng, 0.1f, 0.9f);
    return t;
}

uimm::UapConfig small_cfg() {
    uimm::UapConfig cfg;
    cfg.timesteps = {2, 5};
    cfg.epochs = 2;
    cfg.target_prompt = "blue square";
    cfg.seed = 9;
    return cfg;
}

}  // namespace

TEST_CASE("uap config validation", "[uap]") {
    const int k_max = 10;
    uimm::UapConfig cfg = small_cfg();
    REQUIRE_NOTHROW(cfg.validate(k_max));

    auto expect_reject = [&](auto mutate) {
        uimm::UapConfig c = small_cfg();
        mutate(c);
        REQUIRE_THROWS_AS(c.validate(k_max), uimm::ConfigError);
    };
    expect_reject([](uimm::UapConfig& c) { c.epsilon = 0.0; });
    expect_reject([](uimm::UapConfig& c) { c.epsilon = 1.5; });
    expect_reject([](uimm::UapConfig& c) { c.step_size = 0.0; });
    expect_reject([](uimm::UapConfig& c) { c.epochs = -1; });
    expect_reject([](uimm::UapConfig& c) { c.batch = 0; });
    expect_reject([](uimm::UapConfig& c) { c.noise_space = "fourier"; });
    expect_reject([](uimm::UapConfig& c) { c.timesteps = {}; });
    expect_reject([](uimm::UapConfig& c) { c.timesteps = {0}; });
    expect_reject([](uimm::UapConfig& c) { c.timesteps = {11}; });
    expect_reject([](uimm::UapConfig& c) { c.target_prompt.clear(); });  // InjPlusSup needs it

    // Sup alone needs no target prompt.
    uimm::UapConfig sup = small_cfg();
    sup.loss = uimm::LossKind::Sup;
    sup.target_prompt.clear();
    REQUIRE_NOTHROW(sup.validate(k_max));

    // Zero epochs keeps the seeded init (the noise-control arm); the loss is
    // never evaluated, so loss-dependent requirements do not bind.
    uimm::UapConfig zero = small_cfg();
    zero.epochs = 0;
    zero.target_prompt.clear();
    zero.timesteps.clear();
    REQUIRE_NOTHROW(zero.validate(k_max));
}

TEST_CASE("uap training respects the budget at every update", "[uap]") {
    auto bundle = make_bundle();
    auto samples = make_samples(3, bundle.hp.image_size, 21);
    auto target = make_target(bundle.hp.image_size, 22);
    uimm::UapConfig cfg = small_cfg();

    int updates = 0;
    auto art = uimm::train_uap(bundle, samples, target, cfg, [&](const uimm::UapUpdateInfo& info,
                                                                 const uimm::Tensor& delta) {
        ++updates;
        REQUIRE(std::isfinite(info.loss));
        float max_abs = 0.0f;
        for (int64_t i = 0; i < delta.numel(); ++i) max_abs = std::max(max_abs, std::abs(delta.data()[i]));
        REQUIRE(max_abs <= static_cast<float>(cfg.epsilon) + 1e-7f);
    });
    REQUIRE(updates == cfg.epochs * static_cast<int>(samples.size()));
    REQUIRE(art.epoch_losses.size() == static_cast<size_t>(cfg.epochs));
    for (double l : art.epoch_losses) REQUIRE(std::isfinite(l));
    REQUIRE(art.bundle_hash == bundle.weights_hash());
    REQUIRE_FALSE(art.data_free);

    // The perturbation moved away from its uniform init.
    uimm::Tensor init = uimm::Tensor::zeros(art.delta.shape());
    uimm::Rng init_rng(uimm::mix_seed(cfg.seed, 0xD317Aull));
    init.fill_uniform(init_rng, static_cast<float>(-cfg.epsilon), static_cast<float>(cfg.epsilon));
    REQUIRE(art.delta.vec() != init.vec());
}

TEST_CASE("uap training is deterministic in the seed", "[uap]") {
    auto bundle = make_bundle();
    auto samples = make_samples(2, bundle.hp.image_size, 31);
    auto target = make_target(bundle.hp.image_size, 32);
    uimm::UapConfig cfg = small_cfg();

    auto a = uimm::train_uap(bundle, samples, target, cfg);
    auto b = uimm::train_uap(bundle, samples, target, cfg);
    REQUIRE(a.delta.vec() == b.delta.vec());
    REQUIRE(a.epoch_losses == b.epoch_losses);

    cfg.seed = 10;
    auto c = uimm::train_uap(bundle, samples, target, cfg);
    REQUIRE(a.delta.vec() != c.delta.vec());
}

TEST_CASE("noise spaces give different but valid perturbations", "[uap]") {
    auto bundle = make_bundle();
    auto samples = make_samples(2, bundle.hp.image_size, 41);
    auto target = make_target(bundle.hp.image_size, 42);
    uimm::UapConfig cfg = small_cfg();

    auto latent = uimm::train_uap(bundle, samples, target, cfg);
    cfg.noise_space = "pixel";
    auto pixel = uimm::train_uap(bundle, samples, target, cfg);
    REQUIRE(latent.delta.vec() != pixel.delta.vec());
    REQUIRE(testutil::all_finite_t(pixel.delta));
}

TEST_CASE("batch accumulation changes the update cadence", "[uap]") {
    auto bundle = make_bundle();
    auto samples = make_samples(4, bundle.hp.image_size, 51);
    auto target = make_target(bundle.hp.image_size, 52);
    uimm::UapConfig cfg = small_cfg();
    cfg.epochs = 1;

    int updates_b1 = 0;
    auto a = uimm::train_uap(bundle, samples, target, cfg,
                             [&](const uimm::UapUpdateInfo&, const uimm::Tensor&) { ++updates_b1; });
    cfg.batch = 2;
    int updates_b2 = 0;
    auto b = uimm::train_uap(bundle, samples, target, cfg,
                             [&](const uimm::UapUpdateInfo&, const uimm::Tensor&) { ++updates_b2; });
    REQUIRE(updates_b1 == 4);
    REQUIRE(updates_b2 == 2);
    REQUIRE(a.delta.vec() != b.delta.vec());
}

TEST_CASE("encoder baseline trains without a timestep loop", "[uap]") {
    auto bundle = make_bundle();
    auto samples = make_samples(2, bundle.hp.image_size, 61);
    auto target = make_target(bundle.hp.image_size, 62);
    uimm::UapConfig cfg = small_cfg();
    cfg.loss = uimm::LossKind::EncoderBaseline;
    cfg.target_prompt.clear();  // encoder attack needs the image, not the prompt

    auto art = uimm::train_uap(bundle, samples, target, cfg);
    REQUIRE(art.epoch_losses.size() == 2);
    // Pulling the latent toward a fixed target must reduce the latent MSE.
    REQUIRE(art.epoch_losses.back() < art.epoch_losses.front());
}

TEST_CASE("training input validation", "[uap]") {
    auto bundle = make_bundle();
    auto target = make_target(bundle.hp.image_size, 71);
    uimm::UapConfig cfg = small_cfg();

    REQUIRE_THROWS_AS(uimm::train_uap(bundle, {}, target, cfg), uimm::UsageError);

    auto bad_size = make_samples(1, bundle.hp.image_size + 4, 72);
    REQUIRE_THROWS_AS(uimm::train_uap(bundle, bad_size, target, cfg), uimm::ShapeError);

    auto no_prompt = make_samples(1, bundle.hp.image_size, 73);
    no_prompt[0].prompt.clear();
    REQUIRE_THROWS_AS(uimm::train_uap(bundle, no_prompt, target, cfg), uimm::UsageError);

    auto ok = make_samples(1, bundle.hp.image_size, 74);
    auto bad_target = make_target(bundle.hp.image_size + 4, 75);
    REQUIRE_THROWS_AS(uimm::train_uap(bundle, ok, bad_target, cfg), uimm::ShapeError);
}

TEST_CASE("data-free training rejects suppression losses and stays in budget", "[uap]") {
    auto bundle = make_bundle();
    auto target = make_target(bundle.hp.image_size, 81);
    uimm::UapConfig cfg = small_cfg();
    cfg.loss = uimm::LossKind::Inj;
    uimm::DataFreeConfig df;
    df.samples_per_epoch = 3;

    for (uimm::LossKind bad : {uimm::LossKind::Sup, uimm::LossKind::InjPlusSup, uimm::LossKind::MapSup,
                               uimm::LossKind::EmbeddingBaseline}) {
        uimm::UapConfig c = cfg;
        c.loss = bad;
        REQUIRE_THROWS_AS(uimm::train_uap_data_free(bundle, target, c, df), uimm::ConfigError);
    }
    uimm::DataFreeConfig bad_df;
    bad_df.prior = "perlin";
    REQUIRE_THROWS_AS(uimm::train_uap_data_free(bundle, target, cfg, bad_df), uimm::ConfigError);

    int updates = 0;
    auto art = uimm::train_uap_data_free(bundle, target, cfg, df, [&](const uimm::UapUpdateInfo&,
                                                                      const uimm::Tensor& delta) {
        ++updates;
        for (int64_t i = 0; i < delta.numel(); ++i) {
            REQUIRE(std::abs(delta.data()[i]) <= static_cast<float>(cfg.epsilon) + 1e-7f);
        }
    });
    REQUIRE(updates == cfg.epochs * df.samples_per_epoch);
    REQUIRE(art.data_free);
    REQUIRE(art.prior == "jigsaw");

    // Deterministic; and the gaussian prior is a distinct but valid path.
    auto art2 = uimm::train_uap_data_free(bundle, target, cfg, df);
    REQUIRE(art.delta.vec() == art2.delta.vec());

    uimm::DataFreeConfig gauss = df;
    gauss.prior = "gaussian";
    auto art3 = uimm::train_uap_data_free(bundle, target, cfg, gauss);
    REQUIRE(art3.prior == "gaussian");
    REQUIRE(art.delta.vec() != art3.delta.vec());
}

TEST_CASE("immunization clamps and resizes", "[uap]") {
    uimm::Rng rng(91);
    uimm::Tensor x = uimm::Tensor::zeros({3, 12, 12});
    x.fill_uniform(rng, 0.0f, 1.0f);

    SECTION("zero perturbation is the identity") {
        uimm::Tensor zero = uimm::Tensor::zeros({3, 12, 12});
        auto out = uimm::immunize_image(x, zero);
        REQUIRE(out.vec() == x.vec());
    }
    SECTION("result stays in range and perturbation sticks") {
        uimm::Tensor delta = uimm::Tensor::zeros({3, 12, 12});
        delta.fill_uniform(rng, -0.2f, 0.2f);
        auto out = uimm::immunize_image(x, delta);
        bool any_change = false;
        for (int64_t i = 0; i < out.numel(); ++i) {
            REQUIRE(out.data()[i] >= 0.0f);
            REQUIRE(out.data()[i] <= 1.0f);
            if (out.data()[i] != x.data()[i]) any_change = true;
        }
        REQUIRE(any_change);
    }
    SECTION("size mismatch resizes nearest-neighbor") {
        uimm::Tensor small = uimm::Tensor::zeros({3, 6, 6});
        small.fill_uniform(rng, -0.1f, 0.1f);
        auto out = uimm::immunize_image(x, small);
        REQUIRE(out.shape() == x.shape());
    }
}

TEST_CASE("nearest-neighbor resize maps exact source pixels", "[uap]") {
    uimm::Tensor t = uimm::Tensor::from_data({1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    auto up = uimm::resize_nearest(t, 4, 4);
    REQUIRE(up.shape() == std::vector<int>{1, 4, 4});
    // Each source pixel becomes a 2x2 block.
    const float expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (int i = 0; i < 16; ++i) REQUIRE(up.data()[i] == expect[i]);

    auto same = uimm::resize_nearest(t, 2, 2);
    REQUIRE(same.vec() == t.vec());
}

TEST_CASE("uap artifact round-trip and integrity checks", "[uap]") {
    const fs::path dir = fs::temp_directory_path() / "uimm_uap_test";
    fs::create_directories(dir);

    auto bundle = make_bundle();
    auto samples = make_samples(1, bundle.hp.image_size, 101);
    auto target = make_target(bundle.hp.image_size, 102);
    uimm::UapConfig cfg = small_cfg();
    cfg.epochs = 1;
    auto art = uimm::train_uap(bundle, samples, target, cfg);

    const std::string path = (dir / "delta.uit1").string();
    uimm::save_uap(path, art);
    auto back = uimm::load_uap(path);
    REQUIRE(back.delta.vec() == art.delta.vec());
    REQUIRE(back.config.epsilon == art.config.epsilon);
    REQUIRE(back.config.timesteps == art.config.timesteps);
    REQUIRE(back.config.loss == art.config.loss);
    REQUIRE(back.config.target_prompt == art.config.target_prompt);
    REQUIRE(back.bundle_hash == art.bundle_hash);
    REQUIRE(back.epoch_losses == art.epoch_losses);

    SECTION("missing sidecar") {
        fs::remove(path + ".json");
        REQUIRE_THROWS_AS(uimm::load_uap(path), uimm::IoError);
    }
    SECTION("out-of-budget perturbation is rejected") {
        uimm::UapArtifact evil = art;
        evil.delta = art.delta.clone();
        evil.delta.data()[0] = 0.5f;  // way beyond 10/255
        const std::string epath = (dir / "evil.uit1").string();
        uimm::save_uap(epath, evil);
        REQUIRE_THROWS_AS(uimm::load_uap(epath), uimm::IoError);
    }
}

TEST_CASE("zero-epoch training keeps the seeded uniform initialization", "[uap]") {
    const auto hp = testutil::tiny_hp<uimm::ModelHp>();
    auto bundle = uimm::ToyLdmBundleT<float>::init(hp);

    uimm::UapConfig cfg;  // no target prompt, no timesteps needed
    cfg.epochs = 0;
    cfg.seed = 31337;

    // Needs neither samples nor a target image: nothing is ever evaluated.
    auto art = uimm::train_uap(bundle, {}, uimm::Tensor{}, cfg);
    REQUIRE(art.epoch_losses.empty());
    REQUIRE(art.delta.shape() == std::vector<int>{3, hp.image_size, hp.image_size});

    // The perturbation is exactly the documented seeded uniform draw.
    uimm::Tensor expect = uimm::Tensor::zeros({3, hp.image_size, hp.image_size});
    {
        uimm::Rng rng(uimm::mix_seed(cfg.seed, 0xD317Aull));
        expect.fill_uniform(rng, static_cast<float>(-cfg.epsilon), static_cast<float>(cfg.epsilon));
    }
    REQUIRE(art.delta.vec() == expect.vec());

    // The data-free entry point honours the same contract (it still refuses
    // suppression losses outright, so ask for a pure injection one).
    uimm::UapConfig cfg_df = cfg;
    cfg_df.loss = uimm::LossKind::Inj;
    uimm::DataFreeConfig df;
    auto art_df = uimm::train_uap_data_free(bundle, uimm::Tensor{}, cfg_df, df);
    REQUIRE(art_df.delta.vec() == expect.vec());
    REQUIRE(art_df.data_free);

    // And the budget invariant still holds at initialization.
    for (float v : art.delta.vec()) REQUIRE(std::abs(v) <= static_cast<float>(cfg.epsilon));
}
