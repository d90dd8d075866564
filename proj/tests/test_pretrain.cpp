#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "testutil.hpp"
#include "uimm/metrics.hpp"
#include "uimm/pretrain.hpp"

namespace {

uimm::ToyLdmBundleT<float> fresh_bundle() {
    return uimm::ToyLdmBundleT<float>::init(testutil::tiny_hp<uimm::ModelHp>());
}

std::vector<uimm::TrainSample> toy_dataset(int n, int size, uint64_t seed) {
    // Structured images (not pure noise) so reconstruction and denoising have
    // learnable regularity: vertical two-tone gradients keyed by the prompt.
    std::vector<uimm::TrainSample> out;
    uimm::Rng rng(seed);
    const char* prompts[] = {"red circle", "blue square"};
    for (int i = 0; i < n; ++i) {
        uimm::TrainSample s;
        s.image = uimm::Tensor::zeros({3, size, size});
        const float base = uimm::uniform<float>(rng, 0.2f, 0.8f);
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    const float v = base + 0.3f * (static_cast<float>(y) / size) * ((c == i % 3) ? 1.0f : -0.5f);
                    s.image.data()[(c * size + y) * size + x] = std::clamp(v, 0.0f, 1.0f);
                }
            }
        }
        s.prompt = prompts[i % 2];
        out.push_back(std::move(s));
    }
    return out;
}

double mean_of(const std::vector<double>& v, size_t from, size_t to) {
    return std::accumulate(v.begin() + from, v.begin() + to, 0.0) / static_cast<double>(to - from);
}

double vae_roundtrip_psnr(const uimm::ToyLdmBundleT<float>& bundle, const std::vector<uimm::TrainSample>& samples) {
    uimm::Tape tape;
    tape.set_recording(false);
    double total = 0.0;
    for (const auto& s : samples) {
        auto recon = bundle.vae.decode(tape, bundle.vae.encode(tape, s.image));
        total += uimm::psnr(recon, s.image);
    }
    return total / static_cast<double>(samples.size());
}

}  // namespace

TEST_CASE("pretrain config validation", "[pretrain]") {
    uimm::PretrainConfig cfg;
    REQUIRE_NOTHROW(cfg.validate());
    auto reject = [](auto mutate) {
        uimm::PretrainConfig c;
        mutate(c);
        REQUIRE_THROWS_AS(c.validate(), uimm::ConfigError);
    };
    reject([](uimm::PretrainConfig& c) { c.vae_steps = -1; });
    reject([](uimm::PretrainConfig& c) { c.batch = 0; });
    reject([](uimm::PretrainConfig& c) { c.vae_lr = -0.1; });
    reject([](uimm::PretrainConfig& c) { c.prompt_dropout = 1.5; });
}

TEST_CASE("zero learning rate leaves weights untouched", "[pretrain]") {
    auto bundle = fresh_bundle();
    const std::string before = bundle.weights_hash();
    auto samples = toy_dataset(4, bundle.hp.image_size, 1);

    uimm::PretrainConfig cfg;
    cfg.vae_steps = 3;
    cfg.denoiser_steps = 3;
    cfg.batch = 2;
    cfg.vae_lr = 0.0;
    cfg.denoiser_lr = 0.0;
    auto result = uimm::pretrain_toy(bundle, samples, cfg);

    REQUIRE(bundle.weights_hash() == before);
    REQUIRE(result.vae_losses.size() == 3);
    REQUIRE(result.denoiser_losses.size() == 3);
}

TEST_CASE("pretraining is deterministic and reduces both losses", "[pretrain]") {
    auto samples = toy_dataset(6, 8, 2);

    uimm::PretrainConfig cfg;
    cfg.vae_steps = 120;
    cfg.denoiser_steps = 120;
    cfg.batch = 2;
    cfg.seed = 5;

    auto bundle_a = fresh_bundle();
    const double psnr_before = vae_roundtrip_psnr(bundle_a, samples);
    const double eval_before = uimm::denoiser_eval_loss(bundle_a, samples, 24, 99);
    auto result_a = uimm::pretrain_toy(bundle_a, samples, cfg);

    auto bundle_b = fresh_bundle();
    auto result_b = uimm::pretrain_toy(bundle_b, samples, cfg);
    REQUIRE(bundle_a.weights_hash() == bundle_b.weights_hash());
    REQUIRE(result_a.vae_losses == result_b.vae_losses);
    REQUIRE(result_a.denoiser_losses == result_b.denoiser_losses);

    // Optimization made progress front-to-back.
    const size_t n = result_a.vae_losses.size();
    REQUIRE(mean_of(result_a.vae_losses, n - n / 4, n) < mean_of(result_a.vae_losses, 0, n / 4));
    const size_t m = result_a.denoiser_losses.size();
    REQUIRE(mean_of(result_a.denoiser_losses, m - m / 4, m) < mean_of(result_a.denoiser_losses, 0, m / 4));

    // Held-out behavior improved too, on draws never used in training.
    const double eval_after = uimm::denoiser_eval_loss(bundle_a, samples, 24, 99);
    REQUIRE(eval_after < eval_before);
    const double psnr_after = vae_roundtrip_psnr(bundle_a, samples);
    REQUIRE(psnr_after > psnr_before);

    // Everything ends frozen and finite.
    for (auto& p : bundle_a.vae_params()) REQUIRE_FALSE(p.requires_grad());
    for (auto& p : bundle_a.denoiser_params()) REQUIRE_FALSE(p.requires_grad());
    for (const auto& [name, t] : bundle_a.named_tensors()) REQUIRE(testutil::all_finite_t(t));
}

TEST_CASE("pretrain rejects wrong-size samples", "[pretrain]") {
    auto bundle = fresh_bundle();
    auto samples = toy_dataset(2, bundle.hp.image_size + 4, 3);
    uimm::PretrainConfig cfg;
    REQUIRE_THROWS_AS(uimm::pretrain_toy(bundle, samples, cfg), uimm::ShapeError);
    REQUIRE_THROWS_AS(uimm::pretrain_toy(bundle, {}, cfg), uimm::UsageError);
}
