#include <catch2/catch_amalgamated.hpp>

#include "testutil.hpp"
#include "uimm/losses.hpp"

namespace {

template <class T>
struct LossFixture {
    uimm::ToyLdmBundleT<T> bundle;
    uimm::TensorT<T> z_adv_k, z_clean_k, z_tar_k;
    uimm::TensorT<T> src_emb, tar_emb;
    int k = 3;

    explicit LossFixture(uint64_t seed, bool randomize_attn = true) {
        bundle = uimm::ToyLdmBundleT<T>::init(testutil::tiny_hp<uimm::ModelHp>());
        if (randomize_attn) {
            uimm::Rng rng(seed + 1000);
            for (auto& block : bundle.denoiser.blocks) block.wca.fill_uniform(rng, T(-0.3), T(0.3));
        }
        bundle.set_trainable(false);

        uimm::Rng rng(seed);
        const int s = bundle.hp.image_size;
        uimm::TensorT<T> x = uimm::TensorT<T>::zeros({3, s, s});
        x.fill_uniform(rng, T(0.05), T(0.95));
        uimm::TensorT<T> x_tar = uimm::TensorT<T>::zeros({3, s, s});
        x_tar.fill_uniform(rng, T(0.05), T(0.95));
        uimm::TensorT<T> delta = uimm::TensorT<T>::zeros({3, s, s});
        delta.fill_uniform(rng, T(-0.04), T(0.04));

        uimm::TapeT<T> tape;
        tape.set_recording(false);
        uimm::TensorT<T> x_adv = x.clone();
        for (int64_t i = 0; i < x_adv.numel(); ++i) {
            x_adv.data()[i] = std::min(T(1), std::max(T(0), x_adv.data()[i] + delta.data()[i]));
        }
        uimm::TensorT<T> z_adv = bundle.vae.encode(tape, x_adv);
        uimm::TensorT<T> z_clean = bundle.vae.encode(tape, x);
        uimm::TensorT<T> z_tar = bundle.vae.encode(tape, x_tar);

        uimm::TensorT<T> eps = uimm::TensorT<T>::zeros(z_adv.shape());
        eps.fill_normal(rng, T(0), T(1));
        z_adv_k = uimm::add_noise(tape, bundle.schedule, z_adv, k, eps);
        z_clean_k = uimm::add_noise(tape, bundle.schedule, z_clean, k, eps);
        z_tar_k = uimm::add_noise(tape, bundle.schedule, z_tar, k, eps);

        src_emb = bundle.text.embed("red circle");
        tar_emb = bundle.text.embed("blue square");
    }
};

}  // namespace

TEST_CASE("loss kind names parse and round-trip", "[losses]") {
    for (uimm::LossKind k :
         {uimm::LossKind::Inj, uimm::LossKind::Sup, uimm::LossKind::InjPlusSup, uimm::LossKind::MapInj,
          uimm::LossKind::MapSup, uimm::LossKind::MapInjPlusSup, uimm::LossKind::EncoderBaseline,
          uimm::LossKind::EmbeddingBaseline}) {
        REQUIRE(uimm::parse_loss_kind(uimm::loss_kind_name(k)) == k);
    }
    try {
        uimm::parse_loss_kind("nonsense");
        FAIL("expected ConfigError");
    } catch (const uimm::ConfigError& e) {
        REQUIRE(std::string(e.what()).find("inj+sup") != std::string::npos);  // lists valid names
    }
}

TEST_CASE("loss ingredient predicates", "[losses]") {
    using LK = uimm::LossKind;
    REQUIRE(uimm::loss_needs_target(LK::Inj));
    REQUIRE(uimm::loss_needs_target(LK::MapInj));
    REQUIRE(uimm::loss_needs_target(LK::InjPlusSup));
    REQUIRE(uimm::loss_needs_target(LK::EncoderBaseline));
    REQUIRE_FALSE(uimm::loss_needs_target(LK::Sup));
    REQUIRE_FALSE(uimm::loss_needs_target(LK::EmbeddingBaseline));

    REQUIRE(uimm::loss_needs_source(LK::Sup));
    REQUIRE(uimm::loss_needs_source(LK::MapSup));
    REQUIRE(uimm::loss_needs_source(LK::InjPlusSup));
    REQUIRE(uimm::loss_needs_source(LK::EmbeddingBaseline));
    REQUIRE_FALSE(uimm::loss_needs_source(LK::Inj));
    REQUIRE_FALSE(uimm::loss_needs_source(LK::EncoderBaseline));

    REQUIRE(uimm::loss_uses_timesteps(LK::Inj));
    REQUIRE_FALSE(uimm::loss_uses_timesteps(LK::EncoderBaseline));
}

TEST_CASE("missing ingredients are rejected", "[losses]") {
    LossFixture<float> f(41);
    uimm::Tape tape;
    uimm::LossWeights w;
    uimm::Tensor none;

    REQUIRE_THROWS_AS(uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::Inj, w, f.z_adv_k, f.z_clean_k, none,
                                            f.k, f.src_emb, f.tar_emb),
                      uimm::UsageError);
    REQUIRE_THROWS_AS(uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::Sup, w, f.z_adv_k, none, f.z_tar_k,
                                            f.k, uimm::Tensor{}, f.tar_emb),
                      uimm::UsageError);
    REQUIRE_THROWS_AS(uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::EncoderBaseline, w, f.z_adv_k,
                                            f.z_clean_k, f.z_tar_k, f.k, f.src_emb, f.tar_emb),
                      uimm::UsageError);
    REQUIRE_THROWS_AS(uimm::encoder_baseline_loss(tape, f.z_adv_k, none), uimm::UsageError);
}

TEST_CASE("suppression losses vanish exactly at zero perturbation", "[losses]") {
    LossFixture<float> f(42);
    uimm::Tape tape;
    uimm::LossWeights w;

    // Same latent on both branches == unperturbed input under shared noise.
    for (uimm::LossKind kind : {uimm::LossKind::Sup, uimm::LossKind::MapSup, uimm::LossKind::EmbeddingBaseline}) {
        auto loss = uimm::trace_loss_term(tape, f.bundle, kind, w, f.z_clean_k, f.z_clean_k, f.z_tar_k, f.k,
                                          f.src_emb, f.tar_emb);
        REQUIRE(loss.item() == 0.0f);
    }

    // Injection losses vanish exactly when the input already IS the target.
    for (uimm::LossKind kind : {uimm::LossKind::Inj, uimm::LossKind::MapInj}) {
        auto loss = uimm::trace_loss_term(tape, f.bundle, kind, w, f.z_tar_k, f.z_clean_k, f.z_tar_k, f.k,
                                          f.src_emb, f.tar_emb);
        REQUIRE(loss.item() == 0.0f);
    }
}

TEST_CASE("losses are finite, injection positive, suppression non-positive", "[losses]") {
    LossFixture<float> f(43);
    uimm::Tape tape;
    uimm::LossWeights w;

    const float inj = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::Inj, w, f.z_adv_k, f.z_clean_k,
                                            f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                          .item();
    const float sup = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::Sup, w, f.z_adv_k, f.z_clean_k,
                                            f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                          .item();
    REQUIRE(std::isfinite(inj));
    REQUIRE(std::isfinite(sup));
    REQUIRE(inj > 0.0f);
    REQUIRE(sup < 0.0f);  // perturbed differs from clean, so negated MSE is negative

    const float both = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::InjPlusSup, w, f.z_adv_k, f.z_clean_k,
                                             f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                           .item();
    REQUIRE(both == Catch::Approx(inj + sup).epsilon(1e-6));

    uimm::LossWeights w2;
    w2.inj = 2.0;
    w2.sup = 0.5;
    const float weighted = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::InjPlusSup, w2, f.z_adv_k,
                                                 f.z_clean_k, f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                               .item();
    REQUIRE(weighted == Catch::Approx(2.0 * inj + 0.5 * sup).epsilon(1e-6));
}

TEST_CASE("gradients reach the perturbed latent but not frozen weights", "[losses]") {
    LossFixture<float> f(44);
    for (uimm::LossKind kind : {uimm::LossKind::Inj, uimm::LossKind::Sup, uimm::LossKind::MapInj,
                                uimm::LossKind::EmbeddingBaseline}) {
        uimm::Tape tape;
        uimm::Tensor leaf = f.z_adv_k.clone(true);  // requires_grad
        auto loss = uimm::trace_loss_term(tape, f.bundle, kind, uimm::LossWeights{}, leaf, f.z_clean_k, f.z_tar_k,
                                          f.k, f.src_emb, f.tar_emb);
        tape.backward(loss);

        double gnorm = 0.0;
        for (float g : leaf.grad()) gnorm += std::abs(g);
        INFO("kind " << uimm::loss_kind_name(kind));
        REQUIRE(gnorm > 0.0);

        // Frozen weights accumulate nothing.
        auto& wq = f.bundle.denoiser.blocks[0].wq;
        REQUIRE_FALSE(wq.requires_grad());
        double wnorm = 0.0;
        for (float g : wq.grad()) wnorm += std::abs(g);
        REQUIRE(wnorm == 0.0);
    }
}

TEST_CASE("value-matrix right-transform moves feature losses but not map losses", "[losses]") {
    LossFixture<float> f(45);
    uimm::LossWeights w;
    uimm::Tape tape;

    const float inj_before = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::Inj, w, f.z_adv_k, f.z_clean_k,
                                                   f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                                 .item();
    const float map_before = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::MapInj, w, f.z_adv_k,
                                                   f.z_clean_k, f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                                 .item();

    // Right-multiply the LAST block's value matrix by an invertible matrix.
    // Upstream activations are untouched, so every attention map is bitwise
    // stable while the attended features rotate.
    auto& wv = f.bundle.denoiser.blocks.back().wv;
    const int d_t = wv.dim(0), C = wv.dim(1);
    uimm::Rng rng(46);
    uimm::Tensor r = uimm::Tensor::zeros({C, C});
    for (int i = 0; i < C; ++i) {
        for (int j = 0; j < C; ++j) {
            r.data()[i * C + j] = (i == j ? 1.0f : 0.0f) + uimm::uniform<float>(rng, -0.3f, 0.3f);
        }
    }
    uimm::Tensor wv_new = uimm::Tensor::zeros({d_t, C});
    for (int i = 0; i < d_t; ++i) {
        for (int j = 0; j < C; ++j) {
            float acc = 0.0f;
            for (int m = 0; m < C; ++m) acc += wv.data()[i * C + m] * r.data()[m * C + j];
            wv_new.data()[i * C + j] = acc;
        }
    }
    wv.vec() = wv_new.vec();

    const float inj_after = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::Inj, w, f.z_adv_k, f.z_clean_k,
                                                  f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                                .item();
    const float map_after = uimm::trace_loss_term(tape, f.bundle, uimm::LossKind::MapInj, w, f.z_adv_k,
                                                  f.z_clean_k, f.z_tar_k, f.k, f.src_emb, f.tar_emb)
                                .item();

    REQUIRE(map_after == map_before);                      // bitwise: maps never saw the change
    REQUIRE(std::abs(inj_after - inj_before) > 1e-6f);     // features did
}

TEST_CASE("encoder baseline is the plain latent MSE", "[losses]") {
    LossFixture<float> f(47);
    uimm::Tape tape;
    auto loss = uimm::encoder_baseline_loss(tape, f.z_adv_k, f.z_tar_k);
    // Independent recomputation.
    double acc = 0.0;
    for (int64_t i = 0; i < f.z_adv_k.numel(); ++i) {
        const double d = static_cast<double>(f.z_adv_k.data()[i]) - static_cast<double>(f.z_tar_k.data()[i]);
        acc += d * d;
    }
    acc /= static_cast<double>(f.z_adv_k.numel());
    REQUIRE(loss.item() == Catch::Approx(acc).epsilon(1e-5));

    REQUIRE(uimm::encoder_baseline_loss(tape, f.z_adv_k, f.z_adv_k).item() == 0.0f);
}

TEST_CASE("trace losses pass 64-bit gradient checks", "[losses]") {
    LossFixture<double> f(48);
    std::vector<testutil::DTensor> inputs = {f.z_adv_k.clone(true)};
    for (uimm::LossKind kind : {uimm::LossKind::InjPlusSup, uimm::LossKind::MapInj,
                                uimm::LossKind::EmbeddingBaseline}) {
        INFO("kind " << uimm::loss_kind_name(kind));
        testutil::gradcheck(inputs, [&](testutil::DTape& tape) {
            return uimm::trace_loss_term(tape, f.bundle, kind, uimm::LossWeights{}, inputs[0], f.z_clean_k,
                                         f.z_tar_k, f.k, f.src_emb, f.tar_emb);
        });
    }
}
