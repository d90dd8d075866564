#pragma once

#include <string>
#include <vector>

#include "model.hpp"
#include "schedule.hpp"
#include "uap.hpp"

namespace uimm {

// Two-phase pretraining of the toy latent editor: first the autoencoder learns
// to reconstruct, then the denoiser learns eps-prediction on frozen-encoder
// latents. A fraction of denoiser steps drop the prompt so the unconditional
// branch used by classifier-free guidance is trained rather than accidental.
struct PretrainConfig {
    int vae_steps = 400;
    int denoiser_steps = 1200;
    int batch = 8;
    double vae_lr = 2e-3;
    double denoiser_lr = 2e-3;
    double prompt_dropout = 0.1;
    uint64_t seed = 0;

    void validate() const {
        if (vae_steps < 0 || denoiser_steps < 0) throw ConfigError("pretrain: step counts must be >= 0");
        if (batch < 1) throw ConfigError("pretrain: batch must be >= 1");
        if (!(vae_lr >= 0.0) || !(denoiser_lr >= 0.0)) throw ConfigError("pretrain: learning rates must be >= 0");
        if (prompt_dropout < 0.0 || prompt_dropout > 1.0) {
            throw ConfigError("pretrain: prompt_dropout must be in [0,1]");
        }
    }
};

struct PretrainResult {
    std::vector<double> vae_losses;       // one per optimizer step
    std::vector<double> denoiser_losses;  // one per optimizer step
};

// Mean eps-prediction error over a fixed, seeded set of (sample, timestep,
// noise) draws. Pure function of (bundle weights, samples, n_draws, seed) —
// usable as a held-out metric before/after training.
inline double denoiser_eval_loss(const ToyLdmBundleT<float>& bundle, const std::vector<TrainSample>& samples,
                                 int n_draws, uint64_t seed) {
    if (samples.empty()) throw UsageError("denoiser_eval_loss: no samples");
    if (n_draws < 1) throw UsageError("denoiser_eval_loss: n_draws must be >= 1");
    Tape tape;
    tape.set_recording(false);
    Rng rng(seed);
    double total = 0.0;
    for (int d = 0; d < n_draws; ++d) {
        const auto& s = samples[static_cast<size_t>(d) % samples.size()];
        std::uniform_int_distribution<int> pick_k(1, bundle.hp.k_max);
        const int k = pick_k(rng);
        Tensor z = bundle.vae.encode(tape, s.image);
        Tensor eps = Tensor::zeros(z.shape());
        eps.fill_normal(rng, 0.0f, 1.0f);
        Tensor z_k = add_noise(tape, bundle.schedule, z, k, eps);
        Tensor pred = bundle.denoiser.predict_eps(tape, z_k, k, bundle.text.embed(s.prompt));
        total += static_cast<double>(mse(tape, pred, eps).item());
    }
    return total / static_cast<double>(n_draws);
}

inline PretrainResult pretrain_toy(ToyLdmBundleT<float>& bundle, const std::vector<TrainSample>& samples,
                                   const PretrainConfig& cfg) {
    cfg.validate();
    if (samples.empty()) throw UsageError("pretrain_toy: no training samples");
    for (size_t i = 0; i < samples.size(); ++i) {
        detail_uap::check_image(samples[i].image, bundle.hp.image_size, "pretrain: sample " + std::to_string(i));
    }
    PretrainResult result;
    Rng rng(mix_seed(cfg.seed, 0x9E17ull));
    std::uniform_int_distribution<size_t> pick(0, samples.size() - 1);

    // Phase 1: autoencoder reconstruction.
    bundle.set_trainable(false);
    auto vae_params = bundle.vae_params();
    for (auto& p : vae_params) p.set_requires_grad(true);
    {
        AdamT<float> opt;
        opt.lr = static_cast<float>(cfg.vae_lr);
        for (int step = 0; step < cfg.vae_steps; ++step) {
            Tape tape;
            Tensor loss;
            for (int b = 0; b < cfg.batch; ++b) {
                const Tensor& x = samples[pick(rng)].image;
                Tensor recon = bundle.vae.decode(tape, bundle.vae.encode(tape, x));
                Tensor term = mse(tape, recon, x);
                loss = loss.defined() ? add(tape, loss, term) : term;
            }
            loss = scale(tape, loss, 1.0f / static_cast<float>(cfg.batch));
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value)) {
                throw NumericalError("pretrain: vae loss diverged at step " + std::to_string(step));
            }
            zero_grads(vae_params);
            tape.backward(loss);
            opt.step(vae_params);
            result.vae_losses.push_back(value);
            if (step % 50 == 0) log_debug("pretrain vae step " + std::to_string(step) + " loss " + std::to_string(value));
        }
        for (auto& p : vae_params) p.set_requires_grad(false);
    }

    // Phase 2: eps-prediction on frozen-encoder latents.
    auto den_params = bundle.denoiser_params();
    for (auto& p : den_params) p.set_requires_grad(true);
    {
        AdamT<float> opt;
        opt.lr = static_cast<float>(cfg.denoiser_lr);
        std::uniform_int_distribution<int> pick_k(1, bundle.hp.k_max);
        for (int step = 0; step < cfg.denoiser_steps; ++step) {
            Tape tape;
            Tensor loss;
            for (int b = 0; b < cfg.batch; ++b) {
                const auto& s = samples[pick(rng)];
                Tensor z;
                {
                    Tape::NoGrad ng(tape);
                    z = bundle.vae.encode(tape, s.image);
                }
                const int k = pick_k(rng);
                Tensor eps = Tensor::zeros(z.shape());
                eps.fill_normal(rng, 0.0f, 1.0f);
                Tensor z_k = add_noise(tape, bundle.schedule, z, k, eps);
                const bool drop = uniform<float>(rng, 0.0f, 1.0f) < static_cast<float>(cfg.prompt_dropout);
                Tensor emb = drop ? bundle.text.uncond_embedding() : bundle.text.embed(s.prompt);
                Tensor pred = bundle.denoiser.predict_eps(tape, z_k, k, emb);
                Tensor term = mse(tape, pred, eps);
                loss = loss.defined() ? add(tape, loss, term) : term;
            }
            loss = scale(tape, loss, 1.0f / static_cast<float>(cfg.batch));
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value)) {
                throw NumericalError("pretrain: denoiser loss diverged at step " + std::to_string(step));
            }
            zero_grads(den_params);
            tape.backward(loss);
            opt.step(den_params);
            result.denoiser_losses.push_back(value);
            if (step % 100 == 0) {
                log_debug("pretrain denoiser step " + std::to_string(step) + " loss " + std::to_string(value));
            }
        }
        for (auto& p : den_params) p.set_requires_grad(false);
    }
    return result;
}

}  // namespace uimm
