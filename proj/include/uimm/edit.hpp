#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "model.hpp"
#include "schedule.hpp"

namespace uimm {

// Image-to-image editing: encode, partially re-noise, denoise deterministically
// under a new prompt with classifier-free guidance, decode. This is the
// evaluation-time "attack" the immunization defends against; it never needs
// gradients.
struct EditParams {
    double strength = 0.8;   // fraction of the schedule to re-noise, in [0,1]
    double guidance = 7.5;   // classifier-free guidance weight
    int steps = 50;          // sampler budget for a full-schedule edit

    void validate() const {
        if (!(strength >= 0.0 && strength <= 1.0)) {
            throw UsageError("edit: strength must be in [0,1], got " + std::to_string(strength));
        }
        if (!std::isfinite(guidance)) throw UsageError("edit: guidance must be finite");
        if (steps < 1) throw UsageError("edit: steps must be >= 1, got " + std::to_string(steps));
    }
};

// Descending timestep grid for the deterministic sampler: the sampler budget is
// prorated by how much of the schedule the edit actually traverses, then spread
// evenly over [k_start .. 1]. Always starts at k_start and ends at 1.
inline std::vector<int> ddim_grid(int k_start, int k_max, int steps) {
    if (k_start < 1 || k_start > k_max) {
        throw UsageError("ddim_grid: k_start " + std::to_string(k_start) + " outside [1," + std::to_string(k_max) +
                         "]");
    }
    if (steps < 1) throw UsageError("ddim_grid: steps must be >= 1");
    const int n_eff = std::max(
        1, static_cast<int>(std::lround(static_cast<double>(steps) * k_start / static_cast<double>(k_max))));
    std::vector<int> grid;
    grid.reserve(static_cast<size_t>(n_eff));
    for (int i = 0; i < n_eff; ++i) {
        const double frac = (n_eff == 1) ? 0.0 : static_cast<double>(i) / static_cast<double>(n_eff - 1);
        const int k = static_cast<int>(std::lround(k_start + (1.0 - k_start) * frac));
        if (grid.empty() || k < grid.back()) grid.push_back(k);
    }
    return grid;
}

// Deterministic denoising from timestep k_start down to 0 along a ddim_grid.
// Both guidance branches are evaluated unconditionally, so guidance == 0 is the
// honest unconditional rollout at the same cost, not a separate code path.
template <class T>
TensorT<T> ddim_rollout(const ToyLdmBundleT<T>& bundle, TapeT<T>& tape, TensorT<T> z, int k_start, int steps,
                        const TensorT<T>& cond_emb, const TensorT<T>& uncond_emb, double guidance) {
    const std::vector<int> grid = ddim_grid(k_start, bundle.hp.k_max, steps);
    const T g = static_cast<T>(guidance);
    for (size_t i = 0; i < grid.size(); ++i) {
        const int k = grid[i];
        const int k_next = (i + 1 < grid.size()) ? grid[i + 1] : 0;
        TensorT<T> eps_c = bundle.denoiser.predict_eps(tape, z, k, cond_emb);
        TensorT<T> eps_u = bundle.denoiser.predict_eps(tape, z, k, uncond_emb);
        TensorT<T> eps_hat = axpby(tape, T(1) - g, eps_u, g, eps_c);
        const T sa = bundle.schedule.signal_coeff(k);
        const T na = bundle.schedule.noise_coeff(k);
        TensorT<T> x0_pred = axpby(tape, T(1) / sa, z, -na / sa, eps_hat);
        z = axpby(tape, bundle.schedule.signal_coeff(k_next), x0_pred, bundle.schedule.noise_coeff(k_next), eps_hat);
    }
    return z;
}

template <class T>
TensorT<T> edit_img2img(const ToyLdmBundleT<T>& bundle, const TensorT<T>& x, const std::string& prompt,
                        const EditParams& params, uint64_t seed) {
    params.validate();
    TapeT<T> tape;
    tape.set_recording(false);

    TensorT<T> z = bundle.vae.encode(tape, x);
    if (params.strength == 0.0) {
        // Limit case: nothing is re-noised, the edit degenerates to the
        // autoencoder round trip.
        return bundle.vae.decode(tape, z);
    }
    const int k_start =
        std::min(bundle.hp.k_max, static_cast<int>(std::ceil(params.strength * bundle.hp.k_max)));

    Rng rng(seed);
    TensorT<T> eps = TensorT<T>::zeros(z.shape());
    eps.fill_normal(rng, T(0), T(1));
    z = add_noise(tape, bundle.schedule, z, k_start, eps);

    TensorT<T> cond = bundle.text.embed(prompt);
    TensorT<T> uncond = bundle.text.uncond_embedding();
    z = ddim_rollout(bundle, tape, z, k_start, params.steps, cond, uncond, params.guidance);
    return bundle.vae.decode(tape, z);
}

}  // namespace uimm
