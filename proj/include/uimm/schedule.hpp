#pragma once

#include <cmath>

#include "tensor.hpp"

namespace uimm {

// DDPM-style linear noise schedule. Index convention: betas[k] and
// alpha_bars[k] are meaningful for k in [1, k_max]; alpha_bars[0] == 1 so a
// zero timestep is the identity.
template <class T>
struct NoiseScheduleT {
    int k_max = 50;
    T beta_start = T(1e-4);
    T beta_end = T(2e-2);
    std::vector<T> betas;       // [0..k_max], betas[0] unused (0)
    std::vector<T> alpha_bars;  // [0..k_max], alpha_bars[0] == 1

    static NoiseScheduleT make_linear(int k_max = 50, T beta_start = T(1e-4), T beta_end = T(2e-2)) {
        if (k_max < 1) throw UsageError("schedule: k_max must be >= 1, got " + std::to_string(k_max));
        if (!(beta_start > T(0)) || !(beta_end < T(1)) || !(beta_start <= beta_end)) {
            throw UsageError("schedule: need 0 < beta_start <= beta_end < 1");
        }
        NoiseScheduleT s;
        s.k_max = k_max;
        s.beta_start = beta_start;
        s.beta_end = beta_end;
        s.betas.assign(static_cast<size_t>(k_max) + 1, T(0));
        s.alpha_bars.assign(static_cast<size_t>(k_max) + 1, T(1));
        T acc = T(1);
        for (int k = 1; k <= k_max; ++k) {
            const T frac = (k_max == 1) ? T(0) : static_cast<T>(k - 1) / static_cast<T>(k_max - 1);
            s.betas[k] = beta_start + (beta_end - beta_start) * frac;
            acc *= (T(1) - s.betas[k]);
            s.alpha_bars[k] = acc;
        }
        return s;
    }

    void check_k(int k) const {
        if (k < 0 || k > k_max) {
            throw UsageError("schedule: timestep " + std::to_string(k) + " out of range [0," + std::to_string(k_max) +
                             "]");
        }
    }

    T alpha_bar(int k) const {
        check_k(k);
        return alpha_bars[static_cast<size_t>(k)];
    }

    T signal_coeff(int k) const { return std::sqrt(alpha_bar(k)); }
    T noise_coeff(int k) const { return std::sqrt(T(1) - alpha_bar(k)); }
};

// x_k = sqrt(abar_k)*x0 + sqrt(1-abar_k)*eps. k=0 returns x0 itself so the
// identity holds exactly, not merely to rounding.
template <class T>
TensorT<T> add_noise(TapeT<T>& tape, const NoiseScheduleT<T>& sched, const TensorT<T>& x0, int k,
                     const TensorT<T>& eps) {
    sched.check_k(k);
    if (x0.shape() != eps.shape()) {
        throw ShapeError("add_noise: noise shape " + shape_str(eps.shape()) + " differs from input " +
                         shape_str(x0.shape()));
    }
    if (k == 0) return x0;
    return axpby(tape, sched.signal_coeff(k), x0, sched.noise_coeff(k), eps);
}

using NoiseSchedule = NoiseScheduleT<float>;

}  // namespace uimm
