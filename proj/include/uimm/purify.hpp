#pragma once

#include <array>
#include <cmath>

#include "data.hpp"
#include "edit.hpp"

namespace uimm {

// Purification counter-defenses: transformations an adversary might apply to
// an immunized image to strip the perturbation before editing.

namespace detail_jpeg {

// Standard luminance quantization table (JPEG Annex K), applied to every
// channel here — this codec analog treats RGB as three luminance planes and
// skips entropy coding entirely, keeping only the lossy transform.
inline const std::array<int, 64>& base_luminance_table() {
    static const std::array<int, 64> table = {
        16, 11, 10, 16, 24,  40,  51,  61,   //
        12, 12, 14, 19, 26,  58,  60,  55,   //
        14, 13, 16, 24, 40,  57,  69,  56,   //
        14, 17, 22, 29, 51,  87,  80,  62,   //
        18, 22, 37, 56, 68,  109, 103, 77,   //
        24, 35, 55, 64, 81,  104, 113, 92,   //
        49, 64, 78, 87, 103, 121, 120, 101,  //
        72, 92, 95, 98, 112, 100, 103, 99,
    };
    return table;
}

// libjpeg-style quality scaling of the base table.
inline std::array<int, 64> quant_table(int quality) {
    if (quality < 1 || quality > 100) {
        throw UsageError("jpeg_lite: quality must be in [1,100], got " + std::to_string(quality));
    }
    const int scale = (quality < 50) ? 5000 / quality : 200 - 2 * quality;
    std::array<int, 64> out{};
    const auto& base = base_luminance_table();
    for (int i = 0; i < 64; ++i) {
        const int q = (base[static_cast<size_t>(i)] * scale + 50) / 100;
        out[static_cast<size_t>(i)] = std::min(255, std::max(1, q));
    }
    return out;
}

// Orthonormal 8x8 DCT-II basis, precomputed: basis[u][x] = C(u) cos((2x+1)u pi/16).
inline const std::array<std::array<double, 8>, 8>& dct_basis() {
    static const auto basis = [] {
        std::array<std::array<double, 8>, 8> b{};
        const double pi = std::acos(-1.0);
        for (int u = 0; u < 8; ++u) {
            const double cu = (u == 0) ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int x = 0; x < 8; ++x) {
                b[static_cast<size_t>(u)][static_cast<size_t>(x)] = cu * std::cos((2 * x + 1) * u * pi / 16.0);
            }
        }
        return b;
    }();
    return basis;
}

// 2D DCT of one 8x8 block (row-major), separably.
inline void dct2d_8x8(const double in[64], double out[64]) {
    const auto& b = dct_basis();
    double tmp[64];
    for (int y = 0; y < 8; ++y) {
        for (int u = 0; u < 8; ++u) {
            double acc = 0.0;
            for (int x = 0; x < 8; ++x) acc += in[y * 8 + x] * b[static_cast<size_t>(u)][static_cast<size_t>(x)];
            tmp[y * 8 + u] = acc;
        }
    }
    for (int u = 0; u < 8; ++u) {
        for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int y = 0; y < 8; ++y) acc += tmp[y * 8 + u] * b[static_cast<size_t>(v)][static_cast<size_t>(y)];
            out[v * 8 + u] = acc;
        }
    }
}

inline void idct2d_8x8(const double in[64], double out[64]) {
    const auto& b = dct_basis();
    double tmp[64];
    for (int v = 0; v < 8; ++v) {
        for (int x = 0; x < 8; ++x) {
            double acc = 0.0;
            for (int u = 0; u < 8; ++u) acc += in[v * 8 + u] * b[static_cast<size_t>(u)][static_cast<size_t>(x)];
            tmp[v * 8 + x] = acc;
        }
    }
    for (int x = 0; x < 8; ++x) {
        for (int y = 0; y < 8; ++y) {
            double acc = 0.0;
            for (int v = 0; v < 8; ++v) acc += tmp[v * 8 + x] * b[static_cast<size_t>(v)][static_cast<size_t>(y)];
            out[y * 8 + x] = acc;
        }
    }
}

}  // namespace detail_jpeg

// Lossy 8x8-DCT recompression: to 0..255 range, center, block DCT, quantize
// with the quality-scaled table, dequantize, inverse DCT, back to [0,1].
// Blocks cover the image with edge replication when a side is not a multiple
// of eight.
inline Tensor jpeg_lite(const Tensor& img, int quality) {
    if (img.rank() != 3) throw ShapeError("jpeg_lite: expected [C,H,W], got " + shape_str(img.shape()));
    const auto qt = detail_jpeg::quant_table(quality);
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out = Tensor::zeros(img.shape());

    double block[64], coef[64], recon[64];
    for (int ch = 0; ch < c; ++ch) {
        const float* src = img.data() + static_cast<int64_t>(ch) * h * w;
        float* dst = out.data() + static_cast<int64_t>(ch) * h * w;
        for (int by = 0; by < h; by += 8) {
            for (int bx = 0; bx < w; bx += 8) {
                for (int y = 0; y < 8; ++y) {
                    const int sy = std::min(h - 1, by + y);
                    for (int x = 0; x < 8; ++x) {
                        const int sx = std::min(w - 1, bx + x);
                        block[y * 8 + x] = static_cast<double>(src[sy * w + sx]) * 255.0 - 128.0;
                    }
                }
                detail_jpeg::dct2d_8x8(block, coef);
                for (int i = 0; i < 64; ++i) {
                    const double q = static_cast<double>(qt[static_cast<size_t>(i)]);
                    coef[i] = std::round(coef[i] / q) * q;
                }
                detail_jpeg::idct2d_8x8(coef, recon);
                for (int y = 0; y < 8 && by + y < h; ++y) {
                    for (int x = 0; x < 8 && bx + x < w; ++x) {
                        const double v = (recon[y * 8 + x] + 128.0) / 255.0;
                        dst[(by + y) * w + bx + x] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
                    }
                }
            }
        }
    }
    return out;
}

// Box-blur purification.
inline Tensor mean_smooth(const Tensor& img, int kernel = 3) { return mean_filter(img, kernel); }

// Diffusion-based purification analog: re-noise the latent a few steps and
// deterministically denoise without any prompt. Both guidance branches see the
// empty-prompt embedding, so the rollout is honestly unconditional.
struct DiffPureParams {
    int k = 10;      // how deep to corrupt
    int steps = 10;  // sampler budget for a full-schedule rollout
    uint64_t seed = 0;

    void validate(int k_max) const {
        if (k < 1 || k > k_max) {
            throw UsageError("diffpure_lite: k must be in [1," + std::to_string(k_max) + "], got " +
                             std::to_string(k));
        }
        if (steps < 1) throw UsageError("diffpure_lite: steps must be >= 1");
    }
};

inline Tensor diffpure_lite(const ToyLdmBundleT<float>& bundle, const Tensor& img, const DiffPureParams& params) {
    params.validate(bundle.hp.k_max);
    Tape tape;
    tape.set_recording(false);
    Tensor z = bundle.vae.encode(tape, img);
    Rng rng(params.seed);
    Tensor eps = Tensor::zeros(z.shape());
    eps.fill_normal(rng, 0.0f, 1.0f);
    z = add_noise(tape, bundle.schedule, z, params.k, eps);
    Tensor uncond = bundle.text.uncond_embedding();
    z = ddim_rollout(bundle, tape, z, params.k, params.steps, uncond, uncond, 0.0);
    return bundle.vae.decode(tape, z);
}

}  // namespace uimm
