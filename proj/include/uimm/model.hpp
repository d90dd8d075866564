#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "schedule.hpp"
#include "tensor.hpp"
#include "tensor_io.hpp"
#include "text_embed.hpp"

namespace uimm {

// Hyperparameters of the toy latent diffusion bundle. Everything needed to
// reconstruct the architecture is stored in the checkpoint manifest, so a
// loaded bundle is structurally identical to the one that was saved.
struct ModelHp {
    int image_size = 32;
    int image_ch = 3;
    int z_ch = 4;
    int vae_ch = 16;
    int unet_ch = 32;
    int blocks = 4;
    int d_t = 32;
    int m_tokens = 8;
    int d_time = 32;
    int gn_groups = 4;
    int k_max = 50;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    uint64_t init_seed = 0x5eedf00d;
    uint64_t text_seed = 0x7e57;

    int latent_size() const { return image_size / 4; }

    nlohmann::json to_json() const {
        return {{"image_size", image_size}, {"image_ch", image_ch}, {"z_ch", z_ch},
                {"vae_ch", vae_ch},         {"unet_ch", unet_ch},   {"blocks", blocks},
                {"d_t", d_t},               {"m_tokens", m_tokens}, {"d_time", d_time},
                {"gn_groups", gn_groups},   {"k_max", k_max},       {"beta_start", beta_start},
                {"beta_end", beta_end},     {"init_seed", init_seed}, {"text_seed", text_seed}};
    }

    static ModelHp from_json(const nlohmann::json& j) {
        ModelHp hp;
        hp.image_size = j.at("image_size").get<int>();
        hp.image_ch = j.at("image_ch").get<int>();
        hp.z_ch = j.at("z_ch").get<int>();
        hp.vae_ch = j.at("vae_ch").get<int>();
        hp.unet_ch = j.at("unet_ch").get<int>();
        hp.blocks = j.at("blocks").get<int>();
        hp.d_t = j.at("d_t").get<int>();
        hp.m_tokens = j.at("m_tokens").get<int>();
        hp.d_time = j.at("d_time").get<int>();
        hp.gn_groups = j.at("gn_groups").get<int>();
        hp.k_max = j.at("k_max").get<int>();
        hp.beta_start = j.at("beta_start").get<double>();
        hp.beta_end = j.at("beta_end").get<double>();
        hp.init_seed = j.at("init_seed").get<uint64_t>();
        hp.text_seed = j.at("text_seed").get<uint64_t>();
        return hp;
    }
};

namespace layers {

template <class T>
TensorT<T> conv_init(int out_c, int in_c, int k, Rng& rng) {
    TensorT<T> w = TensorT<T>::zeros({out_c, in_c, k, k});
    const T std = std::sqrt(T(2) / static_cast<T>(in_c * k * k));
    w.fill_normal(rng, T(0), std);
    return w;
}

template <class T>
TensorT<T> linear_init(int in_d, int out_d, Rng& rng) {
    TensorT<T> w = TensorT<T>::zeros({in_d, out_d});
    w.fill_normal(rng, T(0), std::sqrt(T(1) / static_cast<T>(in_d)));
    return w;
}

template <class T>
struct ConvT {
    TensorT<T> w, b;
    int stride = 1, pad = 1;

    ConvT() = default;
    ConvT(int out_c, int in_c, int k, int stride_, int pad_, Rng& rng)
        : w(conv_init<T>(out_c, in_c, k, rng)), b(TensorT<T>::zeros({out_c})), stride(stride_), pad(pad_) {}

    TensorT<T> apply(TapeT<T>& tape, const TensorT<T>& x) const {
        return bias_add_chw(tape, conv2d(tape, x, w, stride, pad), b);
    }

    void collect(const std::string& prefix, std::vector<std::pair<std::string, TensorT<T>>>& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

template <class T>
struct LinearT {
    TensorT<T> w, b;  // [in,out], [out]

    LinearT() = default;
    LinearT(int in_d, int out_d, Rng& rng) : w(linear_init<T>(in_d, out_d, rng)), b(TensorT<T>::zeros({out_d})) {}

    TensorT<T> apply(TapeT<T>& tape, const TensorT<T>& x) const {
        return bias_add_rows(tape, matmul(tape, x, w), b);
    }

    void collect(const std::string& prefix, std::vector<std::pair<std::string, TensorT<T>>>& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

}  // namespace layers

// --- VAE-lite ---------------------------------------------------------------

template <class T>
struct VaeLiteT {
    layers::ConvT<T> e1, e2, e3, e4;  // 3 -> vae_ch (s2) -> vae_ch -> vae_ch (s2) -> z_ch
    layers::ConvT<T> d1, d2, d3, d4;  // z_ch -> vae_ch, upsample x2 twice, -> 3
    ModelHp hp;

    VaeLiteT() = default;
    VaeLiteT(const ModelHp& hp_, Rng& rng) : hp(hp_) {
        e1 = layers::ConvT<T>(hp.vae_ch, hp.image_ch, 3, 2, 1, rng);
        e2 = layers::ConvT<T>(hp.vae_ch, hp.vae_ch, 3, 1, 1, rng);
        e3 = layers::ConvT<T>(hp.vae_ch, hp.vae_ch, 3, 2, 1, rng);
        e4 = layers::ConvT<T>(hp.z_ch, hp.vae_ch, 3, 1, 1, rng);
        d1 = layers::ConvT<T>(hp.vae_ch, hp.z_ch, 3, 1, 1, rng);
        d2 = layers::ConvT<T>(hp.vae_ch, hp.vae_ch, 3, 1, 1, rng);
        d3 = layers::ConvT<T>(hp.vae_ch / 2, hp.vae_ch, 3, 1, 1, rng);
        d4 = layers::ConvT<T>(hp.image_ch, hp.vae_ch / 2, 3, 1, 1, rng);
    }

    TensorT<T> encode(TapeT<T>& tape, const TensorT<T>& x) const {
        if (x.rank() != 3 || x.dim(0) != hp.image_ch || x.dim(1) != hp.image_size || x.dim(2) != hp.image_size) {
            throw ShapeError("encode: expected image [" + std::to_string(hp.image_ch) + "," +
                             std::to_string(hp.image_size) + "," + std::to_string(hp.image_size) + "], got " +
                             shape_str(x.shape()));
        }
        TensorT<T> h = silu(tape, e1.apply(tape, x));
        h = silu(tape, e2.apply(tape, h));
        h = silu(tape, e3.apply(tape, h));
        return e4.apply(tape, h);
    }

    TensorT<T> decode(TapeT<T>& tape, const TensorT<T>& z) const {
        const int zs = hp.latent_size();
        if (z.rank() != 3 || z.dim(0) != hp.z_ch || z.dim(1) != zs || z.dim(2) != zs) {
            throw ShapeError("decode: expected latent [" + std::to_string(hp.z_ch) + "," + std::to_string(zs) + "," +
                             std::to_string(zs) + "], got " + shape_str(z.shape()));
        }
        TensorT<T> h = silu(tape, d1.apply(tape, z));
        h = upsample_nearest2(tape, h);
        h = silu(tape, d2.apply(tape, h));
        h = upsample_nearest2(tape, h);
        h = silu(tape, d3.apply(tape, h));
        return sigmoid(tape, d4.apply(tape, h));
    }

    void collect(std::vector<std::pair<std::string, TensorT<T>>>& out) const {
        e1.collect("vae.e1", out);
        e2.collect("vae.e2", out);
        e3.collect("vae.e3", out);
        e4.collect("vae.e4", out);
        d1.collect("vae.d1", out);
        d2.collect("vae.d2", out);
        d3.collect("vae.d3", out);
        d4.collect("vae.d4", out);
    }
};

// --- denoiser -----------------------------------------------------------------

// Per-layer view captured during a traced forward pass. `attn` is the N x m
// attention map, `ca` the N x C cross-attention output before the output
// projection, `q` the query projection, and `query_in` the token view of the
// layer's input (the activations the queries are computed from). All handles
// stay connected to the tape, so losses built on them backpropagate into the
// input latent.
template <class T>
struct LayerTraceT {
    TensorT<T> attn;
    TensorT<T> ca;
    TensorT<T> q;
    TensorT<T> query_in;
};

template <class T>
using CrossAttnTraceT = std::vector<LayerTraceT<T>>;

template <class T>
TensorT<T> sinusoidal_time_embedding(int k, int d_time) {
    TensorT<T> out = TensorT<T>::zeros({1, d_time});
    const int half = d_time / 2;
    for (int i = 0; i < half; ++i) {
        const T freq = std::exp(-std::log(T(10000)) * static_cast<T>(i) / static_cast<T>(half));
        out.data()[i] = std::sin(static_cast<T>(k) * freq);
        out.data()[half + i] = std::cos(static_cast<T>(k) * freq);
    }
    return out;
}

template <class T>
struct DenoiserBlockT {
    TensorT<T> gn_g, gn_b;
    layers::ConvT<T> c1, c2;
    layers::LinearT<T> tproj;            // d_time -> C
    TensorT<T> wq, wk, wv, wca;          // [C,C], [d_t,C], [d_t,C], [C,C]

    DenoiserBlockT() = default;
    DenoiserBlockT(const ModelHp& hp, Rng& rng) {
        const int C = hp.unet_ch;
        gn_g = TensorT<T>::full({C}, T(1));
        gn_b = TensorT<T>::zeros({C});
        c1 = layers::ConvT<T>(C, C, 3, 1, 1, rng);
        c2 = layers::ConvT<T>(C, C, 3, 1, 1, rng);
        tproj = layers::LinearT<T>(hp.d_time, C, rng);
        wq = TensorT<T>::zeros({C, C});
        wq.fill_normal(rng, T(0), std::sqrt(T(1) / static_cast<T>(C)));
        wk = TensorT<T>::zeros({hp.d_t, C});
        wk.fill_normal(rng, T(0), std::sqrt(T(1) / static_cast<T>(hp.d_t)));
        wv = TensorT<T>::zeros({hp.d_t, C});
        wv.fill_normal(rng, T(0), std::sqrt(T(1) / static_cast<T>(hp.d_t)));
        // Zero-init output projection: blocks start text-free and learn to use
        // the prompt, which also keeps early pretraining stable.
        wca = TensorT<T>::zeros({C, C});
    }

    void collect(const std::string& prefix, std::vector<std::pair<std::string, TensorT<T>>>& out) const {
        out.emplace_back(prefix + ".gn_g", gn_g);
        out.emplace_back(prefix + ".gn_b", gn_b);
        c1.collect(prefix + ".c1", out);
        c2.collect(prefix + ".c2", out);
        tproj.collect(prefix + ".tproj", out);
        out.emplace_back(prefix + ".wq", wq);
        out.emplace_back(prefix + ".wk", wk);
        out.emplace_back(prefix + ".wv", wv);
        out.emplace_back(prefix + ".wca", wca);
    }
};

template <class T>
struct DenoiserT {
    ModelHp hp;
    layers::ConvT<T> stem;               // z_ch -> C
    layers::LinearT<T> tm1, tm2;         // time MLP
    std::vector<DenoiserBlockT<T>> blocks;
    TensorT<T> hgn_g, hgn_b;
    layers::ConvT<T> head;               // C -> z_ch

    DenoiserT() = default;
    DenoiserT(const ModelHp& hp_, Rng& rng) : hp(hp_) {
        const int C = hp.unet_ch;
        stem = layers::ConvT<T>(C, hp.z_ch, 3, 1, 1, rng);
        tm1 = layers::LinearT<T>(hp.d_time, hp.d_time, rng);
        tm2 = layers::LinearT<T>(hp.d_time, hp.d_time, rng);
        for (int l = 0; l < hp.blocks; ++l) blocks.emplace_back(hp, rng);
        hgn_g = TensorT<T>::full({C}, T(1));
        hgn_b = TensorT<T>::zeros({C});
        head = layers::ConvT<T>(hp.z_ch, C, 3, 1, 1, rng);
    }

    // eps-prediction with per-layer trace. The residual update is
    // h <- h + G(h,k) + (CA(h) W_ca): the convolutional path and the
    // cross-attention path both read the block input.
    TensorT<T> forward_with_trace(TapeT<T>& tape, const TensorT<T>& z, int k, const TensorT<T>& prompt_emb,
                                  CrossAttnTraceT<T>* trace) const {
        const int zs = hp.latent_size();
        if (z.rank() != 3 || z.dim(0) != hp.z_ch || z.dim(1) != zs || z.dim(2) != zs) {
            throw ShapeError("denoiser: expected latent [" + std::to_string(hp.z_ch) + "," + std::to_string(zs) +
                             "," + std::to_string(zs) + "], got " + shape_str(z.shape()));
        }
        if (prompt_emb.rank() != 2 || prompt_emb.dim(1) != hp.d_t) {
            throw ShapeError("denoiser: prompt embedding must be [m," + std::to_string(hp.d_t) + "], got " +
                             shape_str(prompt_emb.shape()));
        }
        if (prompt_emb.dim(0) < 1) throw UsageError("denoiser: prompt embedding has zero tokens");
        if (k < 0 || k > hp.k_max) {
            throw UsageError("denoiser: timestep " + std::to_string(k) + " out of range [0," +
                             std::to_string(hp.k_max) + "]");
        }
        if (trace) trace->clear();

        const int C = hp.unet_ch;
        const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(C));

        TensorT<T> temb = sinusoidal_time_embedding<T>(k, hp.d_time);
        TensorT<T> tfeat = tm2.apply(tape, silu(tape, tm1.apply(tape, temb)));  // [1, d_time]

        TensorT<T> h = stem.apply(tape, z);
        for (const auto& blk : blocks) {
            // Convolutional residual path with timestep injection.
            TensorT<T> u = blk.c1.apply(tape, silu(tape, group_norm(tape, h, blk.gn_g, blk.gn_b, hp.gn_groups)));
            TensorT<T> tb = reshape(tape, blk.tproj.apply(tape, tfeat), {C});
            u = blk.c2.apply(tape, silu(tape, bias_add_chw(tape, u, tb)));

            // Cross-attention path on the same block input.
            TensorT<T> tokens = chw_to_nc(tape, h);                          // [N, C]
            TensorT<T> q = matmul(tape, tokens, blk.wq);                     // [N, C]
            TensorT<T> km = matmul(tape, prompt_emb, blk.wk);                // [m, C]
            TensorT<T> vm = matmul(tape, prompt_emb, blk.wv);                // [m, C]
            TensorT<T> logits = scale(tape, matmul(tape, q, transpose2d(tape, km)), inv_sqrt_d);
            TensorT<T> attn = softmax_rows(tape, logits);                    // [N, m]
            TensorT<T> ca = matmul(tape, attn, vm);                          // [N, C]
            TensorT<T> injected = nc_to_chw(tape, matmul(tape, ca, blk.wca), z.dim(1), z.dim(2));

            if (trace) trace->push_back(LayerTraceT<T>{attn, ca, q, tokens});
            h = add(tape, add(tape, h, u), injected);
        }
        TensorT<T> out = head.apply(tape, silu(tape, group_norm(tape, h, hgn_g, hgn_b, hp.gn_groups)));
        return out;
    }

    TensorT<T> predict_eps(TapeT<T>& tape, const TensorT<T>& z, int k, const TensorT<T>& prompt_emb) const {
        return forward_with_trace(tape, z, k, prompt_emb, nullptr);
    }

    void collect(std::vector<std::pair<std::string, TensorT<T>>>& out) const {
        stem.collect("unet.stem", out);
        tm1.collect("unet.tm1", out);
        tm2.collect("unet.tm2", out);
        for (size_t l = 0; l < blocks.size(); ++l) blocks[l].collect("unet.block" + std::to_string(l), out);
        out.emplace_back("unet.hgn_g", hgn_g);
        out.emplace_back("unet.hgn_b", hgn_b);
        head.collect("unet.head", out);
    }
};

// --- bundle -------------------------------------------------------------------

template <class T>
struct ToyLdmBundleT {
    ModelHp hp;
    NoiseScheduleT<T> schedule;
    TextEmbedderT<T> text;
    VaeLiteT<T> vae;
    DenoiserT<T> denoiser;

    static ToyLdmBundleT init(const ModelHp& hp) {
        if (hp.image_size % 4 != 0) throw UsageError("bundle: image_size must be divisible by 4");
        if (hp.unet_ch % hp.gn_groups != 0) throw UsageError("bundle: unet_ch must be divisible by gn_groups");
        ToyLdmBundleT b;
        b.hp = hp;
        b.schedule = NoiseScheduleT<T>::make_linear(hp.k_max, static_cast<T>(hp.beta_start),
                                                    static_cast<T>(hp.beta_end));
        b.text = TextEmbedderT<T>(hp.d_t, hp.m_tokens, hp.text_seed);
        Rng rng(hp.init_seed);
        b.vae = VaeLiteT<T>(hp, rng);
        b.denoiser = DenoiserT<T>(hp, rng);
        return b;
    }

    // Every tensor that defines the bundle, in a stable order (used for
    // checkpointing and hashing). The frozen text table is included: it is
    // part of the model's identity even though it is never trained.
    std::vector<std::pair<std::string, TensorT<T>>> named_tensors() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        vae.collect(out);
        denoiser.collect(out);
        out.emplace_back("text.table", text.table);
        out.emplace_back("text.oov", text.oov);
        out.emplace_back("text.pad", text.pad);
        return out;
    }

    std::vector<TensorT<T>> vae_params() {
        std::vector<std::pair<std::string, TensorT<T>>> named;
        vae.collect(named);
        std::vector<TensorT<T>> out;
        for (auto& [n, t] : named) out.push_back(t);
        return out;
    }

    std::vector<TensorT<T>> denoiser_params() {
        std::vector<std::pair<std::string, TensorT<T>>> named;
        denoiser.collect(named);
        std::vector<TensorT<T>> out;
        for (auto& [n, t] : named) out.push_back(t);
        return out;
    }

    void set_trainable(bool on) {
        for (auto& t : vae_params()) t.set_requires_grad(on);
        for (auto& t : denoiser_params()) t.set_requires_grad(on);
    }

    // FNV-1a over the f32 serialization of all tensors in stable order; ties
    // perturbation artifacts to the exact weights they were trained against.
    std::string weights_hash() const {
        Fnv1a64 h;
        for (const auto& [name, t] : named_tensors()) {
            h.update(name.data(), name.size());
            for (int64_t i = 0; i < t.numel(); ++i) {
                const float v = static_cast<float>(t.data()[i]);
                h.update(&v, sizeof(v));
            }
        }
        return h.hex();
    }
};

template <class T>
void save_bundle(const std::string& path, const ToyLdmBundleT<T>& bundle) {
    nlohmann::json manifest = {{"format", "uimm-bundle-v1"}, {"hp", bundle.hp.to_json()}};
    save_checkpoint(path, manifest, bundle.named_tensors());
}

template <class T = float>
ToyLdmBundleT<T> load_bundle(const std::string& path) {
    auto [manifest, tensors] = load_checkpoint<T>(path);
    if (!manifest.contains("format") || manifest["format"] != "uimm-bundle-v1") {
        throw IoError(path + ": not a bundle checkpoint");
    }
    ToyLdmBundleT<T> bundle = ToyLdmBundleT<T>::init(ModelHp::from_json(manifest.at("hp")));
    auto dest = bundle.named_tensors();
    if (dest.size() != tensors.size()) {
        throw IoError(path + ": checkpoint holds " + std::to_string(tensors.size()) + " tensors, model needs " +
                      std::to_string(dest.size()));
    }
    for (size_t i = 0; i < dest.size(); ++i) {
        if (dest[i].first != tensors[i].first) {
            throw IoError(path + ": tensor name mismatch: expected '" + dest[i].first + "', found '" +
                          tensors[i].first + "'");
        }
        if (dest[i].second.shape() != tensors[i].second.shape()) {
            throw IoError(path + ": tensor '" + dest[i].first + "' has shape " +
                          shape_str(tensors[i].second.shape()) + ", model needs " +
                          shape_str(dest[i].second.shape()));
        }
        dest[i].second.vec() = tensors[i].second.vec();
    }
    return bundle;
}

using ToyLdmBundle = ToyLdmBundleT<float>;
using CrossAttnTrace = CrossAttnTraceT<float>;

}  // namespace uimm
