#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "losses.hpp"
#include "tensor_io.hpp"

namespace uimm {

// Universal adversarial perturbation training. One perturbation tensor delta,
// bounded in the infinity norm, is optimized with per-sample sign-gradient
// steps so that images carrying it derail prompt-driven editing.

struct UapConfig {
    double epsilon = 10.0 / 255.0;               // ∞-norm budget
    double step_size = 1.0 / 255.0;              // sign step
    std::vector<int> timesteps = {5, 10, 15, 20, 25};
    int epochs = 20;
    LossKind loss = LossKind::InjPlusSup;
    LossWeights weights;
    std::string target_prompt;                   // required by injection kinds
    std::string noise_space = "latent";          // "latent" | "pixel"
    uint64_t seed = 0;
    int batch = 1;  // >1 accumulates gradients over consecutive samples before
                    // stepping; 1 is the faithful per-sample update

    void validate(int k_max) const {
        if (!(epsilon > 0.0) || epsilon > 1.0) throw ConfigError("uap: epsilon must be in (0,1]");
        if (!(step_size > 0.0)) throw ConfigError("uap: step_size must be > 0");
        // epochs == 0 keeps the seeded uniform initialization untouched: the
        // "random noise at the same budget" control arm. The loss is never
        // evaluated then, so loss-dependent requirements only bind for > 0.
        if (epochs < 0) throw ConfigError("uap: epochs must be >= 0");
        if (batch < 1) throw ConfigError("uap: batch must be >= 1");
        if (noise_space != "latent" && noise_space != "pixel") {
            throw ConfigError("uap: noise_space must be 'latent' or 'pixel', got '" + noise_space + "'");
        }
        if (epochs > 0 && loss_uses_timesteps(loss)) {
            if (timesteps.empty()) throw ConfigError("uap: timesteps must not be empty");
            for (int k : timesteps) {
                if (k < 1 || k > k_max) {
                    throw ConfigError("uap: timestep " + std::to_string(k) + " outside [1," + std::to_string(k_max) +
                                      "]");
                }
            }
        }
        // The encoder baseline drives toward a target image but never reads a
        // prompt; every other injection loss needs the textual target too.
        if (epochs > 0 && loss_needs_target(loss) && loss != LossKind::EncoderBaseline && target_prompt.empty()) {
            throw ConfigError(std::string("uap: loss '") + loss_kind_name(loss) + "' needs a target prompt");
        }
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"epsilon", epsilon},
                              {"step_size", step_size},
                              {"timesteps", timesteps},
                              {"epochs", epochs},
                              {"loss", loss_kind_name(loss)},
                              {"inj_weight", weights.inj},
                              {"sup_weight", weights.sup},
                              {"target_prompt", target_prompt},
                              {"noise_space", noise_space},
                              {"seed", seed},
                              {"batch", batch}};
    }

    static UapConfig from_json(const nlohmann::json& j) {
        UapConfig c;
        c.epsilon = j.at("epsilon").get<double>();
        c.step_size = j.at("step_size").get<double>();
        c.timesteps = j.at("timesteps").get<std::vector<int>>();
        c.epochs = j.at("epochs").get<int>();
        c.loss = parse_loss_kind(j.at("loss").get<std::string>());
        c.weights.inj = j.at("inj_weight").get<double>();
        c.weights.sup = j.at("sup_weight").get<double>();
        c.target_prompt = j.at("target_prompt").get<std::string>();
        c.noise_space = j.at("noise_space").get<std::string>();
        c.seed = j.at("seed").get<uint64_t>();
        c.batch = j.at("batch").get<int>();
        return c;
    }
};

struct TrainSample {
    Tensor image;          // [3,S,S] in [0,1]
    std::string prompt;    // source prompt (may be empty for target-only losses)
};

struct UapUpdateInfo {
    int epoch = 0;
    int sample = 0;   // index within the epoch
    double loss = 0.0;
};

// Called after every perturbation update with the post-update delta.
using UapCallback = std::function<void(const UapUpdateInfo&, const Tensor&)>;

struct UapArtifact {
    Tensor delta;                      // [3,S,S] within [-epsilon, epsilon]
    UapConfig config;
    bool data_free = false;
    std::string prior;                 // data-free prior name, if any
    std::string bundle_hash;           // weights the perturbation was trained against
    std::vector<double> epoch_losses;  // mean per-sample loss per epoch
};

namespace detail_uap {

inline void check_image(const Tensor& x, int size, const std::string& who) {
    if (x.rank() != 3 || x.dim(0) != 3 || x.dim(1) != size || x.dim(2) != size) {
        throw ShapeError(who + ": expected [3," + std::to_string(size) + "," + std::to_string(size) + "], got " +
                         shape_str(x.shape()));
    }
}

// delta <- clip(delta - s*sign(grad), -eps, eps). sign(0) == 0: elements with
// no gradient signal stay put instead of drifting.
inline void sign_step(Tensor& delta, double step, double eps) {
    float* d = delta.data();
    const auto& g = delta.grad();
    const float s = static_cast<float>(step);
    const float e = static_cast<float>(eps);
    for (int64_t i = 0; i < delta.numel(); ++i) {
        if (g[static_cast<size_t>(i)] > 0.0f) {
            d[i] -= s;
        } else if (g[static_cast<size_t>(i)] < 0.0f) {
            d[i] += s;
        }
        d[i] = std::min(e, std::max(-e, d[i]));
    }
}

// One optimization pass for one sample. Returns the loss value. Gradients
// accumulate into delta.grad (the caller decides when to step and when to
// zero).
template <class T>
double accumulate_sample_grad(const ToyLdmBundleT<T>& bundle, const UapConfig& cfg, const TensorT<T>& x,
                              const TensorT<T>& delta, const TensorT<T>& src_emb, const TensorT<T>& tar_emb,
                              const TensorT<T>& x_tar, Rng& noise_rng) {
    TapeT<T> tape;
    TensorT<T> x_adv = clamp(tape, add(tape, x, delta), T(0), T(1));

    const bool needs_src = loss_needs_source(cfg.loss);
    const bool needs_tar = loss_needs_target(cfg.loss);
    TensorT<T> loss_total;

    if (cfg.loss == LossKind::EncoderBaseline) {
        TensorT<T> z_adv = bundle.vae.encode(tape, x_adv);
        TensorT<T> z_tar;
        {
            typename TapeT<T>::NoGrad ng(tape);
            z_tar = bundle.vae.encode(tape, x_tar);
        }
        loss_total = encoder_baseline_loss(tape, z_adv, z_tar);
    } else if (cfg.noise_space == "latent") {
        TensorT<T> z_adv = bundle.vae.encode(tape, x_adv);
        TensorT<T> z_clean, z_tar;
        {
            typename TapeT<T>::NoGrad ng(tape);
            if (needs_src) z_clean = bundle.vae.encode(tape, x);
            if (needs_tar) z_tar = bundle.vae.encode(tape, x_tar);
        }
        for (int k : cfg.timesteps) {
            TensorT<T> eps = TensorT<T>::zeros(z_adv.shape());
            eps.fill_normal(noise_rng, T(0), T(1));
            TensorT<T> z_adv_k = add_noise(tape, bundle.schedule, z_adv, k, eps);
            TensorT<T> z_clean_k, z_tar_k;
            {
                typename TapeT<T>::NoGrad ng(tape);
                if (needs_src) z_clean_k = add_noise(tape, bundle.schedule, z_clean, k, eps);
                if (needs_tar) z_tar_k = add_noise(tape, bundle.schedule, z_tar, k, eps);
            }
            TensorT<T> term = trace_loss_term(tape, bundle, cfg.loss, cfg.weights, z_adv_k, z_clean_k, z_tar_k, k,
                                              src_emb, tar_emb);
            loss_total = loss_total.defined() ? add(tape, loss_total, term) : term;
        }
    } else {  // pixel-space noising: corrupt before encoding
        for (int k : cfg.timesteps) {
            TensorT<T> eps = TensorT<T>::zeros(x.shape());
            eps.fill_normal(noise_rng, T(0), T(1));
            TensorT<T> z_adv_k = bundle.vae.encode(tape, add_noise(tape, bundle.schedule, x_adv, k, eps));
            TensorT<T> z_clean_k, z_tar_k;
            {
                typename TapeT<T>::NoGrad ng(tape);
                if (needs_src) {
                    z_clean_k = bundle.vae.encode(tape, add_noise(tape, bundle.schedule, x, k, eps));
                }
                if (needs_tar) {
                    z_tar_k = bundle.vae.encode(tape, add_noise(tape, bundle.schedule, x_tar, k, eps));
                }
            }
            TensorT<T> term = trace_loss_term(tape, bundle, cfg.loss, cfg.weights, z_adv_k, z_clean_k, z_tar_k, k,
                                              src_emb, tar_emb);
            loss_total = loss_total.defined() ? add(tape, loss_total, term) : term;
        }
    }

    const double value = static_cast<double>(loss_total.item());
    tape.backward(loss_total);
    return value;
}

}  // namespace detail_uap

// Data-driven trainer: per-sample sign updates, gradients summed over the
// timestep set, one shared noise draw per (sample, timestep) reused by the
// perturbed/clean/target branches.
inline UapArtifact train_uap(const ToyLdmBundleT<float>& bundle, const std::vector<TrainSample>& samples,
                             const Tensor& target_image, const UapConfig& cfg, const UapCallback& callback = {}) {
    using T = float;
    cfg.validate(bundle.hp.k_max);
    if (samples.empty() && cfg.epochs > 0) throw UsageError("train_uap: no training samples");
    const int size = bundle.hp.image_size;
    for (size_t i = 0; i < samples.size(); ++i) {
        detail_uap::check_image(samples[i].image, size, "train_uap: sample " + std::to_string(i));
        if (loss_needs_source(cfg.loss) && samples[i].prompt.empty()) {
            throw UsageError("train_uap: sample " + std::to_string(i) + " has no prompt but loss '" +
                             loss_kind_name(cfg.loss) + "' needs one");
        }
    }
    TensorT<T> x_tar;
    TensorT<T> tar_emb;
    if (cfg.epochs > 0 && loss_needs_target(cfg.loss)) {
        detail_uap::check_image(target_image, size, "train_uap: target image");
        x_tar = target_image;
        if (cfg.loss != LossKind::EncoderBaseline) tar_emb = bundle.text.embed(cfg.target_prompt);
    }

    UapArtifact art;
    art.config = cfg;
    art.bundle_hash = bundle.weights_hash();
    art.delta = Tensor::zeros({3, size, size});
    {
        Rng init_rng(mix_seed(cfg.seed, 0xD317Aull));
        art.delta.fill_uniform(init_rng, static_cast<float>(-cfg.epsilon), static_cast<float>(cfg.epsilon));
    }
    art.delta.set_requires_grad(true);

    std::vector<TensorT<T>> src_embs(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        if (loss_needs_source(cfg.loss)) src_embs[i] = bundle.text.embed(samples[i].prompt);
    }

    int pending = 0;  // samples whose gradients are accumulated but not stepped
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (size_t i = 0; i < samples.size(); ++i) {
            Rng noise_rng(mix_seed(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)), static_cast<uint64_t>(i)));
            if (pending == 0) art.delta.zero_grad();
            const double value = detail_uap::accumulate_sample_grad(bundle, cfg, samples[i].image, art.delta,
                                                                    src_embs[i], tar_emb, x_tar, noise_rng);
            if (!std::isfinite(value)) {
                throw NumericalError("train_uap: loss diverged at epoch " + std::to_string(epoch) + " sample " +
                                     std::to_string(i) + " (value " + std::to_string(value) + ")");
            }
            epoch_loss += value;
            ++pending;
            if (pending == cfg.batch || i + 1 == samples.size()) {
                detail_uap::sign_step(art.delta, cfg.step_size, cfg.epsilon);
                pending = 0;
                if (callback) callback(UapUpdateInfo{epoch, static_cast<int>(i), value}, art.delta);
            }
        }
        art.epoch_losses.push_back(epoch_loss / static_cast<double>(samples.size()));
        log_debug("uap epoch " + std::to_string(epoch) + " mean loss " +
                  std::to_string(art.epoch_losses.back()));
    }
    art.delta.set_requires_grad(false);
    return art;
}

// Data-free trainer: no real images or prompts; every sample is a freshly
// synthesized prior patch, growing in structural complexity epoch by epoch.
// Only target-driven losses make sense here.
struct DataFreeConfig {
    int samples_per_epoch = 8;
    std::string prior = "jigsaw";  // "jigsaw" | "gaussian"

    void validate() const {
        if (samples_per_epoch < 1) throw ConfigError("data-free: samples_per_epoch must be >= 1");
        if (prior != "jigsaw" && prior != "gaussian") {
            throw ConfigError("data-free: prior must be 'jigsaw' or 'gaussian', got '" + prior + "'");
        }
    }
};

inline UapArtifact train_uap_data_free(const ToyLdmBundleT<float>& bundle, const Tensor& target_image,
                                       const UapConfig& cfg, const DataFreeConfig& df,
                                       const UapCallback& callback = {}) {
    using T = float;
    cfg.validate(bundle.hp.k_max);
    df.validate();
    if (loss_needs_source(cfg.loss)) {
        throw ConfigError(std::string("data-free training cannot use loss '") + loss_kind_name(cfg.loss) +
                          "': there is no clean image or source prompt to suppress against");
    }
    const int size = bundle.hp.image_size;
    TensorT<T> tar_emb;
    if (cfg.epochs > 0) {
        detail_uap::check_image(target_image, size, "train_uap_data_free: target image");
        if (cfg.loss != LossKind::EncoderBaseline) tar_emb = bundle.text.embed(cfg.target_prompt);
    }

    JigsawConfig jig;
    jig.size = size;
    jig.curriculum_len = std::max(1, cfg.epochs);

    UapArtifact art;
    art.config = cfg;
    art.data_free = true;
    art.prior = df.prior;
    art.bundle_hash = bundle.weights_hash();
    art.delta = Tensor::zeros({3, size, size});
    {
        Rng init_rng(mix_seed(cfg.seed, 0xD317Aull));
        art.delta.fill_uniform(init_rng, static_cast<float>(-cfg.epsilon), static_cast<float>(cfg.epsilon));
    }
    art.delta.set_requires_grad(true);

    int pending = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (int i = 0; i < df.samples_per_epoch; ++i) {
            const uint64_t sample_seed =
                mix_seed(mix_seed(cfg.seed, 0xF2EEull), static_cast<uint64_t>(epoch) * 1000003ull +
                                                            static_cast<uint64_t>(i));
            Tensor x_r;
            if (df.prior == "jigsaw") {
                JigsawConfig jig_i = jig;
                jig_i.seed = sample_seed;
                x_r = gen_jigsaw(jig_i, std::min(epoch, jig.curriculum_len - 1));
            } else {
                x_r = gen_gaussian_prior(size, sample_seed);
            }
            Rng noise_rng(mix_seed(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)), static_cast<uint64_t>(i)));
            if (pending == 0) art.delta.zero_grad();
            const double value = detail_uap::accumulate_sample_grad(bundle, cfg, x_r, art.delta, TensorT<T>{},
                                                                    tar_emb, target_image, noise_rng);
            if (!std::isfinite(value)) {
                throw NumericalError("train_uap_data_free: loss diverged at epoch " + std::to_string(epoch) +
                                     " sample " + std::to_string(i) + " (value " + std::to_string(value) + ")");
            }
            epoch_loss += value;
            ++pending;
            if (pending == cfg.batch || i + 1 == df.samples_per_epoch) {
                detail_uap::sign_step(art.delta, cfg.step_size, cfg.epsilon);
                pending = 0;
                if (callback) callback(UapUpdateInfo{epoch, i, value}, art.delta);
            }
        }
        art.epoch_losses.push_back(epoch_loss / static_cast<double>(df.samples_per_epoch));
        log_debug("uap-df epoch " + std::to_string(epoch) + " mean loss " +
                  std::to_string(art.epoch_losses.back()));
    }
    art.delta.set_requires_grad(false);
    return art;
}

// --- test-time immunization ---------------------------------------------------

inline Tensor resize_nearest(const Tensor& t, int h, int w) {
    if (t.rank() != 3) throw ShapeError("resize_nearest: expected [C,H,W], got " + shape_str(t.shape()));
    const int c = t.dim(0), ih = t.dim(1), iw = t.dim(2);
    if (ih == h && iw == w) return t.clone();
    Tensor out = Tensor::zeros({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            const int sy = std::min(ih - 1, static_cast<int>(static_cast<int64_t>(y) * ih / h));
            for (int x = 0; x < w; ++x) {
                const int sx = std::min(iw - 1, static_cast<int>(static_cast<int64_t>(x) * iw / w));
                out.data()[(static_cast<int64_t>(ch) * h + y) * w + x] =
                    t.data()[(static_cast<int64_t>(ch) * ih + sy) * iw + sx];
            }
        }
    }
    return out;
}

// Applying a perturbation at test time: add (resizing if the image size
// differs from the training size) and clamp back to the valid image range.
inline Tensor immunize_image(const Tensor& x, const Tensor& delta) {
    if (x.rank() != 3 || x.dim(0) != 3) {
        throw ShapeError("immunize_image: expected [3,H,W], got " + shape_str(x.shape()));
    }
    Tensor d = resize_nearest(delta, x.dim(1), x.dim(2));
    Tensor out = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        out.data()[i] = std::min(1.0f, std::max(0.0f, x.data()[i] + d.data()[i]));
    }
    return out;
}

// --- artifact I/O ---------------------------------------------------------------

// The perturbation is a plain tensor file; everything needed to interpret it
// rides in a JSON sidecar at <path>.json.
inline void save_uap(const std::string& path, const UapArtifact& art) {
    save_uit1_file(path, art.delta);
    nlohmann::json j = {{"format", "uimm-uap-v1"},
                        {"config", art.config.to_json()},
                        {"data_free", art.data_free},
                        {"prior", art.prior},
                        {"bundle_hash", art.bundle_hash},
                        {"epoch_losses", art.epoch_losses}};
    std::ofstream os(path + ".json");
    if (!os) throw IoError("cannot open for writing: " + path + ".json");
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path + ".json");
}

inline UapArtifact load_uap(const std::string& path) {
    UapArtifact art;
    art.delta = load_uit1_file<float>(path);
    std::ifstream is(path + ".json");
    if (!is) throw IoError("cannot open: " + path + ".json (perturbation sidecar missing)");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ".json: invalid JSON: " + e.what());
    }
    if (!j.contains("format") || j["format"] != "uimm-uap-v1") {
        throw IoError(path + ".json: not a perturbation sidecar");
    }
    art.config = UapConfig::from_json(j.at("config"));
    art.data_free = j.at("data_free").get<bool>();
    art.prior = j.value("prior", std::string());
    art.bundle_hash = j.at("bundle_hash").get<std::string>();
    art.epoch_losses = j.value("epoch_losses", std::vector<double>());

    // Integrity: a perturbation outside its own declared budget is corrupt.
    const float eps = static_cast<float>(art.config.epsilon) + 1e-6f;
    for (int64_t i = 0; i < art.delta.numel(); ++i) {
        if (std::abs(art.delta.data()[i]) > eps) {
            throw IoError(path + ": perturbation exceeds its declared budget at element " + std::to_string(i));
        }
    }
    return art;
}

}  // namespace uimm
