#pragma once

#include <string>

#include "model.hpp"
#include "schedule.hpp"

namespace uimm {

// Perturbation-training objectives. The two core families act on the denoiser's
// cross-attention trace:
//
//   injection:   pull the perturbed image's cross-attention features toward the
//                trace a chosen target image produces under the target prompt;
//   suppression: push the perturbed image's features away from the trace the
//                unmodified image produces under its own prompt (negated MSE).
//
// "Map" variants restate both on the post-softmax attention maps instead of the
// attended feature outputs — the ablation that shows value information matters.
// The two baselines reproduce simpler published attacks for comparison: a
// latent-encoder attack (no diffusion loop at all) and a feature/query attack.
enum class LossKind {
    Inj,
    Sup,
    InjPlusSup,
    MapInj,
    MapSup,
    MapInjPlusSup,
    EncoderBaseline,
    EmbeddingBaseline,
};

inline const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::Inj: return "inj";
        case LossKind::Sup: return "sup";
        case LossKind::InjPlusSup: return "inj+sup";
        case LossKind::MapInj: return "map-inj";
        case LossKind::MapSup: return "map-sup";
        case LossKind::MapInjPlusSup: return "map-inj+sup";
        case LossKind::EncoderBaseline: return "encoder-baseline";
        case LossKind::EmbeddingBaseline: return "embedding-baseline";
    }
    throw UsageError("loss_kind_name: unknown kind");
}

inline LossKind parse_loss_kind(const std::string& s) {
    for (LossKind k : {LossKind::Inj, LossKind::Sup, LossKind::InjPlusSup, LossKind::MapInj, LossKind::MapSup,
                       LossKind::MapInjPlusSup, LossKind::EncoderBaseline, LossKind::EmbeddingBaseline}) {
        if (s == loss_kind_name(k)) return k;
    }
    throw ConfigError("unknown loss '" + s +
                      "' (valid: inj, sup, inj+sup, map-inj, map-sup, map-inj+sup, encoder-baseline, "
                      "embedding-baseline)");
}

// Which ingredients a loss consumes. Trainers use these to decide what to
// compute and which configurations to reject.
inline bool loss_needs_target(LossKind k) {
    return k == LossKind::Inj || k == LossKind::InjPlusSup || k == LossKind::MapInj ||
           k == LossKind::MapInjPlusSup || k == LossKind::EncoderBaseline;
}

inline bool loss_needs_source(LossKind k) {
    return k == LossKind::Sup || k == LossKind::InjPlusSup || k == LossKind::MapSup ||
           k == LossKind::MapInjPlusSup || k == LossKind::EmbeddingBaseline;
}

inline bool loss_uses_timesteps(LossKind k) { return k != LossKind::EncoderBaseline; }

struct LossWeights {
    double inj = 1.0;
    double sup = 1.0;
};

namespace detail_loss {

// Sum over layers of MSE between two traces, on attention maps or on attended
// feature outputs.
template <class T>
TensorT<T> trace_mse_sum(TapeT<T>& tape, const CrossAttnTraceT<T>& a, const CrossAttnTraceT<T>& b, bool on_maps) {
    if (a.size() != b.size() || a.empty()) {
        throw UsageError("trace loss: traces disagree in depth (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    }
    TensorT<T> total;
    for (size_t l = 0; l < a.size(); ++l) {
        TensorT<T> term =
            on_maps ? mse(tape, a[l].attn, b[l].attn) : mse(tape, a[l].ca, b[l].ca);
        total = total.defined() ? add(tape, total, term) : term;
    }
    return total;
}

template <class T>
CrossAttnTraceT<T> trace_of(TapeT<T>& tape, const ToyLdmBundleT<T>& bundle, const TensorT<T>& z_k, int k,
                            const TensorT<T>& emb) {
    CrossAttnTraceT<T> trace;
    bundle.denoiser.forward_with_trace(tape, z_k, k, emb, &trace);
    return trace;
}

template <class T>
CrossAttnTraceT<T> trace_of_const(TapeT<T>& tape, const ToyLdmBundleT<T>& bundle, const TensorT<T>& z_k, int k,
                                  const TensorT<T>& emb) {
    typename TapeT<T>::NoGrad ng(tape);
    return trace_of(tape, bundle, z_k, k, emb);
}

}  // namespace detail_loss

// One timestep's contribution to a trace loss. All three latents must already
// carry the SAME noise draw for this k: the comparison is between denoiser
// reactions to identical corruption, not between different corruptions. Only
// z_adv_k is expected to be connected to the perturbation; reference traces are
// computed without recording.
template <class T>
TensorT<T> trace_loss_term(TapeT<T>& tape, const ToyLdmBundleT<T>& bundle, LossKind kind, const LossWeights& w,
                           const TensorT<T>& z_adv_k, const TensorT<T>& z_clean_k, const TensorT<T>& z_tar_k,
                           int k, const TensorT<T>& src_emb, const TensorT<T>& tar_emb) {
    if (!loss_uses_timesteps(kind)) {
        throw UsageError(std::string("trace_loss_term: ") + loss_kind_name(kind) + " has no timestep loop");
    }
    if (loss_needs_target(kind) && (!z_tar_k.defined() || !tar_emb.defined())) {
        throw UsageError(std::string(loss_kind_name(kind)) + " needs a target latent and target prompt");
    }
    if (loss_needs_source(kind) && (!z_clean_k.defined() || !src_emb.defined())) {
        throw UsageError(std::string(loss_kind_name(kind)) + " needs a clean latent and source prompt");
    }

    const bool on_maps =
        kind == LossKind::MapInj || kind == LossKind::MapSup || kind == LossKind::MapInjPlusSup;

    auto injection = [&]() {
        CrossAttnTraceT<T> adv = detail_loss::trace_of(tape, bundle, z_adv_k, k, tar_emb);
        CrossAttnTraceT<T> tar = detail_loss::trace_of_const(tape, bundle, z_tar_k, k, tar_emb);
        return detail_loss::trace_mse_sum(tape, adv, tar, on_maps);
    };
    auto suppression = [&]() {
        CrossAttnTraceT<T> adv = detail_loss::trace_of(tape, bundle, z_adv_k, k, src_emb);
        CrossAttnTraceT<T> clean = detail_loss::trace_of_const(tape, bundle, z_clean_k, k, src_emb);
        return scale(tape, detail_loss::trace_mse_sum(tape, adv, clean, on_maps), T(-1));
    };

    switch (kind) {
        case LossKind::Inj:
        case LossKind::MapInj:
            return injection();
        case LossKind::Sup:
        case LossKind::MapSup:
            return suppression();
        case LossKind::InjPlusSup:
        case LossKind::MapInjPlusSup:
            return axpby(tape, static_cast<T>(w.inj), injection(), static_cast<T>(w.sup), suppression());
        case LossKind::EmbeddingBaseline: {
            CrossAttnTraceT<T> adv = detail_loss::trace_of(tape, bundle, z_adv_k, k, src_emb);
            CrossAttnTraceT<T> clean = detail_loss::trace_of_const(tape, bundle, z_clean_k, k, src_emb);
            TensorT<T> total;
            for (size_t l = 0; l < adv.size(); ++l) {
                TensorT<T> term = add(tape, mse(tape, adv[l].q, clean[l].q),
                                      mse(tape, adv[l].query_in, clean[l].query_in));
                total = total.defined() ? add(tape, total, term) : term;
            }
            return scale(tape, total, T(-1));
        }
        default:
            throw UsageError("trace_loss_term: unhandled loss kind");
    }
}

// Latent-encoder attack: drag the perturbed image's latent onto the target's.
// No diffusion, no prompts — the whole objective is one MSE in latent space.
template <class T>
TensorT<T> encoder_baseline_loss(TapeT<T>& tape, const TensorT<T>& z_adv, const TensorT<T>& z_tar) {
    if (!z_tar.defined()) throw UsageError("encoder-baseline needs a target latent");
    return mse(tape, z_adv, z_tar);
}

}  // namespace uimm
