#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "edit.hpp"
#include "metrics.hpp"
#include "uap.hpp"

namespace uimm {

// Immunization effectiveness protocol: edit the unprotected image and the
// immunized image with the SAME prompt, seed, and sampler settings, then score
// how far the immunization pushed the edit away from its unprotected outcome.
// Lower similarity = the perturbation disrupted the editor more.

struct EvalEntry {
    Tensor image;             // [3,S,S] in [0,1]
    std::string edit_prompt;  // prompt driving the simulated malicious edit
    std::string name;         // row identity in reports
};

inline std::vector<EvalEntry> load_eval_entries(const ShapeDatasetManifest& manifest, int edit_prompt_index = 1) {
    if (edit_prompt_index != 1 && edit_prompt_index != 2) {
        throw UsageError("load_eval_entries: edit_prompt_index must be 1 or 2, got " +
                         std::to_string(edit_prompt_index));
    }
    std::vector<EvalEntry> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        EvalEntry entry;
        entry.image = load_image(e.path);
        entry.edit_prompt = (edit_prompt_index == 1) ? e.edit_prompt_1 : e.edit_prompt_2;
        entry.name = e.file;
        out.push_back(std::move(entry));
    }
    return out;
}

// Clean-image edits depend only on (entry, seed, bundle, edit params) — never
// on the perturbation — so experiment variants comparing perturbations against
// the same baseline can share one cache across runs.
struct CleanEditCache {
    std::map<std::pair<size_t, uint64_t>, Tensor> edits;
};

// Optional hook applied to the immunized image before editing (counter-defense
// evaluation: does the perturbation survive purification?). The clean baseline
// is never transformed.
using ImageTransform = std::function<Tensor(const Tensor&)>;

inline MetricReport run_experiment(const ToyLdmBundleT<float>& bundle, const Tensor* delta,
                                   const std::vector<EvalEntry>& entries, const EditParams& params,
                                   const std::vector<uint64_t>& seeds, const std::string& label,
                                   CleanEditCache* cache = nullptr, const ImageTransform& post_immunize = {}) {
    params.validate();
    if (entries.empty()) throw UsageError("run_experiment: no evaluation entries");
    if (seeds.empty()) throw UsageError("run_experiment: no edit seeds");

    MetricReport report;
    report.label = label;
    {
        Fnv1a64 h;
        const std::string bh = bundle.weights_hash();
        h.update(bh.data(), bh.size());
        h.update(&params.strength, sizeof(params.strength));
        h.update(&params.guidance, sizeof(params.guidance));
        h.update(&params.steps, sizeof(params.steps));
        for (uint64_t s : seeds) h.update(&s, sizeof(s));
        report.config_hash = h.hex();
    }

    // The structural-similarity window never exceeds the image; production
    // sizes keep the standard 11, unit-scale models shrink it.
    const int ssim_window = std::min(11, bundle.hp.image_size);

    for (size_t i = 0; i < entries.size(); ++i) {
        const EvalEntry& entry = entries[i];
        const auto with_context = [&entry](const auto& err) {
            using E = std::decay_t<decltype(err)>;
            return E("entry '" + entry.name + "': " + err.what());
        };
        try {
            detail_uap::check_image(entry.image, bundle.hp.image_size, "entry");
            Tensor immunized;
            if (delta) {
                immunized = immunize_image(entry.image, *delta);
                if (post_immunize) immunized = post_immunize(immunized);
            }

            for (uint64_t seed : seeds) {
                Tensor clean_edit;
                const auto key = std::make_pair(i, seed);
                if (cache) {
                    auto it = cache->edits.find(key);
                    if (it != cache->edits.end()) clean_edit = it->second;
                }
                if (!clean_edit.defined()) {
                    clean_edit = edit_img2img(bundle, entry.image, entry.edit_prompt, params, seed);
                    if (cache) cache->edits.emplace(key, clean_edit);
                }

                // Without a perturbation the immunized image IS the clean
                // image, and the deterministic editor would reproduce the
                // same output bit for bit; reuse it instead of recomputing.
                Tensor imm_edit =
                    delta ? edit_img2img(bundle, immunized, entry.edit_prompt, params, seed) : clean_edit;

                MetricRow row;
                row.image = entry.name;
                row.seed = seed;
                row.psnr_db = psnr(clean_edit, imm_edit);
                row.ssim = ssim(clean_edit, imm_edit, ssim_window);
                row.feat_sim = feat_sim(bundle, clean_edit, imm_edit);
                report.rows.push_back(std::move(row));
            }
        } catch (const ShapeError& e) {
            throw with_context(e);
        } catch (const UsageError& e) {
            throw with_context(e);
        } catch (const IoError& e) {
            throw with_context(e);
        } catch (const NumericalError& e) {
            throw with_context(e);
        }
    }
    report.sort_rows();
    return report;
}

}  // namespace uimm
