// Command-line harness for the immunization laboratory.
//
// Every command reads its parameters from flags plus an optional `--config`
// key=value file (flags win; unknown config keys are a hard error), writes a
// resolved-config snapshot next to its outputs, and never mutates its inputs.
// Exit codes: 0 success, 2 configuration error, 3 missing/unreadable artifact,
// 4 numerical failure, 1 internal error. Errors print a single line to stderr
// of the form `error: <category>: <message>`.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uimm/config.hpp"
#include "uimm/data.hpp"
#include "uimm/edit.hpp"
#include "uimm/eval.hpp"
#include "uimm/metrics.hpp"
#include "uimm/model.hpp"
#include "uimm/pretrain.hpp"
#include "uimm/purify.hpp"
#include "uimm/uap.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using uimm::Tensor;

namespace {

// ---------------------------------------------------------------------------
// small utilities

std::string one_line(std::string s) {
    for (auto& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

int to_int_checked(long long v, const std::string& name) {
    if (v < INT32_MIN || v > INT32_MAX) throw uimm::ConfigError("config: '" + name + "' out of range");
    return static_cast<int>(v);
}

std::string with_ext(const std::string& path, const std::string& ext) {
    fs::path p(path);
    p.replace_extension(ext);
    return p.string();
}

void ensure_parent_dir(const std::string& file_path) {
    const fs::path parent = fs::path(file_path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

void write_snapshot(const std::string& path, const json& j) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw uimm::IoError("cannot write config snapshot '" + path + "'");
    out << j.dump(2) << "\n";
    if (!out) throw uimm::IoError("failed writing config snapshot '" + path + "'");
}

void write_losses_csv(const std::string& path,
                      const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw uimm::IoError("cannot write loss curve '" + path + "'");
    out << "series,step,loss\n";
    for (const auto& [name, values] : series) {
        for (size_t i = 0; i < values.size(); ++i) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.10g", values[i]);
            out << name << "," << i << "," << buf << "\n";
        }
    }
    if (!out) throw uimm::IoError("failed writing loss curve '" + path + "'");
}

void write_pgm(const std::string& path, const std::vector<uint8_t>& pix, int h, int w) {
    if (h < 1 || w < 1 || pix.size() != static_cast<size_t>(h) * static_cast<size_t>(w)) {
        throw uimm::UsageError("write_pgm: pixel buffer does not match dimensions");
    }
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw uimm::IoError("cannot write image '" + path + "'");
    out << "P5\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
    if (!out) throw uimm::IoError("failed writing image '" + path + "'");
}

std::vector<fs::path> list_ppm_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& de : fs::directory_iterator(dir)) {
        if (de.is_regular_file() && de.path().extension() == ".ppm") out.push_back(de.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Inputs are never overwritten: the output directory must not be the
// directory the inputs live in.
void ensure_distinct_output_dir(const fs::path& input, const fs::path& out_dir) {
    const fs::path in_dir = fs::is_directory(input) ? input : input.parent_path();
    if (fs::weakly_canonical(in_dir) == fs::weakly_canonical(out_dir)) {
        throw uimm::ConfigError("output directory '" + out_dir.string() +
                                "' coincides with the input location; commands never overwrite their inputs");
    }
}

std::vector<uimm::TrainSample> load_samples(const uimm::ShapeDatasetManifest& manifest, int limit) {
    std::vector<uimm::TrainSample> samples;
    for (const auto& entry : manifest.entries) {
        if (limit > 0 && static_cast<int>(samples.size()) >= limit) break;
        samples.push_back(uimm::TrainSample{uimm::load_image(entry.path), entry.prompt});
    }
    if (samples.empty()) throw uimm::ConfigError("dataset '" + std::to_string(manifest.entries.size()) +
                                                 " entries' yielded no training samples");
    return samples;
}

std::string manifest_path_of(const std::string& data) {
    fs::path p(data);
    if (fs::is_directory(p)) p /= "manifest.tsv";
    return p.string();
}

void print_aggregate(const std::string& tag, const uimm::MetricReport& report) {
    const auto agg = report.aggregate();
    std::cout << tag << ": psnr " << fmt(agg.mean_psnr) << "±" << fmt(agg.std_psnr) << " dB, ssim "
              << fmt(agg.mean_ssim) << "±" << fmt(agg.std_ssim) << ", feat " << fmt(agg.mean_feat) << "±"
              << fmt(agg.std_feat) << " (" << report.rows.size() << " rows)\n";
}

// ---------------------------------------------------------------------------
// flag/config resolution

// Precedence: explicit flag > config-file key > built-in default. Every
// registered option must be resolved exactly once so finish() can reject
// config keys that match no option of the command.
class Resolver {
  public:
    Resolver(CLI::App& cmd, const std::string& config_path) : cmd_(cmd) {
        if (!config_path.empty()) cfg_ = uimm::load_config_file(config_path);
    }

    std::optional<std::string> raw(const std::string& name, const std::string& flag_value) {
        const std::string* c = nullptr;
        if (cfg_.has(name)) {
            consumed_.insert(name);
            c = &cfg_.get(name);
        }
        if (cmd_.count("--" + name) > 0) return flag_value;
        if (c) return *c;
        return std::nullopt;
    }

    std::string str(const std::string& name, const std::string& fv, const std::string& def) {
        auto r = raw(name, fv);
        return r ? *r : def;
    }
    std::string str_required(const std::string& name, const std::string& fv) {
        auto r = raw(name, fv);
        if (!r || r->empty()) throw uimm::ConfigError("missing required option '--" + name + "'");
        return *r;
    }
    int integer(const std::string& name, const std::string& fv, int def) {
        auto r = raw(name, fv);
        return r ? to_int_checked(uimm::config_to_int(*r, name), name) : def;
    }
    double number(const std::string& name, const std::string& fv, double def) {
        auto r = raw(name, fv);
        return r ? uimm::config_to_double(*r, name) : def;
    }
    uint64_t u64_required(const std::string& name, const std::string& fv) {
        auto r = raw(name, fv);
        if (!r) {
            throw uimm::ConfigError("missing required option '--" + name +
                                    "' (seeds are always explicit, there is no default)");
        }
        return uimm::config_to_u64(*r, name);
    }
    std::optional<uint64_t> u64_optional(const std::string& name, const std::string& fv) {
        auto r = raw(name, fv);
        if (!r) return std::nullopt;
        return uimm::config_to_u64(*r, name);
    }
    bool boolean(const std::string& name, bool def) {
        const std::string* c = nullptr;
        if (cfg_.has(name)) {
            consumed_.insert(name);
            c = &cfg_.get(name);
        }
        if (cmd_.count("--" + name) > 0) return true;
        if (c) return uimm::config_to_bool(*c, name);
        return def;
    }
    std::vector<int> int_list(const std::string& name, const std::string& fv, std::vector<int> def) {
        auto r = raw(name, fv);
        return r ? uimm::config_to_int_list(*r, name) : def;
    }
    std::vector<uint64_t> u64_list_required(const std::string& name, const std::string& fv) {
        auto r = raw(name, fv);
        if (!r) throw uimm::ConfigError("missing required option '--" + name + "'");
        auto v = uimm::config_to_u64_list(*r, name);
        if (v.empty()) throw uimm::ConfigError("'--" + name + "' must list at least one value");
        return v;
    }

    void finish() const {
        for (const auto& kv : cfg_.entries) {
            if (!consumed_.count(kv.first)) {
                throw uimm::ConfigError("unknown config key '" + kv.first + "' for this command");
            }
        }
    }

  private:
    CLI::App& cmd_;
    uimm::ConfigMap cfg_;
    std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOpts {
    std::string config, out_dir, count, size, seed;
};

void setup_gen_data(CLI::App& app) {
    auto o = std::make_shared<GenDataOpts>();
    CLI::App* sub = app.add_subcommand("gen-data", "Generate a synthetic labeled shape dataset with manifest");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--out-dir", o->out_dir, "directory receiving images and manifest.tsv");
    sub->add_option("--count", o->count, "number of images (default 200)");
    sub->add_option("--size", o->size, "square image side in pixels (default 32)");
    sub->add_option("--seed", o->seed, "generator seed (required)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string out_dir = r.str_required("out-dir", o->out_dir);
        const int count = r.integer("count", o->count, 200);
        const int size = r.integer("size", o->size, 32);
        const uint64_t seed = r.u64_required("seed", o->seed);
        r.finish();

        fs::create_directories(out_dir);
        const auto manifest = uimm::gen_shapes_dataset(count, size, seed, out_dir);
        write_snapshot((fs::path(out_dir) / "gen-data.config.json").string(),
                       json{{"command", "gen-data"},
                            {"out-dir", out_dir},
                            {"count", count},
                            {"size", size},
                            {"seed", seed}});
        std::cout << "gen-data: wrote " << manifest.entries.size() << " images and manifest.tsv under " << out_dir
                  << "\n";
    });
}

// ---------------------------------------------------------------------------
// train-model

struct TrainModelOpts {
    std::string config, data, out, seed, image_size, limit;
    std::string vae_steps, denoiser_steps, batch, vae_lr, denoiser_lr, prompt_dropout;
};

void setup_train_model(CLI::App& app) {
    auto o = std::make_shared<TrainModelOpts>();
    CLI::App* sub = app.add_subcommand("train-model", "Pretrain the toy latent editing model on a dataset");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--data", o->data, "dataset directory or manifest.tsv path");
    sub->add_option("--out", o->out, "output model bundle path (.uit1)");
    sub->add_option("--seed", o->seed, "training seed (required)");
    sub->add_option("--image-size", o->image_size, "square image side the model operates on (default 32)");
    sub->add_option("--limit", o->limit, "use only the first N dataset entries (0 = all)");
    sub->add_option("--vae-steps", o->vae_steps, "autoencoder optimizer steps (default 400)");
    sub->add_option("--denoiser-steps", o->denoiser_steps, "denoiser optimizer steps (default 1200)");
    sub->add_option("--batch", o->batch, "minibatch size (default 8)");
    sub->add_option("--vae-lr", o->vae_lr, "autoencoder learning rate (default 2e-3)");
    sub->add_option("--denoiser-lr", o->denoiser_lr, "denoiser learning rate (default 2e-3)");
    sub->add_option("--prompt-dropout", o->prompt_dropout,
                    "probability of training with the empty prompt (default 0.1)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string data = r.str_required("data", o->data);
        const std::string out = r.str_required("out", o->out);
        uimm::PretrainConfig pcfg;
        pcfg.seed = r.u64_required("seed", o->seed);
        const int image_size = r.integer("image-size", o->image_size, 32);
        const int limit = r.integer("limit", o->limit, 0);
        pcfg.vae_steps = r.integer("vae-steps", o->vae_steps, pcfg.vae_steps);
        pcfg.denoiser_steps = r.integer("denoiser-steps", o->denoiser_steps, pcfg.denoiser_steps);
        pcfg.batch = r.integer("batch", o->batch, pcfg.batch);
        pcfg.vae_lr = r.number("vae-lr", o->vae_lr, pcfg.vae_lr);
        pcfg.denoiser_lr = r.number("denoiser-lr", o->denoiser_lr, pcfg.denoiser_lr);
        pcfg.prompt_dropout = r.number("prompt-dropout", o->prompt_dropout, pcfg.prompt_dropout);
        r.finish();

        const auto manifest = uimm::load_manifest(manifest_path_of(data));
        const auto samples = load_samples(manifest, limit);

        uimm::ModelHp hp;
        hp.image_size = image_size;
        auto bundle = uimm::ToyLdmBundleT<float>::init(hp);
        const auto result = uimm::pretrain_toy(bundle, samples, pcfg);

        ensure_parent_dir(out);
        uimm::save_bundle(out, bundle);
        write_losses_csv(with_ext(out, ".losses.csv"),
                         {{"vae", result.vae_losses}, {"denoiser", result.denoiser_losses}});
        write_snapshot(with_ext(out, ".config.json"), json{{"command", "train-model"},
                                                           {"data", data},
                                                           {"out", out},
                                                           {"seed", pcfg.seed},
                                                           {"image-size", image_size},
                                                           {"limit", limit},
                                                           {"vae-steps", pcfg.vae_steps},
                                                           {"denoiser-steps", pcfg.denoiser_steps},
                                                           {"batch", pcfg.batch},
                                                           {"vae-lr", pcfg.vae_lr},
                                                           {"denoiser-lr", pcfg.denoiser_lr},
                                                           {"prompt-dropout", pcfg.prompt_dropout}});
        auto ends = [](const std::vector<double>& v) {
            return v.empty() ? std::string("n/a") : fmt(v.front(), 5) + " -> " + fmt(v.back(), 5);
        };
        std::cout << "train-model: vae loss " << ends(result.vae_losses) << ", denoiser loss "
                  << ends(result.denoiser_losses) << "\n";
        std::cout << "train-model: wrote " << out << "\n";
    });
}

// ---------------------------------------------------------------------------
// train-uap

struct TrainUapOpts {
    std::string config, model, data, out, seed, limit;
    std::string epsilon, step_size, timesteps, epochs, loss, weight_inj, weight_sup;
    std::string target_image, target_prompt, noise_space, batch, prior, samples_per_epoch;
    bool data_free = false;
};

void setup_train_uap(CLI::App& app) {
    auto o = std::make_shared<TrainUapOpts>();
    CLI::App* sub = app.add_subcommand("train-uap", "Train a universal immunizing perturbation against a model");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--model", o->model, "model bundle path");
    sub->add_option("--data", o->data, "dataset directory or manifest.tsv (unused with --data-free or --epochs 0)");
    sub->add_option("--out", o->out, "output perturbation path (.uit1; sidecar .json and loss CSV follow)");
    sub->add_option("--seed", o->seed, "training seed (required)");
    sub->add_option("--limit", o->limit, "use only the first N dataset entries (0 = all)");
    sub->add_option("--epsilon", o->epsilon, "infinity-norm budget (default 10/255)");
    sub->add_option("--step-size", o->step_size, "sign-gradient step (default 1/255)");
    sub->add_option("--timesteps", o->timesteps, "comma list of diffusion timesteps (default 5,10,15,20,25)");
    sub->add_option("--epochs", o->epochs, "training epochs; 0 keeps the seeded random init (default 20)");
    sub->add_option("--loss", o->loss,
                    "objective: inj, sup, inj+sup, map-inj, map-sup, map-inj+sup, encoder-baseline, "
                    "embedding-baseline (default inj+sup)");
    sub->add_option("--weight-inj", o->weight_inj, "injection term weight (default 1)");
    sub->add_option("--weight-sup", o->weight_sup, "suppression term weight (default 1)");
    sub->add_option("--target-image", o->target_image, "target image steering injection losses");
    sub->add_option("--target-prompt", o->target_prompt, "target prompt steering injection losses");
    sub->add_option("--noise-space", o->noise_space, "where timestep noise is applied: latent|pixel (default latent)");
    sub->add_option("--batch", o->batch, "gradient accumulation before each sign step (default 1)");
    sub->add_flag("--data-free", o->data_free, "train on synthesized priors instead of a dataset");
    sub->add_option("--prior", o->prior, "data-free prior: jigsaw|gaussian (default jigsaw)");
    sub->add_option("--samples-per-epoch", o->samples_per_epoch, "data-free samples per epoch (default 8)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string model = r.str_required("model", o->model);
        const std::string data = r.str("data", o->data, "");
        const std::string out = r.str_required("out", o->out);
        uimm::UapConfig cfg;
        cfg.seed = r.u64_required("seed", o->seed);
        const int limit = r.integer("limit", o->limit, 0);
        cfg.epsilon = r.number("epsilon", o->epsilon, cfg.epsilon);
        cfg.step_size = r.number("step-size", o->step_size, cfg.step_size);
        cfg.timesteps = r.int_list("timesteps", o->timesteps, cfg.timesteps);
        cfg.epochs = r.integer("epochs", o->epochs, cfg.epochs);
        cfg.loss = uimm::parse_loss_kind(r.str("loss", o->loss, uimm::loss_kind_name(cfg.loss)));
        cfg.weights.inj = r.number("weight-inj", o->weight_inj, cfg.weights.inj);
        cfg.weights.sup = r.number("weight-sup", o->weight_sup, cfg.weights.sup);
        const std::string target_image = r.str("target-image", o->target_image, "");
        cfg.target_prompt = r.str("target-prompt", o->target_prompt, "");
        cfg.noise_space = r.str("noise-space", o->noise_space, cfg.noise_space);
        cfg.batch = r.integer("batch", o->batch, cfg.batch);
        const bool data_free = r.boolean("data-free", false);
        uimm::DataFreeConfig df;
        df.prior = r.str("prior", o->prior, df.prior);
        df.samples_per_epoch = r.integer("samples-per-epoch", o->samples_per_epoch, df.samples_per_epoch);
        r.finish();

        const auto bundle = uimm::load_bundle<float>(model);
        const bool needs_target = cfg.epochs > 0 && uimm::loss_needs_target(cfg.loss);
        if (needs_target && target_image.empty()) {
            throw uimm::ConfigError("loss '" + std::string(uimm::loss_kind_name(cfg.loss)) +
                                    "' requires --target-image");
        }
        Tensor x_tar;
        if (!target_image.empty()) x_tar = uimm::load_image(target_image);

        uimm::UapArtifact art;
        if (data_free) {
            art = uimm::train_uap_data_free(bundle, x_tar, cfg, df);
        } else {
            std::vector<uimm::TrainSample> samples;
            if (cfg.epochs > 0) {
                if (data.empty()) throw uimm::ConfigError("--data is required unless --data-free or --epochs 0");
                samples = load_samples(uimm::load_manifest(manifest_path_of(data)), limit);
            }
            art = uimm::train_uap(bundle, samples, x_tar, cfg);
        }

        ensure_parent_dir(out);
        uimm::save_uap(out, art);
        write_losses_csv(with_ext(out, ".losses.csv"), {{"epoch_mean", art.epoch_losses}});
        write_snapshot(with_ext(out, ".config.json"),
                       json{{"command", "train-uap"},
                            {"model", model},
                            {"data", data},
                            {"out", out},
                            {"limit", limit},
                            {"data-free", data_free},
                            {"prior", df.prior},
                            {"samples-per-epoch", df.samples_per_epoch},
                            {"target-image", target_image},
                            {"uap", art.config.to_json()}});
        if (art.epoch_losses.empty()) {
            std::cout << "train-uap: kept seeded random perturbation (0 epochs)\n";
        } else {
            std::cout << "train-uap: epoch mean loss " << fmt(art.epoch_losses.front(), 5) << " -> "
                      << fmt(art.epoch_losses.back(), 5) << " over " << art.epoch_losses.size() << " epochs\n";
        }
        std::cout << "train-uap: wrote " << out << "\n";
    });
}

// ---------------------------------------------------------------------------
// immunize

struct ImmunizeOpts {
    std::string config, uap, input, out_dir;
};

void setup_immunize(CLI::App& app) {
    auto o = std::make_shared<ImmunizeOpts>();
    CLI::App* sub = app.add_subcommand("immunize", "Apply a trained perturbation to images (clamped to [0,1])");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--uap", o->uap, "perturbation artifact path");
    sub->add_option("--input", o->input, "image file or directory of .ppm images");
    sub->add_option("--out-dir", o->out_dir, "directory receiving immunized images (same file names)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string uap = r.str_required("uap", o->uap);
        const std::string input = r.str_required("input", o->input);
        const std::string out_dir = r.str_required("out-dir", o->out_dir);
        r.finish();

        const auto art = uimm::load_uap(uap);
        if (!fs::exists(input)) throw uimm::IoError("input '" + input + "' does not exist");
        std::vector<fs::path> inputs;
        if (fs::is_directory(input)) {
            inputs = list_ppm_files(input);
            if (inputs.empty()) throw uimm::IoError("input directory '" + input + "' holds no .ppm images");
        } else {
            inputs = {fs::path(input)};
        }
        ensure_distinct_output_dir(fs::path(input), fs::path(out_dir));
        fs::create_directories(out_dir);

        for (const auto& in_path : inputs) {
            const Tensor x = uimm::load_image(in_path.string());
            const Tensor immunized = uimm::immunize_image(x, art.delta);
            uimm::save_image(immunized, (fs::path(out_dir) / in_path.filename()).string());
        }
        write_snapshot((fs::path(out_dir) / "immunize.config.json").string(),
                       json{{"command", "immunize"}, {"uap", uap}, {"input", input}, {"out-dir", out_dir}});
        std::cout << "immunize: wrote " << inputs.size() << " images under " << out_dir << "\n";
    });
}

// ---------------------------------------------------------------------------
// edit

struct EditOpts {
    std::string config, model, input, prompt, out, strength, guidance, steps, seed;
};

void setup_edit(CLI::App& app) {
    auto o = std::make_shared<EditOpts>();
    CLI::App* sub = app.add_subcommand("edit", "Run one prompt-driven image-to-image edit");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--model", o->model, "model bundle path");
    sub->add_option("--input", o->input, "source image (.ppm)");
    sub->add_option("--prompt", o->prompt, "edit prompt");
    sub->add_option("--out", o->out, "output image path (.ppm)");
    sub->add_option("--strength", o->strength, "re-noising strength in [0,1] (default 0.8)");
    sub->add_option("--guidance", o->guidance, "classifier-free guidance weight (default 7.5)");
    sub->add_option("--steps", o->steps, "sampler budget for a full-schedule edit (default 50)");
    sub->add_option("--seed", o->seed, "noise seed (required)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string model = r.str_required("model", o->model);
        const std::string input = r.str_required("input", o->input);
        const std::string prompt = r.str_required("prompt", o->prompt);
        const std::string out = r.str_required("out", o->out);
        uimm::EditParams params;
        params.strength = r.number("strength", o->strength, params.strength);
        params.guidance = r.number("guidance", o->guidance, params.guidance);
        params.steps = r.integer("steps", o->steps, params.steps);
        const uint64_t seed = r.u64_required("seed", o->seed);
        r.finish();

        const auto bundle = uimm::load_bundle<float>(model);
        const Tensor x = uimm::load_image(input);
        const Tensor edited = uimm::edit_img2img(bundle, x, prompt, params, seed);
        ensure_parent_dir(out);
        uimm::save_image(edited, out);
        write_snapshot(with_ext(out, ".config.json"), json{{"command", "edit"},
                                                           {"model", model},
                                                           {"input", input},
                                                           {"prompt", prompt},
                                                           {"out", out},
                                                           {"strength", params.strength},
                                                           {"guidance", params.guidance},
                                                           {"steps", params.steps},
                                                           {"seed", seed}});
        std::cout << "edit: wrote " << out << "\n";
    });
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
    std::string config, model, data, uap, out_dir, label, seeds, edit_prompt_index, skip, limit;
    std::string strength, guidance, steps;
    std::string purify, purify_quality, purify_kernel, purify_k, purify_steps, purify_seed;
};

void setup_evaluate(CLI::App& app) {
    auto o = std::make_shared<EvaluateOpts>();
    CLI::App* sub = app.add_subcommand(
        "evaluate", "Measure how strongly a perturbation degrades prompt-driven edits on a dataset");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--model", o->model, "model bundle path");
    sub->add_option("--data", o->data, "dataset directory or manifest.tsv");
    sub->add_option("--uap", o->uap, "perturbation artifact path");
    sub->add_option("--out-dir", o->out_dir, "directory receiving <label>.csv/.svg and the config snapshot");
    sub->add_option("--label", o->label, "experiment label (default: perturbation file stem)");
    sub->add_option("--seeds", o->seeds, "comma list of edit seeds (required)");
    sub->add_option("--edit-prompt-index", o->edit_prompt_index, "which manifest edit prompt to use: 1|2 (default 1)");
    sub->add_option("--skip", o->skip, "skip the first N dataset entries (held-out splits; default 0)");
    sub->add_option("--limit", o->limit, "evaluate at most N entries after skipping (0 = all)");
    sub->add_option("--strength", o->strength, "re-noising strength in [0,1] (default 0.8)");
    sub->add_option("--guidance", o->guidance, "classifier-free guidance weight (default 7.5)");
    sub->add_option("--steps", o->steps, "sampler budget (default 50)");
    sub->add_option("--purify", o->purify,
                    "counter-defense applied to immunized images before editing: none|jpeg|mean|diffpure "
                    "(default none; the clean baseline is never purified)");
    sub->add_option("--purify-quality", o->purify_quality, "jpeg quality in [1,100] (default 75)");
    sub->add_option("--purify-kernel", o->purify_kernel, "mean filter kernel, odd (default 3)");
    sub->add_option("--purify-k", o->purify_k, "diffpure corruption depth (default 10)");
    sub->add_option("--purify-steps", o->purify_steps, "diffpure sampler budget (default 10)");
    sub->add_option("--purify-seed", o->purify_seed, "diffpure noise seed (required with --purify diffpure)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string model = r.str_required("model", o->model);
        const std::string data = r.str_required("data", o->data);
        const std::string uap = r.str_required("uap", o->uap);
        const std::string out_dir = r.str_required("out-dir", o->out_dir);
        const std::string label = r.str("label", o->label, fs::path(uap).stem().string());
        const auto seeds = r.u64_list_required("seeds", o->seeds);
        const int prompt_index = r.integer("edit-prompt-index", o->edit_prompt_index, 1);
        const int skip = r.integer("skip", o->skip, 0);
        const int limit = r.integer("limit", o->limit, 0);
        uimm::EditParams params;
        params.strength = r.number("strength", o->strength, params.strength);
        params.guidance = r.number("guidance", o->guidance, params.guidance);
        params.steps = r.integer("steps", o->steps, params.steps);
        const std::string purify = r.str("purify", o->purify, "none");
        const int pq = r.integer("purify-quality", o->purify_quality, 75);
        const int pk = r.integer("purify-kernel", o->purify_kernel, 3);
        uimm::DiffPureParams dp;
        dp.k = r.integer("purify-k", o->purify_k, dp.k);
        dp.steps = r.integer("purify-steps", o->purify_steps, dp.steps);
        const auto purify_seed = r.u64_optional("purify-seed", o->purify_seed);
        r.finish();
        if (skip < 0 || limit < 0) throw uimm::ConfigError("--skip/--limit must be >= 0");

        const auto bundle = uimm::load_bundle<float>(model);
        const auto art = uimm::load_uap(uap);
        if (art.bundle_hash != bundle.weights_hash()) {
            uimm::log_info("perturbation was trained against a different model; measuring transfer");
        }
        auto entries = uimm::load_eval_entries(uimm::load_manifest(manifest_path_of(data)), prompt_index);
        if (skip >= static_cast<int>(entries.size())) {
            throw uimm::ConfigError("--skip " + std::to_string(skip) + " leaves no entries (dataset has " +
                                    std::to_string(entries.size()) + ")");
        }
        entries.erase(entries.begin(), entries.begin() + skip);
        if (limit > 0 && static_cast<int>(entries.size()) > limit) entries.resize(static_cast<size_t>(limit));

        uimm::ImageTransform post{};
        if (purify == "jpeg") {
            post = [pq](const Tensor& x) { return uimm::jpeg_lite(x, pq); };
        } else if (purify == "mean") {
            post = [pk](const Tensor& x) { return uimm::mean_smooth(x, pk); };
        } else if (purify == "diffpure") {
            if (!purify_seed) throw uimm::ConfigError("--purify diffpure requires --purify-seed");
            dp.seed = *purify_seed;
            post = [&bundle, dp](const Tensor& x) { return uimm::diffpure_lite(bundle, x, dp); };
        } else if (purify != "none") {
            throw uimm::ConfigError("--purify must be none|jpeg|mean|diffpure, got '" + purify + "'");
        }
        if (purify != "diffpure" && purify_seed) {
            throw uimm::ConfigError("--purify-seed only applies to --purify diffpure");
        }

        auto report = uimm::run_experiment(bundle, &art.delta, entries, params, seeds, label, nullptr, post);

        fs::create_directories(out_dir);
        const std::string csv = (fs::path(out_dir) / (label + ".csv")).string();
        const std::string svg = (fs::path(out_dir) / (label + ".svg")).string();
        uimm::write_report_csv(report, csv);
        uimm::write_report_svg(report, svg);
        json snap{{"command", "evaluate"}, {"model", model},
                  {"data", data},          {"uap", uap},
                  {"out-dir", out_dir},    {"label", label},
                  {"seeds", seeds},        {"edit-prompt-index", prompt_index},
                  {"skip", skip},          {"limit", limit},
                  {"strength", params.strength},
                  {"guidance", params.guidance},
                  {"steps", params.steps}, {"purify", purify}};
        if (purify == "jpeg") snap["purify-quality"] = pq;
        if (purify == "mean") snap["purify-kernel"] = pk;
        if (purify == "diffpure") {
            snap["purify-k"] = dp.k;
            snap["purify-steps"] = dp.steps;
            snap["purify-seed"] = dp.seed;
        }
        write_snapshot((fs::path(out_dir) / (label + ".config.json")).string(), snap);
        print_aggregate("evaluate[" + label + "]", report);
        std::cout << "evaluate: wrote " << csv << " and " << svg << "\n";
    });
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOpts {
    std::string config, model, data, out_dir, seed, seeds, variants;
    std::string target_image, target_prompt, epsilon, step_size, timesteps, epochs;
    std::string limit, eval_skip, eval_limit, edit_prompt_index, strength, guidance, steps;
};

struct VariantSpec {
    std::string name;
    uimm::LossKind loss = uimm::LossKind::Inj;
    bool data_free = false;
    bool noise_control = false;
};

VariantSpec parse_variant(const std::string& token) {
    VariantSpec v;
    v.name = token;
    if (token == "noise") {
        v.noise_control = true;
        return v;
    }
    std::string base = token;
    const std::string suffix = "-df";
    if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
        v.data_free = true;
        base = base.substr(0, base.size() - suffix.size());
    }
    v.loss = uimm::parse_loss_kind(base);
    return v;
}

void setup_ablate(CLI::App& app) {
    auto o = std::make_shared<AblateOpts>();
    CLI::App* sub = app.add_subcommand(
        "ablate", "Train several perturbation variants under one budget and compare their held-out efficacy");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--model", o->model, "model bundle path");
    sub->add_option("--data", o->data, "dataset directory or manifest.tsv");
    sub->add_option("--out-dir", o->out_dir, "directory receiving per-variant artifacts, reports, summary.csv");
    sub->add_option("--seed", o->seed, "perturbation training seed (required)");
    sub->add_option("--seeds", o->seeds, "comma list of evaluation edit seeds (required)");
    sub->add_option("--variants", o->variants,
                    "comma list of variants: any loss name, loss-df for data-free, noise for the untrained "
                    "random-perturbation control (default inj+sup,inj,inj-df)");
    sub->add_option("--target-image", o->target_image, "target image steering injection losses");
    sub->add_option("--target-prompt", o->target_prompt, "target prompt steering injection losses");
    sub->add_option("--epsilon", o->epsilon, "infinity-norm budget (default 10/255)");
    sub->add_option("--step-size", o->step_size, "sign-gradient step (default 1/255)");
    sub->add_option("--timesteps", o->timesteps, "comma list of diffusion timesteps (default 5,10,15,20,25)");
    sub->add_option("--epochs", o->epochs, "training epochs per variant (default 20)");
    sub->add_option("--limit", o->limit, "train on only the first N dataset entries (0 = all)");
    sub->add_option("--eval-skip", o->eval_skip, "skip the first N entries when evaluating (default 0)");
    sub->add_option("--eval-limit", o->eval_limit, "evaluate at most N entries after skipping (0 = all)");
    sub->add_option("--edit-prompt-index", o->edit_prompt_index, "which manifest edit prompt to use: 1|2 (default 1)");
    sub->add_option("--strength", o->strength, "re-noising strength in [0,1] (default 0.8)");
    sub->add_option("--guidance", o->guidance, "classifier-free guidance weight (default 7.5)");
    sub->add_option("--steps", o->steps, "sampler budget (default 50)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string model = r.str_required("model", o->model);
        const std::string data = r.str_required("data", o->data);
        const std::string out_dir = r.str_required("out-dir", o->out_dir);
        uimm::UapConfig base;
        base.seed = r.u64_required("seed", o->seed);
        const auto eval_seeds = r.u64_list_required("seeds", o->seeds);
        const std::string variants_str = r.str("variants", o->variants, "inj+sup,inj,inj-df");
        const std::string target_image = r.str("target-image", o->target_image, "");
        base.target_prompt = r.str("target-prompt", o->target_prompt, "");
        base.epsilon = r.number("epsilon", o->epsilon, base.epsilon);
        base.step_size = r.number("step-size", o->step_size, base.step_size);
        base.timesteps = r.int_list("timesteps", o->timesteps, base.timesteps);
        base.epochs = r.integer("epochs", o->epochs, base.epochs);
        const int limit = r.integer("limit", o->limit, 0);
        const int eval_skip = r.integer("eval-skip", o->eval_skip, 0);
        const int eval_limit = r.integer("eval-limit", o->eval_limit, 0);
        const int prompt_index = r.integer("edit-prompt-index", o->edit_prompt_index, 1);
        uimm::EditParams params;
        params.strength = r.number("strength", o->strength, params.strength);
        params.guidance = r.number("guidance", o->guidance, params.guidance);
        params.steps = r.integer("steps", o->steps, params.steps);
        r.finish();
        if (eval_skip < 0 || eval_limit < 0 || limit < 0) {
            throw uimm::ConfigError("--limit/--eval-skip/--eval-limit must be >= 0");
        }

        std::vector<VariantSpec> variants;
        {
            size_t start = 0;
            while (start <= variants_str.size()) {
                const size_t comma = variants_str.find(',', start);
                const std::string tok = uimm::trim_ws(
                    variants_str.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
                if (!tok.empty()) variants.push_back(parse_variant(tok));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
        }
        if (variants.empty()) throw uimm::ConfigError("--variants must name at least one variant");

        const auto bundle = uimm::load_bundle<float>(model);
        const auto manifest = uimm::load_manifest(manifest_path_of(data));
        const auto samples = load_samples(manifest, limit);
        Tensor x_tar;
        if (!target_image.empty()) x_tar = uimm::load_image(target_image);

        auto entries = uimm::load_eval_entries(manifest, prompt_index);
        if (eval_skip >= static_cast<int>(entries.size())) {
            throw uimm::ConfigError("--eval-skip leaves no evaluation entries");
        }
        entries.erase(entries.begin(), entries.begin() + eval_skip);
        if (eval_limit > 0 && static_cast<int>(entries.size()) > eval_limit) {
            entries.resize(static_cast<size_t>(eval_limit));
        }

        fs::create_directories(out_dir);
        uimm::CleanEditCache cache;  // clean edits are shared by every variant
        std::vector<std::pair<std::string, uimm::MetricAggregate>> summary;
        for (const auto& v : variants) {
            uimm::UapConfig cfg = base;
            uimm::UapArtifact art;
            if (v.noise_control) {
                cfg.epochs = 0;
                art = uimm::train_uap(bundle, {}, Tensor{}, cfg);
            } else {
                cfg.loss = v.loss;
                if (uimm::loss_needs_target(cfg.loss) && target_image.empty()) {
                    throw uimm::ConfigError("variant '" + v.name + "' requires --target-image");
                }
                art = v.data_free ? uimm::train_uap_data_free(bundle, x_tar, cfg, uimm::DataFreeConfig{})
                                  : uimm::train_uap(bundle, samples, x_tar, cfg);
            }
            const std::string uap_path = (fs::path(out_dir) / ("uap-" + v.name + ".uit1")).string();
            uimm::save_uap(uap_path, art);
            write_losses_csv(with_ext(uap_path, ".losses.csv"), {{"epoch_mean", art.epoch_losses}});

            auto report = uimm::run_experiment(bundle, &art.delta, entries, params, eval_seeds, v.name, &cache);
            uimm::write_report_csv(report, (fs::path(out_dir) / (v.name + ".csv")).string());
            uimm::write_report_svg(report, (fs::path(out_dir) / (v.name + ".svg")).string());
            summary.emplace_back(v.name, report.aggregate());
            print_aggregate("ablate[" + v.name + "]", report);
        }

        const std::string summary_path = (fs::path(out_dir) / "summary.csv").string();
        {
            std::ofstream outf(summary_path, std::ios::binary);
            if (!outf) throw uimm::IoError("cannot write '" + summary_path + "'");
            outf << "variant,psnr_mean,psnr_std,ssim_mean,ssim_std,feat_mean,feat_std\n";
            for (const auto& [name, agg] : summary) {
                char buf[256];
                std::snprintf(buf, sizeof(buf), "%s,%.10f,%.10f,%.10f,%.10f,%.10f,%.10f", name.c_str(),
                              agg.mean_psnr, agg.std_psnr, agg.mean_ssim, agg.std_ssim, agg.mean_feat,
                              agg.std_feat);
                outf << buf << "\n";
            }
        }
        write_snapshot((fs::path(out_dir) / "ablate.config.json").string(),
                       json{{"command", "ablate"},
                            {"model", model},
                            {"data", data},
                            {"out-dir", out_dir},
                            {"variants", variants_str},
                            {"target-image", target_image},
                            {"limit", limit},
                            {"eval-skip", eval_skip},
                            {"eval-limit", eval_limit},
                            {"edit-prompt-index", prompt_index},
                            {"seeds", eval_seeds},
                            {"strength", params.strength},
                            {"guidance", params.guidance},
                            {"steps", params.steps},
                            {"uap", base.to_json()}});
        std::cout << "ablate: wrote " << summary_path << "\n";
    });
}

// ---------------------------------------------------------------------------
// purify

struct PurifyOpts {
    std::string config, kind, input, out_dir, model, quality, kernel, k, steps, seed;
};

void setup_purify(CLI::App& app) {
    auto o = std::make_shared<PurifyOpts>();
    CLI::App* sub = app.add_subcommand("purify", "Apply a purification counter-defense to images");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--kind", o->kind, "purification kind: jpeg|mean|diffpure");
    sub->add_option("--input", o->input, "image file or directory of .ppm images");
    sub->add_option("--out-dir", o->out_dir, "directory receiving purified images (same file names)");
    sub->add_option("--model", o->model, "model bundle path (diffpure only)");
    sub->add_option("--quality", o->quality, "jpeg quality in [1,100] (default 75)");
    sub->add_option("--kernel", o->kernel, "mean filter kernel, odd (default 3)");
    sub->add_option("--k", o->k, "diffpure corruption depth (default 10)");
    sub->add_option("--steps", o->steps, "diffpure sampler budget (default 10)");
    sub->add_option("--seed", o->seed, "diffpure noise seed (required for diffpure)");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string kind = r.str_required("kind", o->kind);
        const std::string input = r.str_required("input", o->input);
        const std::string out_dir = r.str_required("out-dir", o->out_dir);
        const std::string model = r.str("model", o->model, "");
        const int quality = r.integer("quality", o->quality, 75);
        const int kernel = r.integer("kernel", o->kernel, 3);
        uimm::DiffPureParams dp;
        dp.k = r.integer("k", o->k, dp.k);
        dp.steps = r.integer("steps", o->steps, dp.steps);
        const auto seed = r.u64_optional("seed", o->seed);
        r.finish();

        std::function<Tensor(const Tensor&)> apply;
        std::unique_ptr<uimm::ToyLdmBundleT<float>> bundle;
        if (kind == "jpeg") {
            apply = [quality](const Tensor& x) { return uimm::jpeg_lite(x, quality); };
        } else if (kind == "mean") {
            apply = [kernel](const Tensor& x) { return uimm::mean_smooth(x, kernel); };
        } else if (kind == "diffpure") {
            if (model.empty()) throw uimm::ConfigError("--kind diffpure requires --model");
            if (!seed) throw uimm::ConfigError("--kind diffpure requires --seed");
            dp.seed = *seed;
            bundle = std::make_unique<uimm::ToyLdmBundleT<float>>(uimm::load_bundle<float>(model));
            apply = [&bundle, dp](const Tensor& x) { return uimm::diffpure_lite(*bundle, x, dp); };
        } else {
            throw uimm::ConfigError("--kind must be jpeg|mean|diffpure, got '" + kind + "'");
        }
        if (kind != "diffpure" && seed) {
            throw uimm::ConfigError("--seed only applies to --kind diffpure (other kinds are deterministic)");
        }

        if (!fs::exists(input)) throw uimm::IoError("input '" + input + "' does not exist");
        std::vector<fs::path> inputs;
        if (fs::is_directory(input)) {
            inputs = list_ppm_files(input);
            if (inputs.empty()) throw uimm::IoError("input directory '" + input + "' holds no .ppm images");
        } else {
            inputs = {fs::path(input)};
        }
        ensure_distinct_output_dir(fs::path(input), fs::path(out_dir));
        fs::create_directories(out_dir);
        for (const auto& in_path : inputs) {
            const Tensor x = uimm::load_image(in_path.string());
            uimm::save_image(apply(x), (fs::path(out_dir) / in_path.filename()).string());
        }
        json snap{{"command", "purify"}, {"kind", kind}, {"input", input}, {"out-dir", out_dir}};
        if (kind == "jpeg") snap["quality"] = quality;
        if (kind == "mean") snap["kernel"] = kernel;
        if (kind == "diffpure") {
            snap["model"] = model;
            snap["k"] = dp.k;
            snap["steps"] = dp.steps;
            snap["seed"] = dp.seed;
        }
        write_snapshot((fs::path(out_dir) / "purify.config.json").string(), snap);
        std::cout << "purify[" << kind << "]: wrote " << inputs.size() << " images under " << out_dir << "\n";
    });
}

// ---------------------------------------------------------------------------
// attn-dump

struct AttnDumpOpts {
    std::string config, model, input, prompt, out, k, seed, scale, uap;
};

void setup_attn_dump(CLI::App& app) {
    auto o = std::make_shared<AttnDumpOpts>();
    CLI::App* sub = app.add_subcommand(
        "attn-dump", "Export per-layer, per-token text-attention maps for one image as a grayscale PGM grid");
    sub->add_option("--config", o->config, "key=value config file; flags override its entries");
    sub->add_option("--model", o->model, "model bundle path");
    sub->add_option("--input", o->input, "source image (.ppm)");
    sub->add_option("--prompt", o->prompt, "prompt whose token attention is visualized");
    sub->add_option("--out", o->out, "output grid path (.pgm); rows are layers, columns are tokens");
    sub->add_option("--k", o->k, "diffusion timestep at which attention is read (default 25; 0 = clean latent)");
    sub->add_option("--seed", o->seed, "noise seed (required)");
    sub->add_option("--scale", o->scale, "integer nearest-neighbor upscaling of each map (default 4)");
    sub->add_option("--uap", o->uap, "optional perturbation applied to the image before encoding");
    sub->callback([o, sub]() {
        Resolver r(*sub, o->config);
        const std::string model = r.str_required("model", o->model);
        const std::string input = r.str_required("input", o->input);
        const std::string prompt = r.str_required("prompt", o->prompt);
        const std::string out = r.str_required("out", o->out);
        const int k = r.integer("k", o->k, 25);
        const uint64_t seed = r.u64_required("seed", o->seed);
        const int scale = r.integer("scale", o->scale, 4);
        const std::string uap = r.str("uap", o->uap, "");
        r.finish();
        if (scale < 1) throw uimm::ConfigError("--scale must be >= 1");

        const auto bundle = uimm::load_bundle<float>(model);
        if (k < 0 || k > bundle.hp.k_max) {
            throw uimm::ConfigError("--k must be in [0," + std::to_string(bundle.hp.k_max) + "], got " +
                                    std::to_string(k));
        }
        Tensor x = uimm::load_image(input);
        if (!uap.empty()) x = uimm::immunize_image(x, uimm::load_uap(uap).delta);

        uimm::Tape tape;
        tape.set_recording(false);
        Tensor z = bundle.vae.encode(tape, x);
        if (k > 0) {
            uimm::Rng rng(seed);
            Tensor eps = Tensor::zeros(z.shape());
            eps.fill_normal(rng, 0.0f, 1.0f);
            z = uimm::add_noise(tape, bundle.schedule, z, k, eps);
        }
        uimm::CrossAttnTraceT<float> trace;
        const Tensor emb = bundle.text.embed(prompt);
        bundle.denoiser.forward_with_trace(tape, z, k, emb, &trace);

        const int ls = bundle.hp.latent_size();
        const int layers = static_cast<int>(trace.size());
        const int tokens = emb.dim(0);
        const int cell = ls * scale;
        const int sep = 2;
        const int grid_h = layers * cell + (layers + 1) * sep;
        const int grid_w = tokens * cell + (tokens + 1) * sep;
        std::vector<uint8_t> pix(static_cast<size_t>(grid_h) * static_cast<size_t>(grid_w), 255);
        for (int l = 0; l < layers; ++l) {
            const Tensor& attn = trace[static_cast<size_t>(l)].attn;  // [ls*ls, tokens]
            for (int t = 0; t < tokens; ++t) {
                float lo = attn.data()[t], hi = attn.data()[t];
                for (int i = 1; i < ls * ls; ++i) {
                    const float v = attn.data()[static_cast<int64_t>(i) * tokens + t];
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                const float range = (hi - lo) > 1e-12f ? (hi - lo) : 1.0f;
                const int oy = sep + l * (cell + sep);
                const int ox = sep + t * (cell + sep);
                for (int y = 0; y < cell; ++y) {
                    for (int xx = 0; xx < cell; ++xx) {
                        const float v =
                            attn.data()[static_cast<int64_t>((y / scale) * ls + (xx / scale)) * tokens + t];
                        const float n = (v - lo) / range;
                        pix[static_cast<size_t>(oy + y) * static_cast<size_t>(grid_w) + static_cast<size_t>(ox + xx)] =
                            static_cast<uint8_t>(std::lround(255.0f * n));
                    }
                }
            }
        }
        write_pgm(out, pix, grid_h, grid_w);
        write_snapshot(with_ext(out, ".config.json"), json{{"command", "attn-dump"},
                                                           {"model", model},
                                                           {"input", input},
                                                           {"prompt", prompt},
                                                           {"out", out},
                                                           {"k", k},
                                                           {"seed", seed},
                                                           {"scale", scale},
                                                           {"uap", uap}});
        std::cout << "attn-dump: wrote " << out << " (" << layers << "x" << tokens << " grid)\n";
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale laboratory for universal image immunization against prompt-driven editing"};
    app.require_subcommand(1);
    setup_gen_data(app);
    setup_train_model(app);
    setup_train_uap(app);
    setup_immunize(app);
    setup_edit(app);
    setup_evaluate(app);
    setup_ablate(app);
    setup_purify(app);
    setup_attn_dump(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const uimm::ConfigError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const uimm::ShapeError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const uimm::UsageError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const uimm::IoError& e) {
        std::cerr << "error: missing-artifact: " << one_line(e.what()) << "\n";
        return 3;
    } catch (const uimm::NumericalError& e) {
        std::cerr << "error: numerical: " << one_line(e.what()) << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}
