#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "testutil.hpp"
#include "uimm/eval.hpp"

namespace fs = std::filesystem;

namespace {

uimm::ToyLdmBundleT<float> make_bundle() {
    auto bundle = uimm::ToyLdmBundleT<float>::init(testutil::tiny_hp<uimm::ModelHp>());
    uimm::Rng rng(2024);
    for (auto& block : bundle.denoiser.blocks) block.wca.fill_uniform(rng, -0.3f, 0.3f);
    return bundle;
}

std::vector<uimm::EvalEntry> make_entries(int n, int size, uint64_t seed) {
    std::vector<uimm::EvalEntry> out;
    uimm::Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        uimm::EvalEntry e;
        e.image = uimm::Tensor::zeros({3, size, size});
        e.image.fill_uniform(rng, 0.05f, 0.95f);
        e.edit_prompt = (i % 2 == 0) ? "blue square" : "red circle";
        e.name = "img_" + std::to_string(i);
        out.push_back(std::move(e));
    }
    return out;
}

uimm::EditParams fast_params() {
    uimm::EditParams p;
    p.steps = 6;
    return p;
}

}  // namespace

TEST_CASE("zero perturbation scores perfect similarity on every row", "[eval]") {
    auto bundle = make_bundle();
    auto entries = make_entries(2, bundle.hp.image_size, 7);
    const std::vector<uint64_t> seeds = {1, 2, 3};

    auto report = uimm::run_experiment(bundle, nullptr, entries, fast_params(), seeds, "control");
    REQUIRE(report.rows.size() == 6);
    for (const auto& row : report.rows) {
        REQUIRE(row.psnr_db == uimm::kPsnrCap);
        REQUIRE(row.ssim == Catch::Approx(1.0).margin(1e-9));
        REQUIRE(row.feat_sim == Catch::Approx(1.0).margin(1e-9));
    }
    // Canonical ordering: image-major, seed-minor.
    REQUIRE(report.rows[0].image == "img_0");
    REQUIRE(report.rows[0].seed == 1);
    REQUIRE(report.rows[2].seed == 3);
    REQUIRE(report.rows[3].image == "img_1");
    REQUIRE(report.label == "control");
    REQUIRE_FALSE(report.config_hash.empty());
}

TEST_CASE("a real perturbation degrades similarity", "[eval]") {
    auto bundle = make_bundle();
    auto entries = make_entries(2, bundle.hp.image_size, 8);
    const std::vector<uint64_t> seeds = {11, 12};

    uimm::Rng rng(9);
    uimm::Tensor delta = uimm::Tensor::zeros({3, bundle.hp.image_size, bundle.hp.image_size});
    delta.fill_uniform(rng, -10.0f / 255.0f, 10.0f / 255.0f);

    auto report = uimm::run_experiment(bundle, &delta, entries, fast_params(), seeds, "perturbed");
    REQUIRE(report.rows.size() == 4);
    for (const auto& row : report.rows) {
        REQUIRE(std::isfinite(row.psnr_db));
        REQUIRE(row.psnr_db < uimm::kPsnrCap);  // edits diverged
        REQUIRE(row.ssim < 1.0);
        REQUIRE(row.ssim > -1.0);
        REQUIRE(row.feat_sim <= 1.0);
    }
    const auto agg = report.aggregate();
    REQUIRE(std::isfinite(agg.mean_psnr));
    REQUIRE(agg.mean_ssim < 1.0);
}

TEST_CASE("clean-edit cache is transparent and filled", "[eval]") {
    auto bundle = make_bundle();
    auto entries = make_entries(2, bundle.hp.image_size, 10);
    const std::vector<uint64_t> seeds = {5, 6};

    uimm::Rng rng(11);
    uimm::Tensor delta = uimm::Tensor::zeros({3, bundle.hp.image_size, bundle.hp.image_size});
    delta.fill_uniform(rng, -0.03f, 0.03f);

    auto no_cache = uimm::run_experiment(bundle, &delta, entries, fast_params(), seeds, "x");
    uimm::CleanEditCache cache;
    auto first = uimm::run_experiment(bundle, &delta, entries, fast_params(), seeds, "x", &cache);
    REQUIRE(cache.edits.size() == 4);
    auto second = uimm::run_experiment(bundle, &delta, entries, fast_params(), seeds, "x", &cache);
    REQUIRE(cache.edits.size() == 4);

    REQUIRE(no_cache.rows.size() == first.rows.size());
    for (size_t i = 0; i < no_cache.rows.size(); ++i) {
        REQUIRE(no_cache.rows[i].psnr_db == first.rows[i].psnr_db);
        REQUIRE(first.rows[i].psnr_db == second.rows[i].psnr_db);
        REQUIRE(first.rows[i].ssim == second.rows[i].ssim);
        REQUIRE(first.rows[i].feat_sim == second.rows[i].feat_sim);
    }
}

TEST_CASE("evaluation failures carry the image identity", "[eval]") {
    auto bundle = make_bundle();
    auto entries = make_entries(1, bundle.hp.image_size + 4, 12);  // wrong size
    entries[0].name = "broken_image";
    try {
        uimm::run_experiment(bundle, nullptr, entries, fast_params(), {1}, "bad");
        FAIL("expected ShapeError");
    } catch (const uimm::ShapeError& e) {
        REQUIRE(std::string(e.what()).find("broken_image") != std::string::npos);
    }

    REQUIRE_THROWS_AS(uimm::run_experiment(bundle, nullptr, {}, fast_params(), {1}, "x"), uimm::UsageError);
    auto ok = make_entries(1, bundle.hp.image_size, 13);
    REQUIRE_THROWS_AS(uimm::run_experiment(bundle, nullptr, ok, fast_params(), {}, "x"), uimm::UsageError);
}

TEST_CASE("eval entries load from a dataset manifest", "[eval]") {
    const fs::path dir = fs::temp_directory_path() / "uimm_eval_test" / "ds";
    fs::create_directories(dir);
    auto manifest = uimm::gen_shapes_dataset(3, 8, 77, dir.string());

    auto e1 = uimm::load_eval_entries(manifest, 1);
    REQUIRE(e1.size() == 3);
    REQUIRE(e1[0].name == "img_00000.ppm");
    REQUIRE(e1[0].edit_prompt == manifest.entries[0].edit_prompt_1);
    REQUIRE(e1[0].image.shape() == std::vector<int>{3, 8, 8});

    auto e2 = uimm::load_eval_entries(manifest, 2);
    REQUIRE(e2[1].edit_prompt == manifest.entries[1].edit_prompt_2);

    REQUIRE_THROWS_AS(uimm::load_eval_entries(manifest, 3), uimm::UsageError);
}
