#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "testutil.hpp"
#include "uimm/tensor_io.hpp"

namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    fs::path dir = fs::temp_directory_path() / "uimm_io_test";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("uit1 round-trip is bit-identical", "[io]") {
    uimm::Rng rng(5);
    uimm::Tensor t = uimm::Tensor::zeros({3, 4, 5});
    t.fill_uniform(rng, -2.0f, 2.0f);
    const fs::path p = temp_dir() / "roundtrip.uit1";
    uimm::save_uit1_file(p.string(), t);
    uimm::Tensor back = uimm::load_uit1_file<float>(p.string());
    REQUIRE(back.shape() == t.shape());
    REQUIRE(back.vec() == t.vec());
}

TEST_CASE("uit1 survives double narrowing round-trip", "[io]") {
    uimm::TensorT<double> t = uimm::TensorT<double>::from_data({2, 2}, {0.25, -1.5, 3.0, 0.125});
    const fs::path p = temp_dir() / "narrow.uit1";
    uimm::save_uit1_file(p.string(), t);
    auto back = uimm::load_uit1_file<double>(p.string());
    REQUIRE(back.vec() == t.vec());  // dyadic values survive f32 exactly
}

TEST_CASE("truncated tensor file reports byte offset", "[io]") {
    uimm::Tensor t = uimm::Tensor::full({4, 4}, 1.0f);
    const fs::path p = temp_dir() / "trunc.uit1";
    uimm::save_uit1_file(p.string(), t);
    // Chop the payload.
    fs::resize_file(p, fs::file_size(p) - 10);
    try {
        uimm::load_uit1_file<float>(p.string());
        FAIL("expected IoError");
    } catch (const uimm::IoError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("byte offset") != std::string::npos);
        REQUIRE(msg.find(p.string()) != std::string::npos);
    }
}

TEST_CASE("bad magic is rejected", "[io]") {
    const fs::path p = temp_dir() / "badmagic.uit1";
    std::ofstream os(p, std::ios::binary);
    os.write("NOPE\x01\x00\x00\x00\x02\x00\x00\x00", 12);
    os.close();
    REQUIRE_THROWS_AS(uimm::load_uit1_file<float>(p.string()), uimm::IoError);
}

TEST_CASE("implausible rank or dims rejected", "[io]") {
    const fs::path p = temp_dir() / "badrank.uit1";
    {
        std::ofstream os(p, std::ios::binary);
        os.write("UIT1", 4);
        const uint32_t rank = 200;
        os.write(reinterpret_cast<const char*>(&rank), 4);
    }
    REQUIRE_THROWS_AS(uimm::load_uit1_file<float>(p.string()), uimm::IoError);
}

TEST_CASE("missing file raises IoError naming the path", "[io]") {
    try {
        uimm::load_uit1_file<float>("/nonexistent/nowhere.uit1");
        FAIL("expected IoError");
    } catch (const uimm::IoError& e) {
        REQUIRE(std::string(e.what()).find("/nonexistent/nowhere.uit1") != std::string::npos);
    }
}

TEST_CASE("checkpoint round-trip preserves manifest and tensors", "[io]") {
    uimm::Rng rng(9);
    std::vector<std::pair<std::string, uimm::Tensor>> tensors;
    uimm::Tensor a = uimm::Tensor::zeros({2, 3});
    a.fill_uniform(rng, -1.0f, 1.0f);
    uimm::Tensor b = uimm::Tensor::zeros({4});
    b.fill_uniform(rng, -1.0f, 1.0f);
    tensors.emplace_back("layer.w", a);
    tensors.emplace_back("layer.b", b);

    nlohmann::json manifest = {{"format", "test-v1"}, {"seed", 42}};
    const fs::path p = temp_dir() / "ckpt.uim1";
    uimm::save_checkpoint(p.string(), manifest, tensors);

    auto [m2, t2] = uimm::load_checkpoint<float>(p.string());
    REQUIRE(m2["format"] == "test-v1");
    REQUIRE(m2["seed"] == 42);
    REQUIRE(t2.size() == 2);
    REQUIRE(t2[0].first == "layer.w");
    REQUIRE(t2[0].second.vec() == a.vec());
    REQUIRE(t2[1].first == "layer.b");
    REQUIRE(t2[1].second.vec() == b.vec());
}

TEST_CASE("checkpoint with corrupt manifest is rejected", "[io]") {
    const fs::path p = temp_dir() / "badmanifest.uim1";
    {
        std::ofstream os(p, std::ios::binary);
        os.write("UIM1", 4);
        const uint32_t len = 5;
        os.write(reinterpret_cast<const char*>(&len), 4);
        os.write("{oops", 5);
    }
    REQUIRE_THROWS_AS(uimm::load_checkpoint<float>(p.string()), uimm::IoError);
}
