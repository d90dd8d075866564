#include <catch2/catch_amalgamated.hpp>

#include "uimm/config.hpp"

TEST_CASE("config text parsing", "[config]") {
    SECTION("keys, values, comments, blank lines") {
        const std::string text =
            "# run settings\n"
            "epsilon = 0.0392\n"
            "\n"
            "target-prompt = a photo of a red circle\n"
            "epochs=20\r\n"
            "label = \" padded \"\n";
        const auto cfg = uimm::parse_config_text(text);
        REQUIRE(cfg.entries.size() == 4);
        REQUIRE(cfg.get("epsilon") == "0.0392");
        REQUIRE(cfg.get("target-prompt") == "a photo of a red circle");
        REQUIRE(cfg.get("epochs") == "20");
        REQUIRE(cfg.get("label") == " padded ");
    }
    SECTION("underscores normalize to dashes") {
        const auto cfg = uimm::parse_config_text("step_size = 0.004\n");
        REQUIRE(cfg.has("step-size"));
        REQUIRE_FALSE(cfg.has("step_size"));
    }
    SECTION("values keep embedded '#' and '='") {
        const auto cfg = uimm::parse_config_text("prompt = shade #3 = dark\n");
        REQUIRE(cfg.get("prompt") == "shade #3 = dark");
    }
    SECTION("malformed lines are rejected with location") {
        REQUIRE_THROWS_WITH(uimm::parse_config_text("just a line\n", "f.cfg"),
                            Catch::Matchers::ContainsSubstring("f.cfg:1"));
        REQUIRE_THROWS_AS(uimm::parse_config_text("= value\n"), uimm::ConfigError);
        REQUIRE_THROWS_AS(uimm::parse_config_text("bad key = 1\n"), uimm::ConfigError);
        REQUIRE_THROWS_AS(uimm::parse_config_text("a=1\na=2\n"), uimm::ConfigError);
    }
    SECTION("missing key lookup throws") {
        const auto cfg = uimm::parse_config_text("a = 1\n");
        REQUIRE_THROWS_AS(cfg.get("b"), uimm::ConfigError);
    }
    SECTION("missing file is an artifact error") {
        REQUIRE_THROWS_AS(uimm::load_config_file("/nonexistent/path.cfg"), uimm::IoError);
    }
}

TEST_CASE("typed config value parsing", "[config]") {
    SECTION("integers") {
        REQUIRE(uimm::config_to_int("42", "k") == 42);
        REQUIRE(uimm::config_to_int(" -7 ", "k") == -7);
        REQUIRE_THROWS_AS(uimm::config_to_int("7x", "k"), uimm::ConfigError);
        REQUIRE_THROWS_AS(uimm::config_to_int("", "k"), uimm::ConfigError);
    }
    SECTION("doubles") {
        REQUIRE(uimm::config_to_double("0.25", "k") == 0.25);
        REQUIRE(uimm::config_to_double("1e-3", "k") == 1e-3);
        REQUIRE_THROWS_AS(uimm::config_to_double("0.2.5", "k"), uimm::ConfigError);
    }
    SECTION("unsigned 64-bit") {
        REQUIRE(uimm::config_to_u64("18446744073709551615", "k") == UINT64_MAX);
        REQUIRE_THROWS_AS(uimm::config_to_u64("nope", "k"), uimm::ConfigError);
    }
    SECTION("booleans") {
        REQUIRE(uimm::config_to_bool("true", "k"));
        REQUIRE(uimm::config_to_bool("1", "k"));
        REQUIRE(uimm::config_to_bool("Yes", "k"));
        REQUIRE_FALSE(uimm::config_to_bool("off", "k"));
        REQUIRE_THROWS_AS(uimm::config_to_bool("maybe", "k"), uimm::ConfigError);
    }
    SECTION("lists") {
        REQUIRE(uimm::config_to_int_list("5,10, 15 ,20,25", "k") == std::vector<int>{5, 10, 15, 20, 25});
        REQUIRE(uimm::config_to_int_list("", "k").empty());
        REQUIRE(uimm::config_to_u64_list("0,1,2", "k") == std::vector<uint64_t>{0, 1, 2});
        REQUIRE_THROWS_AS(uimm::config_to_int_list("1,,2", "k"), uimm::ConfigError);
    }
}
