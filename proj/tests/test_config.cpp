#include "doctest.h"
#include "mdsep/config.hpp"

using namespace mdsep;

TEST_CASE("config parsing handles comments, blanks, and whitespace") {
    auto c = RunConfig::parse_text(
        "# a comment\n"
        "\n"
        "  seed = 9   # trailing comment\n"
        "model.preset=desk\n");
    CHECK(c.get_size("seed") == 9);
    CHECK(c.get("model.preset") == "desk");
}

TEST_CASE("config parsing rejects malformed input") {
    CHECK_THROWS_AS(RunConfig::parse_text("just words\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse_text("= value\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse_text("a = 1\na = 2\n"), ConfigError);
}

TEST_CASE("typed getters validate their values") {
    auto c = RunConfig::parse_text("x = abc\nn = -3\nb = maybe\n");
    CHECK_THROWS_AS(c.get_double("x"), ConfigError);
    CHECK_THROWS_AS(c.get_size("n"), ConfigError);
    CHECK_THROWS_AS(c.get_bool("b", true), ConfigError);
    CHECK_THROWS_AS(c.get("missing"), ConfigError);
    CHECK(c.get_double("y", 2.5) == 2.5);
}

TEST_CASE("lists split on commas and trim entries") {
    auto c = RunConfig::parse_text("names = a, b ,c\nwidths = 8,16\n");
    CHECK(c.get_list("names", "") == std::vector<std::string>{"a", "b", "c"});
    CHECK(c.get_size_list("widths", "") == std::vector<std::size_t>{8, 16});
    CHECK(c.get_size_list("empty", "").empty());
}

TEST_CASE("unused keys are reported, consumed and defaulted keys are not") {
    auto c = RunConfig::parse_text("a = 1\nb = 2\n");
    c.get_size("a");
    CHECK_THROWS_AS(c.reject_unknown(), ConfigError);
    c.get_size("b");
    c.reject_unknown();
}

TEST_CASE("resolved text records defaults and overrides") {
    auto c = RunConfig::parse_text("a = 1\n");
    c.get_size("a");
    c.get("missing", "fallback");
    c.set("a", "7");
    const std::string text = c.resolved_text();
    CHECK(text.find("a=7") != std::string::npos);
    CHECK(text.find("missing=fallback") != std::string::npos);
}

TEST_CASE("model section builds presets and custom shapes") {
    auto desk = RunConfig::parse_text("model.preset = desk\nmodel.mode = individual\n");
    ModelConfig m = model_from_config(desk);
    CHECK(m.mode == SharingMode::individual);
    CHECK(m.blocks.size() == 3);

    auto custom = RunConfig::parse_text(
        "model.preset = custom\n"
        "model.widths = 8,16\n"
        "model.res_blocks = 1\n"
        "model.input_resolution = 16\n");
    ModelConfig mc = model_from_config(custom);
    CHECK(mc.num_sep_layers() == 4);
    CHECK(mc.blocks[1].width == 16);

    auto bad = RunConfig::parse_text("model.preset = galactic\n");
    CHECK_THROWS_AS(model_from_config(bad), ConfigError);
}

TEST_CASE("optim section overrides defaults per prefix") {
    auto c = RunConfig::parse_text(
        "optim.finetune.lr0 = 0.5\n"
        "optim.finetune.epochs = 4\n"
        "optim.finetune.decay_epochs = 2\n");
    OptimConfig o = optim_from_config(c, "optim.finetune", preset_desk_finetune());
    CHECK(o.lr0 == 0.5);
    CHECK(o.epochs == 4);
    CHECK(o.decay_epochs == std::vector<std::size_t>{2});
    CHECK(o.momentum == 0.9);
}

TEST_CASE("domain data section builds synthetic specs and loads splits") {
    auto c = RunConfig::parse_text(
        "data.domains = toy\n"
        "data.toy.kind = stripes\n"
        "data.toy.classes = 3\n"
        "data.toy.size = 16\n"
        "data.toy.train = 12\n"
        "data.toy.test = 6\n"
        "data.toy.weight_decay = 0.002\n");
    auto names = domain_names_from_config(c);
    REQUIRE(names == std::vector<std::string>{"toy"});
    DomainDataConfig d = domain_data_from_config(c, "toy");
    CHECK(d.weight_decay == 0.002);
    Dataset train = load_domain_split(d, "train");
    CHECK(train.images.shape()[0] == 12);
    CHECK(train.num_classes == 3);
    CHECK_THROWS_AS(load_domain_split(d, "val"), DataError);
    c.reject_unknown();

    auto empty = RunConfig::parse_text("seed = 1\n");
    CHECK_THROWS_AS(domain_names_from_config(empty), ConfigError);
}
