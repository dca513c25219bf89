#include <doctest.h>

#include <cmath>
#include <fstream>
#include <string>

#include "splittrain/experiment.hpp"
#include "temp_dir.hpp"

using namespace splittrain;
namespace fs = std::filesystem;

namespace {

const std::string kMinimal = R"({
  "dataset": {"path": "ds", "generate": {"classes": 3, "backgrounds": 4, "signatures": 1,
              "poses": 2, "height": 32, "width": 32, "held_out_backgrounds": [3]}},
  "output": "out"
})";

std::string with_field(const std::string& section_key, const std::string& insert) {
  auto text = kMinimal;
  const auto pos = text.find(section_key);
  REQUIRE(pos != std::string::npos);
  text.insert(pos + section_key.size(), insert);
  return text;
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

RunRecord record(const std::string& label, std::uint64_t seed, double acc) {
  RunRecord r;
  r.method = "split";
  r.label = label;
  r.tap = 15;
  r.seed = seed;
  r.test_accuracy = acc;
  r.test_count = 120;
  r.random_bg_accuracy = acc / 2;
  r.configured_runs = 3;
  return r;
}

std::string error_of(const std::string& text) {
  try {
    parse_experiment_config(text, "/base");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("minimal config parses with defaults and resolves paths") {
  const auto cfg = parse_experiment_config(kMinimal, "/base/dir");
  CHECK(cfg.dataset.path == fs::path("/base/dir/ds"));
  CHECK(cfg.output == fs::path("/base/dir/out"));
  CHECK(cfg.dataset.generate->classes == 3);
  CHECK(cfg.train.primary_epochs == 20);
  CHECK(cfg.train.match_epochs == 15);
  CHECK(cfg.train.head_epochs == 15);
  CHECK(cfg.eval.runs == 5);
  CHECK(cfg.tap == "last");
  const auto mc = model_config_for(cfg, 9);
  CHECK(mc.input_shape == std::array<std::size_t, 3>{1, 32, 32});
  CHECK(mc.seed == 9);
}

TEST_CASE("unknown fields are named with their full path") {
  CHECK(error_of(with_field("\"dataset\": {", "\"colour\": 1, ")).find("dataset.colour") == 0);
  CHECK(error_of(with_field("\"generate\": {", "\"pose\": 2, ")).find("dataset.generate.pose") ==
        0);
  CHECK(error_of(R"({"dataset": {"path": "d", "generate": {}}, "output": "o", "train": {"epoch": 3}})")
            .find("train.epoch: unknown field") == 0);
  CHECK(error_of(R"({"dataset": {"path": "d", "generate": {}}, "output": "o", "extra": 1})")
            .find("extra: unknown field") == 0);
}

TEST_CASE("wrong types and bad values name the field") {
  CHECK(error_of(with_field("\"generate\": {", "\"mode\": \"uv\", ")).find("dataset.generate.mode") ==
        0);
  CHECK(error_of(R"({"dataset": {"path": "d", "generate": {}}, "output": "o", "train": {"batch_size": "x"}})")
            .find("train.batch_size: wrong type") == 0);
  CHECK(error_of(R"({"dataset": {"path": "d", "generate": {}}, "output": "o", "train": {"batch_size": -4}})")
            .find("train.batch_size") == 0);
  CHECK(error_of(R"({"dataset": {"path": "d", "generate": {}}, "output": "o", "eval": {"iou_quantile": 1.5}})")
            .find("eval.iou_quantile") == 0);
  CHECK(error_of(R"({"dataset": {"path": "d", "generate": {}}})").find("output") == 0);
  CHECK(error_of(R"({"dataset": {"path": "d"}, "output": "o"})").find("dataset:") == 0);
}

TEST_CASE("malformed JSON reports line and column") {
  const auto err = error_of("{\n  \"dataset\": {\n    \"path\": ,\n  }\n}");
  CHECK(err.find("line 3, column 13") != std::string::npos);
}

TEST_CASE("cross-section consistency") {
  SUBCASE("size not divisible by 16") {
    auto text = kMinimal;
    text.replace(text.find("\"height\": 32"), 12, "\"height\": 40");
    CHECK(error_of(text).find("not divisible by 16") != std::string::npos);
  }
  SUBCASE("class count mismatch") {
    auto text = kMinimal;
    text.replace(text.find("\"output\""), 0, "\"model\": {\"class_count\": 4},\n");
    CHECK(error_of(text).find("model.class_count") == 0);
  }
  SUBCASE("tap not at a block end") {
    auto text = kMinimal;
    text.replace(text.find("\"output\""), 0, "\"train\": {\"tap\": 6},\n");
    CHECK(error_of(text).find("train.tap") == 0);
  }
}

TEST_CASE("tap specs resolve against the model") {
  ModelConfig mc;
  mc.input_shape = {1, 32, 32};
  const auto model = Model::build_simple_cnn(mc);
  CHECK(resolve_tap("last", model) == 15);
  CHECK(resolve_tap("intermediate", model) == 11);
  CHECK(resolve_tap("7", model) == 7);
  CHECK_THROWS_AS(resolve_tap("8", model), ConfigError);
  CHECK_THROWS_AS(resolve_tap("7x", model), ConfigError);
  CHECK(method_label(Method::split, "last") == "split-last");
  CHECK(method_label(Method::split, "7") == "split-k7");
  CHECK(method_label(Method::standard, "last") == "standard");
}

TEST_CASE("held-out backgrounds are fixed unless vary_split") {
  auto cfg = parse_experiment_config(kMinimal, "/b");
  CHECK(held_out_for(cfg, 0) == std::vector<int>{3});
  CHECK(held_out_for(cfg, 5) == std::vector<int>{3});
  cfg.dataset.vary_split = true;
  cfg.dataset.generate->held_out_backgrounds = {0, 1};
  bool differs = false;
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto h = held_out_for(cfg, s);
    CHECK(h.size() == 2);
    CHECK(h == held_out_for(cfg, s));
    differs |= h != held_out_for(cfg, 0);
  }
  CHECK(differs);
}

TEST_CASE("spread_indices covers the set evenly") {
  CHECK(spread_indices(10, 5) == std::vector<std::size_t>{0, 2, 4, 6, 8});
  CHECK(spread_indices(3, 10) == std::vector<std::size_t>{0, 1, 2});
  CHECK(spread_indices(10, 0).empty());
}

TEST_CASE("run record round trip") {
  auto r = record("split-last", 4, 0.75);
  r.match_initial_mse = 1.5;
  r.checkpoints = {"m1.stwt", "m2_final.stwt"};
  const auto back = run_record_from_json(to_json(r));
  CHECK(back.label == "split-last");
  CHECK(back.seed == 4);
  CHECK(back.test_accuracy == 0.75);
  CHECK(back.random_bg_accuracy == 0.375);
  CHECK(!back.attention_iou);
  CHECK(back.match_initial_mse == 1.5);
  CHECK(back.checkpoints == r.checkpoints);
  CHECK(to_json(back) == to_json(r));
}

TEST_CASE("report matches hand-computed mean and std of three runs") {
  TempDir tmp;
  const double a[] = {0.61, 0.74, 0.8};
  for (int s = 0; s < 3; ++s) {
    write_file(tmp / ("split-last/seed-" + std::to_string(s) + "/run.json"),
               to_json(record("split-last", s, a[s])));
  }
  const auto rep = build_report({tmp.path()});
  REQUIRE(rep.methods.size() == 1);
  const auto& m = rep.methods[0];
  const double mean = (0.61 + 0.74 + 0.8) / 3.0;
  const double var = ((0.61 - mean) * (0.61 - mean) + (0.74 - mean) * (0.74 - mean) +
                      (0.8 - mean) * (0.8 - mean)) /
                     3.0;
  CHECK(m.runs == 3);
  CHECK(std::abs(m.test_accuracy.mean - mean) < 1e-9);
  CHECK(std::abs(m.test_accuracy.std - std::sqrt(var)) < 1e-9);
  CHECK(std::abs(m.random_bg_accuracy->mean - mean / 2) < 1e-9);
  CHECK(m.warnings.empty());
  CHECK(m.test_count == 120);
  const auto table = report_table(rep);
  CHECK(table.find("71.667%") != std::string::npos);
  CHECK(report_json(rep).back() == '\n');
}

TEST_CASE("single run flags a warning with std 0; identical runs give std 0") {
  TempDir tmp;
  write_file(tmp / "a/seed-0/run.json", to_json(record("standard", 0, 0.5)));
  auto rep = build_report({tmp / "a"});
  CHECK(rep.methods[0].test_accuracy.std == 0.0);
  REQUIRE(!rep.methods[0].warnings.empty());
  CHECK(rep.methods[0].warnings[0].find("single run") != std::string::npos);
  CHECK(report_json(rep).find("single run") != std::string::npos);

  write_file(tmp / "a/seed-1/run.json", to_json(record("standard", 1, 0.5)));
  rep = build_report({tmp / "a"});
  CHECK(rep.methods[0].runs == 2);
  CHECK(rep.methods[0].test_accuracy.std == 0.0);
  CHECK(rep.methods[0].warnings.at(0).find("2 of 3") != std::string::npos);
}

TEST_CASE("report refuses incomplete runs and empty trees") {
  TempDir tmp;
  write_file(tmp / "split-last/seed-0/run.json", to_json(record("split-last", 0, 0.5)));
  write_file(tmp / "split-last/seed-1/log.jsonl", "{}\n");
  try {
    build_report({tmp.path()});
    FAIL("expected an incomplete-run error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("seed-1") != std::string::npos);
  }
  TempDir empty;
  CHECK_THROWS_AS(build_report({empty.path()}), std::runtime_error);
}
