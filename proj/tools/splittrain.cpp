#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "splittrain/data.hpp"
#include "splittrain/experiment.hpp"
#include "splittrain/explain.hpp"
#include "splittrain/nn.hpp"
#include "splittrain/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace splittrain;

namespace {

// Exit 1: usage or configuration problems, including refusing to overwrite.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::optional<std::string> read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void claim_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " already exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

fs::path manifest_path(const ExperimentConfig& cfg) {
  const auto p = cfg.dataset.path / "manifest.json";
  if (!fs::exists(p)) {
    throw std::runtime_error("dataset not found at " + cfg.dataset.path.string() +
                             " (run `splittrain gen` first)");
  }
  return p;
}

std::string log_jsonl(const RunLog& log, const RunRecord& record) {
  std::string out;
  for (const auto& e : log.epochs) {
    out += json{{"stage", e.stage}, {"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr},
                {"steps", e.steps}}
               .dump() +
           "\n";
  }
  out += json{{"summary", true},
              {"method", record.label},
              {"seed", record.seed},
              {"test_accuracy", record.test_accuracy},
              {"test_count", record.test_count},
              {"total_steps", log.total_steps()}}
             .dump() +
         "\n";
  return out;
}

void append_log(RunLog& into, const RunLog& from) {
  into.epochs.insert(into.epochs.end(), from.epochs.begin(), from.epochs.end());
}

// ---- gen ---------------------------------------------------------------------

int cmd_gen(const fs::path& config_path, bool force) {
  const auto cfg = load_experiment_config(config_path);
  claim_dir(cfg.dataset.path, force);
  DatasetManifest manifest;
  if (cfg.dataset.generate) {
    manifest = generate_dataset(*cfg.dataset.generate, cfg.dataset.path);
  } else {
    manifest = ingest_external(*cfg.dataset.ingest_source, cfg.dataset.ingest, cfg.dataset.path);
  }
  const auto test = manifest.subset(Split::test);
  if (cfg.eval.random_bg && !test.samples.empty()) {
    random_background_testset(test, cfg.eval.palette_seed, cfg.dataset.path / "random-bg");
  }
  std::printf("%s\n", json{{"dataset", cfg.dataset.path.string()},
                           {"samples", manifest.samples.size()},
                           {"train", manifest.count(Split::train)},
                           {"test", manifest.count(Split::test)},
                           {"classes", manifest.class_names.size()}}
                          .dump()
                          .c_str());
  return 0;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string method = "split";
  std::uint64_t seed = 0;
  std::optional<std::string> tap;
  std::optional<std::string> primary;
  bool force = false;
};

int cmd_train(const fs::path& config_path, const TrainArgs& args) {
  auto cfg = load_experiment_config(config_path);
  Method method;
  try {
    method = method_from_string(args.method);
  } catch (const std::exception&) {
    throw UsageError("--method must be standard, split or finetune");
  }
  if (args.tap) cfg.tap = *args.tap;
  manifest_path(cfg);

  const auto mc = model_config_for(cfg, args.seed);
  auto fresh = Model::build_simple_cnn(mc);
  const auto tap = resolve_tap(cfg.tap, fresh);
  TrainConfig tc = cfg.train;
  tc.method = method;
  tc.seed = args.seed;
  tc.tap = tap;
  tc.validate();

  const auto label = method_label(method, cfg.tap);
  const auto run_dir = cfg.output / label / ("seed-" + std::to_string(args.seed));
  claim_dir(run_dir, args.force);

  const auto [train_m, test_m] = run_split(cfg, args.seed);
  const PreparedSet train(train_m);
  const PreparedSet test(test_m);
  const auto start = std::chrono::steady_clock::now();

  RunLog log;
  RunRecord rec;
  std::optional<Model> final_model;
  auto save = [&](Model& m, const std::string& name) {
    save_weights(m, run_dir / name);
    rec.checkpoints.push_back(name);
  };

  std::optional<Model> primary;
  if (method != Method::standard) {
    primary = fresh;
    if (args.primary) {
      load_weights(*primary, *args.primary);
    } else {
      train_standard(*primary, train, true, tc, log, "primary");
    }
    save(*primary, "m1.stwt");
  }

  switch (method) {
    case Method::standard: {
      Model m = fresh;
      train_standard(m, train, false, tc, log);
      save(m, "model.stwt");
      final_model = std::move(m);
      break;
    }
    case Method::split: {
      auto r = train_split(train, train, mc, tc, &*primary);
      append_log(log, r.log);
      save(r.secondary_matched, "m2_stage2.stwt");
      save(r.secondary, "m2_final.stwt");
      const auto match = r.log.stage("match");
      if (!match.empty()) {
        rec.match_initial_mse = match.front().loss;
        if (match.size() > 1) rec.match_first_epoch_mse = match[1].loss;
        rec.match_final_mse = match.back().loss;
      }
      final_model = std::move(r.secondary);
      break;
    }
    case Method::finetune: {
      auto r = train_finetune(train, train, mc, tc, &*primary);
      append_log(log, r.log);
      save(r.model, "finetune.stwt");
      final_model = std::move(r.model);
      break;
    }
  }

  rec.method = to_string(method);
  rec.label = label;
  rec.tap = tap;
  rec.seed = args.seed;
  rec.stage3_mode = method == Method::split ? to_string(tc.stage3_mode) : "";
  rec.test_count = test.size();
  rec.test_accuracy = evaluate(*final_model, test);
  if (cfg.eval.random_bg) {
    const PreparedSet rbg(random_background_samples(test_m, cfg.eval.palette_seed));
    rec.random_bg_accuracy = evaluate(*final_model, rbg);
  }
  rec.iou_samples = std::min(cfg.eval.gradcam_samples, test.size());
  if (rec.iou_samples > 0) {
    rec.attention_iou = mean_attention_iou(*final_model, test, rec.iou_samples,
                                           final_model->feature_end(), cfg.eval.iou_quantile);
  }
  rec.held_out_backgrounds = held_out_for(cfg, args.seed);
  rec.configured_runs = cfg.eval.runs;

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(run_dir / "log.jsonl", log_jsonl(log, rec));
  write_text(run_dir / "timing.json", json{{"wall_seconds", secs}}.dump() + "\n");
  write_text(run_dir / "run.json", to_json(rec));

  std::printf("%s\n", json{{"run_dir", run_dir.string()},
                           {"method", label},
                           {"seed", args.seed},
                           {"test_accuracy", rec.test_accuracy}}
                          .dump()
                          .c_str());
  return 0;
}

// ---- eval / gradcam shared -----------------------------------------------------

std::uint64_t seed_for_checkpoint(const fs::path& checkpoint, std::optional<std::uint64_t> given) {
  if (given) return *given;
  if (auto text = read_text(checkpoint.parent_path() / "run.json")) {
    return run_record_from_json(*text).seed;
  }
  return 0;
}

Model load_checkpoint(const ExperimentConfig& cfg, const fs::path& checkpoint,
                      std::uint64_t seed) {
  if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  auto model = Model::build_simple_cnn(model_config_for(cfg, seed));
  load_weights(model, checkpoint);
  return model;
}

int cmd_eval(const fs::path& config_path, const fs::path& checkpoint, bool random_bg,
             bool masked, std::optional<std::uint64_t> seed_opt) {
  if (random_bg && masked) throw UsageError("--random-bg and --masked are exclusive");
  const auto cfg = load_experiment_config(config_path);
  manifest_path(cfg);
  const auto seed = seed_for_checkpoint(checkpoint, seed_opt);
  auto model = load_checkpoint(cfg, checkpoint, seed);
  const auto test_m = run_split(cfg, seed).second;
  const PreparedSet test = random_bg
                               ? PreparedSet(random_background_samples(test_m, cfg.eval.palette_seed))
                               : PreparedSet(test_m);
  const auto preds = predict(model, test, masked);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == test.labels()[i];
  const double acc = preds.empty() ? 0.0 : static_cast<double>(correct) / preds.size();
  const std::string condition = random_bg ? "random_bg" : masked ? "masked" : "plain";
  std::printf("%s\n", json{{"checkpoint", checkpoint.string()},
                           {"condition", condition},
                           {"seed", seed},
                           {"correct", correct},
                           {"count", preds.size()},
                           {"accuracy", acc}}
                          .dump()
                          .c_str());
  std::fprintf(stderr, "accuracy %.4f (%zu/%zu, %s)\n", acc, correct, preds.size(),
               condition.c_str());
  return 0;
}

int cmd_gradcam(const fs::path& config_path, const fs::path& checkpoint,
                std::optional<std::size_t> samples_opt, std::optional<fs::path> out_opt,
                std::optional<std::string> tap_opt, std::optional<std::uint64_t> seed_opt,
                bool force) {
  const auto cfg = load_experiment_config(config_path);
  manifest_path(cfg);
  const auto seed = seed_for_checkpoint(checkpoint, seed_opt);
  auto model = load_checkpoint(cfg, checkpoint, seed);
  const auto tap = resolve_tap(tap_opt.value_or("last"), model);
  const auto test_m = run_split(cfg, seed).second;
  const PreparedSet test(test_m);

  std::size_t n = samples_opt.value_or(cfg.eval.gradcam_samples);
  if (n > test.size()) {
    std::fprintf(stderr, "warning: %zu samples requested, test set has %zu; clamping\n", n,
                 test.size());
    n = test.size();
  }
  const auto out_dir =
      out_opt.value_or(checkpoint.parent_path() / ("gradcam-" + checkpoint.stem().string()));
  if (n == 0) {
    std::printf("%s\n", json{{"samples", 0}, {"mean_iou", nullptr}}.dump().c_str());
    return 0;
  }
  claim_dir(out_dir, force);

  double total = 0.0;
  for (auto i : spread_indices(test.size(), n)) {
    const std::size_t one[] = {i};
    const auto hm = grad_cam(model, test.batch(one, false), test.labels()[i], tap);
    const double iou = attention_iou(hm, test.raw()[i].mask, cfg.eval.iou_quantile);
    total += iou;
    const auto id = test_m.samples[i].id();
    render_heatmap(hm, test.raw()[i], out_dir / (id + ".png"));
    write_heatmap_sidecar(out_dir / (id + ".json"), id, hm, iou);
  }
  const double mean = total / static_cast<double>(n);
  std::printf("%s\n", json{{"out", out_dir.string()}, {"samples", n}, {"tap", tap},
                           {"mean_iou", mean}}
                          .dump()
                          .c_str());
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::optional<fs::path>& json_out) {
  std::vector<fs::path> roots(dirs.begin(), dirs.end());
  const auto report = build_report(roots);
  std::fputs(report_table(report).c_str(), stdout);
  if (json_out) write_text(*json_out, report_json(report));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"splittrain: split training for background-robust classifiers"};
  app.require_subcommand(1);

  std::string config;
  bool force = false;

  auto* gen = app.add_subcommand("gen", "generate or ingest the dataset");
  gen->add_option("config", config, "experiment config (JSON)")->required();
  gen->add_flag("--force", force, "overwrite an existing dataset");

  TrainArgs targs;
  auto* train = app.add_subcommand("train", "train one method for one seed");
  train->add_option("config", config, "experiment config (JSON)")->required();
  train->add_option("--method", targs.method, "standard, split or finetune")
      ->check(CLI::IsMember({"standard", "split", "finetune"}));
  train->add_option("--seed", targs.seed, "init and shuffle seed");
  train->add_option("--tap", targs.tap, "last, intermediate or a layer index");
  train->add_option("--primary", targs.primary, "reuse a trained m1 checkpoint");
  train->add_flag("--force", targs.force, "overwrite an existing run");

  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  bool random_bg = false, masked = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("config", config, "experiment config (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint, "weights file")->required();
  eval->add_flag("--random-bg", random_bg, "use the random solid background test set");
  eval->add_flag("--masked", masked, "evaluate on background-removed images");
  eval->add_option("--seed", seed, "split seed (defaults to the run's)");

  std::optional<std::size_t> samples;
  std::optional<fs::path> out;
  std::optional<std::string> tap;
  auto* gradcam = app.add_subcommand("gradcam", "render Grad-CAM heatmaps with IoU sidecars");
  gradcam->add_option("config", config, "experiment config (JSON)")->required();
  gradcam->add_option("--checkpoint", checkpoint, "weights file")->required();
  gradcam->add_option("--samples", samples, "number of test images");
  gradcam->add_option("--out", out, "output directory");
  gradcam->add_option("--tap", tap, "last, intermediate or a layer index");
  gradcam->add_option("--seed", seed, "split seed (defaults to the run's)");
  gradcam->add_flag("--force", force, "overwrite existing output");

  std::vector<std::string> dirs;
  std::optional<fs::path> json_out;
  auto* report = app.add_subcommand("report", "aggregate completed runs");
  report->add_option("dirs", dirs, "run or output directories")->required();
  report->add_option("--json", json_out, "also write the report as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen(config, force);
    if (*train) return cmd_train(config, targs);
    if (*eval) return cmd_eval(config, checkpoint, random_bg, masked, seed);
    if (*gradcam) return cmd_gradcam(config, checkpoint, samples, out, tap, seed, force);
    if (*report) return cmd_report(dirs, json_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
