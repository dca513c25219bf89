#include "splittrain/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "splittrain/explain.hpp"
#include "splittrain/rng.hpp"

namespace splittrain {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Reads fields out of one JSON object, remembering which were consumed so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer() || v.get<long long>() < 0) throw std::invalid_argument("");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer()) throw std::invalid_argument("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      fail(field(key), "wrong type (" + std::string(v.type_name()) + ")");
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(field(key), "unknown field");
    }
  }

  [[noreturn]] static void fail(const std::string& field, const std::string& what) {
    throw ConfigError(field + ": " + what);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

ImageMode parse_mode(Section& s, const std::string& key, ImageMode fallback) {
  std::string text = to_string(fallback);
  s.get(key, text);
  try {
    return image_mode_from_string(text);
  } catch (const std::exception&) {
    Section::fail(s.field(key), "expected \"ir\" or \"rgb\", got \"" + text + "\"");
  }
}

std::string json_error_position(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

std::uint64_t seed_tag(std::uint64_t seed) { return mix64(seed ^ 0x5eedULL); }

}  // namespace

std::pair<std::size_t, std::size_t> ExperimentConfig::image_size() const {
  if (dataset.generate) return {dataset.generate->height, dataset.generate->width};
  return {dataset.ingest.height, dataset.ingest.width};
}

ImageMode ExperimentConfig::mode() const {
  return dataset.generate ? dataset.generate->mode : dataset.ingest.mode;
}

std::size_t ExperimentConfig::class_count() const {
  if (dataset.generate) return static_cast<std::size_t>(dataset.generate->classes);
  return model.class_count.value_or(3);
}

ExperimentConfig parse_experiment_config(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON at " + json_error_position(text, e.byte ? e.byte - 1 : 0) +
                      ": " + e.what());
  }
  ExperimentConfig cfg;
  Section top(root, "");
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : (base_dir / path).lexically_normal();
  };

  if (!top.has("dataset")) Section::fail("dataset", "missing section");
  {
    Section ds(top.raw("dataset"), "dataset");
    std::string path;
    ds.get("path", path);
    if (path.empty()) Section::fail("dataset.path", "missing");
    cfg.dataset.path = resolve(path);
    ds.get("vary_split", cfg.dataset.vary_split);
    const bool gen = ds.has("generate"), ing = ds.has("ingest");
    if (gen == ing) Section::fail("dataset", "exactly one of \"generate\" or \"ingest\" is required");
    if (gen) {
      Section g(ds.raw("generate"), "dataset.generate");
      GenConfig gc;
      gc.mode = parse_mode(g, "mode", gc.mode);
      g.get("classes", gc.classes);
      g.get("backgrounds", gc.backgrounds);
      g.get("signatures", gc.signatures);
      g.get("poses", gc.poses);
      g.get("height", gc.height);
      g.get("width", gc.width);
      g.get("seed", gc.seed);
      g.get("held_out_backgrounds", gc.held_out_backgrounds);
      g.finish();
      try {
        gc.validate();
      } catch (const std::exception& e) {
        Section::fail("dataset.generate", e.what());
      }
      cfg.dataset.generate = gc;
    } else {
      Section in(ds.raw("ingest"), "dataset.ingest");
      std::string source;
      in.get("source", source);
      if (source.empty()) Section::fail("dataset.ingest.source", "missing");
      cfg.dataset.ingest_source = resolve(source);
      cfg.dataset.ingest.mode = parse_mode(in, "mode", cfg.dataset.ingest.mode);
      in.get("height", cfg.dataset.ingest.height);
      in.get("width", cfg.dataset.ingest.width);
      in.finish();
    }
    ds.finish();
  }

  if (top.has("model")) {
    Section m(top.raw("model"), "model");
    if (m.has("channel_widths")) {
      std::vector<std::size_t> widths;
      m.get("channel_widths", widths);
      if (widths.size() != 4 || std::count(widths.begin(), widths.end(), 0u)) {
        Section::fail("model.channel_widths", "expected four positive widths");
      }
      std::copy(widths.begin(), widths.end(), cfg.model.channel_widths.begin());
    }
    m.get("hidden_dim", cfg.model.hidden_dim);
    if (m.has("class_count")) {
      std::size_t n = 0;
      m.get("class_count", n);
      cfg.model.class_count = n;
    }
    m.finish();
    if (cfg.model.hidden_dim == 0) Section::fail("model.hidden_dim", "must be positive");
  }

  if (top.has("train")) {
    Section t(top.raw("train"), "train");
    auto& tc = cfg.train;
    if (t.has("tap")) {
      const auto& v = t.raw("tap");
      if (v.is_string()) {
        cfg.tap = v.get<std::string>();
      } else if (v.is_number_unsigned()) {
        cfg.tap = std::to_string(v.get<std::size_t>());
      } else {
        Section::fail("train.tap", "expected \"last\", \"intermediate\" or a layer index");
      }
    }
    t.get("primary_epochs", tc.primary_epochs);
    t.get("match_epochs", tc.match_epochs);
    t.get("head_epochs", tc.head_epochs);
    t.get("lr_match", tc.lr_match);
    t.get("lr_head", tc.lr_head);
    t.get("lr_standard_high", tc.lr_standard_high);
    t.get("lr_standard_low", tc.lr_standard_low);
    t.get("lr_drop_fraction", tc.lr_drop_fraction);
    t.get("batch_size", tc.batch_size);
    if (t.has("stage3_mode")) {
      std::string mode;
      t.get("stage3_mode", mode);
      try {
        tc.stage3_mode = stage3_mode_from_string(mode);
      } catch (const std::exception&) {
        Section::fail("train.stage3_mode", "expected \"freeze\" or \"finetune_low_lr\"");
      }
    }
    t.finish();
  }

  if (top.has("eval")) {
    Section e(top.raw("eval"), "eval");
    e.get("random_bg", cfg.eval.random_bg);
    e.get("palette_seed", cfg.eval.palette_seed);
    e.get("runs", cfg.eval.runs);
    e.get("gradcam_samples", cfg.eval.gradcam_samples);
    e.get("iou_quantile", cfg.eval.iou_quantile);
    e.finish();
    if (cfg.eval.runs == 0) Section::fail("eval.runs", "must be positive");
    if (!(cfg.eval.iou_quantile > 0.0 && cfg.eval.iou_quantile < 1.0)) {
      Section::fail("eval.iou_quantile", "must lie in (0, 1)");
    }
  }
  cfg.train.run_count = cfg.eval.runs;

  std::string output;
  top.get("output", output);
  if (output.empty()) Section::fail("output", "missing");
  cfg.output = resolve(output);
  top.finish();

  try {
    cfg.train.validate();
  } catch (const std::exception& e) {
    Section::fail("train", e.what());
  }
  const auto [h, w] = cfg.image_size();
  if (h == 0 || w == 0 || h % 16 || w % 16) {
    Section::fail(cfg.dataset.generate ? "dataset.generate" : "dataset.ingest",
                  "image size " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by 16");
  }
  if (cfg.model.class_count && cfg.dataset.generate &&
      *cfg.model.class_count != cfg.class_count()) {
    Section::fail("model.class_count",
                  std::to_string(*cfg.model.class_count) + " does not match dataset classes " +
                      std::to_string(cfg.class_count()));
  }
  const auto probe = Model::build_simple_cnn(model_config_for(cfg, 0));
  try {
    resolve_tap(cfg.tap, probe);
  } catch (const ConfigError& e) {
    Section::fail("train.tap", e.what());
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  auto base = path.parent_path();
  if (base.empty()) base = ".";
  return parse_experiment_config(buf.str(), fs::absolute(base));
}

std::size_t resolve_tap(const std::string& spec, const Model& model) {
  const auto& taps = model.tap_indices();
  if (spec == "last") return model.feature_end();
  if (spec == "intermediate") return taps.at(taps.size() - 2);
  std::size_t index = 0;
  std::size_t used = 0;
  try {
    index = std::stoul(spec, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != spec.size()) throw ConfigError("unknown tap \"" + spec + "\"");
  if (!model.is_tap(index)) {
    std::string valid;
    for (auto t : taps) valid += (valid.empty() ? "" : ", ") + std::to_string(t);
    throw ConfigError("layer " + spec + " is not a tap (valid: " + valid + ")");
  }
  return index;
}

std::string method_label(Method method, const std::string& tap_spec) {
  if (method != Method::split) return to_string(method);
  if (tap_spec == "last" || tap_spec == "intermediate") return "split-" + tap_spec;
  return "split-k" + tap_spec;
}

ModelConfig model_config_for(const ExperimentConfig& config, std::uint64_t seed) {
  ModelConfig mc;
  const auto [h, w] = config.image_size();
  mc.input_shape = {config.mode() == ImageMode::rgb ? 3u : 1u, h, w};
  mc.channel_widths = config.model.channel_widths;
  mc.hidden_dim = config.model.hidden_dim;
  mc.class_count = config.class_count();
  mc.seed = seed;
  return mc;
}

std::vector<int> held_out_for(const ExperimentConfig& config, std::uint64_t seed) {
  if (!config.dataset.generate) return {};
  const auto& gc = *config.dataset.generate;
  if (!config.dataset.vary_split) return gc.held_out_backgrounds;
  std::vector<int> all(static_cast<std::size_t>(gc.backgrounds));
  std::iota(all.begin(), all.end(), 0);
  auto rng = Rng::stream(gc.seed, seed_tag(seed));
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);
  all.resize(gc.held_out_backgrounds.size());
  std::sort(all.begin(), all.end());
  return all;
}

std::pair<DatasetManifest, DatasetManifest> run_split(const ExperimentConfig& config,
                                                      std::uint64_t seed) {
  const auto manifest = read_manifest(config.dataset.path / "manifest.json");
  if (config.dataset.generate && config.dataset.vary_split) {
    return split(manifest, held_out_for(config, seed));
  }
  return {manifest.subset(Split::train), manifest.subset(Split::test)};
}

std::vector<Sample> random_background_samples(const DatasetManifest& test,
                                              std::uint64_t palette_seed) {
  std::vector<Sample> out;
  out.reserve(test.samples.size());
  for (std::size_t i = 0; i < test.samples.size(); ++i) {
    out.push_back(with_random_background(test.load(i), palette_seed, i));
  }
  return out;
}

std::vector<std::size_t> spread_indices(std::size_t size, std::size_t count) {
  count = std::min(count, size);
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = i * size / count;
  return out;
}

double mean_attention_iou(Model& model, const PreparedSet& test, std::size_t count,
                          std::size_t tap, double q) {
  const auto indices = spread_indices(test.size(), count);
  if (indices.empty()) return 0.0;
  double total = 0.0;
  for (auto i : indices) {
    const std::size_t one[] = {i};
    const auto hm = grad_cam(model, test.batch(one, false), test.labels()[i], tap);
    total += attention_iou(hm, test.raw()[i].mask, q);
  }
  return total / static_cast<double>(indices.size());
}

// ---- run records -------------------------------------------------------------

namespace {

template <typename T>
void put_optional(json& j, const char* key, const std::optional<T>& v) {
  j[key] = v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> get_optional(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace

std::string to_json(const RunRecord& r) {
  json j;
  j["method"] = r.method;
  j["label"] = r.label;
  j["tap"] = r.tap;
  j["seed"] = r.seed;
  j["stage3_mode"] = r.stage3_mode;
  j["test_accuracy"] = r.test_accuracy;
  j["test_count"] = r.test_count;
  put_optional(j, "random_bg_accuracy", r.random_bg_accuracy);
  put_optional(j, "attention_iou", r.attention_iou);
  j["iou_samples"] = r.iou_samples;
  put_optional(j, "match_initial_mse", r.match_initial_mse);
  put_optional(j, "match_first_epoch_mse", r.match_first_epoch_mse);
  put_optional(j, "match_final_mse", r.match_final_mse);
  j["checkpoints"] = r.checkpoints;
  j["held_out_backgrounds"] = r.held_out_backgrounds;
  j["configured_runs"] = r.configured_runs;
  return j.dump(2) + "\n";
}

RunRecord run_record_from_json(const std::string& text) {
  const auto j = json::parse(text);
  RunRecord r;
  r.method = j.at("method").get<std::string>();
  r.label = j.at("label").get<std::string>();
  r.tap = j.at("tap").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.stage3_mode = j.value("stage3_mode", "");
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.test_count = j.at("test_count").get<std::size_t>();
  r.random_bg_accuracy = get_optional<double>(j, "random_bg_accuracy");
  r.attention_iou = get_optional<double>(j, "attention_iou");
  r.iou_samples = j.value("iou_samples", std::size_t{0});
  r.match_initial_mse = get_optional<double>(j, "match_initial_mse");
  r.match_first_epoch_mse = get_optional<double>(j, "match_first_epoch_mse");
  r.match_final_mse = get_optional<double>(j, "match_final_mse");
  r.checkpoints = j.value("checkpoints", std::vector<std::string>{});
  r.held_out_backgrounds = j.value("held_out_backgrounds", std::vector<int>{});
  r.configured_runs = j.value("configured_runs", std::size_t{0});
  return r;
}

// ---- report ------------------------------------------------------------------

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(s.n));
  return s;
}

Report build_report(const std::vector<fs::path>& roots) {
  std::map<std::string, std::vector<std::pair<fs::path, RunRecord>>> groups;
  std::vector<std::string> incomplete;
  auto visit = [&](const fs::path& dir) {
    const auto run = dir / "run.json";
    if (fs::exists(run)) {
      std::ifstream in(run);
      std::stringstream buf;
      buf << in.rdbuf();
      RunRecord r;
      try {
        r = run_record_from_json(buf.str());
      } catch (const std::exception& e) {
        throw std::runtime_error("malformed " + run.string() + ": " + e.what());
      }
      groups[r.label].emplace_back(dir, std::move(r));
    } else if (fs::exists(dir / "log.jsonl")) {
      incomplete.push_back(dir.string());
    }
  };
  for (const auto& root : roots) {
    if (!fs::is_directory(root)) throw std::runtime_error("not a directory: " + root.string());
    visit(root);
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_directory()) dirs.push_back(entry.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) visit(d);
  }
  if (!incomplete.empty()) {
    std::string list;
    for (const auto& d : incomplete) list += "\n  " + d;
    throw std::runtime_error("incomplete runs (log without run.json):" + list);
  }
  if (groups.empty()) throw std::runtime_error("no completed runs found");

  Report report;
  for (auto& [label, runs] : groups) {
    std::sort(runs.begin(), runs.end(),
              [](const auto& a, const auto& b) { return a.second.seed < b.second.seed; });
    MethodSummary m;
    m.label = label;
    m.runs = runs.size();
    std::vector<double> acc, rbg, iou;
    std::set<std::uint64_t> seeds;
    for (const auto& [dir, r] : runs) {
      acc.push_back(r.test_accuracy);
      if (r.random_bg_accuracy) rbg.push_back(*r.random_bg_accuracy);
      if (r.attention_iou) iou.push_back(*r.attention_iou);
      m.configured_runs = std::max(m.configured_runs, r.configured_runs);
      m.test_count = std::max(m.test_count, r.test_count);
      m.run_dirs.push_back(dir.string());
      if (!seeds.insert(r.seed).second) {
        m.warnings.push_back("seed " + std::to_string(r.seed) + " appears more than once");
      }
    }
    m.test_accuracy = summarize(acc);
    if (!rbg.empty()) m.random_bg_accuracy = summarize(rbg);
    if (!iou.empty()) m.attention_iou = summarize(iou);
    if (m.runs == 1) m.warnings.push_back("single run: std reported as 0");
    if (m.configured_runs && m.runs != m.configured_runs) {
      m.warnings.push_back(std::to_string(m.runs) + " of " + std::to_string(m.configured_runs) +
                           " configured runs present");
    }
    if ((!rbg.empty() && rbg.size() != acc.size()) || (!iou.empty() && iou.size() != acc.size())) {
      m.warnings.push_back("some runs lack random-background or IoU results");
    }
    report.methods.push_back(std::move(m));
  }
  return report;
}

namespace {

json metric_json(const MetricSummary& s) {
  return json{{"n", s.n}, {"mean", s.mean}, {"std", s.std}};
}

std::string percent(const MetricSummary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f%% (%.3f%%)", 100.0 * s.mean, 100.0 * s.std);
  return buf;
}

}  // namespace

std::string report_json(const Report& report) {
  json methods = json::array();
  for (const auto& m : report.methods) {
    json j;
    j["method"] = m.label;
    j["runs"] = m.runs;
    j["configured_runs"] = m.configured_runs;
    j["test_count"] = m.test_count;
    j["test_accuracy"] = metric_json(m.test_accuracy);
    j["random_bg_accuracy"] = m.random_bg_accuracy ? metric_json(*m.random_bg_accuracy) : json(nullptr);
    j["attention_iou"] = m.attention_iou ? metric_json(*m.attention_iou) : json(nullptr);
    j["run_dirs"] = m.run_dirs;
    j["warnings"] = m.warnings;
    methods.push_back(std::move(j));
  }
  return json{{"methods", methods}}.dump(2) + "\n";
}

std::string report_table(const Report& report) {
  std::size_t wl = 6;
  for (const auto& m : report.methods) wl = std::max(wl, m.label.size());
  std::ostringstream out;
  auto row = [&](const std::string& a, const std::string& b, const std::string& c,
                 const std::string& d, const std::string& e) {
    out << a << std::string(wl - a.size() + 2, ' ');
    for (const auto* cell : {&b, &c, &d}) {
      out << *cell << std::string(cell->size() < 22 ? 22 - cell->size() : 1, ' ');
    }
    out << e << "\n";
  };
  row("method", "test acc (std)", "random-bg acc (std)", "attention IoU (std)", "runs");
  for (const auto& m : report.methods) {
    row(m.label, percent(m.test_accuracy),
        m.random_bg_accuracy ? percent(*m.random_bg_accuracy) : "-",
        m.attention_iou ? percent(*m.attention_iou) : "-",
        std::to_string(m.runs) + " x " + std::to_string(m.test_count));
  }
  for (const auto& m : report.methods) {
    for (const auto& w : m.warnings) out << "warning: " << m.label << ": " << w << "\n";
  }
  return out.str();
}

}  // namespace splittrain
