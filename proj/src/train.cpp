#include "splittrain/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "splittrain/rng.hpp"

namespace splittrain {

template <typename T>
BasicAdam<T>::BasicAdam(std::vector<BasicTensor<T>> params, double lr, double beta1,
                        double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (params_.empty()) throw ConfigError("optimizer has no trainable parameters");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void BasicAdam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void BasicAdam<T>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw MissingGradError("parameter " + std::to_string(i) + " of shape " +
                             shape_str(params_[i].shape()) + " has no gradient");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
      const double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      w[j] = static_cast<T>(w[j] - lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

template class BasicAdam<float>;
template class BasicAdam<double>;

std::string to_string(Method m) {
  switch (m) {
    case Method::standard: return "standard";
    case Method::split: return "split";
    case Method::finetune: return "finetune";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  if (s == "standard") return Method::standard;
  if (s == "split") return Method::split;
  if (s == "finetune") return Method::finetune;
  throw ConfigError("unknown method '" + s + "' (expected standard, split or finetune)");
}

std::string to_string(Stage3Mode m) {
  return m == Stage3Mode::freeze ? "freeze" : "finetune_low_lr";
}

Stage3Mode stage3_mode_from_string(const std::string& s) {
  if (s == "freeze") return Stage3Mode::freeze;
  if (s == "finetune_low_lr") return Stage3Mode::finetune_low_lr;
  throw ConfigError("unknown stage3_mode '" + s + "' (expected freeze or finetune_low_lr)");
}

void TrainConfig::validate() const {
  if (!(lr_match > 0 && lr_head > 0 && lr_standard_high > 0 && lr_standard_low > 0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for batchnorm");
  if (lr_drop_fraction < 0.0 || lr_drop_fraction > 1.0) {
    throw ConfigError("lr_drop_fraction must lie in [0, 1]");
  }
  if (run_count == 0) throw ConfigError("run_count must be positive");
}

std::size_t TrainConfig::tap_for(const Model& model) const {
  const auto k = tap.value_or(model.feature_end());
  if (!model.is_tap(k)) {
    throw ConfigError("tap " + std::to_string(k) + " is not a block output of the model");
  }
  return k;
}

std::vector<EpochRecord> RunLog::stage(const std::string& name) const {
  std::vector<EpochRecord> out;
  for (const auto& e : epochs) {
    if (e.stage == name) out.push_back(e);
  }
  return out;
}

std::size_t RunLog::total_steps() const {
  std::size_t n = 0;
  for (const auto& e : epochs) n += e.steps;
  return n;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t stage_tag,
                                                    std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = Rng::stream(seed ^ mix64(stage_tag), epoch);
  for (std::size_t i = count; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const auto end = std::min(count, start + batch_size);
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

namespace {

constexpr std::uint64_t kTagStandard = 1, kTagMatch = 2, kTagHead = 3;

std::uint64_t stage_tag(const std::string& stage) {
  if (stage == "match") return kTagMatch;
  if (stage == "head") return kTagHead;
  std::uint64_t h = kTagStandard;
  for (char c : stage) h = mix64(h ^ static_cast<unsigned char>(c));
  return h;
}

double run_ce_epoch(Model& model, Adam& opt, const PreparedSet& data, bool masked,
                    const std::vector<std::vector<std::size_t>>& batches) {
  double total = 0.0;
  for (const auto& idx : batches) {
    const auto x = data.batch(idx, masked);
    const auto labels = data.batch_labels(idx);
    opt.zero_grad();
    auto loss = ops::softmax_cross_entropy(model.forward(x, Mode::train), labels);
    total += loss.item();
    backward(loss);
    opt.step();
  }
  return batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
}

}  // namespace

void train_standard(Model& model, const PreparedSet& data, bool masked,
                    const TrainConfig& config, RunLog& log, const std::string& stage) {
  config.validate();
  if (data.size() == 0) throw ConfigError("training set is empty");
  Adam opt(model.trainable_parameters(), config.lr_standard_high);
  const auto drop = static_cast<std::size_t>(
      std::ceil(config.lr_drop_fraction * static_cast<double>(config.primary_epochs)));
  const auto tag = stage_tag(stage);
  for (std::size_t e = 0; e < config.primary_epochs; ++e) {
    opt.set_lr(e < drop ? config.lr_standard_high : config.lr_standard_low);
    const auto batches = epoch_batches(data.size(), config.batch_size, config.seed, tag, e);
    const double loss = run_ce_epoch(model, opt, data, masked, batches);
    log.epochs.push_back({stage, e + 1, loss, opt.lr(), batches.size()});
  }
}

void require_paired(const PreparedSet& a, const PreparedSet& b) {
  if (a.size() != b.size()) {
    throw ConfigError("masked and unmasked sets are not paired: " + std::to_string(a.size()) +
                      " vs " + std::to_string(b.size()) + " samples");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.labels()[i] != b.labels()[i] || !(a.metas()[i] == b.metas()[i])) {
      throw ConfigError("masked and unmasked sets are not paired at sample " +
                        std::to_string(i));
    }
  }
  if (a.sample_shape() != b.sample_shape()) {
    throw ConfigError("masked and unmasked sets differ in image shape");
  }
}

void match_activations(Model& primary, Model& secondary, const PreparedSet& masked,
                       const PreparedSet& unmasked, std::size_t tap,
                       const TrainConfig& config, RunLog& log) {
  require_paired(masked, unmasked);
  if (!primary.is_tap(tap) || !secondary.is_tap(tap)) {
    throw ConfigError("invalid tap " + std::to_string(tap));
  }
  primary.set_trainable(false);
  const auto target_for = [&](const std::vector<std::size_t>& idx) {
    NoGradGuard guard;
    return *primary.forward_with_tap(masked.batch(idx, true), tap, Mode::eval, false).activation;
  };
  {
    // Epoch 0: the first epoch's batches through an untouched copy, so the
    // recorded starting loss sees batch statistics without moving anything.
    NoGradGuard guard;
    Model probe = secondary;
    const auto batches = epoch_batches(masked.size(), config.batch_size, config.seed, kTagMatch, 0);
    double total = 0.0;
    for (const auto& idx : batches) {
      const auto act =
          *probe.forward_with_tap(unmasked.batch(idx, false), tap, Mode::train, false).activation;
      total += ops::mse_loss(act, target_for(idx)).item();
    }
    const double mean = batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
    log.epochs.push_back({"match", 0, mean, config.lr_match, 0});
  }
  Adam opt(secondary.parameters(0, tap), config.lr_match);
  for (std::size_t e = 0; e < config.match_epochs; ++e) {
    const auto batches =
        epoch_batches(masked.size(), config.batch_size, config.seed, kTagMatch, e);
    double total = 0.0;
    for (const auto& idx : batches) {
      const auto target = target_for(idx);
      auto act = *secondary.forward_with_tap(unmasked.batch(idx, false), tap, Mode::train, false)
                      .activation;
      opt.zero_grad();
      auto loss = ops::mse_loss(act, target);
      total += loss.item();
      backward(loss);
      opt.step();
    }
    const double mean = batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
    log.epochs.push_back({"match", e + 1, mean, config.lr_match, batches.size()});
  }
}

void train_head(Model& secondary, const PreparedSet& unmasked, std::size_t tap,
                const TrainConfig& config, RunLog& log) {
  if (config.stage3_mode == Stage3Mode::freeze) {
    secondary.set_trainable(0, tap, false);
    secondary.set_trainable(tap + 1, secondary.layer_count() - 1, true);
  } else {
    secondary.set_trainable(true);
  }
  Adam opt(secondary.trainable_parameters(), config.lr_head);
  for (std::size_t e = 0; e < config.head_epochs; ++e) {
    const auto batches =
        epoch_batches(unmasked.size(), config.batch_size, config.seed, kTagHead, e);
    const double loss = run_ce_epoch(secondary, opt, unmasked, false, batches);
    log.epochs.push_back({"head", e + 1, loss, config.lr_head, batches.size()});
  }
}

SplitResult train_split(const PreparedSet& masked, const PreparedSet& unmasked,
                        const ModelConfig& model_config, const TrainConfig& config,
                        const Model* pretrained_primary) {
  config.validate();
  require_paired(masked, unmasked);
  if (masked.size() == 0) throw ConfigError("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  RunLog log;
  log.seed = config.seed;

  auto fresh = Model::build_simple_cnn(model_config);
  const auto tap = config.tap_for(fresh);
  Model primary = pretrained_primary ? *pretrained_primary : fresh;
  if (!pretrained_primary) train_standard(primary, masked, true, config, log, "primary");

  Model secondary = fresh;
  match_activations(primary, secondary, masked, unmasked, tap, config, log);
  Model matched = secondary;
  train_head(secondary, unmasked, tap, config, log);
  primary.set_trainable(true);

  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(primary), std::move(matched), std::move(secondary), std::move(log)};
}

FinetuneResult train_finetune(const PreparedSet& masked, const PreparedSet& unmasked,
                              const ModelConfig& model_config, const TrainConfig& config,
                              const Model* pretrained_primary) {
  config.validate();
  require_paired(masked, unmasked);
  const auto start = std::chrono::steady_clock::now();
  RunLog log;
  log.seed = config.seed;
  Model model = pretrained_primary ? *pretrained_primary : Model::build_simple_cnn(model_config);
  if (!pretrained_primary) train_standard(model, masked, true, config, log, "primary");
  model.set_trainable(true);
  model.set_trainable(0, model.feature_end(), false);
  Adam opt(model.trainable_parameters(), config.lr_head);
  for (std::size_t e = 0; e < config.head_epochs; ++e) {
    const auto batches =
        epoch_batches(unmasked.size(), config.batch_size, config.seed, kTagHead, e);
    const double loss = run_ce_epoch(model, opt, unmasked, false, batches);
    log.epochs.push_back({"finetune", e + 1, loss, config.lr_head, batches.size()});
  }
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(log)};
}

std::vector<int> predict(Model& model, const PreparedSet& data, bool masked) {
  NoGradGuard guard;
  std::vector<int> out;
  out.reserve(data.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto logits = model.forward(data.batch(idx, masked), Mode::eval);
    const auto K = logits.dim(1);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const auto row = logits.data().subspan(n * K, K);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double evaluate(Model& model, const PreparedSet& data, bool masked) {
  if (data.size() == 0) throw ConfigError("cannot evaluate on an empty set");
  const auto pred = predict(model, data, masked);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels()[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double activation_gap(Model& primary, Model& secondary, const PreparedSet& masked,
                      const PreparedSet& unmasked, std::size_t tap) {
  require_paired(masked, unmasked);
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < masked.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, masked.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto a = *primary.forward_with_tap(masked.batch(idx, true), tap, Mode::eval, false)
                        .activation;
    const auto b = *secondary.forward_with_tap(unmasked.batch(idx, false), tap, Mode::eval, false)
                        .activation;
    total += ops::mse_loss(a, b).item() * static_cast<double>(a.numel());
    count += a.numel();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace splittrain
