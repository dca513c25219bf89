#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "splittrain/data.hpp"
#include "splittrain/nn.hpp"

namespace splittrain {

class MissingGradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Adam with bias correction. Holds the parameter handles it updates.
template <typename T>
class BasicAdam {
 public:
  BasicAdam(std::vector<BasicTensor<T>> params, double lr, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::size_t timestep() const { return t_; }
  std::size_t param_count() const { return params_.size(); }
  const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<BasicTensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

using Adam = BasicAdam<float>;

enum class Method { standard, split, finetune };
enum class Stage3Mode { freeze, finetune_low_lr };

std::string to_string(Method method);
Method method_from_string(const std::string& s);
std::string to_string(Stage3Mode mode);
Stage3Mode stage3_mode_from_string(const std::string& s);

struct TrainConfig {
  Method method = Method::split;
  std::optional<std::size_t> tap;  // layer index; defaults to feature_end
  std::size_t primary_epochs = 20;
  std::size_t match_epochs = 15;
  std::size_t head_epochs = 15;
  double lr_match = 1e-3;
  double lr_head = 1e-4;
  // Standard schedule: high rate, then low rate from the drop epoch on.
  double lr_standard_high = 1e-3;
  double lr_standard_low = 1e-4;
  double lr_drop_fraction = 2.0 / 3.0;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Stage3Mode stage3_mode = Stage3Mode::freeze;
  std::size_t run_count = 5;

  void validate() const;
  std::size_t tap_for(const Model& model) const;
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;  // 1-based within the stage; 0 = measured before any update
  double loss = 0.0;      // mean of per-batch losses
  double lr = 0.0;
  std::size_t steps = 0;
};

struct RunLog {
  std::vector<EpochRecord> epochs;
  std::optional<double> test_accuracy;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;

  std::vector<EpochRecord> stage(const std::string& name) const;
  std::size_t total_steps() const;
};

// Shuffled minibatches for one epoch; the order depends only on (seed,
// stage tag, epoch). A trailing batch of one sample is dropped (batchnorm
// needs two).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t stage_tag,
                                                    std::size_t epoch);

/// Cross-entropy training of every trainable layer on the masked or
/// unmasked variant, with the high/low learning-rate schedule.
void train_standard(Model& model, const PreparedSet& data, bool masked,
                    const TrainConfig& config, RunLog& log,
                    const std::string& stage = "standard");

struct SplitResult {
  Model primary;         // m1, trained on masked images
  Model secondary_matched;  // m2 after activation matching
  Model secondary;       // m2 after the classifier stage
  RunLog log;
};

// Stage 1 trains m1 unless `pretrained_primary` is given (shared across tap
// variants of one seed).
SplitResult train_split(const PreparedSet& masked, const PreparedSet& unmasked,
                        const ModelConfig& model_config, const TrainConfig& config,
                        const Model* pretrained_primary = nullptr);

// Stage 2 alone: fits m2's layers [0, tap] so their activations on unmasked
// input match frozen m1's on the paired masked input.
void match_activations(Model& primary, Model& secondary, const PreparedSet& masked,
                       const PreparedSet& unmasked, std::size_t tap,
                       const TrainConfig& config, RunLog& log);

// Stage 3 alone: cross-entropy on unmasked images for the layers after the
// tap (freeze) or for all layers (finetune_low_lr), at lr_head.
void train_head(Model& secondary, const PreparedSet& unmasked, std::size_t tap,
                const TrainConfig& config, RunLog& log);

struct FinetuneResult {
  Model model;
  RunLog log;
};

// Full training on masked images, then conv blocks frozen and the classifier
// retrained on unmasked images at lr_head.
FinetuneResult train_finetune(const PreparedSet& masked, const PreparedSet& unmasked,
                              const ModelConfig& model_config, const TrainConfig& config,
                              const Model* pretrained_primary = nullptr);

void require_paired(const PreparedSet& a, const PreparedSet& b);

// Top-1 accuracy in eval mode. Reads the model only.
double evaluate(Model& model, const PreparedSet& data, bool masked = false);

// Per-sample predicted class.
std::vector<int> predict(Model& model, const PreparedSet& data, bool masked = false);

// Mean tap-activation MSE between m1 (masked) and m2 (unmasked) over the set.
double activation_gap(Model& primary, Model& secondary, const PreparedSet& masked,
                      const PreparedSet& unmasked, std::size_t tap);

}  // namespace splittrain
