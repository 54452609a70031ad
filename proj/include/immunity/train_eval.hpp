#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "immunity/attacks.hpp"
#include "immunity/data_io.hpp"
#include "immunity/moe.hpp"
#include "immunity/objectives.hpp"

namespace immunity {

enum class TrainMode : std::uint8_t { standard, adversarial };
std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct TrainConfig {
  double learning_rate = 0.01;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  // Rescales the global gradient to this L2 norm when it is larger; 0 disables.
  double grad_clip = 5.0;
  LossCoefficients coefficients;
  TrainMode mode = TrainMode::standard;
  AttackSpec inner_attack = default_inner_attack();
  bool augment = false;
  std::uint64_t seed = 0;
  RsgMode rsg_train = RsgMode::identity();
  RsgMode rsg_eval = RsgMode::fresh();

  static AttackSpec default_inner_attack();
  /// Every violated constraint, one message each.
  std::vector<std::string> problems() const;
  /// Throws ConfigError listing every problem.
  void validate() const;
};

/// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
/// Throws NumericError (leaving param untouched) when the update is non-finite.
void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity, double lr,
              double weight_decay, double momentum);

/// Momentum buffers and the training rng; one per run.
struct TrainState {
  explicit TrainState(std::uint64_t seed) : rng(seed) {}
  Rng rng;
  std::vector<std::vector<double>> velocity;
  std::size_t step = 0;
};

/// Called after each optimizer step with the global step index and its losses.
using StepCallback = std::function<void(std::size_t step, const LossBreakdown& losses)>;

/// One pass over `data` in a freshly shuffled order. Batches of fewer than two
/// samples are skipped. Returns one breakdown per optimizer step.
std::vector<LossBreakdown> train_epoch(MoEModel& model, const Dataset& data, const TrainConfig& config,
                                       TrainState& state, const StepCallback& on_step = {});

/// Plain cross-entropy training of the single-expert baseline (ce field only).
std::vector<LossBreakdown> train_baseline_epoch(SingleExpertModel& model, const Dataset& data,
                                                const TrainConfig& config, TrainState& state,
                                                const StepCallback& on_step = {});

struct AccuracyResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::size_t> per_class_correct;
  std::vector<std::size_t> per_class_total;
};

/// Fraction of argmax(prediction) == label, attacking each batch first when
/// `attack` is set. Predictions use `rsg`. Throws ConfigError on an empty set.
AccuracyResult evaluate(const Classifier& model, const Dataset& data, const std::optional<AttackSpec>& attack,
                        const RsgMode& rsg, Rng& rng, std::size_t batch_size = 100);

/// Mean over samples of (1/(N(N-1))) sum_{i != j} sum_c (h_i(c) - h_j(c))^2
/// on the first `max_samples` samples.
double iscore(const MoEModel& model, const Dataset& data, std::size_t max_samples = 256,
              std::size_t batch_size = 64);
/// Per-batch loss_ps / mb, averaged over batches of at least two samples.
double cscore(const MoEModel& model, const Dataset& data, std::size_t batch_size = 32);

/// The same metrics on precomputed per-expert (B, H, W) heatmaps.
double iscore_of(const std::vector<Tensor>& heatmaps);
double cscore_of(const std::vector<Tensor>& heatmaps);

struct EvalReport {
  double clean_accuracy = 0.0;       // mean over seeds
  double clean_accuracy_std = 0.0;   // sample standard deviation, 0 for one seed
  std::map<std::string, double> attack_accuracy;
  std::map<std::string, double> attack_accuracy_std;
  std::string attack_json;           // attack echo, or "none"
  double iscore = 0.0;
  double cscore = 0.0;
  std::size_t iscore_samples = 0;
  std::size_t dataset_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  // Counts from the first seed, indexed by class.
  std::vector<std::size_t> per_class_total;
  std::vector<std::size_t> per_class_clean_correct;
  std::vector<std::size_t> per_class_attack_correct;
  std::string config_json;           // resolved configuration echo, as a JSON object

  std::string to_json() const;
};

/// Clean and (optionally) attacked accuracy for seeds seed, seed+1, ..., plus
/// IScore and CScore on the same data.
EvalReport make_report(const MoEModel& model, const Dataset& data, const std::optional<AttackSpec>& attack,
                       const RsgMode& rsg, std::uint64_t seed, std::size_t n_seeds, std::size_t iscore_samples,
                       std::size_t batch_size, const std::string& config_json);

/// Mean and sample standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

}  // namespace immunity
