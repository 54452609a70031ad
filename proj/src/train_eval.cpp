#include "immunity/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include <json.hpp>

#include "immunity/error.hpp"
#include "immunity/gradcam.hpp"
#include "immunity/ops.hpp"
#include "immunity/parallel.hpp"

namespace immunity {

std::string to_string(TrainMode mode) { return mode == TrainMode::standard ? "standard" : "adversarial"; }

TrainMode parse_train_mode(const std::string& name) {
  if (name == "standard") return TrainMode::standard;
  if (name == "adversarial") return TrainMode::adversarial;
  throw ConfigError("unknown training mode '" + name + "', expected one of {standard,adversarial}");
}

AttackSpec TrainConfig::default_inner_attack() {
  AttackSpec spec;
  spec.kind = AttackKind::pgd;
  spec.epsilon = 8.0 / 255.0;
  spec.step_size = 2.0 / 255.0;
  spec.iterations = 10;
  spec.random_start = true;
  spec.rsg_handling = RsgHandling::identity;
  return spec;
}

std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> out;
  if (!(learning_rate > 0.0)) out.push_back("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) out.push_back("weight_decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) out.push_back("momentum must be in [0, 1)");
  if (epochs < 1) out.push_back("epochs must be at least 1");
  if (batch_size < 2) out.push_back("batch_size must be at least 2");
  if (!(grad_clip >= 0.0)) out.push_back("grad_clip must be non-negative");
  if (!(coefficients.alpha >= 0.0)) out.push_back("alpha must be non-negative");
  if (!(coefficients.beta >= 0.0)) out.push_back("beta must be non-negative");
  if (!(coefficients.gamma >= 0.0)) out.push_back("gamma must be non-negative");
  try {
    inner_attack.validate();
  } catch (const ConfigError& e) {
    out.emplace_back(e.what());
  }
  return out;
}

void TrainConfig::validate() const {
  auto p = problems();
  if (p.empty()) return;
  std::string msg = "invalid training configuration:";
  for (const auto& s : p) msg += "\n  " + s;
  throw ConfigError(msg);
}

void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity, double lr,
              double weight_decay, double momentum) {
  if (param.size() != velocity.size() || (!grad.empty() && grad.size() != param.size())) {
    throw ShapeError("sgd_step: parameter, gradient and velocity sizes differ");
  }
  std::vector<double> v(param.size()), p(param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    v[i] = momentum * velocity[i] + g + weight_decay * param[i];
    p[i] = param[i] - lr * v[i];
    if (!std::isfinite(p[i]) || !std::isfinite(v[i])) {
      throw NumericError("sgd_step: non-finite update at element " + std::to_string(i) + " (grad " +
                         std::to_string(g) + ", param " + std::to_string(param[i]) + "); training halted");
    }
  }
  std::copy(v.begin(), v.end(), velocity.begin());
  std::copy(p.begin(), p.end(), param.begin());
}

namespace {

void apply_sgd(std::vector<Tensor>& params, TrainState& state, const TrainConfig& config) {
  if (state.velocity.empty()) {
    for (const Tensor& p : params) state.velocity.emplace_back(p.numel(), 0.0);
  }
  if (state.velocity.size() != params.size()) throw ConfigError("train: optimizer state does not match the model");
  double factor = 1.0;
  if (config.grad_clip > 0.0) {
    double sq = 0.0;
    for (const Tensor& p : params)
      for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config.grad_clip) factor = config.grad_clip / norm;
  }
  std::vector<double> scaled;
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::span<const double> grad = params[k].grad();
    if (factor != 1.0) {
      scaled.assign(grad.begin(), grad.end());
      for (double& g : scaled) g *= factor;
      grad = scaled;
    }
    sgd_step(params[k].mutable_data(), grad, state.velocity[k], config.learning_rate, config.weight_decay,
             config.momentum);
    params[k].zero_grad();
  }
}

Tensor make_batch(const Dataset& data, std::span<const std::size_t> idx, bool augment_images, Rng& rng) {
  if (!augment_images) return data.batch(idx);
  std::vector<double> pixels;
  pixels.reserve(idx.size() * data.image_size());
  for (std::size_t i : idx) {
    Sample s = augment(data.sample(i), rng);
    pixels.insert(pixels.end(), s.image.begin(), s.image.end());
  }
  return Tensor({idx.size(), data.channels(), data.height(), data.width()}, std::move(pixels));
}

template <class Step>
std::vector<LossBreakdown> run_epoch(const Dataset& data, const TrainConfig& config, TrainState& state,
                                     const StepCallback& on_step, Step step) {
  config.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  std::vector<LossBreakdown> log;
  auto order = shuffled_indices(data.size(), state.rng);
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t end = std::min(order.size(), start + config.batch_size);
    if (end - start < 2) continue;
    std::span<const std::size_t> idx(order.data() + start, end - start);
    Tensor x = make_batch(data, idx, config.augment, state.rng);
    auto labels = data.batch_labels(idx);
    LossBreakdown b = step(x, labels);
    if (on_step) on_step(state.step, b);
    ++state.step;
    log.push_back(b);
  }
  return log;
}

}  // namespace

std::vector<LossBreakdown> train_epoch(MoEModel& model, const Dataset& data, const TrainConfig& config,
                                       TrainState& state, const StepCallback& on_step) {
  auto params = model.parameters();
  const auto& k = config.coefficients;
  const bool regularized = k.beta > 0.0 || k.gamma > 0.0;
  return run_epoch(data, config, state, on_step, [&](Tensor x, const std::vector<std::size_t>& labels) {
    if (config.mode == TrainMode::adversarial) {
      x = run_attack(model, x, labels, config.inner_attack, state.rng).x_adv;
    }
    ForwardRecord rec = model.forward(x, config.rsg_train, state.rng);
    Tensor ce = loss_ce(rec.mixture, rec.expert_probs, labels, k.alpha);
    // Heatmaps are always computed so the regularizers can be logged; they join
    // the graph only when a coefficient is non-zero.
    auto maps = expert_heatmaps(rec, labels, data.height(), data.width(), regularized);
    Tensor mi = loss_mi(maps);
    std::vector<Tensor> centers;
    for (const Tensor& m : maps) centers.push_back(center_of_mass(m));
    Tensor ps = loss_ps(centers);
    TotalLoss t = total_loss(ce, mi, ps, k, model.n_experts());
    backward(t.total);
    apply_sgd(params, state, config);
    return t.breakdown;
  });
}

std::vector<LossBreakdown> train_baseline_epoch(SingleExpertModel& model, const Dataset& data,
                                                const TrainConfig& config, TrainState& state,
                                                const StepCallback& on_step) {
  auto params = model.parameters();
  return run_epoch(data, config, state, on_step, [&](Tensor x, const std::vector<std::size_t>& labels) {
    if (config.mode == TrainMode::adversarial) {
      x = run_attack(model, x, labels, config.inner_attack, state.rng).x_adv;
    }
    Tensor ce = ops::sum(ops::nll(ops::softmax(model.logits(x)), labels, kProbabilityFloor));
    Tensor total = ops::scale(ce, 1.0 / static_cast<double>(labels.size()));
    backward(total);
    apply_sgd(params, state, config);
    LossBreakdown b;
    b.ce = ce.item();
    b.total = total.item();
    b.mb = labels.size();
    b.n_experts = 1;
    b.coefficients = {0.0, 0.0, 0.0};
    return b;
  });
}

AccuracyResult evaluate(const Classifier& model, const Dataset& data, const std::optional<AttackSpec>& attack,
                        const RsgMode& rsg, Rng& rng, std::size_t batch_size) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
  const std::size_t n_batches = (data.size() + batch_size - 1) / batch_size;
  // Each batch draws from its own generator so results do not depend on the worker count.
  std::vector<std::uint64_t> seeds(n_batches);
  for (auto& s : seeds) s = rng();
  std::vector<std::vector<std::size_t>> predictions(n_batches);
  parallel_for(n_batches, [&](std::size_t k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = k * batch_size; i < std::min(data.size(), (k + 1) * batch_size); ++i) idx.push_back(i);
    Rng batch_rng(seeds[k]);
    Tensor x = data.batch(idx);
    if (attack) x = run_attack(model, x, data.batch_labels(idx), *attack, batch_rng).x_adv;
    NoGradGuard no_grad;
    predictions[k] = predict(model.probabilities(x, rsg, batch_rng));
  });
  AccuracyResult r;
  r.per_class_correct.assign(model.n_classes(), 0);
  r.per_class_total.assign(model.n_classes(), 0);
  for (std::size_t k = 0; k < n_batches; ++k) {
    for (std::size_t j = 0; j < predictions[k].size(); ++j) {
      const std::size_t label = data.label(k * batch_size + j);
      ++r.per_class_total.at(label);
      if (predictions[k][j] == label) {
        ++r.per_class_correct[label];
        ++r.correct;
      }
      ++r.total;
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

double iscore_of(const std::vector<Tensor>& heatmaps) {
  const std::size_t N = heatmaps.size();
  if (N < 2) throw ConfigError("iscore: at least 2 experts required");
  const std::size_t B = heatmaps[0].dim() == 3 ? heatmaps[0].size(0) : 1;
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    if (heatmaps[i].shape() != heatmaps[0].shape()) throw ShapeError("iscore: heatmap grids differ");
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      auto a = heatmaps[i].data(), b = heatmaps[j].data();
      for (std::size_t c = 0; c < a.size(); ++c) total += (a[c] - b[c]) * (a[c] - b[c]);
    }
  }
  return total / (static_cast<double>(N * (N - 1)) * static_cast<double>(B));
}

double cscore_of(const std::vector<Tensor>& heatmaps) {
  std::vector<Tensor> centers;
  for (const Tensor& h : heatmaps) centers.push_back(center_of_mass(h.detach()));
  return loss_ps(centers).item() / static_cast<double>(centers.at(0).size(0));
}

namespace {

// Detached heatmaps for samples [start, end) with identity gating; heatmaps do not depend on the gate.
std::vector<Tensor> heatmaps_for(const MoEModel& model, const Dataset& data, std::size_t start, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = start; i < end; ++i) idx.push_back(i);
  Rng unused(0);
  ForwardRecord rec = model.forward(data.batch(idx), RsgMode::identity(), unused);
  return expert_heatmaps(rec, data.batch_labels(idx), data.height(), data.width(), false);
}

}  // namespace

double iscore(const MoEModel& model, const Dataset& data, std::size_t max_samples, std::size_t batch_size) {
  if (data.empty()) throw ConfigError("iscore: empty dataset");
  const std::size_t n = std::min(max_samples, data.size());
  double weighted = 0.0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    weighted += iscore_of(heatmaps_for(model, data, start, end)) * static_cast<double>(end - start);
  }
  return weighted / static_cast<double>(n);
}

double cscore(const MoEModel& model, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw ConfigError("cscore: empty dataset");
  double sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    if (end - start < 2) {
      std::clog << "warning: cscore skips a batch of " << end - start << " sample\n";
      continue;
    }
    sum += cscore_of(heatmaps_for(model, data, start, end));
    ++batches;
  }
  return batches ? sum / static_cast<double>(batches) : 0.0;
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

EvalReport make_report(const MoEModel& model, const Dataset& data, const std::optional<AttackSpec>& attack,
                       const RsgMode& rsg, std::uint64_t seed, std::size_t n_seeds, std::size_t iscore_samples,
                       std::size_t batch_size, const std::string& config_json) {
  if (n_seeds == 0) throw ConfigError("report: at least one seed required");
  EvalReport r;
  r.seed = seed;
  r.config_json = config_json;
  r.dataset_size = data.size();
  std::vector<double> clean, attacked;
  for (std::size_t k = 0; k < n_seeds; ++k) {
    const std::uint64_t s = seed + k;
    r.seeds.push_back(s);
    Rng rng(s);
    AccuracyResult c = evaluate(model, data, std::nullopt, rsg, rng, batch_size);
    clean.push_back(c.accuracy);
    if (k == 0) {
      r.per_class_total = c.per_class_total;
      r.per_class_clean_correct = c.per_class_correct;
    }
    if (attack) {
      AccuracyResult a = evaluate(model, data, attack, rsg, rng, batch_size);
      attacked.push_back(a.accuracy);
      if (k == 0) r.per_class_attack_correct = a.per_class_correct;
    }
  }
  std::tie(r.clean_accuracy, r.clean_accuracy_std) = mean_std(clean);
  if (attack) {
    const std::string name = to_string(attack->kind);
    std::tie(r.attack_accuracy[name], r.attack_accuracy_std[name]) = mean_std(attacked);
    nlohmann::ordered_json j;
    j["kind"] = name;
    j["epsilon"] = attack->epsilon;
    j["step_size"] = attack->step_size;
    j["iterations"] = attack->iterations;
    j["momentum_decay"] = attack->momentum_decay;
    j["random_start"] = attack->random_start;
    j["rsg_handling"] = to_string(attack->rsg_handling);
    j["descent"] = attack->descent;
    r.attack_json = j.dump();
  } else {
    r.attack_json = "\"none\"";
  }
  r.iscore_samples = std::min(iscore_samples, data.size());
  r.iscore = iscore(model, data, iscore_samples);
  r.cscore = cscore(model, data);
  return r;
}

std::string EvalReport::to_json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  j["config"] = config_json.empty() ? ordered_json::object() : ordered_json::parse(config_json);
  j["seed"] = seed;
  j["seeds"] = seeds;
  j["dataset_size"] = dataset_size;
  j["attack"] = attack_json.empty() ? ordered_json("none") : ordered_json::parse(attack_json);
  j["clean_accuracy"] = clean_accuracy;
  j["clean_accuracy_std"] = clean_accuracy_std;
  j["attack_accuracy"] = attack_accuracy;
  j["attack_accuracy_std"] = attack_accuracy_std;
  ordered_json classes = ordered_json::array();
  for (std::size_t c = 0; c < per_class_total.size(); ++c) {
    ordered_json e;
    e["class"] = c;
    e["total"] = per_class_total[c];
    e["clean_correct"] = per_class_clean_correct.at(c);
    if (!per_class_attack_correct.empty()) e["attack_correct"] = per_class_attack_correct[c];
    classes.push_back(e);
  }
  j["per_class"] = classes;
  j["iscore"] = iscore;
  j["iscore_samples"] = iscore_samples;
  j["cscore"] = cscore;
  return j.dump(2);
}

}  // namespace immunity
