#include "immunity/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "immunity/error.hpp"
#include "immunity/objectives.hpp"
#include "immunity/ops.hpp"

namespace immunity {

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::bim: return "bim";
    case AttackKind::mim: return "mim";
    case AttackKind::pgd: return "pgd";
  }
  return "unknown";
}

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "fgsm") return AttackKind::fgsm;
  if (name == "bim") return AttackKind::bim;
  if (name == "mim") return AttackKind::mim;
  if (name == "pgd") return AttackKind::pgd;
  throw ConfigError("unknown attack '" + name + "', expected one of {fgsm,bim,mim,pgd}");
}

std::string to_string(RsgHandling handling) {
  switch (handling) {
    case RsgHandling::identity: return "identity";
    case RsgHandling::fresh_per_step: return "fresh_per_step";
    case RsgHandling::fixed_draw: return "fixed_draw";
  }
  return "unknown";
}

RsgHandling parse_rsg_handling(const std::string& name) {
  if (name == "identity") return RsgHandling::identity;
  if (name == "fresh_per_step") return RsgHandling::fresh_per_step;
  if (name == "fixed_draw") return RsgHandling::fixed_draw;
  throw ConfigError("unknown rsg handling '" + name + "', expected one of {identity,fresh_per_step,fixed_draw}");
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("attack: epsilon must be in [0, 1]");
  if (!(step_size > 0.0)) throw ConfigError("attack: step_size must be positive");
  if (iterations < 1) throw ConfigError("attack: iterations must be at least 1");
  if (!(momentum_decay >= 0.0)) throw ConfigError("attack: momentum_decay must be non-negative");
}

namespace {

void check_batch(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels) {
  if (x.dim() != 4 || x.size(0) != labels.size()) {
    throw ShapeError("attack: input " + shape_to_string(x.shape()) + " does not match " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= model.n_classes()) throw ConfigError("attack: label " + std::to_string(y) + " out of range");
  }
}

// The gate mode used for one attack run; fixed_draw takes a single permutation up front.
RsgMode resolve(RsgHandling handling, std::size_t n_slots, Rng& rng) {
  switch (handling) {
    case RsgHandling::identity: return RsgMode::identity();
    case RsgHandling::fresh_per_step: return RsgMode::fresh();
    case RsgHandling::fixed_draw: return RsgMode::fixed(RsgMode::fresh().draw(n_slots, rng));
  }
  return RsgMode::identity();
}

std::size_t gate_slots(const Classifier& model) {
  if (const auto* moe = dynamic_cast<const MoEModel*>(&model)) return moe->n_experts();
  return 1;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

AdversarialBatch finish(const Classifier& model, Tensor x_adv, const Tensor& x, std::span<const std::size_t> labels,
                        const AttackSpec& spec, const RsgMode& rsg, Rng& rng) {
  AdversarialBatch out;
  {
    NoGradGuard no_grad;
    auto pred = predict(model.probabilities(x_adv, rsg, rng));
    out.success.resize(labels.size());
    for (std::size_t b = 0; b < labels.size(); ++b) out.success[b] = pred[b] != labels[b];
  }
  out.x_adv = std::move(x_adv);
  out.x_clean = x;
  out.spec = spec;
  return out;
}

}  // namespace

std::vector<double> attack_gradient(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                                    const RsgMode& rsg, Rng& rng, std::size_t step) {
  check_batch(model, x, labels);
  Tensor input(x.shape(), {x.data().begin(), x.data().end()}, true);
  Tensor loss = ops::sum(ops::nll(model.probabilities(input, rsg, rng), labels, kProbabilityFloor));
  auto grads = gradients(loss, {input});
  for (std::size_t i = 0; i < grads[0].size(); ++i) {
    if (!std::isfinite(grads[0][i])) {
      throw NumericError("attack: non-finite gradient at step " + std::to_string(step) + ", element " +
                         std::to_string(i));
    }
  }
  return std::move(grads[0]);
}

std::vector<double> attack_gradient(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                                    RsgHandling handling, Rng& rng) {
  const RsgMode rsg = resolve(handling, gate_slots(model), rng);
  return attack_gradient(model, x, labels, rsg, rng, 0);
}

Tensor project_linf(const Tensor& x_adv, const Tensor& x_ref, double epsilon) {
  if (x_adv.shape() != x_ref.shape()) {
    throw ShapeError("project_linf: " + shape_to_string(x_adv.shape()) + " vs " + shape_to_string(x_ref.shape()));
  }
  auto a = x_adv.data();
  auto r = x_ref.data();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = std::clamp(std::clamp(a[i], r[i] - epsilon, r[i] + epsilon), 0.0, 1.0);
  }
  return Tensor(x_adv.shape(), std::move(out));
}

AdversarialBatch fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                      const AttackSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.kind != AttackKind::fgsm) throw ConfigError("fgsm: spec kind is " + to_string(spec.kind));
  const RsgMode rsg = resolve(spec.rsg_handling, gate_slots(model), rng);
  const double direction = spec.descent ? -1.0 : 1.0;
  auto g = attack_gradient(model, x, labels, rsg, rng, 1);
  auto d = x.data();
  std::vector<double> stepped(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) stepped[i] = d[i] + direction * spec.epsilon * sign(g[i]);
  Tensor x_adv = project_linf(Tensor(x.shape(), std::move(stepped)), x, spec.epsilon);
  return finish(model, std::move(x_adv), x, labels, spec, rsg, rng);
}

AdversarialBatch iterative_attack(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                                  const AttackSpec& spec, Rng& rng, const AttackObserver& observer) {
  spec.validate();
  if (spec.kind == AttackKind::fgsm) throw ConfigError("iterative_attack: use fgsm for single-step attacks");
  check_batch(model, x, labels);
  const RsgMode rsg = resolve(spec.rsg_handling, gate_slots(model), rng);
  const double direction = spec.descent ? -1.0 : 1.0;
  const std::size_t B = x.size(0);
  const std::size_t per_sample = x.numel() / B;
  auto ref = x.data();

  std::vector<double> cur(ref.begin(), ref.end());
  if (spec.kind == AttackKind::pgd && spec.random_start) {
    std::uniform_real_distribution<double> u(-spec.epsilon, spec.epsilon);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = std::clamp(ref[i] + u(rng), 0.0, 1.0);
  }
  Tensor x_adv(x.shape(), std::move(cur));
  std::vector<double> momentum(spec.kind == AttackKind::mim ? x.numel() : 0, 0.0);

  for (std::size_t t = 1; t <= spec.iterations; ++t) {
    auto g = attack_gradient(model, x_adv, labels, rsg, rng, t);
    if (spec.kind == AttackKind::mim) {
      for (std::size_t b = 0; b < B; ++b) {
        double l1 = 0.0;
        for (std::size_t i = b * per_sample; i < (b + 1) * per_sample; ++i) l1 += std::abs(g[i]);
        for (std::size_t i = b * per_sample; i < (b + 1) * per_sample; ++i) {
          momentum[i] = spec.momentum_decay * momentum[i] + (l1 > 0.0 ? g[i] / l1 : 0.0);
        }
      }
      g = momentum;
    }
    auto a = x_adv.data();
    std::vector<double> stepped(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) stepped[i] = a[i] + direction * spec.step_size * sign(g[i]);
    x_adv = project_linf(Tensor(x.shape(), std::move(stepped)), x, spec.epsilon);
    if (observer) observer(t, x_adv);
  }
  return finish(model, std::move(x_adv), x, labels, spec, rsg, rng);
}

AdversarialBatch run_attack(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                            const AttackSpec& spec, Rng& rng, const AttackObserver& observer) {
  if (spec.kind == AttackKind::fgsm) {
    AdversarialBatch out = fgsm(model, x, labels, spec, rng);
    if (observer) observer(1, out.x_adv);
    return out;
  }
  return iterative_attack(model, x, labels, spec, rng, observer);
}

double mean_batch_loss(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                       const RsgMode& rsg, Rng& rng) {
  NoGradGuard no_grad;
  check_batch(model, x, labels);
  return ops::mean(ops::nll(model.probabilities(x, rsg, rng), labels, kProbabilityFloor)).item();
}

std::vector<std::size_t> predict(const Tensor& probabilities) {
  if (probabilities.dim() != 2) throw ShapeError("predict: expected (B, M), got " + shape_to_string(probabilities.shape()));
  const std::size_t B = probabilities.size(0), M = probabilities.size(1);
  auto d = probabilities.data();
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = d.data() + b * M;
    out[b] = static_cast<std::size_t>(std::max_element(row, row + M) - row);
  }
  return out;
}

}  // namespace immunity
