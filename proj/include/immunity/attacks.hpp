#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "immunity/moe.hpp"
#include "immunity/tensor.hpp"

namespace immunity {

enum class AttackKind : std::uint8_t { fgsm, bim, mim, pgd };
std::string to_string(AttackKind kind);
/// Throws ConfigError listing the supported names.
AttackKind parse_attack_kind(const std::string& name);

/// How the Random Switch Gate behaves while the attacker computes gradients.
enum class RsgHandling : std::uint8_t { identity, fresh_per_step, fixed_draw };
std::string to_string(RsgHandling handling);
RsgHandling parse_rsg_handling(const std::string& name);

struct AttackSpec {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 8.0 / 255.0;    // L-inf budget in pixel units
  double step_size = 2.0 / 255.0;
  std::size_t iterations = 20;
  double momentum_decay = 1.0;     // mim
  bool random_start = true;        // pgd
  RsgHandling rsg_handling = RsgHandling::fresh_per_step;
  // Steps along -sign(grad) instead of +sign(grad); kept for comparison with
  // the descent form of the update rule.
  bool descent = false;

  /// Throws ConfigError unless 0 <= epsilon <= 1, step_size > 0, iterations >= 1.
  void validate() const;
};

struct AdversarialBatch {
  Tensor x_adv;
  Tensor x_clean;
  AttackSpec spec;
  std::vector<bool> success;  // prediction on x_adv differs from the label
};

/// Gradient of the summed mixture cross-entropy with respect to pixel-space x.
/// `step` only labels error messages.
std::vector<double> attack_gradient(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                                    const RsgMode& rsg, Rng& rng, std::size_t step = 0);
/// Convenience overload resolving `handling` for a single call.
std::vector<double> attack_gradient(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                                    RsgHandling handling, Rng& rng);

/// Clamp into [x_ref - eps, x_ref + eps], then into [0, 1].
Tensor project_linf(const Tensor& x_adv, const Tensor& x_ref, double epsilon);

/// Called after every iteration with the 1-based step index and the current iterate.
using AttackObserver = std::function<void(std::size_t step, const Tensor& x_adv)>;

AdversarialBatch fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                      const AttackSpec& spec, Rng& rng);
/// BIM, MIM and PGD.
AdversarialBatch iterative_attack(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                                  const AttackSpec& spec, Rng& rng, const AttackObserver& observer = {});
/// Dispatches on spec.kind.
AdversarialBatch run_attack(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                            const AttackSpec& spec, Rng& rng, const AttackObserver& observer = {});

/// Mean mixture cross-entropy over the batch (identity gate unless `rsg` says otherwise).
double mean_batch_loss(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                       const RsgMode& rsg, Rng& rng);

/// Row-wise argmax, ties toward the lowest index.
std::vector<std::size_t> predict(const Tensor& probabilities);

}  // namespace immunity
