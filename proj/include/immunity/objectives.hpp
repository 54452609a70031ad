#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "immunity/gradcam.hpp"
#include "immunity/tensor.hpp"

namespace immunity {

/// Floor applied to probabilities before taking logs in the cross-entropy.
inline constexpr double kProbabilityFloor = 1e-12;

struct LossCoefficients {
  double alpha = 1.0;  // weight of the per-expert cross-entropy terms
  double beta = 1.0;   // mutual-information regularizer
  double gamma = 0.1;  // position-stability regularizer
};

struct LossBreakdown {
  double ce = 0.0;     // sum over the batch
  double mi = 0.0;     // sum over the batch
  double ps = 0.0;     // one value per batch
  double total = 0.0;
  LossCoefficients coefficients;
  std::size_t mb = 0;
  std::size_t n_experts = 0;

  /// {"step":..,"ce":..,"mi":..,"ps":..,"total":..}
  std::string to_json_line(std::size_t step) const;
};

struct MassCenter {
  double x_c = 0.0;  // fractional row
  double y_c = 0.0;  // fractional column
  std::size_t expert_index = 0;
  std::size_t sample_index = 0;
};

/// Per-sample combined cross-entropy: -log p[label] - alpha * sum_i log p_i[label].
/// Returns a (B) tensor.
Tensor loss_ce(const Tensor& mixture, const std::vector<Tensor>& expert_probs, std::span<const std::size_t> labels,
               double alpha);
double loss_ce(std::span<const double> mixture, const std::vector<std::vector<double>>& expert_probs,
               std::size_t label, double alpha);

/// Per-sample heatmap MI loss: -sum_i sum_c h_i(c) log(h_i(c) / sum_j h_j(c)).
/// Each heatmap tensor is (B, H, W) or (H, W); returns (B) or (1).
Tensor loss_mi(const std::vector<Tensor>& heatmaps);
double loss_mi(const std::vector<Heatmap>& heatmaps);

/// Saliency-weighted mean cell coordinate (row, column), 0-based. (B, H, W) -> (B, 2).
Tensor center_of_mass(const Tensor& heatmaps);
MassCenter center_of_mass(const Heatmap& heatmap);

/// Sum over ordered expert pairs of the batch variance numerator of squared
/// center distances. `centers[i]` is expert i's (B, 2) tensor. Returns a scalar;
/// zero (with a warning on stderr) when the batch has fewer than 2 samples.
Tensor loss_ps(const std::vector<Tensor>& centers);
/// centers[q][i]: sample q, expert i.
double loss_ps(const std::vector<std::vector<MassCenter>>& centers);

struct TotalLoss {
  Tensor total;  // scalar, differentiable
  LossBreakdown breakdown;
};

/// (1/mb) * (sum ce + beta/N * sum mi + gamma/(N(N-1)) * ps).
TotalLoss total_loss(const Tensor& ce, const Tensor& mi, const Tensor& ps, const LossCoefficients& coefficients,
                     std::size_t n_experts);
double total_loss(double ce_sum, double mi_sum, double ps, const LossCoefficients& coefficients,
                  std::size_t n_experts, std::size_t mb);

}  // namespace immunity
