#include "immunity/objectives.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "immunity/error.hpp"
#include "immunity/ops.hpp"

namespace immunity {

std::string LossBreakdown::to_json_line(std::size_t step) const {
  std::ostringstream os;
  os.precision(17);
  os << "{\"step\":" << step << ",\"ce\":" << ce << ",\"mi\":" << mi << ",\"ps\":" << ps << ",\"total\":" << total
     << '}';
  return os.str();
}

Tensor loss_ce(const Tensor& mixture, const std::vector<Tensor>& expert_probs, std::span<const std::size_t> labels,
               double alpha) {
  if (mixture.dim() == 2) {
    for (std::size_t label : labels) {
      if (label >= mixture.size(1)) {
        throw ShapeError("loss_ce: label " + std::to_string(label) + " out of range for " +
                         std::to_string(mixture.size(1)) + " classes");
      }
    }
  }
  Tensor ce = ops::nll(mixture, labels, kProbabilityFloor);
  if (expert_probs.empty()) return ce;
  Tensor experts = ops::nll(expert_probs[0], labels, kProbabilityFloor);
  for (std::size_t i = 1; i < expert_probs.size(); ++i) {
    experts = ops::add(experts, ops::nll(expert_probs[i], labels, kProbabilityFloor));
  }
  return ops::add(ce, ops::scale(experts, alpha));
}

double loss_ce(std::span<const double> mixture, const std::vector<std::vector<double>>& expert_probs,
               std::size_t label, double alpha) {
  const std::size_t m = mixture.size();
  Tensor mix({1, m}, {mixture.begin(), mixture.end()});
  std::vector<Tensor> experts;
  for (const auto& p : expert_probs) {
    if (p.size() != m) throw ShapeError("loss_ce: expert output length differs from mixture");
    experts.emplace_back(Shape{1, m}, p);
  }
  const std::size_t labels[] = {label};
  return loss_ce(mix, experts, labels, alpha).item();
}

namespace {

void check_same_grid(const char* op, const std::vector<Tensor>& maps) {
  if (maps.empty()) throw ShapeError(std::string(op) + ": no heatmaps given");
  for (const Tensor& m : maps) {
    if (m.shape() != maps[0].shape()) {
      throw ShapeError(std::string(op) + ": grid mismatch " + shape_to_string(m.shape()) + " vs " +
                       shape_to_string(maps[0].shape()));
    }
  }
  if (maps[0].dim() != 2 && maps[0].dim() != 3) {
    throw ShapeError(std::string(op) + ": expected (H, W) or (B, H, W), got " + shape_to_string(maps[0].shape()));
  }
}

}  // namespace

Tensor loss_mi(const std::vector<Tensor>& heatmaps) {
  check_same_grid("loss_mi", heatmaps);
  const Shape& shape = heatmaps[0].shape();
  const std::size_t B = shape.size() == 3 ? shape[0] : 1;
  const std::size_t plane = heatmaps[0].numel() / B;
  const std::size_t N = heatmaps.size();
  std::vector<double> mass_sum(heatmaps[0].numel(), 0.0);
  for (const Tensor& h : heatmaps) {
    auto d = h.data();
    for (std::size_t c = 0; c < mass_sum.size(); ++c) mass_sum[c] += d[c];
  }
  std::vector<double> out(B, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    auto d = heatmaps[i].data();
    for (std::size_t b = 0; b < B; ++b) {
      double acc = 0.0;
      for (std::size_t c = b * plane; c < (b + 1) * plane; ++c) {
        if (d[c] > 0.0) acc += d[c] * std::log(d[c] / mass_sum[c]);
      }
      out[b] -= acc;
    }
  }
  return Tensor::from_op({B}, std::move(out), "loss_mi", heatmaps,
                         [heatmaps, mass_sum, plane](const std::vector<double>& g, detail::GradSlots& s) {
                           // d/dh_k(c) = -log(h_k(c) / sum_j h_j(c)); the remaining terms cancel.
                           for (std::size_t i = 0; i < heatmaps.size(); ++i) {
                             if (!s[i]) continue;
                             auto d = heatmaps[i].data();
                             for (std::size_t c = 0; c < d.size(); ++c) {
                               if (d[c] > 0.0) (*s[i])[c] -= g[c / plane] * std::log(d[c] / mass_sum[c]);
                             }
                           }
                         });
}

double loss_mi(const std::vector<Heatmap>& heatmaps) {
  std::vector<Tensor> maps;
  for (const Heatmap& h : heatmaps) maps.emplace_back(Shape{h.height, h.width}, h.grid);
  return loss_mi(maps).item();
}

Tensor center_of_mass(const Tensor& heatmaps) {
  const bool batched = heatmaps.dim() == 3;
  if (!batched && heatmaps.dim() != 2) {
    throw ShapeError("center_of_mass: expected (H, W) or (B, H, W), got " + shape_to_string(heatmaps.shape()));
  }
  const std::size_t B = batched ? heatmaps.size(0) : 1;
  const std::size_t H = heatmaps.size(batched ? 1 : 0), W = heatmaps.size(batched ? 2 : 1);
  auto d = heatmaps.data();
  std::vector<double> out(B * 2), totals(B);
  for (std::size_t b = 0; b < B; ++b) {
    double total = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t a = 0; a < H; ++a)
      for (std::size_t c = 0; c < W; ++c) {
        const double v = d[(b * H + a) * W + c];
        total += v;
        sx += static_cast<double>(a) * v;
        sy += static_cast<double>(c) * v;
      }
    if (!(total > 0.0)) {
      throw NumericError("center_of_mass: heatmap " + std::to_string(b) + " has no positive mass");
    }
    totals[b] = total;
    out[2 * b] = sx / total;
    out[2 * b + 1] = sy / total;
  }
  auto centers = out;
  return Tensor::from_op({B, 2}, std::move(out), "center_of_mass", {heatmaps},
                         [centers = std::move(centers), totals, B, H, W](const std::vector<double>& g,
                                                                         detail::GradSlots& s) {
                           for (std::size_t b = 0; b < B; ++b) {
                             const double gx = g[2 * b] / totals[b], gy = g[2 * b + 1] / totals[b];
                             const double xc = centers[2 * b], yc = centers[2 * b + 1];
                             for (std::size_t a = 0; a < H; ++a)
                               for (std::size_t c = 0; c < W; ++c) {
                                 (*s[0])[(b * H + a) * W + c] +=
                                     gx * (static_cast<double>(a) - xc) + gy * (static_cast<double>(c) - yc);
                               }
                           }
                         });
}

MassCenter center_of_mass(const Heatmap& heatmap) {
  Tensor c = center_of_mass(Tensor({heatmap.height, heatmap.width}, heatmap.grid));
  return {c.at(0), c.at(1), heatmap.expert_index, 0};
}

Tensor loss_ps(const std::vector<Tensor>& centers) {
  if (centers.empty()) throw ShapeError("loss_ps: no experts given");
  for (const Tensor& c : centers) {
    if (c.dim() != 2 || c.size(1) != 2 || c.shape() != centers[0].shape()) {
      throw ShapeError("loss_ps: expected equal (B, 2) center tensors, got " + shape_to_string(c.shape()));
    }
  }
  const std::size_t N = centers.size();
  const std::size_t B = centers[0].size(0);
  if (B < 2) {
    std::clog << "warning: loss_ps needs at least 2 samples per batch; got " << B << ", using 0\n";
    return Tensor::scalar(0.0);
  }
  // dev[i][j][q] = d2_qij - mean_q d2_ij
  std::vector<double> dev(N * N * B, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    auto ci = centers[i].data();
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      auto cj = centers[j].data();
      double* row = dev.data() + (i * N + j) * B;
      double mean = 0.0;
      for (std::size_t q = 0; q < B; ++q) {
        const double dx = ci[2 * q] - cj[2 * q], dy = ci[2 * q + 1] - cj[2 * q + 1];
        row[q] = dx * dx + dy * dy;
        mean += row[q];
      }
      mean /= static_cast<double>(B);
      for (std::size_t q = 0; q < B; ++q) {
        row[q] -= mean;
        total += row[q] * row[q];
      }
    }
  }
  return Tensor::from_op({1}, {total}, "loss_ps", centers,
                         [centers, dev, N, B](const std::vector<double>& g, detail::GradSlots& s) {
                           for (std::size_t i = 0; i < N; ++i) {
                             auto ci = centers[i].data();
                             for (std::size_t j = 0; j < N; ++j) {
                               if (i == j) continue;
                               auto cj = centers[j].data();
                               const double* row = dev.data() + (i * N + j) * B;
                               for (std::size_t q = 0; q < B; ++q) {
                                 // d(loss)/d(d2_q) = 2 * dev_q; the mean's contribution sums to zero.
                                 const double k = g[0] * 2.0 * row[q] * 2.0;
                                 const double dx = ci[2 * q] - cj[2 * q], dy = ci[2 * q + 1] - cj[2 * q + 1];
                                 if (s[i]) {
                                   (*s[i])[2 * q] += k * dx;
                                   (*s[i])[2 * q + 1] += k * dy;
                                 }
                                 if (s[j]) {
                                   (*s[j])[2 * q] -= k * dx;
                                   (*s[j])[2 * q + 1] -= k * dy;
                                 }
                               }
                             }
                           }
                         });
}

double loss_ps(const std::vector<std::vector<MassCenter>>& centers) {
  if (centers.empty()) return 0.0;
  const std::size_t N = centers[0].size();
  std::vector<Tensor> per_expert;
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<double> v;
    for (const auto& sample : centers) {
      if (sample.size() != N) throw ShapeError("loss_ps: every sample needs a center for each expert");
      v.push_back(sample[i].x_c);
      v.push_back(sample[i].y_c);
    }
    per_expert.emplace_back(Shape{centers.size(), 2}, std::move(v));
  }
  return loss_ps(per_expert).item();
}

TotalLoss total_loss(const Tensor& ce, const Tensor& mi, const Tensor& ps, const LossCoefficients& k,
                     std::size_t n_experts) {
  if (k.alpha < 0.0 || k.beta < 0.0 || k.gamma < 0.0) throw ConfigError("total_loss: coefficients must be non-negative");
  if (n_experts < 2) throw ConfigError("total_loss: at least 2 experts required");
  const std::size_t mb = ce.numel();
  const double n = static_cast<double>(n_experts);
  Tensor ce_sum = ops::sum(ce);
  Tensor mi_sum = ops::sum(mi);
  Tensor inner = ce_sum;
  if (k.beta != 0.0) inner = ops::add(inner, ops::scale(mi_sum, k.beta / n));
  if (k.gamma != 0.0) inner = ops::add(inner, ops::scale(ps, k.gamma / (n * (n - 1.0))));
  TotalLoss out;
  out.total = ops::scale(inner, 1.0 / static_cast<double>(mb));
  out.breakdown.ce = ce_sum.item();
  out.breakdown.mi = mi_sum.item();
  out.breakdown.ps = ps.item();
  out.breakdown.total = out.total.item();
  out.breakdown.coefficients = k;
  out.breakdown.mb = mb;
  out.breakdown.n_experts = n_experts;
  return out;
}

double total_loss(double ce_sum, double mi_sum, double ps, const LossCoefficients& k, std::size_t n_experts,
                  std::size_t mb) {
  if (k.alpha < 0.0 || k.beta < 0.0 || k.gamma < 0.0) throw ConfigError("total_loss: coefficients must be non-negative");
  const double n = static_cast<double>(n_experts);
  double inner = ce_sum;
  if (k.beta != 0.0) inner += k.beta / n * mi_sum;
  if (k.gamma != 0.0) inner += k.gamma / (n * (n - 1.0)) * ps;
  return inner * (1.0 / static_cast<double>(mb));
}

}  // namespace immunity
