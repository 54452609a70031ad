#include "immunity/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "immunity/error.hpp"
#include "immunity/ops.hpp"

namespace immunity {

std::vector<double> channel_weights(std::span<const double> grad, const Shape& grad_shape) {
  if (grad_shape.size() != 4) throw ShapeError("channel_weights: expected (B, K, h, w), got " + shape_to_string(grad_shape));
  const std::size_t plane = grad_shape[2] * grad_shape[3];
  if (plane == 0) throw ShapeError("channel_weights: empty spatial extent in " + shape_to_string(grad_shape));
  if (grad.size() != shape_numel(grad_shape)) throw ShapeError("channel_weights: gradient size does not match shape");
  const std::size_t bk = grad_shape[0] * grad_shape[1];
  std::vector<double> alpha(bk);
  for (std::size_t i = 0; i < bk; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += grad[i * plane + j];
    alpha[i] = acc / static_cast<double>(plane);
  }
  return alpha;
}

Tensor gradcam(const Tensor& activations, std::span<const double> weights) {
  if (activations.dim() != 4) {
    throw ShapeError("gradcam: expected (B, K, h, w) activations, got " + shape_to_string(activations.shape()));
  }
  const std::size_t B = activations.size(0), K = activations.size(1);
  const std::size_t plane = activations.size(2) * activations.size(3);
  if (weights.size() != B * K) {
    throw ShapeError("gradcam: " + std::to_string(weights.size()) + " channel weights for " + std::to_string(K) +
                     " channels x " + std::to_string(B) + " samples");
  }
  std::vector<double> alpha(weights.begin(), weights.end());
  auto a = activations.data();
  std::vector<double> out(B * plane, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      const double w = alpha[b * K + k];
      const double* src = a.data() + (b * K + k) * plane;
      double* dst = out.data() + b * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += w * src[i];
    }
  Tensor weighted = Tensor::from_op({B, activations.size(2), activations.size(3)}, std::move(out),
                                    "weighted_channel_sum", {activations},
                                    [alpha, B, K, plane](const std::vector<double>& g, detail::GradSlots& s) {
                                      for (std::size_t b = 0; b < B; ++b)
                                        for (std::size_t k = 0; k < K; ++k) {
                                          const double w = alpha[b * K + k];
                                          double* dst = s[0]->data() + (b * K + k) * plane;
                                          const double* go = g.data() + b * plane;
                                          for (std::size_t i = 0; i < plane; ++i) dst[i] += w * go[i];
                                        }
                                    });
  return ops::relu(weighted);
}

Tensor to_input_heatmap(const Tensor& raw, std::size_t height, std::size_t width, double floor) {
  Tensor resized = ops::bilinear_resize(raw, height, width);
  const bool batched = resized.dim() == 3;
  const std::size_t B = batched ? resized.size(0) : 1;
  const std::size_t plane = height * width;
  auto r = resized.data();
  std::vector<double> out(r.size());
  std::vector<double> totals(B);
  for (std::size_t b = 0; b < B; ++b) {
    double total = 0.0;
    for (std::size_t i = 0; i < plane; ++i) total += r[b * plane + i] + floor;
    totals[b] = total;
    for (std::size_t i = 0; i < plane; ++i) out[b * plane + i] = (r[b * plane + i] + floor) / total;
  }
  auto normalized = out;
  return Tensor::from_op(resized.shape(), std::move(out), "normalize_mass", {resized},
                         [normalized = std::move(normalized), totals, B, plane](const std::vector<double>& g,
                                                                                detail::GradSlots& s) {
                           // h = v / sum(v): dh_i/dv_j = (delta_ij - h_i) / total
                           for (std::size_t b = 0; b < B; ++b) {
                             const double* h = normalized.data() + b * plane;
                             const double* go = g.data() + b * plane;
                             double dot = 0.0;
                             for (std::size_t i = 0; i < plane; ++i) dot += go[i] * h[i];
                             double* gi = s[0]->data() + b * plane;
                             for (std::size_t i = 0; i < plane; ++i) gi[i] += (go[i] - dot) / totals[b];
                           }
                         });
}

std::vector<Tensor> expert_heatmaps(const ForwardRecord& record, std::span<const std::size_t> labels,
                                    std::size_t height, std::size_t width, bool differentiable, double floor) {
  std::vector<Tensor> maps;
  maps.reserve(record.expert_logits.size());
  for (std::size_t i = 0; i < record.expert_logits.size(); ++i) {
    const Tensor& act = record.cam_activations[i];
    std::vector<double> alpha;
    if (record.expert_logits[i].requires_grad()) {
      Tensor target = ops::sum(ops::select_columns(record.expert_logits[i], labels));
      auto grads = gradients(target, {act});
      alpha = channel_weights(grads[0], act.shape());
    } else {
      alpha.assign(act.size(0) * act.size(1), 0.0);
    }
    Tensor source = differentiable ? act : act.detach();
    Tensor h = to_input_heatmap(gradcam(source, alpha), height, width, floor);
    maps.push_back(differentiable ? h : h.detach());
  }
  return maps;
}

Heatmap heatmap_at(const Tensor& maps, std::size_t sample, std::size_t expert_index, bool normalized) {
  if (maps.dim() != 3 || sample >= maps.size(0)) {
    throw ShapeError("heatmap_at: sample " + std::to_string(sample) + " not in " + shape_to_string(maps.shape()));
  }
  Heatmap h;
  h.height = maps.size(1);
  h.width = maps.size(2);
  const std::size_t plane = h.height * h.width;
  auto d = maps.data();
  h.grid.assign(d.begin() + static_cast<long>(sample * plane), d.begin() + static_cast<long>((sample + 1) * plane));
  h.normalized = normalized;
  h.expert_index = expert_index;
  return h;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> grid, std::size_t height,
               std::size_t width) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const double peak = grid.empty() ? 0.0 : *std::max_element(grid.begin(), grid.end());
  out << "P2\n" << width << ' ' << height << "\n255\n";
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double v = peak > 0.0 ? grid[r * width + c] / peak : 0.0;
      const int level = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      out << (c ? " " : "") << level;
    }
    out << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const Heatmap& map) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) out << (c ? "," : "") << map.at(r, c);
    out << '\n';
  }
}

}  // namespace immunity
