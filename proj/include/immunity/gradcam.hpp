#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "immunity/moe.hpp"
#include "immunity/tensor.hpp"

namespace immunity {

/// Floor added to every heatmap cell before normalization.
inline constexpr double kHeatmapFloor = 1e-8;

struct Heatmap {
  std::vector<double> grid;  // row-major
  std::size_t height = 0;
  std::size_t width = 0;
  bool normalized = false;
  std::size_t expert_index = 0;

  double at(std::size_t row, std::size_t col) const { return grid[row * width + col]; }
};

/// Grad-CAM channel weights: spatial mean of d(label logit)/dA for each
/// (sample, channel). `grad_shape` is (B, K, h, w); returns B*K values.
std::vector<double> channel_weights(std::span<const double> grad, const Shape& grad_shape);

/// ReLU of the channel-weighted sum of activations (B, K, h, w) -> (B, h, w).
/// The weights are constants; gradients reach the activations only.
Tensor gradcam(const Tensor& activations, std::span<const double> weights);

/// Bilinear resize to the input resolution, add `floor` to every cell, and
/// divide each sample's grid by its total. (B, h, w) -> (B, H, W).
Tensor to_input_heatmap(const Tensor& raw, std::size_t height, std::size_t width, double floor = kHeatmapFloor);

/// Normalized per-expert heatmaps (B, H, W) for a recorded forward pass,
/// targeting each expert's logit of `labels`. With `differentiable` false the
/// results are detached from the graph.
std::vector<Tensor> expert_heatmaps(const ForwardRecord& record, std::span<const std::size_t> labels,
                                    std::size_t height, std::size_t width, bool differentiable,
                                    double floor = kHeatmapFloor);

/// Extracts one sample's grid from a (B, h, w) tensor.
Heatmap heatmap_at(const Tensor& maps, std::size_t sample, std::size_t expert_index, bool normalized);

/// Plain PGM ("P2") with values scaled to 0-255 by the grid maximum.
void write_pgm(const std::filesystem::path& path, std::span<const double> grid, std::size_t height,
               std::size_t width);
/// Row-major CSV of raw values, one grid row per line.
void write_csv(const std::filesystem::path& path, const Heatmap& map);

}  // namespace immunity
