#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "immunity/tensor.hpp"

namespace immunity {

enum class LayerKind : std::uint8_t { conv2d = 0, relu = 1, maxpool2d = 2, avgpool2d = 3, flatten = 4, linear = 5, softmax = 6 };

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv2d: channels; linear: features
  std::size_t in_units = 0;
  std::size_t out_units = 0;
  // conv2d and pooling
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static LayerSpec conv(std::size_t in_c, std::size_t out_c, std::size_t kernel, std::size_t stride = 1,
                        std::size_t padding = 0);
  static LayerSpec dense(std::size_t in_features, std::size_t out_features);
  static LayerSpec max_pool(std::size_t kernel, std::size_t stride);
  static LayerSpec avg_pool(std::size_t kernel, std::size_t stride);
  static LayerSpec simple(LayerKind kind);

  bool has_parameters() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }
  /// Shapes of (weight, bias); empty for parameter-free layers.
  std::vector<Shape> parameter_shapes() const;
  /// Output shape for a given input shape (batch axis included). Throws ShapeError.
  Shape output_shape(const Shape& input) const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Applies one layer. `params` holds (weight, bias) for conv2d and linear.
Tensor forward_op(const LayerSpec& spec, const Tensor& input, std::span<const Tensor> params);

/// A layer with owned, trainable parameters.
struct Layer {
  LayerSpec spec;
  std::vector<Tensor> params;  // weight, bias (leaves with requires_grad)

  static Layer make(const LayerSpec& spec, std::mt19937_64& rng);
  Tensor forward(const Tensor& input) const { return forward_op(spec, input, params); }
};

}  // namespace immunity
