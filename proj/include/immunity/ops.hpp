#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "immunity/tensor.hpp"

// Differentiable primitives. Every op records a graph node when any input
// requires grad. Spatial ops take (batch, channel, height, width) tensors.
namespace immunity::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);

/// Row-wise softmax over the last axis of a 2-D tensor.
Tensor softmax(const Tensor& logits);

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor maxpool2d(const Tensor& input, std::size_t kernel, std::size_t stride);
Tensor avgpool2d(const Tensor& input, std::size_t kernel, std::size_t stride);
/// (B, C, H, W) -> (B, C)
Tensor global_avg_pool(const Tensor& input);
/// (B, ...) -> (B, prod(...))
Tensor flatten(const Tensor& input);
/// input (B, in), weight (out, in), bias (out) -> (B, out)
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Per-channel (x - mean[c]) / std[c] on a (B, C, H, W) tensor.
Tensor channel_normalize(const Tensor& input, std::span<const double> mean, std::span<const double> stddev);

/// Align-corners bilinear resize of a (h, w) grid or a (B, h, w) stack.
Tensor bilinear_resize(const Tensor& grid, std::size_t target_h, std::size_t target_w);

/// Picks x[b, index[b]] from a (B, M) tensor.
Tensor select_columns(const Tensor& x, std::span<const std::size_t> index);

/// out[b, k] = x[b, perm[k]] for a (B, N) tensor.
Tensor permute_columns(const Tensor& x, std::span<const std::size_t> perm);

/// Sum over experts of weights[b, i] * probs[i][b, m].
Tensor mixture(const Tensor& weights, const std::vector<Tensor>& probs);

/// -log(max(p[b, label[b]], floor)) for each row of a (B, M) tensor.
Tensor nll(const Tensor& probs, std::span<const std::size_t> labels, double floor);

}  // namespace immunity::ops
