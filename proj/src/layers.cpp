#include "immunity/layers.hpp"

#include <cmath>

#include "immunity/error.hpp"
#include "immunity/ops.hpp"

namespace immunity {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv(std::size_t in_c, std::size_t out_c, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  return {LayerKind::conv2d, in_c, out_c, kernel, stride, padding};
}

LayerSpec LayerSpec::dense(std::size_t in_features, std::size_t out_features) {
  return {LayerKind::linear, in_features, out_features, 0, 1, 0};
}

LayerSpec LayerSpec::max_pool(std::size_t kernel, std::size_t stride) {
  return {LayerKind::maxpool2d, 0, 0, kernel, stride, 0};
}

LayerSpec LayerSpec::avg_pool(std::size_t kernel, std::size_t stride) {
  return {LayerKind::avgpool2d, 0, 0, kernel, stride, 0};
}

LayerSpec LayerSpec::simple(LayerKind kind) { return {kind, 0, 0, 0, 1, 0}; }

std::vector<Shape> LayerSpec::parameter_shapes() const {
  switch (kind) {
    case LayerKind::conv2d: return {{out_units, in_units, kernel, kernel}, {out_units}};
    case LayerKind::linear: return {{out_units, in_units}, {out_units}};
    default: return {};
  }
}

namespace {

std::size_t spatial_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                        const LayerSpec& spec, const Shape& input) {
  if (kernel == 0 || stride == 0 || in + 2 * padding < kernel) {
    throw ShapeError(to_string(spec.kind) + ": kernel " + std::to_string(kernel) + " stride " +
                     std::to_string(stride) + " padding " + std::to_string(padding) +
                     " does not fit input " + shape_to_string(input));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace

Shape LayerSpec::output_shape(const Shape& input) const {
  auto need_dims = [&](std::size_t d) {
    if (input.size() != d) {
      throw ShapeError(to_string(kind) + ": expected " + std::to_string(d) + "-D input, got " +
                       shape_to_string(input));
    }
  };
  switch (kind) {
    case LayerKind::conv2d:
      need_dims(4);
      if (input[1] != in_units) {
        throw ShapeError("conv2d: expects " + std::to_string(in_units) + " channels, got input " +
                         shape_to_string(input));
      }
      return {input[0], out_units, spatial_out(input[2], kernel, stride, padding, *this, input),
              spatial_out(input[3], kernel, stride, padding, *this, input)};
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d:
      need_dims(4);
      return {input[0], input[1], spatial_out(input[2], kernel, stride, 0, *this, input),
              spatial_out(input[3], kernel, stride, 0, *this, input)};
    case LayerKind::flatten: {
      if (input.size() < 2) throw ShapeError("flatten: expected batched input, got " + shape_to_string(input));
      return {input[0], shape_numel(input) / input[0]};
    }
    case LayerKind::linear:
      need_dims(2);
      if (input[1] != in_units) {
        throw ShapeError("linear: expects " + std::to_string(in_units) + " features, got input " +
                         shape_to_string(input));
      }
      return {input[0], out_units};
    case LayerKind::softmax:
      need_dims(2);
      return input;
    case LayerKind::relu:
      return input;
  }
  return input;
}

Tensor forward_op(const LayerSpec& spec, const Tensor& input, std::span<const Tensor> params) {
  const std::size_t expected = spec.has_parameters() ? 2 : 0;
  if (params.size() != expected) {
    throw ShapeError(to_string(spec.kind) + ": expected " + std::to_string(expected) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  // Validates shapes and produces the op-named error before dispatch.
  (void)spec.output_shape(input.shape());
  switch (spec.kind) {
    case LayerKind::conv2d: return ops::conv2d(input, params[0], params[1], spec.stride, spec.padding);
    case LayerKind::relu: return ops::relu(input);
    case LayerKind::maxpool2d: return ops::maxpool2d(input, spec.kernel, spec.stride);
    case LayerKind::avgpool2d: return ops::avgpool2d(input, spec.kernel, spec.stride);
    case LayerKind::flatten: return ops::flatten(input);
    case LayerKind::linear: return ops::linear(input, params[0], params[1]);
    case LayerKind::softmax: return ops::softmax(input);
  }
  throw ShapeError("forward_op: unknown layer kind");
}

Layer Layer::make(const LayerSpec& spec, std::mt19937_64& rng) {
  Layer layer{spec, {}};
  auto shapes = spec.parameter_shapes();
  if (shapes.empty()) return layer;
  const std::size_t fan_in = shape_numel(shapes[0]) / shapes[0][0];
  // He initialisation for the ReLU stacks used here.
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> w(shape_numel(shapes[0]));
  for (double& v : w) v = dist(rng);
  layer.params.emplace_back(shapes[0], std::move(w), true);
  layer.params.emplace_back(Tensor::zeros(shapes[1], true));
  return layer;
}

}  // namespace immunity
