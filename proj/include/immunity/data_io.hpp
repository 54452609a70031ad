#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "immunity/tensor.hpp"

namespace immunity {

enum class Provenance : std::uint8_t { cifar10 = 0, cifar100 = 1, synthetic = 2 };
std::string to_string(Provenance p);

enum class CifarVariant { cifar10, cifar100 };

struct DatasetMeta {
  std::size_t n_classes = 0;
  std::vector<double> mean;    // per channel
  std::vector<double> stddev;  // per channel, > 0
  std::size_t count = 0;
  Provenance provenance = Provenance::synthetic;
};

struct Sample {
  std::vector<double> image;  // (C, H, W), values in [0, 1]
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t label = 0;
};

/// Immutable-after-load image classification set stored contiguously.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::size_t channels, std::size_t height, std::size_t width, std::size_t n_classes, Provenance provenance);

  void add(std::span<const double> image, std::size_t label);
  /// Recomputes channel means and standard deviations from the pixels.
  void compute_statistics();

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t image_size() const { return channels_ * height_ * width_; }
  const DatasetMeta& meta() const { return meta_; }
  DatasetMeta& meta() { return meta_; }

  std::span<const double> image(std::size_t i) const;
  std::size_t label(std::size_t i) const { return labels_.at(i); }
  const std::vector<std::size_t>& labels() const { return labels_; }
  Sample sample(std::size_t i) const;

  /// (B, C, H, W) pixel tensor for the given indices (no gradient).
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> batch_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  // CIFAR-100 coarse labels, kept so export reproduces the source bytes.
  std::vector<std::uint8_t> coarse_labels;

 private:
  std::size_t channels_ = 0, height_ = 0, width_ = 0;
  std::vector<double> pixels_;
  std::vector<std::size_t> labels_;
  DatasetMeta meta_;
};

/// CIFAR binary records: [label byte(s)] + 3072 pixel bytes (R, G, B planes).
Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant);
Dataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant);
/// Inverse of parse_cifar_binary; pixels are rounded back to bytes.
std::vector<std::uint8_t> export_cifar_binary(const Dataset& data, CifarVariant variant);

/// Names of the geometric templates, indexed by class.
const std::vector<std::string>& shape_template_names();

/// Balanced synthetic shape dataset: classes in 2..8, size >= 12, 3 channels.
Dataset synth_shapes(std::size_t n, std::size_t classes, std::size_t size, std::uint64_t seed);

struct AugmentParams {
  int shift_y = 0;       // crop offset relative to the centered crop, in [-2, 2]
  int shift_x = 0;
  double angle_deg = 0;  // rotation, in [-15, 15]
};

/// Random crop from a 2-pixel reflect-padded image, then rotation with
/// bilinear resampling and edge padding; output clamped to [0, 1].
Sample augment(const Sample& sample, std::mt19937_64& rng);
Sample augment_with(const Sample& sample, const AugmentParams& params);

/// (x - mean_c) / std_c per channel of a (B, C, H, W) tensor, and its inverse.
Tensor normalize(const Tensor& batch, const DatasetMeta& meta);
Tensor denormalize(const Tensor& batch, const DatasetMeta& meta);

/// Container: "IMDS", version byte, meta block, then (i32 label, f64 pixels) records.
std::vector<std::uint8_t> serialize_dataset(const Dataset& data);
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Indices 0..n-1 shuffled by rng.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng);

}  // namespace immunity
