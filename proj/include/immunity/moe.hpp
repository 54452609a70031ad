#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "immunity/layers.hpp"
#include "immunity/tensor.hpp"

namespace immunity {

using Rng = std::mt19937_64;

/// Random Switch Gate behaviour: how gate logits are permuted before the softmax.
class RsgMode {
 public:
  enum class Kind : std::uint8_t { identity, fresh_permutation, fixed_permutation };

  static RsgMode identity() { return RsgMode(Kind::identity, {}); }
  static RsgMode fresh() { return RsgMode(Kind::fresh_permutation, {}); }
  /// `perm` is 0-based: output slot k takes input slot perm[k]. Throws ConfigError
  /// unless perm is a bijection on {0..n-1}.
  static RsgMode fixed(std::vector<std::size_t> perm);

  Kind kind() const { return kind_; }
  const std::vector<std::size_t>& permutation() const { return perm_; }

  /// The permutation to apply to a length-n gate vector for one forward call.
  std::vector<std::size_t> draw(std::size_t n, Rng& rng) const;

 private:
  RsgMode(Kind kind, std::vector<std::size_t> perm) : kind_(kind), perm_(std::move(perm)) {}
  Kind kind_;
  std::vector<std::size_t> perm_;
};

/// Value-level gate permutation: out[k] = logits[perm[k]].
std::vector<double> rsg_permute(std::span<const double> gate_logits, const RsgMode& rsg, Rng& rng);

/// Anything attacks and evaluation can differentiate through.
class Classifier {
 public:
  virtual ~Classifier() = default;
  /// Class probabilities (B, M) for pixel-space input x (B, C, H, W).
  virtual Tensor probabilities(const Tensor& x, const RsgMode& rsg, Rng& rng) const = 0;
  virtual std::size_t n_classes() const = 0;
  /// (C, H, W)
  virtual Shape input_shape() const = 0;
};

/// Channel statistics applied inside the model so callers work in pixel space.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

class ExpertNetwork {
 public:
  struct Output {
    Tensor logits;
    Tensor cam_activation;
  };

  /// Builds layers from specs and resolves the Grad-CAM layer: the deepest
  /// conv layer whose output is at least cam_min x cam_min.
  static ExpertNetwork create(const std::vector<LayerSpec>& specs, const Shape& input_chw, std::size_t n_classes,
                              std::size_t cam_min, Rng& rng);
  /// Wraps existing layers (parameters already set).
  static ExpertNetwork from_layers(std::vector<Layer> layers, const Shape& input_chw, std::size_t n_classes,
                                   std::size_t cam_min);

  /// `x` is the normalized (B, C, H, W) input.
  Output forward(const Tensor& x) const;

  std::vector<Tensor> parameters() const;
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<LayerSpec> specs() const;
  std::size_t cam_layer_index() const { return cam_layer_; }

 private:
  std::vector<Layer> layers_;
  std::size_t cam_layer_ = 0;
};

/// Three conv blocks (conv, relu, 2x2 max-pool) and a linear head.
std::vector<LayerSpec> default_expert_specs(std::size_t channels, std::size_t height, std::size_t width,
                                            std::size_t n_classes, std::span<const std::size_t> widths);

/// Spatial minimum for the CAM layer: 8x8 at 32x32 input, scaled linearly.
std::size_t cam_minimum(std::size_t height, std::size_t width);

struct ModelConfig {
  std::size_t n_experts = 5;
  std::size_t n_classes = 4;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<std::size_t> widths{8, 16, 16};
  std::uint64_t seed = 0;
  Normalization normalization;  // identity when empty
};

/// Gate mapping global-average-pooled raw pixels to N logits.
struct GateNetwork {
  Tensor weight;  // (N, C)
  Tensor bias;    // (N)
  Tensor logits(const Tensor& x) const;
};

struct ForwardRecord {
  Tensor mixture;                         // (B, M)
  std::vector<Tensor> expert_probs;       // N x (B, M)
  std::vector<Tensor> expert_logits;      // N x (B, M)
  std::vector<Tensor> cam_activations;    // N x (B, K, h, w)
  Tensor gate_weights;                    // (B, N), after permutation and softmax
  std::vector<std::size_t> permutation;   // applied to gate logits
};

class MoEModel : public Classifier {
 public:
  static MoEModel create(const ModelConfig& config);
  /// Assembles a model from parts; validates N >= 2 and shape agreement.
  MoEModel(std::vector<ExpertNetwork> experts, GateNetwork gate, std::size_t n_classes, Shape input_chw,
           Normalization normalization, std::uint64_t rng_seed);

  ForwardRecord forward(const Tensor& x, const RsgMode& rsg, Rng& rng) const;
  Tensor probabilities(const Tensor& x, const RsgMode& rsg, Rng& rng) const override;
  std::size_t n_classes() const override { return n_classes_; }
  Shape input_shape() const override { return input_chw_; }

  std::size_t n_experts() const { return experts_.size(); }
  const std::vector<ExpertNetwork>& experts() const { return experts_; }
  const GateNetwork& gate() const { return gate_; }
  const Normalization& normalization() const { return normalization_; }
  std::uint64_t rng_seed() const { return rng_seed_; }

  /// All trainable tensors in serialization order: experts, then gate.
  std::vector<Tensor> parameters() const;

  Tensor normalize(const Tensor& x) const;

 private:
  std::vector<ExpertNetwork> experts_;
  GateNetwork gate_;
  std::size_t n_classes_;
  Shape input_chw_;
  Normalization normalization_;
  std::uint64_t rng_seed_;
};

/// A lone expert network; the single-model baseline.
class SingleExpertModel : public Classifier {
 public:
  static SingleExpertModel create(const ModelConfig& config);
  SingleExpertModel(ExpertNetwork expert, std::size_t n_classes, Shape input_chw, Normalization normalization);

  Tensor logits(const Tensor& x) const;
  Tensor probabilities(const Tensor& x, const RsgMode& rsg, Rng& rng) const override;
  std::size_t n_classes() const override { return n_classes_; }
  Shape input_shape() const override { return input_chw_; }
  std::vector<Tensor> parameters() const { return expert_.parameters(); }
  const ExpertNetwork& expert() const { return expert_; }

 private:
  ExpertNetwork expert_;
  std::size_t n_classes_;
  Shape input_chw_;
  Normalization normalization_;
};

/// Model container: "IMMU", version byte, manifest, little-endian f64 parameters.
std::vector<std::uint8_t> serialize_model(const MoEModel& model);
MoEModel deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const MoEModel& model, const std::filesystem::path& path);
MoEModel load_model(const std::filesystem::path& path);

/// FNV-1a over the raw bits of every parameter; used to prove parameters are untouched.
std::uint64_t parameter_hash(std::span<const Tensor> params);

}  // namespace immunity
