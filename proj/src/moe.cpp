#include "immunity/moe.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <string>

#include "immunity/binary_io.hpp"
#include "immunity/error.hpp"
#include "immunity/ops.hpp"

namespace immunity {

RsgMode RsgMode::fixed(std::vector<std::size_t> perm) {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) {
      throw ConfigError("rsg: invalid permutation (not a bijection on 0.." + std::to_string(perm.size()) + ")");
    }
    seen[p] = true;
  }
  return RsgMode(Kind::fixed_permutation, std::move(perm));
}

std::vector<std::size_t> RsgMode::draw(std::size_t n, Rng& rng) const {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  switch (kind_) {
    case Kind::identity: break;
    case Kind::fresh_permutation: std::shuffle(perm.begin(), perm.end(), rng); break;
    case Kind::fixed_permutation:
      if (perm_.size() != n) {
        throw ConfigError("rsg: fixed permutation of length " + std::to_string(perm_.size()) + " applied to " +
                          std::to_string(n) + " gate outputs");
      }
      perm = perm_;
      break;
  }
  return perm;
}

std::vector<double> rsg_permute(std::span<const double> gate_logits, const RsgMode& rsg, Rng& rng) {
  auto perm = rsg.draw(gate_logits.size(), rng);
  std::vector<double> out(gate_logits.size());
  for (std::size_t k = 0; k < perm.size(); ++k) out[k] = gate_logits[perm[k]];
  return out;
}

std::size_t cam_minimum(std::size_t height, std::size_t width) {
  return std::max<std::size_t>(1, std::min(height, width) / 4);
}

std::vector<LayerSpec> default_expert_specs(std::size_t channels, std::size_t height, std::size_t width,
                                            std::size_t n_classes, std::span<const std::size_t> widths) {
  std::vector<LayerSpec> specs;
  std::size_t in_c = channels, h = height, w = width;
  for (std::size_t out_c : widths) {
    specs.push_back(LayerSpec::conv(in_c, out_c, 3, 1, 1));
    specs.push_back(LayerSpec::simple(LayerKind::relu));
    specs.push_back(LayerSpec::max_pool(2, 2));
    in_c = out_c;
    h /= 2;
    w /= 2;
  }
  if (h == 0 || w == 0) {
    throw ConfigError("expert: input " + std::to_string(height) + "x" + std::to_string(width) + " too small for " +
                      std::to_string(widths.size()) + " pooling blocks");
  }
  specs.push_back(LayerSpec::simple(LayerKind::flatten));
  specs.push_back(LayerSpec::dense(in_c * h * w, n_classes));
  return specs;
}

ExpertNetwork ExpertNetwork::create(const std::vector<LayerSpec>& specs, const Shape& input_chw,
                                    std::size_t n_classes, std::size_t cam_min, Rng& rng) {
  std::vector<Layer> layers;
  layers.reserve(specs.size());
  for (const LayerSpec& s : specs) layers.push_back(Layer::make(s, rng));
  return from_layers(std::move(layers), input_chw, n_classes, cam_min);
}

ExpertNetwork ExpertNetwork::from_layers(std::vector<Layer> layers, const Shape& input_chw, std::size_t n_classes,
                                         std::size_t cam_min) {
  if (input_chw.size() != 3) throw ShapeError("expert: input shape must be (C, H, W)");
  Shape shape{1, input_chw[0], input_chw[1], input_chw[2]};
  ExpertNetwork net;
  bool found = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    auto expected = l.spec.parameter_shapes();
    if (l.params.size() != expected.size()) throw ShapeError("expert: layer " + std::to_string(i) + " parameter count");
    for (std::size_t p = 0; p < expected.size(); ++p) {
      if (l.params[p].shape() != expected[p]) {
        throw ShapeError("expert: layer " + std::to_string(i) + " parameter shape " +
                         shape_to_string(l.params[p].shape()) + " vs " + shape_to_string(expected[p]));
      }
    }
    shape = l.spec.output_shape(shape);
    if (l.spec.kind == LayerKind::conv2d && shape[2] >= cam_min && shape[3] >= cam_min) {
      net.cam_layer_ = i;
      found = true;
    }
  }
  if (shape != Shape{1, n_classes}) {
    throw ShapeError("expert: final output " + shape_to_string(shape) + " does not emit " + std::to_string(n_classes) +
                     " logits");
  }
  if (!found) {
    throw ShapeError("expert: no conv layer with output at least " + std::to_string(cam_min) + "x" +
                     std::to_string(cam_min) + " for Grad-CAM");
  }
  net.layers_ = std::move(layers);
  return net;
}

ExpertNetwork::Output ExpertNetwork::forward(const Tensor& x) const {
  // The CAM activation is the conv block output, taken after its ReLU when one follows.
  std::size_t capture = cam_layer_;
  if (capture + 1 < layers_.size() && layers_[capture + 1].spec.kind == LayerKind::relu) ++capture;
  Output out;
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i == capture) out.cam_activation = h;
  }
  out.logits = h;
  return out;
}

std::vector<Tensor> ExpertNetwork::parameters() const {
  std::vector<Tensor> params;
  for (const Layer& l : layers_) params.insert(params.end(), l.params.begin(), l.params.end());
  return params;
}

std::vector<LayerSpec> ExpertNetwork::specs() const {
  std::vector<LayerSpec> s;
  for (const Layer& l : layers_) s.push_back(l.spec);
  return s;
}

Tensor GateNetwork::logits(const Tensor& x) const { return ops::linear(ops::global_avg_pool(x), weight, bias); }

namespace {

Normalization resolve_normalization(Normalization n, std::size_t channels) {
  if (n.mean.empty() && n.stddev.empty()) {
    n.mean.assign(channels, 0.0);
    n.stddev.assign(channels, 1.0);
  }
  if (n.mean.size() != channels || n.stddev.size() != channels) {
    throw ConfigError("normalization: expected " + std::to_string(channels) + " channel statistics");
  }
  for (double s : n.stddev) {
    if (!(s > 0.0)) throw ConfigError("normalization: standard deviations must be positive");
  }
  return n;
}

void check_input(const Tensor& x, const Shape& chw) {
  if (x.dim() != 4 || x.size(1) != chw[0] || x.size(2) != chw[1] || x.size(3) != chw[2]) {
    throw ShapeError("model: input " + shape_to_string(x.shape()) + " does not match (B," +
                     shape_to_string(chw).substr(1));
  }
}

}  // namespace

MoEModel MoEModel::create(const ModelConfig& config) {
  if (config.n_experts < 2) throw ConfigError("moe: at least 2 experts required, got " + std::to_string(config.n_experts));
  Rng rng(config.seed);
  const Shape chw{config.channels, config.height, config.width};
  auto specs = default_expert_specs(config.channels, config.height, config.width, config.n_classes, config.widths);
  const std::size_t cam_min = cam_minimum(config.height, config.width);
  std::vector<ExpertNetwork> experts;
  for (std::size_t i = 0; i < config.n_experts; ++i) {
    experts.push_back(ExpertNetwork::create(specs, chw, config.n_classes, cam_min, rng));
  }
  GateNetwork gate{Tensor::zeros({config.n_experts, config.channels}, true), Tensor::zeros({config.n_experts}, true)};
  return MoEModel(std::move(experts), std::move(gate), config.n_classes, chw, config.normalization, config.seed);
}

MoEModel::MoEModel(std::vector<ExpertNetwork> experts, GateNetwork gate, std::size_t n_classes, Shape input_chw,
                   Normalization normalization, std::uint64_t rng_seed)
    : experts_(std::move(experts)),
      gate_(std::move(gate)),
      n_classes_(n_classes),
      input_chw_(std::move(input_chw)),
      normalization_(resolve_normalization(std::move(normalization), input_chw_.at(0))),
      rng_seed_(rng_seed) {
  if (experts_.size() < 2) throw ConfigError("moe: at least 2 experts required, got " + std::to_string(experts_.size()));
  const Shape gate_w{experts_.size(), input_chw_[0]};
  if (gate_.weight.shape() != gate_w || gate_.bias.shape() != Shape{experts_.size()}) {
    throw ShapeError("moe: gate parameters " + shape_to_string(gate_.weight.shape()) + " do not map " +
                     std::to_string(input_chw_[0]) + " channels to " + std::to_string(experts_.size()) + " experts");
  }
}

Tensor MoEModel::normalize(const Tensor& x) const {
  return ops::channel_normalize(x, normalization_.mean, normalization_.stddev);
}

ForwardRecord MoEModel::forward(const Tensor& x, const RsgMode& rsg, Rng& rng) const {
  check_input(x, input_chw_);
  ForwardRecord rec;
  Tensor z = normalize(x);
  for (const ExpertNetwork& e : experts_) {
    auto out = e.forward(z);
    rec.expert_probs.push_back(ops::softmax(out.logits));
    rec.expert_logits.push_back(std::move(out.logits));
    rec.cam_activations.push_back(std::move(out.cam_activation));
  }
  rec.permutation = rsg.draw(experts_.size(), rng);
  rec.gate_weights = ops::softmax(ops::permute_columns(gate_.logits(x), rec.permutation));
  rec.mixture = ops::mixture(rec.gate_weights, rec.expert_probs);
  return rec;
}

Tensor MoEModel::probabilities(const Tensor& x, const RsgMode& rsg, Rng& rng) const {
  return forward(x, rsg, rng).mixture;
}

std::vector<Tensor> MoEModel::parameters() const {
  std::vector<Tensor> params;
  for (const ExpertNetwork& e : experts_) {
    auto p = e.parameters();
    params.insert(params.end(), p.begin(), p.end());
  }
  params.push_back(gate_.weight);
  params.push_back(gate_.bias);
  return params;
}

SingleExpertModel SingleExpertModel::create(const ModelConfig& config) {
  Rng rng(config.seed);
  const Shape chw{config.channels, config.height, config.width};
  auto specs = default_expert_specs(config.channels, config.height, config.width, config.n_classes, config.widths);
  auto expert = ExpertNetwork::create(specs, chw, config.n_classes, cam_minimum(config.height, config.width), rng);
  return SingleExpertModel(std::move(expert), config.n_classes, chw, config.normalization);
}

SingleExpertModel::SingleExpertModel(ExpertNetwork expert, std::size_t n_classes, Shape input_chw,
                                     Normalization normalization)
    : expert_(std::move(expert)),
      n_classes_(n_classes),
      input_chw_(std::move(input_chw)),
      normalization_(resolve_normalization(std::move(normalization), input_chw_.at(0))) {}

Tensor SingleExpertModel::logits(const Tensor& x) const {
  check_input(x, input_chw_);
  return expert_.forward(ops::channel_normalize(x, normalization_.mean, normalization_.stddev)).logits;
}

Tensor SingleExpertModel::probabilities(const Tensor& x, const RsgMode&, Rng&) const {
  return ops::softmax(logits(x));
}

// ---- serialization ---------------------------------------------------------

namespace {

constexpr char kModelMagic[] = "IMMU";
constexpr std::uint8_t kModelVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize_model(const MoEModel& model) {
  binary::Writer w;
  w.bytes(std::string_view(kModelMagic, 4));
  w.u8(kModelVersion);
  const auto& chw = model.input_shape();
  w.u32(static_cast<std::uint32_t>(model.n_experts()));
  w.u32(static_cast<std::uint32_t>(model.n_classes()));
  for (std::size_t d : chw) w.u32(static_cast<std::uint32_t>(d));
  w.u64(model.rng_seed());
  const auto specs = model.experts().front().specs();
  w.u32(static_cast<std::uint32_t>(specs.size()));
  for (const LayerSpec& s : specs) {
    w.u8(static_cast<std::uint8_t>(s.kind));
    w.u32(static_cast<std::uint32_t>(s.in_units));
    w.u32(static_cast<std::uint32_t>(s.out_units));
    w.u32(static_cast<std::uint32_t>(s.kernel));
    w.u32(static_cast<std::uint32_t>(s.stride));
    w.u32(static_cast<std::uint32_t>(s.padding));
  }
  for (double m : model.normalization().mean) w.f64(m);
  for (double s : model.normalization().stddev) w.f64(s);
  const auto params = model.parameters();
  std::uint64_t count = 0;
  for (const Tensor& p : params) count += p.numel();
  w.u64(count);
  for (const Tensor& p : params)
    for (double v : p.data()) w.f64(v);
  return w.take();
}

MoEModel deserialize_model(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "model");
  if (bytes.size() < 4 || r.bytes(4) != std::string_view(kModelMagic, 4)) {
    throw FormatError("model: bad magic at byte 0, expected \"IMMU\"");
  }
  const std::uint8_t version = r.u8();
  if (version != kModelVersion) {
    throw FormatError("model: unsupported format version " + std::to_string(version) + " at byte 4");
  }
  const std::size_t n = r.u32();
  const std::size_t m = r.u32();
  Shape chw{r.u32(), r.u32(), r.u32()};
  const std::uint64_t seed = r.u64();
  if (n < 2) r.fail("expert count " + std::to_string(n) + " below 2");
  if (chw[0] == 0 || chw[1] == 0 || chw[2] == 0 || m == 0) r.fail("zero-sized manifest dimension");
  const std::size_t n_layers = r.u32();
  // Each layer record is 21 bytes; reject absurd counts before reserving.
  r.require(n_layers * 21);
  std::vector<LayerSpec> specs;
  specs.reserve(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) {
    LayerSpec s;
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::softmax)) r.fail("unknown layer kind " + std::to_string(kind));
    s.kind = static_cast<LayerKind>(kind);
    s.in_units = r.u32();
    s.out_units = r.u32();
    s.kernel = r.u32();
    s.stride = r.u32();
    s.padding = r.u32();
    specs.push_back(s);
  }
  Normalization norm;
  for (std::size_t c = 0; c < chw[0]; ++c) norm.mean.push_back(r.f64());
  for (std::size_t c = 0; c < chw[0]; ++c) norm.stddev.push_back(r.f64());
  const std::uint64_t count = r.u64();

  std::uint64_t expected = 0;
  for (const LayerSpec& s : specs)
    for (const Shape& sh : s.parameter_shapes()) expected += shape_numel(sh);
  expected = expected * n + n * chw[0] + n;
  if (count != expected) {
    r.fail("manifest declares " + std::to_string(count) + " parameters but layer specs require " +
           std::to_string(expected));
  }
  const std::size_t expected_bytes = r.position() + count * 8;
  if (bytes.size() != expected_bytes) {
    throw FormatError("model: " + std::string(bytes.size() < expected_bytes ? "truncated" : "oversized") +
                      " stream, expected " + std::to_string(expected_bytes) + " bytes, got " +
                      std::to_string(bytes.size()));
  }

  auto read_tensor = [&](const Shape& shape) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = r.f64();
    return Tensor(shape, std::move(v), true);
  };
  const std::size_t cam_min = cam_minimum(chw[1], chw[2]);
  std::vector<ExpertNetwork> experts;
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<Layer> layers;
    for (const LayerSpec& s : specs) {
      Layer l{s, {}};
      for (const Shape& sh : s.parameter_shapes()) l.params.push_back(read_tensor(sh));
      layers.push_back(std::move(l));
    }
    experts.push_back(ExpertNetwork::from_layers(std::move(layers), chw, m, cam_min));
  }
  GateNetwork gate;
  gate.weight = read_tensor({n, chw[0]});
  gate.bias = read_tensor({n});
  return MoEModel(std::move(experts), std::move(gate), m, chw, std::move(norm), seed);
}

void save_model(const MoEModel& model, const std::filesystem::path& path) {
  binary::write_file_atomic(path, serialize_model(model));
}

MoEModel load_model(const std::filesystem::path& path) { return deserialize_model(binary::read_file(path)); }

std::uint64_t parameter_hash(std::span<const Tensor> params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Tensor& p : params)
    for (double v : p.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffU;
        h *= 1099511628211ULL;
      }
    }
  return h;
}

}  // namespace immunity
