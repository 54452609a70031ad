#include "immunity/data_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "immunity/binary_io.hpp"
#include "immunity/error.hpp"

namespace immunity {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::cifar10: return "cifar10";
    case Provenance::cifar100: return "cifar100";
    case Provenance::synthetic: return "synthetic";
  }
  return "unknown";
}

Dataset::Dataset(std::size_t channels, std::size_t height, std::size_t width, std::size_t n_classes,
                 Provenance provenance)
    : channels_(channels), height_(height), width_(width) {
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("dataset: image dimensions must be positive");
  meta_.n_classes = n_classes;
  meta_.provenance = provenance;
  meta_.mean.assign(channels, 0.0);
  meta_.stddev.assign(channels, 1.0);
}

void Dataset::add(std::span<const double> image, std::size_t label) {
  if (image.size() != image_size()) {
    throw ShapeError("dataset: image of " + std::to_string(image.size()) + " values, expected " +
                     std::to_string(image_size()));
  }
  if (label >= meta_.n_classes) {
    throw ConfigError("dataset: label " + std::to_string(label) + " out of range for " +
                      std::to_string(meta_.n_classes) + " classes");
  }
  for (double v : image) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("dataset: pixel outside [0, 1]");
  }
  pixels_.insert(pixels_.end(), image.begin(), image.end());
  labels_.push_back(label);
  meta_.count = labels_.size();
}

void Dataset::compute_statistics() {
  const std::size_t plane = height_ * width_;
  const double n = static_cast<double>(plane * size());
  for (std::size_t c = 0; c < channels_; ++c) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
      const double* p = pixels_.data() + i * image_size() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        s += p[j];
        ss += p[j] * p[j];
      }
    }
    const double mean = n > 0 ? s / n : 0.0;
    const double var = n > 0 ? std::max(ss / n - mean * mean, 0.0) : 1.0;
    meta_.mean[c] = mean;
    // Degenerate channels keep a unit scale so normalization stays invertible.
    meta_.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
}

std::span<const double> Dataset::image(std::size_t i) const {
  if (i >= size()) throw ConfigError("dataset: index " + std::to_string(i) + " out of range 0.." + std::to_string(size()));
  return std::span<const double>(pixels_).subspan(i * image_size(), image_size());
}

Sample Dataset::sample(std::size_t i) const {
  auto img = image(i);
  return {{img.begin(), img.end()}, channels_, height_, width_, labels_[i]};
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<double> data;
  data.reserve(indices.size() * image_size());
  for (std::size_t i : indices) {
    auto img = image(i);
    data.insert(data.end(), img.begin(), img.end());
  }
  return Tensor({indices.size(), channels_, height_, width_}, std::move(data));
}

std::vector<std::size_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(label(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out(channels_, height_, width_, meta_.n_classes, meta_.provenance);
  for (std::size_t i : indices) {
    out.add(image(i), label(i));
    if (!coarse_labels.empty()) out.coarse_labels.push_back(coarse_labels[i]);
  }
  out.meta_.mean = meta_.mean;
  out.meta_.stddev = meta_.stddev;
  return out;
}

// ---- CIFAR -----------------------------------------------------------------

namespace {

constexpr std::size_t kCifarPixels = 3072;

std::size_t cifar_label_bytes(CifarVariant v) { return v == CifarVariant::cifar10 ? 1 : 2; }
std::size_t cifar_classes(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

}  // namespace

Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant) {
  const std::size_t label_bytes = cifar_label_bytes(variant);
  const std::size_t record = label_bytes + kCifarPixels;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw FormatError("cifar: file size " + std::to_string(bytes.size()) + " is not a positive multiple of the " +
                      std::to_string(record) + "-byte record size");
  }
  const std::size_t classes = cifar_classes(variant);
  Dataset data(3, 32, 32, classes, variant == CifarVariant::cifar10 ? Provenance::cifar10 : Provenance::cifar100);
  std::vector<double> image(kCifarPixels);
  for (std::size_t r = 0; r < bytes.size() / record; ++r) {
    const std::uint8_t* rec = bytes.data() + r * record;
    const std::size_t label = rec[label_bytes - 1];
    if (label >= classes) {
      throw FormatError("cifar: record " + std::to_string(r) + " has label " + std::to_string(label) + " >= " +
                        std::to_string(classes));
    }
    for (std::size_t i = 0; i < kCifarPixels; ++i) image[i] = static_cast<double>(rec[label_bytes + i]) / 255.0;
    data.add(image, label);
    if (variant == CifarVariant::cifar100) data.coarse_labels.push_back(rec[0]);
  }
  data.compute_statistics();
  return data;
}

Dataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant) {
  return parse_cifar_binary(binary::read_file(path), variant);
}

std::vector<std::uint8_t> export_cifar_binary(const Dataset& data, CifarVariant variant) {
  if (data.channels() != 3 || data.height() != 32 || data.width() != 32) {
    throw ShapeError("cifar export: images must be 3x32x32");
  }
  std::vector<std::uint8_t> out;
  out.reserve(data.size() * (cifar_label_bytes(variant) + kCifarPixels));
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (variant == CifarVariant::cifar100) {
      out.push_back(data.coarse_labels.empty() ? 0 : data.coarse_labels[i]);
    }
    out.push_back(static_cast<std::uint8_t>(data.label(i)));
    for (double v : data.image(i)) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

// ---- synthetic shapes --------------------------------------------------------

const std::vector<std::string>& shape_template_names() {
  static const std::vector<std::string> names{"filled_square", "hollow_square", "cross",         "diagonal_stripe",
                                              "disc",          "triangle",      "horizontal_bars", "checker"};
  return names;
}

namespace {

// Template membership for offsets (dy, dx) from the shape center at half-size r.
bool in_template(std::size_t cls, double dy, double dx, double r) {
  const double ay = std::abs(dy), ax = std::abs(dx);
  const bool in_box = ay <= r && ax <= r;
  switch (cls) {
    case 0: return in_box;
    case 1: return in_box && std::max(ay, ax) >= r - 1.0;
    case 2: return (ay <= 0.75 && ax <= r) || (ax <= 0.75 && ay <= r);
    case 3: return in_box && std::abs(dy - dx) <= 0.75;
    case 4: return dy * dy + dx * dx <= r * r;
    case 5: return dy >= -r && dy <= r && ax <= (dy + r) / 2.0;
    case 6: return in_box && static_cast<long>(std::floor(dy + r)) % 3 == 0;
    case 7: return in_box && (static_cast<long>(std::floor((dy + r) / 2.0)) + static_cast<long>(std::floor((dx + r) / 2.0))) % 2 == 0;
    default: return false;
  }
}

// Mild per-class colour tendencies; jitter dominates so colour alone does not identify the class.
constexpr std::array<std::array<double, 3>, 8> kClassTint{{{1, 0, 0},
                                                            {0, 1, 0},
                                                            {0, 0, 1},
                                                            {1, 1, 0},
                                                            {1, 0, 1},
                                                            {0, 1, 1},
                                                            {1, 0.5, 0},
                                                            {0.5, 0, 1}}};

}  // namespace

Dataset synth_shapes(std::size_t n, std::size_t classes, std::size_t size, std::uint64_t seed) {
  if (classes < 2 || classes > 8) {
    throw ConfigError("synth_shapes: classes must be in 2..8, got " + std::to_string(classes));
  }
  if (size < 12) throw ConfigError("synth_shapes: size must be at least 12, got " + std::to_string(size));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> noise(-0.1, 0.1);
  const double s = static_cast<double>(size);
  Dataset data(3, size, size, classes, Provenance::synthetic);
  std::vector<double> image(3 * size * size);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = labels[i];
    const double r = s * (0.2 + 0.15 * unit(rng));
    const double cy = r + (s - 1.0 - 2.0 * r) * unit(rng);
    const double cx = r + (s - 1.0 - 2.0 * r) * unit(rng);
    std::array<double, 3> bg{}, fg{};
    for (std::size_t c = 0; c < 3; ++c) {
      bg[c] = 0.35 * unit(rng);
      fg[c] = std::clamp(0.45 + 0.4 * unit(rng) + 0.15 * kClassTint[cls][c], 0.0, 1.0);
    }
    // Colour varies across the image along a random direction.
    const double theta = 2.0 * std::numbers::pi * unit(rng);
    const double gy = std::sin(theta), gx = std::cos(theta);
    const double strength = 0.25 * unit(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const bool on = in_template(cls, dy, dx, r);
        const double ramp = strength * ((static_cast<double>(y) / s - 0.5) * gy + (static_cast<double>(x) / s - 0.5) * gx);
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = on ? fg[c] + ramp : bg[c];
          image[(c * size + y) * size + x] = std::clamp(base + noise(rng), 0.0, 1.0);
        }
      }
    data.add(image, cls);
  }
  data.compute_statistics();
  return data;
}

// ---- augmentation ------------------------------------------------------------

namespace {

std::size_t reflect(long i, std::size_t n) {
  const long m = static_cast<long>(n);
  if (m == 1) return 0;
  while (i < 0 || i >= m) {
    if (i < 0) i = -i;
    if (i >= m) i = 2 * (m - 1) - i;
  }
  return static_cast<std::size_t>(i);
}

}  // namespace

Sample augment_with(const Sample& sample, const AugmentParams& p) {
  if (std::abs(p.shift_y) > 2 || std::abs(p.shift_x) > 2) throw ConfigError("augment: crop shift must be within 2 pixels");
  const std::size_t C = sample.channels, H = sample.height, W = sample.width;
  Sample out = sample;
  // Crop: output (y, x) reads padded (y + 2 + shift) which maps to source (y + shift) reflected.
  std::vector<double> cropped(sample.image.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sy = reflect(static_cast<long>(y) + p.shift_y, H);
        const std::size_t sx = reflect(static_cast<long>(x) + p.shift_x, W);
        cropped[(c * H + y) * W + x] = sample.image[(c * H + sy) * W + sx];
      }
  if (p.angle_deg == 0.0) {
    out.image = std::move(cropped);
  } else {
    const double a = p.angle_deg * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double oy = (static_cast<double>(H) - 1.0) / 2.0, ox = (static_cast<double>(W) - 1.0) / 2.0;
    auto at = [&](std::size_t c, long y, long x) {
      y = std::clamp<long>(y, 0, static_cast<long>(H) - 1);
      x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
      return cropped[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
    };
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double dy = static_cast<double>(y) - oy, dx = static_cast<double>(x) - ox;
        // Inverse rotation maps each output pixel to its source location.
        const double sy = ca * dy - sa * dx + oy;
        const double sx = sa * dy + ca * dx + ox;
        const long y0 = static_cast<long>(std::floor(sy)), x0 = static_cast<long>(std::floor(sx));
        const double ty = sy - static_cast<double>(y0), tx = sx - static_cast<double>(x0);
        for (std::size_t c = 0; c < C; ++c) {
          const double top = (1 - tx) * at(c, y0, x0) + tx * at(c, y0, x0 + 1);
          const double bot = (1 - tx) * at(c, y0 + 1, x0) + tx * at(c, y0 + 1, x0 + 1);
          out.image[(c * H + y) * W + x] = (1 - ty) * top + ty * bot;
        }
      }
  }
  for (double& v : out.image) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Sample augment(const Sample& sample, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> shift(-2, 2);
  std::uniform_real_distribution<double> angle(-15.0, 15.0);
  AugmentParams p;
  p.shift_y = shift(rng);
  p.shift_x = shift(rng);
  p.angle_deg = angle(rng);
  return augment_with(sample, p);
}

// ---- normalization -------------------------------------------------------------

namespace {

Tensor affine_channels(const Tensor& batch, const DatasetMeta& meta, bool forward) {
  if (batch.dim() != 4 || batch.size(1) != meta.mean.size() || meta.stddev.size() != meta.mean.size()) {
    throw ShapeError("normalize: batch " + shape_to_string(batch.shape()) + " does not match " +
                     std::to_string(meta.mean.size()) + " channel statistics");
  }
  for (double s : meta.stddev) {
    if (!(s > 0.0)) throw ConfigError("normalize: standard deviations must be positive");
  }
  const std::size_t B = batch.size(0), C = batch.size(1), plane = batch.size(2) * batch.size(3);
  std::vector<double> out(batch.data().begin(), batch.data().end());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data() + (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        p[i] = forward ? (p[i] - meta.mean[c]) / meta.stddev[c] : p[i] * meta.stddev[c] + meta.mean[c];
      }
    }
  return Tensor(batch.shape(), std::move(out));
}

}  // namespace

Tensor normalize(const Tensor& batch, const DatasetMeta& meta) { return affine_channels(batch, meta, true); }
Tensor denormalize(const Tensor& batch, const DatasetMeta& meta) { return affine_channels(batch, meta, false); }

// ---- container -----------------------------------------------------------------

namespace {
constexpr char kDataMagic[] = "IMDS";
constexpr std::uint8_t kDataVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& data) {
  binary::Writer w;
  w.bytes(std::string_view(kDataMagic, 4));
  w.u8(kDataVersion);
  w.u8(static_cast<std::uint8_t>(data.meta().provenance));
  w.u32(static_cast<std::uint32_t>(data.meta().n_classes));
  w.u32(static_cast<std::uint32_t>(data.channels()));
  w.u32(static_cast<std::uint32_t>(data.height()));
  w.u32(static_cast<std::uint32_t>(data.width()));
  w.u64(data.size());
  for (double m : data.meta().mean) w.f64(m);
  for (double s : data.meta().stddev) w.f64(s);
  for (std::size_t i = 0; i < data.size(); ++i) {
    w.i32(static_cast<std::int32_t>(data.label(i)));
    for (double v : data.image(i)) w.f64(v);
  }
  return w.take();
}

Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "dataset");
  if (bytes.size() < 4 || r.bytes(4) != std::string_view(kDataMagic, 4)) {
    throw FormatError("dataset: bad magic at byte 0, expected \"IMDS\"");
  }
  const std::uint8_t version = r.u8();
  if (version != kDataVersion) throw FormatError("dataset: unsupported format version " + std::to_string(version));
  const std::uint8_t prov = r.u8();
  if (prov > static_cast<std::uint8_t>(Provenance::synthetic)) r.fail("unknown provenance tag");
  const std::size_t classes = r.u32(), c = r.u32(), h = r.u32(), w = r.u32();
  const std::uint64_t count = r.u64();
  if (classes == 0 || c == 0 || h == 0 || w == 0) r.fail("zero-sized header field");
  r.require(16 * c);
  const std::size_t record = 4 + 8 * c * h * w;
  const std::size_t expected = r.position() + 16 * c + record * count;
  if (bytes.size() != expected) {
    throw FormatError("dataset: " + std::string(bytes.size() < expected ? "truncated" : "oversized") +
                      " stream, expected " + std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()));
  }
  Dataset data(c, h, w, classes, static_cast<Provenance>(prov));
  for (std::size_t i = 0; i < c; ++i) data.meta().mean[i] = r.f64();
  for (std::size_t i = 0; i < c; ++i) data.meta().stddev[i] = r.f64();
  std::vector<double> image(c * h * w);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::int32_t label = r.i32();
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      r.fail("record " + std::to_string(i) + " has label " + std::to_string(label) + " outside 0.." +
             std::to_string(classes - 1));
    }
    for (double& v : image) v = r.f64();
    data.add(image, static_cast<std::size_t>(label));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  binary::write_file_atomic(path, serialize_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(binary::read_file(path)); }

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace immunity
