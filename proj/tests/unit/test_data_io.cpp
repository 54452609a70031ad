#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "immunity/data_io.hpp"
#include "immunity/error.hpp"

using namespace immunity;

namespace {

std::vector<double> values(const immunity::Tensor& t) { return {t.data().begin(), t.data().end()}; }


std::filesystem::path fixture(const std::string& name) {
  const char* dir = std::getenv("IMMUNITY_TEST_DATA");
  return std::filesystem::path(dir ? dir : "tests/data") / name;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Sample gradient_image(std::size_t c, std::size_t h, std::size_t w) {
  Sample s;
  s.channels = c;
  s.height = h;
  s.width = w;
  s.label = 1;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) s.image.push_back((double(x + y) + 0.5 * double(k)) / double(h + w + c));
  return s;
}

}  // namespace

TEST(Cifar, FixtureDecodesExactly) {
  Dataset d = load_cifar_binary(fixture("cifar10_fixture.bin"), CifarVariant::cifar10);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d.labels(), (std::vector<std::size_t>{0, 3, 6}));
  EXPECT_EQ(d.channels(), 3u);
  EXPECT_EQ(d.height(), 32u);
  auto img = d.image(0);
  EXPECT_EQ(img[0], 0.0);
  EXPECT_EQ(img[1], 1.0);
  EXPECT_EQ(img[2], 128.0 / 255.0);
  EXPECT_EQ(d.meta().provenance, Provenance::cifar10);
  EXPECT_EQ(d.meta().n_classes, 10u);
}

TEST(Cifar, RoundTripIsByteExact) {
  for (auto [name, variant] : {std::pair{"cifar10_fixture.bin", CifarVariant::cifar10},
                               std::pair{"cifar100_fixture.bin", CifarVariant::cifar100}}) {
    auto bytes = read_bytes(fixture(name));
    ASSERT_FALSE(bytes.empty()) << name;
    Dataset d = parse_cifar_binary(bytes, variant);
    EXPECT_EQ(export_cifar_binary(d, variant), bytes) << name;
  }
}

TEST(Cifar, Cifar100UsesFineLabel) {
  Dataset d = load_cifar_binary(fixture("cifar100_fixture.bin"), CifarVariant::cifar100);
  EXPECT_EQ(d.labels(), (std::vector<std::size_t>{5, 42}));
  EXPECT_EQ(d.coarse_labels, (std::vector<std::uint8_t>{0, 7}));
  EXPECT_EQ(d.meta().n_classes, 100u);
}

TEST(Cifar, RejectsTruncatedFile) {
  auto bytes = read_bytes(fixture("cifar10_fixture.bin"));
  bytes.pop_back();
  try {
    parse_cifar_binary(bytes, CifarVariant::cifar10);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("multiple of the 3073-byte"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_cifar_binary(std::vector<std::uint8_t>{}, CifarVariant::cifar10), FormatError);
}

TEST(Cifar, RejectsLabelWithRecordIndex) {
  auto bytes = read_bytes(fixture("cifar10_fixture.bin"));
  bytes[3073] = 10;
  try {
    parse_cifar_binary(bytes, CifarVariant::cifar10);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos) << e.what();
  }
}

TEST(Synth, BalancedDeterministicAndInRange) {
  Dataset a = synth_shapes(100, 4, 16, 7);
  Dataset b = synth_shapes(100, 4, 16, 7);
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t l : a.labels()) ++counts[l];
  EXPECT_EQ(counts, (std::vector<std::size_t>{25, 25, 25, 25}));
  EXPECT_EQ(serialize_dataset(a), serialize_dataset(b));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (double v : a.image(i)) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_NE(serialize_dataset(a), serialize_dataset(synth_shapes(100, 4, 16, 8)));
  Dataset odd = synth_shapes(10, 3, 12, 1);
  std::vector<std::size_t> oc(3, 0);
  for (std::size_t l : odd.labels()) ++oc[l];
  EXPECT_LE(*std::max_element(oc.begin(), oc.end()) - *std::min_element(oc.begin(), oc.end()), 1u);
  for (double s : a.meta().stddev) EXPECT_GT(s, 0.0);
}

TEST(Synth, RejectsUnsupportedArguments) {
  EXPECT_THROW(synth_shapes(10, 1, 16, 0), ConfigError);
  EXPECT_THROW(synth_shapes(10, 9, 16, 0), ConfigError);
  EXPECT_THROW(synth_shapes(10, 4, 11, 0), ConfigError);
  EXPECT_EQ(shape_template_names().size(), 8u);
}

TEST(Augment, ZeroParametersAreIdentity) {
  Sample s = gradient_image(3, 12, 12);
  Sample out = augment_with(s, {});
  ASSERT_EQ(out.image.size(), s.image.size());
  for (std::size_t i = 0; i < s.image.size(); ++i) EXPECT_NEAR(out.image[i], s.image[i], 1e-12);
  EXPECT_EQ(out.label, s.label);
}

TEST(Augment, ConstantImageStaysConstant) {
  Sample s = gradient_image(3, 12, 12);
  std::fill(s.image.begin(), s.image.end(), 0.37);
  std::mt19937_64 rng(1);
  for (int k = 0; k < 20; ++k) {
    for (double v : augment(s, rng).image) EXPECT_NEAR(v, 0.37, 1e-12);
  }
  for (double v : augment_with(s, {2, -2, 15.0}).image) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(Augment, ShiftMovesContent) {
  Sample s = gradient_image(1, 12, 12);
  Sample out = augment_with(s, {0, 1, 0.0});
  // Interior columns move left by one.
  EXPECT_NEAR(out.image[5 * 12 + 4], s.image[5 * 12 + 5], 1e-12);
  EXPECT_THROW(augment_with(s, {3, 0, 0.0}), ConfigError);
}

TEST(Augment, PreservesChannelMeans) {
  Dataset d = synth_shapes(1000, 4, 16, 3);
  std::mt19937_64 rng(5);
  const std::size_t plane = 16 * 16;
  std::vector<double> src(3, 0.0), aug(3, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    Sample s = d.sample(i);
    Sample a = augment(s, rng);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        src[c] += s.image[c * plane + p];
        aug[c] += a.image[c * plane + p];
        ASSERT_TRUE(a.image[c * plane + p] >= 0.0 && a.image[c * plane + p] <= 1.0);
      }
  }
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(aug[c] / (1000.0 * plane), src[c] / (1000.0 * plane), 0.05);
  }
}

TEST(Normalize, RoundTripAndSpecialCases) {
  DatasetMeta meta;
  meta.mean = {0.5, 0.25, 0.75};
  meta.stddev = {0.2, 0.3, 0.1};
  Dataset d = synth_shapes(4, 2, 12, 1);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  Tensor x = d.batch(idx);
  Tensor back = denormalize(normalize(x, meta), meta);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back.at(i), x.at(i), 1e-12);

  DatasetMeta id;
  id.mean = {0, 0, 0};
  id.stddev = {1, 1, 1};
  Tensor same = normalize(x, id);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same.at(i), x.at(i));

  std::vector<double> img(3 * 144);
  for (std::size_t c = 0; c < 3; ++c) std::fill(img.begin() + c * 144, img.begin() + (c + 1) * 144, meta.mean[c]);
  for (double v : values(normalize(Tensor({1, 3, 12, 12}, img), meta))) EXPECT_EQ(v, 0.0);

  meta.stddev[1] = 0.0;
  EXPECT_THROW(normalize(x, meta), ConfigError);
}

TEST(Container, RoundTripAndErrors) {
  Dataset d = synth_shapes(12, 3, 12, 2);
  auto bytes = serialize_dataset(d);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "IMDS");
  Dataset back = deserialize_dataset(bytes);
  EXPECT_EQ(back.labels(), d.labels());
  EXPECT_EQ(back.meta().mean, d.meta().mean);
  EXPECT_EQ(serialize_dataset(back), bytes);

  auto cut = bytes;
  cut.resize(bytes.size() - 3);
  try {
    deserialize_dataset(cut);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(bytes.size())), std::string::npos) << e.what();
  }
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(deserialize_dataset(bad), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "immunity_container_test.imds";
  save_dataset(d, path);
  EXPECT_EQ(serialize_dataset(load_dataset(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Dataset, ValidatesSamples) {
  Dataset d(1, 2, 2, 3, Provenance::synthetic);
  std::vector<double> ok(4, 0.5), bad(4, 1.5), short_img(3, 0.5);
  d.add(ok, 2);
  EXPECT_THROW(d.add(ok, 3), ConfigError);
  EXPECT_THROW(d.add(bad, 0), ConfigError);
  EXPECT_THROW(d.add(short_img, 0), ShapeError);
  EXPECT_EQ(d.size(), 1u);
}

TEST(Shuffle, ReproducibleWithSeed) {
  std::mt19937_64 a(4), b(4);
  auto x = shuffled_indices(50, a);
  EXPECT_EQ(x, shuffled_indices(50, b));
  std::vector<std::size_t> sorted(x);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}
