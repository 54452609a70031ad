#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "immunity/error.hpp"
#include "immunity/grad_check.hpp"
#include "immunity/layers.hpp"
#include "immunity/ops.hpp"
#include "immunity/tensor.hpp"

using namespace immunity;

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(shape, std::move(v));
}

// Resamples until no coordinate sits near a ReLU kink.
Tensor away_from_zero(const Shape& shape, std::mt19937_64& rng) {
  Tensor t = random_tensor(shape, rng);
  for (double& x : t.mutable_data()) {
    while (std::abs(x) < 1e-3) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  }
  return t;
}

}  // namespace

TEST(Tensor, RejectsSizeMismatch) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}, {}), ShapeError);
}

TEST(Tensor, ReluDefinition) {
  Tensor x({2, 2}, {1, -1, 2, 0});
  Tensor y = ops::relu(x);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 0, 2, 0}));
}

TEST(Tensor, IdentityConvKernel) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 1, 5, 4}, rng);
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor b({1}, {0.0});
  Tensor y = ops::conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(Tensor, SoftmaxSymmetric) {
  Tensor y = ops::softmax(Tensor({1, 2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(Tensor, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(2);
  Tensor y = ops::softmax(random_tensor({7, 5}, rng, -20, 20));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_GT(y.at(r * 5 + c), 0.0);
      s += y.at(r * 5 + c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, ShapeErrorNamesOpAndShapes) {
  Tensor a({2, 3}, std::vector<double>(6, 1.0));
  Tensor b({3, 2}, std::vector<double>(6, 1.0));
  try {
    ops::add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(ops::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGradient) {
  Tensor x({1}, {3.0}, true);
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, AccumulatesAcrossCalls) {
  Tensor x({1}, {3.0}, true);
  backward(ops::sum(ops::mul(x, x)));
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, RejectsNonScalarRoot) {
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), ShapeError);
}

TEST(Backward, SoftmaxCrossEntropyGradient) {
  Tensor z({1, 4}, {0.3, -1.2, 2.0, 0.1}, true);
  const std::size_t label[] = {2};
  backward(ops::sum(ops::nll(ops::softmax(z), label, 1e-300)));
  Tensor p = ops::softmax(z.detach());
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(z.grad()[k], p.at(k) - (k == 2 ? 1.0 : 0.0), 1e-12);
  }
  auto r = grad_check(
      [](const Tensor& t) {
        const std::size_t l[] = {2};
        return ops::sum(ops::nll(ops::softmax(t), l, 1e-300));
      },
      z.detach(), 1e-6);
  EXPECT_LE(r.max_relative_error, 1e-6);
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 2, 6, 6}, rng);
    Layer c = Layer::make(LayerSpec::conv(2, 3, 3, 1, 1), rng);
    x.set_requires_grad(true);
    backward(ops::sum(ops::relu(c.forward(x))));
    return std::vector<double>(c.params[0].grad().begin(), c.params[0].grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Gradients, StopsAtIntermediateTargets) {
  Tensor x({3}, {1, 2, 3}, true);
  Tensor h = ops::scale(x, 2.0);
  Tensor y = ops::sum(ops::mul(h, h));
  auto g = gradients(y, {h});
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0], (std::vector<double>{4, 8, 12}));
  EXPECT_FALSE(x.has_grad());
}

TEST(NoGrad, GuardSuppressesGraph) {
  Tensor x({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(ops::scale(x, 2.0).requires_grad());
  }
  EXPECT_TRUE(ops::scale(x, 2.0).requires_grad());
}

TEST(GradCheck, LinearIsExact) {
  std::mt19937_64 rng(3);
  auto r = grad_check([](const Tensor& t) { return ops::sum(t); }, random_tensor({4, 3}, rng), 1e-6);
  EXPECT_LE(r.max_relative_error, 1e-9);
}

TEST(GradCheck, ReluSum) {
  std::mt19937_64 rng(4);
  auto r = grad_check([](const Tensor& t) { return ops::sum(ops::relu(t)); }, away_from_zero({10}, rng), 1e-6);
  EXPECT_LE(r.max_relative_error, 1e-6);
}

TEST(GradCheck, ReportsNonFiniteCoordinate) {
  Tensor p({3}, {1.0, -1.0, 2.0});
  try {
    grad_check([](const Tensor& t) { return ops::sum(ops::log(t)); }, p, 1e-6);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

TEST(GradCheck, SmallConvNetwork) {
  std::mt19937_64 rng(6);
  Layer conv = Layer::make(LayerSpec::conv(2, 3, 3, 1, 1), rng);
  Layer fc = Layer::make(LayerSpec::dense(3 * 5 * 5, 4), rng);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  auto net = [&](const Tensor& in, const std::vector<Tensor>& p) {
    Tensor h = ops::relu(ops::conv2d(in, p[0], p[1], 1, 1));
    return ops::sum(ops::mul(ops::linear(ops::flatten(h), p[2], p[3]), ops::linear(ops::flatten(h), p[2], p[3])));
  };
  std::vector<Tensor> params{conv.params[0], conv.params[1], fc.params[0], fc.params[1]};
  // Resample inputs that land near a ReLU kink.
  for (int tries = 0; tries < 50; ++tries) {
    NoGradGuard ng;
    Tensor pre = ops::conv2d(x, params[0], params[1], 1, 1);
    bool kink = false;
    for (double v : pre.data()) kink = kink || std::abs(v) < 1e-3;
    if (!kink) break;
    x = random_tensor({2, 2, 5, 5}, rng);
  }
  auto r = grad_check([&](const Tensor& t) { return net(t, params); }, x, 1e-5);
  EXPECT_LE(r.max_relative_error, 1e-4);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto wrt = [&, k](const Tensor& t) {
      auto p = params;
      p[k] = t;
      return net(x, p);
    };
    EXPECT_LE(grad_check(wrt, params[k].detach(), 1e-5).max_relative_error, 1e-4) << "parameter " << k;
  }
}

TEST(Conv2d, MatchesNaiveReference) {
  std::mt19937_64 rng(7);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      Tensor x = random_tensor({2, 3, 5, 5}, rng);
      Tensor w = random_tensor({4, 3, 3, 3}, rng);
      Tensor b = random_tensor({4}, rng);
      Tensor y = ops::conv2d(x, w, b, stride, pad);
      const std::size_t oh = (5 + 2 * pad - 3) / stride + 1;
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < oh; ++j) {
              double acc = b.at(o);
              for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t u = 0; u < 3; ++u)
                  for (std::size_t v = 0; v < 3; ++v) {
                    const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                    const long s = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                    if (r < 0 || s < 0 || r >= 5 || s >= 5) continue;
                    acc += w.at(((o * 3 + c) * 3 + u) * 3 + v) * x.at(((n * 3 + c) * 5 + r) * 5 + s);
                  }
              EXPECT_NEAR(y.at(((n * 4 + o) * oh + i) * oh + j), acc, 1e-10);
            }
    }
  }
}

TEST(GradCheck, EveryDifferentiableOp) {
  std::mt19937_64 rng(8);
  const double step = 1e-5, tol = 1e-4;
  auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f, const Tensor& at) {
    EXPECT_LE(grad_check(f, at, step).max_relative_error, tol) << name;
  };
  Tensor other = random_tensor({3, 4}, rng);
  check("add", [&](const Tensor& t) { return ops::sum(ops::mul(ops::add(t, other), ops::add(t, other))); },
        random_tensor({3, 4}, rng));
  check("sub", [&](const Tensor& t) { return ops::sum(ops::mul(ops::sub(t, other), t)); }, random_tensor({3, 4}, rng));
  check("scale", [&](const Tensor& t) { return ops::sum(ops::mul(ops::scale(t, -2.5), t)); },
        random_tensor({3, 4}, rng));
  check("add_scalar", [&](const Tensor& t) { return ops::sum(ops::mul(ops::add_scalar(t, 0.7), t)); },
        random_tensor({3, 4}, rng));
  check("mean", [&](const Tensor& t) { return ops::mul(ops::mean(t), ops::mean(t)); }, random_tensor({3, 4}, rng));
  check("log", [&](const Tensor& t) { return ops::sum(ops::log(t)); }, random_tensor({3, 4}, rng, 0.5, 2.0));
  check("relu", [&](const Tensor& t) { return ops::sum(ops::mul(ops::relu(t), t)); }, away_from_zero({3, 4}, rng));
  check("softmax", [&](const Tensor& t) { return ops::sum(ops::mul(ops::softmax(t), other)); },
        random_tensor({3, 4}, rng));
  Tensor img = random_tensor({2, 2, 6, 6}, rng);
  check("maxpool2d", [&](const Tensor& t) { return ops::sum(ops::mul(ops::maxpool2d(t, 2, 2), ops::maxpool2d(t, 2, 2))); },
        img);
  check("avgpool2d", [&](const Tensor& t) { return ops::sum(ops::mul(ops::avgpool2d(t, 2, 2), ops::avgpool2d(t, 2, 2))); },
        img);
  check("global_avg_pool",
        [&](const Tensor& t) { return ops::sum(ops::mul(ops::global_avg_pool(t), ops::global_avg_pool(t))); }, img);
  check("flatten", [&](const Tensor& t) { return ops::sum(ops::mul(ops::flatten(t), ops::flatten(t))); }, img);
  Tensor w = random_tensor({5, 4}, rng), b = random_tensor({5}, rng);
  check("linear", [&](const Tensor& t) { return ops::sum(ops::mul(ops::linear(t, w, b), ops::linear(t, w, b))); },
        random_tensor({3, 4}, rng));
  const double mean[] = {0.2, -0.1}, sd[] = {0.5, 2.0};
  check("channel_normalize",
        [&](const Tensor& t) {
          Tensor z = ops::channel_normalize(t, mean, sd);
          return ops::sum(ops::mul(z, z));
        },
        img);
  Tensor target = random_tensor({2, 7, 9}, rng);
  check("bilinear_resize",
        [&](const Tensor& t) { return ops::sum(ops::mul(ops::bilinear_resize(t, 7, 9), target)); },
        random_tensor({2, 3, 4}, rng));
  const std::size_t cols[] = {3, 0, 2};
  check("select_columns", [&](const Tensor& t) { return ops::sum(ops::mul(ops::select_columns(t, cols), ops::select_columns(t, cols))); },
        random_tensor({3, 4}, rng));
  const std::size_t perm[] = {2, 0, 3, 1};
  check("permute_columns", [&](const Tensor& t) { return ops::sum(ops::mul(ops::permute_columns(t, perm), other)); },
        random_tensor({3, 4}, rng));
  std::vector<Tensor> probs{ops::softmax(random_tensor({3, 4}, rng)), ops::softmax(random_tensor({3, 4}, rng))};
  check("mixture (weights)",
        [&](const Tensor& t) { return ops::sum(ops::mul(ops::mixture(ops::softmax(t), probs), other)); },
        random_tensor({3, 2}, rng));
  Tensor gate = ops::softmax(random_tensor({3, 2}, rng));
  check("mixture (experts)",
        [&](const Tensor& t) {
          std::vector<Tensor> p{ops::softmax(t), probs[1]};
          return ops::sum(ops::mul(ops::mixture(gate, p), other));
        },
        random_tensor({3, 4}, rng));
  const std::size_t labels[] = {1, 3, 0};
  check("nll", [&](const Tensor& t) { return ops::sum(ops::nll(ops::softmax(t), labels, 1e-12)); },
        random_tensor({3, 4}, rng));
  Tensor cw = random_tensor({3, 2, 3, 3}, rng), cb = random_tensor({3}, rng);
  check("conv2d (input)", [&](const Tensor& t) {
    Tensor y = ops::conv2d(t, cw, cb, 2, 1);
    return ops::sum(ops::mul(y, y));
  }, img);
  check("conv2d (weight)", [&](const Tensor& t) {
    Tensor y = ops::conv2d(img, t, cb, 1, 1);
    return ops::sum(ops::mul(y, y));
  }, cw);
  check("reshape", [&](const Tensor& t) { return ops::sum(ops::mul(t.reshape({12}), t.reshape({12}))); },
        random_tensor({3, 4}, rng));
}

TEST(BilinearResize, ConstantStaysConstant) {
  Tensor g = Tensor::full({3, 5}, 0.37);
  Tensor r = ops::bilinear_resize(g, 8, 2);
  for (double v : r.data()) EXPECT_DOUBLE_EQ(v, 0.37);
}

TEST(BilinearResize, LinearMidpoint) {
  Tensor r = ops::bilinear_resize(Tensor({2, 2}, {0, 1, 0, 1}), 2, 3);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0.5, 1, 0, 0.5, 1}));
}

TEST(BilinearResize, CornersAlign) {
  std::mt19937_64 rng(9);
  Tensor g = random_tensor({4, 4}, rng);
  Tensor r = ops::bilinear_resize(g, 32, 32);
  // Source row i maps to target row i * 31 / 3; only the corners land on integer positions.
  EXPECT_DOUBLE_EQ(r.at(0), g.at(0));
  EXPECT_DOUBLE_EQ(r.at(31), g.at(3));
  EXPECT_DOUBLE_EQ(r.at(31 * 32), g.at(12));
  EXPECT_DOUBLE_EQ(r.at(32 * 32 - 1), g.at(15));
}

TEST(BilinearResize, RejectsZeroTarget) {
  EXPECT_THROW(ops::bilinear_resize(Tensor::full({2, 2}, 1.0), 0, 3), ShapeError);
}
