#include <gtest/gtest.h>

#include <random>

#include "immunity/error.hpp"
#include "immunity/layers.hpp"
#include "immunity/ops.hpp"

using namespace immunity;

TEST(LayerSpec, OutputShapes) {
  EXPECT_EQ(LayerSpec::conv(3, 8, 3, 1, 1).output_shape({2, 3, 16, 16}), (Shape{2, 8, 16, 16}));
  EXPECT_EQ(LayerSpec::conv(3, 8, 3).output_shape({2, 3, 16, 16}), (Shape{2, 8, 14, 14}));
  EXPECT_EQ(LayerSpec::conv(3, 8, 3, 2, 1).output_shape({1, 3, 16, 16}), (Shape{1, 8, 8, 8}));
  EXPECT_EQ(LayerSpec::max_pool(2, 2).output_shape({2, 8, 16, 16}), (Shape{2, 8, 8, 8}));
  EXPECT_EQ(LayerSpec::avg_pool(2, 2).output_shape({2, 8, 5, 5}), (Shape{2, 8, 2, 2}));
  EXPECT_EQ(LayerSpec::simple(LayerKind::flatten).output_shape({2, 4, 2, 2}), (Shape{2, 16}));
  EXPECT_EQ(LayerSpec::dense(16, 4).output_shape({2, 16}), (Shape{2, 4}));
  EXPECT_EQ(LayerSpec::simple(LayerKind::relu).output_shape({2, 4, 2, 2}), (Shape{2, 4, 2, 2}));
}

TEST(LayerSpec, OutputShapeErrors) {
  EXPECT_THROW(LayerSpec::conv(3, 8, 3).output_shape({2, 4, 16, 16}), ShapeError);
  EXPECT_THROW(LayerSpec::conv(3, 8, 5).output_shape({2, 3, 3, 3}), ShapeError);
  EXPECT_THROW(LayerSpec::conv(3, 8, 3).output_shape({3, 16, 16}), ShapeError);
  EXPECT_THROW(LayerSpec::dense(16, 4).output_shape({2, 15}), ShapeError);
  EXPECT_THROW(LayerSpec::simple(LayerKind::flatten).output_shape({5}), ShapeError);
  try {
    LayerSpec::dense(16, 4).output_shape({2, 15});
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("linear"), std::string::npos);
  }
}

TEST(LayerSpec, ParameterShapes) {
  auto p = LayerSpec::conv(3, 8, 3).parameter_shapes();
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0], (Shape{8, 3, 3, 3}));
  EXPECT_EQ(p[1], (Shape{8}));
  auto d = LayerSpec::dense(16, 4).parameter_shapes();
  EXPECT_EQ(d[0], (Shape{4, 16}));
  EXPECT_EQ(d[1], (Shape{4}));
  EXPECT_TRUE(LayerSpec::max_pool(2, 2).parameter_shapes().empty());
}

TEST(Layer, MakeMatchesSpecAndSeed) {
  std::mt19937_64 a(3), b(3);
  Layer la = Layer::make(LayerSpec::conv(3, 4, 3, 1, 1), a);
  Layer lb = Layer::make(LayerSpec::conv(3, 4, 3, 1, 1), b);
  ASSERT_EQ(la.params.size(), 2u);
  EXPECT_TRUE(la.params[0].requires_grad());
  EXPECT_EQ(la.params[0].shape(), (Shape{4, 3, 3, 3}));
  for (std::size_t i = 0; i < la.params[0].numel(); ++i) EXPECT_EQ(la.params[0].at(i), lb.params[0].at(i));
}

TEST(Layer, ForwardOpDispatch) {
  Tensor x({1, 4}, {1, -2, 3, -4});
  Tensor r = forward_op(LayerSpec::simple(LayerKind::relu), x, {});
  EXPECT_EQ(r.at(1), 0.0);
  EXPECT_EQ(r.at(2), 3.0);

  Tensor w({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  Tensor bias({2}, {0.5, -0.5});
  std::vector<Tensor> params{w, bias};
  Tensor y = forward_op(LayerSpec::dense(4, 2), x, params);
  EXPECT_DOUBLE_EQ(y.at(0), 1.5);
  EXPECT_DOUBLE_EQ(y.at(1), -2.5);

  Tensor s = forward_op(LayerSpec::simple(LayerKind::softmax), Tensor({1, 2}, {0, 0}), {});
  EXPECT_DOUBLE_EQ(s.at(0), 0.5);

  EXPECT_THROW(forward_op(LayerSpec::dense(4, 2), x, {}), ShapeError);
}

TEST(Layer, MaxPoolPicksMaximum) {
  Tensor x({1, 1, 2, 2}, {1, 4, 3, 2});
  Tensor y = forward_op(LayerSpec::max_pool(2, 2), x, {});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 4.0);
  Tensor z = forward_op(LayerSpec::avg_pool(2, 2), x, {});
  EXPECT_DOUBLE_EQ(z.item(), 2.5);
}
