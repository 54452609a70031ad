#include "immunity/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "immunity/error.hpp"

namespace immunity::ops {

namespace {

using detail::GradSlots;
using Grad = std::vector<double>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_dim(const char* op, const Tensor& t, std::size_t dim) {
  if (t.dim() != dim) {
    throw ShapeError(std::string(op) + ": expected a " + std::to_string(dim) + "-D tensor, got " +
                     shape_to_string(t.shape()));
  }
}

std::vector<double> copy(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto out = copy(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::from_op(a.shape(), std::move(out), "add", {a, b}, [](const Grad& g, GradSlots& s) {
    for (auto* slot : s) {
      if (!slot) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto out = copy(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor::from_op(a.shape(), std::move(out), "sub", {a, b}, [](const Grad& g, GradSlots& s) {
    if (s[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i];
    if (s[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*s[1])[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto out = copy(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor::from_op(a.shape(), std::move(out), "mul", {a, b}, [a, b](const Grad& g, GradSlots& s) {
    auto ad = a.data();
    auto bd = b.data();
    if (s[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i] * bd[i];
    if (s[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*s[1])[i] += g[i] * ad[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto out = copy(a);
  for (double& v : out) v *= factor;
  return Tensor::from_op(a.shape(), std::move(out), "scale", {a}, [factor](const Grad& g, GradSlots& s) {
    for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  auto out = copy(a);
  for (double& v : out) v += value;
  return Tensor::from_op(a.shape(), std::move(out), "add_scalar", {a}, [](const Grad& g, GradSlots& s) {
    for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::from_op({1}, {total}, "sum", {a}, [](const Grad& g, GradSlots& s) {
    for (double& v : *s[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor log(const Tensor& a) {
  auto out = copy(a);
  for (double& v : out) v = std::log(v);
  return Tensor::from_op(a.shape(), std::move(out), "log", {a}, [a](const Grad& g, GradSlots& s) {
    auto ad = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i] / ad[i];
  });
}

Tensor relu(const Tensor& a) {
  auto out = copy(a);
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::from_op(a.shape(), std::move(out), "relu", {a}, [a](const Grad& g, GradSlots& s) {
    auto ad = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ad[i] > 0.0) (*s[0])[i] += g[i];
    }
  });
}

Tensor softmax(const Tensor& logits) {
  require_dim("softmax", logits, 2);
  const std::size_t rows = logits.size(0);
  const std::size_t cols = logits.size(1);
  auto in = logits.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    const double m = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      z += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  auto probs = out;
  return Tensor::from_op(logits.shape(), std::move(out), "softmax", {logits},
                         [probs = std::move(probs), rows, cols](const Grad& g, GradSlots& s) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* y = probs.data() + r * cols;
                             const double* gy = g.data() + r * cols;
                             double dot = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                             double* gx = s[0]->data() + r * cols;
                             for (std::size_t c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
                           }
                         });
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w, out_c, k, stride, pad, out_h, out_w;
};

std::size_t out_extent(const char* op, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " exceeds padded input extent " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Unfolds one sample into a (in_c*k*k, out_h*out_w) matrix; out-of-bounds taps stay zero.
void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t P = g.out_h * g.out_w;
  std::fill_n(col, g.in_c * g.k * g.k * P, 0.0);
  for (std::size_t ic = 0; ic < g.in_c; ++ic)
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        double* row = col + ((ic * g.k + kh) * g.k + kw) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          const double* in = x + (ic * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.in_w)) row[oh * g.out_w + ow] = in[iw];
          }
        }
      }
}

// Adjoint of im2col: scatters column gradients back onto the input grid.
void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  const std::size_t P = g.out_h * g.out_w;
  for (std::size_t ic = 0; ic < g.in_c; ++ic)
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const double* row = col + ((ic * g.k + kh) * g.k + kw) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          double* in = x + (ic * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.in_w)) in[iw] += row[oh * g.out_w + ow];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_dim("conv2d", input, 4);
  require_dim("conv2d", weight, 4);
  if (weight.size(1) != input.size(1) || weight.size(2) != weight.size(3)) {
    throw ShapeError("conv2d: input " + shape_to_string(input.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()));
  }
  if (bias.dim() != 1 || bias.size(0) != weight.size(0)) {
    throw ShapeError("conv2d: bias " + shape_to_string(bias.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()));
  }
  ConvGeometry g{};
  g.batch = input.size(0);
  g.in_c = input.size(1);
  g.in_h = input.size(2);
  g.in_w = input.size(3);
  g.out_c = weight.size(0);
  g.k = weight.size(2);
  g.stride = stride;
  g.pad = padding;
  g.out_h = out_extent("conv2d", g.in_h, g.k, stride, padding);
  g.out_w = out_extent("conv2d", g.in_w, g.k, stride, padding);

  const std::size_t P = g.out_h * g.out_w;
  const std::size_t R = g.in_c * g.k * g.k;
  const std::size_t in_size = g.in_c * g.in_h * g.in_w;
  std::vector<double> out(g.batch * g.out_c * P);
  std::vector<double> col(R * P);
  auto x = input.data();
  auto w = weight.data();
  auto bd = bias.data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x.data() + b * in_size, g, col.data());
    for (std::size_t oc = 0; oc < g.out_c; ++oc) {
      double* o = out.data() + (b * g.out_c + oc) * P;
      std::fill_n(o, P, bd[oc]);
      const double* wr = w.data() + oc * R;
      for (std::size_t r = 0; r < R; ++r) {
        const double wv = wr[r];
        const double* c = col.data() + r * P;
        for (std::size_t p = 0; p < P; ++p) o[p] += wv * c[p];
      }
    }
  }

  return Tensor::from_op({g.batch, g.out_c, g.out_h, g.out_w}, std::move(out), "conv2d", {input, weight, bias},
                         [input, weight, g, P, R, in_size](const Grad& gout, GradSlots& slots) {
                           auto x = input.data();
                           auto w = weight.data();
                           Grad* gx = slots[0];
                           Grad* gw = slots[1];
                           Grad* gb = slots[2];
                           if (gb) {
                             for (std::size_t b = 0; b < g.batch; ++b)
                               for (std::size_t oc = 0; oc < g.out_c; ++oc) {
                                 const double* go = gout.data() + (b * g.out_c + oc) * P;
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < P; ++i) acc += go[i];
                                 (*gb)[oc] += acc;
                               }
                           }
                           if (!gx && !gw) return;
                           std::vector<double> col(R * P), gcol(gx ? R * P : 0);
                           for (std::size_t b = 0; b < g.batch; ++b) {
                             const double* go_b = gout.data() + b * g.out_c * P;
                             if (gw) {
                               im2col(x.data() + b * in_size, g, col.data());
                               for (std::size_t oc = 0; oc < g.out_c; ++oc) {
                                 const double* go = go_b + oc * P;
                                 double* gwr = gw->data() + oc * R;
                                 for (std::size_t r = 0; r < R; ++r) {
                                   const double* c = col.data() + r * P;
                                   double acc = 0.0;
                                   for (std::size_t p = 0; p < P; ++p) acc += go[p] * c[p];
                                   gwr[r] += acc;
                                 }
                               }
                             }
                             if (gx) {
                               std::fill(gcol.begin(), gcol.end(), 0.0);
                               for (std::size_t oc = 0; oc < g.out_c; ++oc) {
                                 const double* go = go_b + oc * P;
                                 const double* wr = w.data() + oc * R;
                                 for (std::size_t r = 0; r < R; ++r) {
                                   const double wv = wr[r];
                                   double* gc = gcol.data() + r * P;
                                   for (std::size_t p = 0; p < P; ++p) gc[p] += wv * go[p];
                                 }
                               }
                               col2im_add(gcol.data(), g, gx->data() + b * in_size);
                             }
                           }
                         });
}

namespace {

Tensor pool2d(const char* op, const Tensor& input, std::size_t kernel, std::size_t stride, bool is_max) {
  require_dim(op, input, 4);
  if (kernel == 0) throw ShapeError(std::string(op) + ": kernel must be positive");
  const std::size_t B = input.size(0), C = input.size(1), H = input.size(2), W = input.size(3);
  const std::size_t oh_n = out_extent(op, H, kernel, stride, 0);
  const std::size_t ow_n = out_extent(op, W, kernel, stride, 0);
  auto x = input.data();
  std::vector<double> out(B * C * oh_n * ow_n);
  std::vector<std::size_t> argmax(is_max ? out.size() : 0);
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* plane = x.data() + bc * H * W;
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
      for (std::size_t ow = 0; ow < ow_n; ++ow) {
        const std::size_t o = (bc * oh_n + oh) * ow_n + ow;
        if (is_max) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          for (std::size_t kh = 0; kh < kernel; ++kh)
            for (std::size_t kw = 0; kw < kernel; ++kw) {
              const std::size_t i = (oh * stride + kh) * W + ow * stride + kw;
              if (plane[i] > best) {
                best = plane[i];
                best_i = i;
              }
            }
          out[o] = best;
          argmax[o] = bc * H * W + best_i;
        } else {
          double acc = 0.0;
          for (std::size_t kh = 0; kh < kernel; ++kh)
            for (std::size_t kw = 0; kw < kernel; ++kw) acc += plane[(oh * stride + kh) * W + ow * stride + kw];
          out[o] = acc * inv;
        }
      }
    }
  }
  Shape shape{B, C, oh_n, ow_n};
  if (is_max) {
    return Tensor::from_op(shape, std::move(out), op, {input},
                           [argmax = std::move(argmax)](const Grad& g, GradSlots& s) {
                             for (std::size_t o = 0; o < g.size(); ++o) (*s[0])[argmax[o]] += g[o];
                           });
  }
  return Tensor::from_op(shape, std::move(out), op, {input},
                         [=](const Grad& g, GradSlots& s) {
                           for (std::size_t bc = 0; bc < B * C; ++bc)
                             for (std::size_t oh = 0; oh < oh_n; ++oh)
                               for (std::size_t ow = 0; ow < ow_n; ++ow) {
                                 const double v = g[(bc * oh_n + oh) * ow_n + ow] * inv;
                                 for (std::size_t kh = 0; kh < kernel; ++kh)
                                   for (std::size_t kw = 0; kw < kernel; ++kw)
                                     (*s[0])[bc * H * W + (oh * stride + kh) * W + ow * stride + kw] += v;
                               }
                         });
}

}  // namespace

Tensor maxpool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
  return pool2d("maxpool2d", input, kernel, stride, true);
}

Tensor avgpool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
  return pool2d("avgpool2d", input, kernel, stride, false);
}

Tensor global_avg_pool(const Tensor& input) {
  require_dim("global_avg_pool", input, 4);
  const std::size_t B = input.size(0), C = input.size(1), plane = input.size(2) * input.size(3);
  auto x = input.data();
  std::vector<double> out(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += x[bc * plane + i];
    out[bc] = acc / static_cast<double>(plane);
  }
  return Tensor::from_op({B, C}, std::move(out), "global_avg_pool", {input}, [plane](const Grad& g, GradSlots& s) {
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t bc = 0; bc < g.size(); ++bc)
      for (std::size_t i = 0; i < plane; ++i) (*s[0])[bc * plane + i] += g[bc] * inv;
  });
}

Tensor flatten(const Tensor& input) {
  if (input.dim() < 2) throw ShapeError("flatten: expected at least 2-D input, got " + shape_to_string(input.shape()));
  return input.reshape({input.size(0), input.numel() / input.size(0)});
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_dim("linear", input, 2);
  require_dim("linear", weight, 2);
  if (weight.size(1) != input.size(1) || bias.dim() != 1 || bias.size(0) != weight.size(0)) {
    throw ShapeError("linear: input " + shape_to_string(input.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()) + " and bias " + shape_to_string(bias.shape()));
  }
  const std::size_t B = input.size(0), in = input.size(1), out_n = weight.size(0);
  auto x = input.data();
  auto w = weight.data();
  auto bd = bias.data();
  std::vector<double> out(B * out_n);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out_n; ++o) {
      double acc = bd[o];
      const double* wr = w.data() + o * in;
      const double* xr = x.data() + b * in;
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      out[b * out_n + o] = acc;
    }
  return Tensor::from_op({B, out_n}, std::move(out), "linear", {input, weight, bias},
                         [input, weight, B, in, out_n](const Grad& g, GradSlots& s) {
                           auto x = input.data();
                           auto w = weight.data();
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t o = 0; o < out_n; ++o) {
                               const double go = g[b * out_n + o];
                               if (s[0]) {
                                 double* gx = s[0]->data() + b * in;
                                 const double* wr = w.data() + o * in;
                                 for (std::size_t i = 0; i < in; ++i) gx[i] += go * wr[i];
                               }
                               if (s[1]) {
                                 double* gw = s[1]->data() + o * in;
                                 const double* xr = x.data() + b * in;
                                 for (std::size_t i = 0; i < in; ++i) gw[i] += go * xr[i];
                               }
                               if (s[2]) (*s[2])[o] += go;
                             }
                         });
}

Tensor channel_normalize(const Tensor& input, std::span<const double> mean_c, std::span<const double> std_c) {
  require_dim("channel_normalize", input, 4);
  const std::size_t B = input.size(0), C = input.size(1), plane = input.size(2) * input.size(3);
  if (mean_c.size() != C || std_c.size() != C) {
    throw ShapeError("channel_normalize: " + std::to_string(C) + " channels but " + std::to_string(mean_c.size()) +
                     " means and " + std::to_string(std_c.size()) + " deviations");
  }
  std::vector<double> inv(C), mu(mean_c.begin(), mean_c.end());
  for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std_c[c];
  auto out = copy(input);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data() + (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mu[c]) * inv[c];
    }
  return Tensor::from_op(input.shape(), std::move(out), "channel_normalize", {input},
                         [inv, B, C, plane](const Grad& g, GradSlots& s) {
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t c = 0; c < C; ++c) {
                               const std::size_t base = (b * C + c) * plane;
                               for (std::size_t i = 0; i < plane; ++i) (*s[0])[base + i] += g[base + i] * inv[c];
                             }
                         });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double t;  // weight of i1
};

std::vector<Tap> resize_taps(std::size_t src, std::size_t dst) {
  std::vector<Tap> taps(dst);
  for (std::size_t d = 0; d < dst; ++d) {
    if (src == 1 || dst == 1) {
      taps[d] = {0, 0, 0.0};
      continue;
    }
    const double pos = static_cast<double>(d) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
    std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 >= src - 1) i0 = src - 1;
    const double t = pos - static_cast<double>(i0);
    taps[d] = {i0, std::min(i0 + 1, src - 1), t};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& grid, std::size_t target_h, std::size_t target_w) {
  if (grid.dim() != 2 && grid.dim() != 3) {
    throw ShapeError("bilinear_resize: expected (h, w) or (B, h, w), got " + shape_to_string(grid.shape()));
  }
  if (target_h == 0 || target_w == 0) {
    throw ShapeError("bilinear_resize: target dimensions must be positive, got " + std::to_string(target_h) + "x" +
                     std::to_string(target_w));
  }
  const bool batched = grid.dim() == 3;
  const std::size_t B = batched ? grid.size(0) : 1;
  const std::size_t h = grid.size(batched ? 1 : 0), w = grid.size(batched ? 2 : 1);
  auto rows = resize_taps(h, target_h);
  auto cols = resize_taps(w, target_w);
  auto x = grid.data();
  std::vector<double> out(B * target_h * target_w);
  for (std::size_t b = 0; b < B; ++b) {
    const double* src = x.data() + b * h * w;
    double* dst = out.data() + b * target_h * target_w;
    for (std::size_t r = 0; r < target_h; ++r) {
      const Tap& ry = rows[r];
      for (std::size_t c = 0; c < target_w; ++c) {
        const Tap& cx = cols[c];
        const double top = (1.0 - cx.t) * src[ry.i0 * w + cx.i0] + cx.t * src[ry.i0 * w + cx.i1];
        const double bot = (1.0 - cx.t) * src[ry.i1 * w + cx.i0] + cx.t * src[ry.i1 * w + cx.i1];
        dst[r * target_w + c] = (1.0 - ry.t) * top + ry.t * bot;
      }
    }
  }
  Shape shape = batched ? Shape{B, target_h, target_w} : Shape{target_h, target_w};
  return Tensor::from_op(shape, std::move(out), "bilinear_resize", {grid},
                         [rows, cols, B, h, w, target_h, target_w](const Grad& g, GradSlots& s) {
                           for (std::size_t b = 0; b < B; ++b) {
                             double* src = s[0]->data() + b * h * w;
                             const double* go = g.data() + b * target_h * target_w;
                             for (std::size_t r = 0; r < target_h; ++r) {
                               const Tap& ry = rows[r];
                               for (std::size_t c = 0; c < target_w; ++c) {
                                 const Tap& cx = cols[c];
                                 const double v = go[r * target_w + c];
                                 src[ry.i0 * w + cx.i0] += v * (1.0 - ry.t) * (1.0 - cx.t);
                                 src[ry.i0 * w + cx.i1] += v * (1.0 - ry.t) * cx.t;
                                 src[ry.i1 * w + cx.i0] += v * ry.t * (1.0 - cx.t);
                                 src[ry.i1 * w + cx.i1] += v * ry.t * cx.t;
                               }
                             }
                           }
                         });
}

Tensor select_columns(const Tensor& x, std::span<const std::size_t> index) {
  require_dim("select_columns", x, 2);
  const std::size_t B = x.size(0), M = x.size(1);
  if (index.size() != B) {
    throw ShapeError("select_columns: " + std::to_string(index.size()) + " indices for " + std::to_string(B) + " rows");
  }
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (index[b] >= M) throw ShapeError("select_columns: index " + std::to_string(index[b]) + " out of range");
    out[b] = x.data()[b * M + index[b]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tensor::from_op({B}, std::move(out), "select_columns", {x}, [idx, M](const Grad& g, GradSlots& s) {
    for (std::size_t b = 0; b < g.size(); ++b) (*s[0])[b * M + idx[b]] += g[b];
  });
}

Tensor permute_columns(const Tensor& x, std::span<const std::size_t> perm) {
  require_dim("permute_columns", x, 2);
  const std::size_t B = x.size(0), N = x.size(1);
  if (perm.size() != N) {
    throw ShapeError("permute_columns: permutation of length " + std::to_string(perm.size()) + " for " +
                     std::to_string(N) + " columns");
  }
  std::vector<std::size_t> p(perm.begin(), perm.end());
  std::vector<double> out(B * N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < N; ++k) out[b * N + k] = x.data()[b * N + p[k]];
  return Tensor::from_op(x.shape(), std::move(out), "permute_columns", {x}, [p, N](const Grad& g, GradSlots& s) {
    const std::size_t B = g.size() / N;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < N; ++k) (*s[0])[b * N + p[k]] += g[b * N + k];
  });
}

Tensor mixture(const Tensor& weights, const std::vector<Tensor>& probs) {
  require_dim("mixture", weights, 2);
  const std::size_t B = weights.size(0), N = weights.size(1);
  if (probs.size() != N) {
    throw ShapeError("mixture: " + std::to_string(N) + " gate weights but " + std::to_string(probs.size()) +
                     " expert outputs");
  }
  require_dim("mixture", probs[0], 2);
  const std::size_t M = probs[0].size(1);
  for (const Tensor& p : probs) {
    if (p.shape() != Shape{B, M}) {
      throw ShapeError("mixture: expert output " + shape_to_string(p.shape()) + " vs expected " +
                       shape_to_string({B, M}));
    }
  }
  std::vector<double> out(B * M, 0.0);
  auto wd = weights.data();
  for (std::size_t i = 0; i < N; ++i) {
    auto pd = probs[i].data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t m = 0; m < M; ++m) out[b * M + m] += wd[b * N + i] * pd[b * M + m];
  }
  std::vector<Tensor> parents{weights};
  parents.insert(parents.end(), probs.begin(), probs.end());
  return Tensor::from_op({B, M}, std::move(out), "mixture", parents,
                         [weights, probs, B, N, M](const Grad& g, GradSlots& s) {
                           auto wd = weights.data();
                           for (std::size_t i = 0; i < N; ++i) {
                             auto pd = probs[i].data();
                             for (std::size_t b = 0; b < B; ++b) {
                               double dw = 0.0;
                               for (std::size_t m = 0; m < M; ++m) {
                                 dw += g[b * M + m] * pd[b * M + m];
                                 if (s[i + 1]) (*s[i + 1])[b * M + m] += g[b * M + m] * wd[b * N + i];
                               }
                               if (s[0]) (*s[0])[b * N + i] += dw;
                             }
                           }
                         });
}

Tensor nll(const Tensor& probs, std::span<const std::size_t> labels, double floor) {
  require_dim("nll", probs, 2);
  const std::size_t B = probs.size(0), M = probs.size(1);
  if (labels.size() != B) {
    throw ShapeError("nll: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) + " rows");
  }
  std::vector<double> out(B);
  std::vector<std::size_t> idx(labels.begin(), labels.end());
  for (std::size_t b = 0; b < B; ++b) {
    if (idx[b] >= M) {
      throw ShapeError("nll: label " + std::to_string(idx[b]) + " out of range for " + std::to_string(M) +
                       " classes");
    }
    out[b] = -std::log(std::max(probs.data()[b * M + idx[b]], floor));
  }
  return Tensor::from_op({B}, std::move(out), "nll", {probs}, [probs, idx, M, floor](const Grad& g, GradSlots& s) {
    auto pd = probs.data();
    for (std::size_t b = 0; b < g.size(); ++b) {
      const double p = pd[b * M + idx[b]];
      if (p > floor) (*s[0])[b * M + idx[b]] -= g[b] / p;
    }
  });
}

}  // namespace immunity::ops
