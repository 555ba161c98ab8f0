#include "casam/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "casam/tensor/kernels.hpp"

namespace casam::tensor {

namespace {

namespace k = kernels;

void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void expect_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(a.shape()));
  }
}

template <typename Fn>
Tensor unary(const Tensor& a, Fn&& value_fn, std::function<void(Node&, Node*)> grad_fn) {
  std::vector<float> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value_fn(in[i]);
  Node* pa = a.node().get();
  return make_result(a.shape(), std::move(out), {a.node()},
                     [pa, grad_fn = std::move(grad_fn)](Node& self) { grad_fn(self, pa); });
}

#define CASAM_CONV_CALL(fn, ...)                                    \
  (k::active_backend() == k::Backend::reference                    \
       ? k::reference::fn(__VA_ARGS__)                              \
       : k::parallel::fn(__VA_ARGS__))

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Node *pa = a.node().get(), *pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [pa, pb](Node& self) {
    for (Node* p : {pa, pb}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Node *pa = a.node().get(), *pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Node *pa = a.node().get(), *pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  return unary(
      a, [factor](float v) { return v * factor; },
      [factor](Node& self, Node* p) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
      });
}

Tensor add_scalar(const Tensor& a, float value) {
  return unary(
      a, [value](float v) { return v + value; },
      [](Node& self, Node* p) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](float v) { return v * v; },
      [](Node& self, Node* p) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * p->value[i] * self.grad[i];
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](float v) { return std::exp(v); },
      [](Node& self, Node* p) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.value[i] * self.grad[i];
      });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](Node& self, Node* p) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (p->value[i] > 0.0f) g[i] += self.grad[i];
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](Node& self, Node* p) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float s = self.value[i];
          g[i] += self.grad[i] * s * (1.0f - s);
        }
      });
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() + 1 || !std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1)) {
    throw DimensionError("add_broadcast: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t inner = b.numel(), outer = a.dim(0);
  std::vector<float> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = a.data()[o * inner + i] + b.data()[i];
  Node *pa = a.node().get(), *pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a.node(), b.node()},
                     [pa, pb, inner, outer](Node& self) {
                       if (pa->requires_grad) {
                         auto& g = pa->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<float> out(a.data().begin(), a.data().end());
  Node* pa = a.node().get();
  return make_result(std::move(shape), std::move(out), {a.node()}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  Node* pa = a.node().get();
  return make_result({}, {static_cast<float>(acc)}, {a.node()}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor sum_per_sample(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("sum_per_sample needs a leading batch axis");
  const std::size_t B = a.dim(0), inner = a.numel() / std::max<std::size_t>(B, 1);
  std::vector<float> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += a.data()[b * inner + i];
    out[b] = static_cast<float>(acc);
  }
  Node* pa = a.node().get();
  return make_result({B}, std::move(out), {a.node()}, [pa, B, inner](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < inner; ++i) g[b * inner + i] += self.grad[b];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  expect_rank(x, 2, "linear");
  expect_rank(weight, 2, "linear weight");
  const std::size_t B = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " +
                         to_string(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias shape " + to_string(bias.shape()));
  }
  std::vector<float> out(B * out_dim);
  const auto xs = x.data(), ws = weight.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out_dim; ++o) {
      float acc = bias.defined() ? bias.data()[o] : 0.0f;
      for (std::size_t i = 0; i < in; ++i) acc += xs[b * in + i] * ws[o * in + i];
      out[b * out_dim + o] = acc;
    }
  Node *px = x.node().get(), *pw = weight.node().get();
  Node* pb = bias.defined() ? bias.node().get() : nullptr;
  std::vector<std::shared_ptr<Node>> parents{x.node(), weight.node()};
  if (pb) parents.push_back(bias.node());
  return make_result({B, out_dim}, std::move(out), std::move(parents),
                     [px, pw, pb, B, in, out_dim](Node& self) {
                       const auto& dy = self.grad;
                       if (px->requires_grad) {
                         auto& g = px->grad_buffer();
                         for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t o = 0; o < out_dim; ++o) {
                             const float d = dy[b * out_dim + o];
                             for (std::size_t i = 0; i < in; ++i) g[b * in + i] += d * pw->value[o * in + i];
                           }
                       }
                       if (pw->requires_grad) {
                         auto& g = pw->grad_buffer();
                         for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t o = 0; o < out_dim; ++o) {
                             const float d = dy[b * out_dim + o];
                             for (std::size_t i = 0; i < in; ++i) g[o * in + i] += d * px->value[b * in + i];
                           }
                       }
                       if (pb && pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t o = 0; o < out_dim; ++o) g[o] += dy[b * out_dim + o];
                       }
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  expect_rank(x, 4, "conv2d input");
  expect_rank(weight, 4, "conv2d weight");
  if (weight.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " vs weight " + to_string(weight.shape()));
  }
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square and odd, got " + to_string(weight.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  k::ConvGeometry g{x.dim(0), x.dim(1), weight.dim(0), x.dim(2), x.dim(3), weight.dim(2), stride, padding};
  if (g.in_h + 2 * padding < g.kernel || g.in_w + 2 * padding < g.kernel) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  if (bias.defined() && bias.shape() != Shape{g.out_channels}) {
    throw DimensionError("conv2d: bias shape " + to_string(bias.shape()));
  }
  std::vector<float> out(g.batch * g.out_channels * g.out_h() * g.out_w());
  std::span<const float> bias_span = bias.defined() ? bias.data() : std::span<const float>{};
  CASAM_CONV_CALL(conv2d_forward, g, x.data(), weight.data(), bias_span, out);

  Node *px = x.node().get(), *pw = weight.node().get();
  Node* pb = bias.defined() ? bias.node().get() : nullptr;
  std::vector<std::shared_ptr<Node>> parents{x.node(), weight.node()};
  if (pb) parents.push_back(bias.node());
  return make_result({g.batch, g.out_channels, g.out_h(), g.out_w()}, std::move(out), std::move(parents),
                     [px, pw, pb, g](Node& self) {
                       if (px->requires_grad) {
                         CASAM_CONV_CALL(conv2d_backward_input, g, self.grad, pw->value, px->grad_buffer());
                       }
                       const bool want_w = pw->requires_grad, want_b = pb && pb->requires_grad;
                       if (want_w || want_b) {
                         std::vector<float> scratch_w;
                         std::span<float> dw;
                         if (want_w) {
                           dw = pw->grad_buffer();
                         } else {
                           scratch_w.assign(pw->value.size(), 0.0f);
                           dw = scratch_w;
                         }
                         std::span<float> db = want_b ? std::span<float>(pb->grad_buffer()) : std::span<float>{};
                         CASAM_CONV_CALL(conv2d_backward_weight, g, px->value, self.grad, dw, db);
                       }
                     });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t padding) {
  expect_rank(x, 4, "conv_transpose2d input");
  expect_rank(weight, 4, "conv_transpose2d weight");
  if (weight.dim(0) != x.dim(1)) {
    throw DimensionError("conv_transpose2d: input channels " + std::to_string(x.dim(1)) +
                         " vs weight " + to_string(weight.shape()));
  }
  if (weight.dim(2) != weight.dim(3) || stride == 0) {
    throw DimensionError("conv_transpose2d: kernel must be square, stride positive");
  }
  const std::size_t kernel = weight.dim(2), cout = weight.dim(1);
  const long oh_signed = (static_cast<long>(x.dim(2)) - 1) * static_cast<long>(stride) -
                         2 * static_cast<long>(padding) + static_cast<long>(kernel);
  const long ow_signed = (static_cast<long>(x.dim(3)) - 1) * static_cast<long>(stride) -
                         2 * static_cast<long>(padding) + static_cast<long>(kernel);
  if (oh_signed <= 0 || ow_signed <= 0) throw DimensionError("conv_transpose2d: empty output");
  // The equivalent forward convolution maps the transposed output back onto x.
  k::ConvGeometry g{x.dim(0), cout, x.dim(1), static_cast<std::size_t>(oh_signed),
                    static_cast<std::size_t>(ow_signed), kernel, stride, padding};
  if (g.out_h() != x.dim(2) || g.out_w() != x.dim(3)) {
    throw DimensionError("conv_transpose2d: geometry does not invert cleanly");
  }
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw DimensionError("conv_transpose2d: bias shape " + to_string(bias.shape()));
  }
  const std::size_t plane = g.in_h * g.in_w;
  std::vector<float> out(g.batch * cout * plane, 0.0f);
  CASAM_CONV_CALL(conv2d_backward_input, g, x.data(), weight.data(), out);
  if (bias.defined()) {
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < cout; ++c) {
        float* p = out.data() + (b * cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bias.data()[c];
      }
  }
  Node *px = x.node().get(), *pw = weight.node().get();
  Node* pb = bias.defined() ? bias.node().get() : nullptr;
  std::vector<std::shared_ptr<Node>> parents{x.node(), weight.node()};
  if (pb) parents.push_back(bias.node());
  return make_result({g.batch, cout, g.in_h, g.in_w}, std::move(out), std::move(parents),
                     [px, pw, pb, g, cout, plane](Node& self) {
                       if (px->requires_grad) {
                         std::vector<float> tmp(px->value.size());
                         CASAM_CONV_CALL(conv2d_forward, g, self.grad, pw->value, std::span<const float>{}, tmp);
                         auto& dx = px->grad_buffer();
                         for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += tmp[i];
                       }
                       if (pw->requires_grad) {
                         CASAM_CONV_CALL(conv2d_backward_weight, g, self.grad, px->value, pw->grad_buffer(),
                                         std::span<float>{});
                       }
                       if (pb && pb->requires_grad) {
                         auto& db = pb->grad_buffer();
                         for (std::size_t b = 0; b < g.batch; ++b)
                           for (std::size_t c = 0; c < cout; ++c) {
                             const float* p = self.grad.data() + (b * cout + c) * plane;
                             double acc = 0.0;
                             for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                             db[c] += static_cast<float>(acc);
                           }
                       }
                     });
}

Tensor conv1d_channel(const Tensor& d, const Tensor& weight) {
  expect_rank(d, 2, "conv1d_channel input");
  if (weight.rank() != 3 || weight.dim(0) != 1 || weight.dim(1) != 1) {
    throw DimensionError("conv1d_channel: weight must be [1,1,k], got " + to_string(weight.shape()));
  }
  const std::size_t B = d.dim(0), C = d.dim(1), kernel = weight.dim(2);
  if (kernel % 2 == 0) throw DimensionError("conv1d_channel: kernel size must be odd");
  if (kernel > C) {
    throw DimensionError("conv1d_channel: kernel " + std::to_string(kernel) + " exceeds channels " +
                         std::to_string(C));
  }
  const long half = static_cast<long>(kernel / 2);
  std::vector<float> out(B * C, 0.0f);
  const auto ds = d.data(), ws = weight.data();
  for (std::size_t b = 0; b < B; ++b)
    for (long c = 0; c < static_cast<long>(C); ++c) {
      float acc = 0.0f;
      for (long t = 0; t < static_cast<long>(kernel); ++t) {
        const long src = c + t - half;
        if (src >= 0 && src < static_cast<long>(C)) acc += ws[t] * ds[b * C + src];
      }
      out[b * C + c] = acc;
    }
  Node *pd = d.node().get(), *pw = weight.node().get();
  return make_result({B, C}, std::move(out), {d.node(), weight.node()},
                     [pd, pw, B, C, kernel, half](Node& self) {
                       for (std::size_t b = 0; b < B; ++b)
                         for (long c = 0; c < static_cast<long>(C); ++c) {
                           const float g = self.grad[b * C + c];
                           for (long t = 0; t < static_cast<long>(kernel); ++t) {
                             const long src = c + t - half;
                             if (src < 0 || src >= static_cast<long>(C)) continue;
                             if (pd->requires_grad) pd->grad_buffer()[b * C + src] += g * pw->value[t];
                             if (pw->requires_grad) pw->grad_buffer()[t] += g * pd->value[b * C + src];
                           }
                         }
                     });
}

Tensor layer_norm_2d(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  expect_rank(x, 4, "layer_norm_2d");
  if (!(eps > 0.0f)) throw DimensionError("layer_norm_2d: eps must be positive");
  const std::size_t C = x.dim(1);
  if (gain.shape() != Shape{C} || bias.shape() != Shape{C}) {
    throw DimensionError("layer_norm_2d: gain/bias must be [" + std::to_string(C) + "]");
  }
  k::NormGeometry g{x.dim(0), C, x.dim(2) * x.dim(3)};
  std::vector<float> out(x.numel()), xhat(x.numel()), rstd(g.batch * g.positions);
  CASAM_CONV_CALL(layer_norm_forward, g, x.data(), gain.data(), bias.data(), eps, out, xhat, rstd);
  Node *px = x.node().get(), *pg = gain.node().get(), *pb = bias.node().get();
  return make_result(x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
                     [px, pg, pb, g, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       std::span<float> dx = px->requires_grad ? std::span<float>(px->grad_buffer()) : std::span<float>{};
                       std::span<float> dg = pg->requires_grad ? std::span<float>(pg->grad_buffer()) : std::span<float>{};
                       std::span<float> db = pb->requires_grad ? std::span<float>(pb->grad_buffer()) : std::span<float>{};
                       CASAM_CONV_CALL(layer_norm_backward, g, self.grad, xhat, rstd, pg->value, dx, dg, db);
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  expect_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  std::vector<float> out(B * C);
  for (std::size_t i = 0; i < B * C; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < P; ++p) acc += x.data()[i * P + p];
    out[i] = static_cast<float>(acc / static_cast<double>(P));
  }
  Node* px = x.node().get();
  return make_result({B, C}, std::move(out), {x.node()}, [px, B, C, P](Node& self) {
    auto& g = px->grad_buffer();
    const float inv = 1.0f / static_cast<float>(P);
    for (std::size_t i = 0; i < B * C; ++i)
      for (std::size_t p = 0; p < P; ++p) g[i * P + p] += self.grad[i] * inv;
  });
}

Tensor channel_scale(const Tensor& u, const Tensor& gate) {
  expect_rank(u, 4, "channel_scale");
  if (gate.shape() != Shape{u.dim(0), u.dim(1)}) {
    throw DimensionError("channel_scale: gate " + to_string(gate.shape()) + " vs " + to_string(u.shape()));
  }
  const std::size_t BC = u.dim(0) * u.dim(1), P = u.dim(2) * u.dim(3);
  std::vector<float> out(u.numel());
  for (std::size_t i = 0; i < BC; ++i)
    for (std::size_t p = 0; p < P; ++p) out[i * P + p] = u.data()[i * P + p] * gate.data()[i];
  Node *pu = u.node().get(), *pg = gate.node().get();
  return make_result(u.shape(), std::move(out), {u.node(), gate.node()}, [pu, pg, BC, P](Node& self) {
    if (pu->requires_grad) {
      auto& g = pu->grad_buffer();
      for (std::size_t i = 0; i < BC; ++i)
        for (std::size_t p = 0; p < P; ++p) g[i * P + p] += self.grad[i * P + p] * pg->value[i];
    }
    if (pg->requires_grad) {
      auto& g = pg->grad_buffer();
      for (std::size_t i = 0; i < BC; ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p < P; ++p) acc += self.grad[i * P + p] * pu->value[i * P + p];
        g[i] += static_cast<float>(acc);
      }
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  expect_rank(a, 4, "concat_channels");
  expect_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t B = a.dim(0), ca = a.dim(1), cb = b.dim(1), P = a.dim(2) * a.dim(3);
  std::vector<float> out(B * (ca + cb) * P);
  for (std::size_t s = 0; s < B; ++s) {
    std::copy_n(a.data().begin() + s * ca * P, ca * P, out.begin() + s * (ca + cb) * P);
    std::copy_n(b.data().begin() + s * cb * P, cb * P, out.begin() + (s * (ca + cb) + ca) * P);
  }
  Node *pa = a.node().get(), *pb = b.node().get();
  return make_result({B, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a.node(), b.node()},
                     [pa, pb, B, ca, cb, P](Node& self) {
                       for (std::size_t s = 0; s < B; ++s) {
                         if (pa->requires_grad) {
                           auto& g = pa->grad_buffer();
                           for (std::size_t i = 0; i < ca * P; ++i) g[s * ca * P + i] += self.grad[s * (ca + cb) * P + i];
                         }
                         if (pb->requires_grad) {
                           auto& g = pb->grad_buffer();
                           for (std::size_t i = 0; i < cb * P; ++i)
                             g[s * cb * P + i] += self.grad[(s * (ca + cb) + ca) * P + i];
                         }
                       }
                     });
}

Tensor softmax_pool(const Tensor& x, const Tensor& scores) {
  expect_rank(x, 4, "softmax_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (scores.shape() != Shape{B, P}) {
    throw DimensionError("softmax_pool: scores " + to_string(scores.shape()) + " vs " + to_string(x.shape()));
  }
  std::vector<float> alpha(B * P), out(B * C, 0.0f);
  for (std::size_t b = 0; b < B; ++b) {
    const float* s = scores.data().data() + b * P;
    const float mx = *std::max_element(s, s + P);
    double z = 0.0;
    for (std::size_t p = 0; p < P; ++p) z += std::exp(static_cast<double>(s[p] - mx));
    for (std::size_t p = 0; p < P; ++p) alpha[b * P + p] = static_cast<float>(std::exp(static_cast<double>(s[p] - mx)) / z);
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t p = 0; p < P; ++p) acc += alpha[b * P + p] * x.data()[(b * C + c) * P + p];
      out[b * C + c] = static_cast<float>(acc);
    }
  }
  Node *px = x.node().get(), *ps = scores.node().get();
  return make_result({B, C}, std::move(out), {x.node(), scores.node()},
                     [px, ps, B, C, P, alpha = std::move(alpha)](Node& self) {
                       for (std::size_t b = 0; b < B; ++b) {
                         if (px->requires_grad) {
                           auto& g = px->grad_buffer();
                           for (std::size_t c = 0; c < C; ++c)
                             for (std::size_t p = 0; p < P; ++p)
                               g[(b * C + c) * P + p] += alpha[b * P + p] * self.grad[b * C + c];
                         }
                         if (ps->requires_grad) {
                           std::vector<double> dalpha(P, 0.0);
                           for (std::size_t c = 0; c < C; ++c)
                             for (std::size_t p = 0; p < P; ++p)
                               dalpha[p] += static_cast<double>(self.grad[b * C + c]) * px->value[(b * C + c) * P + p];
                           double dot = 0.0;
                           for (std::size_t p = 0; p < P; ++p) dot += alpha[b * P + p] * dalpha[p];
                           auto& g = ps->grad_buffer();
                           for (std::size_t p = 0; p < P; ++p)
                             g[b * P + p] += static_cast<float>(alpha[b * P + p] * (dalpha[p] - dot));
                         }
                       }
                     });
}

Tensor channel_dot(const Tensor& x, const Tensor& query, float factor) {
  expect_rank(x, 4, "channel_dot");
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (query.shape() != Shape{C}) {
    throw DimensionError("channel_dot: query " + to_string(query.shape()) + " vs channels " + std::to_string(C));
  }
  std::vector<float> out(B * P, 0.0f);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) out[b * P + p] += factor * query.data()[c] * x.data()[(b * C + c) * P + p];
  Node *px = x.node().get(), *pq = query.node().get();
  return make_result({B, P}, std::move(out), {x.node(), query.node()}, [px, pq, B, C, P, factor](Node& self) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const float g = self.grad[b * P + p] * factor;
          if (px->requires_grad) px->grad_buffer()[(b * C + c) * P + p] += g * pq->value[c];
          if (pq->requires_grad) pq->grad_buffer()[c] += g * px->value[(b * C + c) * P + p];
        }
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  expect_same_shape(logits, target, "bce_with_logits");
  const std::size_t n = logits.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i], y = target.data()[i];
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Node* pz = logits.node().get();
  auto py = target.node();
  return make_result({}, {static_cast<float>(acc / static_cast<double>(n))}, {logits.node()},
                     [pz, py, n](Node& self) {
                       auto& g = pz->grad_buffer();
                       const float s = self.grad[0] / static_cast<float>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         const float p = 1.0f / (1.0f + std::exp(-pz->value[i]));
                         g[i] += s * (p - py->value[i]);
                       }
                     });
}

Tensor soft_dice_loss(const Tensor& logits, const Tensor& target) {
  expect_same_shape(logits, target, "soft_dice_loss");
  if (logits.rank() < 1) throw DimensionError("soft_dice_loss needs a batch axis");
  const std::size_t B = logits.dim(0), inner = logits.numel() / B;
  std::vector<float> prob(logits.numel());
  for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = 1.0f / (1.0f + std::exp(-logits.data()[i]));
  std::vector<double> inter(B, 0.0), total(B, 0.0);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < inner; ++i) {
      const double p = prob[b * inner + i], y = target.data()[b * inner + i];
      inter[b] += p * y;
      total[b] += p + y;
    }
    loss += 1.0 - (2.0 * inter[b] + 1.0) / (total[b] + 1.0);
  }
  Node* pz = logits.node().get();
  auto py = target.node();
  return make_result({}, {static_cast<float>(loss / static_cast<double>(B))}, {logits.node()},
                     [pz, py, B, inner, prob = std::move(prob), inter = std::move(inter),
                      total = std::move(total)](Node& self) {
                       auto& g = pz->grad_buffer();
                       const double s = self.grad[0] / static_cast<double>(B);
                       for (std::size_t b = 0; b < B; ++b) {
                         const double den = total[b] + 1.0, num = 2.0 * inter[b] + 1.0;
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t idx = b * inner + i;
                           const double dldp = -(2.0 * py->value[idx] * den - num) / (den * den);
                           g[idx] += static_cast<float>(s * dldp * prob[idx] * (1.0 - prob[idx]));
                         }
                       }
                     });
}

Tensor mse(const Tensor& a, const Tensor& target) {
  expect_same_shape(a, target, "mse");
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.data()[i] - target.data()[i];
    acc += d * d;
  }
  Node* pa = a.node().get();
  auto pt = target.node();
  return make_result({}, {static_cast<float>(acc / static_cast<double>(n))}, {a.node()}, [pa, pt, n](Node& self) {
    auto& g = pa->grad_buffer();
    const float s = 2.0f * self.grad[0] / static_cast<float>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += s * (pa->value[i] - pt->value[i]);
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  expect_rank(logits, 2, "cross_entropy");
  const std::size_t B = logits.dim(0), N = logits.dim(1);
  if (labels.size() != B) throw DimensionError("cross_entropy: label count mismatch");
  std::vector<float> prob(B * N);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= N) throw DimensionError("cross_entropy: label out of range");
    const float* z = logits.data().data() + b * N;
    const float mx = *std::max_element(z, z + N);
    double norm = 0.0;
    for (std::size_t i = 0; i < N; ++i) norm += std::exp(static_cast<double>(z[i] - mx));
    for (std::size_t i = 0; i < N; ++i) prob[b * N + i] = static_cast<float>(std::exp(static_cast<double>(z[i] - mx)) / norm);
    loss += -(static_cast<double>(z[labels[b]] - mx) - std::log(norm));
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Node* pz = logits.node().get();
  return make_result({}, {static_cast<float>(loss / static_cast<double>(B))}, {logits.node()},
                     [pz, B, N, prob = std::move(prob), lab = std::move(lab)](Node& self) {
                       auto& g = pz->grad_buffer();
                       const float s = self.grad[0] / static_cast<float>(B);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t i = 0; i < N; ++i)
                           g[b * N + i] += s * (prob[b * N + i] - (i == lab[b] ? 1.0f : 0.0f));
                     });
}

Tensor cosine_distance(const Tensor& key, std::span<const float> query) {
  if (key.numel() != query.size()) throw DimensionError("cosine_distance: length mismatch");
  const std::size_t n = query.size();
  double kq = 0.0, kk = 0.0, qq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    kq += static_cast<double>(key.data()[i]) * query[i];
    kk += static_cast<double>(key.data()[i]) * key.data()[i];
    qq += static_cast<double>(query[i]) * query[i];
  }
  constexpr double kTiny = 1e-12;
  const double nk = std::sqrt(std::max(kk, kTiny)), nq = std::sqrt(std::max(qq, kTiny));
  const double cos = kq / (nk * nq);
  std::vector<float> q(query.begin(), query.end());
  Node* pk = key.node().get();
  return make_result({}, {static_cast<float>(1.0 - cos)}, {key.node()},
                     [pk, q = std::move(q), nk, nq, cos](Node& self) {
                       auto& g = pk->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double dcos = q[i] / (nk * nq) - cos * pk->value[i] / (nk * nk);
                         g[i] += static_cast<float>(-self.grad[0] * dcos);
                       }
                     });
}

Tensor weighted_sq_diff(const Tensor& param, std::span<const float> reference,
                        std::span<const float> fisher) {
  if (reference.size() != param.numel() || fisher.size() != param.numel()) {
    throw DimensionError("weighted_sq_diff: length mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double d = param.data()[i] - reference[i];
    acc += fisher[i] * d * d;
  }
  std::vector<float> ref(reference.begin(), reference.end()), fis(fisher.begin(), fisher.end());
  Node* pp = param.node().get();
  return make_result({}, {static_cast<float>(acc)}, {param.node()},
                     [pp, ref = std::move(ref), fis = std::move(fis)](Node& self) {
                       auto& g = pp->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i)
                         g[i] += self.grad[0] * 2.0f * fis[i] * (pp->value[i] - ref[i]);
                     });
}

}  // namespace casam::tensor
