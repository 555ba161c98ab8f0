#include <cmath>
#include <vector>

#include "casam/tensor/kernels.hpp"

namespace casam::tensor::kernels::reference {

namespace {
// Signed input coordinate for output index `o` and kernel tap `k`.
inline long input_coord(std::size_t o, std::size_t k, const ConvGeometry& g) {
  return static_cast<long>(o * g.stride + k) - static_cast<long>(g.padding);
}
}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                    std::span<const float> bias, std::span<float> y) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          float acc = bias.empty() ? 0.0f : bias[co];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ki = 0; ki < g.kernel; ++ki)
              for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const long r = input_coord(i, ki, g), c = input_coord(j, kj, g);
                if (r < 0 || c < 0 || r >= static_cast<long>(g.in_h) ||
                    c >= static_cast<long>(g.in_w))
                  continue;
                acc += x[((b * g.in_channels + ci) * g.in_h + r) * g.in_w + c] *
                       w[((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj];
              }
          y[((b * g.out_channels + co) * oh + i) * ow + j] = acc;
        }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const float> dy,
                           std::span<const float> w, std::span<float> dx) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const float d = dy[((b * g.out_channels + co) * oh + i) * ow + j];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ki = 0; ki < g.kernel; ++ki)
              for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const long r = input_coord(i, ki, g), c = input_coord(j, kj, g);
                if (r < 0 || c < 0 || r >= static_cast<long>(g.in_h) ||
                    c >= static_cast<long>(g.in_w))
                  continue;
                dx[((b * g.in_channels + ci) * g.in_h + r) * g.in_w + c] +=
                    d * w[((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj];
              }
        }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,
                            std::span<const float> dy, std::span<float> dw,
                            std::span<float> dbias) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const float d = dy[((b * g.out_channels + co) * oh + i) * ow + j];
          if (!dbias.empty()) dbias[co] += d;
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ki = 0; ki < g.kernel; ++ki)
              for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const long r = input_coord(i, ki, g), c = input_coord(j, kj, g);
                if (r < 0 || c < 0 || r >= static_cast<long>(g.in_h) ||
                    c >= static_cast<long>(g.in_w))
                  continue;
                dw[((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj] +=
                    d * x[((b * g.in_channels + ci) * g.in_h + r) * g.in_w + c];
              }
        }
}

void layer_norm_forward(const NormGeometry& g, std::span<const float> x,
                        std::span<const float> gain, std::span<const float> bias, float eps,
                        std::span<float> y, std::span<float> xhat, std::span<float> rstd) {
  const std::size_t C = g.channels, P = g.positions;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      double mean = 0.0;
      for (std::size_t c = 0; c < C; ++c) mean += x[(b * C + c) * P + p];
      mean /= static_cast<double>(C);
      double var = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double d = x[(b * C + c) * P + p] - mean;
        var += d * d;
      }
      var /= static_cast<double>(C);
      const double r = 1.0 / std::sqrt(var + eps);
      rstd[b * P + p] = static_cast<float>(r);
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t idx = (b * C + c) * P + p;
        const float h = static_cast<float>((x[idx] - mean) * r);
        xhat[idx] = h;
        y[idx] = gain[c] * h + bias[c];
      }
    }
}

void layer_norm_backward(const NormGeometry& g, std::span<const float> dy,
                         std::span<const float> xhat, std::span<const float> rstd,
                         std::span<const float> gain, std::span<float> dx,
                         std::span<float> dgain, std::span<float> dbias) {
  const std::size_t C = g.channels, P = g.positions;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t idx = (b * C + c) * P + p;
        const double dh = static_cast<double>(dy[idx]) * gain[c];
        mean_dh += dh;
        mean_dh_h += dh * xhat[idx];
        if (!dgain.empty()) dgain[c] += dy[idx] * xhat[idx];
        if (!dbias.empty()) dbias[c] += dy[idx];
      }
      mean_dh /= static_cast<double>(C);
      mean_dh_h /= static_cast<double>(C);
      if (dx.empty()) continue;
      const float r = rstd[b * P + p];
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t idx = (b * C + c) * P + p;
        const double dh = static_cast<double>(dy[idx]) * gain[c];
        dx[idx] += static_cast<float>(r * (dh - mean_dh - xhat[idx] * mean_dh_h));
      }
    }
}

}  // namespace casam::tensor::kernels::reference
