#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "casam/tensor/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Each sample is processed by exactly one thread and cross-sample reductions
// run serially in batch order, so results do not depend on the thread count.

namespace casam::tensor::kernels {

namespace {
thread_local Backend t_backend = Backend::parallel;
}

Backend active_backend() { return t_backend; }
void set_backend(Backend backend) { t_backend = backend; }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace parallel {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// col has shape [Cin*k*k, oh*ow] for one sample.
void im2col(const ConvGeometry& g, const float* x, float* col) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const long H = static_cast<long>(g.in_h), W = static_cast<long>(g.in_w);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        float* row = col + ((ci * k + ki) * k + kj) * oh * ow;
        const float* plane = x + ci * g.in_h * g.in_w;
        for (std::size_t i = 0; i < oh; ++i) {
          const long r = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.padding);
          float* out = row + i * ow;
          if (r < 0 || r >= H) {
            for (std::size_t j = 0; j < ow; ++j) out[j] = 0.0f;
            continue;
          }
          for (std::size_t j = 0; j < ow; ++j) {
            const long c = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.padding);
            out[j] = (c < 0 || c >= W) ? 0.0f : plane[r * W + c];
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const float* col, float* x) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const long H = static_cast<long>(g.in_h), W = static_cast<long>(g.in_w);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const float* row = col + ((ci * k + ki) * k + kj) * oh * ow;
        float* plane = x + ci * g.in_h * g.in_w;
        for (std::size_t i = 0; i < oh; ++i) {
          const long r = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.padding);
          if (r < 0 || r >= H) continue;
          const float* in = row + i * ow;
          for (std::size_t j = 0; j < ow; ++j) {
            const long c = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.padding);
            if (c >= 0 && c < W) plane[r * W + c] += in[j];
          }
        }
      }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                    std::span<const float> bias, std::span<float> y) {
  const auto B = static_cast<long>(g.batch);
  const std::size_t K = g.patch(), HW = g.out_h() * g.out_w();
  const std::size_t in_stride = g.in_channels * g.in_h * g.in_w, out_stride = g.out_channels * HW;
  ConstMatMap weight(w.data(), static_cast<long>(g.out_channels), static_cast<long>(K));
#pragma omp parallel
  {
    std::vector<float> col(K * HW);
#pragma omp for schedule(static)
    for (long b = 0; b < B; ++b) {
      im2col(g, x.data() + b * in_stride, col.data());
      MatMap out(y.data() + b * out_stride, static_cast<long>(g.out_channels),
                 static_cast<long>(HW));
      out.noalias() = weight * ConstMatMap(col.data(), static_cast<long>(K), static_cast<long>(HW));
      if (!bias.empty()) {
        for (std::size_t co = 0; co < g.out_channels; ++co) out.row(static_cast<long>(co)).array() += bias[co];
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const float> dy,
                           std::span<const float> w, std::span<float> dx) {
  const auto B = static_cast<long>(g.batch);
  const std::size_t K = g.patch(), HW = g.out_h() * g.out_w();
  const std::size_t in_stride = g.in_channels * g.in_h * g.in_w, out_stride = g.out_channels * HW;
  ConstMatMap weight(w.data(), static_cast<long>(g.out_channels), static_cast<long>(K));
#pragma omp parallel
  {
    RowMatrix col(static_cast<long>(K), static_cast<long>(HW));
#pragma omp for schedule(static)
    for (long b = 0; b < B; ++b) {
      ConstMatMap grad_out(dy.data() + b * out_stride, static_cast<long>(g.out_channels),
                           static_cast<long>(HW));
      col.noalias() = weight.transpose() * grad_out;
      col2im_add(g, col.data(), dx.data() + b * in_stride);
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,
                            std::span<const float> dy, std::span<float> dw,
                            std::span<float> dbias) {
  const auto B = static_cast<long>(g.batch);
  const std::size_t K = g.patch(), HW = g.out_h() * g.out_w(), Co = g.out_channels;
  const std::size_t in_stride = g.in_channels * g.in_h * g.in_w, out_stride = Co * HW;
  std::vector<float> partial(static_cast<std::size_t>(B) * Co * K);
  std::vector<float> partial_bias(static_cast<std::size_t>(B) * Co, 0.0f);
#pragma omp parallel
  {
    std::vector<float> col(K * HW);
#pragma omp for schedule(static)
    for (long b = 0; b < B; ++b) {
      im2col(g, x.data() + b * in_stride, col.data());
      ConstMatMap grad_out(dy.data() + b * out_stride, static_cast<long>(Co), static_cast<long>(HW));
      MatMap part(partial.data() + b * Co * K, static_cast<long>(Co), static_cast<long>(K));
      part.noalias() =
          grad_out * ConstMatMap(col.data(), static_cast<long>(K), static_cast<long>(HW)).transpose();
      if (!dbias.empty()) {
        // Plain loop: Eigen's vectorized sum peels by address, so its result
        // would depend on where the buffer happened to be allocated.
        for (std::size_t co = 0; co < Co; ++co) {
          const float* row = dy.data() + b * out_stride + co * HW;
          float s = 0.0f;
          for (std::size_t i = 0; i < HW; ++i) s += row[i];
          partial_bias[b * Co + co] = s;
        }
      }
    }
  }
  for (long b = 0; b < B; ++b) {
    const float* part = partial.data() + b * Co * K;
    for (std::size_t i = 0; i < Co * K; ++i) dw[i] += part[i];
    if (!dbias.empty())
      for (std::size_t co = 0; co < Co; ++co) dbias[co] += partial_bias[b * Co + co];
  }
}

void layer_norm_forward(const NormGeometry& g, std::span<const float> x,
                        std::span<const float> gain, std::span<const float> bias, float eps,
                        std::span<float> y, std::span<float> xhat, std::span<float> rstd) {
  const std::size_t C = g.channels, P = g.positions;
  const auto B = static_cast<long>(g.batch);
#pragma omp parallel
  {
    std::vector<double> mean(P), rs(P);
#pragma omp for schedule(static)
    for (long b = 0; b < B; ++b) {
      const float* xb = x.data() + b * C * P;
      std::fill(mean.begin(), mean.end(), 0.0);
      std::fill(rs.begin(), rs.end(), 0.0);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) mean[p] += xb[c * P + p];
      for (std::size_t p = 0; p < P; ++p) mean[p] /= static_cast<double>(C);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const double d = xb[c * P + p] - mean[p];
          rs[p] += d * d;
        }
      float* rb = rstd.data() + b * P;
      for (std::size_t p = 0; p < P; ++p) {
        rs[p] = 1.0 / std::sqrt(rs[p] / static_cast<double>(C) + eps);
        rb[p] = static_cast<float>(rs[p]);
      }
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t idx = b * C * P + c * P + p;
          const float h = static_cast<float>((xb[c * P + p] - mean[p]) * rs[p]);
          xhat[idx] = h;
          y[idx] = gain[c] * h + bias[c];
        }
    }
  }
}

void layer_norm_backward(const NormGeometry& g, std::span<const float> dy,
                         std::span<const float> xhat, std::span<const float> rstd,
                         std::span<const float> gain, std::span<float> dx,
                         std::span<float> dgain, std::span<float> dbias) {
  const std::size_t C = g.channels, P = g.positions;
  const auto B = static_cast<long>(g.batch);
  std::vector<float> partial_gain(static_cast<std::size_t>(B) * C, 0.0f);
  std::vector<float> partial_bias(static_cast<std::size_t>(B) * C, 0.0f);
#pragma omp parallel
  {
    std::vector<float> mean_dh(P), mean_dh_h(P);
#pragma omp for schedule(static)
    for (long b = 0; b < B; ++b) {
      std::fill(mean_dh.begin(), mean_dh.end(), 0.0f);
      std::fill(mean_dh_h.begin(), mean_dh_h.end(), 0.0f);
      for (std::size_t c = 0; c < C; ++c) {
        float sg = 0.0f, sb = 0.0f;
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t idx = b * C * P + c * P + p;
          const float dh = dy[idx] * gain[c];
          mean_dh[p] += dh;
          mean_dh_h[p] += dh * xhat[idx];
          sg += dy[idx] * xhat[idx];
          sb += dy[idx];
        }
        partial_gain[b * C + c] = sg;
        partial_bias[b * C + c] = sb;
      }
      if (dx.empty()) continue;
      const float* rb = rstd.data() + b * P;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t idx = b * C * P + c * P + p;
          const float dh = dy[idx] * gain[c];
          dx[idx] += rb[p] * (dh - mean_dh[p] / static_cast<float>(C) -
                              xhat[idx] * mean_dh_h[p] / static_cast<float>(C));
        }
    }
  }
  for (long b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      if (!dgain.empty()) dgain[c] += partial_gain[b * C + c];
      if (!dbias.empty()) dbias[c] += partial_bias[b * C + c];
    }
}

}  // namespace parallel
}  // namespace casam::tensor::kernels
