#pragma once

// Dense convolution and normalization kernels. Two implementations share one
// signature set: `reference` is the direct nested-loop form kept for tests and
// benchmarking, `parallel` is the im2col/GEMM form with OpenMP across the batch.
// Backward kernels accumulate (+=) into their outputs.

#include <cstddef>
#include <span>

namespace casam::tensor::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t in_h = 1;
  std::size_t in_w = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  [[nodiscard]] std::size_t out_h() const { return (in_h + 2 * padding - kernel) / stride + 1; }
  [[nodiscard]] std::size_t out_w() const { return (in_w + 2 * padding - kernel) / stride + 1; }
  [[nodiscard]] std::size_t patch() const { return in_channels * kernel * kernel; }
};

struct NormGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t positions = 1;  // h * w
};

#define CASAM_KERNEL_DECLS                                                                     \
  void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w, \
                      std::span<const float> bias, std::span<float> y);                         \
  void conv2d_backward_input(const ConvGeometry& g, std::span<const float> dy,                  \
                             std::span<const float> w, std::span<float> dx);                    \
  void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,                  \
                              std::span<const float> dy, std::span<float> dw,                   \
                              std::span<float> dbias);                                          \
  void layer_norm_forward(const NormGeometry& g, std::span<const float> x,                      \
                          std::span<const float> gain, std::span<const float> bias, float eps,  \
                          std::span<float> y, std::span<float> xhat, std::span<float> rstd);    \
  void layer_norm_backward(const NormGeometry& g, std::span<const float> dy,                    \
                           std::span<const float> xhat, std::span<const float> rstd,            \
                           std::span<const float> gain, std::span<float> dx,                    \
                           std::span<float> dgain, std::span<float> dbias);

namespace reference {
CASAM_KERNEL_DECLS
}  // namespace reference

namespace parallel {
CASAM_KERNEL_DECLS
}  // namespace parallel

#undef CASAM_KERNEL_DECLS

enum class Backend { reference, parallel };

/// Thread-local kernel backend used by the differentiable ops (default: parallel).
[[nodiscard]] Backend active_backend();
void set_backend(Backend backend);

class BackendGuard {
 public:
  explicit BackendGuard(Backend backend) : previous_(active_backend()) { set_backend(backend); }
  ~BackendGuard() { set_backend(previous_); }
  BackendGuard(const BackendGuard&) = delete;
  BackendGuard& operator=(const BackendGuard&) = delete;

 private:
  Backend previous_;
};

/// Number of OpenMP threads used by the parallel kernels (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace casam::tensor::kernels
