#pragma once

// Central finite-difference oracle for the autodiff engine (test-only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "casam/tensor/ops.hpp"
#include "casam/tensor/rng.hpp"
#include "casam/tensor/tensor.hpp"

namespace casam::testing {

struct GradCheckResult {
  double max_abs_error = 0.0;
  double error_norm = 0.0;     // ||analytic - numeric||_2
  double gradient_norm = 0.0;  // max(||analytic||_2, ||numeric||_2)
  /// Norm-wise relative error, the usual float32 gradient-check measure.
  [[nodiscard]] double relative() const {
    return gradient_norm > 0.0 ? error_norm / gradient_norm : error_norm;
  }
};

using LeafFn = std::function<tensor::Tensor(std::vector<tensor::Tensor>&)>;
using ValueFn = std::function<double(std::vector<tensor::Tensor>&)>;

/// Compares backprop gradients of `loss_fn` with central differences of
/// `value_fn` (step `h`) on every leaf entry. `value_fn` evaluates the same
/// objective in double precision so float32 rounding of the scalar loss does
/// not swamp the difference quotient. The quotient divides by the step that
/// was actually stored, which differs from 2h once x +- h is rounded to float.
inline std::vector<GradCheckResult> grad_check(std::vector<tensor::Tensor>& leaves, const LeafFn& loss_fn,
                                               const ValueFn& value_fn, double h = 1e-3) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.clear_grad();
  }
  tensor::backward(loss_fn(leaves));
  std::vector<GradCheckResult> results;
  for (auto& leaf : leaves) {
    std::vector<float> analytic(leaf.numel(), 0.0f);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    GradCheckResult r;
    double err2 = 0.0, a2 = 0.0, n2 = 0.0;
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float original = values[i];
      const float up = static_cast<float>(original + h);
      const float down = static_cast<float>(original - h);
      values[i] = up;
      const double plus = value_fn(leaves);
      values[i] = down;
      const double minus = value_fn(leaves);
      values[i] = original;
      const double numeric = (plus - minus) / (static_cast<double>(up) - static_cast<double>(down));
      const double diff = numeric - analytic[i];
      r.max_abs_error = std::max(r.max_abs_error, std::abs(diff));
      err2 += diff * diff;
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      n2 += numeric * numeric;
    }
    r.error_norm = std::sqrt(err2);
    r.gradient_norm = std::sqrt(std::max(a2, n2));
    results.push_back(r);
  }
  for (auto& leaf : leaves) leaf.clear_grad();
  return results;
}

inline tensor::Tensor random_tensor(tensor::Shape shape, tensor::Rng& rng, double lo = -1.0, double hi = 1.0) {
  tensor::Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

/// Fixed random projection so every output element influences a scalar loss.
inline tensor::Tensor projection_weights(const tensor::Shape& shape, std::uint64_t seed) {
  tensor::Rng rng(seed);
  return random_tensor(shape, rng);
}

/// Checks a multi-output op through the scalar sum_k <W_k, y_k> with fixed
/// random W_k. Backprop sees the engine's reduction; the difference quotient
/// reduces the float outputs in double.
inline std::vector<GradCheckResult> grad_check_projected(
    std::vector<tensor::Tensor>& leaves,
    const std::function<std::vector<tensor::Tensor>(std::vector<tensor::Tensor>&)>& outputs_fn,
    std::uint64_t seed, double h = 1e-3) {
  auto weights_for = [seed](const std::vector<tensor::Tensor>& outs) {
    std::vector<tensor::Tensor> w;
    for (std::size_t k = 0; k < outs.size(); ++k) w.push_back(projection_weights(outs[k].shape(), seed + k));
    return w;
  };
  const LeafFn loss = [&](std::vector<tensor::Tensor>& t) {
    const auto outs = outputs_fn(t);
    const auto w = weights_for(outs);
    tensor::Tensor total = tensor::sum(tensor::mul(outs[0], w[0]));
    for (std::size_t k = 1; k < outs.size(); ++k) total = tensor::add(total, tensor::sum(tensor::mul(outs[k], w[k])));
    return total;
  };
  const ValueFn value = [&](std::vector<tensor::Tensor>& t) {
    tensor::NoGradGuard guard;
    const auto outs = outputs_fn(t);
    const auto w = weights_for(outs);
    double total = 0.0;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      const auto y = outs[k].data();
      const auto wk = w[k].data();
      for (std::size_t i = 0; i < y.size(); ++i) total += static_cast<double>(y[i]) * wk[i];
    }
    return total;
  };
  return grad_check(leaves, loss, value, h);
}

}  // namespace casam::testing
