#pragma once

#include "casam/tensor/rng.hpp"
#include "casam/tensor/tensor.hpp"

namespace casam::tensor {

/// Zero-mean normal with stddev sqrt(2 / fan_in).
[[nodiscard]] Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng);
/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
[[nodiscard]] Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);
[[nodiscard]] Tensor normal_tensor(Shape shape, float stddev, Rng& rng);

}  // namespace casam::tensor
