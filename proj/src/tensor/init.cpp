#include "casam/tensor/init.hpp"

#include <cmath>

namespace casam::tensor {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  return normal_tensor(std::move(shape), static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))), rng);
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

Tensor normal_tensor(Shape shape, float stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

}  // namespace casam::tensor
