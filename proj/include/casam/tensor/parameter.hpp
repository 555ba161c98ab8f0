#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "casam/tensor/tensor.hpp"

namespace casam::tensor {

struct AdamState {
  std::vector<float> first_moment;
  std::vector<float> second_moment;
  std::uint64_t steps = 0;
};

/// Trainable leaf with its optimizer state. Copies are deep: a copied
/// Parameter owns an independent value tensor.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true);
  Parameter(const Parameter& other);
  Parameter& operator=(const Parameter& other);
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] const Tensor& value() const { return value_; }
  [[nodiscard]] Tensor& value() { return value_; }
  [[nodiscard]] const Shape& shape() const { return value_.shape(); }
  [[nodiscard]] std::size_t numel() const { return value_.numel(); }

  [[nodiscard]] bool trainable() const { return value_.requires_grad(); }
  void set_trainable(bool flag);

  [[nodiscard]] AdamState& adam_state() { return adam_; }
  [[nodiscard]] const AdamState& adam_state() const { return adam_; }
  void reset_adam_state() { adam_ = AdamState{}; }

 private:
  std::string name_;
  Tensor value_;
  AdamState adam_;
};

using ParameterRefs = std::vector<Parameter*>;

struct AdamOptions {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// One bias-corrected Adam step on every trainable parameter that holds a
/// gradient; parameters without a gradient are skipped. Gradients are cleared.
void adam_step(const ParameterRefs& params, const AdamOptions& options);

void clear_grads(const ParameterRefs& params);
void set_trainable(const ParameterRefs& params, bool flag);
[[nodiscard]] std::size_t parameter_count(const ParameterRefs& params);

/// Concatenated values in declaration order (used for task vectors, hashes).
[[nodiscard]] std::vector<float> flatten_values(const ParameterRefs& params);
void assign_flat_values(const ParameterRefs& params, std::span<const float> flat);
/// FNV-1a over names, shapes and raw value bytes.
[[nodiscard]] std::uint64_t parameter_hash(const ParameterRefs& params);

}  // namespace casam::tensor
