#include "casam/tensor/parameter.hpp"

#include <cmath>
#include <cstring>

namespace casam::tensor {

Parameter::Parameter(std::string name, Tensor value, bool trainable)
    : name_(std::move(name)), value_(value.detach()) {
  value_.set_requires_grad(trainable);
}

Parameter::Parameter(const Parameter& other)
    : name_(other.name_), value_(other.value_.defined() ? other.value_.clone() : Tensor{}),
      adam_(other.adam_) {
  if (value_.defined()) value_.clear_grad();
}

Parameter& Parameter::operator=(const Parameter& other) {
  if (this != &other) {
    Parameter copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Parameter::set_trainable(bool flag) {
  value_.set_requires_grad(flag);
  if (!flag) value_.clear_grad();
}

void adam_step(const ParameterRefs& params, const AdamOptions& options) {
  for (Parameter* p : params) {
    if (!p->trainable() || !p->value().has_grad()) continue;
    auto& st = p->adam_state();
    const std::size_t n = p->numel();
    if (st.first_moment.size() != n) {
      st.first_moment.assign(n, 0.0f);
      st.second_moment.assign(n, 0.0f);
      st.steps = 0;
    }
    ++st.steps;
    const double t = static_cast<double>(st.steps);
    const float c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(options.beta1), t));
    const float c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(options.beta2), t));
    auto value = p->value().mutable_data();
    const auto grad = p->value().grad();
    for (std::size_t i = 0; i < n; ++i) {
      const float g = grad[i];
      st.first_moment[i] = options.beta1 * st.first_moment[i] + (1.0f - options.beta1) * g;
      st.second_moment[i] = options.beta2 * st.second_moment[i] + (1.0f - options.beta2) * g * g;
      const float mhat = st.first_moment[i] / c1;
      const float vhat = st.second_moment[i] / c2;
      value[i] -= options.lr * mhat / (std::sqrt(vhat) + options.eps);
    }
    p->value().clear_grad();
  }
}

void clear_grads(const ParameterRefs& params) {
  for (Parameter* p : params) p->value().clear_grad();
}

void set_trainable(const ParameterRefs& params, bool flag) {
  for (Parameter* p : params) p->set_trainable(flag);
}

std::size_t parameter_count(const ParameterRefs& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->numel();
  return n;
}

std::vector<float> flatten_values(const ParameterRefs& params) {
  std::vector<float> flat;
  flat.reserve(parameter_count(params));
  for (const Parameter* p : params) {
    const auto d = p->value().data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  return flat;
}

void assign_flat_values(const ParameterRefs& params, std::span<const float> flat) {
  if (flat.size() != parameter_count(params)) {
    throw DimensionError("assign_flat_values: expected " + std::to_string(parameter_count(params)) +
                         " values, got " + std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (Parameter* p : params) {
    auto d = p->value().mutable_data();
    std::memcpy(d.data(), flat.data() + offset, d.size() * sizeof(float));
    offset += d.size();
  }
}

std::uint64_t parameter_hash(const ParameterRefs& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const Parameter* p : params) {
    mix(p->name().data(), p->name().size());
    for (auto d : p->shape()) {
      const std::uint64_t v = d;
      mix(&v, sizeof v);
    }
    const auto data = p->value().data();
    mix(data.data(), data.size() * sizeof(float));
  }
  return h;
}

}  // namespace casam::tensor
