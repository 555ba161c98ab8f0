#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "casam/synth/task.hpp"
#include "casam/tensor/checkpoint.hpp"
#include "casam/tensor/parameter.hpp"

namespace casam::synth {

inline constexpr std::size_t kFeatureChannels = 32;
inline constexpr std::size_t kFeatureSize = 16;
inline constexpr std::size_t kFeatureNumel = kFeatureChannels * kFeatureSize * kFeatureSize;

struct BackboneSpec {
  std::size_t n_train = 2400;
  std::size_t n_val = 300;
  std::size_t epochs = 4;
  std::size_t batch = 16;
  float lr = 2e-3f;
  double iou_floor = 0.7;
};

class PretrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Encoder: three conv blocks (3->16 s2, 16->32 s2, 32->32 s1), each
/// ReLU + layer_norm_2d, mapping [B,3,64,64] to Z [B,32,16,16].
/// Decoder: Z concatenated with the box channel, two transposed-conv blocks
/// (33->32, 32->16, each x2 upsampling) and a 3x3 head to [B,1,64,64] logits.
class Backbone {
 public:
  explicit Backbone(std::uint64_t seed);

  [[nodiscard]] tensor::Tensor encode(const tensor::Tensor& images) const;
  /// `boxes` is the [B,1,16,16] box channel.
  [[nodiscard]] tensor::Tensor decode(const tensor::Tensor& z, const tensor::Tensor& boxes) const;

  [[nodiscard]] tensor::ParameterRefs encoder_parameters();
  [[nodiscard]] tensor::ParameterRefs decoder_parameters();
  [[nodiscard]] tensor::ParameterRefs parameters();
  [[nodiscard]] std::uint64_t hash() const;

  /// Permanently marks every parameter as non-trainable.
  void freeze();
  [[nodiscard]] bool frozen() const { return frozen_; }

  [[nodiscard]] static constexpr std::array<std::size_t, 3> feature_shape() {
    return {kFeatureChannels, kFeatureSize, kFeatureSize};
  }
  /// Affine parameters of the encoder's last layer norm.
  [[nodiscard]] const tensor::Parameter& final_norm_gain() const { return enc_[3 * 4 - 2]; }
  [[nodiscard]] const tensor::Parameter& final_norm_bias() const { return enc_[3 * 4 - 1]; }

  [[nodiscard]] tensor::Checkpoint checkpoint() const;
  static Backbone from_checkpoint(const tensor::Checkpoint& ck);

 private:
  Backbone() = default;
  // Per encoder block: weight, bias, norm gain, norm bias.
  std::vector<tensor::Parameter> enc_;
  // t1 weight, t1 bias, n1 gain, n1 bias, t2 weight, t2 bias, head weight, head bias.
  std::vector<tensor::Parameter> dec_;
  bool frozen_ = false;
};

/// Frozen features of a dataset, cached because the encoder never changes.
struct EncodedSet {
  std::vector<float> features;  // n * kFeatureNumel
  std::size_t n = 0;

  [[nodiscard]] tensor::Tensor batch(std::span<const std::size_t> idx) const;
  [[nodiscard]] std::span<const float> feature(std::size_t i) const {
    return {features.data() + i * kFeatureNumel, kFeatureNumel};
  }
};

[[nodiscard]] EncodedSet encode_dataset(const Backbone& backbone, const Dataset& data, std::size_t batch = 32);

/// (BCE + soft-Dice) / 2 on mask logits.
[[nodiscard]] tensor::Tensor segmentation_loss(const tensor::Tensor& logits, const tensor::Tensor& masks);

/// Boxes of the indexed samples; jittered when `rng` is given.
[[nodiscard]] std::vector<Box> gather_boxes(const Dataset& data, std::span<const std::size_t> idx,
                                            tensor::Rng* rng = nullptr);

struct PretrainReport {
  double val_iou = 0.0;
  double final_loss = 0.0;
};

/// Trains encoder and decoder jointly on the broad mixture, then freezes.
/// Throws PretrainError when held-out IoU stays below spec.iou_floor.
[[nodiscard]] Backbone pretrain_backbone(const BackboneSpec& spec, std::uint64_t seed,
                                         PretrainReport* report = nullptr);

/// Mean IoU of identity-aligned predictions on `data` (tight boxes).
[[nodiscard]] double backbone_iou(const Backbone& backbone, const Dataset& data);

}  // namespace casam::synth
