#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "casam/metrics/metrics.hpp"
#include "casam/synth/backbone.hpp"
#include "casam/tensor/checkpoint.hpp"
#include "casam/tensor/parameter.hpp"

namespace casam::align {

inline constexpr int kIdentityTask = tensor::Checkpoint::kIdentityTask;

/// Channel-attention residual block over C-channel feature maps:
///   u = conv2(relu(conv1(x))), gate = sigmoid(conv1d_channel(gap(u)))
///   y = layer_norm_2d(x + gate * u)
struct CAResBlock {
  tensor::Parameter conv1_w, conv1_b, conv2_w, conv2_b, channel_w, norm_g, norm_b;

  [[nodiscard]] tensor::Tensor forward(const tensor::Tensor& x) const;
  /// The sigmoid gate alone, [B,C].
  [[nodiscard]] tensor::Tensor gate(const tensor::Tensor& x) const;
  [[nodiscard]] tensor::ParameterRefs parameters();
};

struct AlignmentInit {
  std::size_t n_blocks = 4;
  std::size_t channels = synth::kFeatureChannels;
  std::size_t channel_kernel = 3;
  std::uint64_t seed = 0;
  /// Start every block's norm from these affine parameters (the encoder's
  /// last norm) so an untrained layer stays close to the backbone's features.
  const tensor::Parameter* norm_gain = nullptr;
  const tensor::Parameter* norm_bias = nullptr;
};

class AlignmentLayer {
 public:
  /// The fixed identity layer: no parameters, forward returns its input.
  static AlignmentLayer identity();
  AlignmentLayer(int task_id, const AlignmentInit& init);
  /// Initialization wired to the backbone's final norm.
  static AlignmentLayer for_backbone(int task_id, std::size_t n_blocks, std::uint64_t seed,
                                     const synth::Backbone& backbone);

  [[nodiscard]] tensor::Tensor forward(const tensor::Tensor& z) const;

  [[nodiscard]] bool is_identity() const { return task_id_ == kIdentityTask; }
  [[nodiscard]] int task_id() const { return task_id_; }
  void set_task_id(int id) { task_id_ = id; }
  [[nodiscard]] std::size_t n_blocks() const { return blocks_.size(); }
  [[nodiscard]] const std::vector<CAResBlock>& blocks() const { return blocks_; }
  [[nodiscard]] tensor::ParameterRefs parameters();
  [[nodiscard]] std::size_t parameter_count() const;

  [[nodiscard]] tensor::Checkpoint checkpoint() const;
  static AlignmentLayer from_checkpoint(const tensor::Checkpoint& ck);

 private:
  AlignmentLayer() = default;
  int task_id_ = kIdentityTask;
  std::vector<CAResBlock> blocks_;
};

/// One training/evaluation example: a cached frozen feature and its sample.
struct SegExample {
  const float* feature = nullptr;  // kFeatureNumel floats
  const synth::Sample* sample = nullptr;
};

[[nodiscard]] std::vector<SegExample> examples(const synth::EncodedSet& features, const synth::Dataset& data);

struct SegBatch {
  std::vector<std::size_t> positions;  // indices into the example list
  tensor::Tensor z;                    // [B,C,h,w]
  tensor::Tensor boxes;                // [B,1,h,w]
  tensor::Tensor masks;                // [B,1,H,W]
};

[[nodiscard]] SegBatch make_batch(std::span<const SegExample> items, std::span<const std::size_t> positions,
                                  tensor::Rng* jitter);

struct TrainOptions {
  std::size_t epochs = 12;
  float lr = 1e-3f;
  std::size_t batch = 6;
  std::uint64_t seed = 0;
};

/// Maps frozen features of a batch to aligned features.
using AlignFn = std::function<tensor::Tensor(const SegBatch&)>;
/// Adds strategy-specific terms to the segmentation loss.
using LossHook = std::function<tensor::Tensor(const SegBatch&, const tensor::Tensor& logits, const tensor::Tensor& loss)>;
/// Called after every optimizer step (e.g. to reset frozen slots).
using StepHook = std::function<void()>;

/// Mini-batch Adam over `items` with box jitter; only `params` are updated
/// and the backbone is never touched. Returns the mean loss of each epoch.
/// Throws NumericError on a non-finite loss.
std::vector<double> train_segmentation(std::span<const SegExample> items, const synth::Backbone& backbone,
                                       const AlignFn& align, const tensor::ParameterRefs& params,
                                       const TrainOptions& options, const LossHook& hook = {},
                                       const StepHook& after_step = {});

/// Plain alignment training on one task's data.
std::vector<double> train_alignment(std::span<const SegExample> items, const synth::Backbone& backbone,
                                    AlignmentLayer& layer, const TrainOptions& options);

/// Mean per-sample IoU / BIoU of predictions (tight boxes) on `items`.
[[nodiscard]] metrics::TaskScore evaluate(std::span<const SegExample> items, const synth::Backbone& backbone,
                                          const AlignFn& align, std::size_t batch = 32);

/// Mask logits for a batch of examples (tight boxes, no gradient).
[[nodiscard]] tensor::Tensor predict(std::span<const SegExample> items, std::span<const std::size_t> positions,
                                     const synth::Backbone& backbone, const AlignFn& align);

[[nodiscard]] AlignFn apply_layer(const AlignmentLayer& layer);

}  // namespace casam::align
