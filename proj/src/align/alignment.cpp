#include "casam/align/alignment.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "casam/tensor/init.hpp"
#include "casam/tensor/ops.hpp"

namespace casam::align {

using namespace casam::tensor;
using synth::kFeatureChannels;
using synth::kFeatureNumel;
using synth::kFeatureSize;
using synth::kImageSize;

Tensor CAResBlock::gate(const Tensor& x) const {
  const Tensor u = conv2d(relu(conv2d(x, conv1_w.value(), conv1_b.value(), 1, 1)), conv2_w.value(),
                          conv2_b.value(), 1, 1);
  return sigmoid(conv1d_channel(global_avg_pool(u), channel_w.value()));
}

Tensor CAResBlock::forward(const Tensor& x) const {
  const Tensor u = conv2d(relu(conv2d(x, conv1_w.value(), conv1_b.value(), 1, 1)), conv2_w.value(),
                          conv2_b.value(), 1, 1);
  const Tensor g = sigmoid(conv1d_channel(global_avg_pool(u), channel_w.value()));
  return layer_norm_2d(add(x, channel_scale(u, g)), norm_g.value(), norm_b.value());
}

ParameterRefs CAResBlock::parameters() {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &channel_w, &norm_g, &norm_b};
}

AlignmentLayer AlignmentLayer::identity() { return AlignmentLayer(); }

AlignmentLayer::AlignmentLayer(int task_id, const AlignmentInit& init) : task_id_(task_id) {
  if (task_id == kIdentityTask) throw std::invalid_argument("trainable layers need a real task id");
  if (init.n_blocks == 0) throw std::invalid_argument("an alignment layer needs at least one block");
  const std::size_t C = init.channels, k = init.channel_kernel;
  Rng rng(derive_seed(init.seed, "alignment-init"));
  for (std::size_t b = 0; b < init.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    CAResBlock blk{
        Parameter(p + "conv1.w", he_normal({C, C, 3, 3}, C * 9, rng)),
        Parameter(p + "conv1.b", Tensor({C}, 0.0f)),
        // Zero second conv: the residual branch starts silent.
        Parameter(p + "conv2.w", Tensor({C, C, 3, 3}, 0.0f)),
        Parameter(p + "conv2.b", Tensor({C}, 0.0f)),
        Parameter(p + "channel.w", fan_in_uniform({1, 1, k}, k, rng)),
        Parameter(p + "norm.g", init.norm_gain ? init.norm_gain->value().clone() : Tensor({C}, 1.0f)),
        Parameter(p + "norm.b", init.norm_bias ? init.norm_bias->value().clone() : Tensor({C}, 0.0f)),
    };
    for (auto* q : blk.parameters()) q->set_trainable(true);
    blocks_.push_back(std::move(blk));
  }
}

AlignmentLayer AlignmentLayer::for_backbone(int task_id, std::size_t n_blocks, std::uint64_t seed,
                                            const synth::Backbone& backbone) {
  AlignmentInit init;
  init.n_blocks = n_blocks;
  init.seed = seed;
  init.norm_gain = &backbone.final_norm_gain();
  init.norm_bias = &backbone.final_norm_bias();
  return AlignmentLayer(task_id, init);
}

Tensor AlignmentLayer::forward(const Tensor& z) const {
  Tensor x = z;
  for (const auto& b : blocks_) x = b.forward(x);
  return x;
}

ParameterRefs AlignmentLayer::parameters() {
  ParameterRefs out;
  for (auto& b : blocks_)
    for (auto* p : b.parameters()) out.push_back(p);
  return out;
}

std::size_t AlignmentLayer::parameter_count() const {
  return tensor::parameter_count(const_cast<AlignmentLayer*>(this)->parameters());
}

Checkpoint AlignmentLayer::checkpoint() const {
  return Checkpoint::capture(const_cast<AlignmentLayer*>(this)->parameters(), task_id_,
                             static_cast<std::uint32_t>(blocks_.size()));
}

AlignmentLayer AlignmentLayer::from_checkpoint(const Checkpoint& ck) {
  if (ck.task_id == kIdentityTask) {
    if (ck.n_blocks != 0 || !ck.arrays.empty()) throw FormatError("identity checkpoint must be empty");
    return identity();
  }
  if (ck.n_blocks == 0) throw FormatError("checkpoint declares zero blocks for a trainable layer");
  const auto& probe = ck.arrays.empty() ? throw FormatError("checkpoint has no arrays") : ck.arrays.front();
  AlignmentInit init;
  init.n_blocks = ck.n_blocks;
  init.channels = probe.shape.at(0);
  for (const auto& a : ck.arrays)
    if (a.name == "block0.channel.w") init.channel_kernel = a.shape.at(2);
  AlignmentLayer layer(ck.task_id, init);
  ck.restore(layer.parameters());
  return layer;
}

std::vector<SegExample> examples(const synth::EncodedSet& features, const synth::Dataset& data) {
  if (features.n != data.size()) throw std::invalid_argument("feature cache does not match dataset");
  std::vector<SegExample> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = {features.features.data() + i * kFeatureNumel, &data[i]};
  return out;
}

SegBatch make_batch(std::span<const SegExample> items, std::span<const std::size_t> positions, Rng* jitter) {
  SegBatch b;
  b.positions.assign(positions.begin(), positions.end());
  const std::size_t B = positions.size(), px = kImageSize * kImageSize;
  b.z = Tensor({B, kFeatureChannels, kFeatureSize, kFeatureSize});
  b.masks = Tensor({B, 1, kImageSize, kImageSize});
  std::vector<synth::Box> boxes;
  auto z = b.z.mutable_data();
  auto m = b.masks.mutable_data();
  for (std::size_t i = 0; i < B; ++i) {
    const auto& ex = items[positions[i]];
    std::copy(ex.feature, ex.feature + kFeatureNumel, z.begin() + i * kFeatureNumel);
    std::copy(ex.sample->mask.begin(), ex.sample->mask.end(), m.begin() + i * px);
    boxes.push_back(jitter ? synth::jitter_box(ex.sample->box, *jitter) : ex.sample->box);
  }
  b.boxes = synth::box_channel(boxes, kFeatureSize);
  return b;
}

std::vector<double> train_segmentation(std::span<const SegExample> items, const synth::Backbone& backbone,
                                       const AlignFn& align, const ParameterRefs& params,
                                       const TrainOptions& options, const LossHook& hook,
                                       const StepHook& after_step) {
  if (!backbone.frozen()) throw std::logic_error("alignment training requires a frozen backbone");
  if (options.batch == 0) throw std::invalid_argument("batch must be positive");
  std::vector<double> epoch_losses;
  if (items.empty()) return epoch_losses;
  Rng rng(derive_seed(options.seed, "segmentation-train"));
  const AdamOptions adam{.lr = options.lr};
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = rng.permutation(items.size());
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      std::span<const std::size_t> pos(order.data() + start, std::min(options.batch, order.size() - start));
      const SegBatch batch = make_batch(items, pos, &rng);
      const Tensor logits = backbone.decode(align(batch), batch.boxes);
      Tensor loss = synth::segmentation_loss(logits, batch.masks);
      if (hook) loss = hook(batch, logits, loss);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps));
      }
      backward(loss);
      adam_step(params, adam);
      for (const auto* p : params)
        for (float v : p->value().data())
          if (!std::isfinite(v)) throw NumericError("non-finite parameter after step " + std::to_string(steps));
      if (after_step) after_step();
      total += loss.item();
      ++steps;
    }
    epoch_losses.push_back(total / static_cast<double>(steps));
  }
  return epoch_losses;
}

std::vector<double> train_alignment(std::span<const SegExample> items, const synth::Backbone& backbone,
                                    AlignmentLayer& layer, const TrainOptions& options) {
  if (layer.is_identity()) throw std::invalid_argument("the identity layer is not trainable");
  return train_segmentation(items, backbone, apply_layer(layer), layer.parameters(), options);
}

Tensor predict(std::span<const SegExample> items, std::span<const std::size_t> positions,
               const synth::Backbone& backbone, const AlignFn& align) {
  NoGradGuard guard;
  const SegBatch batch = make_batch(items, positions, nullptr);
  return backbone.decode(align(batch), batch.boxes);
}

metrics::TaskScore evaluate(std::span<const SegExample> items, const synth::Backbone& backbone,
                            const AlignFn& align, std::size_t batch) {
  metrics::TaskScore score;
  score.n = items.size();
  if (items.empty()) return score;
  const std::size_t px = kImageSize * kImageSize;
  const std::size_t band = metrics::default_band(kImageSize, kImageSize);
  std::vector<std::size_t> pos;
  for (std::size_t start = 0; start < items.size(); start += batch) {
    pos.resize(std::min(batch, items.size() - start));
    std::iota(pos.begin(), pos.end(), start);
    const Tensor logits = predict(items, pos, backbone, align);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const auto pred = metrics::binarize_logits(logits.data().subspan(i * px, px));
      const auto truth = metrics::binarize(items[pos[i]].sample->mask);
      score.iou += metrics::iou(pred, truth);
      score.biou += metrics::biou(pred, truth, kImageSize, kImageSize, band);
    }
  }
  score.iou /= static_cast<double>(items.size());
  score.biou /= static_cast<double>(items.size());
  return score;
}

AlignFn apply_layer(const AlignmentLayer& layer) {
  return [&layer](const SegBatch& b) { return layer.forward(b.z); };
}

}  // namespace casam::align
