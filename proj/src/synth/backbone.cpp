#include "casam/synth/backbone.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "casam/metrics/metrics.hpp"
#include "casam/tensor/init.hpp"
#include "casam/tensor/ops.hpp"

namespace casam::synth {

using namespace casam::tensor;

namespace {

Parameter conv_weight(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
  return Parameter(name, he_normal({cout, cin, k, k}, cin * k * k, rng));
}

Parameter zeros(const std::string& name, std::size_t n) { return Parameter(name, Tensor({n}, 0.0f)); }
Parameter ones(const std::string& name, std::size_t n) { return Parameter(name, Tensor({n}, 1.0f)); }

ParameterRefs refs(std::vector<Parameter>& v) {
  ParameterRefs out;
  for (auto& p : v) out.push_back(&p);
  return out;
}

}  // namespace

Backbone::Backbone(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "backbone-init"));
  const std::size_t chans[] = {kImageChannels, 16, 32, kFeatureChannels};
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string p = "enc" + std::to_string(b) + ".";
    enc_.push_back(conv_weight(p + "conv.w", chans[b + 1], chans[b], 3, rng));
    enc_.push_back(zeros(p + "conv.b", chans[b + 1]));
    enc_.push_back(ones(p + "norm.g", chans[b + 1]));
    enc_.push_back(zeros(p + "norm.b", chans[b + 1]));
  }
  // Transposed-conv weights are [Cin,Cout,k,k]; each output sees Cin*k*k/4 taps at stride 2.
  dec_.push_back(Parameter("dec.t1.w", he_normal({kFeatureChannels + 1, 32, 4, 4}, (kFeatureChannels + 1) * 4, rng)));
  dec_.push_back(zeros("dec.t1.b", 32));
  dec_.push_back(ones("dec.n1.g", 32));
  dec_.push_back(zeros("dec.n1.b", 32));
  dec_.push_back(Parameter("dec.t2.w", he_normal({32, 16, 4, 4}, 32 * 4, rng)));
  dec_.push_back(zeros("dec.t2.b", 16));
  dec_.push_back(Parameter("dec.head.w", fan_in_uniform({1, 16, 3, 3}, 16 * 9, rng)));
  dec_.push_back(zeros("dec.head.b", 1));
}

Tensor Backbone::encode(const Tensor& images) const {
  Tensor x = images;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto* p = &enc_[4 * b];
    x = conv2d(x, p[0].value(), p[1].value(), b < 2 ? 2 : 1, 1);
    x = layer_norm_2d(relu(x), p[2].value(), p[3].value());
  }
  return x;
}

Tensor Backbone::decode(const Tensor& z, const Tensor& boxes) const {
  Tensor x = concat_channels(z, boxes);
  x = relu(conv_transpose2d(x, dec_[0].value(), dec_[1].value(), 2, 1));
  x = layer_norm_2d(x, dec_[2].value(), dec_[3].value());
  x = relu(conv_transpose2d(x, dec_[4].value(), dec_[5].value(), 2, 1));
  return conv2d(x, dec_[6].value(), dec_[7].value(), 1, 1);
}

ParameterRefs Backbone::encoder_parameters() { return refs(enc_); }
ParameterRefs Backbone::decoder_parameters() { return refs(dec_); }

ParameterRefs Backbone::parameters() {
  auto out = encoder_parameters();
  for (auto* p : decoder_parameters()) out.push_back(p);
  return out;
}

std::uint64_t Backbone::hash() const { return parameter_hash(const_cast<Backbone*>(this)->parameters()); }

void Backbone::freeze() {
  set_trainable(parameters(), false);
  for (auto* p : parameters()) p->reset_adam_state();
  frozen_ = true;
}

Checkpoint Backbone::checkpoint() const {
  return Checkpoint::capture(const_cast<Backbone*>(this)->parameters(), Checkpoint::kIdentityTask, 0);
}

Backbone Backbone::from_checkpoint(const Checkpoint& ck) {
  Backbone b(0);
  ck.restore(b.parameters());
  b.freeze();
  return b;
}

Tensor EncodedSet::batch(std::span<const std::size_t> idx) const {
  Tensor out({idx.size(), kFeatureChannels, kFeatureSize, kFeatureSize});
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = feature(idx[i]);
    std::copy(src.begin(), src.end(), dst.begin() + i * kFeatureNumel);
  }
  return out;
}

EncodedSet encode_dataset(const Backbone& backbone, const Dataset& data, std::size_t batch) {
  NoGradGuard guard;
  EncodedSet set;
  set.n = data.size();
  set.features.resize(set.n * kFeatureNumel);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.resize(std::min(batch, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor z = backbone.encode(stack_images(data, idx));
    std::copy(z.data().begin(), z.data().end(), set.features.begin() + start * kFeatureNumel);
  }
  return set;
}

Tensor segmentation_loss(const Tensor& logits, const Tensor& masks) {
  return scale(add(bce_with_logits(logits, masks), soft_dice_loss(logits, masks)), 0.5f);
}

std::vector<Box> gather_boxes(const Dataset& data, std::span<const std::size_t> idx, Rng* rng) {
  std::vector<Box> boxes;
  boxes.reserve(idx.size());
  for (auto i : idx) boxes.push_back(rng ? jitter_box(data[i].box, *rng) : data[i].box);
  return boxes;
}

double backbone_iou(const Backbone& backbone, const Dataset& data) {
  NoGradGuard guard;
  double acc = 0.0;
  std::vector<std::size_t> idx;
  constexpr std::size_t kBatch = 32;
  for (std::size_t start = 0; start < data.size(); start += kBatch) {
    idx.resize(std::min(kBatch, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto boxes = gather_boxes(data, idx);
    const Tensor logits = backbone.decode(backbone.encode(stack_images(data, idx)), box_channel(boxes, kFeatureSize));
    const std::size_t px = kImageSize * kImageSize;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto pred = metrics::binarize_logits(logits.data().subspan(i * px, px));
      acc += metrics::iou(pred, metrics::binarize(data[idx[i]].mask));
    }
  }
  return data.empty() ? 0.0 : acc / static_cast<double>(data.size());
}

Backbone pretrain_backbone(const BackboneSpec& spec, std::uint64_t seed, PretrainReport* report) {
  Backbone net(seed);
  const Dataset train = generate_broad(spec.n_train, derive_seed(seed, "broad-train"));
  const Dataset val = generate_broad(spec.n_val, derive_seed(seed, "broad-val"));
  Rng rng(derive_seed(seed, "pretrain-order"));
  auto params = net.parameters();
  double epoch_loss = 0.0;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    // Cosine decay keeps the last epochs from bouncing around.
    const double progress = static_cast<double>(epoch) / static_cast<double>(std::max<std::size_t>(1, spec.epochs));
    const AdamOptions adam{.lr = static_cast<float>(spec.lr * 0.5 * (1.0 + std::cos(M_PI * progress)))};
    auto order = rng.permutation(train.size());
    epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch) {
      std::span<const std::size_t> idx(order.data() + start, std::min(spec.batch, order.size() - start));
      const auto boxes = gather_boxes(train, idx, &rng);
      const Tensor logits = net.decode(net.encode(stack_images(train, idx)), box_channel(boxes, kFeatureSize));
      const Tensor loss = segmentation_loss(logits, stack_masks(train, idx));
      if (!std::isfinite(loss.item())) throw NumericError("backbone pretraining diverged (non-finite loss)");
      backward(loss);
      adam_step(params, adam);
      epoch_loss += loss.item();
      ++steps;
    }
    epoch_loss /= static_cast<double>(std::max<std::size_t>(1, steps));
  }
  net.freeze();
  const double val_iou = backbone_iou(net, val);
  if (report) *report = {val_iou, epoch_loss};
  if (val_iou < spec.iou_floor) {
    std::ostringstream os;
    os << "pretrained backbone reached held-out IoU " << val_iou << " < floor " << spec.iou_floor
       << " (final train loss " << epoch_loss << ", " << spec.epochs << " epochs)";
    throw PretrainError(os.str());
  }
  return net;
}

}  // namespace casam::synth
