#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <map>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "internal.hpp"
#include "casam/tensor/init.hpp"
#include "casam/tensor/ops.hpp"

namespace casam::strategies {

using namespace casam::tensor;
using align::SegExample;

// --- config ------------------------------------------------------------------

namespace {
constexpr std::array kKinds{StrategyKind::naive, StrategyKind::lwf, StrategyKind::ewc, StrategyKind::er,
                            StrategyKind::der,   StrategyKind::l2p, StrategyKind::moda, StrategyKind::emr,
                            StrategyKind::joint, StrategyKind::casam};
}

std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::naive: return "naive";
    case StrategyKind::lwf: return "lwf";
    case StrategyKind::ewc: return "ewc";
    case StrategyKind::er: return "er";
    case StrategyKind::der: return "der";
    case StrategyKind::l2p: return "l2p";
    case StrategyKind::moda: return "moda";
    case StrategyKind::emr: return "emr";
    case StrategyKind::joint: return "joint";
    case StrategyKind::casam: return "casam";
  }
  return "?";
}

StrategyKind strategy_from_string(std::string_view name) {
  for (auto k : kKinds)
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

bool exemplar_free(StrategyKind k) {
  switch (k) {
    case StrategyKind::er:
    case StrategyKind::der:
    case StrategyKind::moda:
    case StrategyKind::joint:
      return false;
    default:
      return true;
  }
}

std::string_view to_string(MemoryPolicy p) {
  return p == MemoryPolicy::reservoir ? "reservoir" : "per_task_quota";
}

MemoryPolicy memory_policy_from_string(std::string_view name) {
  if (name == "reservoir") return MemoryPolicy::reservoir;
  if (name == "per_task_quota") return MemoryPolicy::per_task_quota;
  throw std::invalid_argument("unknown memory policy '" + std::string(name) + "'");
}

void StrategyConfig::validate() const {
  if (!(lambda_distill >= 0.0) || !(lambda_ewc >= 0.0)) throw std::invalid_argument("lambdas must be >= 0");
  if (!(der_alpha >= 0.0)) throw std::invalid_argument("der_alpha must be >= 0");
  if (n_blocks == 0) throw std::invalid_argument("n_blocks must be positive");
  if (train.batch == 0) throw std::invalid_argument("train.batch must be positive");
  if (!(train.lr > 0.0f)) throw std::invalid_argument("train.lr must be positive");
  if (kind == StrategyKind::l2p) {
    if (prompt_pool_size == 0 || top_k == 0) throw std::invalid_argument("L2P needs a non-empty pool and k >= 1");
    if (top_k > prompt_pool_size) throw std::invalid_argument("top_k exceeds the prompt pool");
  }
  if (router.folds < 2) throw std::invalid_argument("router folds must be >= 2");
}

std::string StrategyConfig::label() const {
  std::string s(to_string(kind));
  if (kind == StrategyKind::casam && oracle_routing) s += "-oracle";
  return s;
}

// --- stream context ------------------------------------------------------------

StreamContext::StreamContext(const synth::Backbone& backbone, const synth::Stream& stream) : backbone_(&backbone) {
  if (!backbone.frozen()) throw std::logic_error("strategies need a frozen backbone");
  tasks_.reserve(stream.size());
  for (const auto& t : stream) {
    for (const auto& other : tasks_)
      if (other.spec.task_id == t.spec.task_id) throw std::invalid_argument("duplicate task id in stream");
    TaskCache c;
    c.spec = t.spec;
    c.train = &t.train;
    c.test = &t.test;
    c.train_features = synth::encode_dataset(backbone, t.train);
    c.test_features = synth::encode_dataset(backbone, t.test);
    tasks_.push_back(std::move(c));
  }
  // Items point into the cached features, so build them once tasks_ is final.
  for (auto& c : tasks_) {
    c.train_items = align::examples(c.train_features, *c.train);
    c.test_items = align::examples(c.test_features, *c.test);
  }
}

std::size_t StreamContext::position_of(int task_id) const {
  for (std::size_t i = 0; i < tasks_.size(); ++i)
    if (tasks_[i].spec.task_id == task_id) return i;
  throw std::out_of_range("task " + std::to_string(task_id) + " is not in the stream");
}

std::span<const SegExample> StreamContext::train_items(std::size_t position) {
  const auto& c = tasks_.at(position);
  access_.push_back({stage_, c.spec.task_id, position});
  return c.train_items;
}

void StreamContext::log_read(int task_id, std::size_t count) {
  const std::size_t pos = position_of(task_id);
  for (std::size_t i = 0; i < count; ++i) access_.push_back({stage_, task_id, pos});
}

void StreamContext::begin_run() {
  stage_ = 0;
  access_.clear();
}

bool StreamContext::observed_exemplar_free() const {
  return std::none_of(access_.begin(), access_.end(), [](const AccessRecord& r) { return r.position < r.stage; });
}

std::uint64_t init_seed(const StrategyConfig& cfg) { return derive_seed(cfg.seed, "alignment-init"); }
std::uint64_t task_seed(const StrategyConfig& cfg, int task_id) {
  return derive_seed(cfg.seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(task_id)));
}

const align::AlignmentLayer& StreamContext::isolated_layer(std::size_t position, const StrategyConfig& cfg) {
  const int id = tasks_.at(position).spec.task_id;
  const auto items = train_items(position);
  const std::string key = std::to_string(cfg.seed) + "/" + std::to_string(cfg.n_blocks) + "/" +
                          std::to_string(cfg.train.epochs) + "/" + std::to_string(cfg.train.batch) + "/" +
                          std::to_string(std::bit_cast<std::uint32_t>(cfg.train.lr)) + "/" + std::to_string(id);
  if (cache_layers_) {
    if (auto it = layers_.find(key); it != layers_.end()) return it->second;
  }
  auto layer = align::AlignmentLayer::for_backbone(id, cfg.n_blocks, init_seed(cfg), *backbone_);
  auto opts = cfg.train;
  opts.seed = task_seed(cfg, id);
  (void)align::train_alignment(items, *backbone_, layer, opts);
  set_trainable(layer.parameters(), false);
  if (!cache_layers_) layers_.erase(key);
  return layers_.insert_or_assign(key, std::move(layer)).first->second;
}

// --- memory ------------------------------------------------------------------

MemoryBank::MemoryBank(std::size_t capacity, MemoryPolicy policy, std::uint64_t seed)
    : capacity_(capacity), policy_(policy), rng_(derive_seed(seed, "memory-bank")) {}

const std::vector<MemoryEntry>& MemoryBank::items(StreamContext& ctx) const {
  for (const auto& e : entries_) ctx.log_read(e.task_id);
  return entries_;
}

void MemoryBank::offer(const MemoryEntry& entry) {
  if (policy_ != MemoryPolicy::reservoir) throw std::logic_error("offer() needs the reservoir policy");
  ++seen_;
  if (capacity_ == 0) return;
  if (entries_.size() < capacity_) {
    entries_.push_back(entry);
    return;
  }
  const auto j = static_cast<std::size_t>(rng_.below(seen_));
  if (j < capacity_) entries_[j] = entry;
}

void MemoryBank::add_task(std::span<const MemoryEntry> candidates) {
  if (policy_ == MemoryPolicy::reservoir) {
    for (const auto& e : candidates) offer(e);
    return;
  }
  if (candidates.empty()) return;
  const int id = candidates.front().task_id;
  task_order_.push_back(id);
  seen_ += candidates.size();
  const std::size_t n_tasks = task_order_.size();
  auto quota = [&](std::size_t rank) { return capacity_ / n_tasks + (rank < capacity_ % n_tasks ? 1 : 0); };
  // Shrink earlier tasks, keeping their oldest picks.
  std::vector<MemoryEntry> kept;
  for (std::size_t r = 0; r + 1 < n_tasks; ++r) {
    std::size_t left = quota(r);
    for (const auto& e : entries_)
      if (e.task_id == task_order_[r] && left > 0) {
        kept.push_back(e);
        --left;
      }
  }
  auto order = rng_.permutation(candidates.size());
  const std::size_t take = std::min(quota(n_tasks - 1), candidates.size());
  for (std::size_t i = 0; i < take; ++i) kept.push_back(candidates[order[i]]);
  entries_ = std::move(kept);
}

// --- task vectors --------------------------------------------------------------

TaskVector TaskVector::between(std::span<const float> tuned, std::span<const float> init) {
  if (tuned.size() != init.size()) throw DimensionError("task vector operands differ in length");
  TaskVector v;
  v.delta.resize(tuned.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < tuned.size(); ++i) {
    v.delta[i] = static_cast<double>(tuned[i]) - static_cast<double>(init[i]);
    sq += v.delta[i] * v.delta[i];
  }
  v.norm = std::sqrt(sq);
  return v;
}

namespace {
int sign(double x) { return (x > 0.0) - (x < 0.0); }
}  // namespace

std::vector<double> elect(std::span<const TaskVector> vectors) {
  if (vectors.empty()) throw std::invalid_argument("election needs at least one task vector");
  const std::size_t n = vectors.front().delta.size();
  for (const auto& v : vectors)
    if (v.delta.size() != n) throw DimensionError("task vectors differ in length");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int s = sign(vectors.front().delta[i]);
    if (s == 0) continue;
    double best = 0.0;
    bool agree = true;
    for (const auto& v : vectors) {
      if (sign(v.delta[i]) != s) {
        agree = false;
        break;
      }
      if (std::abs(v.delta[i]) > std::abs(best)) best = v.delta[i];
    }
    if (agree) out[i] = best;
  }
  return out;
}

std::vector<double> emr_mask(std::span<const double> unified, const TaskVector& task) {
  if (unified.size() != task.delta.size()) throw DimensionError("mask operands differ in length");
  std::vector<double> m(unified.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = sign(unified[i]) == sign(task.delta[i]) ? 1.0 : 0.0;
  return m;
}

double emr_scale(std::span<const double> unified, std::span<const double> mask, const TaskVector& task) {
  double sq = 0.0;
  for (std::size_t i = 0; i < unified.size(); ++i) sq += mask[i] * unified[i] * mask[i] * unified[i];
  const double denom = std::sqrt(sq);
  return denom == 0.0 ? 0.0 : task.norm / denom;
}

std::vector<float> emr_merge(std::span<const float> init, std::span<const double> unified, const TaskVector& task) {
  if (init.size() != unified.size()) throw DimensionError("merge operands differ in length");
  const auto mask = emr_mask(unified, task);
  const double lambda = emr_scale(unified, mask, task);
  std::vector<float> out(init.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(init[i]) + lambda * mask[i] * unified[i]);
  return out;
}

// --- EWC ---------------------------------------------------------------------

std::vector<float> empirical_fisher(std::span<const SegExample> items, const synth::Backbone& backbone,
                                    align::AlignmentLayer& layer) {
  auto params = layer.parameters();
  std::vector<bool> was_trainable;
  for (auto* p : params) {
    was_trainable.push_back(p->trainable());
    p->set_trainable(true);
  }
  std::vector<double> acc(parameter_count(params), 0.0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t pos[1] = {i};
    const auto batch = align::make_batch(items, pos, nullptr);
    backward(synth::segmentation_loss(backbone.decode(layer.forward(batch.z), batch.boxes), batch.masks));
    std::size_t off = 0;
    for (auto* p : params) {
      if (p->value().has_grad()) {
        const auto g = p->value().grad();
        for (std::size_t j = 0; j < g.size(); ++j) acc[off + j] += static_cast<double>(g[j]) * g[j];
      }
      off += p->numel();
    }
    clear_grads(params);
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->set_trainable(was_trainable[k]);
  std::vector<float> fisher(acc.size());
  const double n = static_cast<double>(std::max<std::size_t>(items.size(), 1));
  for (std::size_t j = 0; j < acc.size(); ++j) fisher[j] = static_cast<float>(acc[j] / n);
  return fisher;
}

Tensor ewc_penalty(const ParameterRefs& params, std::span<const float> reference, std::span<const float> fisher,
                   double lambda) {
  const std::size_t total = parameter_count(params);
  if (reference.size() != total || fisher.size() != total) throw DimensionError("EWC buffers do not match params");
  Tensor out;
  std::size_t off = 0;
  for (auto* p : params) {
    const Tensor term =
        weighted_sq_diff(p->value(), reference.subspan(off, p->numel()), fisher.subspan(off, p->numel()));
    out = out.defined() ? add(out, term) : term;
    off += p->numel();
  }
  if (!out.defined()) return Tensor::scalar(0.0f);
  return scale(out, static_cast<float>(lambda));
}

// --- L2P ---------------------------------------------------------------------

PromptPool::PromptPool(std::size_t size, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "prompt-pool"));
  for (std::size_t i = 0; i < size; ++i) {
    keys.emplace_back("l2p.key" + std::to_string(i), normal_tensor({synth::kFeatureChannels}, 1.0f, rng));
    prompts.emplace_back("l2p.prompt" + std::to_string(i),
                         normal_tensor({synth::kFeatureChannels, synth::kFeatureSize, synth::kFeatureSize}, 0.01f, rng));
  }
}

std::vector<std::size_t> PromptPool::select(std::span<const float> query, std::size_t k, std::size_t lo,
                                            std::size_t hi) const {
  if (lo >= hi || hi > keys.size()) throw std::out_of_range("prompt slot range is empty or out of bounds");
  double qn = 0.0;
  for (float q : query) qn += static_cast<double>(q) * q;
  qn = std::sqrt(qn);
  std::vector<std::pair<double, std::size_t>> sims;
  for (std::size_t j = lo; j < hi; ++j) {
    const auto key = keys[j].value().data();
    if (key.size() != query.size()) throw DimensionError("query and key dims differ");
    double dot = 0.0, kn = 0.0;
    for (std::size_t c = 0; c < key.size(); ++c) {
      dot += static_cast<double>(key[c]) * query[c];
      kn += static_cast<double>(key[c]) * key[c];
    }
    const double denom = std::sqrt(kn) * qn;
    sims.emplace_back(denom > 0.0 ? dot / denom : 0.0, j);
  }
  std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(k, sims.size()); ++i) out.push_back(sims[i].second);
  return out;
}

// --- MoDA classifier -----------------------------------------------------------

TaskClassifier::TaskClassifier(std::size_t feature_dim, std::size_t n_classes, std::uint64_t seed) {
  if (n_classes == 0 || feature_dim == 0) throw std::invalid_argument("classifier needs classes and features");
  Rng rng(derive_seed(seed, "task-classifier"));
  weight_ = Parameter("moda.w", fan_in_uniform({n_classes, feature_dim}, feature_dim, rng));
  bias_ = Parameter("moda.b", Tensor({n_classes}, 0.0f));
}

void TaskClassifier::fit(std::span<const router::Feature> rows, std::span<const std::size_t> labels,
                         std::size_t epochs, float lr) {
  if (rows.size() != labels.size()) throw std::invalid_argument("rows and labels differ in count");
  if (rows.empty()) return;
  const std::size_t D = weight_.shape()[1];
  Tensor x({rows.size(), D});
  auto xd = x.mutable_data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != D) throw DimensionError("classifier row has the wrong width");
    std::copy(rows[i].begin(), rows[i].end(), xd.begin() + i * D);
  }
  const ParameterRefs params{&weight_, &bias_};
  for (std::size_t e = 0; e < epochs; ++e) {
    const Tensor loss = cross_entropy(linear(x, weight_.value(), bias_.value()), labels);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite classifier loss");
    backward(loss);
    adam_step(params, {.lr = lr});
  }
}

std::size_t TaskClassifier::predict(std::span<const float> row) const {
  const auto w = weight_.value().data();
  const auto b = bias_.value().data();
  const std::size_t D = weight_.shape()[1], N = weight_.shape()[0];
  if (row.size() != D) throw DimensionError("classifier row has the wrong width");
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < N; ++n) {
    double v = b[n];
    for (std::size_t d = 0; d < D; ++d) v += static_cast<double>(w[n * D + d]) * row[d];
    if (v > best_v) {
      best_v = v;
      best = n;
    }
  }
  return best;
}

// --- evaluation ------------------------------------------------------------------

metrics::TaskScore evaluate_assigned(std::span<const SegExample> items, const synth::Backbone& backbone,
                                     std::span<const align::AlignmentLayer* const> layers) {
  if (items.size() != layers.size()) throw std::invalid_argument("one layer per item required");
  metrics::TaskScore total;
  total.n = items.size();
  if (items.empty()) return total;
  std::vector<const align::AlignmentLayer*> distinct;
  for (const auto* l : layers)
    if (std::find(distinct.begin(), distinct.end(), l) == distinct.end()) distinct.push_back(l);
  for (const auto* l : distinct) {
    std::vector<SegExample> group;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (layers[i] == l) group.push_back(items[i]);
    const auto s = align::evaluate(group, backbone, align::apply_layer(*l));
    total.iou += s.iou * static_cast<double>(s.n);
    total.biou += s.biou * static_cast<double>(s.n);
  }
  total.iou /= static_cast<double>(items.size());
  total.biou /= static_cast<double>(items.size());
  return total;
}

}  // namespace casam::strategies
