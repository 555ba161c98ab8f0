#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "casam/align/alignment.hpp"
#include "casam/router/router.hpp"

namespace casam::strategies {

enum class StrategyKind { naive, lwf, ewc, er, der, l2p, moda, emr, joint, casam };

[[nodiscard]] std::string_view to_string(StrategyKind k);
[[nodiscard]] StrategyKind strategy_from_string(std::string_view name);
/// Table-1 "EF" semantics: the strategy never reads stored past samples.
[[nodiscard]] bool exemplar_free(StrategyKind k);

enum class MemoryPolicy { reservoir, per_task_quota };
[[nodiscard]] std::string_view to_string(MemoryPolicy p);
[[nodiscard]] MemoryPolicy memory_policy_from_string(std::string_view name);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::naive;
  double lambda_distill = 1.0;   // LwF
  double lambda_ewc = 100.0;     // EWC
  std::size_t memory_capacity = 32;  // ER, DER, MoDA
  MemoryPolicy memory_policy = MemoryPolicy::reservoir;
  double der_alpha = 0.5;
  std::size_t prompt_pool_size = 12;  // L2P
  std::size_t top_k = 2;
  bool prompt_slots = true;
  bool oracle_routing = false;  // casam: route by ground-truth task id
  std::size_t n_blocks = 4;
  align::TrainOptions train{.epochs = 8, .lr = 1e-3f, .batch = 6, .seed = 0};
  router::RouterSettings router;  // casam; MoDA pools with router.pooling
  std::size_t classifier_epochs = 200;  // MoDA
  float classifier_lr = 1e-2f;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on negative weights or inconsistent sizes.
  void validate() const;
  /// "naive", "casam-oracle", ...
  [[nodiscard]] std::string label() const;
};

// --- data access -------------------------------------------------------------

struct AccessRecord {
  std::size_t stage = 0;
  int task_id = 0;          // task whose training samples were read
  std::size_t position = 0;  // stream position of that task
};

/// One task of the stream with its cached frozen features.
struct TaskCache {
  synth::TaskSpec spec;
  const synth::Dataset* train = nullptr;
  const synth::Dataset* test = nullptr;
  synth::EncodedSet train_features, test_features;
  std::vector<align::SegExample> train_items, test_items;
};

/// Stream plus backbone, shared by every strategy of an experiment. Training
/// samples are only handed out through train_items()/MemoryBank::items(),
/// which log (stage, task) so exemplar-freeness can be checked afterwards.
class StreamContext {
 public:
  StreamContext(const synth::Backbone& backbone, const synth::Stream& stream);
  StreamContext(const StreamContext&) = delete;
  StreamContext& operator=(const StreamContext&) = delete;

  [[nodiscard]] const synth::Backbone& backbone() const { return *backbone_; }
  [[nodiscard]] std::size_t size() const { return tasks_.size(); }
  [[nodiscard]] const TaskCache& task(std::size_t position) const { return tasks_.at(position); }
  [[nodiscard]] std::size_t position_of(int task_id) const;

  /// Test examples are unrestricted (evaluation only).
  [[nodiscard]] std::span<const align::SegExample> test_items(std::size_t position) const {
    return tasks_.at(position).test_items;
  }
  /// Training examples of a task, logged as read during the current stage.
  [[nodiscard]] std::span<const align::SegExample> train_items(std::size_t position);
  void log_read(int task_id, std::size_t count = 1);

  void begin_run();
  void begin_stage(std::size_t stage) { stage_ = stage; }
  [[nodiscard]] std::size_t stage() const { return stage_; }
  [[nodiscard]] const std::vector<AccessRecord>& access_log() const { return access_; }
  /// True when no record of the current run reads a task from an earlier stage.
  [[nodiscard]] bool observed_exemplar_free() const;

  /// Layer trained on one task from the common init, cached per (config, task).
  [[nodiscard]] const align::AlignmentLayer& isolated_layer(std::size_t position, const StrategyConfig& cfg);
  void set_layer_cache(bool enabled) { cache_layers_ = enabled; }

 private:
  const synth::Backbone* backbone_;
  std::vector<TaskCache> tasks_;
  std::size_t stage_ = 0;
  std::vector<AccessRecord> access_;
  bool cache_layers_ = true;
  std::map<std::string, align::AlignmentLayer> layers_;
};

// --- memory ------------------------------------------------------------------

struct MemoryEntry {
  align::SegExample example;
  int task_id = 0;
  std::vector<float> logits;  // DER: logits at insertion time, empty otherwise
};

class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, MemoryPolicy policy, std::uint64_t seed);

  [[nodiscard]] std::size_t capacity() const { return capacity_; }
  [[nodiscard]] MemoryPolicy policy() const { return policy_; }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t seen() const { return seen_; }
  /// Unaudited view for inspection and tests.
  [[nodiscard]] const std::vector<MemoryEntry>& entries() const { return entries_; }
  /// Entries handed to training; each read is logged against its task.
  [[nodiscard]] const std::vector<MemoryEntry>& items(StreamContext& ctx) const;

  /// Reservoir: algorithm R over every offered entry. Per-task quota: the
  /// offered task gets floor(capacity / tasks) slots (earlier tasks absorb the
  /// remainder), chosen uniformly; older tasks shrink to their new quota.
  void add_task(std::span<const MemoryEntry> candidates);
  /// Single reservoir step (policy must be reservoir).
  void offer(const MemoryEntry& entry);

 private:
  std::size_t capacity_;
  MemoryPolicy policy_;
  tensor::Rng rng_;
  std::size_t seen_ = 0;
  std::vector<MemoryEntry> entries_;
  std::vector<int> task_order_;
};

// --- task vectors (EMR) ------------------------------------------------------

/// tau = A_tuned - A_init, held in double so init + tau recovers A_tuned exactly.
struct TaskVector {
  std::vector<double> delta;
  double norm = 0.0;

  static TaskVector between(std::span<const float> tuned, std::span<const float> init);
};

/// Coordinatewise election: where all task values share a strict sign, the
/// value of largest magnitude; 0 elsewhere.
[[nodiscard]] std::vector<double> elect(std::span<const TaskVector> vectors);
/// M_t: 1 where sign(unified) == sign(task), else 0.
[[nodiscard]] std::vector<double> emr_mask(std::span<const double> unified, const TaskVector& task);
/// lambda_t = ||tau_t|| / ||M_t * tau_uni||, 0 when the denominator is 0.
[[nodiscard]] double emr_scale(std::span<const double> unified, std::span<const double> mask, const TaskVector& task);
/// A_init + lambda_t * (M_t * tau_uni), rounded to float once.
[[nodiscard]] std::vector<float> emr_merge(std::span<const float> init, std::span<const double> unified,
                                           const TaskVector& task);

// --- EWC ---------------------------------------------------------------------

/// Empirical diagonal Fisher: mean over samples of the squared per-sample
/// gradient of the segmentation loss, one pass, tight boxes.
[[nodiscard]] std::vector<float> empirical_fisher(std::span<const align::SegExample> items,
                                                  const synth::Backbone& backbone, align::AlignmentLayer& layer);
/// lambda * sum_i F_i (A_i - ref_i)^2 over the layer's parameters (flattened order).
[[nodiscard]] tensor::Tensor ewc_penalty(const tensor::ParameterRefs& params, std::span<const float> reference,
                                         std::span<const float> fisher, double lambda);

// --- L2P ---------------------------------------------------------------------

struct PromptPool {
  std::vector<tensor::Parameter> keys;     // each [C]
  std::vector<tensor::Parameter> prompts;  // each [C,h,w]

  PromptPool(std::size_t size, std::uint64_t seed);
  /// Top-k keys by cosine similarity to `query`, restricted to [lo, hi);
  /// ties to the lower index.
  [[nodiscard]] std::vector<std::size_t> select(std::span<const float> query, std::size_t k, std::size_t lo,
                                                std::size_t hi) const;
};

// --- results -----------------------------------------------------------------

struct StrategyResult {
  std::string method;
  StrategyKind kind = StrategyKind::naive;
  bool exemplar_free = true;           // by construction
  bool observed_exemplar_free = true;  // from the access log
  metrics::StageMetrics stages;        // per_stage[t][k] by stream position
  std::vector<int> task_order;         // task id at each stream position
  std::size_t alignment_layers = 0;    // layers kept at the end of the run
  std::optional<router::RouterPool> pool;  // casam only
  std::uint64_t backbone_hash_before = 0, backbone_hash_after = 0;
  /// Task-agnostic inference on new inputs (absent for EMR and oracle casam,
  /// which need task ids).
  std::function<metrics::TaskScore(std::span<const align::SegExample>)> infer;
  /// Per-input routing decisions (task id or kOodRoute) for routed strategies.
  std::function<std::vector<int>(std::span<const align::SegExample>)> route;
};

[[nodiscard]] StrategyResult run_naive(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_lwf(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_ewc(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_er(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_der(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_l2p(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_moda(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_emr(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_joint(StreamContext& ctx, const StrategyConfig& cfg);
[[nodiscard]] StrategyResult run_casam(StreamContext& ctx, const StrategyConfig& cfg);
/// Dispatch on cfg.kind.
[[nodiscard]] StrategyResult run_strategy(StreamContext& ctx, const StrategyConfig& cfg);

// --- shared helpers ------------------------------------------------------------

/// Mean IoU/BIoU when each item is predicted with its own layer.
[[nodiscard]] metrics::TaskScore evaluate_assigned(std::span<const align::SegExample> items,
                                                   const synth::Backbone& backbone,
                                                   std::span<const align::AlignmentLayer* const> layers);

/// MoDA's router: softmax regression over pooled features.
class TaskClassifier {
 public:
  TaskClassifier(std::size_t feature_dim, std::size_t n_classes, std::uint64_t seed);
  void fit(std::span<const router::Feature> rows, std::span<const std::size_t> labels, std::size_t epochs, float lr);
  [[nodiscard]] std::size_t predict(std::span<const float> row) const;

 private:
  tensor::Parameter weight_, bias_;
};

}  // namespace casam::strategies
