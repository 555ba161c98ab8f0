#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "casam/experiment/config.hpp"

namespace casam::experiment {

class MissingCacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cache key of a backbone: content hash of (spec, seed).
[[nodiscard]] std::uint64_t backbone_key(const BackboneConfig& cfg);
[[nodiscard]] std::filesystem::path backbone_cache_path(const BackboneConfig& cfg);
/// Loads the cached backbone, or pretrains and caches it. Throws
/// MissingCacheError when the cache is absent and pretraining is disabled.
[[nodiscard]] synth::Backbone obtain_backbone(const BackboneConfig& cfg, bool* trained = nullptr);

/// Stream tasks in config order; pixels depend only on (stream seed, task id).
[[nodiscard]] synth::Stream build_stream(const StreamConfig& cfg);

/// One out-of-distribution evaluation set with cached features.
struct OodSet {
  synth::TaskSpec spec;
  synth::Dataset data;
  synth::EncodedSet features;
  std::vector<align::SegExample> items;
};

/// Backbone, stream and OOD suite of one config, with cached features.
/// Not movable: the context and the item lists point into the owned data.
class Workspace {
 public:
  explicit Workspace(const ExperimentConfig& cfg);
  Workspace(const ExperimentConfig& cfg, const synth::Backbone& backbone);
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  [[nodiscard]] const ExperimentConfig& config() const { return cfg_; }
  [[nodiscard]] const synth::Backbone& backbone() const { return *backbone_; }
  [[nodiscard]] const synth::Stream& stream() const { return stream_; }
  [[nodiscard]] strategies::StreamContext& context() { return *ctx_; }
  /// [0] is the held-out catalog task, then the oversized stream tasks.
  [[nodiscard]] const std::vector<OodSet>& ood_suite() const { return ood_; }

 private:
  ExperimentConfig cfg_;
  std::unique_ptr<synth::Backbone> backbone_;
  synth::Stream stream_;
  std::unique_ptr<strategies::StreamContext> ctx_;
  std::vector<OodSet> ood_;
};

struct StrategyOutcome {
  std::string method;
  bool ok = false;
  std::string error;
  bool exemplar_free = false;
  bool observed_exemplar_free = false;
  metrics::StageMetrics stages;
  metrics::Aggregate aggregate;
  std::vector<int> task_order;
  std::size_t alignment_layers = 0;
  /// Task-agnostic IoU/BIoU on the held-out OOD task.
  std::optional<metrics::TaskScore> ood_score;
  /// Routed strategies: last-stage in-distribution accuracy and the fraction
  /// of OOD-suite inputs sent to the identity layer.
  std::optional<double> route_in_distribution, route_ood;
  std::optional<router::RouterPool> pool;
};

/// Runs one strategy on the workspace stream and scores it. Exceptions from
/// training are caught and reported as a failed outcome.
[[nodiscard]] StrategyOutcome run_one(Workspace& ws, const strategies::StrategyConfig& cfg);
/// Scores a finished strategy run (aggregates, OOD IoU, routing accuracy).
[[nodiscard]] StrategyOutcome score_result(Workspace& ws, strategies::StrategyResult result);

struct ReportBundle {
  std::string name;
  std::uint64_t config_hash = 0;
  std::uint64_t backbone_hash = 0;
  std::vector<int> task_order;
  /// Identity-layer (frozen backbone) score on the held-out OOD task.
  metrics::TaskScore identity_ood;
  std::vector<StrategyOutcome> outcomes;  // config order

  [[nodiscard]] bool all_ok() const;
};

struct RunOptions {
  std::size_t jobs = 1;  // worker threads, each with its own context
  bool save_pools = true;
};

/// Pretrain or load the backbone, build the stream, run every strategy and
/// write the report into cfg.output_dir.
[[nodiscard]] ReportBundle run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

/// Writes manifest.json, summary.csv, zero_shot.csv, routing.csv and
/// stages/<method>.csv. Every number is printed with fixed precision.
void emit_report(const ReportBundle& bundle, const std::filesystem::path& dir);

enum class SweepAxis { temperature, beta, tau_rule, pooling, n_blocks };
[[nodiscard]] std::string_view to_string(SweepAxis a);
[[nodiscard]] SweepAxis sweep_axis_from_string(std::string_view name);

struct SweepRow {
  std::string value;
  double route_in_distribution = 0.0;  // fractions, averaged over router seeds
  double route_ood = 0.0;
  double coverage = 0.0;  // training features scoring <= tau
  metrics::Aggregate aggregate;
  metrics::TaskScore ood_score;
  std::size_t seeds = 0;
};

struct SweepTable {
  SweepAxis axis = SweepAxis::temperature;
  std::vector<SweepRow> rows;
};

/// Routed casam at every grid point of `axis`. Router axes average over
/// ablation.router_seeds; the n_blocks axis retrains alignment layers and
/// uses the first router seed only. The base strategy is the config's first
/// casam entry (defaults otherwise).
[[nodiscard]] SweepTable ablation_sweep(Workspace& ws, SweepAxis axis);
void write_sweep(const SweepTable& table, const std::filesystem::path& path);

/// Rebuilds summary rows from the stage tables in a report directory.
struct SummaryRow {
  std::string method;
  bool exemplar_free = false;
  metrics::Aggregate aggregate;
};
[[nodiscard]] std::vector<SummaryRow> summary_from_stages(const std::filesystem::path& dir);
[[nodiscard]] std::string format_summary(std::span<const SummaryRow> rows);

/// Score `dataset` (an exported stream directory) with a saved pool; writes
/// one row per test sample and returns the per-task routing accuracy.
[[nodiscard]] metrics::RoutingAccuracy route_dataset(const synth::Backbone& backbone,
                                                     const std::filesystem::path& pool_dir,
                                                     const std::filesystem::path& dataset_dir,
                                                     const std::filesystem::path& out_csv);

}  // namespace casam::experiment
