#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace casam::metrics {

using Mask = std::vector<std::uint8_t>;

/// Thresholds probabilities/targets at 0.5.
[[nodiscard]] Mask binarize(std::span<const float> values);
/// Thresholds logits at 0 (probability 0.5).
[[nodiscard]] Mask binarize_logits(std::span<const float> logits);

/// |pred & truth| / |pred | truth|; 1 when both are empty.
[[nodiscard]] double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

/// Pixels of `mask` within Chebyshev distance d of its boundary: the mask
/// minus its erosion by a (2d+1)x(2d+1) square, with everything outside the
/// image treated as background.
[[nodiscard]] Mask boundary_band(std::span<const std::uint8_t> mask, std::size_t width, std::size_t height,
                                 std::size_t d);
/// IoU of the two boundary bands.
[[nodiscard]] double biou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                          std::size_t width, std::size_t height, std::size_t d);
/// ceil(0.02 * diagonal); 2 for 64x64 images.
[[nodiscard]] std::size_t default_band(std::size_t width, std::size_t height);

struct TaskScore {
  double iou = 0.0;
  double biou = 0.0;
  std::size_t n = 0;
};

inline constexpr int kOodRoute = -1;

struct RouteRecord {
  int true_task = 0;  // kOodRoute for out-of-distribution inputs
  int chosen = 0;     // kOodRoute when the identity layer was selected
};

/// per_stage[t][k] holds task k's scores after training stage t (k <= t).
struct StageMetrics {
  std::vector<std::vector<TaskScore>> per_stage;
  std::vector<RouteRecord> routing_log;

  [[nodiscard]] std::size_t stages() const { return per_stage.size(); }
  /// Throws std::invalid_argument unless the matrix is lower-triangular,
  /// complete, in [0,1] and n_k is constant across stages.
  void validate() const;
};

struct Aggregate {
  double last_iou = 0.0, avg_iou = 0.0, ff_iou = 0.0;
  double last_biou = 0.0, avg_biou = 0.0, ff_biou = 0.0;
};

/// n_k-weighted stage means, Last = stage N, Avg = mean over stages,
/// FF = mean over k < N of f_{k,N} with f_{k,t} = max(0, max_{j<t} S_{k,j} - S_{k,t}).
/// All values are fractions in [0,1]; FF is 0 for a single stage.
[[nodiscard]] Aggregate stage_aggregate(const StageMetrics& sm);
/// n_k-weighted mean over tasks 0..t at stage t.
[[nodiscard]] double stage_iou(const StageMetrics& sm, std::size_t t);
[[nodiscard]] double stage_biou(const StageMetrics& sm, std::size_t t);
/// f_{k,t} on IoU (biou = false) or BIoU.
[[nodiscard]] double forgetting(const StageMetrics& sm, std::size_t k, std::size_t t, bool biou = false);

struct RoutingAccuracy {
  std::map<int, std::pair<std::size_t, std::size_t>> per_task;  // true task -> (correct, total)
  std::optional<double> in_distribution;  // absent when no in-distribution records
  std::optional<double> ood;              // absent when no OOD records
};

[[nodiscard]] RoutingAccuracy routing_accuracy(std::span<const RouteRecord> log);

/// 1/2 sum |p - q|.
[[nodiscard]] double tv_distance(std::span<const double> p, std::span<const double> q);
/// 1/2 (KL(p||m) + KL(q||m)), m = (p+q)/2, natural log, 0 log 0 = 0.
[[nodiscard]] double js_divergence(std::span<const double> p, std::span<const double> q);

struct HistogramPair {
  std::vector<double> first;
  std::vector<double> second;
  std::size_t bins = 0;
};

/// Per-dimension histograms of two feature sets over the per-dimension
/// min/max of both sets pooled, each normalized and then averaged over
/// dimensions into one distribution per set.
[[nodiscard]] HistogramPair feature_histograms(const std::vector<std::vector<float>>& a,
                                               const std::vector<std::vector<float>>& b,
                                               std::size_t bins = 32);

}  // namespace casam::metrics
