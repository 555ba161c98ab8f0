#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "casam/align/alignment.hpp"
#include "casam/tensor/parameter.hpp"
#include "casam/tensor/rng.hpp"

namespace casam::router {

using Feature = std::vector<float>;

// --- pooling -----------------------------------------------------------------

/// alpha_p = softmax_p(||Z[:,p]||_2 / (C*T)), f = sum_p alpha_p Z[:,p].
/// `z` is one [C,h,w] map. Computed in double, returned as float.
[[nodiscard]] Feature attention_pool(std::span<const float> z, std::size_t C, std::size_t h, std::size_t w,
                                     double temperature);
/// The attention weights alone (length h*w).
[[nodiscard]] std::vector<double> attention_weights(std::span<const float> z, std::size_t C, std::size_t h,
                                                    std::size_t w, double temperature);
[[nodiscard]] Feature mean_pool(std::span<const float> z, std::size_t C, std::size_t h, std::size_t w);

enum class Pooling { attention, gap, mean, flatten, learnable };
[[nodiscard]] std::string_view to_string(Pooling p);
[[nodiscard]] Pooling pooling_from_string(std::string_view name);

struct PoolingConfig {
  Pooling kind = Pooling::attention;
  double temperature = 1.0;
  std::size_t flatten_dim = synth::kFeatureChannels;
  std::uint64_t projection_seed = 0x5eed;
};

/// Fixed (non-learned) pooling of frozen feature maps. The learnable variant
/// passes the raw map through; its query lives in each TaskVAE.
class Pooler {
 public:
  explicit Pooler(PoolingConfig config);
  [[nodiscard]] const PoolingConfig& config() const { return config_; }
  /// Length of the rows fed to the VAEs.
  [[nodiscard]] std::size_t row_dim() const;
  [[nodiscard]] Feature operator()(std::span<const float> z) const;

 private:
  PoolingConfig config_;
  std::vector<float> projection_;  // flatten: [flatten_dim, C*h*w]
};

// --- VAE ---------------------------------------------------------------------

enum class ElboMode { train, score };

struct VaeOptions {
  double beta = 16.5;
  std::size_t latent_dim = 8;
  std::size_t hidden_dim = 64;
  std::size_t epochs = 10;
  std::size_t batch = 4;
  float lr = 5e-4f;
  std::uint64_t seed = 0;
};

/// enc: D -> hidden (ReLU) -> (mu, logvar); dec: latent -> hidden (ReLU) -> D.
/// With a query (learnable pooling) the input rows are raw [C*h*w] maps that
/// the VAE pools itself by softmax over q.Z[:,p].
class TaskVAE {
 public:
  TaskVAE() = default;
  TaskVAE(std::size_t input_dim, const VaeOptions& options, bool learnable_query = false);

  [[nodiscard]] std::size_t input_dim() const { return input_dim_; }
  [[nodiscard]] std::size_t feature_dim() const;
  [[nodiscard]] std::size_t latent_dim() const { return latent_dim_; }
  [[nodiscard]] std::size_t hidden_dim() const { return hidden_dim_; }
  [[nodiscard]] double beta() const { return beta_; }
  void set_beta(double beta) { beta_ = beta; }
  [[nodiscard]] bool has_query() const { return has_query_; }

  /// Rows [B,input_dim] -> pooled features [B,D] (identity without a query).
  [[nodiscard]] tensor::Tensor embed(const tensor::Tensor& rows) const;
  /// Per-sample ELBO [B]: (1/D)||f - f_hat||^2 + (beta/2) sum_i (mu^2 + s^2 - 1 - log s^2).
  /// Train mode decodes z = mu + s*eps (eps from `rng`); score mode decodes mu.
  [[nodiscard]] tensor::Tensor per_sample_elbo(const tensor::Tensor& rows, ElboMode mode,
                                               tensor::Rng* rng = nullptr) const;
  struct Parts {
    tensor::Tensor mu, logvar, reconstruction, features;
  };
  [[nodiscard]] Parts forward(const tensor::Tensor& rows, ElboMode mode, tensor::Rng* rng) const;

  [[nodiscard]] tensor::ParameterRefs parameters();
  [[nodiscard]] tensor::Checkpoint checkpoint(int task_id) const;
  static TaskVAE from_checkpoint(const tensor::Checkpoint& ck, double beta);

  // Named parameters, exposed for oracles and hand-set tests.
  tensor::Parameter enc_w, enc_b, mu_w, mu_b, logvar_w, logvar_b, dec_w, dec_b, out_w, out_b, query;

 private:
  std::size_t input_dim_ = 0, latent_dim_ = 0, hidden_dim_ = 0;
  double beta_ = 0.0;
  bool has_query_ = false;
};

/// Mean ELBO over the rows of `features` [B,input_dim] (scalar).
[[nodiscard]] tensor::Tensor elbo_loss(const TaskVAE& vae, const tensor::Tensor& features, ElboMode mode,
                                       tensor::Rng* rng = nullptr);
/// Score-mode ELBO of each row, as doubles.
[[nodiscard]] std::vector<double> score(const TaskVAE& vae, std::span<const Feature> rows);

struct VaeTrainReport {
  std::vector<double> epoch_loss;  // mean train-mode ELBO per epoch
};

/// Adam on the train-mode ELBO. The decoder's output bias starts at the mean
/// training feature. Requires at least two rows; throws NumericError on NaN.
[[nodiscard]] TaskVAE train_vae(std::span<const Feature> rows, const VaeOptions& options,
                                bool learnable_query = false, VaeTrainReport* report = nullptr);

// --- calibration ---------------------------------------------------------------

enum class ThresholdRule { mu_plus_2sigma, p95, p97, p99 };
[[nodiscard]] std::string_view to_string(ThresholdRule r);
[[nodiscard]] ThresholdRule threshold_rule_from_string(std::string_view name);

/// Nearest-rank percentile: sorted[ceil(p/100 * n) - 1].
[[nodiscard]] double nearest_rank(std::vector<double> values, double percentile);
/// Applies a rule to a score sample (mu + 2 sigma uses the population sigma).
[[nodiscard]] double apply_rule(std::span<const double> scores, ThresholdRule rule);

struct Calibration {
  std::vector<double> held_out_scores;  // pooled over folds, in sample order
  double tau = 0.0;
};

/// K-fold: each fold's VAE is trained on the other K-1 folds and scores the
/// held-out fold; the rule is applied to the pooled held-out scores.
[[nodiscard]] Calibration calibrate_threshold(std::span<const Feature> rows, const VaeOptions& options,
                                              bool learnable_query, std::size_t K, ThresholdRule rule);

// --- routing -------------------------------------------------------------------

struct RouterEntry {
  align::AlignmentLayer layer = align::AlignmentLayer::identity();
  TaskVAE vae;
  double tau = 0.0;
};

struct RouterSettings {
  PoolingConfig pooling;
  VaeOptions vae;
  std::size_t folds = 5;
  ThresholdRule rule = ThresholdRule::p97;
};

class RouterPool {
 public:
  RouterPool() : RouterPool(RouterSettings{}) {}
  explicit RouterPool(RouterSettings settings);

  void add(int task_id, RouterEntry entry);
  [[nodiscard]] bool empty() const { return entries_.empty(); }
  [[nodiscard]] const std::map<int, RouterEntry>& entries() const { return entries_; }
  [[nodiscard]] std::map<int, RouterEntry>& entries() { return entries_; }
  [[nodiscard]] const RouterEntry& at(int task_id) const { return entries_.at(task_id); }
  [[nodiscard]] const align::AlignmentLayer& identity_layer() const { return identity_; }
  [[nodiscard]] const RouterSettings& settings() const { return settings_; }
  [[nodiscard]] const Pooler& pooler() const { return pooler_; }
  /// The layer a decision selects (identity for OOD).
  [[nodiscard]] const align::AlignmentLayer& layer_for(int chosen) const;

 private:
  RouterSettings settings_;
  Pooler pooler_;
  std::map<int, RouterEntry> entries_;
  align::AlignmentLayer identity_ = align::AlignmentLayer::identity();
};

struct RouteDecision {
  int chosen = metrics::kOodRoute;
  std::map<int, double> scores;
  double threshold_used = 0.0;
};

/// Pools Z (one [C,h,w] map), scores every task VAE and picks the argmin
/// (ties to the lowest task id); OOD when that score exceeds its threshold.
[[nodiscard]] RouteDecision route(const RouterPool& pool, std::span<const float> z);
/// Same rule applied to `n` maps laid out contiguously; VAEs score in batches.
[[nodiscard]] std::vector<RouteDecision> route_many(const RouterPool& pool, std::span<const float> maps,
                                                    std::size_t n);
/// Decision from precomputed scores.
[[nodiscard]] RouteDecision decide(const RouterPool& pool, std::map<int, double> scores);

/// Trains the VAE on a task's frozen features and calibrates its threshold.
[[nodiscard]] RouterEntry build_entry(const RouterPool& pool, align::AlignmentLayer layer,
                                      const synth::EncodedSet& train_features, int task_id);
/// Rows the pool's VAEs consume for each cached map.
[[nodiscard]] std::vector<Feature> router_rows(const RouterPool& pool, const synth::EncodedSet& features);

/// Manifest `pool.json` plus per-task `layer_<id>.ckpt` / `vae_<id>.ckpt`.
void save_pool(const RouterPool& pool, const std::filesystem::path& dir);
[[nodiscard]] RouterPool load_pool(const std::filesystem::path& dir);

}  // namespace casam::router
