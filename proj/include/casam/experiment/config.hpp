#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "casam/strategies/strategies.hpp"
#include "json.hpp"

namespace casam::experiment {

inline constexpr int kSchemaVersion = 1;

struct StreamConfig {
  std::vector<int> tasks{0, 1, 2};  // catalog ids, in training order
  std::size_t per_task_train = 200;
  std::size_t per_task_test = 100;
  std::size_t ood_test = 100;  // test samples per OOD-suite task
  std::uint64_t seed = 0;
};

struct BackboneConfig {
  synth::BackboneSpec spec;
  std::uint64_t seed = 0;
  std::filesystem::path cache_dir = "cache";
  bool allow_pretrain = true;
};

/// Grids for ablation_sweep. Router axes are averaged over router_seeds.
struct AblationConfig {
  std::vector<std::uint64_t> router_seeds{1, 2, 3, 4, 5};
  std::vector<double> temperatures{0.5, 1.0, 2.0, 4.0};
  std::vector<double> betas{0.0, 4.0, 16.5};
  std::vector<router::ThresholdRule> tau_rules{router::ThresholdRule::p95, router::ThresholdRule::p97,
                                               router::ThresholdRule::p99, router::ThresholdRule::mu_plus_2sigma};
  std::vector<router::Pooling> poolings{router::Pooling::attention, router::Pooling::mean, router::Pooling::gap,
                                        router::Pooling::flatten, router::Pooling::learnable};
  std::vector<std::size_t> n_blocks{1, 2, 4};
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string name = "experiment";
  StreamConfig stream;
  BackboneConfig backbone;
  /// Shared by every strategy (casam routing, MoDA/L2P pooling).
  router::RouterSettings router;
  std::vector<strategies::StrategyConfig> strategies;
  AblationConfig ablation;
  std::filesystem::path output_dir = "out";

  /// Throws std::invalid_argument on an unusable config.
  void validate() const;
  /// Strategy configs with the shared router settings applied.
  [[nodiscard]] std::vector<strategies::StrategyConfig> resolved_strategies() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[nodiscard]] nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
/// Seeds must be present; other fields fall back to their defaults.
[[nodiscard]] ExperimentConfig config_from_json(const nlohmann::ordered_json& j);
[[nodiscard]] ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

[[nodiscard]] nlohmann::ordered_json to_json(const strategies::StrategyConfig& s);
[[nodiscard]] strategies::StrategyConfig strategy_from_json(const nlohmann::ordered_json& j);
[[nodiscard]] nlohmann::ordered_json to_json(const router::RouterSettings& r);
[[nodiscard]] router::RouterSettings router_from_json(const nlohmann::ordered_json& j);

/// Replaces every seed in the config with one derived from `seed`.
void apply_seed_override(ExperimentConfig& cfg, std::uint64_t seed);
/// CASAM_OUT_DIR replaces output_dir; CASAM_THREADS sets the OpenMP thread count.
void apply_environment(ExperimentConfig& cfg);

/// 64-bit FNV-1a of the canonical JSON text.
[[nodiscard]] std::uint64_t content_hash(const nlohmann::ordered_json& j);

}  // namespace casam::experiment
