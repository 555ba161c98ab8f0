#include "casam/experiment/config.hpp"

#include <omp.h>

#include <cstdlib>
#include <fstream>

namespace casam::experiment {

using json = nlohmann::ordered_json;
using strategies::StrategyConfig;

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  const auto it = j.find(key);
  return it == j.end() ? fallback : it->template get<T>();
}

std::uint64_t required_seed(const json& j, const char* key, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end()) throw ConfigError(where + ": seed '" + key + "' must be given explicitly");
  return it->get<std::uint64_t>();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion)
    throw std::invalid_argument("unsupported config schema version " + std::to_string(schema_version));
  if (stream.tasks.empty()) throw std::invalid_argument("stream.tasks must not be empty");
  if (stream.per_task_train < router.folds)
    throw std::invalid_argument("per_task_train must be at least the number of calibration folds");
  if (stream.per_task_test == 0) throw std::invalid_argument("per_task_test must be positive");
  for (std::size_t i = 0; i < stream.tasks.size(); ++i)
    for (std::size_t j = i + 1; j < stream.tasks.size(); ++j)
      if (stream.tasks[i] == stream.tasks[j]) throw std::invalid_argument("stream.tasks repeats a task id");
  for (const auto& s : resolved_strategies()) s.validate();
  if (ablation.router_seeds.empty()) throw std::invalid_argument("ablation.router_seeds must not be empty");
}

std::vector<StrategyConfig> ExperimentConfig::resolved_strategies() const {
  auto out = strategies;
  for (auto& s : out) s.router = router;
  return out;
}

json to_json(const router::RouterSettings& r) {
  return json{{"pooling",
               {{"kind", router::to_string(r.pooling.kind)},
                {"temperature", r.pooling.temperature},
                {"flatten_dim", r.pooling.flatten_dim},
                {"projection_seed", r.pooling.projection_seed}}},
              {"vae",
               {{"beta", r.vae.beta},
                {"latent_dim", r.vae.latent_dim},
                {"hidden_dim", r.vae.hidden_dim},
                {"epochs", r.vae.epochs},
                {"batch", r.vae.batch},
                {"lr", r.vae.lr},
                {"seed", r.vae.seed}}},
              {"folds", r.folds},
              {"rule", router::to_string(r.rule)}};
}

router::RouterSettings router_from_json(const json& j) {
  router::RouterSettings r;
  if (const auto it = j.find("pooling"); it != j.end()) {
    const auto& p = *it;
    r.pooling.kind = router::pooling_from_string(get_or<std::string>(p, "kind", "attention"));
    r.pooling.temperature = get_or(p, "temperature", r.pooling.temperature);
    r.pooling.flatten_dim = get_or(p, "flatten_dim", r.pooling.flatten_dim);
    r.pooling.projection_seed = required_seed(p, "projection_seed", "router.pooling");
  } else {
    throw ConfigError("router.pooling.projection_seed must be given explicitly");
  }
  const auto v = j.find("vae");
  if (v == j.end()) throw ConfigError("router.vae.seed must be given explicitly");
  r.vae.beta = get_or(*v, "beta", r.vae.beta);
  r.vae.latent_dim = get_or(*v, "latent_dim", r.vae.latent_dim);
  r.vae.hidden_dim = get_or(*v, "hidden_dim", r.vae.hidden_dim);
  r.vae.epochs = get_or(*v, "epochs", r.vae.epochs);
  r.vae.batch = get_or(*v, "batch", r.vae.batch);
  r.vae.lr = get_or(*v, "lr", r.vae.lr);
  r.vae.seed = required_seed(*v, "seed", "router.vae");
  r.folds = get_or(j, "folds", r.folds);
  r.rule = router::threshold_rule_from_string(get_or<std::string>(j, "rule", "p97"));
  return r;
}

json to_json(const StrategyConfig& s) {
  return json{{"name", strategies::to_string(s.kind)},
              {"oracle_routing", s.oracle_routing},
              {"lambda_distill", s.lambda_distill},
              {"lambda_ewc", s.lambda_ewc},
              {"memory_capacity", s.memory_capacity},
              {"memory_policy", strategies::to_string(s.memory_policy)},
              {"der_alpha", s.der_alpha},
              {"prompt_pool_size", s.prompt_pool_size},
              {"top_k", s.top_k},
              {"prompt_slots", s.prompt_slots},
              {"n_blocks", s.n_blocks},
              {"train", {{"epochs", s.train.epochs}, {"lr", s.train.lr}, {"batch", s.train.batch}}},
              {"classifier_epochs", s.classifier_epochs},
              {"classifier_lr", s.classifier_lr},
              {"seed", s.seed}};
}

StrategyConfig strategy_from_json(const json& j) {
  StrategyConfig s;
  s.kind = strategies::strategy_from_string(j.at("name").get<std::string>());
  s.oracle_routing = get_or(j, "oracle_routing", s.oracle_routing);
  s.lambda_distill = get_or(j, "lambda_distill", s.lambda_distill);
  s.lambda_ewc = get_or(j, "lambda_ewc", s.lambda_ewc);
  s.memory_capacity = get_or(j, "memory_capacity", s.memory_capacity);
  s.memory_policy = strategies::memory_policy_from_string(
      get_or<std::string>(j, "memory_policy", std::string(strategies::to_string(s.memory_policy))));
  s.der_alpha = get_or(j, "der_alpha", s.der_alpha);
  s.prompt_pool_size = get_or(j, "prompt_pool_size", s.prompt_pool_size);
  s.top_k = get_or(j, "top_k", s.top_k);
  s.prompt_slots = get_or(j, "prompt_slots", s.prompt_slots);
  s.n_blocks = get_or(j, "n_blocks", s.n_blocks);
  if (const auto it = j.find("train"); it != j.end()) {
    s.train.epochs = get_or(*it, "epochs", s.train.epochs);
    s.train.lr = get_or(*it, "lr", s.train.lr);
    s.train.batch = get_or(*it, "batch", s.train.batch);
  }
  s.classifier_epochs = get_or(j, "classifier_epochs", s.classifier_epochs);
  s.classifier_lr = get_or(j, "classifier_lr", s.classifier_lr);
  s.seed = required_seed(j, "seed", "strategy '" + s.label() + "'");
  return s;
}

json to_json(const ExperimentConfig& c) {
  json strategies = json::array();
  for (const auto& s : c.strategies) strategies.push_back(to_json(s));
  json rules = json::array(), poolings = json::array();
  for (auto r : c.ablation.tau_rules) rules.push_back(router::to_string(r));
  for (auto p : c.ablation.poolings) poolings.push_back(router::to_string(p));
  const auto& b = c.backbone.spec;
  return json{{"schema_version", c.schema_version},
              {"name", c.name},
              {"stream",
               {{"tasks", c.stream.tasks},
                {"per_task_train", c.stream.per_task_train},
                {"per_task_test", c.stream.per_task_test},
                {"ood_test", c.stream.ood_test},
                {"seed", c.stream.seed}}},
              {"backbone",
               {{"n_train", b.n_train},
                {"n_val", b.n_val},
                {"epochs", b.epochs},
                {"batch", b.batch},
                {"lr", b.lr},
                {"iou_floor", b.iou_floor},
                {"seed", c.backbone.seed},
                {"cache_dir", c.backbone.cache_dir.generic_string()},
                {"allow_pretrain", c.backbone.allow_pretrain}}},
              {"router", to_json(c.router)},
              {"strategies", strategies},
              {"ablation",
               {{"router_seeds", c.ablation.router_seeds},
                {"temperatures", c.ablation.temperatures},
                {"betas", c.ablation.betas},
                {"tau_rules", rules},
                {"poolings", poolings},
                {"n_blocks", c.ablation.n_blocks}}},
              {"output_dir", c.output_dir.generic_string()}};
}

ExperimentConfig config_from_json(const json& j) {
  try {
    ExperimentConfig c;
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != kSchemaVersion)
      throw ConfigError("unsupported config schema version " + std::to_string(c.schema_version));
    c.name = get_or<std::string>(j, "name", c.name);
    const auto& s = j.at("stream");
    c.stream.tasks = get_or(s, "tasks", c.stream.tasks);
    c.stream.per_task_train = get_or(s, "per_task_train", c.stream.per_task_train);
    c.stream.per_task_test = get_or(s, "per_task_test", c.stream.per_task_test);
    c.stream.ood_test = get_or(s, "ood_test", c.stream.ood_test);
    c.stream.seed = required_seed(s, "seed", "stream");
    const auto& b = j.at("backbone");
    auto& spec = c.backbone.spec;
    spec.n_train = get_or(b, "n_train", spec.n_train);
    spec.n_val = get_or(b, "n_val", spec.n_val);
    spec.epochs = get_or(b, "epochs", spec.epochs);
    spec.batch = get_or(b, "batch", spec.batch);
    spec.lr = get_or(b, "lr", spec.lr);
    spec.iou_floor = get_or(b, "iou_floor", spec.iou_floor);
    c.backbone.seed = required_seed(b, "seed", "backbone");
    c.backbone.cache_dir = get_or<std::string>(b, "cache_dir", c.backbone.cache_dir.generic_string());
    c.backbone.allow_pretrain = get_or(b, "allow_pretrain", c.backbone.allow_pretrain);
    c.router = router_from_json(j.at("router"));
    for (const auto& e : j.at("strategies")) c.strategies.push_back(strategy_from_json(e));
    if (const auto it = j.find("ablation"); it != j.end()) {
      const auto& a = *it;
      c.ablation.router_seeds = get_or(a, "router_seeds", c.ablation.router_seeds);
      c.ablation.temperatures = get_or(a, "temperatures", c.ablation.temperatures);
      c.ablation.betas = get_or(a, "betas", c.ablation.betas);
      if (const auto r = a.find("tau_rules"); r != a.end()) {
        c.ablation.tau_rules.clear();
        for (const auto& x : *r) c.ablation.tau_rules.push_back(router::threshold_rule_from_string(x.get<std::string>()));
      }
      if (const auto p = a.find("poolings"); p != a.end()) {
        c.ablation.poolings.clear();
        for (const auto& x : *p) c.ablation.poolings.push_back(router::pooling_from_string(x.get<std::string>()));
      }
      c.ablation.n_blocks = get_or(a, "n_blocks", c.ablation.n_blocks);
    }
    c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir.generic_string());
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write config " + path.string());
  out << to_json(cfg).dump(2) << '\n';
}

void apply_seed_override(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.stream.seed = tensor::derive_seed(seed, "stream");
  cfg.backbone.seed = tensor::derive_seed(seed, "backbone");
  cfg.router.vae.seed = tensor::derive_seed(seed, "router-vae");
  cfg.router.pooling.projection_seed = tensor::derive_seed(seed, "router-projection");
  for (std::size_t i = 0; i < cfg.strategies.size(); ++i)
    cfg.strategies[i].seed = tensor::derive_seed(tensor::derive_seed(seed, "strategy"), i);
}

void apply_environment(ExperimentConfig& cfg) {
  if (const char* out = std::getenv("CASAM_OUT_DIR"); out && *out) cfg.output_dir = out;
  if (const char* threads = std::getenv("CASAM_THREADS"); threads && *threads) {
    const int n = std::atoi(threads);
    if (n > 0) omp_set_num_threads(n);
  }
}

std::uint64_t content_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace casam::experiment
