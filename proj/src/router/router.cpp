#include "casam/router/router.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "casam/tensor/init.hpp"
#include "casam/tensor/ops.hpp"
#include "json.hpp"

namespace casam::router {

using namespace casam::tensor;
using synth::kFeatureChannels;
using synth::kFeatureNumel;
using synth::kFeatureSize;

// --- pooling -----------------------------------------------------------------

std::vector<double> attention_weights(std::span<const float> z, std::size_t C, std::size_t h, std::size_t w,
                                      double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("attention temperature must be positive");
  if (z.size() != C * h * w) throw DimensionError("attention_pool: map size does not match C*h*w");
  const std::size_t P = h * w;
  std::vector<double> logits(P, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) logits[p] += static_cast<double>(z[c * P + p]) * z[c * P + p];
  const double denom = static_cast<double>(C) * temperature;
  for (auto& l : logits) l = std::sqrt(l) / denom;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double norm = 0.0;
  for (auto& l : logits) norm += (l = std::exp(l - mx));
  for (auto& l : logits) l /= norm;
  return logits;
}

Feature attention_pool(std::span<const float> z, std::size_t C, std::size_t h, std::size_t w, double temperature) {
  const auto alpha = attention_weights(z, C, h, w, temperature);
  const std::size_t P = h * w;
  Feature f(C);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < P; ++p) acc += alpha[p] * z[c * P + p];
    f[c] = static_cast<float>(acc);
  }
  return f;
}

Feature mean_pool(std::span<const float> z, std::size_t C, std::size_t h, std::size_t w) {
  if (z.size() != C * h * w) throw DimensionError("mean_pool: map size does not match C*h*w");
  const std::size_t P = h * w;
  Feature f(C);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < P; ++p) acc += z[c * P + p];
    f[c] = static_cast<float>(acc / static_cast<double>(P));
  }
  return f;
}

std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::attention: return "attention";
    case Pooling::gap: return "gap";
    case Pooling::mean: return "mean";
    case Pooling::flatten: return "flatten";
    case Pooling::learnable: return "learnable";
  }
  return "?";
}

Pooling pooling_from_string(std::string_view name) {
  for (auto p : {Pooling::attention, Pooling::gap, Pooling::mean, Pooling::flatten, Pooling::learnable})
    if (to_string(p) == name) return p;
  throw std::invalid_argument("unknown pooling '" + std::string(name) + "'");
}

Pooler::Pooler(PoolingConfig config) : config_(config) {
  if (config_.kind == Pooling::flatten) {
    if (config_.flatten_dim == 0) throw std::invalid_argument("flatten_dim must be positive");
    Rng rng(derive_seed(config_.projection_seed, "flatten-projection"));
    const Tensor proj = normal_tensor({config_.flatten_dim, kFeatureNumel},
                                      static_cast<float>(1.0 / std::sqrt(static_cast<double>(kFeatureNumel))), rng);
    projection_.assign(proj.data().begin(), proj.data().end());
  }
}

std::size_t Pooler::row_dim() const {
  switch (config_.kind) {
    case Pooling::flatten: return config_.flatten_dim;
    case Pooling::learnable: return kFeatureNumel;
    default: return kFeatureChannels;
  }
}

Feature Pooler::operator()(std::span<const float> z) const {
  switch (config_.kind) {
    case Pooling::attention:
      return attention_pool(z, kFeatureChannels, kFeatureSize, kFeatureSize, config_.temperature);
    case Pooling::gap:
    case Pooling::mean:
      return mean_pool(z, kFeatureChannels, kFeatureSize, kFeatureSize);
    case Pooling::flatten: {
      Feature f(config_.flatten_dim);
      for (std::size_t o = 0; o < f.size(); ++o) {
        double acc = 0.0;
        const float* row = projection_.data() + o * kFeatureNumel;
        for (std::size_t i = 0; i < kFeatureNumel; ++i) acc += static_cast<double>(row[i]) * z[i];
        f[o] = static_cast<float>(acc);
      }
      return f;
    }
    case Pooling::learnable:
      return Feature(z.begin(), z.end());
  }
  throw std::logic_error("unreachable pooling kind");
}

// --- VAE ---------------------------------------------------------------------

TaskVAE::TaskVAE(std::size_t input_dim, const VaeOptions& o, bool learnable_query)
    : input_dim_(input_dim), latent_dim_(o.latent_dim), hidden_dim_(o.hidden_dim), beta_(o.beta),
      has_query_(learnable_query) {
  if (learnable_query && input_dim != kFeatureNumel)
    throw DimensionError("learnable pooling needs raw feature maps as rows");
  if (!(o.beta >= 0.0)) throw std::invalid_argument("beta must be non-negative");
  const std::size_t D = feature_dim(), H = o.hidden_dim, L = o.latent_dim;
  Rng rng(derive_seed(o.seed, "vae-init"));
  enc_w = Parameter("vae.enc.w", fan_in_uniform({H, D}, D, rng));
  enc_b = Parameter("vae.enc.b", Tensor({H}, 0.0f));
  mu_w = Parameter("vae.mu.w", fan_in_uniform({L, H}, H, rng));
  mu_b = Parameter("vae.mu.b", Tensor({L}, 0.0f));
  logvar_w = Parameter("vae.logvar.w", fan_in_uniform({L, H}, H, rng));
  logvar_b = Parameter("vae.logvar.b", Tensor({L}, 0.0f));
  dec_w = Parameter("vae.dec.w", fan_in_uniform({H, L}, L, rng));
  dec_b = Parameter("vae.dec.b", Tensor({H}, 0.0f));
  out_w = Parameter("vae.out.w", fan_in_uniform({D, H}, H, rng));
  out_b = Parameter("vae.out.b", Tensor({D}, 0.0f));
  // Zero query: uniform attention, i.e. mean pooling, until trained.
  query = Parameter("vae.query", Tensor({kFeatureChannels}, 0.0f), learnable_query);
}

std::size_t TaskVAE::feature_dim() const { return has_query_ ? kFeatureChannels : input_dim_; }

Tensor TaskVAE::embed(const Tensor& rows) const {
  if (!has_query_) return rows;
  const Tensor maps = reshape(rows, {rows.dim(0), kFeatureChannels, kFeatureSize, kFeatureSize});
  return softmax_pool(maps, channel_dot(maps, query.value(), 1.0f));
}

TaskVAE::Parts TaskVAE::forward(const Tensor& rows, ElboMode mode, Rng* rng) const {
  if (rows.rank() != 2 || rows.dim(1) != input_dim_)
    throw DimensionError("VAE input must be [B," + std::to_string(input_dim_) + "], got " + tensor::to_string(rows.shape()));
  Parts p;
  p.features = embed(rows);
  const Tensor h = relu(linear(p.features, enc_w.value(), enc_b.value()));
  p.mu = linear(h, mu_w.value(), mu_b.value());
  p.logvar = linear(h, logvar_w.value(), logvar_b.value());
  Tensor z = p.mu;
  if (mode == ElboMode::train) {
    if (!rng) throw std::invalid_argument("train-mode ELBO needs an rng");
    Tensor eps(p.mu.shape());
    for (auto& v : eps.mutable_data()) v = static_cast<float>(rng->normal());
    z = add(p.mu, mul(exp(scale(p.logvar, 0.5f)), eps));
  }
  p.reconstruction = linear(relu(linear(z, dec_w.value(), dec_b.value())), out_w.value(), out_b.value());
  return p;
}

Tensor TaskVAE::per_sample_elbo(const Tensor& rows, ElboMode mode, Rng* rng) const {
  const Parts p = forward(rows, mode, rng);
  const float inv_d = 1.0f / static_cast<float>(feature_dim());
  // Reconstruction target is detached: with learnable pooling the query is
  // trained only through the encoder path.
  const Tensor recon = scale(sum_per_sample(square(sub(p.reconstruction, p.features))), inv_d);
  const Tensor kl_terms = sub(add(square(p.mu), exp(p.logvar)), add_scalar(p.logvar, 1.0f));
  const Tensor kl = scale(sum_per_sample(kl_terms), static_cast<float>(beta_ / 2.0));
  return add(recon, kl);
}

ParameterRefs TaskVAE::parameters() {
  ParameterRefs out{&enc_w, &enc_b, &mu_w, &mu_b, &logvar_w, &logvar_b, &dec_w, &dec_b, &out_w, &out_b};
  if (has_query_) out.push_back(&query);
  return out;
}

Checkpoint TaskVAE::checkpoint(int task_id) const {
  return Checkpoint::capture(const_cast<TaskVAE*>(this)->parameters(), task_id, 0);
}

TaskVAE TaskVAE::from_checkpoint(const Checkpoint& ck, double beta) {
  auto find = [&](const std::string& name) -> const Checkpoint::Array* {
    for (const auto& a : ck.arrays)
      if (a.name == name) return &a;
    return nullptr;
  };
  const auto* enc = find("vae.enc.w");
  const auto* mu = find("vae.mu.w");
  if (!enc || !mu || enc->shape.size() != 2 || mu->shape.size() != 2)
    throw FormatError("checkpoint is not a task VAE");
  const bool learnable = find("vae.query") != nullptr;
  VaeOptions o;
  o.beta = beta;
  o.hidden_dim = enc->shape[0];
  o.latent_dim = mu->shape[0];
  TaskVAE vae(learnable ? kFeatureNumel : enc->shape[1], o, learnable);
  ck.restore(vae.parameters());
  return vae;
}

Tensor elbo_loss(const TaskVAE& vae, const Tensor& features, ElboMode mode, Rng* rng) {
  const Tensor per = vae.per_sample_elbo(features, mode, rng);
  if (!std::isfinite(sum(per).item())) throw NumericError("non-finite ELBO");
  return mean(per);
}

namespace {

Tensor stack_rows(std::span<const Feature> rows, std::span<const std::size_t> idx) {
  const std::size_t D = rows.front().size();
  Tensor t({idx.size(), D});
  auto dst = t.mutable_data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (rows[idx[i]].size() != D) throw DimensionError("ragged feature rows");
    std::copy(rows[idx[i]].begin(), rows[idx[i]].end(), dst.begin() + i * D);
  }
  return t;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

std::vector<double> score(const TaskVAE& vae, std::span<const Feature> rows) {
  NoGradGuard guard;
  std::vector<double> out;
  out.reserve(rows.size());
  constexpr std::size_t kChunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < rows.size(); start += kChunk) {
    idx.resize(std::min(kChunk, rows.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor s = vae.per_sample_elbo(stack_rows(rows, idx), ElboMode::score);
    for (float v : s.data()) {
      if (!std::isfinite(v)) throw NumericError("non-finite routing score");
      out.push_back(v);
    }
  }
  return out;
}

TaskVAE train_vae(std::span<const Feature> rows, const VaeOptions& options, bool learnable_query,
                  VaeTrainReport* report) {
  if (rows.size() < 2) throw std::invalid_argument("train_vae needs at least two feature rows");
  TaskVAE vae(rows.front().size(), options, learnable_query);
  {
    // Output bias starts at the mean (embedded) training feature.
    NoGradGuard guard;
    const Tensor f = vae.embed(stack_rows(rows, iota_n(rows.size())));
    const std::size_t D = vae.feature_dim();
    auto bias = vae.out_b.value().mutable_data();
    for (std::size_t d = 0; d < D; ++d) {
      double acc = 0.0;
      for (std::size_t i = 0; i < rows.size(); ++i) acc += f.data()[i * D + d];
      bias[d] = static_cast<float>(acc / static_cast<double>(rows.size()));
    }
  }
  Rng rng(derive_seed(options.seed, "vae-train"));
  const AdamOptions adam{.lr = options.lr};
  auto params = vae.parameters();
  VaeTrainReport local;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = rng.permutation(rows.size());
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      std::span<const std::size_t> idx(order.data() + start, std::min(options.batch, order.size() - start));
      const Tensor loss = elbo_loss(vae, stack_rows(rows, idx), ElboMode::train, &rng);
      backward(loss);
      adam_step(params, adam);
      total += loss.item();
      ++steps;
    }
    local.epoch_loss.push_back(total / static_cast<double>(steps));
  }
  if (report) *report = std::move(local);
  return vae;
}

// --- calibration ---------------------------------------------------------------

std::string_view to_string(ThresholdRule r) {
  switch (r) {
    case ThresholdRule::mu_plus_2sigma: return "mu_plus_2sigma";
    case ThresholdRule::p95: return "p95";
    case ThresholdRule::p97: return "p97";
    case ThresholdRule::p99: return "p99";
  }
  return "?";
}

ThresholdRule threshold_rule_from_string(std::string_view name) {
  for (auto r : {ThresholdRule::mu_plus_2sigma, ThresholdRule::p95, ThresholdRule::p97, ThresholdRule::p99})
    if (to_string(r) == name) return r;
  throw std::invalid_argument("unknown threshold rule '" + std::string(name) + "'");
}

double nearest_rank(std::vector<double> values, double percentile) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  if (!(percentile > 0.0 && percentile <= 100.0)) throw std::invalid_argument("percentile must be in (0,100]");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

double apply_rule(std::span<const double> scores, ThresholdRule rule) {
  if (scores.empty()) throw std::invalid_argument("threshold rule on an empty sample");
  switch (rule) {
    case ThresholdRule::mu_plus_2sigma: {
      const double n = static_cast<double>(scores.size());
      const double mu = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
      double var = 0.0;
      for (double s : scores) var += (s - mu) * (s - mu);
      return mu + 2.0 * std::sqrt(var / n);
    }
    case ThresholdRule::p95: return nearest_rank({scores.begin(), scores.end()}, 95.0);
    case ThresholdRule::p97: return nearest_rank({scores.begin(), scores.end()}, 97.0);
    case ThresholdRule::p99: return nearest_rank({scores.begin(), scores.end()}, 99.0);
  }
  throw std::logic_error("unreachable threshold rule");
}

Calibration calibrate_threshold(std::span<const Feature> rows, const VaeOptions& options, bool learnable_query,
                                std::size_t K, ThresholdRule rule) {
  if (K < 2) throw std::invalid_argument("calibration needs K >= 2 folds");
  if (rows.size() < K) throw std::invalid_argument("fewer feature rows than folds");
  Rng rng(derive_seed(options.seed, "calibration-folds"));
  const auto order = rng.permutation(rows.size());
  Calibration cal;
  cal.held_out_scores.assign(rows.size(), 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Feature> fit, held;
    std::vector<std::size_t> held_idx;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i % K == k) {
        held.push_back(rows[order[i]]);
        held_idx.push_back(order[i]);
      } else {
        fit.push_back(rows[order[i]]);
      }
    }
    VaeOptions fold = options;
    fold.seed = derive_seed(options.seed, 1000 + k);
    const TaskVAE vae = train_vae(fit, fold, learnable_query);
    const auto s = score(vae, held);
    for (std::size_t i = 0; i < s.size(); ++i) cal.held_out_scores[held_idx[i]] = s[i];
  }
  cal.tau = apply_rule(cal.held_out_scores, rule);
  return cal;
}

// --- routing -------------------------------------------------------------------

RouterPool::RouterPool(RouterSettings settings) : settings_(settings), pooler_(settings.pooling) {}

void RouterPool::add(int task_id, RouterEntry entry) {
  if (task_id == metrics::kOodRoute) throw std::invalid_argument("task id collides with the OOD route");
  if (!std::isfinite(entry.tau)) throw std::invalid_argument("router threshold must be finite");
  entries_.insert_or_assign(task_id, std::move(entry));
}

const align::AlignmentLayer& RouterPool::layer_for(int chosen) const {
  if (chosen == metrics::kOodRoute) return identity_;
  return entries_.at(chosen).layer;
}

RouteDecision decide(const RouterPool& pool, std::map<int, double> scores) {
  RouteDecision d;
  if (scores.empty()) throw std::invalid_argument("routing over an empty pool");
  // std::map iterates in ascending task id, so strict < keeps the lowest id on ties.
  int best = scores.begin()->first;
  double best_score = scores.begin()->second;
  for (const auto& [id, s] : scores)
    if (s < best_score) {
      best = id;
      best_score = s;
    }
  d.threshold_used = pool.at(best).tau;
  d.chosen = best_score <= d.threshold_used ? best : metrics::kOodRoute;
  d.scores = std::move(scores);
  return d;
}

std::vector<RouteDecision> route_many(const RouterPool& pool, std::span<const float> maps, std::size_t n) {
  if (pool.empty()) throw std::invalid_argument("routing over an empty pool");
  if (maps.size() != n * kFeatureNumel) throw DimensionError("route_many: map buffer size mismatch");
  std::vector<Feature> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rows.push_back(pool.pooler()(maps.subspan(i * kFeatureNumel, kFeatureNumel)));
  std::vector<std::map<int, double>> scores(n);
  for (const auto& [id, entry] : pool.entries()) {
    const auto s = score(entry.vae, rows);
    for (std::size_t i = 0; i < n; ++i) scores[i][id] = s[i];
  }
  std::vector<RouteDecision> out;
  out.reserve(n);
  for (auto& s : scores) out.push_back(decide(pool, std::move(s)));
  return out;
}

RouteDecision route(const RouterPool& pool, std::span<const float> z) { return route_many(pool, z, 1).front(); }

std::vector<Feature> router_rows(const RouterPool& pool, const synth::EncodedSet& features) {
  std::vector<Feature> rows;
  rows.reserve(features.n);
  for (std::size_t i = 0; i < features.n; ++i) rows.push_back(pool.pooler()(features.feature(i)));
  return rows;
}

RouterEntry build_entry(const RouterPool& pool, align::AlignmentLayer layer, const synth::EncodedSet& train_features,
                        int task_id) {
  const auto rows = router_rows(pool, train_features);
  const auto& s = pool.settings();
  VaeOptions o = s.vae;
  o.seed = derive_seed(s.vae.seed, static_cast<std::uint64_t>(task_id));
  const bool learnable = s.pooling.kind == Pooling::learnable;
  RouterEntry e;
  e.layer = std::move(layer);
  e.vae = train_vae(rows, o, learnable);
  e.tau = calibrate_threshold(rows, o, learnable, s.folds, s.rule).tau;
  return e;
}

// --- persistence ---------------------------------------------------------------

namespace {
constexpr const char* kPoolFormat = "casam-router-pool";
constexpr int kPoolVersion = 1;
}  // namespace

void save_pool(const RouterPool& pool, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& s = pool.settings();
  nlohmann::ordered_json j;
  j["format"] = kPoolFormat;
  j["version"] = kPoolVersion;
  j["pooling"] = {{"kind", to_string(s.pooling.kind)},
                  {"temperature", s.pooling.temperature},
                  {"flatten_dim", s.pooling.flatten_dim},
                  {"projection_seed", s.pooling.projection_seed}};
  j["vae"] = {{"beta", s.vae.beta},     {"latent_dim", s.vae.latent_dim}, {"hidden_dim", s.vae.hidden_dim},
              {"epochs", s.vae.epochs}, {"batch", s.vae.batch},           {"lr", s.vae.lr},
              {"seed", s.vae.seed}};
  j["folds"] = s.folds;
  j["rule"] = to_string(s.rule);
  auto tasks = nlohmann::ordered_json::array();
  for (const auto& [id, e] : pool.entries()) {
    const std::string layer_file = "layer_" + std::to_string(id) + ".ckpt";
    const std::string vae_file = "vae_" + std::to_string(id) + ".ckpt";
    e.layer.checkpoint().save(dir / layer_file);
    e.vae.checkpoint(id).save(dir / vae_file);
    tasks.push_back({{"task_id", id},
                     {"tau", e.tau},
                     {"latent_dim", e.vae.latent_dim()},
                     {"n_blocks", e.layer.n_blocks()},
                     {"layer", layer_file},
                     {"vae", vae_file}});
  }
  j["tasks"] = tasks;
  std::ofstream out(dir / "pool.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (dir / "pool.json").string());
  out << j.dump(2) << '\n';
}

RouterPool load_pool(const std::filesystem::path& dir) {
  std::ifstream in(dir / "pool.json");
  if (!in) throw FormatError("cannot open " + (dir / "pool.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed pool manifest: ") + e.what());
  }
  if (j.value("format", "") != kPoolFormat) throw FormatError("not a router pool manifest");
  if (j.value("version", -1) != kPoolVersion)
    throw FormatError("unsupported router pool version " + std::to_string(j.value("version", -1)));
  try {
    RouterSettings s;
    s.pooling.kind = pooling_from_string(j.at("pooling").at("kind").get<std::string>());
    s.pooling.temperature = j.at("pooling").at("temperature").get<double>();
    s.pooling.flatten_dim = j.at("pooling").at("flatten_dim").get<std::size_t>();
    s.pooling.projection_seed = j.at("pooling").at("projection_seed").get<std::uint64_t>();
    const auto& v = j.at("vae");
    s.vae.beta = v.at("beta").get<double>();
    s.vae.latent_dim = v.at("latent_dim").get<std::size_t>();
    s.vae.hidden_dim = v.at("hidden_dim").get<std::size_t>();
    s.vae.epochs = v.at("epochs").get<std::size_t>();
    s.vae.batch = v.at("batch").get<std::size_t>();
    s.vae.lr = v.at("lr").get<float>();
    s.vae.seed = v.at("seed").get<std::uint64_t>();
    s.folds = j.at("folds").get<std::size_t>();
    s.rule = threshold_rule_from_string(j.at("rule").get<std::string>());
    RouterPool pool(s);
    for (const auto& t : j.at("tasks")) {
      const int id = t.at("task_id").get<int>();
      RouterEntry e;
      e.layer = align::AlignmentLayer::from_checkpoint(Checkpoint::load(dir / t.at("layer").get<std::string>()));
      const Checkpoint vck = Checkpoint::load(dir / t.at("vae").get<std::string>());
      if (vck.task_id != id || e.layer.task_id() != id) throw FormatError("task id mismatch in pool checkpoints");
      e.vae = TaskVAE::from_checkpoint(vck, s.vae.beta);
      e.tau = t.at("tau").get<double>();
      pool.add(id, std::move(e));
    }
    return pool;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed pool manifest: ") + e.what());
  }
}

}  // namespace casam::router
