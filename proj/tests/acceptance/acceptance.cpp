// Acceptance suite: one PASS/FAIL line per criterion, exit status = number of
// failed criteria. Criteria 3-9 share one workspace built from the default
// config; the backbone cache lives in the build tree.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "unit/gradcheck.hpp"

#include "casam/experiment/experiment.hpp"
#include "casam/tensor/kernels.hpp"
#include "casam/tensor/ops.hpp"

using namespace casam;
namespace fs = std::filesystem;
namespace oracle = casam::testing::oracle;
using strategies::StrategyKind;
using tensor::Rng;
using tensor::Tensor;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pts(double fraction) { return fmt("%.2f", 100.0 * fraction); }

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// --- 1: formula oracles --------------------------------------------------------

std::vector<float> normals(Rng& rng, std::size_t n, double scale) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

metrics::Mask random_mask(Rng& rng, std::size_t W, std::size_t H) {
  metrics::Mask m(W * H, 0);
  const auto mode = rng.below(4);
  if (mode == 0) return m;  // empty
  if (mode == 1) {
    for (auto& v : m) v = rng.uniform() < 0.5;
    return m;
  }
  const int rects = 1 + static_cast<int>(rng.below(3));
  for (int r = 0; r < rects; ++r) {
    const auto x0 = rng.below(W), y0 = rng.below(H);
    const auto x1 = x0 + rng.below(W - x0), y1 = y0 + rng.below(H - y0);
    for (auto y = y0; y <= y1; ++y)
      for (auto x = x0; x <= x1; ++x) m[y * W + x] = 1;
  }
  if (mode == 3)
    for (auto& v : m)
      if (rng.uniform() < 0.05) v = !v;
  return m;
}

std::vector<double> distribution(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double total = 0.0;
  for (auto& v : p) {
    v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    total += v;
  }
  if (total == 0.0) {
    p[0] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

Verdict formula_oracles() {
  constexpr int kInstances = 100;
  constexpr double kTol = 1e-5;
  std::map<std::string, double> worst;
  Rng rng(20240501);

  for (int i = 0; i < kInstances; ++i) {
    const std::size_t C = 1 + rng.below(6), h = 1 + rng.below(5), w = 1 + rng.below(5);
    const double T = std::vector<double>{0.5, 1.0, 2.0, 4.0}[rng.below(4)];
    const auto z = normals(rng, C * h * w, rng.uniform(0.1, 3.0));
    const auto got = router::attention_pool(z, C, h, w, T);
    const auto ref = oracle::attention_pool(z, C, h, w, T);
    for (std::size_t c = 0; c < C; ++c) worst["attention_pool"] = std::max(worst["attention_pool"], std::abs(got[c] - ref[c]));
  }

  for (int i = 0; i < kInstances; ++i) {
    router::VaeOptions o;
    o.latent_dim = 1 + rng.below(4);
    o.hidden_dim = 2 + rng.below(8);
    o.beta = rng.uniform(0.0, 20.0);
    o.seed = 1000 + static_cast<std::uint64_t>(i);
    const std::size_t D = 2 + rng.below(8), B = 1 + rng.below(5);
    const router::TaskVAE vae(D, o);
    Tensor rows({B, D});
    const auto values = normals(rng, B * D, 0.5);
    std::copy(values.begin(), values.end(), rows.mutable_data().begin());

    double score_ref = 0.0, train_ref = 0.0;
    Rng eps_rng(7 + static_cast<std::uint64_t>(i));
    for (std::size_t b = 0; b < B; ++b) {
      const std::span<const float> row(values.data() + b * D, D);
      std::vector<double> eps(o.latent_dim);
      for (auto& e : eps) e = eps_rng.normal();
      score_ref += oracle::elbo_score(vae, row) / double(B);
      train_ref += oracle::elbo_sample(vae, row, eps) / double(B);
    }
    Rng train_rng(7 + static_cast<std::uint64_t>(i));
    const double score_got = router::elbo_loss(vae, rows, router::ElboMode::score).item();
    const double train_got = router::elbo_loss(vae, rows, router::ElboMode::train, &train_rng).item();
    worst["elbo_loss"] = std::max({worst["elbo_loss"], std::abs(score_got - score_ref), std::abs(train_got - train_ref)});
  }

  for (int i = 0; i < kInstances; ++i) {
    std::vector<tensor::Parameter> params;
    const std::size_t n_params = 1 + rng.below(3);
    std::vector<float> theta, ref, fisher;
    for (std::size_t k = 0; k < n_params; ++k) {
      const std::size_t n = 1 + rng.below(20);
      Tensor t({n});
      const auto v = normals(rng, n, 0.3);
      std::copy(v.begin(), v.end(), t.mutable_data().begin());
      theta.insert(theta.end(), v.begin(), v.end());
      params.emplace_back("p" + std::to_string(k), t);
    }
    for (std::size_t j = 0; j < theta.size(); ++j) {
      ref.push_back(static_cast<float>(theta[j] + 0.3 * rng.normal()));
      fisher.push_back(static_cast<float>(rng.uniform(0.0, 2.0)));
    }
    tensor::ParameterRefs refs;
    for (auto& p : params) refs.push_back(&p);
    const double lambda = rng.uniform(0.0, 2.0);
    const double got = strategies::ewc_penalty(refs, ref, fisher, lambda).item();
    worst["ewc_penalty"] = std::max(worst["ewc_penalty"], std::abs(got - oracle::ewc_penalty(theta, ref, fisher, lambda)));
  }

  for (int i = 0; i < kInstances; ++i) {
    const std::size_t m = 1 + rng.below(4), n = 1 + rng.below(30);
    const auto init = normals(rng, n, 1.0);
    std::vector<strategies::TaskVector> vectors;
    std::vector<std::vector<double>> raw;
    for (std::size_t t = 0; t < m; ++t) {
      auto tuned = init;
      for (auto& v : tuned)
        if (rng.uniform() > 0.15) v = static_cast<float>(v + rng.normal(0.0, 0.5));
      vectors.push_back(strategies::TaskVector::between(tuned, init));
      std::vector<double> d(n);
      for (std::size_t j = 0; j < n; ++j) d[j] = double(tuned[j]) - double(init[j]);
      raw.push_back(d);
    }
    const auto got = strategies::elect(vectors);
    const auto ref = oracle::elect(raw);
    for (std::size_t j = 0; j < n; ++j) worst["emr_election"] = std::max(worst["emr_election"], std::abs(got[j] - ref[j]));
  }

  for (int i = 0; i < kInstances; ++i) {
    const std::size_t n = 2 + rng.below(19);
    const auto p = distribution(rng, n), q = distribution(rng, n);
    worst["tv_js"] = std::max({worst["tv_js"], std::abs(metrics::tv_distance(p, q) - oracle::tv(p, q)),
                               std::abs(metrics::js_divergence(p, q) - oracle::js(p, q))});
  }

  for (int i = 0; i < kInstances; ++i) {
    const std::size_t W = 3 + rng.below(14), H = 3 + rng.below(14), d = 1 + rng.below(3);
    const auto a = random_mask(rng, W, H), b = random_mask(rng, W, H);
    worst["iou_biou"] = std::max({worst["iou_biou"], std::abs(metrics::iou(a, b) - oracle::iou(a, b)),
                                  std::abs(metrics::biou(a, b, W, H, d) - oracle::biou(a, b, W, H, d))});
  }

  for (int i = 0; i < kInstances; ++i) {
    const std::size_t N = 1 + rng.below(6);
    std::vector<std::size_t> n(N);
    for (auto& v : n) v = 1 + rng.below(50);
    metrics::StageMetrics sm;
    for (std::size_t t = 0; t < N; ++t) {
      std::vector<metrics::TaskScore> row;
      for (std::size_t k = 0; k <= t; ++k) row.push_back({rng.uniform(), rng.uniform(), n[k]});
      sm.per_stage.push_back(row);
    }
    const auto got = metrics::stage_aggregate(sm);
    const auto ref = oracle::stage_aggregate(sm.per_stage);
    worst["stage_aggregate"] = std::max(
        {worst["stage_aggregate"], std::abs(got.last_iou - ref.last_iou), std::abs(got.avg_iou - ref.avg_iou),
         std::abs(got.ff_iou - ref.ff_iou), std::abs(got.last_biou - ref.last_biou),
         std::abs(got.avg_biou - ref.avg_biou), std::abs(got.ff_biou - ref.ff_biou)});
  }

  Verdict v{true, ""};
  for (const auto& [name, err] : worst) {
    v.pass = v.pass && err <= kTol;
    v.detail += name + " " + fmt("%.1e", err) + "  ";
  }
  v.detail = std::to_string(kInstances) + " instances each, max |err|: " + v.detail;
  return v;
}

// --- 2: gradient checks --------------------------------------------------------

using testing::grad_check;
using testing::grad_check_projected;
using testing::random_tensor;
using Outputs = std::function<std::vector<Tensor>(std::vector<Tensor>&)>;

struct GradLedger {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;

  void add(const std::string& name, const std::vector<testing::GradCheckResult>& results) {
    for (const auto& r : results) {
      ++checks;
      if (r.relative() >= worst) {
        worst = r.relative();
        worst_name = name;
      }
    }
  }
};

void set_random(tensor::Parameter& p, Rng& rng, double scale) {
  for (auto& v : p.value().mutable_data()) v = static_cast<float>(scale * rng.normal());
}

using Exact = std::function<std::vector<std::vector<double>>(std::vector<Tensor>&)>;

// Like grad_check_projected, but the difference quotient projects outputs
// computed in double by `exact`, so float rounding does not enter it.
std::vector<testing::GradCheckResult> grad_check_exact(std::vector<Tensor>& leaves, const Outputs& outputs,
                                                       const Exact& exact, std::uint64_t seed) {
  std::vector<Tensor> weights;
  for (const auto& y : [&] {
         tensor::NoGradGuard guard;
         return outputs(leaves);
       }())
    weights.push_back(testing::projection_weights(y.shape(), seed + weights.size()));
  const testing::LeafFn loss = [&](std::vector<Tensor>& t) {
    const auto ys = outputs(t);
    Tensor total = tensor::sum(tensor::mul(ys[0], weights[0]));
    for (std::size_t k = 1; k < ys.size(); ++k) total = tensor::add(total, tensor::sum(tensor::mul(ys[k], weights[k])));
    return total;
  };
  const testing::ValueFn value = [&](std::vector<Tensor>& t) {
    double total = 0.0;
    const auto ys = exact(t);
    for (std::size_t k = 0; k < ys.size(); ++k)
      for (std::size_t i = 0; i < ys[k].size(); ++i) total += ys[k][i] * weights[k].data()[i];
    return total;
  };
  return grad_check(leaves, loss, value);
}

std::vector<double> as_double(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Verdict gradient_checks() {
  constexpr double kTol = 1e-4;
  GradLedger ledger;
  Rng rng(777);
  auto projected = [&](const std::string& name, std::vector<Tensor> leaves, const Outputs& f, std::uint64_t seed) {
    ledger.add(name, grad_check_projected(leaves, f, seed));
  };

  projected("elementwise", {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng, 0.5, 1.5)}, [](auto& t) {
    return std::vector{tensor::add(t[0], t[1]), tensor::sub(t[0], t[1]), tensor::mul(t[0], t[1]),
                       tensor::scale(t[0], 1.7f), tensor::add_scalar(t[1], 0.3f), tensor::square(t[0])};
  }, 11);
  projected("reductions", {random_tensor({3, 2, 2}, rng)}, [](auto& t) {
    return std::vector{tensor::reshape(tensor::sum(t[0]), {1}), tensor::reshape(tensor::mean(t[0]), {1}),
                       tensor::sum_per_sample(t[0])};
  }, 12);
  for (auto backend : {tensor::kernels::Backend::reference, tensor::kernels::Backend::parallel}) {
    tensor::kernels::BackendGuard guard(backend);
    const std::string tag = backend == tensor::kernels::Backend::parallel ? "/parallel" : "/reference";
    projected("conv2d" + tag, {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
              [](auto& t) { return std::vector{tensor::conv2d(t[0], t[1], t[2], 2, 1)}; }, 13);
    projected("layer_norm_2d" + tag,
              {random_tensor({2, 4, 3, 3}, rng, -2, 2), random_tensor({4}, rng), random_tensor({4}, rng)},
              [](auto& t) { return std::vector{tensor::layer_norm_2d(t[0], t[1], t[2])}; }, 14);
  }
  projected("conv_transpose2d", {random_tensor({2, 3, 3, 3}, rng), random_tensor({3, 2, 4, 4}, rng), random_tensor({2}, rng)},
            [](auto& t) { return std::vector{tensor::conv_transpose2d(t[0], t[1], t[2], 2, 1)}; }, 15);
  projected("conv1d_channel", {random_tensor({3, 8}, rng), random_tensor({1, 1, 3}, rng)},
            [](auto& t) { return std::vector{tensor::conv1d_channel(t[0], t[1])}; }, 16);
  projected("linear/relu/sigmoid/exp", {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)},
            [](auto& t) {
              const Tensor h = tensor::linear(t[0], t[1], t[2]);
              return std::vector{tensor::relu(h), tensor::sigmoid(h), tensor::exp(h)};
            }, 17);
  {
    std::vector<Tensor> leaves{random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 1, 4, 4}, rng),
                               random_tensor({3, 4, 4}, rng)};
    ledger.add("pooling and gating",
               grad_check_exact(
                   leaves,
                   [](auto& t) {
                     const Tensor gate = tensor::sigmoid(tensor::global_avg_pool(t[0]));
                     const Tensor u = tensor::add_broadcast(tensor::channel_scale(t[0], gate), t[2]);
                     return std::vector{tensor::reshape(tensor::concat_channels(u, t[1]), {2, 64})};
                   },
                   [](auto& t) {
                     const auto x = as_double(t[0]), m = as_double(t[1]), bias = as_double(t[2]);
                     std::vector<double> y;
                     for (std::size_t b = 0; b < 2; ++b) {
                       for (std::size_t c = 0; c < 3; ++c) {
                         double mean = 0.0;
                         for (std::size_t p = 0; p < 16; ++p) mean += x[(b * 3 + c) * 16 + p] / 16.0;
                         for (std::size_t p = 0; p < 16; ++p)
                           y.push_back(x[(b * 3 + c) * 16 + p] * oracle::sigmoid(mean) + bias[c * 16 + p]);
                       }
                       for (std::size_t p = 0; p < 16; ++p) y.push_back(m[b * 16 + p]);
                     }
                     return std::vector<std::vector<double>>{y};
                   },
                   18));
  }
  {
    std::vector<Tensor> leaves{random_tensor({2, 3, 2, 3}, rng), random_tensor({3}, rng)};
    ledger.add("softmax_pool/channel_dot",
               grad_check_exact(
                   leaves, [](auto& t) { return std::vector{tensor::softmax_pool(t[0], tensor::channel_dot(t[0], t[1], 0.5f))}; },
                   [](auto& t) {
                     std::vector<double> y;
                     for (std::size_t b = 0; b < 2; ++b) {
                       const auto x = t[0].data().subspan(b * 18, 18);
                       std::vector<double> q(t[1].data().begin(), t[1].data().end());
                       for (auto& v : q) v *= 0.5;
                       std::vector<float> qf(q.begin(), q.end());
                       const auto f = oracle::query_pool(x, qf);
                       y.insert(y.end(), f.begin(), f.end());
                     }
                     return std::vector<std::vector<double>>{y};
                   },
                   19));
  }

  {
    Tensor target({2, 1, 4, 4});
    for (std::size_t i = 0; i < target.numel(); ++i) target.mutable_data()[i] = (i % 3 == 0) ? 1.0f : 0.0f;
    std::vector<Tensor> leaves{random_tensor({2, 1, 4, 4}, rng, -2, 2)};
    ledger.add("segmentation losses",
               grad_check(
                   leaves, [&](auto& t) { return synth::segmentation_loss(t[0], target); },
                   [&](auto& t) {
                     return 0.5 * (oracle::bce_logits(t[0].data(), target.data()) +
                                   oracle::soft_dice(t[0].data(), target.data(), 2));
                   }));
  }
  {
    const Tensor target = random_tensor({2, 3}, rng);
    const std::vector<std::size_t> labels{2, 0};
    const std::vector<float> query{0.3f, -0.2f, 0.9f};
    std::vector<Tensor> leaves{random_tensor({2, 3}, rng), random_tensor({3}, rng)};
    ledger.add("mse/cross_entropy/cosine_distance",
               grad_check(
                   leaves,
                   [&](auto& t) {
                     return tensor::add(tensor::add(tensor::mse(t[0], target), tensor::cross_entropy(t[0], labels)),
                                        tensor::cosine_distance(t[1], query));
                   },
                   [&](auto& t) {
                     const auto z = t[0].data();
                     const auto k = t[1].data();
                     double m = 0.0, ce = 0.0, kq = 0.0, kk = 0.0, qq = 0.0;
                     for (std::size_t i = 0; i < 6; ++i) m += std::pow(double(z[i]) - target.data()[i], 2) / 6.0;
                     for (std::size_t b = 0; b < 2; ++b) {
                       double norm = 0.0;
                       for (std::size_t i = 0; i < 3; ++i) norm += std::exp(double(z[b * 3 + i]));
                       ce += (std::log(norm) - z[b * 3 + labels[b]]) / 2.0;
                     }
                     for (std::size_t i = 0; i < 3; ++i) {
                       kq += double(k[i]) * query[i];
                       kk += double(k[i]) * k[i];
                       qq += double(query[i]) * query[i];
                     }
                     return m + ce + (1.0 - kq / std::sqrt(kk * qq));
                   }));
  }
  {
    std::vector<tensor::Parameter> params;
    params.emplace_back("a", random_tensor({4}, rng));
    params.emplace_back("b", random_tensor({2, 3}, rng));
    const std::vector<float> ref(10, 0.25f);
    std::vector<float> fisher(10);
    for (auto& f : fisher) f = static_cast<float>(rng.uniform(0.1, 2.0));
    tensor::ParameterRefs refs{&params[0], &params[1]};
    std::vector<Tensor> leaves{params[0].value(), params[1].value()};
    ledger.add("ewc penalty",
               grad_check(
                   leaves, [&](auto&) { return strategies::ewc_penalty(refs, ref, fisher, 3.0); },
                   [&](auto& t) {
                     std::vector<float> theta(t[0].data().begin(), t[0].data().end());
                     theta.insert(theta.end(), t[1].data().begin(), t[1].data().end());
                     return oracle::ewc_penalty(theta, ref, fisher, 3.0);
                   }));
  }

  // Composite ELBO in both modes, every VAE parameter plus the input rows.
  for (auto mode : {router::ElboMode::score, router::ElboMode::train}) {
    router::VaeOptions o;
    o.latent_dim = 3;
    o.hidden_dim = 6;
    o.beta = 2.5;
    o.seed = 31;
    router::TaskVAE vae(5, o);
    for (auto* p : vae.parameters()) set_random(*p, rng, 0.5);
    Tensor rows = random_tensor({3, 5}, rng);
    std::vector<Tensor> leaves{rows};
    for (auto* p : vae.parameters()) leaves.push_back(p->value());
    constexpr std::uint64_t kEpsSeed = 99;
    ledger.add(mode == router::ElboMode::score ? "elbo/score" : "elbo/train",
               grad_check(
                   leaves,
                   [&](auto& t) {
                     Rng r(kEpsSeed);
                     return router::elbo_loss(vae, t[0], mode, &r);
                   },
                   [&](auto& t) {
                     Rng r(kEpsSeed);
                     double total = 0.0;
                     for (std::size_t b = 0; b < 3; ++b) {
                       const std::span<const float> row = t[0].data().subspan(b * 5, 5);
                       std::vector<double> eps(3);
                       for (auto& e : eps) e = r.normal();
                       total += (mode == router::ElboMode::score ? oracle::elbo_score(vae, row)
                                                                 : oracle::elbo_sample(vae, row, eps)) /
                                3.0;
                     }
                     return total;
                   }));
  }
  {
    router::VaeOptions o;
    o.latent_dim = 2;
    o.hidden_dim = 4;
    o.seed = 32;
    router::TaskVAE vae(synth::kFeatureNumel, o, true);
    for (auto* p : vae.parameters()) set_random(*p, rng, 0.5);
    std::vector<Tensor> leaves{random_tensor({1, synth::kFeatureNumel}, rng)};
    for (auto* p : vae.parameters()) leaves.push_back(p->value());
    ledger.add("elbo/learnable pooling",
               grad_check(
                   leaves, [&](auto& t) { return router::elbo_loss(vae, t[0], router::ElboMode::score); },
                   [&](auto& t) {
                     return oracle::elbo_features(vae, oracle::query_pool(t[0].data(), vae.query.value().data()), {});
                   }));
  }

  // Alignment loss: layer -> fixed conv head -> segmentation loss.
  {
    align::AlignmentLayer layer(0, align::AlignmentInit{.n_blocks = 2, .channels = 4, .channel_kernel = 3, .seed = 5});
    for (auto* p : layer.parameters()) set_random(*p, rng, 0.4);
    const Tensor head_w = random_tensor({1, 4, 3, 3}, rng, -0.5, 0.5), head_b = random_tensor({1}, rng);
    Tensor mask({2, 1, 5, 5});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask.mutable_data()[i] = (i % 4 < 2) ? 1.0f : 0.0f;
    std::vector<Tensor> leaves{random_tensor({2, 4, 5, 5}, rng)};
    for (auto* p : layer.parameters()) leaves.push_back(p->value());
    auto logits = [&](const Tensor& z) { return tensor::conv2d(layer.forward(z), head_w, head_b, 1, 1); };
    ledger.add("alignment loss",
               grad_check(
                   leaves, [&](auto& t) { return synth::segmentation_loss(logits(t[0]), mask); },
                   [&](auto& t) {
                     const auto y = oracle::alignment_forward(layer, t[0].data(), 2, 4, 5, 5);
                     const auto z = oracle::conv2d(y, 2, 4, 5, 5, head_w.data(), head_b.data(), 1, 3, 1);
                     return oracle::segmentation_loss(z, mask.data(), 2);
                   }));
    ledger.add("alignment layer output",
               grad_check_exact(
                   leaves, [&](auto& t) { return std::vector{layer.forward(t[0])}; },
                   [&](auto& t) {
                     return std::vector<std::vector<double>>{oracle::alignment_forward(layer, t[0].data(), 2, 4, 5, 5)};
                   }, 21));
  }

  return {ledger.worst < kTol, std::to_string(ledger.checks) + " leaves checked, worst relative error " +
                                   fmt("%.1e", ledger.worst) + " (" + ledger.worst_name + ")"};
}

// --- shared experiment state ---------------------------------------------------------

struct Shared {
  experiment::ExperimentConfig cfg;
  std::unique_ptr<synth::Backbone> backbone;
  std::unique_ptr<experiment::Workspace> ws;
  std::map<std::string, experiment::StrategyOutcome> outcomes;
  std::map<std::string, double> seconds;
  double total_seconds = 0.0;
  metrics::TaskScore identity_ood;

  const experiment::StrategyOutcome& outcome(const std::string& label) const { return outcomes.at(label); }

  strategies::StrategyConfig strategy(const std::string& label) const {
    for (const auto& s : cfg.resolved_strategies())
      if (s.label() == label) return s;
    throw std::out_of_range("no strategy '" + label + "' in the config");
  }
};

std::unique_ptr<Shared> g_shared;
fs::path g_config_path, g_cache_dir, g_out_dir;

experiment::ExperimentConfig default_config() {
  auto cfg = experiment::load_config(g_config_path);
  cfg.backbone.cache_dir = g_cache_dir;
  cfg.output_dir = g_out_dir / "default";
  return cfg;
}

Shared& shared() {
  if (g_shared) return *g_shared;
  g_shared = std::make_unique<Shared>();
  auto& s = *g_shared;
  s.cfg = default_config();
  // Only the grid points the ablation criterion compares.
  s.cfg.ablation.betas = {0.0, 16.5};
  s.cfg.ablation.poolings = {router::Pooling::attention, router::Pooling::flatten};
  s.cfg.ablation.temperatures = {0.5, 1.0, 2.0, 4.0};
  s.backbone = std::make_unique<synth::Backbone>(experiment::obtain_backbone(s.cfg.backbone));
  s.ws = std::make_unique<experiment::Workspace>(s.cfg, *s.backbone);
  s.identity_ood = align::evaluate(s.ws->ood_suite().front().items, s.ws->backbone(),
                                   align::apply_layer(align::AlignmentLayer::identity()));
  for (const auto& strat : s.cfg.resolved_strategies()) {
    const auto t0 = Clock::now();
    auto o = experiment::run_one(*s.ws, strat);
    s.seconds[strat.label()] = seconds_since(t0);
    s.total_seconds += s.seconds[strat.label()];
    std::cout << "  ran " << strat.label() << " in " << fmt("%.1f", s.seconds[strat.label()]) << " s"
              << (o.ok ? "" : " (failed: " + o.error + ")") << std::endl;
    s.outcomes[strat.label()] = std::move(o);
  }
  return s;
}

std::unique_ptr<experiment::Workspace> permuted_workspace(const std::vector<int>& order) {
  auto& s = shared();
  auto cfg = s.cfg;
  cfg.stream.tasks = order;
  auto ws = std::make_unique<experiment::Workspace>(cfg, *s.backbone);
  ws->context().set_layer_cache(false);
  return ws;
}

// --- 3..9 ------------------------------------------------------------------------------

Verdict oracle_isolation() {
  auto& s = shared();
  const auto& o = s.outcome("casam-oracle");
  if (!o.ok) return {false, "casam-oracle failed: " + o.error};
  bool pass = o.aggregate.ff_iou == 0.0 && o.aggregate.ff_biou == 0.0;
  std::string detail = "default stream FF-IoU " + fmt("%.17g", o.aggregate.ff_iou);

  auto ws = permuted_workspace({2, 1, 0});
  const auto perm = experiment::run_one(*ws, s.strategy("casam-oracle"));
  pass = pass && perm.ok && perm.aggregate.ff_iou == 0.0 && perm.aggregate.ff_biou == 0.0;
  detail += ", reversed stream FF-IoU " + fmt("%.17g", perm.aggregate.ff_iou);
  return {pass, detail};
}

Verdict routing_quality() {
  auto& s = shared();
  const auto& o = s.outcome("casam");
  if (!o.ok) return {false, "casam failed: " + o.error};
  const double in = o.route_in_distribution.value_or(0.0), ood = o.route_ood.value_or(0.0);
  const double t = s.seconds.at("casam");
  return {in >= 0.95 && ood >= 0.90 && t < 600.0,
          "in-distribution " + fmt("%.4f", in) + " (>= 0.95), OOD rejection " + fmt("%.4f", ood) +
              " (>= 0.90), casam run " + fmt("%.0f", t) + " s (< 600)"};
}

Verdict ordering_and_forgetting() {
  auto& s = shared();
  for (const auto& [label, o] : s.outcomes)
    if (!o.ok) return {false, label + " failed: " + o.error};
  const auto& casam = s.outcome("casam").aggregate;
  const auto& naive = s.outcome("naive").aggregate;
  const auto& er = s.outcome("er").aggregate;
  const auto& der = s.outcome("der").aggregate;
  auto between = [&](double ff) { return ff > casam.ff_iou && ff < naive.ff_iou; };
  const bool pass = naive.last_iou + 0.10 <= casam.last_iou && casam.ff_iou <= 0.02 && naive.ff_iou >= 0.10 &&
                    between(er.ff_iou) && between(der.ff_iou) && s.total_seconds < 1800.0;
  return {pass, "Last-IoU naive " + pts(naive.last_iou) + " vs casam " + pts(casam.last_iou) + "; FF-IoU casam " +
                    pts(casam.ff_iou) + ", er " + pts(er.ff_iou) + ", der " + pts(der.ff_iou) + ", naive " +
                    pts(naive.ff_iou) + "; " + std::to_string(s.outcomes.size()) + " strategies in " +
                    fmt("%.0f", s.total_seconds) + " s (< 1800)"};
}

Verdict zero_shot() {
  auto& s = shared();
  const auto& casam = s.outcome("casam");
  const auto& moda = s.outcome("moda");
  if (!casam.ood_score || !moda.ood_score) return {false, "missing OOD scores"};
  const double id = s.identity_ood.iou, c = casam.ood_score->iou, m = moda.ood_score->iou;
  return {std::abs(c - id) <= 0.01 && id - m >= 0.05,
          "identity " + pts(id) + ", casam " + pts(c) + " (|delta| <= 1), moda " + pts(m) + " (drop >= 5)"};
}

std::map<int, double> final_iou(const experiment::StrategyOutcome& o) {
  std::map<int, double> out;
  const auto& last = o.stages.per_stage.back();
  for (std::size_t k = 0; k < last.size(); ++k) out[o.task_order[k]] = last[k].iou;
  return out;
}

Verdict order_robustness() {
  auto& s = shared();
  const auto& base = s.outcome("casam");
  if (!base.ok || !base.pool) return {false, "casam failed"};
  const auto ref = final_iou(base);
  double worst = 0.0;
  bool bitwise = true;
  for (const auto& order : std::vector<std::vector<int>>{{2, 0, 1}, {1, 2, 0}}) {
    auto ws = permuted_workspace(order);
    const auto o = experiment::run_one(*ws, s.strategy("casam"));
    if (!o.ok || !o.pool) return {false, "permuted run failed: " + o.error};
    for (const auto& [id, iou] : final_iou(o)) worst = std::max(worst, std::abs(iou - ref.at(id)));
    for (const auto& [id, entry] : o.pool->entries())
      bitwise = bitwise &&
                entry.layer.checkpoint().serialize() == base.pool->at(id).layer.checkpoint().serialize();
  }
  return {worst <= 0.001 && bitwise, "orders {2,0,1} and {1,2,0}: max per-task IoU change " + pts(worst) +
                                         " points (<= 0.1), adapters " + (bitwise ? "bitwise identical" : "differ")};
}

Verdict calibration_coverage() {
  auto& s = shared();
  const auto& o = s.outcome("casam");
  if (!o.ok || !o.pool) return {false, "casam failed"};
  const auto& pool = *o.pool;
  const auto& settings = pool.settings();
  if (settings.rule != router::ThresholdRule::p97 || settings.folds != 5)
    return {false, "config is not p97 with K=5"};
  auto& ctx = s.ws->context();
  bool pass = true;
  std::ostringstream detail;
  for (std::size_t t = 0; t < ctx.size(); ++t) {
    const int id = ctx.task(t).spec.task_id;
    const auto& entry = pool.at(id);
    const auto rows = router::router_rows(pool, ctx.task(t).train_features);
    std::size_t inside = 0;
    for (double v : router::score(entry.vae, rows)) inside += v <= entry.tau;
    const double cov = static_cast<double>(inside) / static_cast<double>(rows.size());

    auto o97 = settings.vae;
    o97.seed = tensor::derive_seed(settings.vae.seed, static_cast<std::uint64_t>(id));
    const auto cal = router::calibrate_threshold(rows, o97, settings.pooling.kind == router::Pooling::learnable,
                                                 settings.folds, router::ThresholdRule::p97);
    const double t95 = router::apply_rule(cal.held_out_scores, router::ThresholdRule::p95);
    const double t97 = router::apply_rule(cal.held_out_scores, router::ThresholdRule::p97);
    const double t99 = router::apply_rule(cal.held_out_scores, router::ThresholdRule::p99);
    pass = pass && cov >= 0.95 && t95 <= t97 && t97 <= t99 && t97 == entry.tau;
    detail << "task " << id << ": coverage " << fmt("%.3f", cov) << ", tau " << fmt("%.4f", t95) << " <= "
           << fmt("%.4f", t97) << " <= " << fmt("%.4f", t99) << (t97 == entry.tau ? "" : " (pool tau differs)")
           << "; ";
  }
  return {pass, detail.str()};
}

const experiment::SweepRow& row(const experiment::SweepTable& table, const std::string& value) {
  for (const auto& r : table.rows)
    if (r.value == value) return r;
  throw std::out_of_range("sweep has no row '" + value + "'");
}

Verdict ablations() {
  auto& s = shared();
  const auto& ablation = s.ws->config().ablation;
  const auto beta = experiment::ablation_sweep(*s.ws, experiment::SweepAxis::beta);
  const auto pooling = experiment::ablation_sweep(*s.ws, experiment::SweepAxis::pooling);
  const auto temperature = experiment::ablation_sweep(*s.ws, experiment::SweepAxis::temperature);
  fs::create_directories(g_out_dir);
  experiment::write_sweep(beta, g_out_dir / "sweep_beta.csv");
  experiment::write_sweep(pooling, g_out_dir / "sweep_pooling.csv");
  experiment::write_sweep(temperature, g_out_dir / "sweep_temperature.csv");

  const double ood0 = row(beta, "0").route_ood, ood165 = row(beta, "16.5").route_ood;
  const double att = row(pooling, "attention").route_in_distribution;
  const double flat = row(pooling, "flatten").route_in_distribution;
  double lo = 1.0, hi = 0.0;
  for (const auto& r : temperature.rows) {
    lo = std::min(lo, r.route_in_distribution);
    hi = std::max(hi, r.route_in_distribution);
  }
  const bool pass = ood0 < ood165 && att > flat && hi - lo < 0.05;
  return {pass, "OOD accuracy beta=0 " + pts(ood0) + " < beta=16.5 " + pts(ood165) + "; routing attention " +
                    pts(att) + " > flatten " + pts(flat) + "; T spread " + pts(hi - lo) + " points (< 5); " +
                    std::to_string(ablation.router_seeds.size()) + " router seeds"};
}

// --- 10 ---------------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    files[fs::relative(e.path(), dir).string()] = ss.str();
  }
  return files;
}

Verdict reproducibility() {
  auto cfg = default_config();
  cfg.name = "repro";
  cfg.stream.per_task_train = 40;
  cfg.stream.per_task_test = 20;
  cfg.stream.ood_test = 20;
  for (auto& st : cfg.strategies) {
    st.train.epochs = 2;
    st.classifier_epochs = 20;
  }
  cfg.router.vae.epochs = 3;
  const auto a = g_out_dir / "repro_a", b = g_out_dir / "repro_b";
  fs::remove_all(a);
  fs::remove_all(b);
  cfg.output_dir = a;
  const auto first = experiment::run_experiment(cfg);
  cfg.output_dir = b;
  (void)experiment::run_experiment(cfg, experiment::RunOptions{.jobs = 2});
  const auto fa = snapshot(a), fb = snapshot(b);
  std::size_t same = 0;
  std::vector<std::string> differ;
  for (const auto& [name, bytes] : fa) {
    const auto it = fb.find(name);
    if (it != fb.end() && it->second == bytes)
      ++same;
    else
      differ.push_back(name);
  }
  const bool pass = first.all_ok() && differ.empty() && fa.size() == fb.size() && !fa.empty();
  return {pass, std::to_string(same) + "/" + std::to_string(fa.size()) +
                    " report files byte-identical across a serial run and a 2-worker run" +
                    (differ.empty() ? "" : ", first mismatch " + differ.front())};
}

struct Criterion {
  int id;
  std::string name;
  std::function<Verdict()> run;
  double limit_seconds;  // 0: no runtime bound
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string config = std::string(CASAM_SOURCE_DIR) + "/configs/default.json";
  std::string cache = "acceptance_cache", out = "acceptance_out";
  app.add_option("--config", config, "experiment config");
  app.add_option("--cache", cache, "backbone cache directory");
  app.add_option("--out", out, "scratch output directory");
  app.add_option("criteria", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  g_config_path = config;
  g_cache_dir = cache;
  g_out_dir = out;

  const std::vector<Criterion> criteria{
      {1, "formula oracles", formula_oracles, 60.0},
      {2, "gradient checks", gradient_checks, 120.0},
      {3, "oracle-routed casam has zero forgetting", oracle_isolation, 0.0},
      {4, "router accuracy and OOD rejection", routing_quality, 0.0},
      {5, "strategy ordering and forgetting", ordering_and_forgetting, 0.0},
      {6, "zero-shot preservation", zero_shot, 0.0},
      {7, "task-order robustness", order_robustness, 0.0},
      {8, "threshold coverage and monotonicity", calibration_coverage, 0.0},
      {9, "ablation directions", ablations, 0.0},
      {10, "byte-identical reruns", reproducibility, 0.0},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (c.limit_seconds > 0.0 && secs >= c.limit_seconds) {
      v.pass = false;
      v.detail += " [over the " + fmt("%.0f", c.limit_seconds) + " s limit]";
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << c.id << ": " << c.name << " -- " << v.detail
              << " (" << fmt("%.1f", secs) << " s)" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed;
}
