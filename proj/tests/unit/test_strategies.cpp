#include <map>
#include <memory>

#include "doctest.h"
#include "oracles.hpp"

#include "casam/strategies/strategies.hpp"
#include "casam/tensor/init.hpp"
#include "casam/tensor/ops.hpp"

using namespace casam;
using namespace casam::strategies;
namespace oracle = casam::testing::oracle;

namespace {

// Untrained frozen backbone and a 3-task stream small enough for every strategy.
struct Tiny {
  synth::Backbone backbone{5};
  synth::Stream stream;
  std::unique_ptr<StreamContext> ctx;

  explicit Tiny(std::vector<int> order = {0, 1, 2}) {
    backbone.freeze();
    for (int id : order) stream.push_back(synth::generate_task(synth::catalog_task(id, 4), 10, 4));
    ctx = std::make_unique<StreamContext>(backbone, stream);
  }
};

StrategyConfig tiny_config(StrategyKind kind) {
  StrategyConfig c;
  c.kind = kind;
  c.seed = 7;
  c.n_blocks = 1;
  c.train = {.epochs = 1, .lr = 1e-3f, .batch = 4, .seed = 0};
  c.memory_capacity = 4;
  c.prompt_pool_size = 6;
  c.classifier_epochs = 20;
  c.router.vae.epochs = 2;
  c.router.vae.hidden_dim = 16;
  c.router.vae.seed = 3;
  c.router.folds = 2;
  return c;
}

std::vector<double> stage_values(const StrategyResult& r) {
  std::vector<double> v;
  for (const auto& row : r.stages.per_stage)
    for (const auto& s : row) {
      v.push_back(s.iou);
      v.push_back(s.biou);
    }
  return v;
}

MemoryEntry entry(int tag) {
  MemoryEntry e;
  e.task_id = tag;
  return e;
}

}  // namespace

TEST_CASE("strategy names and exemplar-free flags") {
  for (auto k : {StrategyKind::naive, StrategyKind::lwf, StrategyKind::ewc, StrategyKind::er, StrategyKind::der,
                 StrategyKind::l2p, StrategyKind::moda, StrategyKind::emr, StrategyKind::joint, StrategyKind::casam})
    CHECK(strategy_from_string(to_string(k)) == k);
  CHECK(exemplar_free(StrategyKind::casam));
  CHECK(exemplar_free(StrategyKind::ewc));
  CHECK(!exemplar_free(StrategyKind::er));
  CHECK(!exemplar_free(StrategyKind::joint));
  auto c = tiny_config(StrategyKind::casam);
  c.oracle_routing = true;
  CHECK(c.label() == "casam-oracle");
  c.lambda_ewc = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("reservoir keeps every offered item with equal probability") {
  const std::size_t items = 50, capacity = 10, trials = 2000;
  std::vector<double> counts(items, 0.0);
  for (std::size_t t = 0; t < trials; ++t) {
    MemoryBank bank(capacity, MemoryPolicy::reservoir, t);
    for (std::size_t i = 0; i < items; ++i) bank.offer(entry(static_cast<int>(i)));
    REQUIRE(bank.size() == capacity);
    CHECK(bank.seen() == items);
    for (const auto& e : bank.entries()) counts[static_cast<std::size_t>(e.task_id)] += 1.0;
  }
  const double expected = static_cast<double>(trials * capacity) / items;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 49 degrees of freedom; the 0.999 quantile is about 85.
  CHECK(chi2 < 85.0);
}

TEST_CASE("zero-capacity memory stays empty") {
  MemoryBank bank(0, MemoryPolicy::reservoir, 1);
  for (int i = 0; i < 5; ++i) bank.offer(entry(i));
  CHECK(bank.size() == 0);
}

TEST_CASE("per-task quota splits the memory evenly, earlier tasks take the remainder") {
  MemoryBank bank(10, MemoryPolicy::per_task_quota, 3);
  auto add = [&](int task, std::size_t n) {
    std::vector<MemoryEntry> c(n, entry(task));
    bank.add_task(c);
  };
  auto count = [&](int task) {
    std::size_t n = 0;
    for (const auto& e : bank.entries()) n += e.task_id == task;
    return n;
  };
  add(0, 20);
  CHECK(count(0) == 10);
  add(1, 20);
  CHECK(count(0) == 5);
  CHECK(count(1) == 5);
  add(2, 20);
  CHECK(count(0) == 4);
  CHECK(count(1) == 3);
  CHECK(count(2) == 3);
  CHECK_THROWS_AS(bank.offer(entry(0)), std::logic_error);
}

TEST_CASE("election keeps sign-consistent coordinates at their largest magnitude") {
  std::vector<TaskVector> v(2);
  v[0].delta = {1.0, -2.0, 0.0, 3.0, -0.5};
  v[1].delta = {2.0, -1.0, 1.0, -1.0, -0.7};
  CHECK(elect(v) == std::vector<double>{2.0, -2.0, 0.0, 0.0, -0.7});

  tensor::Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<TaskVector> tv(1 + rng.below(4));
    std::vector<std::vector<double>> raw;
    for (auto& t : tv) {
      for (int i = 0; i < 16; ++i) t.delta.push_back(rng.below(5) == 0 ? 0.0 : rng.uniform(-1.0, 1.0));
      raw.push_back(t.delta);
    }
    CHECK(elect(tv) == oracle::elect(raw));
  }
}

TEST_CASE("merge rescales the masked unified vector to the task norm") {
  const std::vector<float> init{1.0f, 1.0f, 1.0f};
  const std::vector<float> tuned{2.0f, 1.0f, 0.0f};
  const auto task = TaskVector::between(tuned, init);
  CHECK(task.norm == doctest::Approx(std::sqrt(2.0)));
  const std::vector<double> unified{2.0, 0.5, 1.0};
  const auto mask = emr_mask(unified, task);
  CHECK(mask == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(emr_scale(unified, mask, task) == doctest::Approx(std::sqrt(2.0) / 2.0));
  const auto merged = emr_merge(init, unified, task);
  CHECK(merged[0] == doctest::Approx(1.0 + std::sqrt(2.0)));
  CHECK(merged[1] == 1.0f);
  CHECK(emr_scale(std::vector<double>{0.0, 0.0, 0.0}, mask, task) == 0.0);

  // A single task merges back to its own tuned weights.
  const std::vector<TaskVector> one{task};
  const auto self = emr_merge(init, elect(one), task);
  CHECK(self == tuned);
}

TEST_CASE("EWC penalty matches the oracle value and gradient") {
  tensor::Rng rng(2);
  tensor::Parameter a("a", tensor::normal_tensor({3, 2}, 1.0f, rng));
  tensor::Parameter b("b", tensor::normal_tensor({4}, 1.0f, rng));
  const tensor::ParameterRefs params{&a, &b};
  std::vector<float> ref(10), fisher(10);
  for (auto& v : ref) v = static_cast<float>(rng.normal());
  for (auto& v : fisher) v = static_cast<float>(rng.uniform(0.0, 2.0));
  const auto theta = tensor::flatten_values(params);
  const auto pen = ewc_penalty(params, ref, fisher, 3.0);
  CHECK(pen.item() == doctest::Approx(oracle::ewc_penalty(theta, ref, fisher, 3.0)).epsilon(1e-5));
  tensor::backward(pen);
  const auto g = a.value().grad();
  for (std::size_t i = 0; i < 6; ++i) CHECK(g[i] == doctest::Approx(6.0 * fisher[i] * (theta[i] - ref[i])).epsilon(1e-4));
  CHECK_THROWS((void)ewc_penalty(params, std::vector<float>(3), fisher, 1.0));
}

TEST_CASE("prompt selection respects the slot range and ranks by cosine") {
  PromptPool pool(6, 1);
  const auto key3 = pool.keys[3].value().data();
  const std::vector<float> q(key3.begin(), key3.end());
  CHECK(pool.select(q, 1, 0, 6) == std::vector<std::size_t>{3});
  for (auto j : pool.select(q, 2, 0, 3)) CHECK(j < 3);
  CHECK_THROWS((void)pool.select(q, 1, 4, 4));
}

TEST_CASE("task classifier separates two clusters") {
  std::vector<router::Feature> rows;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 20; ++i) {
    const float s = i % 2 == 0 ? 1.0f : -1.0f;
    rows.push_back({s + 0.01f * i, -s});
    labels.push_back(static_cast<std::size_t>(i % 2));
  }
  TaskClassifier clf(2, 2, 1);
  clf.fit(rows, labels, 100, 5e-2f);
  CHECK(clf.predict(std::vector<float>{1.0f, -1.0f}) == 0);
  CHECK(clf.predict(std::vector<float>{-1.0f, 1.0f}) == 1);
}

TEST_CASE("every strategy runs, keeps the backbone frozen and matches its EF label") {
  Tiny t;
  for (auto k : {StrategyKind::naive, StrategyKind::lwf, StrategyKind::ewc, StrategyKind::er, StrategyKind::der,
                 StrategyKind::l2p, StrategyKind::moda, StrategyKind::emr, StrategyKind::joint, StrategyKind::casam}) {
    CAPTURE(to_string(k));
    const auto r = run_strategy(*t.ctx, tiny_config(k));
    CHECK(r.backbone_hash_before == r.backbone_hash_after);
    CHECK(r.stages.stages() == 3);
    CHECK_NOTHROW(r.stages.validate());
    CHECK(r.exemplar_free == exemplar_free(k));
    CHECK(r.observed_exemplar_free == r.exemplar_free);
    CHECK(r.task_order == std::vector<int>{0, 1, 2});
  }
}

TEST_CASE("degenerate settings collapse to simpler strategies") {
  Tiny t;
  const auto naive = stage_values(run_naive(*t.ctx, tiny_config(StrategyKind::naive)));

  auto er0 = tiny_config(StrategyKind::er);
  er0.memory_capacity = 0;
  CHECK(stage_values(run_er(*t.ctx, er0)) == naive);

  auto lwf0 = tiny_config(StrategyKind::lwf);
  lwf0.lambda_distill = 0.0;
  CHECK(stage_values(run_lwf(*t.ctx, lwf0)) == naive);

  auto ewc0 = tiny_config(StrategyKind::ewc);
  ewc0.lambda_ewc = 0.0;
  CHECK(stage_values(run_ewc(*t.ctx, ewc0)) == naive);

  auto der0 = tiny_config(StrategyKind::der);
  der0.der_alpha = 0.0;
  CHECK(stage_values(run_der(*t.ctx, der0)) == stage_values(run_er(*t.ctx, tiny_config(StrategyKind::er))));
}

TEST_CASE("casam keeps one frozen layer per task and oracle routing never forgets") {
  Tiny t;
  auto cfg = tiny_config(StrategyKind::casam);
  cfg.oracle_routing = true;
  const auto r = run_casam(*t.ctx, cfg);
  CHECK(r.alignment_layers == 3);
  REQUIRE(r.pool);
  for (const auto& [id, e] : r.pool->entries()) {
    CHECK(e.layer.task_id() == id);
    for (auto* p : const_cast<align::AlignmentLayer&>(e.layer).parameters()) CHECK(!p->trainable());
  }
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t s = k; s < 3; ++s) CHECK(r.stages.per_stage[s][k].iou == r.stages.per_stage[k][k].iou);
  CHECK(metrics::stage_aggregate(r.stages).ff_iou == 0.0);
  CHECK(!r.infer);

  cfg.oracle_routing = false;
  const auto routed = run_casam(*t.ctx, cfg);
  CHECK(routed.infer);
  CHECK(routed.route(t.ctx->test_items(0)).size() == t.ctx->test_items(0).size());
  CHECK(routed.stages.routing_log.size() == 12);
}

TEST_CASE("isolated layers do not depend on stream order") {
  Tiny a({0, 1, 2}), b({2, 0, 1});
  a.ctx->set_layer_cache(false);
  b.ctx->set_layer_cache(false);
  const auto cfg = tiny_config(StrategyKind::casam);
  auto& la = const_cast<align::AlignmentLayer&>(a.ctx->isolated_layer(1, cfg));
  auto& lb = const_cast<align::AlignmentLayer&>(b.ctx->isolated_layer(2, cfg));
  CHECK(la.task_id() == 1);
  CHECK(tensor::flatten_values(la.parameters()) == tensor::flatten_values(lb.parameters()));
}

TEST_CASE("memory reads are audited against their task") {
  Tiny t;
  MemoryBank bank(2, MemoryPolicy::reservoir, 1);
  MemoryEntry e;
  e.task_id = 0;
  bank.offer(e);
  t.ctx->begin_run();
  t.ctx->begin_stage(1);
  (void)bank.items(*t.ctx);
  CHECK(!t.ctx->observed_exemplar_free());
  t.ctx->begin_run();
  (void)t.ctx->train_items(0);
  CHECK(t.ctx->observed_exemplar_free());
}
