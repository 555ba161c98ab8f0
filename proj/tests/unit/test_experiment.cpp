#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"

#include "casam/experiment/experiment.hpp"
#include "casam/synth/dataset_io.hpp"

using namespace casam;
using namespace casam::experiment;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("casam_exp_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::size_t n = 0;
  for (char c : slurp(p)) n += c == '\n';
  return n;
}

strategies::StrategyConfig quick(strategies::StrategyKind k) {
  strategies::StrategyConfig s;
  s.kind = k;
  s.seed = 1;
  s.n_blocks = 1;
  s.train = {.epochs = 1, .lr = 1e-3f, .batch = 4, .seed = 0};
  return s;
}

ExperimentConfig tiny(const fs::path& root) {
  ExperimentConfig c;
  c.name = "tiny";
  c.stream = {.tasks = {0}, .per_task_train = 10, .per_task_test = 4, .ood_test = 4, .seed = 3};
  c.backbone.spec = {.n_train = 16, .n_val = 8, .epochs = 1, .batch = 8, .lr = 2e-3f, .iou_floor = 0.0};
  c.backbone.seed = 2;
  c.backbone.cache_dir = root / "cache";
  c.router.vae.epochs = 2;
  c.router.vae.hidden_dim = 8;
  c.router.vae.seed = 4;
  c.router.folds = 2;
  c.strategies = {quick(strategies::StrategyKind::naive)};
  c.output_dir = root / "out";
  return c;
}

}  // namespace

TEST_CASE("config round trips through JSON without loss") {
  ExperimentConfig c = tiny("/tmp/x");
  c.stream.tasks = {2, 0, 1};
  c.router.pooling.kind = router::Pooling::flatten;
  c.router.pooling.temperature = 0.3;
  c.router.vae.lr = 1.234567e-4f;
  c.router.rule = router::ThresholdRule::mu_plus_2sigma;
  auto s = quick(strategies::StrategyKind::l2p);
  s.top_k = 3;
  s.train.lr = 7.77e-4f;
  s.memory_policy = strategies::MemoryPolicy::per_task_quota;
  c.strategies.push_back(s);
  c.ablation.betas = {0.0, 1.5};
  c.ablation.poolings = {router::Pooling::gap};

  const auto j = to_json(c);
  const auto back = config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.router.vae.lr == c.router.vae.lr);
  CHECK(back.strategies[1].train.lr == s.train.lr);
  CHECK(back.strategies[1].memory_policy == strategies::MemoryPolicy::per_task_quota);
  CHECK(back.stream.tasks == c.stream.tasks);
  CHECK(content_hash(to_json(back)) == content_hash(j));

  const auto path = scratch("roundtrip") / "c.json";
  save_config(c, path);
  CHECK(to_json(load_config(path)) == j);
}

TEST_CASE("seeds must be explicit and the schema version must match") {
  auto j = to_json(tiny("/tmp/x"));
  auto no_seed = j;
  no_seed["stream"].erase("seed");
  CHECK_THROWS_AS((void)config_from_json(no_seed), ConfigError);
  auto no_strategy_seed = j;
  no_strategy_seed["strategies"][0].erase("seed");
  CHECK_THROWS_AS((void)config_from_json(no_strategy_seed), ConfigError);
  auto old = j;
  old["schema_version"] = 99;
  CHECK_THROWS_AS((void)config_from_json(old), ConfigError);
  auto bad = j;
  bad["strategies"][0]["name"] = "sgd";
  CHECK_THROWS_AS((void)config_from_json(bad), ConfigError);
}

TEST_CASE("the shipped default config loads") {
  const auto c = load_config(fs::path(CASAM_SOURCE_DIR) / "configs" / "default.json");
  CHECK(c.stream.tasks.size() == 3);
  CHECK(c.strategies.size() >= 10);
  CHECK(c.ablation.router_seeds.size() == 5);
}

TEST_CASE("seed override and environment") {
  auto c = tiny("/tmp/x");
  c.strategies.push_back(quick(strategies::StrategyKind::er));
  apply_seed_override(c, 99);
  CHECK(c.stream.seed != 3);
  CHECK(c.strategies[0].seed != c.strategies[1].seed);
  auto d = tiny("/tmp/x");
  d.strategies.push_back(quick(strategies::StrategyKind::er));
  apply_seed_override(d, 99);
  CHECK(to_json(c) == to_json(d));

  setenv("CASAM_OUT_DIR", "/tmp/elsewhere", 1);
  apply_environment(c);
  unsetenv("CASAM_OUT_DIR");
  CHECK(c.output_dir == fs::path("/tmp/elsewhere"));
}

TEST_CASE("an empty strategy list writes header-only tables") {
  const auto dir = scratch("empty");
  ReportBundle b;
  b.name = "empty";
  emit_report(b, dir);
  CHECK(slurp(dir / "summary.csv") == "method,EF,Last-IoU,Avg-IoU,FF-IoU,Last-BIoU,Avg-BIoU,FF-BIoU\n");
  CHECK(line_count(dir / "zero_shot.csv") == 1);
  CHECK(line_count(dir / "routing.csv") == 1);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(summary_from_stages(dir).empty());
}

TEST_CASE("a missing backbone cache is an error when pretraining is off") {
  auto c = tiny(scratch("nocache"));
  c.backbone.allow_pretrain = false;
  CHECK_THROWS_AS((void)obtain_backbone(c.backbone), MissingCacheError);
  CHECK_THROWS_AS((void)run_experiment(c), MissingCacheError);
}

TEST_CASE("a one-task run completes, reproduces byte for byte and isolates failures") {
  const auto root = scratch("run");
  auto c = tiny(root);
  auto broken = quick(strategies::StrategyKind::ewc);
  broken.train.lr = std::numeric_limits<float>::infinity();
  c.strategies.push_back(broken);
  c.strategies.push_back(quick(strategies::StrategyKind::casam));

  bool trained = false;
  (void)obtain_backbone(c.backbone, &trained);
  CHECK(trained);
  (void)obtain_backbone(c.backbone, &trained);
  CHECK(!trained);

  const auto first = run_experiment(c);
  REQUIRE(first.outcomes.size() == 3);
  CHECK(first.outcomes[0].ok);
  CHECK(!first.outcomes[1].ok);
  CHECK(!first.outcomes[1].error.empty());
  CHECK(first.outcomes[2].ok);
  CHECK(!first.all_ok());
  CHECK(line_count(c.output_dir / "summary.csv") == 3);
  CHECK(fs::exists(c.output_dir / "pools" / "casam" / "pool.json"));

  const auto rows = summary_from_stages(c.output_dir);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == "naive");
  CHECK(rows[0].aggregate.last_iou == doctest::Approx(first.outcomes[0].aggregate.last_iou).epsilon(1e-7));
  CHECK(rows[1].aggregate.avg_biou == doctest::Approx(first.outcomes[2].aggregate.avg_biou).epsilon(1e-7));

  const std::vector<std::string> files{"manifest.json", "summary.csv", "zero_shot.csv", "routing.csv",
                                       "stages/naive.csv", "stages/casam.csv"};
  std::vector<std::string> before;
  for (const auto& f : files) before.push_back(slurp(c.output_dir / f));
  auto again = c;
  again.output_dir = root / "again";
  (void)run_experiment(again, RunOptions{.jobs = 2});
  for (std::size_t i = 0; i < files.size(); ++i) {
    CAPTURE(files[i]);
    CHECK(slurp(again.output_dir / files[i]) == before[i]);
  }
}

TEST_CASE("sweep axes parse and a saved pool routes an exported dataset") {
  CHECK(sweep_axis_from_string("beta") == SweepAxis::beta);
  CHECK_THROWS((void)sweep_axis_from_string("lr"));

  const auto root = scratch("route");
  auto c = tiny(root);
  c.stream.tasks = {0, 1};
  c.strategies = {quick(strategies::StrategyKind::casam)};
  (void)run_experiment(c);
  const auto stream = build_stream(c.stream);
  synth::export_stream(stream, c.stream.seed, root / "dataset");
  const auto backbone = obtain_backbone(c.backbone);
  const auto a = route_dataset(backbone, c.output_dir / "pools" / "casam", root / "dataset", root / "r1.csv");
  const auto b = route_dataset(backbone, c.output_dir / "pools" / "casam", root / "dataset", root / "r2.csv");
  CHECK(a.per_task.size() == 2);
  CHECK(slurp(root / "r1.csv") == slurp(root / "r2.csv"));
  CHECK(line_count(root / "r1.csv") == 1 + 2 * c.stream.per_task_test);
}
