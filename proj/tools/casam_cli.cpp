// casam: pretrain, run, sweep, route and report from a JSON experiment config.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "casam/experiment/experiment.hpp"
#include "casam/synth/dataset_io.hpp"

namespace fs = std::filesystem;
using namespace casam;
using namespace casam::experiment;

namespace {

struct Common {
  std::string config = "configs/default.json";
  std::string out;
  std::optional<std::uint64_t> seed_override;
};

ExperimentConfig load(const Common& c) {
  auto cfg = load_config(c.config);
  if (c.seed_override) apply_seed_override(cfg, *c.seed_override);
  apply_environment(cfg);
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_out = true) {
  app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  if (with_out) app->add_option("--out", c.out, "output directory (overrides config and CASAM_OUT_DIR)");
  app->add_option("--seed-override", c.seed_override, "derive every seed from this value");
}

int cmd_pretrain(const Common& c) {
  const auto cfg = load(c);
  bool trained = false;
  const auto backbone = obtain_backbone(cfg.backbone, &trained);
  std::printf("%s backbone %016llx at %s\n", trained ? "pretrained" : "cached",
              static_cast<unsigned long long>(backbone.hash()), backbone_cache_path(cfg.backbone).c_str());
  return 0;
}

int cmd_run(const Common& c, std::size_t jobs) {
  const auto cfg = load(c);
  const auto bundle = run_experiment(cfg, RunOptions{.jobs = jobs});
  for (const auto& o : bundle.outcomes) {
    if (o.ok)
      std::printf("%-14s Last-IoU %6.2f  FF-IoU %5.2f\n", o.method.c_str(), 100.0 * o.aggregate.last_iou,
                  100.0 * o.aggregate.ff_iou);
    else
      std::printf("%-14s FAILED: %s\n", o.method.c_str(), o.error.c_str());
  }
  std::printf("report written to %s\n", cfg.output_dir.c_str());
  return bundle.all_ok() ? 0 : 1;
}

int cmd_sweep(const Common& c, const std::vector<std::string>& axes) {
  const auto cfg = load(c);
  Workspace ws(cfg);
  for (const auto& name : axes) {
    const auto axis = sweep_axis_from_string(name);
    const auto table = ablation_sweep(ws, axis);
    const auto path = cfg.output_dir / ("sweep_" + name + ".csv");
    write_sweep(table, path);
    for (const auto& r : table.rows)
      std::printf("%-11s %-10s route %6.2f  ood %6.2f  Last-IoU %6.2f\n", name.c_str(), r.value.c_str(),
                  100.0 * r.route_in_distribution, 100.0 * r.route_ood, 100.0 * r.aggregate.last_iou);
    std::printf("wrote %s\n", path.c_str());
  }
  return 0;
}

int cmd_export(const Common& c) {
  const auto cfg = load(c);
  auto stream = build_stream(cfg.stream);
  std::vector<synth::TaskSpec> specs;
  for (const auto& t : stream) specs.push_back(t.spec);
  // The held-out task rides along (test split only) so routing can be scored on OOD inputs too.
  const auto ood = synth::ood_suite(specs, cfg.stream.seed).front();
  stream.push_back(synth::generate_task(ood, 0, cfg.stream.ood_test));
  const fs::path dir = cfg.output_dir / "dataset";
  synth::export_stream(stream, cfg.stream.seed, dir);
  std::printf("exported %zu tasks to %s\n", stream.size(), dir.c_str());
  return 0;
}

int cmd_route(const Common& c, const std::string& pool, const std::string& dataset) {
  const auto cfg = load(c);
  const auto backbone = obtain_backbone(cfg.backbone);
  const fs::path out = cfg.output_dir / "route.csv";
  const auto acc = route_dataset(backbone, pool, dataset, out);
  for (const auto& [task, ct] : acc.per_task)
    std::printf("task %4d  %zu/%zu routed correctly\n", task, ct.first, ct.second);
  if (acc.in_distribution) std::printf("in-distribution accuracy %.2f%%\n", 100.0 * *acc.in_distribution);
  if (acc.ood) std::printf("OOD rejection %.2f%%\n", 100.0 * *acc.ood);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_report(const std::string& dir) {
  const auto rows = summary_from_stages(dir);
  std::cout << format_summary(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual segmentation experiments on a synthetic stream"};
  app.require_subcommand(1);

  Common common;
  std::size_t jobs = 1;
  std::vector<std::string> axes;
  std::string pool, dataset, report_dir;

  auto* pretrain = app.add_subcommand("pretrain", "pretrain (or verify the cached) backbone");
  add_common(pretrain, common, false);
  auto* run = app.add_subcommand("run", "run every strategy of the config and write the report");
  add_common(run, common);
  run->add_option("--jobs", jobs, "strategies run concurrently")->check(CLI::PositiveNumber);
  auto* sweep = app.add_subcommand("sweep", "ablation sweep of routed casam");
  add_common(sweep, common);
  sweep->add_option("--axis", axes, "temperature|beta|tau_rule|pooling|n_blocks")->required();
  auto* route = app.add_subcommand("route", "score a saved router pool against an exported dataset");
  add_common(route, common);
  route->add_option("--pool", pool, "pool directory")->required()->check(CLI::ExistingDirectory);
  route->add_option("--dataset", dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  auto* exp = app.add_subcommand("export", "write the config's stream as a dataset directory");
  add_common(exp, common);
  auto* report = app.add_subcommand("report", "rebuild the comparison table from a report's stage tables");
  report->add_option("--out", report_dir, "report directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*run) return cmd_run(common, jobs);
    if (*sweep) return cmd_sweep(common, axes);
    if (*route) return cmd_route(common, pool, dataset);
    if (*exp) return cmd_export(common);
    if (*report) return cmd_report(report_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
