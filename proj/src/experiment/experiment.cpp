#include "casam/experiment/experiment.hpp"

#include <omp.h>

#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "casam/synth/dataset_io.hpp"

namespace casam::experiment {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using strategies::StrategyConfig;
using strategies::StrategyKind;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Report tables print fractions with 8 digits and percentages with 4.
std::string frac(double v) { return fixed(v, 8); }
std::string pct(double v) { return fixed(100.0 * v, 4); }

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

json outcome_json(const StrategyOutcome& o) {
  json j{{"method", o.method}, {"status", o.ok ? "ok" : "failed"}};
  if (!o.ok) {
    j["error"] = o.error;
    return j;
  }
  j["exemplar_free"] = o.exemplar_free;
  j["observed_exemplar_free"] = o.observed_exemplar_free;
  j["alignment_layers"] = o.alignment_layers;
  j["stage_table"] = "stages/" + o.method + ".csv";
  return j;
}

}  // namespace

// --- backbone cache --------------------------------------------------------------

std::uint64_t backbone_key(const BackboneConfig& cfg) {
  const auto& s = cfg.spec;
  return content_hash(json{{"n_train", s.n_train},
                           {"n_val", s.n_val},
                           {"epochs", s.epochs},
                           {"batch", s.batch},
                           {"lr", s.lr},
                           {"iou_floor", s.iou_floor},
                           {"seed", cfg.seed}});
}

fs::path backbone_cache_path(const BackboneConfig& cfg) {
  return cfg.cache_dir / ("backbone-" + hex64(backbone_key(cfg)) + ".ckpt");
}

synth::Backbone obtain_backbone(const BackboneConfig& cfg, bool* trained) {
  const fs::path path = backbone_cache_path(cfg);
  if (trained) *trained = false;
  if (fs::exists(path)) return synth::Backbone::from_checkpoint(tensor::Checkpoint::load(path));
  if (!cfg.allow_pretrain)
    throw MissingCacheError("no cached backbone at " + path.string() + " and pretraining is disabled");
  auto backbone = synth::pretrain_backbone(cfg.spec, cfg.seed);
  fs::create_directories(cfg.cache_dir);
  // Write then rename so concurrent runs never read a partial file.
  const fs::path tmp = path.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  backbone.checkpoint().save(tmp);
  fs::rename(tmp, path);
  if (trained) *trained = true;
  return backbone;
}

synth::Stream build_stream(const StreamConfig& cfg) {
  synth::Stream stream;
  for (int id : cfg.tasks)
    stream.push_back(synth::generate_task(synth::catalog_task(id, cfg.seed), cfg.per_task_train, cfg.per_task_test));
  return stream;
}

// --- workspace -------------------------------------------------------------------

Workspace::Workspace(const ExperimentConfig& cfg) : Workspace(cfg, obtain_backbone(cfg.backbone)) {}

Workspace::Workspace(const ExperimentConfig& cfg, const synth::Backbone& backbone)
    : cfg_(cfg), backbone_(std::make_unique<synth::Backbone>(backbone)), stream_(build_stream(cfg.stream)) {
  ctx_ = std::make_unique<strategies::StreamContext>(*backbone_, stream_);
  std::vector<synth::TaskSpec> specs;
  for (const auto& t : stream_) specs.push_back(t.spec);
  for (const auto& spec : synth::ood_suite(specs, cfg.stream.seed)) {
    OodSet set;
    set.spec = spec;
    set.data = synth::generate_task(spec, 0, cfg.stream.ood_test).test;
    ood_.push_back(std::move(set));
  }
  for (auto& set : ood_) {
    set.features = synth::encode_dataset(*backbone_, set.data);
    set.items = align::examples(set.features, set.data);
  }
}

// --- strategy runs -----------------------------------------------------------------

StrategyOutcome score_result(Workspace& ws, strategies::StrategyResult result) {
  StrategyOutcome o;
  o.method = result.method;
  o.ok = true;
  o.exemplar_free = result.exemplar_free;
  o.observed_exemplar_free = result.observed_exemplar_free;
  o.aggregate = metrics::stage_aggregate(result.stages);
  o.task_order = result.task_order;
  o.alignment_layers = result.alignment_layers;
  const auto& suite = ws.ood_suite();
  if (result.infer && !suite.empty()) o.ood_score = result.infer(suite.front().items);
  if (result.route) {
    o.route_in_distribution = metrics::routing_accuracy(result.stages.routing_log).in_distribution;
    std::size_t rejected = 0, total = 0;
    for (const auto& set : suite) {
      for (int c : result.route(set.items)) rejected += c == metrics::kOodRoute;
      total += set.items.size();
    }
    if (total > 0) o.route_ood = static_cast<double>(rejected) / static_cast<double>(total);
  }
  o.stages = std::move(result.stages);
  o.pool = std::move(result.pool);
  return o;
}

StrategyOutcome run_one(Workspace& ws, const StrategyConfig& cfg) {
  try {
    return score_result(ws, strategies::run_strategy(ws.context(), cfg));
  } catch (const std::exception& e) {
    StrategyOutcome o;
    o.method = cfg.label();
    o.error = e.what();
    return o;
  }
}

bool ReportBundle::all_ok() const {
  for (const auto& o : outcomes)
    if (!o.ok) return false;
  return true;
}

ReportBundle run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const auto backbone = obtain_backbone(cfg.backbone);
  const auto strategies = cfg.resolved_strategies();

  ReportBundle bundle;
  bundle.name = cfg.name;
  // Where the report goes is not part of what was run.
  auto identity = to_json(cfg);
  identity.erase("output_dir");
  bundle.config_hash = content_hash(identity);
  bundle.backbone_hash = backbone.hash();
  bundle.task_order = cfg.stream.tasks;
  bundle.outcomes.resize(strategies.size());

  Workspace main(cfg, backbone);
  if (!main.ood_suite().empty())
    bundle.identity_ood = align::evaluate(main.ood_suite().front().items, main.backbone(),
                                          align::apply_layer(align::AlignmentLayer::identity()));

  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, strategies.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < strategies.size(); ++i) bundle.outcomes[i] = run_one(main, strategies[i]);
  } else {
    // Workers pull strategies in config order; each owns its context and
    // runs its kernels single-threaded. Results land in their config slot.
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        omp_set_num_threads(1);
        std::unique_ptr<Workspace> own;
        Workspace* ws = &main;
        if (w > 0) {
          own = std::make_unique<Workspace>(cfg, backbone);
          ws = own.get();
        }
        for (std::size_t i = next++; i < strategies.size(); i = next++) bundle.outcomes[i] = run_one(*ws, strategies[i]);
      });
    }
    for (auto& t : workers) t.join();
  }

  emit_report(bundle, cfg.output_dir);
  if (options.save_pools)
    for (const auto& o : bundle.outcomes)
      if (o.ok && o.pool) router::save_pool(*o.pool, cfg.output_dir / "pools" / o.method);
  return bundle;
}

// --- reports -------------------------------------------------------------------------

void emit_report(const ReportBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir / "stages");

  json strategies = json::array();
  for (const auto& o : bundle.outcomes) strategies.push_back(outcome_json(o));
  json manifest{{"format", "casam-report"},
                {"version", 1},
                {"name", bundle.name},
                {"config_hash", hex64(bundle.config_hash)},
                {"backbone_hash", hex64(bundle.backbone_hash)},
                {"task_order", bundle.task_order},
                {"all_ok", bundle.all_ok()},
                {"strategies", strategies},
                {"files", {"summary.csv", "zero_shot.csv", "routing.csv"}}};
  open_out(dir / "manifest.json") << manifest.dump(2) << '\n';

  auto summary = open_out(dir / "summary.csv");
  summary << "method,EF,Last-IoU,Avg-IoU,FF-IoU,Last-BIoU,Avg-BIoU,FF-BIoU\n";
  auto zero_shot = open_out(dir / "zero_shot.csv");
  zero_shot << "method,OOD-IoU,OOD-BIoU,delta-IoU,delta-BIoU\n";
  auto routing = open_out(dir / "routing.csv");
  routing << "method,in-distribution,ood-rejection\n";
  if (!bundle.outcomes.empty())
    zero_shot << "identity," << pct(bundle.identity_ood.iou) << ',' << pct(bundle.identity_ood.biou) << ",0.0000,0.0000\n";

  for (const auto& o : bundle.outcomes) {
    if (!o.ok) continue;
    const auto& a = o.aggregate;
    summary << o.method << ',' << (o.exemplar_free ? "yes" : "no") << ',' << pct(a.last_iou) << ','
            << pct(a.avg_iou) << ',' << pct(a.ff_iou) << ',' << pct(a.last_biou) << ',' << pct(a.avg_biou) << ','
            << pct(a.ff_biou) << '\n';
    if (o.ood_score)
      zero_shot << o.method << ',' << pct(o.ood_score->iou) << ',' << pct(o.ood_score->biou) << ','
                << pct(o.ood_score->iou - bundle.identity_ood.iou) << ','
                << pct(o.ood_score->biou - bundle.identity_ood.biou) << '\n';
    if (o.route_in_distribution || o.route_ood)
      routing << o.method << ',' << (o.route_in_distribution ? pct(*o.route_in_distribution) : "") << ','
              << (o.route_ood ? pct(*o.route_ood) : "") << '\n';

    auto stages = open_out(dir / "stages" / (o.method + ".csv"));
    stages << "stage,task,n,IoU,BIoU\n";
    for (std::size_t t = 0; t < o.stages.per_stage.size(); ++t)
      for (std::size_t k = 0; k < o.stages.per_stage[t].size(); ++k) {
        const auto& s = o.stages.per_stage[t][k];
        stages << t << ',' << o.task_order.at(k) << ',' << s.n << ',' << frac(s.iou) << ',' << frac(s.biou) << '\n';
      }
  }
}

std::vector<SummaryRow> summary_from_stages(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  const json manifest = json::parse(in);
  std::vector<SummaryRow> rows;
  for (const auto& s : manifest.at("strategies")) {
    if (s.at("status") != "ok") continue;
    SummaryRow row;
    row.method = s.at("method").get<std::string>();
    row.exemplar_free = s.at("exemplar_free").get<bool>();
    std::ifstream table(dir / s.at("stage_table").get<std::string>());
    if (!table) throw std::runtime_error("missing stage table for " + row.method);
    std::string line;
    std::getline(table, line);
    if (line != "stage,task,n,IoU,BIoU") throw std::runtime_error("bad stage table header for " + row.method);
    metrics::StageMetrics sm;
    while (std::getline(table, line)) {
      if (line.empty()) continue;
      const auto cells = split_csv(line);
      if (cells.size() != 5) throw std::runtime_error("bad stage row: " + line);
      const std::size_t t = std::stoul(cells[0]);
      if (t >= sm.per_stage.size()) sm.per_stage.resize(t + 1);
      sm.per_stage[t].push_back({std::stod(cells[3]), std::stod(cells[4]), std::stoul(cells[2])});
    }
    sm.validate();
    row.aggregate = metrics::stage_aggregate(sm);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_summary(std::span<const SummaryRow> rows) {
  std::string out = "| method | EF | Last-IoU | Avg-IoU | FF-IoU | Last-BIoU | Avg-BIoU | FF-BIoU |\n"
                    "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto& a = r.aggregate;
    out += "| " + r.method + " | " + (r.exemplar_free ? "yes" : "no");
    for (double v : {a.last_iou, a.avg_iou, a.ff_iou, a.last_biou, a.avg_biou, a.ff_biou})
      out += " | " + fixed(100.0 * v, 2);
    out += " |\n";
  }
  return out;
}

// --- sweeps -----------------------------------------------------------------------------

std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::temperature: return "temperature";
    case SweepAxis::beta: return "beta";
    case SweepAxis::tau_rule: return "tau_rule";
    case SweepAxis::pooling: return "pooling";
    case SweepAxis::n_blocks: return "n_blocks";
  }
  return "?";
}

SweepAxis sweep_axis_from_string(std::string_view name) {
  for (auto a : {SweepAxis::temperature, SweepAxis::beta, SweepAxis::tau_rule, SweepAxis::pooling, SweepAxis::n_blocks})
    if (to_string(a) == name) return a;
  throw std::invalid_argument("unknown sweep axis '" + std::string(name) + "'");
}

namespace {

StrategyConfig sweep_base(const ExperimentConfig& cfg) {
  for (const auto& s : cfg.resolved_strategies())
    if (s.kind == StrategyKind::casam) {
      auto base = s;
      base.oracle_routing = false;
      return base;
    }
  StrategyConfig base;
  base.kind = StrategyKind::casam;
  base.router = cfg.router;
  base.seed = cfg.stream.seed;
  return base;
}

double coverage(const router::RouterPool& pool, const strategies::StreamContext& ctx) {
  std::size_t inside = 0, total = 0;
  for (std::size_t t = 0; t < ctx.size(); ++t) {
    const auto& entry = pool.at(ctx.task(t).spec.task_id);
    for (double s : router::score(entry.vae, router::router_rows(pool, ctx.task(t).train_features))) {
      inside += s <= entry.tau;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(inside) / static_cast<double>(total);
}

// Mean of the per-seed rows; fields are averaged arithmetically.
SweepRow average(const std::string& value, const std::vector<SweepRow>& runs) {
  SweepRow row;
  row.value = value;
  row.seeds = runs.size();
  const double n = static_cast<double>(runs.size());
  for (const auto& r : runs) {
    row.route_in_distribution += r.route_in_distribution / n;
    row.route_ood += r.route_ood / n;
    row.coverage += r.coverage / n;
    row.aggregate.last_iou += r.aggregate.last_iou / n;
    row.aggregate.avg_iou += r.aggregate.avg_iou / n;
    row.aggregate.ff_iou += r.aggregate.ff_iou / n;
    row.aggregate.last_biou += r.aggregate.last_biou / n;
    row.aggregate.avg_biou += r.aggregate.avg_biou / n;
    row.aggregate.ff_biou += r.aggregate.ff_biou / n;
    row.ood_score.iou += r.ood_score.iou / n;
    row.ood_score.biou += r.ood_score.biou / n;
    row.ood_score.n = r.ood_score.n;
  }
  return row;
}

SweepRow sweep_point(Workspace& ws, const StrategyConfig& cfg) {
  auto result = strategies::run_casam(ws.context(), cfg);
  SweepRow row;
  row.coverage = coverage(*result.pool, ws.context());
  const auto o = score_result(ws, std::move(result));
  row.route_in_distribution = o.route_in_distribution.value_or(0.0);
  row.route_ood = o.route_ood.value_or(0.0);
  row.aggregate = o.aggregate;
  if (o.ood_score) row.ood_score = *o.ood_score;
  return row;
}

std::string trim_number(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

}  // namespace

SweepTable ablation_sweep(Workspace& ws, SweepAxis axis) {
  const auto& cfg = ws.config();
  const auto base = sweep_base(cfg);
  SweepTable table;
  table.axis = axis;

  auto over_seeds = [&](const std::string& value, auto&& tweak) {
    std::vector<SweepRow> runs;
    for (auto seed : cfg.ablation.router_seeds) {
      auto s = base;
      s.router.vae.seed = seed;
      tweak(s);
      runs.push_back(sweep_point(ws, s));
    }
    table.rows.push_back(average(value, runs));
  };

  switch (axis) {
    case SweepAxis::temperature:
      for (double T : cfg.ablation.temperatures)
        over_seeds(trim_number(T), [T](StrategyConfig& s) { s.router.pooling.temperature = T; });
      break;
    case SweepAxis::beta:
      for (double b : cfg.ablation.betas) over_seeds(trim_number(b), [b](StrategyConfig& s) { s.router.vae.beta = b; });
      break;
    case SweepAxis::tau_rule:
      for (auto r : cfg.ablation.tau_rules)
        over_seeds(std::string(router::to_string(r)), [r](StrategyConfig& s) { s.router.rule = r; });
      break;
    case SweepAxis::pooling:
      for (auto p : cfg.ablation.poolings)
        over_seeds(std::string(router::to_string(p)), [p](StrategyConfig& s) { s.router.pooling.kind = p; });
      break;
    case SweepAxis::n_blocks:
      for (auto nb : cfg.ablation.n_blocks) {
        auto s = base;
        s.router.vae.seed = cfg.ablation.router_seeds.front();
        s.n_blocks = nb;
        table.rows.push_back(average(std::to_string(nb), {sweep_point(ws, s)}));
      }
      break;
  }
  return table;
}

void write_sweep(const SweepTable& table, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto out = open_out(path);
  out << to_string(table.axis)
      << ",seeds,route-in-distribution,route-ood,coverage,Last-IoU,Avg-IoU,FF-IoU,Last-BIoU,Avg-BIoU,FF-BIoU,"
         "OOD-IoU,OOD-BIoU\n";
  for (const auto& r : table.rows) {
    const auto& a = r.aggregate;
    out << r.value << ',' << r.seeds;
    for (double v : {r.route_in_distribution, r.route_ood, r.coverage, a.last_iou, a.avg_iou, a.ff_iou, a.last_biou,
                     a.avg_biou, a.ff_biou, r.ood_score.iou, r.ood_score.biou})
      out << ',' << pct(v);
    out << '\n';
  }
}

// --- saved pools ------------------------------------------------------------------------

metrics::RoutingAccuracy route_dataset(const synth::Backbone& backbone, const fs::path& pool_dir,
                                       const fs::path& dataset_dir, const fs::path& out_csv) {
  const auto pool = router::load_pool(pool_dir);
  const auto stream = synth::import_stream(dataset_dir);
  std::vector<metrics::RouteRecord> log;
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  auto out = open_out(out_csv);
  out << "task,sample,true,chosen,best-score,tau\n";
  for (const auto& task : stream) {
    const auto features = synth::encode_dataset(backbone, task.test);
    const auto decisions = router::route_many(pool, features.features, features.n);
    for (std::size_t i = 0; i < decisions.size(); ++i) {
      const auto& d = decisions[i];
      const int truth = pool.entries().count(task.spec.task_id) ? task.spec.task_id : metrics::kOodRoute;
      log.push_back({truth, d.chosen});
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [id, s] : d.scores) best = std::min(best, s);
      out << task.spec.task_id << ',' << i << ',' << truth << ',' << d.chosen << ',' << fixed(best, 6) << ','
          << fixed(d.threshold_used, 6) << '\n';
    }
  }
  return metrics::routing_accuracy(log);
}

}  // namespace casam::experiment
