#include <deque>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "casam/tensor/ops.hpp"
#include "internal.hpp"

namespace casam::strategies {

using namespace casam::tensor;
using align::AlignmentLayer;
using align::SegExample;
using synth::kFeatureChannels;
using synth::kFeatureNumel;
using synth::kImageSize;

namespace {

StrategyResult start(StreamContext& ctx, const StrategyConfig& cfg) {
  cfg.validate();
  if (ctx.size() == 0) throw std::invalid_argument("empty stream");
  ctx.begin_run();
  StrategyResult r;
  r.method = cfg.label();
  r.kind = cfg.kind;
  r.exemplar_free = exemplar_free(cfg.kind);
  r.backbone_hash_before = ctx.backbone().hash();
  for (std::size_t i = 0; i < ctx.size(); ++i) r.task_order.push_back(ctx.task(i).spec.task_id);
  return r;
}

void finish(StreamContext& ctx, StrategyResult& r) {
  r.observed_exemplar_free = ctx.observed_exemplar_free();
  r.backbone_hash_after = ctx.backbone().hash();
  if (r.backbone_hash_after != r.backbone_hash_before) throw std::logic_error(r.method + " modified the backbone");
  r.stages.validate();
}

template <typename Eval>
void record_stage(StrategyResult& r, std::size_t t, Eval&& eval) {
  std::vector<metrics::TaskScore> row;
  for (std::size_t k = 0; k <= t; ++k) row.push_back(eval(k));
  r.stages.per_stage.push_back(std::move(row));
}

align::TrainOptions options_for(const StrategyConfig& cfg, int task_id) {
  auto o = cfg.train;
  o.seed = task_seed(cfg, task_id);
  return o;
}

AlignmentLayer fresh_layer(const StreamContext& ctx, const StrategyConfig& cfg) {
  return AlignmentLayer::for_backbone(ctx.task(0).spec.task_id, cfg.n_blocks, init_seed(cfg), ctx.backbone());
}

/// Logits of `items` under `layer` with tight boxes, one vector per item.
std::vector<std::vector<float>> item_logits(std::span<const SegExample> items, const synth::Backbone& bb,
                                            const AlignmentLayer& layer) {
  constexpr std::size_t kChunk = 32, px = kImageSize * kImageSize;
  std::vector<std::vector<float>> out;
  std::vector<std::size_t> pos;
  for (std::size_t s = 0; s < items.size(); s += kChunk) {
    pos.resize(std::min(kChunk, items.size() - s));
    std::iota(pos.begin(), pos.end(), s);
    const Tensor logits = align::predict(items, pos, bb, align::apply_layer(layer));
    for (std::size_t i = 0; i < pos.size(); ++i)
      out.emplace_back(logits.data().begin() + i * px, logits.data().begin() + (i + 1) * px);
  }
  return out;
}

/// Naive, LwF, EWC, ER and DER share one layer trained stage after stage.
StrategyResult run_sequential(StreamContext& ctx, const StrategyConfig& cfg) {
  auto r = start(ctx, cfg);
  const auto& bb = ctx.backbone();
  const auto kind = cfg.kind;
  auto layer = std::make_shared<AlignmentLayer>(fresh_layer(ctx, cfg));
  const auto params = layer->parameters();
  std::optional<AlignmentLayer> teacher;
  std::vector<float> fisher, anchor;
  const bool uses_memory = kind == StrategyKind::er || kind == StrategyKind::der;
  MemoryBank memory(uses_memory ? cfg.memory_capacity : 0, cfg.memory_policy, cfg.seed);
  constexpr std::size_t px = kImageSize * kImageSize;

  for (std::size_t t = 0; t < ctx.size(); ++t) {
    ctx.begin_stage(t);
    const int id = ctx.task(t).spec.task_id;
    const auto current = ctx.train_items(t);
    std::vector<SegExample> items(current.begin(), current.end());
    const std::size_t n_current = items.size();
    std::vector<const MemoryEntry*> replay;
    if (uses_memory && memory.size() > 0) {
      for (const auto& e : memory.items(ctx)) {
        items.push_back(e.example);
        replay.push_back(&e);
      }
    }

    align::LossHook hook;
    if (kind == StrategyKind::lwf && teacher && cfg.lambda_distill > 0.0) {
      hook = [&](const align::SegBatch& b, const Tensor& logits, const Tensor& loss) {
        Tensor target;
        {
          NoGradGuard guard;
          target = bb.decode(teacher->forward(b.z), b.boxes);
        }
        return add(loss, scale(mse(logits, target), static_cast<float>(cfg.lambda_distill)));
      };
    } else if (kind == StrategyKind::ewc && t > 0 && cfg.lambda_ewc > 0.0) {
      hook = [&](const align::SegBatch&, const Tensor&, const Tensor& loss) {
        return add(loss, ewc_penalty(params, anchor, fisher, cfg.lambda_ewc));
      };
    } else if (kind == StrategyKind::der && cfg.der_alpha > 0.0 && !replay.empty()) {
      hook = [&](const align::SegBatch& b, const Tensor& logits, const Tensor& loss) {
        const std::size_t B = b.positions.size();
        Tensor target({B, 1, kImageSize, kImageSize}), weight({B, 1, kImageSize, kImageSize});
        std::size_t n_mem = 0;
        for (std::size_t i = 0; i < B; ++i) {
          if (b.positions[i] < n_current) continue;
          const auto& stored = replay[b.positions[i] - n_current]->logits;
          std::copy(stored.begin(), stored.end(), target.mutable_data().begin() + i * px);
          std::fill_n(weight.mutable_data().begin() + i * px, px, 1.0f);
          ++n_mem;
        }
        if (n_mem == 0) return loss;
        const Tensor matched = sum(mul(weight, square(sub(logits, target))));
        return add(loss, scale(matched, static_cast<float>(cfg.der_alpha / static_cast<double>(n_mem * px))));
      };
    }

    (void)align::train_segmentation(items, bb, align::apply_layer(*layer), params, options_for(cfg, id), hook);

    if (kind == StrategyKind::lwf) {
      teacher = *layer;
      set_trainable(teacher->parameters(), false);
    } else if (kind == StrategyKind::ewc) {
      const auto f = empirical_fisher(current, bb, *layer);
      if (fisher.empty()) fisher.assign(f.size(), 0.0f);
      for (std::size_t j = 0; j < f.size(); ++j) fisher[j] += f[j];
      anchor = flatten_values(params);
    } else if (uses_memory) {
      std::vector<MemoryEntry> candidates;
      std::vector<std::vector<float>> logits;
      if (kind == StrategyKind::der) logits = item_logits(current, bb, *layer);
      for (std::size_t i = 0; i < current.size(); ++i)
        candidates.push_back({current[i], id, kind == StrategyKind::der ? std::move(logits[i]) : std::vector<float>{}});
      memory.add_task(candidates);
    }

    record_stage(r, t, [&](std::size_t k) { return align::evaluate(ctx.test_items(k), bb, align::apply_layer(*layer)); });
  }
  r.alignment_layers = 1;
  const synth::Backbone* bbp = &bb;
  r.infer = [layer, bbp](std::span<const SegExample> items) {
    return align::evaluate(items, *bbp, align::apply_layer(*layer));
  };
  finish(ctx, r);
  return r;
}

}  // namespace

StrategyResult run_naive(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::naive) throw std::invalid_argument("run_naive needs kind=naive");
  return run_sequential(ctx, cfg);
}
StrategyResult run_lwf(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::lwf) throw std::invalid_argument("run_lwf needs kind=lwf");
  return run_sequential(ctx, cfg);
}
StrategyResult run_ewc(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::ewc) throw std::invalid_argument("run_ewc needs kind=ewc");
  return run_sequential(ctx, cfg);
}
StrategyResult run_er(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::er) throw std::invalid_argument("run_er needs kind=er");
  return run_sequential(ctx, cfg);
}
StrategyResult run_der(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::der) throw std::invalid_argument("run_der needs kind=der");
  return run_sequential(ctx, cfg);
}

StrategyResult run_joint(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::joint) throw std::invalid_argument("run_joint needs kind=joint");
  auto r = start(ctx, cfg);
  const auto& bb = ctx.backbone();
  std::shared_ptr<AlignmentLayer> layer;
  for (std::size_t t = 0; t < ctx.size(); ++t) {
    ctx.begin_stage(t);
    std::vector<SegExample> items;
    for (std::size_t k = 0; k <= t; ++k) {
      const auto part = ctx.train_items(k);
      items.insert(items.end(), part.begin(), part.end());
    }
    layer = std::make_shared<AlignmentLayer>(fresh_layer(ctx, cfg));
    (void)align::train_alignment(items, bb, *layer, options_for(cfg, ctx.task(t).spec.task_id));
    record_stage(r, t, [&](std::size_t k) { return align::evaluate(ctx.test_items(k), bb, align::apply_layer(*layer)); });
  }
  r.alignment_layers = 1;
  const synth::Backbone* bbp = &bb;
  r.infer = [layer, bbp](std::span<const SegExample> items) {
    return align::evaluate(items, *bbp, align::apply_layer(*layer));
  };
  finish(ctx, r);
  return r;
}

StrategyResult run_l2p(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::l2p) throw std::invalid_argument("run_l2p needs kind=l2p");
  auto r = start(ctx, cfg);
  const auto& bb = ctx.backbone();
  const std::size_t P = cfg.prompt_pool_size;
  const std::size_t slot = cfg.prompt_slots ? std::max<std::size_t>(P / ctx.size(), 1) : P;
  if (cfg.prompt_slots && slot < cfg.top_k) throw std::invalid_argument("prompt slot smaller than top_k");
  if (cfg.prompt_slots && slot * ctx.size() > P) throw std::invalid_argument("prompt pool too small for the stream");

  struct State {
    AlignmentLayer layer;
    PromptPool pool;
    double temperature;
    std::size_t k;
  };
  auto st = std::make_shared<State>(State{fresh_layer(ctx, cfg), PromptPool(P, cfg.seed),
                                          cfg.router.pooling.temperature, cfg.top_k});

  // Queries come from the frozen features; prompts are added to the aligned map.
  auto queries = [st](const Tensor& z) {
    const std::size_t B = z.dim(0);
    std::vector<router::Feature> q;
    for (std::size_t i = 0; i < B; ++i)
      q.push_back(router::attention_pool(z.data().subspan(i * kFeatureNumel, kFeatureNumel), kFeatureChannels,
                                         synth::kFeatureSize, synth::kFeatureSize, st->temperature));
    return q;
  };
  auto prompted = [st](const Tensor& aligned, const std::vector<std::vector<std::size_t>>& sel) {
    const std::size_t B = aligned.dim(0);
    std::vector<std::size_t> used;
    for (const auto& s : sel)
      for (auto j : s)
        if (std::find(used.begin(), used.end(), j) == used.end()) used.push_back(j);
    std::sort(used.begin(), used.end());
    Tensor out = aligned;
    const Tensor zeros(aligned.shape(), 0.0f);
    for (auto j : used) {
      Tensor gate({B, kFeatureChannels}, 0.0f);
      for (std::size_t i = 0; i < B; ++i)
        if (std::find(sel[i].begin(), sel[i].end(), j) != sel[i].end())
          std::fill_n(gate.mutable_data().begin() + i * kFeatureChannels, kFeatureChannels, 1.0f);
      out = add(out, channel_scale(add_broadcast(zeros, st->pool.prompts[j].value()), gate));
    }
    return out;
  };

  for (std::size_t t = 0; t < ctx.size(); ++t) {
    ctx.begin_stage(t);
    const int id = ctx.task(t).spec.task_id;
    const std::size_t lo = cfg.prompt_slots ? t * slot : 0, hi = cfg.prompt_slots ? lo + slot : P;
    ParameterRefs params;
    if (t == 0)
      for (auto* p : st->layer.parameters()) params.push_back(p);
    for (std::size_t j = lo; j < hi; ++j) {
      params.push_back(&st->pool.keys[j]);
      params.push_back(&st->pool.prompts[j]);
    }
    std::vector<router::Feature> q;
    std::vector<std::vector<std::size_t>> sel;
    align::AlignFn fn = [&](const align::SegBatch& b) {
      q = queries(b.z);
      sel.clear();
      for (const auto& qi : q) sel.push_back(st->pool.select(qi, st->k, lo, hi));
      return prompted(st->layer.forward(b.z), sel);
    };
    align::LossHook hook = [&](const align::SegBatch&, const Tensor&, const Tensor& loss) {
      Tensor match;
      std::size_t terms = 0;
      for (std::size_t i = 0; i < sel.size(); ++i)
        for (auto j : sel[i]) {
          const Tensor d = cosine_distance(st->pool.keys[j].value(), q[i]);
          match = match.defined() ? add(match, d) : d;
          ++terms;
        }
      return add(loss, scale(match, 1.0f / static_cast<float>(terms)));
    };
    (void)align::train_segmentation(ctx.train_items(t), bb, fn, params, options_for(cfg, id), hook);
    if (t == 0) set_trainable(st->layer.parameters(), false);

    record_stage(r, t, [&](std::size_t k) {
      align::AlignFn infer_fn = [&](const align::SegBatch& b) {
        std::vector<std::vector<std::size_t>> s;
        for (const auto& qi : queries(b.z)) s.push_back(st->pool.select(qi, st->k, 0, P));
        return prompted(st->layer.forward(b.z), s);
      };
      return align::evaluate(ctx.test_items(k), bb, infer_fn);
    });
  }
  r.alignment_layers = 1;
  const synth::Backbone* bbp = &bb;
  r.infer = [st, bbp, queries, prompted](std::span<const SegExample> items) {
    align::AlignFn fn = [&](const align::SegBatch& b) {
      std::vector<std::vector<std::size_t>> s;
      for (const auto& qi : queries(b.z)) s.push_back(st->pool.select(qi, st->k, 0, st->pool.keys.size()));
      return prompted(st->layer.forward(b.z), s);
    };
    return align::evaluate(items, *bbp, fn);
  };
  finish(ctx, r);
  return r;
}

StrategyResult run_moda(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::moda) throw std::invalid_argument("run_moda needs kind=moda");
  auto r = start(ctx, cfg);
  const auto& bb = ctx.backbone();
  struct State {
    router::Pooler pooler;
    std::deque<AlignmentLayer> layers;
    std::vector<int> ids;
    std::shared_ptr<TaskClassifier> classifier;
  };
  auto st = std::make_shared<State>(State{router::Pooler(cfg.router.pooling), {}, {}, nullptr});
  MemoryBank memory(cfg.memory_capacity, MemoryPolicy::per_task_quota, cfg.seed);

  // Hard routing: always one of the known tasks, never the identity layer.
  auto choose = [st](std::span<const SegExample> items) {
    std::vector<std::size_t> out;
    for (const auto& ex : items) out.push_back(st->classifier->predict(st->pooler({ex.feature, kFeatureNumel})));
    return out;
  };

  for (std::size_t t = 0; t < ctx.size(); ++t) {
    ctx.begin_stage(t);
    const int id = ctx.task(t).spec.task_id;
    st->layers.push_back(ctx.isolated_layer(t, cfg));
    st->ids.push_back(id);
    std::vector<MemoryEntry> candidates;
    for (const auto& ex : ctx.train_items(t)) candidates.push_back({ex, id, {}});
    memory.add_task(candidates);
    std::vector<router::Feature> rows;
    std::vector<std::size_t> labels;
    for (const auto& e : memory.items(ctx)) {
      rows.push_back(st->pooler({e.example.feature, kFeatureNumel}));
      labels.push_back(ctx.position_of(e.task_id));
    }
    st->classifier = std::make_shared<TaskClassifier>(st->pooler.row_dim(), t + 1, derive_seed(cfg.seed, t));
    st->classifier->fit(rows, labels, cfg.classifier_epochs, cfg.classifier_lr);

    const bool last = t + 1 == ctx.size();
    record_stage(r, t, [&](std::size_t k) {
      const auto items = ctx.test_items(k);
      std::vector<const AlignmentLayer*> layers;
      for (auto c : choose(items)) {
        layers.push_back(&st->layers[c]);
        if (last) r.stages.routing_log.push_back({st->ids[k], st->ids[c]});
      }
      return evaluate_assigned(items, bb, layers);
    });
  }
  r.alignment_layers = st->layers.size();
  const synth::Backbone* bbp = &bb;
  r.infer = [st, bbp, choose](std::span<const SegExample> items) {
    std::vector<const AlignmentLayer*> layers;
    for (auto c : choose(items)) layers.push_back(&st->layers[c]);
    return evaluate_assigned(items, *bbp, layers);
  };
  r.route = [st, choose](std::span<const SegExample> items) {
    std::vector<int> out;
    for (auto c : choose(items)) out.push_back(st->ids[c]);
    return out;
  };
  finish(ctx, r);
  return r;
}

StrategyResult run_emr(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::emr) throw std::invalid_argument("run_emr needs kind=emr");
  auto r = start(ctx, cfg);
  const auto& bb = ctx.backbone();
  AlignmentLayer base = fresh_layer(ctx, cfg);
  const auto init = flatten_values(base.parameters());
  std::vector<TaskVector> vectors;
  for (std::size_t t = 0; t < ctx.size(); ++t) {
    ctx.begin_stage(t);
    AlignmentLayer tuned = ctx.isolated_layer(t, cfg);
    vectors.push_back(TaskVector::between(flatten_values(tuned.parameters()), init));
    const auto unified = elect(vectors);
    record_stage(r, t, [&](std::size_t k) {
      AlignmentLayer merged = base;
      assign_flat_values(merged.parameters(), emr_merge(init, unified, vectors[k]));
      return align::evaluate(ctx.test_items(k), bb, align::apply_layer(merged));
    });
  }
  r.alignment_layers = 1;
  finish(ctx, r);
  return r;
}

StrategyResult run_casam(StreamContext& ctx, const StrategyConfig& cfg) {
  if (cfg.kind != StrategyKind::casam) throw std::invalid_argument("run_casam needs kind=casam");
  auto r = start(ctx, cfg);
  const auto& bb = ctx.backbone();
  auto pool = std::make_shared<router::RouterPool>(cfg.router);

  auto routed_layers = [pool](std::span<const SegExample> items, std::vector<int>* chosen) {
    std::vector<float> maps;
    maps.reserve(items.size() * kFeatureNumel);
    for (const auto& ex : items) maps.insert(maps.end(), ex.feature, ex.feature + kFeatureNumel);
    std::vector<const AlignmentLayer*> layers;
    for (const auto& d : router::route_many(*pool, maps, items.size())) {
      layers.push_back(&pool->layer_for(d.chosen));
      if (chosen) chosen->push_back(d.chosen);
    }
    return layers;
  };

  for (std::size_t t = 0; t < ctx.size(); ++t) {
    ctx.begin_stage(t);
    const int id = ctx.task(t).spec.task_id;
    const AlignmentLayer& layer = ctx.isolated_layer(t, cfg);
    pool->add(id, router::build_entry(*pool, layer, ctx.task(t).train_features, id));

    const bool last = t + 1 == ctx.size();
    record_stage(r, t, [&](std::size_t k) {
      const auto items = ctx.test_items(k);
      if (cfg.oracle_routing) return align::evaluate(items, bb, align::apply_layer(pool->at(ctx.task(k).spec.task_id).layer));
      std::vector<int> chosen;
      const auto layers = routed_layers(items, &chosen);
      if (last)
        for (int c : chosen) r.stages.routing_log.push_back({ctx.task(k).spec.task_id, c});
      return evaluate_assigned(items, bb, layers);
    });
  }
  r.alignment_layers = pool->entries().size();
  r.pool = *pool;
  const synth::Backbone* bbp = &bb;
  if (!cfg.oracle_routing) {
    r.infer = [routed_layers, bbp](std::span<const SegExample> items) {
      return evaluate_assigned(items, *bbp, routed_layers(items, nullptr));
    };
  }
  r.route = [routed_layers](std::span<const SegExample> items) {
    std::vector<int> chosen;
    (void)routed_layers(items, &chosen);
    return chosen;
  };
  finish(ctx, r);
  return r;
}

StrategyResult run_strategy(StreamContext& ctx, const StrategyConfig& cfg) {
  switch (cfg.kind) {
    case StrategyKind::naive: return run_naive(ctx, cfg);
    case StrategyKind::lwf: return run_lwf(ctx, cfg);
    case StrategyKind::ewc: return run_ewc(ctx, cfg);
    case StrategyKind::er: return run_er(ctx, cfg);
    case StrategyKind::der: return run_der(ctx, cfg);
    case StrategyKind::l2p: return run_l2p(ctx, cfg);
    case StrategyKind::moda: return run_moda(ctx, cfg);
    case StrategyKind::emr: return run_emr(ctx, cfg);
    case StrategyKind::joint: return run_joint(ctx, cfg);
    case StrategyKind::casam: return run_casam(ctx, cfg);
  }
  throw std::logic_error("unreachable strategy kind");
}

}  // namespace casam::strategies
