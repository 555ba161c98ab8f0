#include "casam/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace casam::metrics {

Mask binarize(std::span<const float> values) {
  Mask m(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m[i] = values[i] > 0.5f ? 1 : 0;
  return m;
}

Mask binarize_logits(std::span<const float> logits) {
  Mask m(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) m[i] = logits[i] > 0.0f ? 1 : 0;
  return m;
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += (pred[i] && truth[i]) ? 1 : 0;
    uni += (pred[i] || truth[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Mask boundary_band(std::span<const std::uint8_t> mask, std::size_t width, std::size_t height, std::size_t d) {
  if (mask.size() != width * height) throw std::invalid_argument("boundary_band: size mismatch");
  if (d < 1) throw std::invalid_argument("boundary_band: band width must be >= 1");
  // Separable erosion: a pixel survives if every pixel in its window is set.
  auto erode_axis = [&](const Mask& in, bool horizontal) {
    Mask out(in.size(), 0);
    const auto sd = static_cast<long>(d);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        if (!in[y * width + x]) continue;
        bool keep = true;
        for (long o = -sd; o <= sd && keep; ++o) {
          const long xx = horizontal ? static_cast<long>(x) + o : static_cast<long>(x);
          const long yy = horizontal ? static_cast<long>(y) : static_cast<long>(y) + o;
          if (xx < 0 || yy < 0 || xx >= static_cast<long>(width) || yy >= static_cast<long>(height)) {
            keep = false;
          } else {
            keep = in[static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx)] != 0;
          }
        }
        out[y * width + x] = keep ? 1 : 0;
      }
    return out;
  };
  const Mask eroded = erode_axis(erode_axis(Mask(mask.begin(), mask.end()), true), false);
  Mask band(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) band[i] = (mask[i] && !eroded[i]) ? 1 : 0;
  return band;
}

double biou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::size_t width,
            std::size_t height, std::size_t d) {
  if (pred.size() != truth.size()) throw std::invalid_argument("biou: mask sizes differ");
  return iou(boundary_band(pred, width, height, d), boundary_band(truth, width, height, d));
}

std::size_t default_band(std::size_t width, std::size_t height) {
  const double diag = std::hypot(static_cast<double>(width), static_cast<double>(height));
  return static_cast<std::size_t>(std::ceil(0.02 * diag));
}

void StageMetrics::validate() const {
  for (std::size_t t = 0; t < per_stage.size(); ++t) {
    if (per_stage[t].size() != t + 1)
      throw std::invalid_argument("stage " + std::to_string(t) + " must hold exactly " + std::to_string(t + 1) +
                                  " task scores");
    for (std::size_t k = 0; k <= t; ++k) {
      const auto& s = per_stage[t][k];
      if (!(s.iou >= 0.0 && s.iou <= 1.0 && s.biou >= 0.0 && s.biou <= 1.0))
        throw std::invalid_argument("scores must lie in [0,1]");
      if (s.n != per_stage[k][k].n) throw std::invalid_argument("n_k must be constant across stages");
    }
  }
}

namespace {

double weighted_stage(const StageMetrics& sm, std::size_t t, bool use_biou) {
  double num = 0.0, den = 0.0;
  for (const auto& s : sm.per_stage.at(t)) {
    num += static_cast<double>(s.n) * (use_biou ? s.biou : s.iou);
    den += static_cast<double>(s.n);
  }
  return den > 0.0 ? num / den : 0.0;
}

double ff(const StageMetrics& sm, bool use_biou) {
  const std::size_t N = sm.stages();
  if (N < 2) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k + 1 < N; ++k) acc += forgetting(sm, k, N - 1, use_biou);
  return acc / static_cast<double>(N - 1);
}

}  // namespace

double stage_iou(const StageMetrics& sm, std::size_t t) { return weighted_stage(sm, t, false); }
double stage_biou(const StageMetrics& sm, std::size_t t) { return weighted_stage(sm, t, true); }

double forgetting(const StageMetrics& sm, std::size_t k, std::size_t t, bool use_biou) {
  if (k >= t || t >= sm.stages()) throw std::invalid_argument("forgetting needs k < t < stages");
  auto score = [&](std::size_t stage) {
    const auto& s = sm.per_stage[stage][k];
    return use_biou ? s.biou : s.iou;
  };
  double worst = 0.0;
  for (std::size_t j = k; j < t; ++j) worst = std::max(worst, score(j) - score(t));
  return worst;
}

Aggregate stage_aggregate(const StageMetrics& sm) {
  sm.validate();
  Aggregate a;
  const std::size_t N = sm.stages();
  if (N == 0) return a;
  for (std::size_t t = 0; t < N; ++t) {
    a.avg_iou += stage_iou(sm, t);
    a.avg_biou += stage_biou(sm, t);
  }
  a.avg_iou /= static_cast<double>(N);
  a.avg_biou /= static_cast<double>(N);
  a.last_iou = stage_iou(sm, N - 1);
  a.last_biou = stage_biou(sm, N - 1);
  a.ff_iou = ff(sm, false);
  a.ff_biou = ff(sm, true);
  return a;
}

RoutingAccuracy routing_accuracy(std::span<const RouteRecord> log) {
  RoutingAccuracy r;
  std::size_t in_ok = 0, in_total = 0, ood_ok = 0, ood_total = 0;
  for (const auto& rec : log) {
    auto& [ok, total] = r.per_task[rec.true_task];
    const bool correct = rec.chosen == rec.true_task;
    ok += correct ? 1 : 0;
    ++total;
    if (rec.true_task == kOodRoute) {
      ood_ok += correct ? 1 : 0;
      ++ood_total;
    } else {
      in_ok += correct ? 1 : 0;
      ++in_total;
    }
  }
  if (in_total) r.in_distribution = static_cast<double>(in_ok) / static_cast<double>(in_total);
  if (ood_total) r.ood = static_cast<double>(ood_ok) / static_cast<double>(ood_total);
  return r;
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_divergence: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) acc += q[i] * std::log(q[i] / m);
  }
  return 0.5 * acc;
}

HistogramPair feature_histograms(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b,
                                 std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("feature_histograms: bins must be positive");
  if (a.empty() || b.empty()) throw std::invalid_argument("feature_histograms: empty feature set");
  const std::size_t D = a.front().size();
  HistogramPair out{std::vector<double>(bins, 0.0), std::vector<double>(bins, 0.0), bins};
  for (std::size_t d = 0; d < D; ++d) {
    float lo = a.front()[d], hi = lo;
    for (const auto* set : {&a, &b})
      for (const auto& f : *set) {
        if (f.size() != D) throw std::invalid_argument("feature_histograms: dimension mismatch");
        lo = std::min(lo, f[d]);
        hi = std::max(hi, f[d]);
      }
    auto fill = [&](const std::vector<std::vector<float>>& set, std::vector<double>& hist) {
      const double w = 1.0 / (static_cast<double>(set.size()) * static_cast<double>(D));
      for (const auto& f : set) {
        std::size_t bin = 0;
        if (hi > lo) {
          const double pos = (static_cast<double>(f[d]) - lo) / (static_cast<double>(hi) - lo);
          bin = std::min(bins - 1, static_cast<std::size_t>(pos * static_cast<double>(bins)));
        }
        hist[bin] += w;
      }
    };
    fill(a, out.first);
    fill(b, out.second);
  }
  return out;
}

}  // namespace casam::metrics
