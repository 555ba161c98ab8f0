#include "casam/synth/task.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace casam::synth {

using tensor::Rng;
using tensor::Tensor;

namespace {

constexpr std::size_t kPixels = kImageSize * kImageSize;

float luminance(const Rgb& c) { return 0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2]; }

// Rasterizes one shape into `mask`; returns false when it came out empty.
bool draw_shape(ShapeFamily family, const Geometry& g, Rng& rng, std::vector<float>& mask) {
  const double size = rng.uniform(g.min_size, g.max_size);
  const double ecc = rng.uniform(g.min_eccentricity, g.max_eccentricity);
  const double major = size / 2.0;
  const double minor = major * std::sqrt(std::max(0.05, 1.0 - ecc * ecc));
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double margin = major + 2.0;
  const double lo = std::min(margin, kImageSize / 2.0), hi = std::max(kImageSize - margin, kImageSize / 2.0);
  const double cx = rng.uniform(lo, hi), cy = rng.uniform(lo, hi);
  const double ct = std::cos(theta), st = std::sin(theta);

  // Blob: radial profile with a few random harmonics.
  std::array<double, 3> amp{}, phase{};
  for (std::size_t k = 0; k < amp.size(); ++k) {
    amp[k] = rng.uniform(0.05, 0.2);
    phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const double ring_inner = rng.uniform(0.45, 0.65);

  bool any = false;
  for (std::size_t y = 0; y < kImageSize; ++y) {
    for (std::size_t x = 0; x < kImageSize; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
      bool inside = false;
      switch (family) {
        case ShapeFamily::ellipse:
          inside = (u * u) / (major * major) + (v * v) / (minor * minor) <= 1.0;
          break;
        case ShapeFamily::rectangle:
          inside = std::abs(dx) <= major && std::abs(dy) <= minor;
          break;
        case ShapeFamily::blob: {
          const double r = std::hypot(dx, dy), phi = std::atan2(dy, dx);
          double radius = 1.0;
          for (std::size_t k = 0; k < amp.size(); ++k) radius += amp[k] * std::cos((k + 2) * phi + phase[k]);
          inside = r <= major * 0.8 * radius;
          break;
        }
        case ShapeFamily::ring: {
          const double r = std::hypot(dx, dy);
          inside = r <= major && r >= major * ring_inner;
          break;
        }
        case ShapeFamily::stripe:
          inside = std::abs(u) <= major && std::abs(v) <= std::max(2.0, minor * 0.35);
          break;
      }
      mask[y * kImageSize + x] = inside ? 1.0f : 0.0f;
      any = any || inside;
    }
  }
  return any;
}

void paint(const std::vector<float>& mask, const Texture& t, Rng& rng, std::vector<float>& image) {
  Rgb fg = t.foreground, bg = t.background;
  for (std::size_t c = 0; c < 3; ++c) {
    fg[c] += static_cast<float>(rng.uniform(-t.color_jitter, t.color_jitter));
    bg[c] += static_cast<float>(rng.uniform(-t.color_jitter, t.color_jitter));
  }
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < kPixels; ++p) {
      const float base = mask[p] > 0.5f ? fg[c] : bg[c];
      const double v = base + t.noise * rng.normal();
      image[c * kPixels + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

Sample draw(ShapeFamily family, const Geometry& g, const Texture& t, int task_id, Rng& rng) {
  Sample s;
  s.task_id = task_id;
  s.mask.assign(kPixels, 0.0f);
  s.image.assign(kImageChannels * kPixels, 0.0f);
  while (!draw_shape(family, g, rng, s.mask)) {
  }
  paint(s.mask, t, rng, s.image);
  s.box = tight_box(s.mask);
  return s;
}

Rgb random_hue(Rng& rng, float lo, float hi) {
  return {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
          static_cast<float>(rng.uniform(lo, hi))};
}

}  // namespace

std::string_view to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::ellipse: return "ellipse";
    case ShapeFamily::rectangle: return "rectangle";
    case ShapeFamily::blob: return "blob";
    case ShapeFamily::ring: return "ring";
    case ShapeFamily::stripe: return "stripe";
  }
  return "?";
}

ShapeFamily shape_family_from_string(std::string_view name) {
  for (auto f : {ShapeFamily::ellipse, ShapeFamily::rectangle, ShapeFamily::blob, ShapeFamily::ring,
                 ShapeFamily::stripe}) {
    if (to_string(f) == name) return f;
  }
  throw std::invalid_argument("unknown shape family '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (!(geometry.min_size > 0.0f && geometry.min_size <= geometry.max_size && geometry.max_size < kImageSize))
    throw std::invalid_argument("task " + std::to_string(task_id) + ": bad size range");
  if (!(geometry.min_eccentricity >= 0.0f && geometry.min_eccentricity <= geometry.max_eccentricity &&
        geometry.max_eccentricity < 1.0f))
    throw std::invalid_argument("task " + std::to_string(task_id) + ": bad eccentricity range");
  if (texture.noise < 0.0f || texture.color_jitter < 0.0f)
    throw std::invalid_argument("task " + std::to_string(task_id) + ": negative noise or jitter");
}

Box tight_box(const std::vector<float>& mask) {
  Box b{static_cast<int>(kImageSize), static_cast<int>(kImageSize), -1, -1};
  for (std::size_t y = 0; y < kImageSize; ++y)
    for (std::size_t x = 0; x < kImageSize; ++x)
      if (mask[y * kImageSize + x] > 0.5f) {
        b.x0 = std::min(b.x0, static_cast<int>(x));
        b.y0 = std::min(b.y0, static_cast<int>(y));
        b.x1 = std::max(b.x1, static_cast<int>(x));
        b.y1 = std::max(b.y1, static_cast<int>(y));
      }
  if (b.x1 < 0) throw std::invalid_argument("tight_box of an empty mask");
  return b;
}

Box jitter_box(const Box& box, Rng& rng) {
  const double w = box.x1 - box.x0 + 1, h = box.y1 - box.y0 + 1;
  auto shift = [&](int v, double extent) {
    const double d = rng.uniform(-0.1, 0.1) * extent;
    return std::clamp(static_cast<int>(std::lround(v + d)), 0, static_cast<int>(kImageSize) - 1);
  };
  Box out{shift(box.x0, w), shift(box.y0, h), shift(box.x1, w), shift(box.y1, h)};
  if (out.x0 > out.x1) std::swap(out.x0, out.x1);
  if (out.y0 > out.y1) std::swap(out.y0, out.y1);
  return out;
}

Sample generate_sample(const TaskSpec& spec, Rng& rng) {
  return draw(spec.shape_family, spec.geometry, spec.texture, spec.task_id, rng);
}

Dataset generate_broad(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset out;
  out.reserve(n);
  const ShapeFamily families[] = {ShapeFamily::ellipse, ShapeFamily::rectangle, ShapeFamily::blob,
                                  ShapeFamily::ring, ShapeFamily::stripe};
  for (std::size_t i = 0; i < n; ++i) {
    Texture t;
    // Foreground is the brighter region, by a luminance gap of at least 0.25.
    do {
      t.foreground = random_hue(rng, 0.35f, 1.0f);
      t.background = random_hue(rng, 0.0f, 0.6f);
    } while (luminance(t.foreground) - luminance(t.background) < 0.25f);
    t.color_jitter = 0.0f;
    t.noise = static_cast<float>(rng.uniform(0.01, 0.08));
    Geometry g;
    g.min_size = 10.0f;
    g.max_size = 40.0f;
    g.max_eccentricity = 0.8f;
    out.push_back(draw(families[rng.below(5)], g, t, -1, rng));
  }
  return out;
}

TaskSpec oversized_variant(const TaskSpec& base, std::uint64_t master_seed) {
  TaskSpec s = base;
  s.task_id = base.task_id + kOversizedOffset;
  s.name = base.name + "-oversized";
  s.seed = tensor::derive_seed(master_seed, static_cast<std::uint64_t>(s.task_id) + 1);
  s.geometry.min_size = 44.0f;
  s.geometry.max_size = 58.0f;
  s.validate();
  return s;
}

std::vector<TaskSpec> ood_suite(std::span<const TaskSpec> stream_tasks, std::uint64_t master_seed) {
  std::vector<TaskSpec> out{catalog_task(kOodTask, master_seed)};
  for (const auto& t : stream_tasks) out.push_back(oversized_variant(t, master_seed));
  return out;
}

std::size_t catalog_size() { return 9; }

TaskSpec catalog_task(int task_id, std::uint64_t master_seed) {
  TaskSpec s;
  s.task_id = task_id;
  s.seed = tensor::derive_seed(master_seed, static_cast<std::uint64_t>(task_id) + 1);
  auto& t = s.texture;
  auto& g = s.geometry;
  switch (task_id) {
    case 0:  // inverted contrast: dark object on a bright field
      s.name = "inverted";
      s.shape_family = ShapeFamily::ellipse;
      t.foreground = {0.15f, 0.15f, 0.2f};
      t.background = {0.8f, 0.75f, 0.7f};
      t.noise = 0.04f;
      break;
    case 1:  // moderate contrast under heavy noise
      s.name = "noisy-gray";
      s.shape_family = ShapeFamily::rectangle;
      t.foreground = {0.6f, 0.6f, 0.6f};
      t.background = {0.45f, 0.45f, 0.45f};
      t.noise = 0.10f;
      break;
    case 2:  // bright in blue only, darker in luminance than the background
      s.name = "blue-on-yellow";
      s.shape_family = ShapeFamily::blob;
      t.foreground = {0.1f, 0.1f, 0.9f};
      t.background = {0.7f, 0.7f, 0.1f};
      t.noise = 0.04f;
      break;
    case 3:
      s.name = "dark-ring";
      s.shape_family = ShapeFamily::ring;
      t.foreground = {0.1f, 0.3f, 0.1f};
      t.background = {0.6f, 0.8f, 0.6f};
      t.noise = 0.05f;
      break;
    case 4:
      s.name = "faint-stripe";
      s.shape_family = ShapeFamily::stripe;
      t.foreground = {0.45f, 0.45f, 0.6f};
      t.background = {0.35f, 0.35f, 0.45f};
      t.noise = 0.08f;
      g.max_eccentricity = 0.9f;
      break;
    case 5:
      s.name = "inverted-blob";
      s.shape_family = ShapeFamily::blob;
      t.foreground = {0.2f, 0.1f, 0.05f};
      t.background = {0.9f, 0.7f, 0.5f};
      t.noise = 0.06f;
      break;
    case 6:
      s.name = "chromatic-rect";
      s.shape_family = ShapeFamily::rectangle;
      t.foreground = {0.2f, 0.55f, 0.7f};
      t.background = {0.6f, 0.45f, 0.2f};
      t.noise = 0.04f;
      break;
    case 7:
      s.name = "noisy-ellipse";
      s.shape_family = ShapeFamily::ellipse;
      t.foreground = {0.7f, 0.7f, 0.7f};
      t.background = {0.45f, 0.45f, 0.45f};
      t.noise = 0.18f;
      break;
    case 8:
      s.name = "inverted-stripe";
      s.shape_family = ShapeFamily::stripe;
      t.foreground = {0.3f, 0.05f, 0.3f};
      t.background = {0.85f, 0.85f, 0.6f};
      t.noise = 0.04f;
      g.max_eccentricity = 0.9f;
      break;
    case kOodTask:  // pretraining-like contrast with a cold tint and a new family mix
      s.name = "ood";
      s.shape_family = ShapeFamily::ring;
      t.foreground = {0.55f, 0.75f, 0.95f};
      t.background = {0.05f, 0.1f, 0.3f};
      t.noise = 0.03f;
      break;
    default:
      throw std::invalid_argument("no catalog task with id " + std::to_string(task_id));
  }
  s.validate();
  return s;
}

TaskData generate_task(const TaskSpec& spec, std::size_t n_train, std::size_t n_test) {
  spec.validate();
  TaskData td{spec, {}, {}};
  Rng train_rng(tensor::derive_seed(spec.seed, "train"));
  Rng test_rng(tensor::derive_seed(spec.seed, "test"));
  td.train.reserve(n_train);
  td.test.reserve(n_test);
  for (std::size_t i = 0; i < n_train; ++i) td.train.push_back(generate_sample(spec, train_rng));
  for (std::size_t i = 0; i < n_test; ++i) td.test.push_back(generate_sample(spec, test_rng));
  return td;
}

Stream generate_stream(std::size_t n_tasks, std::size_t per_task_train, std::size_t per_task_test,
                       std::uint64_t master_seed) {
  if (n_tasks < 1 || n_tasks > catalog_size())
    throw std::invalid_argument("n_tasks must be in [1, " + std::to_string(catalog_size()) + "]");
  Stream stream;
  for (std::size_t t = 0; t < n_tasks; ++t)
    stream.push_back(generate_task(catalog_task(static_cast<int>(t), master_seed), per_task_train, per_task_test));
  return stream;
}

Tensor stack_images(const Dataset& data, std::span<const std::size_t> idx) {
  Tensor out({idx.size(), kImageChannels, kImageSize, kImageSize});
  auto dst = out.mutable_data();
  const std::size_t n = kImageChannels * kPixels;
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(data[idx[i]].image.begin(), data[idx[i]].image.end(), dst.begin() + i * n);
  return out;
}

Tensor stack_masks(const Dataset& data, std::span<const std::size_t> idx) {
  Tensor out({idx.size(), 1, kImageSize, kImageSize});
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(data[idx[i]].mask.begin(), data[idx[i]].mask.end(), dst.begin() + i * kPixels);
  return out;
}

Tensor box_channel(std::span<const Box> boxes, std::size_t cells) {
  Tensor out({boxes.size(), 1, cells, cells});
  auto dst = out.mutable_data();
  const std::size_t cell = kImageSize / cells;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    for (std::size_t r = 0; r < cells; ++r)
      for (std::size_t c = 0; c < cells; ++c) {
        const int x0 = static_cast<int>(c * cell), x1 = static_cast<int>((c + 1) * cell) - 1;
        const int y0 = static_cast<int>(r * cell), y1 = static_cast<int>((r + 1) * cell) - 1;
        const bool overlap = x0 <= b.x1 && b.x0 <= x1 && y0 <= b.y1 && b.y0 <= y1;
        dst[(i * cells + r) * cells + c] = overlap ? 1.0f : 0.0f;
      }
  }
  return out;
}

}  // namespace casam::synth
