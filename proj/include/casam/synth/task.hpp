#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "casam/tensor/rng.hpp"
#include "casam/tensor/tensor.hpp"

namespace casam::synth {

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kImageChannels = 3;

enum class ShapeFamily { ellipse, rectangle, blob, ring, stripe };

[[nodiscard]] std::string_view to_string(ShapeFamily family);
[[nodiscard]] ShapeFamily shape_family_from_string(std::string_view name);

using Rgb = std::array<float, 3>;

struct Texture {
  Rgb foreground{0.8f, 0.8f, 0.8f};
  Rgb background{0.2f, 0.2f, 0.2f};
  float color_jitter = 0.05f;  // per-sample uniform offset on each channel mean
  float noise = 0.05f;         // per-pixel gaussian stddev
};

struct Geometry {
  float min_size = 12.0f;  // major extent in pixels
  float max_size = 30.0f;
  float min_eccentricity = 0.0f;  // 0 = round, towards 1 = elongated
  float max_eccentricity = 0.6f;
};

struct TaskSpec {
  int task_id = 0;
  std::string name;
  ShapeFamily shape_family = ShapeFamily::ellipse;
  Texture texture;
  Geometry geometry;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when a range is empty or out of bounds.
  void validate() const;
};

struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel corners
  friend bool operator==(const Box&, const Box&) = default;
};

struct Sample {
  std::vector<float> image;  // [3,H,W] in [0,1]
  std::vector<float> mask;   // [1,H,W] in {0,1}
  Box box;
  int task_id = 0;
};

using Dataset = std::vector<Sample>;

struct TaskData {
  TaskSpec spec;
  Dataset train;
  Dataset test;
};

using Stream = std::vector<TaskData>;

[[nodiscard]] Box tight_box(const std::vector<float>& mask);
/// Moves each box edge by up to 10% of the box extent, clamped to the image.
[[nodiscard]] Box jitter_box(const Box& box, tensor::Rng& rng);

/// Draws one sample of the task described by `spec`.
[[nodiscard]] Sample generate_sample(const TaskSpec& spec, tensor::Rng& rng);
/// `n` samples from the broad pretraining mixture: every shape family, random
/// hues, foreground luminance above background.
[[nodiscard]] Dataset generate_broad(std::size_t n, std::uint64_t seed);

/// Built-in shifted tasks. Ids 0..8 are stream tasks with pairwise distinct
/// (family, texture); kOodTask is held out for zero-shot evaluation.
inline constexpr int kOodTask = 100;
[[nodiscard]] TaskSpec catalog_task(int task_id, std::uint64_t master_seed);
[[nodiscard]] std::size_t catalog_size();

/// Offset added to a task id for its oversized variant.
inline constexpr int kOversizedOffset = 200;
/// Same family and texture as `base`, objects enlarged past the training
/// size range (major extent 44-58 px). Id is base id + kOversizedOffset.
[[nodiscard]] TaskSpec oversized_variant(const TaskSpec& base, std::uint64_t master_seed);
/// Out-of-distribution evaluation tasks: the held-out catalog task followed by
/// the oversized variant of every stream task.
[[nodiscard]] std::vector<TaskSpec> ood_suite(std::span<const TaskSpec> stream_tasks, std::uint64_t master_seed);

/// Deterministic stream over catalog tasks 0..n_tasks-1. Every task's data
/// is seeded from (master_seed, task_id), so reordering a stream never
/// changes a task's pixels. Train and test draws come from disjoint
/// substreams.
[[nodiscard]] Stream generate_stream(std::size_t n_tasks, std::size_t per_task_train,
                                     std::size_t per_task_test, std::uint64_t master_seed);
[[nodiscard]] TaskData generate_task(const TaskSpec& spec, std::size_t n_train, std::size_t n_test);

// Batching helpers.
[[nodiscard]] tensor::Tensor stack_images(const Dataset& data, std::span<const std::size_t> idx);
[[nodiscard]] tensor::Tensor stack_masks(const Dataset& data, std::span<const std::size_t> idx);
/// Box prompt rasterized at feature resolution: cell (r,c) of a
/// `cells`x`cells` grid is 1 when it overlaps the box. Shape [B,1,cells,cells].
[[nodiscard]] tensor::Tensor box_channel(std::span<const Box> boxes, std::size_t cells);

}  // namespace casam::synth
