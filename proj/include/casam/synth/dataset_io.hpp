#pragma once

#include <filesystem>

#include "casam/synth/task.hpp"
#include "json.hpp"

namespace casam::synth {

// Directory layout written by export_stream:
//   stream.json              metadata: format, version, master seed, task specs
//   task_<id>_train.bin      samples of one split
//   task_<id>_test.bin
//
// Sample file, little-endian:
//   "CSDS" | u32 version=1 | u32 n | u32 channels | u32 height | u32 width
//   then per sample: i32 task_id | i32 x0 y0 x1 y1 | f32 image[C*H*W] | f32 mask[H*W]

void to_json(nlohmann::ordered_json& j, const TaskSpec& s);
void from_json(const nlohmann::ordered_json& j, TaskSpec& s);

void write_samples(const Dataset& data, const std::filesystem::path& path);
/// Throws tensor::FormatError on bad magic, version, dims or truncation.
[[nodiscard]] Dataset read_samples(const std::filesystem::path& path);

void export_stream(const Stream& stream, std::uint64_t master_seed, const std::filesystem::path& dir);
[[nodiscard]] Stream import_stream(const std::filesystem::path& dir, std::uint64_t* master_seed = nullptr);

}  // namespace casam::synth
