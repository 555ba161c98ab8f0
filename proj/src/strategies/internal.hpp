#pragma once

#include "casam/strategies/strategies.hpp"

namespace casam::strategies {

/// Seed of the common alignment-layer init A_init.
[[nodiscard]] std::uint64_t init_seed(const StrategyConfig& cfg);
/// Per-task training seed; depends only on the task id, never on its position.
[[nodiscard]] std::uint64_t task_seed(const StrategyConfig& cfg, int task_id);

}  // namespace casam::strategies
