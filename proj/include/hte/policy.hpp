#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hte/aggregate.hpp"
#include "hte/frame.hpp"

namespace hte {

// Rewards for assignment search: sign * score, so maximizing total reward
// implements the requested direction on the underlying outcome scores.
struct RewardSpec {
  std::string outcome;
  bool minimize = true;  // e.g. minimize non-emergent ED use
  std::vector<double> rewards;

  static RewardSpec from_scores(const std::string& outcome, bool minimize,
                                std::span<const double> gamma);
};

struct AllocationResult {
  std::vector<std::int32_t> treated;  // row indices, ascending
  std::size_t capacity = 0;
  double objective = 0.0;
};

// Selects exactly k units maximizing total reward (the cardinality-constrained
// integer program); ties at the margin resolve to the lowest row index.
AllocationResult allocate_capacity(std::span<const double> rewards, std::size_t k);

struct PolicyNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  bool treat = false;           // leaf action
  std::int64_t n_rows = 0;      // leaf training count
  double share = 0.0;
};

struct PolicyTree {
  std::vector<PolicyNode> nodes;  // node 0 is the root
  std::size_t depth = 0;          // realized depth
  double objective = 0.0;         // canonical sum of rewards over treated rows
  bool constant_fallback = false; // no split beat the best constant policy
  std::vector<std::string> feature_names;

  bool assign(const FeatureAt& features) const;
  std::vector<std::uint8_t> assign_rows(const ObservationFrame& frame) const;
};

// Exact exhaustive search over depth <= 2 axis-aligned trees with thresholds
// at midpoints of sorted unique feature values (plus +-infinity). Deterministic
// tie order: lowest feature index, smallest threshold, no-treat on zero-reward
// leaves.
PolicyTree learn_policy_tree(const ObservationFrame& frame,
                             std::span<const double> rewards,
                             std::span<const std::int32_t> allowed_features,
                             std::size_t depth = 2);

// Canonical objective evaluation in ascending row order; shared with the
// brute-force oracle so optimality comparisons are bit-exact.
double evaluate_policy(const ObservationFrame& frame, std::span<const double> rewards,
                       const PolicyTree& tree);

struct AllocationComparison {
  ProfileTable table;
  std::size_t overlap = 0;
};

AllocationComparison profile_allocation(const ObservationFrame& frame,
                                        std::span<const std::int32_t> selected,
                                        std::span<const std::int32_t> reference);

std::string policy_tree_to_json(const PolicyTree& tree);
std::string render_policy_tree(const PolicyTree& tree);

}  // namespace hte
