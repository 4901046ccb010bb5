#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hte/frame.hpp"
#include "hte/kernels.hpp"

namespace hte {

struct TreeParams {
  std::size_t n_trees = 2000;
  double subsample_fraction = 0.5;
  double honesty_fraction = 0.5;
  std::size_t mtry = 0;          // 0 -> min(ceil(sqrt(p)) + 20, p)
  std::size_t min_node_size = 5; // applies to the estimation sample of a leaf
  std::uint64_t seed = 42;
  bool cluster_sampling = true;
  // Bootstrap-of-little-bags group size. Trees in a bag draw their subsamples
  // from one shared half-sample; n_trees is rounded up to a multiple. A value
  // of 1 disables the bag structure (and with it variance estimation).
  std::size_t bag_size = 4;

  // Resolves defaults against the feature count and checks bounds.
  TreeParams resolved(std::size_t p) const;
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // value <= threshold goes left
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::int32_t leaf_index = -1;
  std::int16_t depth = 0;
};

struct HonestTree {
  std::vector<TreeNode> nodes;
  std::vector<std::vector<std::int32_t>> leaf_rows;  // estimation rows per leaf
  std::vector<kernels::IvMoments> leaf_moments;      // over estimation rows
  std::vector<std::int32_t> split_rows;              // sorted
  std::vector<std::int32_t> estimation_rows;         // sorted
  std::int32_t bag = 0;
  bool degenerate = false;  // no usable estimation sample

  std::int32_t find_leaf(const std::function<double(std::size_t)>& feature_at) const;
};

// Tallies of split feature usage per depth (depth 1 = root split).
struct SplitTallies {
  std::vector<std::vector<std::int64_t>> counts_by_depth;  // [depth-1][feature]
  void record(std::size_t depth, std::size_t feature, std::size_t p);
  void merge(const SplitTallies& other);
};

struct ForestModel {
  TreeParams params;  // resolved values actually used
  std::vector<HonestTree> trees;
  // Sampling units of each bag's half-sample (cluster ids, or row ids when
  // cluster_sampling is off), sorted.
  std::vector<std::vector<std::int32_t>> bag_half_units;
  std::vector<std::string> covariate_names;
  std::uint64_t frame_fingerprint = 0;
  SplitTallies tallies;
  std::size_t n_rows = 0;
  std::size_t n_units = 0;
  bool instrumental = false;
  bool constant_model = false;  // constant-target degenerate fit
  double constant_value = 0.0;

  std::size_t n_features() const { return covariate_names.size(); }
};

// Inputs to the tree grower. For regression forests only y is used; the
// instrumental forest passes (locally centered) outcome, treatment and
// instrument and relabels per node.
struct GrowData {
  const ObservationFrame* frame = nullptr;
  std::span<const double> y;
  std::span<const double> d;
  std::span<const double> z;
  bool instrumental = false;
};

ForestModel grow_forest(const GrowData& data, const TreeParams& params);

ForestModel grow_regression_forest(const ObservationFrame& frame,
                                   std::span<const double> target,
                                   const TreeParams& params);

// Forest prediction plumbing shared by the regression and IV paths. Features
// of a test point are produced by a callback so frame rows and raw vectors use
// the same traversal.
using FeatureAt = std::function<double(std::size_t)>;

FeatureAt frame_row_features(const ObservationFrame& frame, std::size_t row);
FeatureAt point_features(std::span<const double> x);

// Mean-forest prediction: average of per-tree estimation-leaf means.
double predict_regression(const ForestModel& model, const FeatureAt& features);
std::vector<double> predict_regression_rows(const ForestModel& model,
                                            const ObservationFrame& frame);

// Out-of-bag prediction for every training row. Rows that are in-bag for all
// bags fall back to the full-forest prediction; n_fallback counts them.
struct OobPredictions {
  std::vector<double> values;
  std::size_t n_fallback = 0;
};
OobPredictions oob_regression_predictions(const ForestModel& model,
                                          const ObservationFrame& frame);

// Similarity weights over training rows for one test point. Each contributing
// tree spreads 1/(B * leaf size) over its estimation leaf.
std::vector<double> forest_weights(const ForestModel& model,
                                   const ObservationFrame& frame,
                                   std::span<const double> test_point);

// Depth-weighted share of splits per feature; weights d^-2 over depths
// 1..max_depth, normalized to sum to one.
std::vector<double> variable_importance(const ForestModel& model,
                                        std::size_t max_depth = 4);

std::string forest_to_json(const ForestModel& model);
ForestModel forest_from_json(const std::string& text);
void save_forest(const ForestModel& model, const std::string& path);
ForestModel load_forest(const std::string& path);

// Removes subtrees whose leaves hold no estimation rows; exposed for tests
// (the grower's estimation-count constraint keeps leaves populated already).
std::size_t prune_empty_leaves(HonestTree& tree);

// Sampling-unit id of a row under the model's sampling mode.
inline std::int32_t sampling_unit(const ForestModel& model,
                                  const ObservationFrame& frame, std::size_t row) {
  return model.params.cluster_sampling ? frame.cluster_ids()[row]
                                       : static_cast<std::int32_t>(row);
}

// Hot-path traversal for frame rows (avoids the std::function indirection).
inline std::int32_t find_leaf_row(const HonestTree& tree, const ObservationFrame& frame,
                                  std::size_t row) {
  std::int32_t node = 0;
  while (tree.nodes[static_cast<std::size_t>(node)].feature >= 0) {
    const TreeNode& n = tree.nodes[static_cast<std::size_t>(node)];
    double v = frame.covariate(static_cast<std::size_t>(n.feature))[row];
    node = v <= n.threshold ? n.left : n.right;
  }
  return tree.nodes[static_cast<std::size_t>(node)].leaf_index;
}

}  // namespace hte
