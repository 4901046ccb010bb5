#include "hte/forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>

#include "hte/parallel.hpp"
#include "hte/rng.hpp"
#include "json.hpp"

namespace hte {

namespace {

constexpr double kVarTol = 1e-12;
constexpr double kWeakCovTol = 1e-10;
constexpr std::size_t kTallyMaxDepth = 16;

std::size_t rule_of_thumb_mtry(std::size_t p) {
  std::size_t m = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p)))) + 20;
  return std::min(m, p);
}

}  // namespace

TreeParams TreeParams::resolved(std::size_t p) const {
  TreeParams r = *this;
  if (r.n_trees == 0) throw DataError("n_trees must be positive");
  if (!(r.subsample_fraction > 0.0 && r.subsample_fraction <= 1.0))
    throw DataError("subsample_fraction must lie in (0, 1]");
  if (!(r.honesty_fraction > 0.0 && r.honesty_fraction < 1.0))
    throw DataError("honesty_fraction must lie in (0, 1)");
  if (r.min_node_size == 0) throw DataError("min_node_size must be positive");
  if (r.bag_size == 0) r.bag_size = 1;
  if (r.bag_size > 64) throw DataError("bag_size above 64 is not supported");
  if (r.mtry == 0) r.mtry = rule_of_thumb_mtry(p);
  if (r.mtry > p) throw DataError("mtry exceeds feature count");
  if (r.bag_size > 1) {
    std::size_t rem = r.n_trees % r.bag_size;
    if (rem != 0) r.n_trees += r.bag_size - rem;
  }
  return r;
}

void SplitTallies::record(std::size_t depth, std::size_t feature, std::size_t p) {
  if (depth == 0 || depth > kTallyMaxDepth) return;
  if (counts_by_depth.size() < depth) {
    counts_by_depth.resize(depth);
  }
  auto& row = counts_by_depth[depth - 1];
  if (row.size() < p) row.resize(p, 0);
  ++row[feature];
}

void SplitTallies::merge(const SplitTallies& other) {
  if (counts_by_depth.size() < other.counts_by_depth.size()) {
    counts_by_depth.resize(other.counts_by_depth.size());
  }
  for (std::size_t d = 0; d < other.counts_by_depth.size(); ++d) {
    auto& dst = counts_by_depth[d];
    const auto& src = other.counts_by_depth[d];
    if (dst.size() < src.size()) dst.resize(src.size(), 0);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
}

std::int32_t HonestTree::find_leaf(const FeatureAt& feature_at) const {
  std::int32_t node = 0;
  while (nodes[node].feature >= 0) {
    const TreeNode& n = nodes[node];
    node = feature_at(static_cast<std::size_t>(n.feature)) <= n.threshold ? n.left : n.right;
  }
  return nodes[node].leaf_index;
}

FeatureAt frame_row_features(const ObservationFrame& frame, std::size_t row) {
  return [&frame, row](std::size_t j) { return frame.covariate(j)[row]; };
}

FeatureAt point_features(std::span<const double> x) {
  return [x](std::size_t j) { return x[j]; };
}

namespace {

// Rows grouped by sampling unit (cluster or row).
struct SamplingPlan {
  std::size_t n_units = 0;
  std::vector<std::vector<std::int32_t>> unit_rows;
};

SamplingPlan make_plan(const ObservationFrame& frame, bool cluster_sampling) {
  SamplingPlan plan;
  std::size_t n = frame.n_rows();
  if (cluster_sampling) {
    plan.n_units = frame.n_clusters();
    plan.unit_rows.resize(plan.n_units);
    const auto& cl = frame.cluster_ids();
    for (std::size_t i = 0; i < n; ++i) {
      plan.unit_rows[static_cast<std::size_t>(cl[i])].push_back(static_cast<std::int32_t>(i));
    }
  } else {
    plan.n_units = n;
    plan.unit_rows.resize(n);
    for (std::size_t i = 0; i < n; ++i) plan.unit_rows[i].push_back(static_cast<std::int32_t>(i));
  }
  return plan;
}

std::vector<std::int32_t> sample_without_replacement(std::span<const std::int32_t> pool,
                                                     std::size_t k, Rng& rng) {
  std::vector<std::int32_t> scratch(pool.begin(), pool.end());
  k = std::min(k, scratch.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(scratch.size() - i));
    std::swap(scratch[i], scratch[j]);
  }
  scratch.resize(k);
  return scratch;
}

struct Workspace {
  std::vector<std::int32_t> sidx, eidx;
  std::vector<std::pair<double, double>> pairs;  // (x, target) of split rows
  std::vector<double> est_x;
  std::vector<double> rho;       // relabeled targets aligned to sidx
  std::vector<double> gy, gd, gz;  // gathers for the node moment solve
  std::vector<std::int32_t> feature_pool;
};

struct NodeTask {
  std::int32_t node;
  std::int32_t s_begin, s_end;
  std::int32_t e_begin, e_end;
  std::int16_t depth;
};

struct LocalMoments {
  double mean_y = 0, mean_d = 0, mean_z = 0;
  double cov_zy = 0, cov_zd = 0, var_z = 0;
  bool ok = false;
};

LocalMoments node_moments(const kernels::IvMoments& m) {
  LocalMoments r;
  if (m.sum_w <= 0) return r;
  double inv = 1.0 / m.sum_w;
  r.mean_y = m.sum_y * inv;
  r.mean_d = m.sum_d * inv;
  r.mean_z = m.sum_z * inv;
  r.cov_zy = m.sum_zy * inv - r.mean_z * r.mean_y;
  r.cov_zd = m.sum_zd * inv - r.mean_z * r.mean_d;
  r.var_z = m.sum_zz * inv - r.mean_z * r.mean_z;
  r.ok = true;
  return r;
}

class TreeGrower {
 public:
  TreeGrower(const GrowData& data, const TreeParams& params, Workspace& ws)
      : data_(data), params_(params), ws_(ws), p_(data.frame->n_covariates()) {}

  HonestTree grow(std::vector<std::int32_t>&& split_rows,
                  std::vector<std::int32_t>&& est_rows, Rng& rng,
                  SplitTallies& tallies) {
    HonestTree tree;
    tree.split_rows = std::move(split_rows);
    tree.estimation_rows = std::move(est_rows);
    std::sort(tree.split_rows.begin(), tree.split_rows.end());
    std::sort(tree.estimation_rows.begin(), tree.estimation_rows.end());
    if (tree.estimation_rows.empty() || tree.split_rows.empty()) {
      tree.degenerate = true;
      tree.nodes.push_back(TreeNode{});
      tree.nodes[0].leaf_index = 0;
      tree.leaf_rows.emplace_back();
      tree.leaf_moments.emplace_back();
      return tree;
    }

    ws_.sidx = tree.split_rows;
    ws_.eidx = tree.estimation_rows;

    std::vector<NodeTask> stack;
    tree.nodes.push_back(TreeNode{});
    stack.push_back({0, 0, static_cast<std::int32_t>(ws_.sidx.size()), 0,
                     static_cast<std::int32_t>(ws_.eidx.size()), 0});

    while (!stack.empty()) {
      NodeTask task = stack.back();
      stack.pop_back();
      process_node(tree, task, rng, tallies, stack);
    }
    return tree;
  }

 private:
  void make_leaf(HonestTree& tree, const NodeTask& task) {
    TreeNode& node = tree.nodes[task.node];
    node.feature = -1;
    node.depth = task.depth;
    node.leaf_index = static_cast<std::int32_t>(tree.leaf_rows.size());
    std::vector<std::int32_t> rows(ws_.eidx.begin() + task.e_begin,
                                   ws_.eidx.begin() + task.e_end);
    std::sort(rows.begin(), rows.end());
    std::size_t m = rows.size();
    ws_.gy.resize(m);
    ws_.gd.resize(m);
    ws_.gz.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t r = static_cast<std::size_t>(rows[i]);
      ws_.gy[i] = data_.y[r];
      ws_.gd[i] = data_.d.empty() ? 0.0 : data_.d[r];
      ws_.gz[i] = data_.z.empty() ? 0.0 : data_.z[r];
    }
    tree.leaf_moments.push_back(
        kernels::iv_moments(ws_.gy.data(), ws_.gd.data(), ws_.gz.data(), m));
    tree.leaf_rows.push_back(std::move(rows));
  }

  // Fills ws_.rho for [s_begin, s_end). Returns false when the node cannot be
  // relabeled (weak or degenerate local moment system) and must become a leaf.
  bool relabel(const NodeTask& task) {
    std::size_t m = static_cast<std::size_t>(task.s_end - task.s_begin);
    ws_.rho.resize(m);
    if (!data_.instrumental) {
      for (std::size_t i = 0; i < m; ++i) {
        ws_.rho[i] = data_.y[static_cast<std::size_t>(ws_.sidx[task.s_begin + i])];
      }
      return true;
    }
    ws_.gy.resize(m);
    ws_.gd.resize(m);
    ws_.gz.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t r = static_cast<std::size_t>(ws_.sidx[task.s_begin + i]);
      ws_.gy[i] = data_.y[r];
      ws_.gd[i] = data_.d[r];
      ws_.gz[i] = data_.z[r];
    }
    LocalMoments lm =
        node_moments(kernels::iv_moments(ws_.gy.data(), ws_.gd.data(), ws_.gz.data(), m));
    if (!lm.ok || lm.var_z < kVarTol || std::abs(lm.cov_zd) < kWeakCovTol) return false;
    double tau = lm.cov_zy / lm.cov_zd;
    double mu = lm.mean_y - tau * lm.mean_d;
    double inv_cov = 1.0 / lm.cov_zd;
    for (std::size_t i = 0; i < m; ++i) {
      ws_.rho[i] = (ws_.gz[i] - lm.mean_z) * (ws_.gy[i] - mu - tau * ws_.gd[i]) * inv_cov;
    }
    return true;
  }

  void process_node(HonestTree& tree, const NodeTask& task, Rng& rng,
                    SplitTallies& tallies, std::vector<NodeTask>& stack) {
    std::size_t n_split = static_cast<std::size_t>(task.s_end - task.s_begin);
    std::size_t n_est = static_cast<std::size_t>(task.e_end - task.e_begin);
    if (n_split < 2 || n_est < 2 * params_.min_node_size || !relabel(task)) {
      make_leaf(tree, task);
      return;
    }

    // Draw mtry candidate features; ascending order fixes tie resolution.
    if (ws_.feature_pool.size() != p_) {
      ws_.feature_pool.resize(p_);
    }
    for (std::size_t j = 0; j < p_; ++j) ws_.feature_pool[j] = static_cast<std::int32_t>(j);
    std::size_t mtry = std::min(params_.mtry, p_);
    for (std::size_t i = 0; i < mtry; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(p_ - i));
      std::swap(ws_.feature_pool[i], ws_.feature_pool[j]);
    }
    std::sort(ws_.feature_pool.begin(), ws_.feature_pool.begin() + static_cast<long>(mtry));

    double best_crit = -1.0;
    std::int32_t best_feature = -1;
    double best_threshold = 0.0;

    double total = 0.0;
    for (std::size_t i = 0; i < n_split; ++i) total += ws_.rho[i];

    for (std::size_t f = 0; f < mtry; ++f) {
      std::size_t feature = static_cast<std::size_t>(ws_.feature_pool[f]);
      const std::vector<double>& x = data_.frame->covariate(feature);

      ws_.pairs.resize(n_split);
      for (std::size_t i = 0; i < n_split; ++i) {
        ws_.pairs[i] = {x[static_cast<std::size_t>(ws_.sidx[task.s_begin + i])], ws_.rho[i]};
      }
      std::sort(ws_.pairs.begin(), ws_.pairs.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });

      ws_.est_x.resize(n_est);
      for (std::size_t i = 0; i < n_est; ++i) {
        ws_.est_x[i] = x[static_cast<std::size_t>(ws_.eidx[task.e_begin + i])];
      }
      std::sort(ws_.est_x.begin(), ws_.est_x.end());

      double left_sum = 0.0;
      std::size_t e = 0;
      for (std::size_t i = 1; i < n_split; ++i) {
        left_sum += ws_.pairs[i - 1].second;
        double lo = ws_.pairs[i - 1].first;
        double hi = ws_.pairs[i].first;
        if (!(lo < hi)) continue;
        double thr = lo + (hi - lo) / 2.0;
        if (!(thr < hi)) continue;  // degenerate float midpoint
        while (e < n_est && ws_.est_x[e] <= thr) ++e;
        if (e < params_.min_node_size || n_est - e < params_.min_node_size) continue;
        double right_sum = total - left_sum;
        double crit = left_sum * left_sum / static_cast<double>(i) +
                      right_sum * right_sum / static_cast<double>(n_split - i);
        // Strict improvement keeps the first (lowest feature, smallest
        // threshold) candidate on ties.
        if (crit > best_crit) {
          best_crit = crit;
          best_feature = static_cast<std::int32_t>(feature);
          best_threshold = thr;
        }
      }
    }

    if (best_feature < 0) {
      make_leaf(tree, task);
      return;
    }

    const std::vector<double>& xbest = data_.frame->covariate(static_cast<std::size_t>(best_feature));
    auto goes_left = [&](std::int32_t row) {
      return xbest[static_cast<std::size_t>(row)] <= best_threshold;
    };
    auto s_mid = std::stable_partition(ws_.sidx.begin() + task.s_begin,
                                       ws_.sidx.begin() + task.s_end, goes_left);
    auto e_mid = std::stable_partition(ws_.eidx.begin() + task.e_begin,
                                       ws_.eidx.begin() + task.e_end, goes_left);
    std::int32_t s_cut = static_cast<std::int32_t>(s_mid - ws_.sidx.begin());
    std::int32_t e_cut = static_cast<std::int32_t>(e_mid - ws_.eidx.begin());

    TreeNode& node = tree.nodes[task.node];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.depth = task.depth;
    std::int32_t left_id = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.push_back(TreeNode{});
    std::int32_t right_id = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.push_back(TreeNode{});
    tree.nodes[task.node].left = left_id;
    tree.nodes[task.node].right = right_id;

    tallies.record(static_cast<std::size_t>(task.depth) + 1,
                   static_cast<std::size_t>(best_feature), p_);

    std::int16_t child_depth = static_cast<std::int16_t>(task.depth + 1);
    // Right pushed first so the left child is processed next (depth-first).
    stack.push_back({right_id, s_cut, task.s_end, e_cut, task.e_end, child_depth});
    stack.push_back({left_id, task.s_begin, s_cut, task.e_begin, e_cut, child_depth});
  }

  const GrowData& data_;
  const TreeParams& params_;
  Workspace& ws_;
  std::size_t p_;
};

}  // namespace

ForestModel grow_forest(const GrowData& data, const TreeParams& raw_params) {
  const ObservationFrame& frame = *data.frame;
  std::size_t n = frame.n_rows();
  std::size_t p = frame.n_covariates();
  if (p == 0) throw DataError("no covariates to grow on");
  TreeParams params = raw_params.resolved(p);
  if (n < 2 * params.min_node_size) {
    throw DataError("fewer rows than 2*min_node_size");
  }

  ForestModel model;
  model.params = params;
  model.instrumental = data.instrumental;
  model.n_rows = n;
  model.frame_fingerprint = frame.fingerprint();
  for (std::size_t j = 0; j < p; ++j) model.covariate_names.push_back(frame.covariate_name(j));

  // Constant-target regression data admits no splits; short-circuit to a
  // flagged constant model.
  if (!data.instrumental) {
    double lo = data.y[0], hi = data.y[0];
    for (double v : data.y) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (lo == hi) {
      model.constant_model = true;
      model.constant_value = lo;
      model.n_units = frame.n_clusters();
      return model;
    }
  }

  SamplingPlan plan = make_plan(frame, params.cluster_sampling);
  model.n_units = plan.n_units;

  std::vector<std::int32_t> all_units(plan.n_units);
  for (std::size_t u = 0; u < plan.n_units; ++u) all_units[u] = static_cast<std::int32_t>(u);

  std::size_t n_bags = params.bag_size > 1 ? params.n_trees / params.bag_size : params.n_trees;
  std::size_t trees_per_bag = params.bag_size > 1 ? params.bag_size : 1;

  model.bag_half_units.resize(n_bags);
  for (std::size_t g = 0; g < n_bags; ++g) {
    Rng rng(make_stream(params.seed, g, 0x9a6));
    std::size_t half = std::max<std::size_t>(1, plan.n_units / 2);
    model.bag_half_units[g] = sample_without_replacement(all_units, half, rng);
    std::sort(model.bag_half_units[g].begin(), model.bag_half_units[g].end());
  }

  model.trees.resize(params.n_trees);
  std::vector<SplitTallies> tree_tallies(params.n_trees);

  std::size_t target_units =
      std::max<std::size_t>(1, static_cast<std::size_t>(
                                   std::llround(params.subsample_fraction *
                                                static_cast<double>(plan.n_units))));

  parallel_for(params.n_trees, [&](std::size_t t) {
    thread_local Workspace ws;
    Rng rng(make_stream(params.seed, t, 0x7e3));
    std::size_t bag = t / trees_per_bag;
    const std::vector<std::int32_t>& pool = model.bag_half_units[bag];
    std::size_t m = std::min(target_units, pool.size());
    std::vector<std::int32_t> units = sample_without_replacement(pool, m, rng);

    // Honest partition at the sampling-unit level: households stay together.
    rng.shuffle(units.data(), units.size());
    std::size_t n_split_units = units.size() >= 2
        ? std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(
                                      params.honesty_fraction * static_cast<double>(units.size()))),
                                  1, units.size() - 1)
        : units.size();

    std::vector<std::int32_t> split_rows, est_rows;
    for (std::size_t i = 0; i < units.size(); ++i) {
      const auto& rows = plan.unit_rows[static_cast<std::size_t>(units[i])];
      auto& dst = i < n_split_units ? split_rows : est_rows;
      dst.insert(dst.end(), rows.begin(), rows.end());
    }

    TreeGrower grower(data, params, ws);
    model.trees[t] = grower.grow(std::move(split_rows), std::move(est_rows), rng, tree_tallies[t]);
    model.trees[t].bag = static_cast<std::int32_t>(bag);
  });

  for (const auto& tt : tree_tallies) model.tallies.merge(tt);
  return model;
}

ForestModel grow_regression_forest(const ObservationFrame& frame,
                                   std::span<const double> target,
                                   const TreeParams& params) {
  if (target.size() != frame.n_rows()) throw DataError("target length mismatch");
  GrowData data;
  data.frame = &frame;
  data.y = target;
  data.instrumental = false;
  return grow_forest(data, params);
}

double predict_regression(const ForestModel& model, const FeatureAt& features) {
  if (model.constant_model) return model.constant_value;
  double acc = 0.0;
  std::size_t used = 0;
  for (const auto& tree : model.trees) {
    if (tree.degenerate) continue;
    std::int32_t leaf = tree.find_leaf(features);
    const auto& m = tree.leaf_moments[static_cast<std::size_t>(leaf)];
    if (m.sum_w <= 0) continue;
    acc += m.sum_y / m.sum_w;
    ++used;
  }
  if (used == 0) throw DataError("no usable trees for prediction");
  return acc / static_cast<double>(used);
}

std::vector<double> predict_regression_rows(const ForestModel& model,
                                            const ObservationFrame& frame) {
  if (frame.n_covariates() != model.n_features())
    throw DataError("feature count mismatch between model and frame");
  std::vector<double> out(frame.n_rows());
  parallel_for(frame.n_rows(), [&](std::size_t i) {
    out[i] = predict_regression(model, frame_row_features(frame, i));
  });
  return out;
}

OobPredictions oob_regression_predictions(const ForestModel& model,
                                          const ObservationFrame& frame) {
  std::size_t n = frame.n_rows();
  OobPredictions result;
  result.values.assign(n, 0.0);
  if (model.constant_model) {
    result.values.assign(n, model.constant_value);
    return result;
  }
  if (frame.fingerprint() != model.frame_fingerprint) {
    throw DataError("frame does not match the model's training fingerprint");
  }

  std::size_t n_bags = model.bag_half_units.size();
  std::size_t trees_per_bag = model.params.bag_size > 1 ? model.params.bag_size : 1;

  // Fixed chunking keeps the float accumulation order independent of the
  // worker count.
  std::size_t n_chunks = std::min<std::size_t>(32, n_bags == 0 ? 1 : n_bags);
  std::vector<std::vector<double>> chunk_sum(n_chunks, std::vector<double>(n, 0.0));
  std::vector<std::vector<std::int32_t>> chunk_cnt(n_chunks, std::vector<std::int32_t>(n, 0));

  parallel_for(n_chunks, [&](std::size_t c) {
    std::vector<std::uint8_t> in_half(model.n_units, 0);
    for (std::size_t g = c; g < n_bags; g += n_chunks) {
      for (std::int32_t u : model.bag_half_units[g]) in_half[static_cast<std::size_t>(u)] = 1;
      for (std::size_t i = 0; i < n; ++i) {
        std::int32_t unit = sampling_unit(model, frame, i);
        if (in_half[static_cast<std::size_t>(unit)]) continue;
        for (std::size_t k = 0; k < trees_per_bag; ++k) {
          const HonestTree& tree = model.trees[g * trees_per_bag + k];
          if (tree.degenerate) continue;
          std::int32_t leaf = find_leaf_row(tree, frame, i);
          const auto& m = tree.leaf_moments[static_cast<std::size_t>(leaf)];
          if (m.sum_w <= 0) continue;
          chunk_sum[c][i] += m.sum_y / m.sum_w;
          ++chunk_cnt[c][i];
        }
      }
      for (std::int32_t u : model.bag_half_units[g]) in_half[static_cast<std::size_t>(u)] = 0;
    }
  });

  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    std::int64_t cnt = 0;
    for (std::size_t c = 0; c < n_chunks; ++c) {
      sum += chunk_sum[c][i];
      cnt += chunk_cnt[c][i];
    }
    if (cnt > 0) {
      result.values[i] = sum / static_cast<double>(cnt);
    } else {
      result.values[i] = predict_regression(model, frame_row_features(frame, i));
      ++result.n_fallback;
    }
  }
  return result;
}

std::vector<double> forest_weights(const ForestModel& model,
                                   const ObservationFrame& frame,
                                   std::span<const double> test_point) {
  if (test_point.size() != model.n_features())
    throw DataError("test vector length does not match feature count");
  std::size_t n = frame.n_rows();
  std::vector<double> alpha(n, 0.0);
  std::size_t used = 0;
  for (const auto& tree : model.trees) {
    if (tree.degenerate) continue;
    ++used;
  }
  if (used == 0) return alpha;
  FeatureAt features = point_features(test_point);
  double inv_b = 1.0 / static_cast<double>(used);
  for (const auto& tree : model.trees) {
    if (tree.degenerate) continue;
    std::int32_t leaf = tree.find_leaf(features);
    const auto& rows = tree.leaf_rows[static_cast<std::size_t>(leaf)];
    if (rows.empty()) continue;
    double w = inv_b / static_cast<double>(rows.size());
    for (std::int32_t r : rows) alpha[static_cast<std::size_t>(r)] += w;
  }
  return alpha;
}

std::vector<double> variable_importance(const ForestModel& model, std::size_t max_depth) {
  std::size_t p = model.n_features();
  std::vector<double> scores(p, 0.0);
  if (max_depth == 0) return scores;
  double weight_norm = 0.0;
  for (std::size_t d = 1; d <= max_depth; ++d) {
    weight_norm += 1.0 / static_cast<double>(d * d);
  }
  for (std::size_t d = 1; d <= max_depth; ++d) {
    if (model.tallies.counts_by_depth.size() < d) break;
    const auto& row = model.tallies.counts_by_depth[d - 1];
    std::int64_t total = 0;
    for (std::int64_t c : row) total += c;
    if (total == 0) continue;
    double w = (1.0 / static_cast<double>(d * d)) / weight_norm;
    for (std::size_t j = 0; j < row.size() && j < p; ++j) {
      scores[j] += w * static_cast<double>(row[j]) / static_cast<double>(total);
    }
  }
  return scores;
}

std::size_t prune_empty_leaves(HonestTree& tree) {
  if (tree.nodes.empty()) return 0;
  // Post-order walk: a subtree survives iff some leaf below it holds
  // estimation rows. A node with one dead child is replaced by the other.
  std::size_t pruned = 0;

  std::function<std::int32_t(std::int32_t)> walk = [&](std::int32_t id) -> std::int32_t {
    TreeNode& node = tree.nodes[static_cast<std::size_t>(id)];
    if (node.feature < 0) {
      bool alive = !tree.leaf_rows[static_cast<std::size_t>(node.leaf_index)].empty();
      if (!alive) ++pruned;
      return alive ? id : -1;
    }
    std::int32_t left = walk(node.left);
    std::int32_t right = walk(node.right);
    if (left >= 0 && right >= 0) {
      node.left = left;
      node.right = right;
      return id;
    }
    if (left >= 0) return left;
    if (right >= 0) return right;
    return -1;
  };

  std::int32_t new_root = walk(0);
  if (new_root < 0) {
    tree.degenerate = true;
    tree.nodes.assign(1, TreeNode{});
    tree.nodes[0].leaf_index = 0;
    tree.leaf_rows.assign(1, {});
    tree.leaf_moments.assign(1, {});
    return pruned;
  }
  if (pruned == 0 && new_root == 0) return 0;

  // Compact reachable nodes into a fresh vector, dropping empty leaves.
  std::vector<TreeNode> nodes;
  std::vector<std::vector<std::int32_t>> leaf_rows;
  std::vector<kernels::IvMoments> leaf_moments;
  std::function<std::int32_t(std::int32_t)> copy = [&](std::int32_t id) -> std::int32_t {
    const TreeNode& src = tree.nodes[static_cast<std::size_t>(id)];
    std::int32_t new_id = static_cast<std::int32_t>(nodes.size());
    nodes.push_back(src);
    if (src.feature < 0) {
      nodes[static_cast<std::size_t>(new_id)].leaf_index =
          static_cast<std::int32_t>(leaf_rows.size());
      leaf_rows.push_back(tree.leaf_rows[static_cast<std::size_t>(src.leaf_index)]);
      leaf_moments.push_back(tree.leaf_moments[static_cast<std::size_t>(src.leaf_index)]);
    } else {
      std::int32_t l = copy(src.left);
      std::int32_t r = copy(src.right);
      nodes[static_cast<std::size_t>(new_id)].left = l;
      nodes[static_cast<std::size_t>(new_id)].right = r;
    }
    return new_id;
  };
  copy(new_root);
  tree.nodes = std::move(nodes);
  tree.leaf_rows = std::move(leaf_rows);
  tree.leaf_moments = std::move(leaf_moments);
  return pruned;
}

namespace {

nlohmann::json moments_to_json(const kernels::IvMoments& m) {
  return nlohmann::json::array({m.sum_w, m.sum_y, m.sum_d, m.sum_z, m.sum_zy, m.sum_zd, m.sum_zz});
}

kernels::IvMoments moments_from_json(const nlohmann::json& j) {
  kernels::IvMoments m;
  m.sum_w = j.at(0).get<double>();
  m.sum_y = j.at(1).get<double>();
  m.sum_d = j.at(2).get<double>();
  m.sum_z = j.at(3).get<double>();
  m.sum_zy = j.at(4).get<double>();
  m.sum_zd = j.at(5).get<double>();
  m.sum_zz = j.at(6).get<double>();
  return m;
}

}  // namespace

std::string forest_to_json(const ForestModel& model) {
  nlohmann::json j;
  j["format"] = "hte-forest";
  j["version"] = 1;
  j["params"] = {
      {"n_trees", model.params.n_trees},
      {"subsample_fraction", model.params.subsample_fraction},
      {"honesty_fraction", model.params.honesty_fraction},
      {"mtry", model.params.mtry},
      {"min_node_size", model.params.min_node_size},
      {"seed", model.params.seed},
      {"cluster_sampling", model.params.cluster_sampling},
      {"bag_size", model.params.bag_size},
  };
  j["covariates"] = model.covariate_names;
  j["fingerprint"] = model.frame_fingerprint;
  j["n_rows"] = model.n_rows;
  j["n_units"] = model.n_units;
  j["instrumental"] = model.instrumental;
  j["constant_model"] = model.constant_model;
  j["constant_value"] = model.constant_value;
  j["tallies"] = model.tallies.counts_by_depth;
  j["bag_half_units"] = model.bag_half_units;

  nlohmann::json trees = nlohmann::json::array();
  for (const auto& tree : model.trees) {
    nlohmann::json t;
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes) {
      nodes.push_back(nlohmann::json::array(
          {n.feature, n.threshold, n.left, n.right, n.leaf_index, n.depth}));
    }
    t["nodes"] = std::move(nodes);
    t["leaf_rows"] = tree.leaf_rows;
    nlohmann::json moments = nlohmann::json::array();
    for (const auto& m : tree.leaf_moments) moments.push_back(moments_to_json(m));
    t["leaf_moments"] = std::move(moments);
    t["split_rows"] = tree.split_rows;
    t["estimation_rows"] = tree.estimation_rows;
    t["bag"] = tree.bag;
    t["degenerate"] = tree.degenerate;
    trees.push_back(std::move(t));
  }
  j["trees"] = std::move(trees);
  return j.dump();
}

ForestModel forest_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "hte-forest") throw DataError("not a forest model file");
  if (j.value("version", 0) != 1) throw DataError("unsupported forest model version");
  ForestModel model;
  const auto& p = j.at("params");
  model.params.n_trees = p.at("n_trees").get<std::size_t>();
  model.params.subsample_fraction = p.at("subsample_fraction").get<double>();
  model.params.honesty_fraction = p.at("honesty_fraction").get<double>();
  model.params.mtry = p.at("mtry").get<std::size_t>();
  model.params.min_node_size = p.at("min_node_size").get<std::size_t>();
  model.params.seed = p.at("seed").get<std::uint64_t>();
  model.params.cluster_sampling = p.at("cluster_sampling").get<bool>();
  model.params.bag_size = p.at("bag_size").get<std::size_t>();
  model.covariate_names = j.at("covariates").get<std::vector<std::string>>();
  model.frame_fingerprint = j.at("fingerprint").get<std::uint64_t>();
  model.n_rows = j.at("n_rows").get<std::size_t>();
  model.n_units = j.at("n_units").get<std::size_t>();
  model.instrumental = j.at("instrumental").get<bool>();
  model.constant_model = j.at("constant_model").get<bool>();
  model.constant_value = j.at("constant_value").get<double>();
  model.tallies.counts_by_depth =
      j.at("tallies").get<std::vector<std::vector<std::int64_t>>>();
  model.bag_half_units =
      j.at("bag_half_units").get<std::vector<std::vector<std::int32_t>>>();
  for (const auto& t : j.at("trees")) {
    HonestTree tree;
    for (const auto& n : t.at("nodes")) {
      TreeNode node;
      node.feature = n.at(0).get<std::int32_t>();
      node.threshold = n.at(1).get<double>();
      node.left = n.at(2).get<std::int32_t>();
      node.right = n.at(3).get<std::int32_t>();
      node.leaf_index = n.at(4).get<std::int32_t>();
      node.depth = n.at(5).get<std::int16_t>();
      tree.nodes.push_back(node);
    }
    tree.leaf_rows = t.at("leaf_rows").get<std::vector<std::vector<std::int32_t>>>();
    for (const auto& m : t.at("leaf_moments")) tree.leaf_moments.push_back(moments_from_json(m));
    tree.split_rows = t.at("split_rows").get<std::vector<std::int32_t>>();
    tree.estimation_rows = t.at("estimation_rows").get<std::vector<std::int32_t>>();
    tree.bag = t.at("bag").get<std::int32_t>();
    tree.degenerate = t.at("degenerate").get<bool>();
    model.trees.push_back(std::move(tree));
  }
  return model;
}

void save_forest(const ForestModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write model file: " + path);
  out << forest_to_json(model);
}

ForestModel load_forest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return forest_from_json(ss.str());
}

}  // namespace hte
