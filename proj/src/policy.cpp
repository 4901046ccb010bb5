#include "hte/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace hte {

RewardSpec RewardSpec::from_scores(const std::string& outcome, bool minimize,
                                   std::span<const double> gamma) {
  RewardSpec spec;
  spec.outcome = outcome;
  spec.minimize = minimize;
  spec.rewards.resize(gamma.size());
  double sign = minimize ? -1.0 : 1.0;
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    double r = sign * gamma[i];
    if (!std::isfinite(r)) throw DataError("non-finite reward");
    spec.rewards[i] = r;
  }
  return spec;
}

AllocationResult allocate_capacity(std::span<const double> rewards, std::size_t k) {
  std::size_t n = rewards.size();
  if (k == 0 || k > n) throw DataError("capacity K out of range");
  std::vector<std::int32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    if (rewards[static_cast<std::size_t>(a)] != rewards[static_cast<std::size_t>(b)])
      return rewards[static_cast<std::size_t>(a)] > rewards[static_cast<std::size_t>(b)];
    return a < b;
  });
  AllocationResult result;
  result.capacity = k;
  result.treated.assign(order.begin(), order.begin() + static_cast<long>(k));
  std::sort(result.treated.begin(), result.treated.end());
  double obj = 0.0;
  for (std::int32_t i : result.treated) obj += rewards[static_cast<std::size_t>(i)];
  result.objective = obj;
  return result;
}

namespace {

// Segment tree over the value groups of one feature. Each leaf holds the
// total reward of active rows in that group; internal nodes track subtree sum
// and the extreme prefix sums at group boundaries. The best depth-1 value for
// the active set follows from max(T, 0, maxPrefix, T - minPrefix).
class PrefixTree {
 public:
  void init(std::size_t n_groups) {
    size_ = 1;
    while (size_ < std::max<std::size_t>(n_groups, 1)) size_ <<= 1;
    nodes_.assign(2 * size_, Node{});
  }

  void reset() { std::fill(nodes_.begin(), nodes_.end(), Node{}); }

  void fill(std::span<const double> group_sums) {
    reset();
    for (std::size_t g = 0; g < group_sums.size(); ++g) {
      nodes_[size_ + g] = Node{group_sums[g], group_sums[g], group_sums[g]};
    }
    for (std::size_t i = size_ - 1; i >= 1; --i) {
      nodes_[i] = combine(nodes_[2 * i], nodes_[2 * i + 1]);
      if (i == 1) break;
    }
  }

  void add(std::size_t group, double delta) {
    std::size_t i = size_ + group;
    nodes_[i].sum += delta;
    nodes_[i].max_prefix = nodes_[i].sum;
    nodes_[i].min_prefix = nodes_[i].sum;
    for (i >>= 1; i >= 1; i >>= 1) {
      nodes_[i] = combine(nodes_[2 * i], nodes_[2 * i + 1]);
      if (i == 1) break;
    }
  }

  double total() const { return nodes_[1].sum; }

  // Best depth-1 policy value over the active rows.
  double best_depth1() const {
    const Node& root = nodes_[1];
    double t = root.sum;
    double best = std::max(t, 0.0);
    best = std::max(best, root.max_prefix);
    best = std::max(best, t - root.min_prefix);
    return best;
  }

 private:
  struct Node {
    double sum = 0.0;
    double max_prefix = 0.0;
    double min_prefix = 0.0;
  };
  static Node combine(const Node& l, const Node& r) {
    Node out;
    out.sum = l.sum + r.sum;
    out.max_prefix = std::max(l.max_prefix, l.sum + r.max_prefix);
    out.min_prefix = std::min(l.min_prefix, l.sum + r.min_prefix);
    return out;
  }
  std::size_t size_ = 0;
  std::vector<Node> nodes_;
};

struct FeatureIndex {
  std::vector<std::int32_t> sorted_rows;  // rows ordered by feature value
  std::vector<std::int32_t> group_of_row; // value-group id per row
  std::vector<double> group_value;        // representative value per group
  std::size_t n_groups = 0;
};

FeatureIndex build_feature_index(const std::vector<double>& x, std::size_t n) {
  FeatureIndex fi;
  fi.sorted_rows.resize(n);
  std::iota(fi.sorted_rows.begin(), fi.sorted_rows.end(), 0);
  std::stable_sort(fi.sorted_rows.begin(), fi.sorted_rows.end(),
                   [&](std::int32_t a, std::int32_t b) {
                     return x[static_cast<std::size_t>(a)] < x[static_cast<std::size_t>(b)];
                   });
  fi.group_of_row.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::int32_t row = fi.sorted_rows[i];
    double v = x[static_cast<std::size_t>(row)];
    if (fi.group_value.empty() || v != fi.group_value.back()) {
      fi.group_value.push_back(v);
    }
    fi.group_of_row[static_cast<std::size_t>(row)] =
        static_cast<std::int32_t>(fi.group_value.size() - 1);
  }
  fi.n_groups = fi.group_value.size();
  return fi;
}

double midpoint(double lo, double hi) { return lo + (hi - lo) / 2.0; }

// Best depth-1 split of a row subset on one feature by direct scan. Returns
// the best value and, when a split beats both constants, its threshold and
// left prefix sum.
struct Depth1Result {
  double value = 0.0;
  bool has_split = false;
  double threshold = 0.0;
  double left_sum = 0.0;
  double total = 0.0;
};

Depth1Result scan_depth1_feature(const std::vector<double>& x,
                                 std::span<const std::int32_t> rows,
                                 std::span<const double> rewards,
                                 std::vector<std::pair<double, double>>& scratch) {
  scratch.clear();
  double total = 0.0;
  for (std::int32_t i : rows) {
    double r = rewards[static_cast<std::size_t>(i)];
    scratch.emplace_back(x[static_cast<std::size_t>(i)], r);
    total += r;
  }
  std::sort(scratch.begin(), scratch.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  Depth1Result best;
  best.total = total;
  best.value = std::max(total, 0.0);
  double prefix = 0.0;
  for (std::size_t i = 1; i < scratch.size(); ++i) {
    prefix += scratch[i - 1].second;
    if (!(scratch[i - 1].first < scratch[i].first)) continue;
    double thr = midpoint(scratch[i - 1].first, scratch[i].first);
    if (!(thr < scratch[i].first)) continue;
    double value = std::max(prefix, 0.0) + std::max(total - prefix, 0.0);
    if (value > best.value) {
      best.value = value;
      best.has_split = true;
      best.threshold = thr;
      best.left_sum = prefix;
    }
  }
  return best;
}

struct ChildPlan {
  bool has_split = false;
  std::int32_t feature = -1;  // index into allowed features
  double threshold = 0.0;
  double left_sum = 0.0;
  double total = 0.0;
};

// Exhaustive depth-1 plan for a subset, deterministic tie order over the
// allowed features.
ChildPlan plan_depth1(const ObservationFrame& frame, std::span<const double> rewards,
                      std::span<const std::int32_t> allowed,
                      std::span<const std::int32_t> rows) {
  ChildPlan plan;
  double total = 0.0;
  for (std::int32_t i : rows) total += rewards[static_cast<std::size_t>(i)];
  plan.total = total;
  double best = std::max(total, 0.0);
  std::vector<std::pair<double, double>> scratch;
  for (std::size_t a = 0; a < allowed.size(); ++a) {
    const auto& x = frame.covariate(static_cast<std::size_t>(allowed[a]));
    Depth1Result r = scan_depth1_feature(x, rows, rewards, scratch);
    if (r.has_split && r.value > best) {
      best = r.value;
      plan.has_split = true;
      plan.feature = static_cast<std::int32_t>(a);
      plan.threshold = r.threshold;
      plan.left_sum = r.left_sum;
    }
  }
  return plan;
}

std::int32_t add_leaf(PolicyTree& tree, bool treat, std::int64_t n_rows, std::size_t n_total) {
  PolicyNode leaf;
  leaf.treat = treat;
  leaf.n_rows = n_rows;
  leaf.share = n_total > 0 ? static_cast<double>(n_rows) / static_cast<double>(n_total) : 0.0;
  tree.nodes.push_back(leaf);
  return static_cast<std::int32_t>(tree.nodes.size() - 1);
}

// Materializes a child subtree from its depth-1 plan.
std::int32_t build_child(PolicyTree& tree, const ObservationFrame& frame,
                         std::span<const std::int32_t> allowed,
                         std::span<const std::int32_t> rows, const ChildPlan& plan,
                         std::size_t n_total) {
  if (!plan.has_split) {
    bool treat = plan.total > 0.0;
    return add_leaf(tree, treat, static_cast<std::int64_t>(rows.size()), n_total);
  }
  const auto& x = frame.covariate(static_cast<std::size_t>(allowed[plan.feature]));
  std::int64_t n_left = 0;
  for (std::int32_t i : rows) {
    if (x[static_cast<std::size_t>(i)] <= plan.threshold) ++n_left;
  }
  PolicyNode node;
  node.feature = allowed[static_cast<std::size_t>(plan.feature)];
  node.threshold = plan.threshold;
  std::int32_t id = static_cast<std::int32_t>(tree.nodes.size());
  tree.nodes.push_back(node);
  double right_sum = plan.total - plan.left_sum;
  std::int32_t left = add_leaf(tree, plan.left_sum > 0.0, n_left, n_total);
  std::int32_t right = add_leaf(tree, right_sum > 0.0,
                                static_cast<std::int64_t>(rows.size()) - n_left, n_total);
  tree.nodes[static_cast<std::size_t>(id)].left = left;
  tree.nodes[static_cast<std::size_t>(id)].right = right;
  return id;
}

}  // namespace

bool PolicyTree::assign(const FeatureAt& features) const {
  std::int32_t node = 0;
  while (nodes[static_cast<std::size_t>(node)].feature >= 0) {
    const PolicyNode& n = nodes[static_cast<std::size_t>(node)];
    node = features(static_cast<std::size_t>(n.feature)) <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<std::size_t>(node)].treat;
}

std::vector<std::uint8_t> PolicyTree::assign_rows(const ObservationFrame& frame) const {
  std::vector<std::uint8_t> out(frame.n_rows());
  for (std::size_t i = 0; i < frame.n_rows(); ++i) {
    out[i] = assign(frame_row_features(frame, i)) ? 1 : 0;
  }
  return out;
}

double evaluate_policy(const ObservationFrame& frame, std::span<const double> rewards,
                       const PolicyTree& tree) {
  double obj = 0.0;
  for (std::size_t i = 0; i < frame.n_rows(); ++i) {
    if (tree.assign(frame_row_features(frame, i))) obj += rewards[i];
  }
  return obj;
}

PolicyTree learn_policy_tree(const ObservationFrame& frame,
                             std::span<const double> rewards,
                             std::span<const std::int32_t> allowed_features,
                             std::size_t depth) {
  std::size_t n = frame.n_rows();
  if (rewards.size() != n) throw DataError("reward length mismatch");
  if (allowed_features.empty()) throw DataError("allowed_features must be nonempty");
  if (depth < 1 || depth > 2) {
    throw DataError(
        "policy tree depth must be 1 or 2: exact search cost grows "
        "exponentially with depth");
  }
  for (std::int32_t f : allowed_features) {
    if (f < 0 || static_cast<std::size_t>(f) >= frame.n_covariates())
      throw DataError("allowed feature index out of range");
  }

  std::vector<std::int32_t> all_rows(n);
  std::iota(all_rows.begin(), all_rows.end(), 0);

  double total = 0.0;
  for (double r : rewards) total += r;

  PolicyTree tree;
  for (std::size_t j = 0; j < frame.n_covariates(); ++j)
    tree.feature_names.push_back(frame.covariate_name(j));

  // Depth-0 baseline; returned (flagged) when no split strictly improves.
  auto make_constant = [&]() {
    PolicyTree constant;
    constant.feature_names = tree.feature_names;
    constant.constant_fallback = true;
    constant.depth = 0;
    add_leaf(constant, total > 0.0, static_cast<std::int64_t>(n), n);
    constant.objective = evaluate_policy(frame, rewards, constant);
    return constant;
  };

  ChildPlan root_plan = plan_depth1(frame, rewards, allowed_features, all_rows);

  if (depth == 1) {
    if (root_plan.has_split) {
      tree.depth = 1;
      build_child(tree, frame, allowed_features, all_rows, root_plan, n);
      tree.objective = evaluate_policy(frame, rewards, tree);
      PolicyTree constant = make_constant();
      if (tree.objective > constant.objective) return tree;
      return constant;
    }
    return make_constant();
  }

  // Depth 2: sweep each root feature's value groups, maintaining per-feature
  // prefix trees for both children so every (root split, child feature) pair
  // costs O(log n) per moved row.
  std::size_t n_feat = allowed_features.size();
  std::vector<FeatureIndex> index(n_feat);
  for (std::size_t a = 0; a < n_feat; ++a) {
    index[a] = build_feature_index(
        frame.covariate(static_cast<std::size_t>(allowed_features[a])), n);
  }

  std::vector<PrefixTree> left_trees(n_feat), right_trees(n_feat);
  std::vector<std::vector<double>> full_group_sums(n_feat);
  for (std::size_t a = 0; a < n_feat; ++a) {
    left_trees[a].init(index[a].n_groups);
    right_trees[a].init(index[a].n_groups);
    full_group_sums[a].assign(index[a].n_groups, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      full_group_sums[a][static_cast<std::size_t>(index[a].group_of_row[i])] += rewards[i];
    }
  }

  double best_value = -std::numeric_limits<double>::infinity();
  std::size_t best_root_feature = 0;
  std::ptrdiff_t best_boundary = -1;  // group index after which the cut falls; -1 = all right

  for (std::size_t a = 0; a < n_feat; ++a) {
    const FeatureIndex& root_idx = index[a];
    for (std::size_t b = 0; b < n_feat; ++b) {
      left_trees[b].reset();
      right_trees[b].fill(full_group_sums[b]);
    }

    // Left child empty: depth-1 tree on everything (root threshold -inf).
    {
      double value = 0.0;
      double best_right = 0.0;
      for (std::size_t b = 0; b < n_feat; ++b) {
        best_right = std::max(best_right, right_trees[b].best_depth1());
      }
      value = best_right;
      if (value > best_value) {
        best_value = value;
        best_root_feature = a;
        best_boundary = -1;
      }
    }

    std::size_t pos = 0;
    for (std::size_t g = 0; g < root_idx.n_groups; ++g) {
      while (pos < n &&
             root_idx.group_of_row[static_cast<std::size_t>(root_idx.sorted_rows[pos])] ==
                 static_cast<std::int32_t>(g)) {
        std::int32_t row = root_idx.sorted_rows[pos];
        double r = rewards[static_cast<std::size_t>(row)];
        for (std::size_t b = 0; b < n_feat; ++b) {
          std::size_t grp = static_cast<std::size_t>(index[b].group_of_row[static_cast<std::size_t>(row)]);
          left_trees[b].add(grp, r);
          right_trees[b].add(grp, -r);
        }
        ++pos;
      }
      double best_left = 0.0, best_right = 0.0;
      for (std::size_t b = 0; b < n_feat; ++b) {
        best_left = std::max(best_left, left_trees[b].best_depth1());
        best_right = std::max(best_right, right_trees[b].best_depth1());
      }
      double value = best_left + best_right;
      if (value > best_value) {
        best_value = value;
        best_root_feature = a;
        best_boundary = static_cast<std::ptrdiff_t>(g);
      }
    }
  }

  // Rebuild the winning configuration explicitly and re-derive the child
  // splits with the deterministic scan (lowest feature, smallest threshold).
  const FeatureIndex& win_idx = index[best_root_feature];
  bool root_split_real =
      best_boundary >= 0 && best_boundary + 1 < static_cast<std::ptrdiff_t>(win_idx.n_groups);

  if (root_split_real) {
    double root_threshold =
        midpoint(win_idx.group_value[static_cast<std::size_t>(best_boundary)],
                 win_idx.group_value[static_cast<std::size_t>(best_boundary) + 1]);
    const auto& root_x =
        frame.covariate(static_cast<std::size_t>(allowed_features[best_root_feature]));
    std::vector<std::int32_t> left_rows, right_rows;
    for (std::size_t i = 0; i < n; ++i) {
      if (root_x[i] <= root_threshold) left_rows.push_back(static_cast<std::int32_t>(i));
      else right_rows.push_back(static_cast<std::int32_t>(i));
    }

    ChildPlan left_plan = plan_depth1(frame, rewards, allowed_features, left_rows);
    ChildPlan right_plan = plan_depth1(frame, rewards, allowed_features, right_rows);

    PolicyNode root;
    root.feature = allowed_features[best_root_feature];
    root.threshold = root_threshold;
    tree.nodes.push_back(root);
    std::int32_t left_id = build_child(tree, frame, allowed_features, left_rows, left_plan, n);
    std::int32_t right_id =
        build_child(tree, frame, allowed_features, right_rows, right_plan, n);
    tree.nodes[0].left = left_id;
    tree.nodes[0].right = right_id;
    tree.depth = (left_plan.has_split || right_plan.has_split) ? 2 : 1;
  } else if (root_plan.has_split) {
    // Degenerate root (a one-sided cut won): the optimum is depth <= 1.
    tree.depth = 1;
    build_child(tree, frame, allowed_features, all_rows, root_plan, n);
  } else {
    return make_constant();
  }
  tree.objective = evaluate_policy(frame, rewards, tree);

  PolicyTree constant = make_constant();
  if (tree.objective > constant.objective) return tree;
  return constant;
}

AllocationComparison profile_allocation(const ObservationFrame& frame,
                                        std::span<const std::int32_t> selected,
                                        std::span<const std::int32_t> reference) {
  if (selected.empty() || reference.empty())
    throw DataError("profile_allocation: empty index set");
  AllocationComparison out;
  out.table = profile_groups(frame, reference, selected, "reference", "selected");
  std::vector<std::int32_t> a(selected.begin(), selected.end());
  std::vector<std::int32_t> b(reference.begin(), reference.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::int32_t> inter;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  out.overlap = inter.size();
  return out;
}

namespace {

nlohmann::json node_to_json(const PolicyTree& tree, std::int32_t id) {
  const PolicyNode& n = tree.nodes[static_cast<std::size_t>(id)];
  nlohmann::json j;
  if (n.feature < 0) {
    j["action"] = n.treat ? "solicit_application" : "no_offer";
    j["n"] = n.n_rows;
    j["share"] = n.share;
  } else {
    j["feature"] = tree.feature_names.empty()
                       ? std::to_string(n.feature)
                       : tree.feature_names[static_cast<std::size_t>(n.feature)];
    j["feature_index"] = n.feature;
    j["threshold"] = n.threshold;
    j["left"] = node_to_json(tree, n.left);
    j["right"] = node_to_json(tree, n.right);
  }
  return j;
}

void render_node(const PolicyTree& tree, std::int32_t id, std::string indent,
                 std::ostringstream& os) {
  const PolicyNode& n = tree.nodes[static_cast<std::size_t>(id)];
  if (n.feature < 0) {
    os << indent << (n.treat ? "solicit application" : "no offer") << "  [n=" << n.n_rows
       << ", share=" << n.share << "]\n";
    return;
  }
  std::string name = tree.feature_names.empty()
                         ? "x" + std::to_string(n.feature)
                         : tree.feature_names[static_cast<std::size_t>(n.feature)];
  os << indent << "if " << name << " <= " << n.threshold << ":\n";
  render_node(tree, n.left, indent + "  ", os);
  os << indent << "else:\n";
  render_node(tree, n.right, indent + "  ", os);
}

}  // namespace

std::string policy_tree_to_json(const PolicyTree& tree) {
  nlohmann::json j;
  j["depth"] = tree.depth;
  j["objective"] = tree.objective;
  j["constant_fallback"] = tree.constant_fallback;
  j["tree"] = node_to_json(tree, 0);
  return j.dump(2);
}

std::string render_policy_tree(const PolicyTree& tree) {
  std::ostringstream os;
  os.precision(12);
  render_node(tree, 0, "", os);
  return os.str();
}

}  // namespace hte
