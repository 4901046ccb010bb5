#include "hte/dgp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hte/rng.hpp"
#include "json.hpp"

namespace hte {

namespace {

double stdnormal_cdf(double x) { return 0.5 * std::erfc(-x / M_SQRT2); }

double tau_at(const DgpSpec& spec, const std::vector<double>& x) {
  if (spec.tau_kind == "constant") return spec.tau_value;
  if (spec.tau_kind == "step") return x[0] > 0.0 ? spec.tau_value : 0.0;
  if (spec.tau_kind == "two_feature") {
    return (x[0] <= 2.0 && x[1] > 0.0) ? spec.tau_value : 0.0;
  }
  throw DataError("unknown tau_kind: " + spec.tau_kind);
}

double population_mean_tau(const DgpSpec& spec) {
  if (spec.tau_kind == "constant") return spec.tau_value;
  if (spec.tau_kind == "step") return spec.tau_value * 0.5;  // P(x1 > 0), x1 ~ N(0,1)
  if (spec.tau_kind == "two_feature") {
    return spec.tau_value * stdnormal_cdf(2.0) * 0.5;
  }
  throw DataError("unknown tau_kind: " + spec.tau_kind);
}

}  // namespace

void DgpSpec::validate() const {
  if (n == 0) throw DataError("dgp: n must be positive");
  if (p < 1) throw DataError("dgp: p must be at least 1");
  if (tau_kind == "two_feature" && p < 2) throw DataError("dgp: two_feature needs p >= 2");
  double shares = share_always + share_never + share_complier;
  if (std::abs(shares - 1.0) > 1e-9) throw DataError("dgp: compliance shares must sum to 1");
  if (share_complier < 0.2) throw DataError("dgp: complier share must be at least 0.2");
  if (noise != "gauss" && noise != "t4") throw DataError("dgp: unknown noise id");
  if (max_cluster_size == 0) throw DataError("dgp: max_cluster_size must be positive");
  if (n_strata == 0) throw DataError("dgp: n_strata must be positive");
  for (double r : instrument_rates) {
    if (!(r > 0.0 && r < 1.0)) throw DataError("dgp: instrument rates must lie in (0, 1)");
  }
}

DgpResult generate(const DgpSpec& spec) {
  spec.validate();
  Rng rng(splitmix64(spec.seed ^ 0xd6e8feb8));

  std::size_t n = spec.n;
  std::vector<std::int32_t> household(n);
  std::size_t n_clusters = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t size = 1 + static_cast<std::size_t>(rng.uniform_int(spec.max_cluster_size));
    size = std::min(size, n - i);
    for (std::size_t k = 0; k < size; ++k) household[i + k] = static_cast<std::int32_t>(n_clusters);
    i += size;
    ++n_clusters;
  }

  // Clusters cycle through strata; each stratum draws exactly its share of
  // winners, so empirical instrument rates match the design up to rounding.
  std::vector<std::int32_t> cluster_stratum(n_clusters);
  std::vector<std::vector<std::int32_t>> stratum_clusters(spec.n_strata);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    std::int32_t s = static_cast<std::int32_t>(c % spec.n_strata);
    cluster_stratum[c] = s;
    stratum_clusters[static_cast<std::size_t>(s)].push_back(static_cast<std::int32_t>(c));
  }
  std::vector<std::uint8_t> cluster_win(n_clusters, 0);
  for (std::size_t s = 0; s < spec.n_strata; ++s) {
    double rate = s < spec.instrument_rates.size() ? spec.instrument_rates[s] : 0.5;
    auto& clusters = stratum_clusters[s];
    rng.shuffle(clusters.data(), clusters.size());
    std::size_t winners = static_cast<std::size_t>(
        std::llround(rate * static_cast<double>(clusters.size())));
    winners = std::min(winners, clusters.size());
    for (std::size_t k = 0; k < winners; ++k) {
      cluster_win[static_cast<std::size_t>(clusters[k])] = 1;
    }
  }

  std::vector<std::vector<double>> x(spec.p, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < spec.p; ++j) x[j][i] = rng.normal();
  }

  GroundTruth truth;
  truth.tau.resize(n);
  truth.compliance.resize(n);
  std::vector<double> y(n), d(n), z(n), stratum_col(n);
  std::vector<double> xi(spec.p);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = static_cast<std::size_t>(household[i]);
    z[i] = cluster_win[c] ? 1.0 : 0.0;
    stratum_col[i] = static_cast<double>(cluster_stratum[c]);

    double u = rng.uniform();
    std::int8_t type = u < spec.share_never             ? 0
                       : u < spec.share_never + spec.share_complier ? 1
                                                                    : 2;
    truth.compliance[i] = type;
    d[i] = type == 2 ? 1.0 : (type == 1 ? z[i] : 0.0);

    for (std::size_t j = 0; j < spec.p; ++j) xi[j] = x[j][i];
    double tau = tau_at(spec, xi);
    truth.tau[i] = tau;
    double mu = spec.p >= 2 ? spec.baseline_effect * xi[1] : 0.0;
    double eps = spec.noise == "gauss" ? rng.normal(0.0, spec.noise_scale)
                                       : rng.student_t(4) * spec.noise_scale;
    y[i] = mu + tau * d[i] + eps;
  }
  truth.late = population_mean_tau(spec);
  truth.itt = truth.late * spec.share_complier;

  DgpResult result;
  result.table.names = {"y", "d", "z", "household", "stratum"};
  result.table.columns = {y, d, z, {}, stratum_col};
  result.table.columns[3].resize(n);
  for (std::size_t i = 0; i < n; ++i) result.table.columns[3][i] = household[i];
  for (std::size_t j = 0; j < spec.p; ++j) {
    result.table.names.push_back("x" + std::to_string(j + 1));
    result.table.columns.push_back(x[j]);
  }
  result.table.raw_ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) result.table.raw_ids[i] = "u" + std::to_string(i);

  result.schema.unit_id = "unit_id";
  result.schema.outcome = "y";
  result.schema.treatment = "d";
  result.schema.instrument = "z";
  result.schema.cluster = "household";
  result.schema.strata = {"stratum"};
  for (std::size_t j = 0; j < spec.p; ++j) {
    result.schema.covariates.push_back("x" + std::to_string(j + 1));
  }

  FrameLoadResult loaded = build_frame(result.table, result.schema);
  result.frame = std::move(loaded.frame);
  result.truth = std::move(truth);
  return result;
}

std::string GroundTruth::to_json() const {
  nlohmann::json j;
  j["late"] = late;
  j["itt"] = itt;
  j["tau"] = tau;
  nlohmann::json comp = nlohmann::json::array();
  for (std::int8_t c : compliance) comp.push_back(static_cast<int>(c));
  j["compliance"] = std::move(comp);
  return j.dump();
}

namespace {

struct OracleChild {
  bool split = false;
  std::size_t feature = 0;  // index into allowed list
  double threshold = 0.0;
  bool treat_left = false, treat_right = false;
  bool treat_const = false;
  double value = 0.0;
};

std::vector<double> candidate_thresholds(const std::vector<double>& x,
                                         std::span<const std::int32_t> rows) {
  std::vector<double> vals;
  vals.reserve(rows.size());
  for (std::int32_t i : rows) vals.push_back(x[static_cast<std::size_t>(i)]);
  std::sort(vals.begin(), vals.end());
  vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
  std::vector<double> thresholds;
  for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
    double thr = vals[i] + (vals[i + 1] - vals[i]) / 2.0;
    if (vals[i] <= thr && thr < vals[i + 1]) thresholds.push_back(thr);
  }
  return thresholds;
}

// Best depth-1 policy for a subset: every (feature, threshold) pair is scored
// by a fresh pass over the rows, plus the two constant policies.
OracleChild oracle_depth1(const ObservationFrame& frame, std::span<const double> rewards,
                          std::span<const std::int32_t> allowed,
                          std::span<const std::int32_t> rows) {
  OracleChild best;
  double total = 0.0;
  for (std::int32_t i : rows) total += rewards[static_cast<std::size_t>(i)];
  best.value = std::max(total, 0.0);
  best.treat_const = total > 0.0;
  for (std::size_t a = 0; a < allowed.size(); ++a) {
    const auto& x = frame.covariate(static_cast<std::size_t>(allowed[a]));
    for (double thr : candidate_thresholds(x, rows)) {
      double left = 0.0;
      for (std::int32_t i : rows) {
        if (x[static_cast<std::size_t>(i)] <= thr) left += rewards[static_cast<std::size_t>(i)];
      }
      double right = total - left;
      double value = std::max(left, 0.0) + std::max(right, 0.0);
      if (value > best.value) {
        best.value = value;
        best.split = true;
        best.feature = a;
        best.threshold = thr;
        best.treat_left = left > 0.0;
        best.treat_right = right > 0.0;
      }
    }
  }
  return best;
}

PolicyTree oracle_child_tree(const ObservationFrame& frame,
                             std::span<const std::int32_t> allowed,
                             const OracleChild& child, PolicyTree&& base) {
  PolicyTree tree = std::move(base);
  if (!child.split) {
    PolicyNode leaf;
    leaf.treat = child.treat_const;
    tree.nodes.push_back(leaf);
  } else {
    PolicyNode node;
    node.feature = allowed[child.feature];
    node.threshold = child.threshold;
    std::int32_t id = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.push_back(node);
    PolicyNode l, r;
    l.treat = child.treat_left;
    r.treat = child.treat_right;
    tree.nodes.push_back(l);
    tree.nodes.push_back(r);
    tree.nodes[static_cast<std::size_t>(id)].left = id + 1;
    tree.nodes[static_cast<std::size_t>(id)].right = id + 2;
  }
  return tree;
}

}  // namespace

double brute_force_policy_oracle(const ObservationFrame& frame,
                                 std::span<const double> rewards,
                                 std::span<const std::int32_t> allowed_features,
                                 std::size_t depth) {
  std::size_t n = frame.n_rows();
  if (rewards.size() != n) throw DataError("oracle: reward length mismatch");
  if (n > 500) throw DataError("oracle: n exceeds 500");
  if (allowed_features.size() > 4) throw DataError("oracle: more than 4 features");
  if (allowed_features.empty()) throw DataError("oracle: no features");
  if (depth > 2) throw DataError("oracle: depth exceeds 2");

  std::vector<std::int32_t> all_rows(n);
  std::iota(all_rows.begin(), all_rows.end(), 0);

  double total = 0.0;
  for (double r : rewards) total += r;

  if (depth == 0) return std::max(total, 0.0);

  // Track the best configuration, then re-evaluate it canonically.
  double best_value = std::max(total, 0.0);
  bool best_is_constant = true;
  bool best_const_treat = total > 0.0;
  bool best_has_root = false;
  std::size_t best_root_feature = 0;
  double best_root_threshold = 0.0;
  OracleChild best_left, best_right, best_single;

  OracleChild single = oracle_depth1(frame, rewards, allowed_features, all_rows);
  if (single.value > best_value) {
    best_value = single.value;
    best_is_constant = false;
    best_has_root = false;
    best_single = single;
  }

  if (depth == 2) {
    for (std::size_t a = 0; a < allowed_features.size(); ++a) {
      const auto& x = frame.covariate(static_cast<std::size_t>(allowed_features[a]));
      for (double thr : candidate_thresholds(x, all_rows)) {
        std::vector<std::int32_t> left_rows, right_rows;
        for (std::int32_t i : all_rows) {
          if (x[static_cast<std::size_t>(i)] <= thr) left_rows.push_back(i);
          else right_rows.push_back(i);
        }
        OracleChild left = oracle_depth1(frame, rewards, allowed_features, left_rows);
        OracleChild right = oracle_depth1(frame, rewards, allowed_features, right_rows);
        double value = left.value + right.value;
        if (value > best_value) {
          best_value = value;
          best_is_constant = false;
          best_has_root = true;
          best_root_feature = a;
          best_root_threshold = thr;
          best_left = left;
          best_right = right;
        }
      }
    }
  }

  PolicyTree tree;
  for (std::size_t j = 0; j < frame.n_covariates(); ++j)
    tree.feature_names.push_back(frame.covariate_name(j));
  if (best_is_constant) {
    PolicyNode leaf;
    leaf.treat = best_const_treat;
    tree.nodes.push_back(leaf);
  } else if (!best_has_root) {
    tree = oracle_child_tree(frame, allowed_features, best_single, std::move(tree));
  } else {
    PolicyNode root;
    root.feature = allowed_features[best_root_feature];
    root.threshold = best_root_threshold;
    tree.nodes.push_back(root);
    std::size_t left_id = tree.nodes.size();
    tree = oracle_child_tree(frame, allowed_features, best_left, std::move(tree));
    std::size_t right_id = tree.nodes.size();
    tree = oracle_child_tree(frame, allowed_features, best_right, std::move(tree));
    tree.nodes[0].left = static_cast<std::int32_t>(left_id);
    tree.nodes[0].right = static_cast<std::int32_t>(right_id);
  }
  return evaluate_policy(frame, rewards, tree);
}

}  // namespace hte
