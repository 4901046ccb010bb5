#include "hte/aggregate.hpp"

#include <algorithm>
#include <cmath>

#include "hte/inference.hpp"
#include "json.hpp"

namespace hte {

namespace {

void check_len(std::size_t n, std::span<const double> v, const char* what) {
  if (v.size() != n) throw DataError(std::string("length mismatch: ") + what);
}

void finalize(DoublyRobustScores& s, const ObservationFrame& frame) {
  MeanEstimate m = cluster_robust_mean(s.gamma, frame.cluster_ids());
  s.estimate = m.estimate;
  s.se = m.se;
  s.p_value = m.p_value;
}

}  // namespace

DoublyRobustScores compute_dr_scores_itt(const ObservationFrame& frame,
                                         std::span<const double> m1,
                                         std::span<const double> m0,
                                         std::span<const double> z_hat) {
  std::size_t n = frame.n_rows();
  check_len(n, m1, "m1");
  check_len(n, m0, "m0");
  check_len(n, z_hat, "z_hat");
  const auto& y = frame.outcome();
  const auto& z = frame.instrument();

  DoublyRobustScores s;
  s.estimand = "itt";
  s.gamma.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double zc = clip_propensity(z_hat[i]);
    if (zc != z_hat[i]) ++s.n_clipped_propensity;
    double ipw = z[i] > 0.5 ? (y[i] - m1[i]) / zc : -(y[i] - m0[i]) / (1.0 - zc);
    s.gamma[i] = m1[i] - m0[i] + ipw;
    if (!std::isfinite(s.gamma[i])) throw DataError("non-finite doubly robust score");
  }
  finalize(s, frame);
  return s;
}

DoublyRobustScores compute_dr_scores_late(const ObservationFrame& frame,
                                          std::span<const double> tau_hat,
                                          std::span<const double> my1,
                                          std::span<const double> my0,
                                          std::span<const double> md1,
                                          std::span<const double> md0,
                                          std::span<const double> z_hat) {
  std::size_t n = frame.n_rows();
  check_len(n, tau_hat, "tau_hat");
  check_len(n, my1, "my1");
  check_len(n, my0, "my0");
  check_len(n, md1, "md1");
  check_len(n, md0, "md0");
  check_len(n, z_hat, "z_hat");
  const auto& y = frame.outcome();
  const auto& d = frame.treatment();
  const auto& z = frame.instrument();

  DoublyRobustScores s;
  s.estimand = "late";
  s.gamma.resize(n);

  std::vector<double> psi_y(n), psi_d(n);
  double compliance_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double zc = clip_propensity(z_hat[i]);
    if (zc != z_hat[i]) ++s.n_clipped_propensity;
    if (z[i] > 0.5) {
      psi_y[i] = (y[i] - my1[i]) / zc;
      psi_d[i] = (d[i] - md1[i]) / zc;
    } else {
      psi_y[i] = -(y[i] - my0[i]) / (1.0 - zc);
      psi_d[i] = -(d[i] - md0[i]) / (1.0 - zc);
    }
    compliance_sum += md1[i] - md0[i] + psi_d[i];
  }
  double mean_compliance = compliance_sum / static_cast<double>(n);
  if (mean_compliance < 0.05) {
    throw DataError("weak instrument: estimated mean compliance below 0.05");
  }
  s.mean_compliance = mean_compliance;
  for (std::size_t i = 0; i < n; ++i) {
    s.gamma[i] = tau_hat[i] + (psi_y[i] - tau_hat[i] * psi_d[i]) / mean_compliance;
    if (!std::isfinite(s.gamma[i])) throw DataError("non-finite doubly robust score");
  }
  finalize(s, frame);
  return s;
}

GateResult gate(const DoublyRobustScores& scores, const ObservationFrame& frame,
                std::span<const std::uint8_t> mask, const std::string& name) {
  std::size_t n = frame.n_rows();
  if (scores.gamma.size() != n || mask.size() != n)
    throw DataError("gate: length mismatch");
  std::vector<double> sub_scores;
  std::vector<std::int32_t> sub_clusters;
  const auto& clusters = frame.cluster_ids();
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) {
      sub_scores.push_back(scores.gamma[i]);
      sub_clusters.push_back(clusters[i]);
    }
  }
  if (sub_scores.empty()) throw DataError("gate: empty subgroup mask");
  MeanEstimate m = cluster_robust_mean(sub_scores, sub_clusters);
  GateResult g;
  g.name = name;
  g.gate = m.estimate;
  g.se = m.se;
  g.p_value = m.p_value;
  g.n = sub_scores.size();
  g.share = static_cast<double>(g.n) / static_cast<double>(n);
  return g;
}

std::vector<double> ite_quantiles(std::span<const double> values,
                                  std::span<const double> probs) {
  if (values.empty()) throw DataError("ite_quantiles: empty input");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::size_t n = sorted.size();
  std::vector<double> out;
  out.reserve(probs.size());
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("quantile probability outside [0, 1]");
    double h = p * static_cast<double>(n - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(h));
    std::size_t hi = std::min(lo + 1, n - 1);
    double frac = h - static_cast<double>(lo);
    out.push_back(sorted[lo] + frac * (sorted[hi] - sorted[lo]));
  }
  return out;
}

ProfileTable profile_groups(const ObservationFrame& frame,
                            std::span<const std::int32_t> rows_a,
                            std::span<const std::int32_t> rows_b,
                            const std::string& name_a, const std::string& name_b) {
  ProfileTable table;
  table.group_a = name_a;
  table.group_b = name_b;
  table.n_a = rows_a.size();
  table.n_b = rows_b.size();
  table.a_empty = rows_a.empty();
  table.b_empty = rows_b.empty();

  const auto& clusters = frame.cluster_ids();
  std::size_t n_stacked = rows_a.size() + rows_b.size();

  for (std::size_t j = 0; j < frame.n_covariates(); ++j) {
    if (frame.is_strata_dummy(j)) continue;
    const auto& x = frame.covariate(j);
    ProfileRow row;
    row.variable = frame.covariate_name(j);
    double sum_a = 0.0, sum_b = 0.0;
    for (std::int32_t i : rows_a) sum_a += x[static_cast<std::size_t>(i)];
    for (std::int32_t i : rows_b) sum_b += x[static_cast<std::size_t>(i)];
    row.mean_a = rows_a.empty() ? std::nan("") : sum_a / static_cast<double>(rows_a.size());
    row.mean_b = rows_b.empty() ? std::nan("") : sum_b / static_cast<double>(rows_b.size());
    row.difference = row.mean_b - row.mean_a;

    if (!rows_a.empty() && !rows_b.empty()) {
      // Difference test as a group-indicator regression with cluster SEs;
      // overlapping rows enter once per group and share their cluster.
      Eigen::MatrixXd design(n_stacked, 2);
      Eigen::VectorXd resp(n_stacked);
      std::vector<std::int32_t> cl(n_stacked);
      std::size_t r = 0;
      for (std::int32_t i : rows_a) {
        design(r, 0) = 1.0;
        design(r, 1) = 0.0;
        resp(r) = x[static_cast<std::size_t>(i)];
        cl[r] = clusters[static_cast<std::size_t>(i)];
        ++r;
      }
      for (std::int32_t i : rows_b) {
        design(r, 0) = 1.0;
        design(r, 1) = 1.0;
        resp(r) = x[static_cast<std::size_t>(i)];
        cl[r] = clusters[static_cast<std::size_t>(i)];
        ++r;
      }
      Eigen::VectorXd beta = (design.transpose() * design)
                                 .ldlt()
                                 .solve(design.transpose() * resp);
      Eigen::VectorXd resid = resp - design * beta;
      std::vector<double> se = cluster_robust_se(design, resid, cl);
      row.se = se[1];
      row.p_value = two_sided_p_value(row.difference, row.se);
    } else {
      row.se = std::nan("");
      row.p_value = std::nan("");
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

ProfileTable profile_by_effect_sign(const ObservationFrame& frame,
                                    std::span<const IteEstimate> estimates,
                                    bool significant_only) {
  if (estimates.size() != frame.n_rows())
    throw DataError("profile_by_effect_sign: estimate count mismatch");
  std::vector<std::int32_t> increased, decreased;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    if (significant_only && !estimates[i].sig10) continue;
    if (estimates[i].tau_hat > 0.0) {
      increased.push_back(static_cast<std::int32_t>(i));
    } else {
      decreased.push_back(static_cast<std::int32_t>(i));
    }
  }
  return profile_groups(frame, increased, decreased, "increased_use", "decreased_use");
}

HistogramSpec histogram_bins(std::span<const double> values,
                             std::span<const std::uint8_t> sig_flags, double trim) {
  if (values.empty()) throw DataError("histogram_bins: empty input");
  if (!sig_flags.empty() && sig_flags.size() != values.size())
    throw DataError("histogram_bins: flag length mismatch");

  std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

  std::size_t cut = static_cast<std::size_t>(std::floor(trim * static_cast<double>(n)));
  if (2 * cut >= n) cut = 0;
  std::size_t first = cut, last = n - cut;  // [first, last)
  std::size_t m = last - first;

  std::vector<double> trimmed(m);
  for (std::size_t i = 0; i < m; ++i) trimmed[i] = values[order[first + i]];

  HistogramSpec spec;
  spec.n_trimmed = m;
  double lo = trimmed.front();
  double hi = trimmed.back();

  static const double iqr_probs[] = {0.25, 0.75};
  std::vector<double> q = ite_quantiles(trimmed, iqr_probs);
  double iqr = q[1] - q[0];
  double width = 2.0 * iqr * std::pow(static_cast<double>(m), -1.0 / 3.0);

  std::size_t n_bins;
  if (width > 0.0 && hi > lo) {
    n_bins = static_cast<std::size_t>(std::ceil((hi - lo) / width));
  } else if (hi > lo) {
    spec.sturges_fallback = true;
    n_bins = static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(m)))) + 1;
    width = (hi - lo) / static_cast<double>(n_bins);
  } else {
    spec.sturges_fallback = width <= 0.0;
    n_bins = 1;
    width = 0.0;
  }
  if (n_bins == 0) n_bins = 1;

  spec.bin_width = width;
  spec.edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) {
    spec.edges[b] = lo + width * static_cast<double>(b);
  }
  spec.counts.assign(n_bins, 0);
  spec.sig_counts.assign(n_bins, 0);

  for (std::size_t i = 0; i < m; ++i) {
    std::size_t src = order[first + i];
    double v = trimmed[i];
    std::size_t b = 0;
    if (width > 0.0) {
      b = std::min(static_cast<std::size_t>((v - lo) / width), n_bins - 1);
    }
    ++spec.counts[b];
    if (!sig_flags.empty() && sig_flags[src]) ++spec.sig_counts[b];
  }
  return spec;
}

std::string histogram_to_json(const HistogramSpec& spec) {
  nlohmann::json j;
  j["edges"] = spec.edges;
  j["counts"] = spec.counts;
  j["sig_counts"] = spec.sig_counts;
  j["bin_width"] = spec.bin_width;
  j["n_trimmed"] = spec.n_trimmed;
  j["sturges_fallback"] = spec.sturges_fallback;
  return j.dump(2);
}

}  // namespace hte
