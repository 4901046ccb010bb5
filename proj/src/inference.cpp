#include "hte/inference.hpp"

#include <cmath>
#include <map>

#include "json.hpp"

namespace hte {

double little_bags_variance(const IvForestModel& model, std::span<const double> test_point) {
  if (model.forest.params.bag_size < 2) {
    throw DataError(
        "forest grown without bag structure; refit with bag_size >= 2 to "
        "estimate variances");
  }
  if (test_point.size() != model.forest.n_features())
    throw DataError("test vector length does not match feature count");
  PointPrediction p = predict_point(model, point_features(test_point), -1);
  return p.variance;
}

SignificanceShares classify_significance(std::span<const IteEstimate> estimates,
                                         double level) {
  SignificanceShares s;
  s.level = level;
  s.n = estimates.size();
  if (estimates.empty()) return s;
  std::size_t pos = 0, neg = 0;
  for (const auto& e : estimates) {
    if (e.p_value < level) {
      if (e.tau_hat > 0) ++pos;
      else ++neg;
    }
  }
  s.share_positive_sig = static_cast<double>(pos) / static_cast<double>(s.n);
  s.share_negative_sig = static_cast<double>(neg) / static_cast<double>(s.n);
  s.share_null = 1.0 - s.share_positive_sig - s.share_negative_sig;
  return s;
}

std::string significance_summary_json(std::span<const IteEstimate> estimates,
                                      std::span<const double> levels) {
  nlohmann::json out = nlohmann::json::array();
  for (double level : levels) {
    SignificanceShares s = classify_significance(estimates, level);
    out.push_back({{"level", s.level},
                   {"share_positive_sig", s.share_positive_sig},
                   {"share_negative_sig", s.share_negative_sig},
                   {"share_null", s.share_null},
                   {"n", s.n}});
  }
  return out.dump(2);
}

double two_sided_p_value(double estimate, double se) {
  if (!(se > 0.0)) return estimate == 0.0 ? 1.0 : 0.0;
  return std::erfc(std::abs(estimate) / se / M_SQRT2);
}

double normal_quantile_975() { return 1.959963984540054; }

MeanEstimate cluster_robust_mean(std::span<const double> scores,
                                 std::span<const std::int32_t> clusters) {
  MeanEstimate out;
  std::size_t n = scores.size();
  if (n == 0) throw DataError("cluster_robust_mean: empty scores");
  if (clusters.size() != n) throw DataError("cluster_robust_mean: length mismatch");
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(n);

  std::map<std::int32_t, double> cluster_sums;
  for (std::size_t i = 0; i < n; ++i) {
    cluster_sums[clusters[i]] += scores[i] - mean;
  }
  double meat = 0.0;
  for (const auto& [c, s] : cluster_sums) meat += s * s;
  out.estimate = mean;
  out.n = n;
  out.n_clusters = cluster_sums.size();
  out.se = std::sqrt(meat) / static_cast<double>(n);
  out.p_value = two_sided_p_value(mean, out.se);
  return out;
}

Eigen::MatrixXd cluster_robust_vcov(const Eigen::MatrixXd& design,
                                    const Eigen::VectorXd& residuals,
                                    std::span<const std::int32_t> clusters) {
  Eigen::Index n = design.rows();
  Eigen::Index k = design.cols();
  if (residuals.size() != n) throw DataError("cluster_robust_vcov: length mismatch");
  if (static_cast<Eigen::Index>(clusters.size()) != n)
    throw DataError("cluster_robust_vcov: cluster length mismatch");

  std::map<std::int32_t, Eigen::VectorXd> sums;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto [it, inserted] = sums.try_emplace(clusters[static_cast<std::size_t>(i)],
                                           Eigen::VectorXd::Zero(k));
    it->second.noalias() += design.row(i).transpose() * residuals(i);
  }
  if (static_cast<Eigen::Index>(sums.size()) < k) {
    throw DataError("fewer clusters than regressors");
  }
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
  for (const auto& [c, s] : sums) meat.noalias() += s * s.transpose();

  Eigen::MatrixXd xtx = design.transpose() * design;
  Eigen::MatrixXd bread = xtx.ldlt().solve(Eigen::MatrixXd::Identity(k, k));
  return bread * meat * bread;
}

std::vector<double> cluster_robust_se(const Eigen::MatrixXd& design,
                                      const Eigen::VectorXd& residuals,
                                      std::span<const std::int32_t> clusters) {
  Eigen::MatrixXd v = cluster_robust_vcov(design, residuals, clusters);
  std::vector<double> se(static_cast<std::size_t>(v.rows()));
  for (Eigen::Index j = 0; j < v.rows(); ++j) {
    se[static_cast<std::size_t>(j)] = std::sqrt(std::max(v(j, j), 0.0));
  }
  return se;
}

}  // namespace hte
