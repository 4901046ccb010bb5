#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "hte/frame.hpp"
#include "hte/iv_forest.hpp"

namespace hte {

struct LittleBagsConfig {
  std::size_t bag_size = 4;  // trees per bag; >= 2 for a nonzero correction
};

// Forest-prediction variance at a covariate point via the bootstrap of little
// bags. Requires the forest to have been grown with bag_size >= 2.
double little_bags_variance(const IvForestModel& model, std::span<const double> test_point);

// Two-sided z-test summary over a set of estimates at one level.
struct SignificanceShares {
  double level = 0.0;
  double share_positive_sig = 0.0;
  double share_negative_sig = 0.0;
  double share_null = 1.0;
  std::size_t n = 0;
};
SignificanceShares classify_significance(std::span<const IteEstimate> estimates,
                                         double level);
std::string significance_summary_json(std::span<const IteEstimate> estimates,
                                      std::span<const double> levels);

// Normal-approximation helpers shared by the aggregation and 2SLS modules.
double two_sided_p_value(double estimate, double se);
double normal_quantile_975();

// Cluster-robust standard error of a mean: sandwich over cluster-summed
// centered scores.
struct MeanEstimate {
  double estimate = 0.0;
  double se = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  std::size_t n_clusters = 0;
};
MeanEstimate cluster_robust_mean(std::span<const double> scores,
                                 std::span<const std::int32_t> clusters);

// Sandwich covariance for a fitted linear system: bread from the (possibly
// instrumented) design, meat from cluster-summed score outer products.
// Singleton clusters reproduce HC0.
Eigen::MatrixXd cluster_robust_vcov(const Eigen::MatrixXd& design,
                                    const Eigen::VectorXd& residuals,
                                    std::span<const std::int32_t> clusters);
std::vector<double> cluster_robust_se(const Eigen::MatrixXd& design,
                                      const Eigen::VectorXd& residuals,
                                      std::span<const std::int32_t> clusters);

}  // namespace hte
