#pragma once

#include <span>
#include <string>
#include <vector>

#include "hte/forest.hpp"
#include "hte/frame.hpp"

namespace hte {

struct MomentSolution {
  double tau = 0.0;
  double mu = 0.0;
};

enum class SolveStatus { Ok, WeakInstrument, DegenerateInstrument };

struct SolveResult {
  SolveStatus status = SolveStatus::Ok;
  MomentSolution value;
  bool ok() const { return status == SolveStatus::Ok; }
};

// Solves sum_i alpha_i (y_i - mu - tau d_i) (1, z_i)' = 0. Weights are
// normalized internally; zero instrument variance reports Degenerate and a
// first-stage covariance below 1e-10 reports WeakInstrument.
SolveResult solve_local_moment(std::span<const double> alpha, std::span<const double> y,
                               std::span<const double> d, std::span<const double> z);
SolveResult solve_local_moment(const kernels::IvMoments& moments);

struct IvForestOptions {
  TreeParams tree;
  std::size_t nuisance_trees = 500;  // regression forests used for centering
  bool center = true;
  // Instrument propensity from the empirical rate in each randomization cell;
  // set to false to fit a regression forest on Z instead.
  bool strata_propensity = true;
};

struct IvForestModel {
  ForestModel forest;  // grown on the (optionally centered) y, d, z
  IvForestOptions options;
  std::vector<double> y_hat, d_hat, z_hat;              // per-row nuisance estimates
  std::vector<double> y_centered, d_centered, z_centered;  // grower inputs
  MomentSolution fallback;  // full-sample solve, used for weak-leaf fallbacks
  std::uint64_t frame_fingerprint = 0;
};

// Grows the instrumental forest: heterogeneity-targeted splits on per-node
// pseudo-outcomes after local centering. Fails when the first stage is
// degenerate (constant Z or zero Cov(D, Z)).
IvForestModel fit_iv_forest(const ObservationFrame& frame, const IvForestOptions& options);

struct IteEstimate {
  double tau_hat = 0.0;
  double variance = 0.0;
  double se = 0.0;
  double p_value = 1.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool sig05 = false;
  bool sig10 = false;
  bool weak_fallback = false;
};

// Fills significance fields from tau and variance (two-sided normal).
IteEstimate make_ite_estimate(double tau, double variance, bool weak_fallback = false);

// OOB predictions for every training row (bag-level out-of-bag).
std::vector<IteEstimate> predict_ite_rows(const IvForestModel& model,
                                          const ObservationFrame& frame);
// Predictions at external covariate points (all trees contribute).
std::vector<IteEstimate> predict_ite_points(const IvForestModel& model,
                                            const std::vector<std::vector<double>>& points);

// Point estimate and variance pieces for one point; used by the variance op.
struct PointPrediction {
  MomentSolution solution;
  double variance = 0.0;
  bool weak_fallback = false;
  std::size_t n_trees_used = 0;
  std::size_t n_bags_used = 0;
};
PointPrediction predict_point(const IvForestModel& model, const FeatureAt& features,
                              std::int32_t oob_unit /* -1 for external points */);

std::string iv_forest_to_json(const IvForestModel& model);
IvForestModel iv_forest_from_json(const std::string& text);
void save_iv_forest(const IvForestModel& model, const std::string& path);
IvForestModel load_iv_forest(const std::string& path);

// Per-stratum-cell empirical instrument rate, the design-based propensity.
std::vector<double> stratum_instrument_rates(const ObservationFrame& frame);

double clip_propensity(double z);  // clamps to [0.01, 0.99]

}  // namespace hte
