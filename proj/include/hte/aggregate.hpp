#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hte/frame.hpp"
#include "hte/iv_forest.hpp"

namespace hte {

// Per-unit AIPW scores. The reported point estimate is exactly the mean of
// gamma; the SE is the cluster-robust SE of that mean.
struct DoublyRobustScores {
  std::vector<double> gamma;
  std::string estimand;  // "itt" or "late"
  double estimate = 0.0;
  double se = 0.0;
  double p_value = 1.0;
  double mean_compliance = 1.0;  // AIPW first-stage estimate (LATE only)
  std::size_t n_clipped_propensity = 0;
};

// ITT scores from outcome regressions under both instrument arms and the
// instrument propensity. All nuisances are supplied by the caller so that
// corrupted-nuisance robustness checks can hit this code path directly.
DoublyRobustScores compute_dr_scores_itt(const ObservationFrame& frame,
                                         std::span<const double> m1,
                                         std::span<const double> m0,
                                         std::span<const double> z_hat);

// LATE scores: tau_hat plus the residualized ITT score corrected by the
// compliance score, scaled by the mean compliance.
DoublyRobustScores compute_dr_scores_late(const ObservationFrame& frame,
                                          std::span<const double> tau_hat,
                                          std::span<const double> my1,
                                          std::span<const double> my0,
                                          std::span<const double> md1,
                                          std::span<const double> md0,
                                          std::span<const double> z_hat);

struct GateResult {
  std::string name;
  double gate = 0.0;
  double se = 0.0;
  double p_value = 1.0;
  double share = 0.0;  // subgroup share of N
  std::size_t n = 0;
};

GateResult gate(const DoublyRobustScores& scores, const ObservationFrame& frame,
                std::span<const std::uint8_t> mask, const std::string& name);

// Empirical quantiles with linear interpolation; min and max are exact.
std::vector<double> ite_quantiles(std::span<const double> values,
                                  std::span<const double> probs);
inline std::vector<double> ite_quantiles(std::span<const double> values) {
  static const double kDefault[] = {0.0, 0.25, 0.5, 0.75, 1.0};
  return ite_quantiles(values, kDefault);
}

struct ProfileRow {
  std::string variable;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double difference = 0.0;  // mean_b - mean_a
  double se = 0.0;
  double p_value = 1.0;
};

struct ProfileTable {
  std::string group_a, group_b;
  std::size_t n_a = 0, n_b = 0;
  bool a_empty = false, b_empty = false;
  std::vector<ProfileRow> rows;
};

// Covariate means for two (possibly overlapping) row sets with
// cluster-robust difference tests. Strata dummies are skipped.
ProfileTable profile_groups(const ObservationFrame& frame,
                            std::span<const std::int32_t> rows_a,
                            std::span<const std::int32_t> rows_b,
                            const std::string& name_a, const std::string& name_b);

// Splits rows into tau > 0 (increased use) vs tau <= 0 (decreased);
// significant_only keeps rows significant at the 10% level first.
ProfileTable profile_by_effect_sign(const ObservationFrame& frame,
                                    std::span<const IteEstimate> estimates,
                                    bool significant_only = false);

struct HistogramSpec {
  std::vector<double> edges;       // nbins + 1
  std::vector<std::int64_t> counts;
  std::vector<std::int64_t> sig_counts;  // subcounts of flagged values
  double bin_width = 0.0;
  std::size_t n_trimmed = 0;       // values retained after tail trimming
  bool sturges_fallback = false;
};

// Freedman-Diaconis histogram of the central [trim, 1-trim] range; flags mark
// values counted into sig_counts (pass empty for none). Zero IQR falls back
// to Sturges bin counts.
HistogramSpec histogram_bins(std::span<const double> values,
                             std::span<const std::uint8_t> sig_flags = {},
                             double trim = 0.005);

std::string histogram_to_json(const HistogramSpec& spec);

}  // namespace hte
