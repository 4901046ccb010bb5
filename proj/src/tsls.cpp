#include "hte/tsls.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "hte/inference.hpp"

namespace hte {

namespace {

// Strata dummies enter as controls with the first level of each stratum
// dropped (the intercept absorbs it). Dummy names are "column=level" so the
// stratum grouping is recovered from the prefix.
std::vector<std::size_t> control_columns(const ObservationFrame& frame) {
  std::vector<std::size_t> controls;
  std::string last_prefix;
  for (std::size_t j = 0; j < frame.n_covariates(); ++j) {
    if (!frame.is_strata_dummy(j)) continue;
    const std::string& name = frame.covariate_name(j);
    std::string prefix = name.substr(0, name.find('='));
    if (prefix != last_prefix) {
      last_prefix = prefix;  // first level of this stratum: reference category
      continue;
    }
    controls.push_back(j);
  }
  return controls;
}

bool column_varies(const std::vector<double>& x, std::span<const std::size_t> rows) {
  if (rows.empty()) return false;
  double first = x[rows[0]];
  for (std::size_t i : rows) {
    if (x[i] != first) return true;
  }
  return false;
}

TwoSlsFit fit_rows(const ObservationFrame& frame, const std::vector<std::size_t>& rows) {
  std::size_t n = rows.size();
  if (n == 0) throw DataError("2SLS: empty sample");

  std::vector<std::size_t> controls;
  TwoSlsFit fit;
  for (std::size_t j : control_columns(frame)) {
    if (column_varies(frame.covariate(j), rows)) {
      controls.push_back(j);
    } else {
      fit.dropped_controls.push_back(frame.covariate_name(j));
    }
  }
  std::size_t k = 2 + controls.size();  // treatment, intercept, controls
  if (n <= k) throw DataError("2SLS: more regressors than observations");

  Eigen::VectorXd y(n), d(n), z(n);
  Eigen::MatrixXd w(n, k);   // first stage design: [Z, 1, C]
  Eigen::MatrixXd xh(n, k);  // second stage design: [Dhat, 1, C]
  std::vector<std::int32_t> clusters(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t i = rows[r];
    y(r) = frame.outcome()[i];
    d(r) = frame.treatment()[i];
    z(r) = frame.instrument()[i];
    w(r, 0) = z(r);
    w(r, 1) = 1.0;
    for (std::size_t c = 0; c < controls.size(); ++c) {
      w(r, 2 + c) = frame.covariate(controls[c])[i];
    }
    clusters[r] = frame.cluster_ids()[i];
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> first_qr(w);
  if (first_qr.rank() < static_cast<Eigen::Index>(k)) {
    throw DataError("2SLS: rank-deficient first-stage design");
  }
  Eigen::VectorXd gamma = first_qr.solve(d);
  Eigen::VectorXd d_hat = w * gamma;
  Eigen::VectorXd first_resid = d - d_hat;

  // Cluster-robust F on the excluded instrument.
  {
    std::vector<double> se_first = cluster_robust_se(w, first_resid, clusters);
    double f = se_first[0] > 0.0 ? (gamma(0) / se_first[0]) * (gamma(0) / se_first[0]) : 0.0;
    fit.first_stage_f = f;
    if (!(f >= 1.0)) {
      throw DataError("2SLS: weak first stage (F < 1)");
    }
  }

  xh.col(0) = d_hat;
  xh.rightCols(k - 1) = w.rightCols(k - 1);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> second_qr(xh);
  if (second_qr.rank() < static_cast<Eigen::Index>(k)) {
    throw DataError("2SLS: rank-deficient second-stage design");
  }
  Eigen::VectorXd beta = second_qr.solve(y);

  // Structural residuals use the observed treatment, not its projection.
  Eigen::VectorXd structural = y - d * beta(0);
  for (std::size_t c = 0; c + 1 < k; ++c) {
    structural -= w.col(1 + c) * beta(1 + static_cast<Eigen::Index>(c));
  }

  std::vector<double> se = cluster_robust_se(xh, structural, clusters);

  fit.coefficient = beta(0);
  fit.se = se[0];
  fit.p_value = two_sided_p_value(fit.coefficient, fit.se);
  fit.n = n;
  {
    std::vector<std::int32_t> sorted(clusters);
    std::sort(sorted.begin(), sorted.end());
    fit.n_clusters = static_cast<std::size_t>(
        std::unique(sorted.begin(), sorted.end()) - sorted.begin());
  }
  fit.control_names.push_back("(intercept)");
  fit.control_coefficients.push_back(beta(1));
  for (std::size_t c = 0; c < controls.size(); ++c) {
    fit.control_names.push_back(frame.covariate_name(controls[c]));
    fit.control_coefficients.push_back(beta(2 + static_cast<Eigen::Index>(c)));
  }
  return fit;
}

}  // namespace

TwoSlsFit fit_2sls(const ObservationFrame& frame) {
  std::vector<std::size_t> rows(frame.n_rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return fit_rows(frame, rows);
}

TwoSlsFit fit_2sls_subgroup(const ObservationFrame& frame,
                            std::span<const std::uint8_t> mask) {
  if (mask.size() != frame.n_rows()) throw DataError("2SLS: mask length mismatch");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) rows.push_back(i);
  }
  if (rows.empty()) throw DataError("2SLS: empty subgroup");
  return fit_rows(frame, rows);
}

}  // namespace hte
