#pragma once

#include <span>
#include <string>
#include <vector>

#include "hte/frame.hpp"

namespace hte {

struct TwoSlsFit {
  double coefficient = 0.0;  // on the endogenous treatment
  double se = 0.0;
  double p_value = 1.0;
  double first_stage_f = 0.0;
  std::size_t n = 0;
  std::size_t n_clusters = 0;
  std::vector<std::string> control_names;     // intercept + retained controls
  std::vector<double> control_coefficients;
  std::vector<std::string> dropped_controls;  // constant within the fit sample
};

// Two-stage least squares of the outcome on treatment, instrumented by the
// frame's instrument, with an intercept and the strata dummies (first level
// of each stratum dropped) as controls. Cluster-robust standard errors at the
// household level.
TwoSlsFit fit_2sls(const ObservationFrame& frame);

TwoSlsFit fit_2sls_subgroup(const ObservationFrame& frame,
                            std::span<const std::uint8_t> mask);

}  // namespace hte
