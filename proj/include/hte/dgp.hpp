#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hte/frame.hpp"
#include "hte/policy.hpp"

namespace hte {

// Synthetic design with known ground truth. Outcomes follow
// Y = mu(X) + tau(X) D + eps with unit-level compliance types and a
// cluster-level lottery instrument assigned exactly per stratum.
struct DgpSpec {
  std::size_t n = 10000;
  std::size_t p = 4;
  std::string tau_kind = "step";  // "constant" | "step" | "two_feature"
  double tau_value = 0.5;
  double share_always = 0.0;
  double share_never = 0.6;
  double share_complier = 0.4;
  std::string noise = "gauss";  // "gauss" | "t4"
  double noise_scale = 1.0;
  double baseline_effect = 0.5;   // mu(x) = baseline_effect * x2
  std::size_t max_cluster_size = 1;
  std::size_t n_strata = 2;
  std::vector<double> instrument_rates;  // per stratum, default 0.5
  std::uint64_t seed = 1;

  void validate() const;
};

struct GroundTruth {
  std::vector<double> tau;                  // per unit
  std::vector<std::int8_t> compliance;      // 0 never, 1 complier, 2 always
  double late = 0.0;                        // population LATE
  double itt = 0.0;                         // LATE * complier share
  std::string to_json() const;
};

struct DgpResult {
  ObservationFrame frame;
  DataTable table;  // same schema as CSV ingestion
  ColumnSchema schema;
  GroundTruth truth;
};

DgpResult generate(const DgpSpec& spec);

// Exhaustive policy-search oracle for small instances (n <= 500, at most 4
// features, depth <= 2). Enumerates every root/child split and action
// assignment directly; the winning configuration is re-evaluated with the
// shared canonical objective.
double brute_force_policy_oracle(const ObservationFrame& frame,
                                 std::span<const double> rewards,
                                 std::span<const std::int32_t> allowed_features,
                                 std::size_t depth);

}  // namespace hte
