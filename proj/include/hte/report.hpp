#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hte/aggregate.hpp"
#include "hte/iv_forest.hpp"
#include "hte/tsls.hpp"

namespace hte {

// One effect-estimate row in the shared table schema (GRF and linear
// estimates use the same layout so comparisons are a join).
struct EstimateRow {
  std::string outcome;
  std::string group;  // "ALL" for overall rows
  std::string method; // "grf" or "linear"
  double estimate = 0.0;
  double se = 0.0;
  double p_value = 1.0;
  double share = 1.0;
  std::size_t n = 0;
};

void write_estimates_csv(const std::string& path, std::span<const EstimateRow> rows);
std::string estimates_to_json(std::span<const EstimateRow> rows);

struct QuantileRow {
  std::string outcome;
  double estimate = 0.0;  // mean effect column
  std::vector<double> quantiles;  // min, 25%, 50%, 75%, max
};
void write_quantiles_csv(const std::string& path, std::span<const QuantileRow> rows);

void write_ite_csv(const std::string& path, std::span<const std::string> unit_ids,
                   std::span<const IteEstimate> estimates);

void write_varimp_csv(const std::string& path, std::span<const std::string> names,
                      std::span<const double> scores);

void write_profile_csv(const std::string& path, const ProfileTable& table);

void write_text_file(const std::string& path, const std::string& text);

std::uint64_t file_fnv1a64(const std::string& path);

struct ManifestEntry {
  std::string path;   // relative to the output directory
  std::uint64_t bytes = 0;
  std::uint64_t hash = 0;
};

// Deterministic run manifest: sorted entries with content hashes.
std::string manifest_json(std::span<const ManifestEntry> entries, std::uint64_t seed);
ManifestEntry manifest_entry(const std::string& directory, const std::string& relative);

}  // namespace hte
