#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hte {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raw CSV contents, column-major. Missing cells (empty or "NA") are NaN.
struct DataTable {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
  // Unit ids are kept as text so arbitrary identifiers survive round-trips.
  std::vector<std::string> raw_ids;  // empty unless an id column was requested

  std::size_t n_rows() const { return columns.empty() ? 0 : columns[0].size(); }
  int column_index(const std::string& name) const;
  const std::vector<double>& column(const std::string& name) const;
  bool has_column(const std::string& name) const;
};

DataTable read_csv(const std::string& path);
// Keeps one column as verbatim text (unit identifiers) instead of parsing it.
DataTable read_csv_with_ids(const std::string& path, const std::string& id_column);
void write_csv(const std::string& path, const DataTable& table);

struct ColumnSchema {
  std::string unit_id;     // optional
  std::string cluster;     // optional; default: every row its own cluster
  std::string outcome;
  std::string treatment;   // optional for ITT-only analyses
  std::string instrument;
  std::vector<std::string> covariates;
  std::vector<std::string> strata;  // categorical controls, one-hot appended to X
  std::string weights;     // optional

  static ColumnSchema from_json_file(const std::string& path);
  static ColumnSchema from_json_text(const std::string& text);
};

struct DropReport {
  std::size_t rows_in = 0;
  std::size_t rows_kept = 0;
  std::map<std::string, std::size_t> drop_reasons;
  std::string to_json() const;
};

// The analysis dataset. Immutable once built; row order matches the input.
class ObservationFrame {
 public:
  std::size_t n_rows() const { return y_.size(); }
  std::size_t n_covariates() const { return covariates_.size(); }

  const std::vector<double>& outcome() const { return y_; }
  const std::vector<double>& treatment() const { return d_; }
  const std::vector<double>& instrument() const { return z_; }
  const std::vector<double>& weights() const { return weights_; }
  bool has_treatment() const { return has_treatment_; }

  const std::vector<double>& covariate(std::size_t j) const { return covariates_[j]; }
  const std::string& covariate_name(std::size_t j) const { return covariate_names_[j]; }
  bool is_strata_dummy(std::size_t j) const { return strata_dummy_[j] != 0; }
  int covariate_index(const std::string& name) const;

  const std::vector<std::int32_t>& cluster_ids() const { return cluster_; }
  std::size_t n_clusters() const { return n_clusters_; }

  // Joint randomization-stratum cell per row (all strata columns crossed).
  const std::vector<std::int32_t>& stratum_cells() const { return stratum_cell_; }
  std::size_t n_stratum_cells() const { return n_cells_; }

  const std::vector<std::string>& unit_ids() const { return unit_ids_; }

  std::uint64_t fingerprint() const;

  struct Builder {
    std::vector<double> y, d, z, weights;
    std::vector<std::vector<double>> covariates;
    std::vector<std::string> covariate_names;
    std::vector<std::uint8_t> strata_dummy;  // parallel to covariates; may be empty
    std::vector<std::int32_t> cluster;       // arbitrary ids, remapped to [0, n_c)
    std::vector<std::int32_t> stratum_cell;  // may be empty -> single cell
    std::vector<std::string> unit_ids;       // may be empty -> row index
    bool has_treatment = true;

    ObservationFrame build() const;
  };

 private:
  friend struct Builder;
  std::vector<double> y_, d_, z_, weights_;
  std::vector<std::vector<double>> covariates_;
  std::vector<std::string> covariate_names_;
  std::vector<std::uint8_t> strata_dummy_;
  std::vector<std::int32_t> cluster_;
  std::size_t n_clusters_ = 0;
  std::vector<std::int32_t> stratum_cell_;
  std::size_t n_cells_ = 1;
  std::vector<std::string> unit_ids_;
  bool has_treatment_ = true;
};

struct FrameLoadResult {
  ObservationFrame frame;
  DropReport report;
};

// Complete-case ingestion: retains rows with no missing value in outcome,
// treatment, instrument, covariates, or strata. Validates binary D and Z.
FrameLoadResult build_frame(const DataTable& table, const ColumnSchema& schema);
FrameLoadResult load_csv(const std::string& path, const ColumnSchema& schema);

// Binary visit-type construction from per-type probability sums and totals.
// With k observed visits the top-k positive-mass types are flagged; four or
// more visits flag every type with positive mass. Ties resolve to the lowest
// type index.
struct VisitTypeIndicators {
  std::vector<std::vector<double>> indicators;  // [4][n], values 0/1
};
VisitTypeIndicators derive_binary_visit_types(
    const std::vector<std::vector<double>>& type_sums,
    const std::vector<double>& n_visits);

// Predicate on one covariate column. Lt and Ne exist so that every spec has
// an exact complement; configs normally use the ==, >=, <=, > forms.
struct SubgroupSpec {
  enum class Op { Eq, Ge, Le, Gt, Lt, Ne };
  std::string name;
  std::string column;
  Op op = Op::Ge;
  double threshold = 0.0;

  static Op parse_op(const std::string& text);
  std::string op_text() const;
  SubgroupSpec negated() const;
};

std::vector<std::uint8_t> subgroup_mask(const ObservationFrame& frame,
                                        const SubgroupSpec& spec);

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace hte
