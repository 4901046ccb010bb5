#include "hte/frame.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace hte {

namespace {

bool is_missing_token(const std::string& s) { return s.empty() || s == "NA"; }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
  if (is_missing_token(cell)) return std::nan("");
  double value = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw DataError("unparseable numeric cell '" + cell + "' in column '" + col +
                    "', data row " + std::to_string(row + 1));
  }
  return value;
}

std::string format_level(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

int DataTable::column_index(const std::string& name) const {
  for (std::size_t j = 0; j < names.size(); ++j) {
    if (names[j] == name) return static_cast<int>(j);
  }
  return -1;
}

bool DataTable::has_column(const std::string& name) const {
  return column_index(name) >= 0;
}

const std::vector<double>& DataTable::column(const std::string& name) const {
  int j = column_index(name);
  if (j < 0) throw DataError("missing required column '" + name + "'");
  return columns[static_cast<std::size_t>(j)];
}

DataTable read_csv(const std::string& path) { return read_csv_with_ids(path, ""); }

DataTable read_csv_with_ids(const std::string& path, const std::string& id_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file: " + path);
  std::vector<std::string> header = split_csv_line(line);

  DataTable table;
  int id_index = -1;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (!id_column.empty() && header[j] == id_column) {
      id_index = static_cast<int>(j);
    } else {
      table.names.push_back(header[j]);
    }
  }
  table.columns.assign(table.names.size(), {});

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError("row " + std::to_string(row + 1) + " has " +
                      std::to_string(cells.size()) + " fields, expected " +
                      std::to_string(header.size()));
    }
    std::size_t out_j = 0;
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (static_cast<int>(j) == id_index) {
        table.raw_ids.push_back(cells[j]);
      } else {
        table.columns[out_j].push_back(parse_cell(cells[j], row, header[j]));
        ++out_j;
      }
    }
    ++row;
  }
  return table;
}

void write_csv(const std::string& path, const DataTable& table) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  bool with_ids = !table.raw_ids.empty();
  if (with_ids) out << "unit_id,";
  for (std::size_t j = 0; j < table.names.size(); ++j) {
    out << table.names[j] << (j + 1 < table.names.size() ? "," : "");
  }
  out << "\n";
  out.precision(17);
  for (std::size_t i = 0; i < table.n_rows(); ++i) {
    if (with_ids) out << table.raw_ids[i] << ",";
    for (std::size_t j = 0; j < table.columns.size(); ++j) {
      double v = table.columns[j][i];
      if (std::isnan(v)) {
        out << "NA";
      } else {
        out << v;
      }
      if (j + 1 < table.columns.size()) out << ",";
    }
    out << "\n";
  }
}

ColumnSchema ColumnSchema::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ColumnSchema s;
  s.unit_id = j.value("unit_id", "");
  s.cluster = j.value("cluster", "");
  s.outcome = j.value("outcome", "");
  s.treatment = j.value("treatment", "");
  s.instrument = j.value("instrument", "");
  s.weights = j.value("weights", "");
  if (j.contains("covariates")) {
    s.covariates = j["covariates"].get<std::vector<std::string>>();
  }
  if (j.contains("strata")) {
    s.strata = j["strata"].get<std::vector<std::string>>();
  }
  return s;
}

ColumnSchema ColumnSchema::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string DropReport::to_json() const {
  nlohmann::json j;
  j["rows_in"] = rows_in;
  j["rows_kept"] = rows_kept;
  j["drop_reasons"] = drop_reasons;
  return j.dump(2);
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

int ObservationFrame::covariate_index(const std::string& name) const {
  for (std::size_t j = 0; j < covariate_names_.size(); ++j) {
    if (covariate_names_[j] == name) return static_cast<int>(j);
  }
  return -1;
}

std::uint64_t ObservationFrame::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_vec = [&h](const std::vector<double>& v) {
    h = fnv1a64(v.data(), v.size() * sizeof(double), h);
  };
  std::uint64_t n = n_rows();
  std::uint64_t p = n_covariates();
  h = fnv1a64(&n, sizeof(n), h);
  h = fnv1a64(&p, sizeof(p), h);
  mix_vec(y_);
  mix_vec(d_);
  mix_vec(z_);
  mix_vec(weights_);
  for (std::size_t j = 0; j < covariates_.size(); ++j) {
    h = fnv1a64(covariate_names_[j].data(), covariate_names_[j].size(), h);
    mix_vec(covariates_[j]);
  }
  h = fnv1a64(cluster_.data(), cluster_.size() * sizeof(std::int32_t), h);
  h = fnv1a64(stratum_cell_.data(), stratum_cell_.size() * sizeof(std::int32_t), h);
  return h;
}

ObservationFrame ObservationFrame::Builder::build() const {
  ObservationFrame f;
  std::size_t n = y.size();
  if (z.size() != n) throw DataError("instrument length mismatch");
  f.y_ = y;
  f.z_ = z;
  f.has_treatment_ = has_treatment;
  if (has_treatment) {
    if (d.size() != n) throw DataError("treatment length mismatch");
    f.d_ = d;
  } else {
    // ITT analyses act on the instrument directly.
    f.d_ = z;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (f.d_[i] != 0.0 && f.d_[i] != 1.0)
      throw DataError("non-binary treatment value at row " + std::to_string(i + 1));
    if (f.z_[i] != 0.0 && f.z_[i] != 1.0)
      throw DataError("non-binary instrument value at row " + std::to_string(i + 1));
  }

  f.covariates_ = covariates;
  f.covariate_names_ = covariate_names;
  if (f.covariate_names_.size() != f.covariates_.size())
    throw DataError("covariate name/column count mismatch");
  for (const auto& col : f.covariates_) {
    if (col.size() != n) throw DataError("covariate length mismatch");
  }
  {
    std::set<std::string> seen;
    for (const auto& name : f.covariate_names_) {
      if (!seen.insert(name).second) throw DataError("duplicate column name: " + name);
    }
  }
  f.strata_dummy_ = strata_dummy;
  f.strata_dummy_.resize(f.covariates_.size(), 0);

  if (weights.empty()) {
    f.weights_.assign(n, 1.0);
  } else {
    if (weights.size() != n) throw DataError("weights length mismatch");
    for (double w : weights) {
      if (!(w >= 0.0)) throw DataError("weights must be nonnegative");
    }
    f.weights_ = weights;
  }

  if (cluster.empty()) {
    f.cluster_.resize(n);
    for (std::size_t i = 0; i < n; ++i) f.cluster_[i] = static_cast<std::int32_t>(i);
    f.n_clusters_ = n;
  } else {
    if (cluster.size() != n) throw DataError("cluster length mismatch");
    std::map<std::int32_t, std::int32_t> remap;
    f.cluster_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto [it, inserted] = remap.emplace(cluster[i], static_cast<std::int32_t>(remap.size()));
      f.cluster_[i] = it->second;
    }
    f.n_clusters_ = remap.size();
  }

  if (stratum_cell.empty()) {
    f.stratum_cell_.assign(n, 0);
    f.n_cells_ = 1;
  } else {
    if (stratum_cell.size() != n) throw DataError("stratum cell length mismatch");
    std::map<std::int32_t, std::int32_t> remap;
    f.stratum_cell_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto [it, inserted] =
          remap.emplace(stratum_cell[i], static_cast<std::int32_t>(remap.size()));
      f.stratum_cell_[i] = it->second;
    }
    f.n_cells_ = remap.size();
  }

  if (unit_ids.empty()) {
    f.unit_ids_.resize(n);
    for (std::size_t i = 0; i < n; ++i) f.unit_ids_[i] = std::to_string(i);
  } else {
    if (unit_ids.size() != n) throw DataError("unit id length mismatch");
    f.unit_ids_ = unit_ids;
  }
  return f;
}

FrameLoadResult build_frame(const DataTable& table, const ColumnSchema& schema) {
  if (schema.outcome.empty()) throw DataError("schema: outcome column not named");
  if (schema.instrument.empty()) throw DataError("schema: instrument column not named");

  const std::vector<double>& y = table.column(schema.outcome);
  const std::vector<double>& z = table.column(schema.instrument);
  const std::vector<double>* d = nullptr;
  if (!schema.treatment.empty()) d = &table.column(schema.treatment);
  const std::vector<double>* w = nullptr;
  if (!schema.weights.empty()) w = &table.column(schema.weights);
  const std::vector<double>* cl = nullptr;
  if (!schema.cluster.empty()) cl = &table.column(schema.cluster);

  std::vector<const std::vector<double>*> xcols;
  for (const auto& name : schema.covariates) xcols.push_back(&table.column(name));
  std::vector<const std::vector<double>*> scols;
  for (const auto& name : schema.strata) scols.push_back(&table.column(name));

  std::size_t n_in = table.n_rows();
  DropReport report;
  report.rows_in = n_in;

  std::vector<std::size_t> keep;
  keep.reserve(n_in);
  for (std::size_t i = 0; i < n_in; ++i) {
    const char* reason = nullptr;
    if (std::isnan(y[i])) reason = "missing_outcome";
    else if (d && std::isnan((*d)[i])) reason = "missing_treatment";
    else if (std::isnan(z[i])) reason = "missing_instrument";
    if (!reason) {
      for (const auto* col : xcols) {
        if (std::isnan((*col)[i])) { reason = "missing_covariate"; break; }
      }
    }
    if (!reason) {
      for (const auto* col : scols) {
        if (std::isnan((*col)[i])) { reason = "missing_strata"; break; }
      }
    }
    if (reason) {
      ++report.drop_reasons[reason];
    } else {
      keep.push_back(i);
    }
  }
  report.rows_kept = keep.size();

  ObservationFrame::Builder b;
  b.has_treatment = (d != nullptr);
  b.y.reserve(keep.size());
  for (std::size_t i : keep) b.y.push_back(y[i]);
  for (std::size_t i : keep) b.z.push_back(z[i]);
  if (d) for (std::size_t i : keep) b.d.push_back((*d)[i]);
  if (w) {
    for (std::size_t i : keep) {
      double wi = (*w)[i];
      b.weights.push_back(std::isnan(wi) ? 1.0 : wi);
    }
  }
  if (cl) {
    std::int32_t next_singleton = 1 << 30;
    for (std::size_t i : keep) {
      double c = (*cl)[i];
      b.cluster.push_back(std::isnan(c) ? next_singleton++ : static_cast<std::int32_t>(c));
    }
  }
  if (!table.raw_ids.empty()) {
    for (std::size_t i : keep) b.unit_ids.push_back(table.raw_ids[i]);
  }

  for (std::size_t j = 0; j < xcols.size(); ++j) {
    std::vector<double> col;
    col.reserve(keep.size());
    for (std::size_t i : keep) col.push_back((*xcols[j])[i]);
    b.covariates.push_back(std::move(col));
    b.covariate_names.push_back(schema.covariates[j]);
    b.strata_dummy.push_back(0);
  }

  // Strata become one-hot columns appended to X (flagged), and define the
  // joint randomization cell used for the design-based instrument propensity.
  if (!scols.empty()) {
    std::vector<std::vector<double>> level_values(scols.size());
    std::vector<std::vector<std::int32_t>> level_index(scols.size());
    for (std::size_t s = 0; s < scols.size(); ++s) {
      std::vector<double> values;
      for (std::size_t i : keep) values.push_back((*scols[s])[i]);
      std::vector<double> sorted = values;
      std::sort(sorted.begin(), sorted.end());
      sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
      level_values[s] = sorted;
      level_index[s].resize(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        auto it = std::lower_bound(sorted.begin(), sorted.end(), values[i]);
        level_index[s][i] = static_cast<std::int32_t>(it - sorted.begin());
      }
      for (std::size_t lvl = 0; lvl < sorted.size(); ++lvl) {
        std::vector<double> dummy(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
          dummy[i] = level_index[s][i] == static_cast<std::int32_t>(lvl) ? 1.0 : 0.0;
        }
        b.covariates.push_back(std::move(dummy));
        b.covariate_names.push_back(schema.strata[s] + "=" + format_level(sorted[lvl]));
        b.strata_dummy.push_back(1);
      }
    }
    b.stratum_cell.resize(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) {
      std::int32_t code = 0;
      for (std::size_t s = 0; s < scols.size(); ++s) {
        code = code * static_cast<std::int32_t>(level_values[s].size()) + level_index[s][i];
      }
      b.stratum_cell[i] = code;
    }
  }

  FrameLoadResult result{b.build(), report};
  return result;
}

FrameLoadResult load_csv(const std::string& path, const ColumnSchema& schema) {
  DataTable table = read_csv_with_ids(path, schema.unit_id);
  return build_frame(table, schema);
}

VisitTypeIndicators derive_binary_visit_types(
    const std::vector<std::vector<double>>& type_sums,
    const std::vector<double>& n_visits) {
  constexpr std::size_t kTypes = 4;
  if (type_sums.size() != kTypes) throw DataError("expected four visit-type columns");
  std::size_t n = n_visits.size();
  for (const auto& col : type_sums) {
    if (col.size() != n) throw DataError("visit-type column length mismatch");
  }
  VisitTypeIndicators out;
  out.indicators.assign(kTypes, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    double total = n_visits[i];
    if (total < 0) throw DataError("negative visit count at row " + std::to_string(i + 1));
    double sums[kTypes];
    for (std::size_t k = 0; k < kTypes; ++k) {
      sums[k] = type_sums[k][i];
      if (sums[k] < 0) {
        throw DataError("negative visit-type sum at row " + std::to_string(i + 1));
      }
    }
    if (total <= 0) continue;
    if (total >= 4) {
      for (std::size_t k = 0; k < kTypes; ++k) {
        if (sums[k] > 0) out.indicators[k][i] = 1.0;
      }
      continue;
    }
    // 1-3 visits: flag the top-k positive-mass types, lowest index on ties.
    std::size_t k_visits = static_cast<std::size_t>(total);
    std::size_t order[kTypes] = {0, 1, 2, 3};
    std::stable_sort(order, order + kTypes,
                     [&](std::size_t a, std::size_t c) { return sums[a] > sums[c]; });
    for (std::size_t r = 0; r < k_visits && r < kTypes; ++r) {
      if (sums[order[r]] > 0) out.indicators[order[r]][i] = 1.0;
    }
  }
  return out;
}

SubgroupSpec::Op SubgroupSpec::parse_op(const std::string& text) {
  if (text == "==") return Op::Eq;
  if (text == ">=") return Op::Ge;
  if (text == "<=") return Op::Le;
  if (text == ">") return Op::Gt;
  if (text == "<") return Op::Lt;
  if (text == "!=") return Op::Ne;
  throw DataError("unknown subgroup operator: " + text);
}

std::string SubgroupSpec::op_text() const {
  switch (op) {
    case Op::Eq: return "==";
    case Op::Ge: return ">=";
    case Op::Le: return "<=";
    case Op::Gt: return ">";
    case Op::Lt: return "<";
    case Op::Ne: return "!=";
  }
  return "?";
}

SubgroupSpec SubgroupSpec::negated() const {
  SubgroupSpec neg = *this;
  neg.name = name + ": No";
  switch (op) {
    case Op::Eq: neg.op = Op::Ne; break;
    case Op::Ne: neg.op = Op::Eq; break;
    case Op::Ge: neg.op = Op::Lt; break;
    case Op::Lt: neg.op = Op::Ge; break;
    case Op::Le: neg.op = Op::Gt; break;
    case Op::Gt: neg.op = Op::Le; break;
  }
  return neg;
}

std::vector<std::uint8_t> subgroup_mask(const ObservationFrame& frame,
                                        const SubgroupSpec& spec) {
  int j = frame.covariate_index(spec.column);
  if (j < 0) throw DataError("unknown column in subgroup: " + spec.column);
  const std::vector<double>& x = frame.covariate(static_cast<std::size_t>(j));
  std::vector<std::uint8_t> mask(frame.n_rows());
  for (std::size_t i = 0; i < x.size(); ++i) {
    bool v = false;
    switch (spec.op) {
      case SubgroupSpec::Op::Eq: v = x[i] == spec.threshold; break;
      case SubgroupSpec::Op::Ge: v = x[i] >= spec.threshold; break;
      case SubgroupSpec::Op::Le: v = x[i] <= spec.threshold; break;
      case SubgroupSpec::Op::Gt: v = x[i] > spec.threshold; break;
      case SubgroupSpec::Op::Lt: v = x[i] < spec.threshold; break;
      case SubgroupSpec::Op::Ne: v = x[i] != spec.threshold; break;
    }
    mask[i] = v ? 1 : 0;
  }
  return mask;
}

}  // namespace hte
