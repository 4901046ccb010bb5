#include "hte/report.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <thread>

#include "hte/parallel.hpp"
#include "json.hpp"

namespace hte {

namespace {
std::atomic<std::size_t> g_max_threads{0};
}

void set_max_threads(std::size_t n) { g_max_threads.store(n); }

std::size_t max_threads() {
  std::size_t n = g_max_threads.load();
  if (n == 0) {
    unsigned hw = std::thread::hardware_concurrency();
    n = hw == 0 ? 1 : hw;
  }
  return n;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out.precision(12);
  return out;
}

}  // namespace

void write_estimates_csv(const std::string& path, std::span<const EstimateRow> rows) {
  auto out = open_out(path);
  out << "outcome,group,method,estimate,se,p_value,share,n\n";
  for (const auto& r : rows) {
    out << r.outcome << "," << r.group << "," << r.method << "," << r.estimate << ","
        << r.se << "," << r.p_value << "," << r.share << "," << r.n << "\n";
  }
}

std::string estimates_to_json(std::span<const EstimateRow> rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"outcome", r.outcome},
                 {"group", r.group},
                 {"method", r.method},
                 {"estimate", r.estimate},
                 {"se", r.se},
                 {"p_value", r.p_value},
                 {"share", r.share},
                 {"n", r.n}});
  }
  return j.dump(2);
}

void write_quantiles_csv(const std::string& path, std::span<const QuantileRow> rows) {
  auto out = open_out(path);
  out << "outcome,estimate,min,q25,q50,q75,max\n";
  for (const auto& r : rows) {
    out << r.outcome << "," << r.estimate;
    for (double q : r.quantiles) out << "," << q;
    out << "\n";
  }
}

void write_ite_csv(const std::string& path, std::span<const std::string> unit_ids,
                   std::span<const IteEstimate> estimates) {
  if (unit_ids.size() != estimates.size()) throw DataError("write_ite_csv: length mismatch");
  auto out = open_out(path);
  out << "unit_id,tau_hat,se,p_value,ci_low,ci_high,sig10,sig05\n";
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const auto& e = estimates[i];
    out << unit_ids[i] << "," << e.tau_hat << "," << e.se << "," << e.p_value << ","
        << e.ci_low << "," << e.ci_high << "," << (e.sig10 ? 1 : 0) << ","
        << (e.sig05 ? 1 : 0) << "\n";
  }
}

void write_varimp_csv(const std::string& path, std::span<const std::string> names,
                      std::span<const double> scores) {
  if (names.size() != scores.size()) throw DataError("write_varimp_csv: length mismatch");
  std::vector<std::size_t> order(names.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  auto out = open_out(path);
  out << "variable,importance\n";
  for (std::size_t i : order) {
    out << names[i] << "," << scores[i] << "\n";
  }
}

void write_profile_csv(const std::string& path, const ProfileTable& table) {
  auto out = open_out(path);
  out << "variable,mean_" << table.group_a << ",mean_" << table.group_b
      << ",difference,se,p_value\n";
  for (const auto& r : table.rows) {
    out << r.variable << "," << r.mean_a << "," << r.mean_b << "," << r.difference << ","
        << r.se << "," << r.p_value << "\n";
  }
  out << "N," << table.n_a << "," << table.n_b << ",,,\n";
}

void write_text_file(const std::string& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

std::uint64_t file_fnv1a64(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file for hashing: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buffer[65536];
  while (in) {
    in.read(buffer, sizeof(buffer));
    std::streamsize got = in.gcount();
    h = fnv1a64(buffer, static_cast<std::size_t>(got), h);
  }
  return h;
}

ManifestEntry manifest_entry(const std::string& directory, const std::string& relative) {
  ManifestEntry e;
  e.path = relative;
  std::string full = directory + "/" + relative;
  std::ifstream in(full, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("manifest: missing output " + full);
  e.bytes = static_cast<std::uint64_t>(in.tellg());
  e.hash = file_fnv1a64(full);
  return e;
}

std::string manifest_json(std::span<const ManifestEntry> entries, std::uint64_t seed) {
  std::vector<ManifestEntry> sorted(entries.begin(), entries.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  nlohmann::json j;
  j["seed"] = seed;
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& e : sorted) {
    outputs.push_back({{"path", e.path}, {"bytes", e.bytes}, {"hash", e.hash}});
  }
  j["outputs"] = std::move(outputs);
  return j.dump(2);
}

}  // namespace hte
