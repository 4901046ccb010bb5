#include "hte/iv_forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "hte/parallel.hpp"
#include "hte/rng.hpp"
#include "json.hpp"

namespace hte {

namespace {

constexpr double kVarTol = 1e-12;
constexpr double kWeakCovTol = 1e-10;
constexpr double kZ95 = 1.959963984540054;

}  // namespace

SolveResult solve_local_moment(const kernels::IvMoments& m) {
  SolveResult r;
  if (m.sum_w <= 0.0) {
    r.status = SolveStatus::DegenerateInstrument;
    return r;
  }
  double inv = 1.0 / m.sum_w;
  double mean_y = m.sum_y * inv;
  double mean_d = m.sum_d * inv;
  double mean_z = m.sum_z * inv;
  double var_z = m.sum_zz * inv - mean_z * mean_z;
  double cov_zy = m.sum_zy * inv - mean_z * mean_y;
  double cov_zd = m.sum_zd * inv - mean_z * mean_d;
  if (var_z < kVarTol) {
    r.status = SolveStatus::DegenerateInstrument;
    return r;
  }
  if (std::abs(cov_zd) < kWeakCovTol) {
    r.status = SolveStatus::WeakInstrument;
    return r;
  }
  r.value.tau = cov_zy / cov_zd;
  r.value.mu = mean_y - r.value.tau * mean_d;
  return r;
}

SolveResult solve_local_moment(std::span<const double> alpha, std::span<const double> y,
                               std::span<const double> d, std::span<const double> z) {
  std::size_t n = alpha.size();
  if (y.size() != n || d.size() != n || z.size() != n)
    throw DataError("solve_local_moment: length mismatch");
  kernels::IvMoments m =
      kernels::iv_moments_weighted(alpha.data(), y.data(), d.data(), z.data(), n);
  return solve_local_moment(m);
}

double clip_propensity(double z) { return std::clamp(z, 0.01, 0.99); }

std::vector<double> stratum_instrument_rates(const ObservationFrame& frame) {
  std::size_t n = frame.n_rows();
  std::vector<double> sums(frame.n_stratum_cells(), 0.0);
  std::vector<double> counts(frame.n_stratum_cells(), 0.0);
  const auto& cells = frame.stratum_cells();
  const auto& z = frame.instrument();
  for (std::size_t i = 0; i < n; ++i) {
    sums[static_cast<std::size_t>(cells[i])] += z[i];
    counts[static_cast<std::size_t>(cells[i])] += 1.0;
  }
  std::vector<double> rates(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = static_cast<std::size_t>(cells[i]);
    rates[i] = sums[c] / counts[c];
  }
  return rates;
}

IvForestModel fit_iv_forest(const ObservationFrame& frame, const IvForestOptions& options) {
  std::size_t n = frame.n_rows();
  if (n == 0) throw DataError("empty frame");
  const auto& y = frame.outcome();
  const auto& d = frame.treatment();
  const auto& z = frame.instrument();

  {
    kernels::IvMoments m = kernels::iv_moments(y.data(), d.data(), z.data(), n);
    double mean_z = m.sum_z / m.sum_w;
    double var_z = m.sum_zz / m.sum_w - mean_z * mean_z;
    if (var_z < kVarTol) throw DataError("constant instrument: no first stage");
    double cov_zd = m.sum_zd / m.sum_w - mean_z * (m.sum_d / m.sum_w);
    if (std::abs(cov_zd) < kWeakCovTol) {
      throw DataError("zero first-stage covariance between treatment and instrument");
    }
  }

  IvForestModel model;
  model.options = options;
  model.frame_fingerprint = frame.fingerprint();

  TreeParams nuisance = options.tree;
  nuisance.n_trees = options.nuisance_trees;
  nuisance.bag_size = 1;
  nuisance.mtry = 0;  // re-resolve for this frame

  {
    TreeParams np = nuisance;
    np.seed = splitmix64(options.tree.seed ^ 0x59a1);
    ForestModel fy = grow_regression_forest(frame, y, np);
    model.y_hat = oob_regression_predictions(fy, frame).values;
  }
  {
    TreeParams np = nuisance;
    np.seed = splitmix64(options.tree.seed ^ 0x2d7f);
    ForestModel fd = grow_regression_forest(frame, d, np);
    model.d_hat = oob_regression_predictions(fd, frame).values;
  }
  if (options.strata_propensity) {
    model.z_hat = stratum_instrument_rates(frame);
  } else {
    TreeParams np = nuisance;
    np.seed = splitmix64(options.tree.seed ^ 0x6b42);
    ForestModel fz = grow_regression_forest(frame, z, np);
    model.z_hat = oob_regression_predictions(fz, frame).values;
  }

  model.y_centered.resize(n);
  model.d_centered.resize(n);
  model.z_centered.resize(n);
  if (options.center) {
    kernels::subtract(y.data(), model.y_hat.data(), model.y_centered.data(), n);
    kernels::subtract(d.data(), model.d_hat.data(), model.d_centered.data(), n);
    kernels::subtract(z.data(), model.z_hat.data(), model.z_centered.data(), n);
  } else {
    model.y_centered.assign(y.begin(), y.end());
    model.d_centered.assign(d.begin(), d.end());
    model.z_centered.assign(z.begin(), z.end());
  }

  SolveResult full = solve_local_moment(kernels::iv_moments(
      model.y_centered.data(), model.d_centered.data(), model.z_centered.data(), n));
  if (!full.ok()) {
    throw DataError("first stage vanishes after centering; check the instrument");
  }
  model.fallback = full.value;

  GrowData data;
  data.frame = &frame;
  data.y = model.y_centered;
  data.d = model.d_centered;
  data.z = model.z_centered;
  data.instrumental = true;
  model.forest = grow_forest(data, options.tree);
  return model;
}

IteEstimate make_ite_estimate(double tau, double variance, bool weak_fallback) {
  IteEstimate e;
  e.tau_hat = tau;
  e.variance = std::max(variance, 0.0);
  e.se = std::sqrt(e.variance);
  if (e.se > 0.0) {
    double zstat = std::abs(tau) / e.se;
    e.p_value = std::erfc(zstat / M_SQRT2);
  } else {
    e.p_value = tau == 0.0 ? 1.0 : 0.0;
  }
  e.ci_low = tau - kZ95 * e.se;
  e.ci_high = tau + kZ95 * e.se;
  e.sig05 = e.p_value < 0.05;
  e.sig10 = e.p_value < 0.10;
  e.weak_fallback = weak_fallback;
  return e;
}

namespace {

struct PointScratch {
  std::vector<std::int32_t> leaf;  // per tree; -1 when not contributing
};

bool bag_excludes_unit(const ForestModel& forest, std::size_t bag, std::int32_t unit) {
  const auto& half = forest.bag_half_units[bag];
  return !std::binary_search(half.begin(), half.end(), unit);
}

}  // namespace

PointPrediction predict_point(const IvForestModel& model, const FeatureAt& features,
                              std::int32_t oob_unit) {
  const ForestModel& forest = model.forest;
  std::size_t n_trees = forest.trees.size();
  std::size_t trees_per_bag = forest.params.bag_size > 1 ? forest.params.bag_size : 1;
  std::size_t n_bags = forest.bag_half_units.size();

  thread_local PointScratch scratch;
  scratch.leaf.assign(n_trees, -1);

  kernels::IvMoments total;
  std::size_t used = 0;
  for (std::size_t g = 0; g < n_bags; ++g) {
    if (oob_unit >= 0 && !bag_excludes_unit(forest, g, oob_unit)) continue;
    for (std::size_t k = 0; k < trees_per_bag; ++k) {
      std::size_t t = g * trees_per_bag + k;
      const HonestTree& tree = forest.trees[t];
      if (tree.degenerate) continue;
      std::int32_t leaf = tree.find_leaf(features);
      const auto& m = tree.leaf_moments[static_cast<std::size_t>(leaf)];
      if (m.sum_w <= 0) continue;
      scratch.leaf[t] = leaf;
      double inv = 1.0 / m.sum_w;
      kernels::IvMoments norm;
      norm.sum_w = 1.0;
      norm.sum_y = m.sum_y * inv;
      norm.sum_d = m.sum_d * inv;
      norm.sum_z = m.sum_z * inv;
      norm.sum_zy = m.sum_zy * inv;
      norm.sum_zd = m.sum_zd * inv;
      norm.sum_zz = m.sum_zz * inv;
      total += norm;
      ++used;
    }
  }

  PointPrediction out;
  out.n_trees_used = used;
  if (used == 0) {
    out.solution = model.fallback;
    out.weak_fallback = true;
    out.variance = 1e-12;
    return out;
  }

  SolveResult solved = solve_local_moment(total);
  double mean_z = total.sum_z / total.sum_w;
  double first_stage = total.sum_zd / total.sum_w - (total.sum_d / total.sum_w) * mean_z;
  if (solved.ok()) {
    out.solution = solved.value;
  } else {
    out.solution = model.fallback;
    out.weak_fallback = true;
  }

  // Bootstrap of little bags: between-bag variance of bag-mean linearized
  // predictions, debiased by the within-bag variance / bag size.
  if (forest.params.bag_size >= 2 && std::abs(first_stage) >= kWeakCovTol) {
    double tau = out.solution.tau;
    double mu = out.solution.mu;
    double inv_fs = 1.0 / first_stage;
    std::vector<double> bag_means;
    bag_means.reserve(n_bags);
    double within_ss = 0.0;
    std::size_t ell = forest.params.bag_size;
    for (std::size_t g = 0; g < n_bags; ++g) {
      if (oob_unit >= 0 && !bag_excludes_unit(forest, g, oob_unit)) continue;
      double vals[64];
      std::size_t cnt = 0;
      bool complete = true;
      for (std::size_t k = 0; k < trees_per_bag; ++k) {
        std::size_t t = g * trees_per_bag + k;
        std::int32_t leaf = scratch.leaf[t];
        if (leaf < 0) {
          complete = false;
          break;
        }
        const auto& m = forest.trees[t].leaf_moments[static_cast<std::size_t>(leaf)];
        double inv = 1.0 / m.sum_w;
        double psi1 = m.sum_zy * inv - (m.sum_zd * inv) * tau - (m.sum_z * inv) * mu;
        double psi2 = m.sum_y * inv - (m.sum_d * inv) * tau - mu;
        vals[cnt++] = (psi1 - mean_z * psi2) * inv_fs;
      }
      if (!complete || cnt != ell) continue;
      double mean = 0.0;
      for (std::size_t k = 0; k < cnt; ++k) mean += vals[k];
      mean /= static_cast<double>(cnt);
      for (std::size_t k = 0; k < cnt; ++k) {
        double dlt = vals[k] - mean;
        within_ss += dlt * dlt;
      }
      bag_means.push_back(mean);
    }
    std::size_t good = bag_means.size();
    out.n_bags_used = good;
    if (good >= 2) {
      double center = 0.0;
      for (double v : bag_means) center += v;
      center /= static_cast<double>(good);
      double between = 0.0;
      for (double v : bag_means) {
        double dlt = v - center;
        between += dlt * dlt;
      }
      between /= static_cast<double>(good);
      double within = within_ss / (static_cast<double>(good) * static_cast<double>(ell - 1));
      out.variance = std::max(between - within / static_cast<double>(ell), 1e-12);
    } else {
      out.variance = 1e-12;
    }
  } else {
    out.variance = 1e-12;
  }
  return out;
}

std::vector<IteEstimate> predict_ite_rows(const IvForestModel& model,
                                          const ObservationFrame& frame) {
  if (frame.fingerprint() != model.frame_fingerprint) {
    throw DataError("frame does not match the model's training fingerprint");
  }
  std::vector<IteEstimate> out(frame.n_rows());
  parallel_for(frame.n_rows(), [&](std::size_t i) {
    std::int32_t unit = sampling_unit(model.forest, frame, i);
    PointPrediction p = predict_point(
        model, [&frame, i](std::size_t j) { return frame.covariate(j)[i]; }, unit);
    out[i] = make_ite_estimate(p.solution.tau, p.variance, p.weak_fallback);
  });
  return out;
}

std::vector<IteEstimate> predict_ite_points(const IvForestModel& model,
                                            const std::vector<std::vector<double>>& points) {
  std::vector<IteEstimate> out(points.size());
  parallel_for(points.size(), [&](std::size_t i) {
    if (points[i].size() != model.forest.n_features()) {
      throw DataError("test vector length does not match feature count");
    }
    PointPrediction p = predict_point(model, point_features(points[i]), -1);
    out[i] = make_ite_estimate(p.solution.tau, p.variance, p.weak_fallback);
  });
  return out;
}

std::string iv_forest_to_json(const IvForestModel& model) {
  nlohmann::json j;
  j["format"] = "hte-iv-forest";
  j["version"] = 1;
  j["forest"] = nlohmann::json::parse(forest_to_json(model.forest));
  j["nuisance_trees"] = model.options.nuisance_trees;
  j["center"] = model.options.center;
  j["strata_propensity"] = model.options.strata_propensity;
  j["y_hat"] = model.y_hat;
  j["d_hat"] = model.d_hat;
  j["z_hat"] = model.z_hat;
  j["y_centered"] = model.y_centered;
  j["d_centered"] = model.d_centered;
  j["z_centered"] = model.z_centered;
  j["fallback_tau"] = model.fallback.tau;
  j["fallback_mu"] = model.fallback.mu;
  j["fingerprint"] = model.frame_fingerprint;
  return j.dump();
}

IvForestModel iv_forest_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "hte-iv-forest") throw DataError("not an IV forest model file");
  if (j.value("version", 0) != 1) throw DataError("unsupported IV forest model version");
  IvForestModel model;
  model.forest = forest_from_json(j.at("forest").dump());
  model.options.tree = model.forest.params;
  model.options.nuisance_trees = j.at("nuisance_trees").get<std::size_t>();
  model.options.center = j.at("center").get<bool>();
  model.options.strata_propensity = j.at("strata_propensity").get<bool>();
  model.y_hat = j.at("y_hat").get<std::vector<double>>();
  model.d_hat = j.at("d_hat").get<std::vector<double>>();
  model.z_hat = j.at("z_hat").get<std::vector<double>>();
  model.y_centered = j.at("y_centered").get<std::vector<double>>();
  model.d_centered = j.at("d_centered").get<std::vector<double>>();
  model.z_centered = j.at("z_centered").get<std::vector<double>>();
  model.fallback.tau = j.at("fallback_tau").get<double>();
  model.fallback.mu = j.at("fallback_mu").get<double>();
  model.frame_fingerprint = j.at("fingerprint").get<std::uint64_t>();
  return model;
}

void save_iv_forest(const IvForestModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write model file: " + path);
  out << iv_forest_to_json(model);
}

IvForestModel load_iv_forest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return iv_forest_from_json(ss.str());
}

}  // namespace hte
