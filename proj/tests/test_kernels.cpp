#include "doctest.h"

#include <cmath>
#include <vector>

#include "hte/kernels.hpp"
#include "hte/rng.hpp"

using namespace hte;

namespace {

struct BackendGuard {
  ~BackendGuard() { kernels::set_backend(kernels::Backend::Auto); }
};

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

}  // namespace

TEST_CASE("scalar and simd kernels agree") {
  BackendGuard guard;
  Rng rng(77);
  for (std::size_t n : {0ul, 1ul, 3ul, 4ul, 7ul, 8ul, 64ul, 1001ul}) {
    auto x = random_vector(rng, n);
    auto y = random_vector(rng, n);
    auto d = random_vector(rng, n);
    auto z = random_vector(rng, n);
    std::vector<double> w(n);
    for (auto& v : w) v = std::abs(rng.normal()) + 0.01;

    kernels::set_backend(kernels::Backend::Scalar);
    double s_sum = kernels::sum(x.data(), n);
    double s_dot = kernels::dot(x.data(), y.data(), n);
    double s_dev = kernels::sum_sq_dev(x.data(), n, 0.25);
    auto s_m = kernels::iv_moments(y.data(), d.data(), z.data(), n);
    auto s_mw = kernels::iv_moments_weighted(w.data(), y.data(), d.data(), z.data(), n);
    std::vector<double> s_r(n);
    kernels::subtract(x.data(), y.data(), s_r.data(), n);

    kernels::set_backend(kernels::Backend::Avx2);
    double v_sum = kernels::sum(x.data(), n);
    double v_dot = kernels::dot(x.data(), y.data(), n);
    double v_dev = kernels::sum_sq_dev(x.data(), n, 0.25);
    auto v_m = kernels::iv_moments(y.data(), d.data(), z.data(), n);
    auto v_mw = kernels::iv_moments_weighted(w.data(), y.data(), d.data(), z.data(), n);
    std::vector<double> v_r(n);
    kernels::subtract(x.data(), y.data(), v_r.data(), n);

    double tol = 1e-10 * (1.0 + static_cast<double>(n));
    CHECK(std::abs(s_sum - v_sum) < tol);
    CHECK(std::abs(s_dot - v_dot) < tol);
    CHECK(std::abs(s_dev - v_dev) < tol);
    CHECK(std::abs(s_m.sum_zy - v_m.sum_zy) < tol);
    CHECK(std::abs(s_m.sum_zd - v_m.sum_zd) < tol);
    CHECK(std::abs(s_m.sum_zz - v_m.sum_zz) < tol);
    CHECK(std::abs(s_mw.sum_w - v_mw.sum_w) < tol);
    CHECK(std::abs(s_mw.sum_zy - v_mw.sum_zy) < tol);
    for (std::size_t i = 0; i < n; ++i) CHECK(s_r[i] == v_r[i]);
  }
}

TEST_CASE("kernel sums match a plain loop") {
  BackendGuard guard;
  Rng rng(3);
  auto x = random_vector(rng, 257);
  double expected = 0.0;
  for (double v : x) expected += v;
  for (auto backend : {kernels::Backend::Scalar, kernels::Backend::Avx2}) {
    kernels::set_backend(backend);
    CHECK(kernels::sum(x.data(), x.size()) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("rng streams are deterministic and distinct") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 16; ++i) {
    double va = a.uniform();
    CHECK(va == b.uniform());
    CHECK(va != c.uniform());
  }
  auto s1 = make_stream(7, 3);
  auto s2 = make_stream(7, 3);
  auto s3 = make_stream(7, 4);
  CHECK(s1() == s2());
  CHECK(s1() != s3());
}
