#pragma once

#include <cstddef>
#include <string>

// Data-parallel inner loops used throughout the estimators. Every kernel has
// a scalar reference implementation and may have SIMD variants; the active
// variant is picked once at startup from CPU features and can be overridden
// (tests exercise scalar/SIMD equivalence, the CLI exposes --no-simd).
namespace hte::kernels {

enum class Backend { Auto, Scalar, Avx2 };

void set_backend(Backend b);
Backend active_backend();
std::string backend_name();

// Sufficient statistics for the 2x2 instrumental moment system on one span.
// sum_w is the total weight (== n for the unweighted variant); sum_zz feeds
// the instrument-variance degeneracy check.
struct IvMoments {
  double sum_w = 0.0;
  double sum_y = 0.0;
  double sum_d = 0.0;
  double sum_z = 0.0;
  double sum_zy = 0.0;
  double sum_zd = 0.0;
  double sum_zz = 0.0;

  IvMoments& operator+=(const IvMoments& o) {
    sum_w += o.sum_w;
    sum_y += o.sum_y;
    sum_d += o.sum_d;
    sum_z += o.sum_z;
    sum_zy += o.sum_zy;
    sum_zd += o.sum_zd;
    sum_zz += o.sum_zz;
    return *this;
  }
};

double sum(const double* x, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);
// Sum of squared deviations from a precomputed center.
double sum_sq_dev(const double* x, std::size_t n, double center);
// r[i] = a[i] - b[i]; r may alias a.
void subtract(const double* a, const double* b, double* r, std::size_t n);

IvMoments iv_moments(const double* y, const double* d, const double* z, std::size_t n);
IvMoments iv_moments_weighted(const double* w, const double* y, const double* d,
                              const double* z, std::size_t n);

namespace detail {

struct KernelTable {
  double (*sum)(const double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  double (*sum_sq_dev)(const double*, std::size_t, double);
  void (*subtract)(const double*, const double*, double*, std::size_t);
  IvMoments (*iv_moments)(const double*, const double*, const double*, std::size_t);
  IvMoments (*iv_moments_weighted)(const double*, const double*, const double*,
                                   const double*, std::size_t);
};

const KernelTable& scalar_table();
#ifdef HTE_HAVE_AVX2
const KernelTable& avx2_table();
#endif

}  // namespace detail

}  // namespace hte::kernels
