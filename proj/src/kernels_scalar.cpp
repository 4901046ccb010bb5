#include "hte/kernels.hpp"

namespace hte::kernels::detail {

namespace {

double sum_scalar(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double dot_scalar(const double* x, const double* y, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

double sum_sq_dev_scalar(const double* x, std::size_t n, double center) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = x[i] - center;
    acc += d * d;
  }
  return acc;
}

void subtract_scalar(const double* a, const double* b, double* r, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) r[i] = a[i] - b[i];
}

IvMoments iv_moments_scalar(const double* y, const double* d, const double* z,
                            std::size_t n) {
  IvMoments m;
  for (std::size_t i = 0; i < n; ++i) {
    m.sum_y += y[i];
    m.sum_d += d[i];
    m.sum_z += z[i];
    m.sum_zy += z[i] * y[i];
    m.sum_zd += z[i] * d[i];
    m.sum_zz += z[i] * z[i];
  }
  m.sum_w = static_cast<double>(n);
  return m;
}

IvMoments iv_moments_weighted_scalar(const double* w, const double* y, const double* d,
                                     const double* z, std::size_t n) {
  IvMoments m;
  for (std::size_t i = 0; i < n; ++i) {
    double wi = w[i];
    double wz = wi * z[i];
    m.sum_w += wi;
    m.sum_y += wi * y[i];
    m.sum_d += wi * d[i];
    m.sum_z += wz;
    m.sum_zy += wz * y[i];
    m.sum_zd += wz * d[i];
    m.sum_zz += wz * z[i];
  }
  return m;
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table = {
      sum_scalar,    dot_scalar,        sum_sq_dev_scalar,
      subtract_scalar, iv_moments_scalar, iv_moments_weighted_scalar,
  };
  return table;
}

}  // namespace hte::kernels::detail
