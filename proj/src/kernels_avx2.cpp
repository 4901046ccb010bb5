#include "hte/kernels.hpp"

#ifdef HTE_HAVE_AVX2

#include <immintrin.h>

namespace hte::kernels::detail {

namespace {

inline double hadd(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swapped = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

double sum_avx2(const double* x, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
  }
  double total = hadd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) total += x[i];
  return total;
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  }
  double total = hadd(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) total += x[i] * y[i];
  return total;
}

double sum_sq_dev_avx2(const double* x, std::size_t n, double center) {
  __m256d c = _mm256_set1_pd(center);
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), c);
    acc = _mm256_fmadd_pd(d, d, acc);
  }
  double total = hadd(acc);
  for (; i < n; ++i) {
    double d = x[i] - center;
    total += d * d;
  }
  return total;
}

void subtract_avx2(const double* a, const double* b, double* r, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(r + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) r[i] = a[i] - b[i];
}

IvMoments iv_moments_avx2(const double* y, const double* d, const double* z,
                          std::size_t n) {
  __m256d sy = _mm256_setzero_pd();
  __m256d sd = _mm256_setzero_pd();
  __m256d sz = _mm256_setzero_pd();
  __m256d szy = _mm256_setzero_pd();
  __m256d szd = _mm256_setzero_pd();
  __m256d szz = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    __m256d vd = _mm256_loadu_pd(d + i);
    __m256d vz = _mm256_loadu_pd(z + i);
    sy = _mm256_add_pd(sy, vy);
    sd = _mm256_add_pd(sd, vd);
    sz = _mm256_add_pd(sz, vz);
    szy = _mm256_fmadd_pd(vz, vy, szy);
    szd = _mm256_fmadd_pd(vz, vd, szd);
    szz = _mm256_fmadd_pd(vz, vz, szz);
  }
  IvMoments m;
  m.sum_y = hadd(sy);
  m.sum_d = hadd(sd);
  m.sum_z = hadd(sz);
  m.sum_zy = hadd(szy);
  m.sum_zd = hadd(szd);
  m.sum_zz = hadd(szz);
  for (; i < n; ++i) {
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

IvMoments iv_moments_weighted_avx2(const double* w, const double* y, const double* d,
                                   const double* z, std::size_t n) {
  __m256d sw = _mm256_setzero_pd();
  __m256d sy = _mm256_setzero_pd();
  __m256d sd = _mm256_setzero_pd();
  __m256d sz = _mm256_setzero_pd();
  __m256d szy = _mm256_setzero_pd();
  __m256d szd = _mm256_setzero_pd();
  __m256d szz = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vw = _mm256_loadu_pd(w + i);
    __m256d vy = _mm256_loadu_pd(y + i);
    __m256d vd = _mm256_loadu_pd(d + i);
    __m256d vz = _mm256_loadu_pd(z + i);
    __m256d vwz = _mm256_mul_pd(vw, vz);
    sw = _mm256_add_pd(sw, vw);
    sy = _mm256_fmadd_pd(vw, vy, sy);
    sd = _mm256_fmadd_pd(vw, vd, sd);
    sz = _mm256_add_pd(sz, vwz);
    szy = _mm256_fmadd_pd(vwz, vy, szy);
    szd = _mm256_fmadd_pd(vwz, vd, szd);
    szz = _mm256_fmadd_pd(vwz, vz, szz);
  }
  IvMoments m;
  m.sum_w = hadd(sw);
  m.sum_y = hadd(sy);
  m.sum_d = hadd(sd);
  m.sum_z = hadd(sz);
  m.sum_zy = hadd(szy);
  m.sum_zd = hadd(szd);
  m.sum_zz = hadd(szz);
  for (; i < n; ++i) {
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

const KernelTable& avx2_table() {
  static const KernelTable table = {
      sum_avx2,    dot_avx2,        sum_sq_dev_avx2,
      subtract_avx2, iv_moments_avx2, iv_moments_weighted_avx2,
  };
  return table;
}

}  // namespace hte::kernels::detail

#endif  // HTE_HAVE_AVX2
