#include "hte/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace hte::kernels {

namespace {

Backend detect_backend() {
  if (const char* env = std::getenv("HTE_KERNEL_BACKEND")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::Scalar;
    if (std::strcmp(env, "avx2") == 0) return Backend::Avx2;
  }
#ifdef HTE_HAVE_AVX2
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
    return Backend::Avx2;
  }
#endif
  return Backend::Scalar;
}

std::atomic<Backend> g_backend{Backend::Auto};

Backend resolved() {
  Backend b = g_backend.load(std::memory_order_relaxed);
  if (b == Backend::Auto) {
    b = detect_backend();
    g_backend.store(b, std::memory_order_relaxed);
  }
  return b;
}

const detail::KernelTable& table() {
#ifdef HTE_HAVE_AVX2
  if (resolved() == Backend::Avx2) return detail::avx2_table();
#endif
  return detail::scalar_table();
}

}  // namespace

void set_backend(Backend b) {
#ifndef HTE_HAVE_AVX2
  if (b == Backend::Avx2) b = Backend::Scalar;
#endif
  g_backend.store(b, std::memory_order_relaxed);
}

Backend active_backend() { return resolved(); }

std::string backend_name() {
  return resolved() == Backend::Avx2 ? "avx2" : "scalar";
}

double sum(const double* x, std::size_t n) { return table().sum(x, n); }

double dot(const double* x, const double* y, std::size_t n) {
  return table().dot(x, y, n);
}

double sum_sq_dev(const double* x, std::size_t n, double center) {
  return table().sum_sq_dev(x, n, center);
}

void subtract(const double* a, const double* b, double* r, std::size_t n) {
  table().subtract(a, b, r, n);
}

IvMoments iv_moments(const double* y, const double* d, const double* z, std::size_t n) {
  return table().iv_moments(y, d, z, n);
}

IvMoments iv_moments_weighted(const double* w, const double* y, const double* d,
                              const double* z, std::size_t n) {
  return table().iv_moments_weighted(w, y, d, z, n);
}

}  // namespace hte::kernels
