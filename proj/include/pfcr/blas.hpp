#pragma once

#include <cblas.h>

#include <unistd.h>

#include <cstddef>
#include <cstdlib>
#include <type_traits>

namespace pfcr::blas {

// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  if (m == 0 || n == 0) return;
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb),
                beta, c, int(ldc));
  } else {
    static_assert(std::is_same_v<T, double>, "gemm supports float and double");
    cblas_dgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb),
                beta, c, int(ldc));
  }
}

// OpenBLAS picks its kernels when the library loads, and on some virtual CPUs
// it falls back to a slow generic core. When OPENBLAS_CORETYPE is unset this
// sets it from the CPU features and re-executes the current program; it
// returns normally if the variable was already set or exec fails.
inline void reexec_with_core_hint(char** argv) {
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
#if defined(__x86_64__)
  const char* core = nullptr;
  if (__builtin_cpu_supports("avx512f"))
    core = "SkylakeX";
  else if (__builtin_cpu_supports("avx2"))
    core = "Haswell";
  if (core == nullptr) return;
  setenv("OPENBLAS_CORETYPE", core, 1);
  execv("/proc/self/exe", argv);
#else
  (void)argv;
#endif
}

}  // namespace pfcr::blas
