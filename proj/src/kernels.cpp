#include "albertlab/kernels.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "albertlab/common.hpp"

namespace albert::kernels {

// Defined in the per-ISA translation units; nullptr where not built in.
const KernelTable* avx2_table();
const KernelTable* neon_table();

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
  return avx2_table() != nullptr && __builtin_cpu_supports("avx2") &&
         __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

bool neon_available() { return neon_table() != nullptr; }

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return &scalar_table();
    case Isa::avx2:
      return avx2_available() ? avx2_table() : nullptr;
    case Isa::neon:
      return neon_available() ? neon_table() : nullptr;
  }
  return nullptr;
}

namespace {

const KernelTable* pick_default() {
  if (const char* env = std::getenv("ALBERT_LAB_KERNELS")) {
    Isa want;
    if (std::strcmp(env, "scalar") == 0) {
      want = Isa::scalar;
    } else if (std::strcmp(env, "avx2") == 0) {
      want = Isa::avx2;
    } else if (std::strcmp(env, "neon") == 0) {
      want = Isa::neon;
    } else {
      std::fprintf(stderr, "warning: unknown ALBERT_LAB_KERNELS=%s, using auto selection\n",
                   env);
      env = nullptr;
      want = Isa::scalar;
    }
    if (env) {
      if (const KernelTable* t = table_for(want)) return t;
      std::fprintf(stderr, "warning: ALBERT_LAB_KERNELS=%s unavailable on this CPU, using scalar\n",
                   env);
      return &scalar_table();
    }
  }
  if (avx2_available()) return avx2_table();
  if (neon_available()) return neon_table();
  return &scalar_table();
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{pick_default()};
  return slot;
}

}  // namespace

const KernelTable& active() { return *active_slot().load(std::memory_order_relaxed); }

void set_active(Isa isa) {
  const KernelTable* t = table_for(isa);
  if (t == nullptr) throw ConfigError("requested kernel ISA is not available on this CPU");
  active_slot().store(t, std::memory_order_relaxed);
}

std::string active_name() { return active().name; }

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  const KernelTable& kt = active();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip != 0.0) kt.axpy(aip, b + p * n, crow, n);
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  const KernelTable& kt = active();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += kt.dot(arow, b + j * k, k);
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  const KernelTable& kt = active();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (arow[i] != 0.0) kt.axpy(arow[i], brow, c + i * n, n);
    }
  }
}

}  // namespace albert::kernels
