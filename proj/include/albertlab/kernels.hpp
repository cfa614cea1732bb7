#pragma once

#include <cstddef>
#include <string>

// Data-parallel inner loops on contiguous double buffers. Scalar reference
// implementations always exist; AVX2 (x86-64) and NEON (aarch64) variants are
// selected once at startup and must agree with the scalar path to rounding.
// Set ALBERT_LAB_KERNELS=scalar|avx2|neon to override the automatic choice.

namespace albert::kernels {

enum class Isa { scalar, avx2, neon };

struct KernelTable {
  const char* name;
  // out = a . b
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out = a + b
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  // out = a * b (elementwise)
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // x *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  double (*max)(const double* x, std::size_t n);  // n >= 1
};

const KernelTable& scalar_table();

/// Table for a specific ISA; nullptr when unsupported on this build/CPU.
const KernelTable* table_for(Isa isa);

/// The table in use. Picked once: env override, else best available.
const KernelTable& active();

/// Force a table (tests). Throws ConfigError if unavailable.
void set_active(Isa isa);

bool avx2_available();
bool neon_available();
std::string active_name();

// Row-major matrix products built on the active dot/axpy kernels.
// All accumulate into C; callers zero C when they want a plain product.

/// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);

/// C[m×n] += A[m×k] · B[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);

/// C[m×n] += A[k×m]ᵀ · B[k×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);

}  // namespace albert::kernels
