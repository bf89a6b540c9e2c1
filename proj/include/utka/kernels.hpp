#pragma once

#include <cstddef>

#include "utka/mat.hpp"

namespace utka::kernels {

// Hot inner loops. Every operation has a scalar reference implementation
// and may have SIMD variants; the active backend is picked once at startup
// from CPU capabilities and can be overridden for testing.
//
// GEMM convention: row-major, C = A op B with optional accumulation.
//   gemm_nn: C[MxN] = A[MxK] * B[KxN]
//   gemm_nt: C[MxN] = A[MxK] * B[NxK]^T
//   gemm_tn: C[MxN] = A[KxM]^T * B[KxN]
// Leading dimension equals the logical column count of the stored matrix.

struct Backend {
    const char* name;
    double (*dot)(const double* x, const double* y, size_t n);
    double (*l2sq)(const double* x, const double* y, size_t n);
    void (*axpy)(double a, const double* x, double* y, size_t n);
    void (*gemm_nn)(int m, int n, int k, const double* A, int lda, const double* B,
                    int ldb, double* C, int ldc, bool accumulate);
    void (*gemm_nt)(int m, int n, int k, const double* A, int lda, const double* B,
                    int ldb, double* C, int ldc, bool accumulate);
    void (*gemm_tn)(int m, int n, int k, const double* A, int lda, const double* B,
                    int ldb, double* C, int ldc, bool accumulate);
};

namespace scalar {
double dot(const double* x, const double* y, size_t n);
double l2sq(const double* x, const double* y, size_t n);
void axpy(double a, const double* x, double* y, size_t n);
void gemm_nn(int m, int n, int k, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate);
void gemm_nt(int m, int n, int k, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate);
void gemm_tn(int m, int n, int k, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate);
}  // namespace scalar

bool avx2_compiled();
bool avx2_usable();

const Backend& backend_scalar();
const Backend& backend_avx2();  // throws if unavailable

const Backend& active();
// Force a backend by name ("scalar", "avx2", "auto"). Used by equivalence
// tests and the CLI diagnostics command.
void force(const char* name);

inline double dot(const double* x, const double* y, size_t n) { return active().dot(x, y, n); }
inline double l2sq(const double* x, const double* y, size_t n) { return active().l2sq(x, y, n); }
inline void axpy(double a, const double* x, double* y, size_t n) { active().axpy(a, x, y, n); }

// Mat-level conveniences (shape-checked).
void matmul_nn(const Mat& A, const Mat& B, Mat& C, bool accumulate = false);
void matmul_nt(const Mat& A, const Mat& B, Mat& C, bool accumulate = false);
void matmul_tn(const Mat& A, const Mat& B, Mat& C, bool accumulate = false);

}  // namespace utka::kernels
