#include "utka/kernels.hpp"

#include <cstring>
#include <string>

#if defined(__x86_64__) || defined(_M_X64)
#define UTKA_X86 1
#include <immintrin.h>
#else
#define UTKA_X86 0
#endif

namespace utka::kernels {

namespace scalar {

double dot(const double* x, const double* y, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

double l2sq(const double* x, const double* y, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

void axpy(double a, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void gemm_nn(int m, int n, int k, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        double* c = C + static_cast<size_t>(i) * ldc;
        if (!accumulate) std::memset(c, 0, sizeof(double) * n);
        const double* a = A + static_cast<size_t>(i) * lda;
        for (int p = 0; p < k; ++p) {
            double av = a[p];
            if (av == 0.0) continue;
            const double* b = B + static_cast<size_t>(p) * ldb;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

void gemm_nt(int m, int n, int k, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<size_t>(i) * lda;
        double* c = C + static_cast<size_t>(i) * ldc;
        for (int j = 0; j < n; ++j) {
            const double* b = B + static_cast<size_t>(j) * ldb;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] = accumulate ? c[j] + s : s;
        }
    }
}

void gemm_tn(int m, int n, int k, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool accumulate) {
    if (!accumulate) {
        for (int i = 0; i < m; ++i)
            std::memset(C + static_cast<size_t>(i) * ldc, 0, sizeof(double) * n);
    }
    for (int p = 0; p < k; ++p) {
        const double* a = A + static_cast<size_t>(p) * lda;
        const double* b = B + static_cast<size_t>(p) * ldb;
        for (int i = 0; i < m; ++i) {
            double av = a[i];
            if (av == 0.0) continue;
            double* c = C + static_cast<size_t>(i) * ldc;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace scalar

#if UTKA_X86

namespace avx2 {

__attribute__((target("avx2,fma"))) static double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

__attribute__((target("avx2,fma"))) double dot(const double* x, const double* y, size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

__attribute__((target("avx2,fma"))) double l2sq(const double* x, const double* y, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

__attribute__((target("avx2,fma"))) void axpy(double a, const double* x, double* y, size_t n) {
    __m256d av = _mm256_set1_pd(a);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d yv = _mm256_loadu_pd(y + i);
        yv = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yv);
        _mm256_storeu_pd(y + i, yv);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

__attribute__((target("avx2,fma"))) void gemm_nn(int m, int n, int k, const double* A,
                                                 int lda, const double* B, int ldb,
                                                 double* C, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        double* c = C + static_cast<size_t>(i) * ldc;
        if (!accumulate) std::memset(c, 0, sizeof(double) * n);
        const double* a = A + static_cast<size_t>(i) * lda;
        for (int p = 0; p < k; ++p) {
            const double* b = B + static_cast<size_t>(p) * ldb;
            __m256d av = _mm256_set1_pd(a[p]);
            int j = 0;
            for (; j + 4 <= n; j += 4) {
                __m256d cv = _mm256_loadu_pd(c + j);
                cv = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + j), cv);
                _mm256_storeu_pd(c + j, cv);
            }
            for (; j < n; ++j) c[j] += a[p] * b[j];
        }
    }
}

__attribute__((target("avx2,fma"))) void gemm_nt(int m, int n, int k, const double* A,
                                                 int lda, const double* B, int ldb,
                                                 double* C, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<size_t>(i) * lda;
        double* c = C + static_cast<size_t>(i) * ldc;
        for (int j = 0; j < n; ++j) {
            double s = dot(a, B + static_cast<size_t>(j) * ldb, static_cast<size_t>(k));
            c[j] = accumulate ? c[j] + s : s;
        }
    }
}

__attribute__((target("avx2,fma"))) void gemm_tn(int m, int n, int k, const double* A,
                                                 int lda, const double* B, int ldb,
                                                 double* C, int ldc, bool accumulate) {
    if (!accumulate) {
        for (int i = 0; i < m; ++i)
            std::memset(C + static_cast<size_t>(i) * ldc, 0, sizeof(double) * n);
    }
    for (int p = 0; p < k; ++p) {
        const double* a = A + static_cast<size_t>(p) * lda;
        const double* b = B + static_cast<size_t>(p) * ldb;
        for (int i = 0; i < m; ++i) {
            __m256d av = _mm256_set1_pd(a[i]);
            double* c = C + static_cast<size_t>(i) * ldc;
            int j = 0;
            for (; j + 4 <= n; j += 4) {
                __m256d cv = _mm256_loadu_pd(c + j);
                cv = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + j), cv);
                _mm256_storeu_pd(c + j, cv);
            }
            for (; j < n; ++j) c[j] += a[i] * b[j];
        }
    }
}

}  // namespace avx2

#endif  // UTKA_X86

bool avx2_compiled() { return UTKA_X86 != 0; }

bool avx2_usable() {
#if UTKA_X86
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const Backend& backend_scalar() {
    static const Backend b{"scalar",        scalar::dot,     scalar::l2sq,
                           scalar::axpy,    scalar::gemm_nn, scalar::gemm_nt,
                           scalar::gemm_tn};
    return b;
}

const Backend& backend_avx2() {
#if UTKA_X86
    if (!avx2_usable()) throw Error("avx2 backend not usable on this cpu");
    static const Backend b{"avx2",        avx2::dot,     avx2::l2sq,
                           avx2::axpy,    avx2::gemm_nn, avx2::gemm_nt,
                           avx2::gemm_tn};
    return b;
#else
    throw Error("avx2 backend not compiled for this target");
#endif
}

namespace {
const Backend* g_active = nullptr;

const Backend* pick_auto() {
    if (avx2_usable()) return &backend_avx2();
    return &backend_scalar();
}
}  // namespace

const Backend& active() {
    if (!g_active) g_active = pick_auto();
    return *g_active;
}

void force(const char* name) {
    std::string s(name);
    if (s == "auto")
        g_active = pick_auto();
    else if (s == "scalar")
        g_active = &backend_scalar();
    else if (s == "avx2")
        g_active = &backend_avx2();
    else
        throw ConfigError("unknown kernel backend: " + s);
}

static void check_mm(const Mat& A, const Mat& B, Mat& C, int m, int n, int k, int ak,
                     int bk) {
    if (ak != k || bk != k || C.rows != m || C.cols != n)
        throw DimensionError("matmul shape mismatch");
    (void)A;
    (void)B;
}

void matmul_nn(const Mat& A, const Mat& B, Mat& C, bool accumulate) {
    check_mm(A, B, C, A.rows, B.cols, A.cols, A.cols, B.rows);
    active().gemm_nn(A.rows, B.cols, A.cols, A.data(), A.cols, B.data(), B.cols, C.data(),
                     C.cols, accumulate);
}

void matmul_nt(const Mat& A, const Mat& B, Mat& C, bool accumulate) {
    check_mm(A, B, C, A.rows, B.rows, A.cols, A.cols, B.cols);
    active().gemm_nt(A.rows, B.rows, A.cols, A.data(), A.cols, B.data(), B.cols, C.data(),
                     C.cols, accumulate);
}

void matmul_tn(const Mat& A, const Mat& B, Mat& C, bool accumulate) {
    check_mm(A, B, C, A.cols, B.cols, A.rows, A.rows, B.rows);
    active().gemm_tn(A.cols, B.cols, A.rows, A.data(), A.cols, B.data(), B.cols, C.data(),
                     C.cols, accumulate);
}

}  // namespace utka::kernels
