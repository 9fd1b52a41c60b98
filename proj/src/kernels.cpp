#include "ramnet/kernels.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace ramnet::kernels {

void matmul(const Matrix& a, const Matrix& b, Matrix& out, Exec exec) {
    if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimensions differ");
    if (out.rows() != a.rows() || out.cols() != b.cols()) out = Matrix(a.rows(), b.cols());
    else out.fill(0.0);
    const auto n = static_cast<std::ptrdiff_t>(a.rows());
    const std::size_t k = a.cols();
    const std::size_t m = b.cols();
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        double* c = out.row(static_cast<std::size_t>(i)).data();
        const double* ar = a.row(static_cast<std::size_t>(i)).data();
        for (std::size_t p = 0; p < k; ++p) {
            const double s = ar[p];
            if (s == 0.0) continue;
            const double* br = b.row(p).data();
            for (std::size_t j = 0; j < m; ++j) c[j] += s * br[j];
        }
    }
}

void matmul_add_bt(const Matrix& a, const Matrix& b, Matrix& out, Exec exec) {
    if (a.cols() != b.cols() || out.rows() != a.rows() || out.cols() != b.rows()) {
        throw ConfigError("matmul_add_bt: shape mismatch");
    }
    // Transposing b first turns the inner loop into a vectorizable axpy.
    Matrix bt(b.cols(), b.rows());
    for (std::size_t p = 0; p < b.rows(); ++p) {
        for (std::size_t j = 0; j < b.cols(); ++j) bt(j, p) = b(p, j);
    }
    const auto n = static_cast<std::ptrdiff_t>(a.rows());
    const std::size_t k = a.cols();
    const std::size_t m = bt.cols();
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        double* c = out.row(static_cast<std::size_t>(i)).data();
        const double* ar = a.row(static_cast<std::size_t>(i)).data();
        for (std::size_t p = 0; p < k; ++p) {
            const double s = ar[p];
            if (s == 0.0) continue;
            const double* br = bt.row(p).data();
            for (std::size_t j = 0; j < m; ++j) c[j] += s * br[j];
        }
    }
}

void matmul_add_at(const Matrix& a, const Matrix& b, Matrix& out, Exec exec) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
        throw ConfigError("matmul_add_at: shape mismatch");
    }
    const auto k = static_cast<std::ptrdiff_t>(a.cols());
    const std::size_t m = b.cols();
    // Parallel over output rows keeps the per-element summation order (over i) fixed.
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
    for (std::ptrdiff_t p = 0; p < k; ++p) {
        double* c = out.row(static_cast<std::size_t>(p)).data();
        for (std::size_t i = 0; i < a.rows(); ++i) {
            const double s = a(i, static_cast<std::size_t>(p));
            if (s == 0.0) continue;
            const double* br = b.row(i).data();
            for (std::size_t j = 0; j < m; ++j) c[j] += s * br[j];
        }
    }
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

int max_threads() noexcept {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) noexcept {
#if defined(_OPENMP)
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

}  // namespace ramnet::kernels
