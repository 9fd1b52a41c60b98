#pragma once

// Dense building blocks. Every kernel has a serial path and an OpenMP path over
// output rows; both accumulate in the same order and agree bitwise.

#include <span>

#include "ramnet/common.hpp"
#include "ramnet/segment_kernel.hpp"

namespace ramnet::kernels {

/// out = a * b  (n x k) * (k x m)
void matmul(const Matrix& a, const Matrix& b, Matrix& out, Exec exec = Exec::serial);
/// out += a * b^T
void matmul_add_bt(const Matrix& a, const Matrix& b, Matrix& out, Exec exec = Exec::serial);
/// out += a^T * b
void matmul_add_at(const Matrix& a, const Matrix& b, Matrix& out, Exec exec = Exec::serial);

double dot(std::span<const double> a, std::span<const double> b) noexcept;
void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept;

/// Number of threads OpenMP will use (1 without OpenMP).
int max_threads() noexcept;
void set_threads(int n) noexcept;

}  // namespace ramnet::kernels
