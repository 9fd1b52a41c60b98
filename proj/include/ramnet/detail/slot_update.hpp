#pragma once

// Per-slot arithmetic shared by the sequential engine and the segment kernel.
// Both paths must round identically, so the expressions live in one place.

#include <cstddef>

namespace ramnet::detail {

inline void slot_write(double* values, double& mass, std::size_t dim, double decay, double w,
                       const double* v) noexcept {
    for (std::size_t j = 0; j < dim; ++j) values[j] = decay * values[j] + w * v[j];
    mass = decay * mass + w;
}

inline double read_scale(double r, double mass, double eps) noexcept { return r / (mass + eps); }

inline void slot_read_accumulate(double* out, const double* values, std::size_t dim,
                                 double scale) noexcept {
    for (std::size_t j = 0; j < dim; ++j) out[j] += scale * values[j];
}

}  // namespace ramnet::detail
