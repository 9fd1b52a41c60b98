#pragma once

// Power decay moving average memory. Sequential (step-at-a-time) engine; this
// is the inference path and the serial reference for the segment kernel.

#include <cstdint>
#include <span>
#include <vector>

#include "ramnet/address_decoder.hpp"
#include "ramnet/cape.hpp"
#include "ramnet/common.hpp"

namespace ramnet {

enum class AccessKind : std::uint8_t { write, read };

struct TraceEvent {
    std::int64_t t = 0;
    int layer = 0;
    int head = 0;
    AccessKind kind = AccessKind::write;
    Slot slot = 0;
    double weight = 0.0;

    friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

/// Decay factor applied to an active slot written with weight w.
/// smoothing == 0 gives the exact (1 - w)^gamma with 0^0 = 1. A positive
/// smoothing e evaluates the surrogate (e + (1 - e)(1 - w))^gamma instead; that
/// forward exists only so finite differences can check the proxy gradient.
struct DecayRule {
    double gamma = 1.0;
    double smoothing = 0.0;

    double operator()(double w) const noexcept;
    /// d/dw of the surrogate (e + (1 - e)(1 - w))^gamma at the given e.
    static double surrogate_derivative(double w, double gamma, double e) noexcept;
};

class MemoryState {
public:
    static constexpr double kDefaultEps = 1e-6;

    MemoryState(Slot capacity, std::size_t value_dim, DecayRule decay = {},
                double eps = kDefaultEps);

    Slot capacity() const noexcept { return capacity_; }
    std::size_t value_dim() const noexcept { return value_dim_; }
    const DecayRule& decay() const noexcept { return decay_; }
    double eps() const noexcept { return eps_; }

    std::span<const double> slot_values(Slot m) const noexcept {
        return {buf_.data() + static_cast<std::size_t>(m) * stride(), value_dim_};
    }
    double slot_mass(Slot m) const noexcept {
        return buf_[static_cast<std::size_t>(m) * stride() + value_dim_];
    }
    double min_mass() const noexcept;

    /// Slot-values touched so far; each active slot costs value_dim + 1.
    std::uint64_t touched_values() const noexcept { return touched_; }
    void reset_counter() noexcept { touched_ = 0; }

private:
    friend void pdma_write(MemoryState&, const SparseAddress&, std::span<const double>);
    friend void pdma_read(const MemoryState&, const SparseAddress&, std::span<double>);

    std::size_t stride() const noexcept { return value_dim_ + 1; }
    double* row(Slot m) noexcept { return buf_.data() + static_cast<std::size_t>(m) * stride(); }
    const double* row(Slot m) const noexcept {
        return buf_.data() + static_cast<std::size_t>(m) * stride();
    }

    Slot capacity_;
    std::size_t value_dim_;
    DecayRule decay_;
    double eps_;
    std::vector<double> buf_;  // M rows of [S_m | z_m]
    mutable std::uint64_t touched_ = 0;
};

/// S[m] <- a(w)S[m] + w v, z[m] <- a(w)z[m] + w on the active slots only.
void pdma_write(MemoryState& state, const SparseAddress& w, std::span<const double> v);

/// out = sum over active m of r[m] S[m] / (z[m] + eps), accumulated in
/// ascending slot order.
void pdma_read(const MemoryState& state, const SparseAddress& r, std::span<double> out);
std::vector<double> pdma_read(const MemoryState& state, const SparseAddress& r);

struct TraceTag {
    int layer = 0;
    int head = 0;
};

struct StepResult {
    std::vector<double> output;
    std::vector<TraceEvent> events;
};

/// Decode, shift, write, then read at the same step t.
StepResult pdma_step(MemoryState& state, std::span<const double> key, std::span<const double> query,
                     std::span<const double> value, std::int64_t t, const DecoderConfig& cfg,
                     AddressingMode mode, TraceTag tag = {});

}  // namespace ramnet
