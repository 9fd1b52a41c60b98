#include "ramnet/pdma.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ramnet/detail/slot_update.hpp"

namespace ramnet {

double DecayRule::operator()(double w) const noexcept {
    if (w == 0.0 || gamma == 0.0) return 1.0;
    const double base = smoothing > 0.0 ? smoothing + (1.0 - smoothing) * (1.0 - w) : 1.0 - w;
    return gamma == 1.0 ? base : std::pow(base, gamma);
}

double DecayRule::surrogate_derivative(double w, double gamma, double e) noexcept {
    if (gamma == 0.0) return 0.0;
    const double base = e + (1.0 - e) * (1.0 - w);
    return -gamma * (1.0 - e) * (gamma == 1.0 ? 1.0 : std::pow(base, gamma - 1.0));
}

MemoryState::MemoryState(Slot capacity, std::size_t value_dim, DecayRule decay, double eps)
    : capacity_(capacity), value_dim_(value_dim), decay_(decay), eps_(eps) {
    if (capacity == 0 || value_dim == 0) throw ConfigError("memory state: empty shape");
    if (!(decay.gamma >= 0.0) || !std::isfinite(decay.gamma)) {
        throw ConfigError("memory state: gamma must be a finite nonnegative number");
    }
    if (!(eps >= 0.0)) throw ConfigError("memory state: eps must be nonnegative");
    buf_.assign(static_cast<std::size_t>(capacity) * stride(), 0.0);
    const double z0 = 1.0 / static_cast<double>(capacity);
    for (Slot m = 0; m < capacity; ++m) row(m)[value_dim_] = z0;
}

double MemoryState::min_mass() const noexcept {
    double mn = std::numeric_limits<double>::infinity();
    for (Slot m = 0; m < capacity_; ++m) mn = std::min(mn, slot_mass(m));
    return mn;
}

void pdma_write(MemoryState& state, const SparseAddress& w, std::span<const double> v) {
    if (w.capacity != state.capacity_) throw ConfigError("pdma_write: address capacity mismatch");
    if (v.size() != state.value_dim_) throw ConfigError("pdma_write: value dimension mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double omega = w.weights[i];
        if (omega > 1.0 || !(omega >= 0.0)) {
            throw NumericError("pdma_write: write weight " + std::to_string(omega) +
                               " outside [0, 1] at slot " + std::to_string(w.indices[i]));
        }
        double* r = state.row(w.indices[i]);
        detail::slot_write(r, r[state.value_dim_], state.value_dim_, state.decay_(omega), omega,
                           v.data());
        if (!(r[state.value_dim_] > 0.0)) {
            throw NumericError("pdma_write: normalizer lost positivity at slot " +
                               std::to_string(w.indices[i]));
        }
    }
    state.touched_ += w.size() * state.stride();
}

void pdma_read(const MemoryState& state, const SparseAddress& r, std::span<double> out) {
    if (r.capacity != state.capacity_) throw ConfigError("pdma_read: address capacity mismatch");
    if (out.size() != state.value_dim_) throw ConfigError("pdma_read: output dimension mismatch");
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double* row = state.row(r.indices[i]);
        detail::slot_read_accumulate(
            out.data(), row, state.value_dim_,
            detail::read_scale(r.weights[i], row[state.value_dim_], state.eps_));
    }
    state.touched_ += r.size() * state.stride();
}

std::vector<double> pdma_read(const MemoryState& state, const SparseAddress& r) {
    std::vector<double> out(state.value_dim());
    pdma_read(state, r, out);
    return out;
}

StepResult pdma_step(MemoryState& state, std::span<const double> key, std::span<const double> query,
                     std::span<const double> value, std::int64_t t, const DecoderConfig& cfg,
                     AddressingMode mode, TraceTag tag) {
    if (cfg.capacity() != state.capacity()) throw ConfigError("pdma_step: capacity mismatch");
    const auto w = apply_positional(decode_address(key, cfg), t, mode);
    const auto r = apply_positional(decode_address(query, cfg), t, mode);

    StepResult res;
    res.events.reserve(w.size() + r.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        res.events.push_back({t, tag.layer, tag.head, AccessKind::write, w.indices[i], w.weights[i]});
    }
    for (std::size_t i = 0; i < r.size(); ++i) {
        res.events.push_back({t, tag.layer, tag.head, AccessKind::read, r.indices[i], r.weights[i]});
    }
    pdma_write(state, w, value);
    res.output = pdma_read(state, r);
    return res;
}

}  // namespace ramnet
