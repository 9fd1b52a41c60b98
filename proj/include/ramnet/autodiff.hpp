#pragma once

// Hand-written reverse-mode kernels for the sparse memory path, and a central
// finite-difference gradient checker.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ramnet/address_decoder.hpp"
#include "ramnet/pdma.hpp"
#include "ramnet/segment_kernel.hpp"

namespace ramnet {

/// Backward substitutes the derivative of (e + (1 - e)(1 - w))^gamma for the
/// derivative of (1 - w)^gamma. e = 0 reproduces the true derivative.
struct ProxyGradSpec {
    double eps_proxy = 0.01;
    double gamma = 1.0;

    void validate() const;
    double derivative(double w) const noexcept {
        return DecayRule::surrogate_derivative(w, gamma, eps_proxy);
    }
};

struct DecoderGrad {
    std::vector<double> key;  // length U * d_p
    bool at_tie = false;      // K-th and (K+1)-th raw weights within kTieTolerance
};

inline constexpr double kTieTolerance = 1e-9;

/// True when the smallest kept raw weight is within kTieTolerance of the best
/// discarded one, i.e. the selection mask is not locally constant.
bool at_topk_tie(const DecodeSaved& saved, const SparseAddress& addr, const DecoderConfig& cfg);

/// Gradient of the loss w.r.t. the dense key, given the upstream gradient on
/// each kept weight of `addr` (same entry order as addr). The Top-K selection
/// is a constant mask; each kept weight is a product of U per-partition
/// probabilities, so every partition receives gradient through its own softmax.
DecoderGrad backward_product_softmax(const DecodeSaved& saved, const SparseAddress& addr,
                                     std::span<const double> upstream, const DecoderConfig& cfg);

/// Everything the PDMA backward needs for one head over one sequence. Write
/// and read event entries index `write_grad` / `read_grad` of PdmaGrads.
struct PdmaRecord {
    std::vector<SlotSegment> segments;
    Matrix values;  // steps x d_v
    std::size_t write_entries = 0;
    std::size_t read_entries = 0;
    SegmentRunConfig run;
};

struct PdmaGrads {
    std::vector<double> write_weights;
    Matrix values;
    std::vector<double> read_weights;
};

/// Reverse scan per slot segment. S and z are recomputed by replaying the
/// segment forward from its initial state. Throws NumericError naming the step
/// and slot when any gradient component is non-finite.
PdmaGrads backward_pdma(const PdmaRecord& record, const Matrix& upstream,
                        const ProxyGradSpec& proxy, Exec exec = Exec::parallel);

struct GradCheckOptions {
    double rel_tol = 1e-4;
    double abs_floor = 1e-8;  // denominators below this are treated as absolute error
    std::size_t max_coords = 0;  // 0: check every coordinate
    unsigned seed = 0;            // coordinate subsampling
};

struct CoordReport {
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    std::vector<CoordReport> failures;
    bool passed() const noexcept { return failures.empty(); }
    std::string summary() const;
};

/// Central differences with step h = cbrt(machine eps) * max(1, |x_i|).
/// `f` evaluates the scalar objective at a point; `grad` is the analytic
/// gradient at `point`.
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> point, std::span<const double> grad,
                           const GradCheckOptions& opts = {});

double fd_step(double x) noexcept;

}  // namespace ramnet
