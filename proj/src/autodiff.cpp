#include "ramnet/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "ramnet/detail/slot_update.hpp"

namespace ramnet {

void ProxyGradSpec::validate() const {
    // e = 0 is accepted as the degenerate case where the proxy equals the true derivative.
    if (!(eps_proxy >= 0.0 && eps_proxy < 1.0)) {
        throw ConfigError("proxy gradient: eps_proxy must lie in [0, 1)");
    }
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        throw ConfigError("proxy gradient: gamma must be finite and nonnegative");
    }
}

bool at_topk_tie(const DecodeSaved& saved, const SparseAddress& addr, const DecoderConfig& cfg) {
    if (addr.empty() || addr.size() >= cfg.capacity()) return false;
    const double kth = *std::min_element(addr.weights.begin(), addr.weights.end());
    const double kth_raw = cfg.renormalize() ? kth * saved.raw_mass : kth;
    return std::abs(kth_raw - saved.runner_up) < kTieTolerance;
}

DecoderGrad backward_product_softmax(const DecodeSaved& saved, const SparseAddress& addr,
                                     std::span<const double> upstream, const DecoderConfig& cfg) {
    const auto U = static_cast<std::size_t>(cfg.partitions());
    const auto d_p = static_cast<std::size_t>(cfg.sub_dim());
    if (saved.sub_probs.size() != U * d_p) throw ConfigError("decoder backward: missing saved probs");
    if (upstream.size() != addr.size()) throw ConfigError("decoder backward: upstream size mismatch");

    DecoderGrad out;
    out.key.assign(U * d_p, 0.0);
    out.at_tie = at_topk_tie(saved, addr, cfg);

    // Gradient on the raw (pre-renormalization) weights.
    std::vector<double> g(upstream.begin(), upstream.end());
    if (cfg.renormalize()) {
        double proj = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) proj += g[i] * addr.weights[i];
        for (double& gi : g) gi = (gi - proj) / saved.raw_mass;
    }

    // d weight_i / d P_u[digit_u(i)] = prod over the other partitions.
    std::vector<double> g_probs(U * d_p, 0.0);
    std::vector<std::size_t> digits(U);
    for (std::size_t i = 0; i < addr.size(); ++i) {
        if (g[i] == 0.0) continue;
        Slot rest = addr.indices[i];
        for (std::size_t u = U; u-- > 0;) {
            digits[u] = rest % d_p;
            rest /= static_cast<Slot>(d_p);
        }
        for (std::size_t u = 0; u < U; ++u) {
            double others = 1.0;
            for (std::size_t v = 0; v < U; ++v) {
                if (v != u) others *= saved.sub_probs[v * d_p + digits[v]];
            }
            g_probs[u * d_p + digits[u]] += g[i] * others;
        }
    }

    // Softmax Jacobian per partition, with the 1/tau of the logits.
    for (std::size_t u = 0; u < U; ++u) {
        const double* p = saved.sub_probs.data() + u * d_p;
        const double* gp = g_probs.data() + u * d_p;
        double proj = 0.0;
        for (std::size_t j = 0; j < d_p; ++j) proj += gp[j] * p[j];
        for (std::size_t j = 0; j < d_p; ++j) {
            out.key[u * d_p + j] = p[j] * (gp[j] - proj) / cfg.tau();
        }
    }
    return out;
}

PdmaGrads backward_pdma(const PdmaRecord& record, const Matrix& upstream,
                        const ProxyGradSpec& proxy, Exec exec) {
    const std::size_t dim = record.values.cols();
    const std::size_t steps = record.values.rows();
    if (upstream.rows() != steps || upstream.cols() != dim) {
        throw ConfigError("backward_pdma: upstream gradient shape mismatch");
    }

    PdmaGrads grads;
    grads.write_weights.assign(record.write_entries, 0.0);
    grads.read_weights.assign(record.read_entries, 0.0);
    grads.values = Matrix(steps, dim);
    Matrix value_contrib(record.write_entries, dim);
    std::vector<std::int64_t> write_step(record.write_entries, -1);

    const auto& run = record.run;
    const auto& segments = record.segments;
    std::atomic<std::size_t> bad_segment{std::numeric_limits<std::size_t>::max()};
    std::atomic<std::int64_t> bad_step{0};

    const auto n_seg = static_cast<std::ptrdiff_t>(segments.size());
#pragma omp parallel for schedule(dynamic, 8) if (exec == Exec::parallel)
    for (std::ptrdiff_t si = 0; si < n_seg; ++si) {
        const auto& seg = segments[static_cast<std::size_t>(si)];
        const std::size_t n = seg.events.size();
        const std::size_t stride = dim + 1;

        // Replay: states[i] is the slot row before event i.
        std::vector<double> states((n + 1) * stride, 0.0);
        states[dim] = run.initial_z;
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(states.data() + i * stride, stride, states.data() + (i + 1) * stride);
            const auto& e = seg.events[i];
            if (e.kind == AccessKind::write) {
                double* row = states.data() + (i + 1) * stride;
                detail::slot_write(row, row[dim], dim, run.decay(e.weight), e.weight,
                                   record.values.row(static_cast<std::size_t>(e.t)).data());
            }
        }

        std::vector<double> gs(dim, 0.0);
        double gz = 0.0;
        bool finite = true;
        for (std::size_t i = n; i-- > 0;) {
            const auto& e = seg.events[i];
            const auto t = static_cast<std::size_t>(e.t);
            const double* pre = states.data() + i * stride;
            const double* post = states.data() + (i + 1) * stride;
            if (e.kind == AccessKind::read) {
                const auto go = upstream.row(t);
                const double denom = post[dim] + run.eps;
                double dot = 0.0;
                for (std::size_t j = 0; j < dim; ++j) dot += go[j] * post[j];
                grads.read_weights[e.entry] = dot / denom;
                const double scale = e.weight / denom;
                for (std::size_t j = 0; j < dim; ++j) gs[j] += scale * go[j];
                gz -= e.weight * dot / (denom * denom);
                finite = finite && std::isfinite(grads.read_weights[e.entry]);
            } else {
                const double w = e.weight;
                const double decay = run.decay(w);
                const auto v = record.values.row(t);
                auto contrib = value_contrib.row(e.entry);
                double gs_dot_v = 0.0;
                double gs_dot_prev = 0.0;
                for (std::size_t j = 0; j < dim; ++j) {
                    contrib[j] = w * gs[j];
                    gs_dot_v += gs[j] * v[j];
                    gs_dot_prev += gs[j] * pre[j];
                }
                write_step[e.entry] = e.t;
                const double dw = gs_dot_v + gz + proxy.derivative(w) * (gs_dot_prev + gz * pre[dim]);
                grads.write_weights[e.entry] = dw;
                finite = finite && std::isfinite(dw);
                for (double& x : gs) x *= decay;
                gz *= decay;
            }
            if (!finite) {
                bad_segment.store(static_cast<std::size_t>(si));
                bad_step.store(e.t);
                break;
            }
        }
    }

    if (bad_segment.load() != std::numeric_limits<std::size_t>::max()) {
        std::ostringstream msg;
        msg << "backward_pdma: non-finite gradient at step " << bad_step.load() << ", slot "
            << segments[bad_segment.load()].slot;
        throw NumericError(msg.str());
    }

    // Entries are grouped by step, so this reduction order is fixed.
    for (std::size_t e = 0; e < record.write_entries; ++e) {
        if (write_step[e] < 0) continue;
        auto dst = grads.values.row(static_cast<std::size_t>(write_step[e]));
        const auto src = value_contrib.row(e);
        for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
    }
    for (double x : grads.values.flat()) {
        if (!std::isfinite(x)) throw NumericError("backward_pdma: non-finite value gradient");
    }
    return grads;
}

double fd_step(double x) noexcept {
    const double h = std::cbrt(std::numeric_limits<double>::epsilon()) * std::max(1.0, std::abs(x));
    volatile double tmp = x + h;
    return tmp - x;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << "checked " << checked << " coords, max rel err " << max_rel_error << ", "
       << failures.size() << " failures";
    for (std::size_t i = 0; i < std::min<std::size_t>(failures.size(), 10); ++i) {
        const auto& f = failures[i];
        os << "\n  [" << f.index << "] analytic " << f.analytic << " numeric " << f.numeric
           << " rel " << f.rel_error;
    }
    return os.str();
}

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> point, std::span<const double> grad,
                           const GradCheckOptions& opts) {
    if (point.size() != grad.size()) throw ConfigError("grad_check: gradient size mismatch");
    std::vector<std::size_t> coords(point.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords != 0 && coords.size() > opts.max_coords) {
        std::mt19937 rng(opts.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(opts.max_coords);
        std::sort(coords.begin(), coords.end());
    }

    GradCheckReport report;
    std::vector<double> x(point.begin(), point.end());
    for (std::size_t i : coords) {
        const double x0 = x[i];
        const double h = fd_step(x0);
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(grad[i]), std::abs(numeric), opts.abs_floor});
        const double rel = std::abs(grad[i] - numeric) / denom;
        ++report.checked;
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (!(rel <= opts.rel_tol)) report.failures.push_back({i, grad[i], numeric, rel});
    }
    return report;
}

}  // namespace ramnet
