#include <cmath>
#include <random>

#include "ramnet/harness.hpp"
#include "ramnet/ops.hpp"

namespace ramnet {

namespace {

struct LayerProblem {
    Model model;
    Matrix x;
    Matrix out_weights;
    std::vector<std::size_t> layer_params;
};

struct Evaluation {
    double value = 0.0;
    std::vector<Slot> selection;
    std::uint64_t ties = 0;
};

Evaluation evaluate(const LayerProblem& p, bool surrogate, GradBuffer* grads, Matrix* gx) {
    Tape tape;
    GradBuffer scratch;
    Matrix gx_scratch(p.x.rows(), p.x.cols());
    GradBuffer& g = grads != nullptr ? *grads : scratch;
    const auto bound = p.model.bind(tape, g);
    const Var x = tape.parameter(p.x, gx != nullptr ? *gx : gx_scratch);
    std::vector<TraceEvent> trace;
    MixerStats stats;
    ForwardOptions opts;
    opts.trace = &trace;
    opts.stats = &stats;
    opts.surrogate_decay = surrogate;
    const Var y = p.model.layer_forward(tape, bound, x, 0, opts);
    const Var loss = ops::weighted_sum(tape, y, p.out_weights);
    Evaluation e;
    e.value = tape.value(loss)(0, 0);
    e.ties = stats.tie_points;
    for (const auto& ev : trace) e.selection.push_back(ev.slot);
    if (grads != nullptr) tape.backward(loss);
    return e;
}

LayerProblem make_problem(const LayerGradCheckOptions& o, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.kind = MixerKind::ramnet;
    cfg.vocab = 2;
    cfg.layers = 1;
    cfg.d_model = o.d_model;
    cfg.heads = o.heads;
    cfg.partitions = o.partitions;
    cfg.sub_dim = o.sub_dim;
    cfg.top_k = o.top_k;
    cfg.value_dim = o.value_dim;
    cfg.gamma = o.gamma;
    cfg.eps_proxy = o.eps_proxy;
    cfg.mlp_hidden = 0;
    cfg.cape = {std::vector<AddressingMode>(static_cast<std::size_t>(o.heads), AddressingMode::absolute)};
    cfg.cape[0][0] = AddressingMode::relative;

    LayerProblem p{Model(cfg, seed), Matrix(static_cast<std::size_t>(o.steps), static_cast<std::size_t>(o.d_model)),
                   Matrix(static_cast<std::size_t>(o.steps), static_cast<std::size_t>(o.d_model)), {}};
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (double& v : p.x.flat()) v = n01(rng);
    for (double& v : p.out_weights.flat()) v = n01(rng);
    auto& store = p.model.params();
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& name = store.name(i);
        if (!name.starts_with("layers.0.")) continue;
        p.layer_params.push_back(i);
        // Move away from the identity initialization so every path is exercised.
        if (name.ends_with("alpha_q") || name.ends_with("alpha_k")) {
            for (double& v : store.value(i).flat()) v = 0.3 * n01(rng);
        } else if (name.ends_with("gain")) {
            for (double& v : store.value(i).flat()) v = 1.0 + 0.1 * n01(rng);
        } else if (name.ends_with(".wq") || name.ends_with(".wk")) {
            for (double& v : store.value(i).flat()) v *= 2.0;
        }
    }
    return p;
}

double* coordinate(LayerProblem& p, std::size_t idx) {
    if (idx < p.x.size()) return p.x.data() + idx;
    idx -= p.x.size();
    for (auto pi : p.layer_params) {
        auto& m = p.model.params().value(pi);
        if (idx < m.size()) return m.data() + idx;
        idx -= m.size();
    }
    return nullptr;
}

}  // namespace

LayerGradCheckResult ramnet_layer_grad_check(const LayerGradCheckOptions& o) {
    LayerGradCheckResult result;
    std::uint64_t seed = o.seed;
    LayerProblem p = make_problem(o, seed);
    while (evaluate(p, o.surrogate, nullptr, nullptr).ties > 0) {
        if (++result.resamples > o.max_resamples) {
            throw NumericError("layer grad check: every sampled point sits on a Top-K tie");
        }
        p = make_problem(o, ++seed);
    }

    GradBuffer grads;
    Matrix gx(p.x.rows(), p.x.cols());
    const auto base = evaluate(p, o.surrogate, &grads, &gx);
    std::vector<double> analytic(gx.flat().begin(), gx.flat().end());
    for (auto pi : p.layer_params) analytic.insert(analytic.end(), grads[pi].flat().begin(), grads[pi].flat().end());

    std::vector<std::size_t> coords(analytic.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (o.max_coords != 0 && coords.size() > o.max_coords) {
        std::mt19937 rng(static_cast<unsigned>(o.seed));
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(o.max_coords);
        std::sort(coords.begin(), coords.end());
    }

    auto& report = result.report;
    for (const auto i : coords) {
        double* c = coordinate(p, i);
        const double x0 = *c;
        const double h = fd_step(x0);
        *c = x0 + h;
        const auto plus = evaluate(p, o.surrogate, nullptr, nullptr);
        *c = x0 - h;
        const auto minus = evaluate(p, o.surrogate, nullptr, nullptr);
        *c = x0;
        if (plus.selection != base.selection || minus.selection != base.selection) {
            ++result.tie_crossings;
            continue;
        }
        const double numeric = (plus.value - minus.value) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), o.abs_floor});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        ++report.checked;
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (!(rel <= o.rel_tol)) report.failures.push_back({i, analytic[i], numeric, rel});
    }
    return result;
}

}  // namespace ramnet
