#include "ramnet/model.hpp"

#include <cmath>
#include <string>

#include "ramnet/kernels.hpp"
#include "ramnet/ops.hpp"

namespace ramnet {

const char* to_string(MixerKind kind) noexcept {
    switch (kind) {
        case MixerKind::ramnet: return "ramnet";
        case MixerKind::full_attention: return "full_attention";
        case MixerKind::linear_attention: return "linear_attention";
    }
    return "unknown";
}

MixerKind parse_mixer_kind(const std::string& s) {
    if (s == "ramnet") return MixerKind::ramnet;
    if (s == "full_attention") return MixerKind::full_attention;
    if (s == "linear_attention") return MixerKind::linear_attention;
    throw ConfigError("unknown model kind '" + s + "'");
}

void ModelConfig::validate() const {
    if (vocab < 2) throw ConfigError("model: vocab must be at least 2");
    if (layers < 1 || d_model < 1 || heads < 1 || value_dim < 1) {
        throw ConfigError("model: layers, d_model, heads and value_dim must be positive");
    }
    if (mlp_hidden < 0) throw ConfigError("model: mlp_hidden must be nonnegative");
    if (kind == MixerKind::ramnet) {
        (void)decoder();  // validates U, d_p, K, tau
        if (!(gamma >= 0.0)) throw ConfigError("model: gamma must be nonnegative");
        if (!(eps >= 0.0)) throw ConfigError("model: eps must be nonnegative");
        ProxyGradSpec{eps_proxy, gamma}.validate();
    } else if (key_dim < 1) {
        throw ConfigError("model: key_dim must be positive");
    }
    if (kind == MixerKind::full_attention && rope && key_dim % 2 != 0) {
        throw ConfigError("model: rope needs an even key_dim");
    }
    if (!cape.empty()) {
        if (cape.size() != static_cast<std::size_t>(layers)) {
            throw ConfigError("model: cape schedule must list every layer exactly once");
        }
        for (const auto& l : cape) {
            if (l.size() != static_cast<std::size_t>(heads)) {
                throw ConfigError("model: cape schedule must list every head exactly once");
            }
        }
    }
}

DecoderConfig ModelConfig::decoder() const {
    return DecoderConfig(partitions, sub_dim, top_k, tau, renormalize);
}

int ModelConfig::head_key_dim() const {
    return kind == MixerKind::ramnet ? partitions * sub_dim : key_dim;
}

AddressingMode ModelConfig::mode(int layer, int head) const {
    if (!cape.empty()) {
        return cape.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
    }
    return layer == 0 ? AddressingMode::relative : AddressingMode::absolute;
}

LayerConfig ModelConfig::layer(int l) const {
    LayerConfig lc;
    lc.d_model = d_model;
    lc.heads = heads;
    lc.key_dim = head_key_dim();
    lc.value_dim = value_dim;
    if (kind == MixerKind::ramnet) lc.decoder = decoder();
    lc.gamma = gamma;
    for (int h = 0; h < heads; ++h) lc.modes.push_back(mode(l, h));
    return lc;
}

std::vector<std::vector<AddressingMode>> desk_cape_schedule(int layers, int heads) {
    std::vector<std::vector<AddressingMode>> s(static_cast<std::size_t>(layers));
    for (int l = 0; l < layers; ++l) {
        s[static_cast<std::size_t>(l)].assign(
            static_cast<std::size_t>(heads), l == 0 ? AddressingMode::relative : AddressingMode::absolute);
    }
    return s;
}

std::vector<std::vector<AddressingMode>> staged_cape_schedule(int layers, int heads) {
    std::vector<std::vector<AddressingMode>> s(static_cast<std::size_t>(layers));
    for (int l = 0; l < layers; ++l) {
        auto& row = s[static_cast<std::size_t>(l)];
        for (int h = 0; h < heads; ++h) {
            const bool rel = l < 4 || (l < 8 && h < heads / 2);
            row.push_back(rel ? AddressingMode::relative : AddressingMode::absolute);
        }
    }
    return s;
}

std::size_t ParamStore::add(std::string name, Matrix init) {
    if (contains(name)) throw ConfigError("param store: duplicate parameter '" + name + "'");
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return values_.size() - 1;
}

std::size_t ParamStore::index(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) return i;
    }
    throw ConfigError("param store: no parameter named '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const noexcept {
    for (const auto& n : names_) {
        if (n == name) return true;
    }
    return false;
}

std::size_t ParamStore::scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

std::vector<Matrix> ParamStore::zeros_like() const {
    std::vector<Matrix> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.emplace_back(v.rows(), v.cols());
    return out;
}

Matrix ReparamWeight::effective() const {
    Matrix out(base->rows(), base->cols());
    for (std::size_t r = 0; r < base->rows(); ++r) {
        for (std::size_t c = 0; c < base->cols(); ++c) {
            out(r, c) = std::exp((*alpha)(0, c / head_cols)) * (*base)(r, c);
        }
    }
    return out;
}

namespace {

std::string layer_name(int l, const char* suffix) {
    return "layers." + std::to_string(l) + "." + suffix;
}

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& x : m.flat()) x = dist(rng);
    return m;
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init(seed);
}

Model::Model(ModelConfig cfg, ParamStore params) : cfg_(std::move(cfg)) {
    cfg_.validate();
    // Re-store in canonical order so parameter indices match a fresh model.
    Model reference(cfg_, 0);
    const auto& ref = reference.params();
    if (ref.size() != params.size()) {
        throw ConfigError("model: parameter set does not match the configuration");
    }
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const auto& name = ref.name(i);
        Matrix& value = params.value(params.index(name));
        if (!value.same_shape(ref.value(i))) {
            throw ConfigError("model: parameter '" + name + "' has the wrong shape");
        }
        params_.add(name, std::move(value));
    }
}

void Model::init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto H = static_cast<std::size_t>(cfg_.heads);
    const auto dk = static_cast<std::size_t>(cfg_.head_key_dim());
    const auto dv = static_cast<std::size_t>(cfg_.value_dim);
    const auto hid = static_cast<std::size_t>(cfg_.mlp_hidden);
    const auto V = static_cast<std::size_t>(cfg_.vocab);
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg_.layers);

    params_.add("embed", gaussian(V, d, 1.0, rng));
    for (int l = 0; l < cfg_.layers; ++l) {
        params_.add(layer_name(l, "norm1.gain"), Matrix(1, d, 1.0));
        params_.add(layer_name(l, "wq"), gaussian(d, H * dk, proj_std, rng));
        params_.add(layer_name(l, "wk"), gaussian(d, H * dk, proj_std, rng));
        params_.add(layer_name(l, "wv"), gaussian(d, H * dv, proj_std, rng));
        if (cfg_.kind == MixerKind::ramnet) {
            params_.add(layer_name(l, "alpha_q"), Matrix(1, H, 0.0));
            params_.add(layer_name(l, "alpha_k"), Matrix(1, H, 0.0));
        }
        if (cfg_.kind == MixerKind::linear_attention) {
            params_.add(layer_name(l, "wg"), gaussian(d, H, proj_std, rng));
            params_.add(layer_name(l, "bg"), Matrix(1, H, 2.0));
        }
        params_.add(layer_name(l, "wo"),
                    gaussian(H * dv, d, resid_scale / std::sqrt(static_cast<double>(H * dv)), rng));
        if (hid > 0) {
            params_.add(layer_name(l, "norm2.gain"), Matrix(1, d, 1.0));
            params_.add(layer_name(l, "mlp.w1"), gaussian(d, hid, proj_std, rng));
            params_.add(layer_name(l, "mlp.w2"),
                        gaussian(hid, d, resid_scale / std::sqrt(static_cast<double>(hid)), rng));
        }
    }
    params_.add("final_norm.gain", Matrix(1, d, 1.0));
    if (!cfg_.tie_embeddings) params_.add("head", gaussian(d, V, proj_std, rng));
}

std::vector<Var> Model::bind(Tape& tape, GradBuffer& grads) const {
    if (grads.size() != params_.size()) grads = params_.zeros_like();
    std::vector<Var> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back(tape.parameter(params_.value(i), grads[i]));
    }
    return out;
}

Projections Model::project_qkv(Tape& tape, const std::vector<Var>& bound, Var normed, int layer) const {
    const auto dk = static_cast<std::size_t>(cfg_.head_key_dim());
    Var wq = bound[param(layer_name(layer, "wq"))];
    Var wk = bound[param(layer_name(layer, "wk"))];
    if (cfg_.kind == MixerKind::ramnet) {
        wq = ops::scale_columns_exp(tape, wq, bound[param(layer_name(layer, "alpha_q"))], dk);
        wk = ops::scale_columns_exp(tape, wk, bound[param(layer_name(layer, "alpha_k"))], dk);
    }
    return {ops::matmul(tape, normed, wq), ops::matmul(tape, normed, wk),
            ops::matmul(tape, normed, bound[param(layer_name(layer, "wv"))])};
}

RamNetHeads Model::ramnet_heads(int layer, const ForwardOptions& opts) const {
    RamNetHeads spec;
    spec.heads = cfg_.heads;
    spec.decoder = cfg_.decoder();
    spec.value_dim = cfg_.value_dim;
    spec.modes = cfg_.layer(layer).modes;
    spec.decay = {cfg_.gamma, opts.surrogate_decay ? cfg_.eps_proxy : 0.0};
    spec.eps = cfg_.eps;
    spec.proxy = {cfg_.eps_proxy, cfg_.gamma};
    spec.engine = opts.engine;
    spec.exec = opts.exec;
    return spec;
}

Var Model::layer_forward(Tape& tape, const std::vector<Var>& bound, Var x, int layer,
                         const ForwardOptions& opts) const {
    const Var n1 = ops::rms_norm(tape, x, bound[param(layer_name(layer, "norm1.gain"))]);
    const auto p = project_qkv(tape, bound, n1, layer);
    Var mixed;
    switch (cfg_.kind) {
        case MixerKind::ramnet: {
            const TraceSink sink{opts.trace, layer};
            mixed = ramnet_attention(tape, p.q, p.k, p.v, ramnet_heads(layer, opts),
                                     opts.trace != nullptr ? &sink : nullptr, opts.stats);
            break;
        }
        case MixerKind::full_attention:
            mixed = full_attention(tape, p.q, p.k, p.v, cfg_.heads,
                                   1.0 / std::sqrt(static_cast<double>(cfg_.key_dim)), cfg_.rope);
            break;
        case MixerKind::linear_attention: {
            const Var logits = ops::matmul(tape, n1, bound[param(layer_name(layer, "wg"))]);
            const auto& bias = tape.value(bound[param(layer_name(layer, "bg"))]);
            Matrix tiled(tape.value(logits).rows(), bias.cols());
            for (std::size_t r = 0; r < tiled.rows(); ++r) {
                std::copy(bias.row(0).begin(), bias.row(0).end(), tiled.row(r).begin());
            }
            // Broadcast add of the gate bias.
            const Var bias_var = bound[param(layer_name(layer, "bg"))];
            const Var tiled_var = tape.record(std::move(tiled), [bias_var, self = tape.next()](Tape& t) {
                const Matrix& g = t.grad(self);
                Matrix& gb = t.grad(bias_var);
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                }
            });
            mixed = linear_attention(tape, p.q, p.k, p.v, ops::add(tape, logits, tiled_var), cfg_.heads);
            break;
        }
    }
    Var h = ops::add(tape, x, ops::matmul(tape, mixed, bound[param(layer_name(layer, "wo"))]));
    if (cfg_.mlp_hidden > 0) {
        const Var n2 = ops::rms_norm(tape, h, bound[param(layer_name(layer, "norm2.gain"))]);
        const Var a = ops::gelu(tape, ops::matmul(tape, n2, bound[param(layer_name(layer, "mlp.w1"))]));
        h = ops::add(tape, h, ops::matmul(tape, a, bound[param(layer_name(layer, "mlp.w2"))]));
    }
    return h;
}

Var Model::embed(Tape& tape, const std::vector<Var>& bound, std::span<const int> tokens) const {
    return ops::embedding(tape, bound[param("embed")], tokens);
}

Var Model::head(Tape& tape, const std::vector<Var>& bound, Var x, const ForwardOptions& opts) const {
    if (!opts.logit_rows.empty()) x = ops::select_rows(tape, x, opts.logit_rows);
    const Var n = ops::rms_norm(tape, x, bound[param("final_norm.gain")]);
    if (!cfg_.tie_embeddings) return ops::matmul(tape, n, bound[param("head")]);
    // Tied head: logits = n * E^T.
    const Var table = bound[param("embed")];
    const Matrix& E = tape.value(table);
    const Matrix& nv = tape.value(n);
    Matrix logits(nv.rows(), E.rows());
    kernels::matmul_add_bt(nv, E, logits);
    return tape.record(std::move(logits), [n, table, self = tape.next()](Tape& t) {
        const Matrix& g = t.grad(self);
        Matrix gn(g.rows(), t.value(table).cols());
        kernels::matmul(g, t.value(table), gn);
        Matrix& dst = t.grad(n);
        for (std::size_t i = 0; i < gn.size(); ++i) dst.data()[i] += gn.data()[i];
        kernels::matmul_add_at(g, t.value(n), t.grad(table));
    });
}

Var Model::forward(Tape& tape, GradBuffer& grads, std::span<const int> tokens,
                   const ForwardOptions& opts) const {
    const auto bound = bind(tape, grads);
    Var x = embed(tape, bound, tokens);
    for (int l = 0; l < cfg_.layers; ++l) x = layer_forward(tape, bound, x, l, opts);
    // Counted once per position so touched_values / tokens spans every layer.
    if (opts.stats != nullptr) opts.stats->tokens += tokens.size();
    return head(tape, bound, x, opts);
}

std::size_t Model::parameter_count(bool include_embeddings) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& name = params_.name(i);
        if (!include_embeddings && (name == "embed" || name == "head")) continue;
        n += params_.value(i).size();
    }
    return n;
}

std::size_t Model::mixer_parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& name = params_.name(i);
        for (const char* part : {".wq", ".wk", ".wv", ".wo", ".alpha_q", ".alpha_k", ".wg", ".bg"}) {
            if (name.ends_with(part)) {
                n += params_.value(i).size();
                break;
            }
        }
    }
    return n;
}

Var lm_loss(Tape& tape, Var logits, std::span<const int> targets) {
    return ops::cross_entropy(tape, logits, targets);
}

}  // namespace ramnet
