#include "ramnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ramnet/kernels.hpp"

namespace ramnet::ops {

Var matmul(Tape& tape, Var a, Var b) {
    Matrix out;
    kernels::matmul(tape.value(a), tape.value(b), out);
    return tape.record(std::move(out), [a, b, self = tape.next()](Tape& t) {
        const Matrix& g = t.grad(self);
        kernels::matmul_add_bt(g, t.value(b), t.grad(a));
        kernels::matmul_add_at(t.value(a), g, t.grad(b));
    });
}

Var add(Tape& tape, Var a, Var b) {
    const Matrix& av = tape.value(a);
    const Matrix& bv = tape.value(b);
    if (!av.same_shape(bv)) throw ConfigError("add: shape mismatch");
    Matrix out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] += bv.flat()[i];
    return tape.record(std::move(out), [a, b, self = tape.next()](Tape& t) {
        const auto g = t.grad(self).flat();
        auto ga = t.grad(a).flat();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        auto gb = t.grad(b).flat();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
}

Var rms_norm(Tape& tape, Var x, Var gain, double eps) {
    const Matrix& xv = tape.value(x);
    const Matrix& gv = tape.value(gain);
    if (gv.rows() != 1 || gv.cols() != xv.cols()) throw ConfigError("rms_norm: gain shape");
    const std::size_t d = xv.cols();
    Matrix out(xv.rows(), d);
    std::vector<double> inv_rms(xv.rows());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        const auto row = xv.row(r);
        const double ms = kernels::dot(row, row) / static_cast<double>(d);
        inv_rms[r] = 1.0 / std::sqrt(ms + eps);
        for (std::size_t j = 0; j < d; ++j) out(r, j) = row[j] * inv_rms[r] * gv(0, j);
    }
    return tape.record(std::move(out), [x, gain, inv_rms = std::move(inv_rms),
                                        self = tape.next()](Tape& t) {
        const Matrix& g = t.grad(self);
        const Matrix& xv = t.value(x);
        const Matrix& gv = t.value(gain);
        Matrix& gx = t.grad(x);
        Matrix& gg = t.grad(gain);
        const std::size_t d = xv.cols();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            double proj = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double xhat = xv(r, j) * inv_rms[r];
                gg(0, j) += g(r, j) * xhat;
                dxhat[j] = g(r, j) * gv(0, j);
                proj += dxhat[j] * xhat;
            }
            proj /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
                const double xhat = xv(r, j) * inv_rms[r];
                gx(r, j) += (dxhat[j] - xhat * proj) * inv_rms[r];
            }
        }
    });
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var gelu(Tape& tape, Var x) {
    Matrix out = tape.value(x);
    for (double& v : out.flat()) {
        v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    return tape.record(std::move(out), [x, self = tape.next()](Tape& t) {
        const auto g = t.grad(self).flat();
        const auto xv = t.value(x).flat();
        auto gx = t.grad(x).flat();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            const double d = 0.5 * (1.0 + th) +
                             0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            gx[i] += g[i] * d;
        }
    });
}

Var embedding(Tape& tape, Var table, std::span<const int> tokens) {
    const Matrix& tv = tape.value(table);
    Matrix out(tokens.size(), tv.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= tv.rows()) {
            throw ConfigError("embedding: token " + std::to_string(tokens[i]) + " out of vocabulary");
        }
        std::ranges::copy(tv.row(static_cast<std::size_t>(tokens[i])), out.row(i).begin());
    }
    std::vector<int> ids(tokens.begin(), tokens.end());
    return tape.record(std::move(out), [table, ids = std::move(ids),
                                        self = tape.next()](Tape& t) {
        const Matrix& g = t.grad(self);
        Matrix& gt = t.grad(table);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            kernels::axpy(1.0, g.row(i), gt.row(static_cast<std::size_t>(ids[i])));
        }
    });
}

Var select_rows(Tape& tape, Var x, std::span<const std::size_t> rows) {
    const Matrix& xv = tape.value(x);
    Matrix out(rows.size(), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= xv.rows()) throw ConfigError("select_rows: row out of range");
        std::ranges::copy(xv.row(rows[i]), out.row(i).begin());
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return tape.record(std::move(out), [x, idx = std::move(idx),
                                        self = tape.next()](Tape& t) {
        const Matrix& g = t.grad(self);
        Matrix& gx = t.grad(x);
        for (std::size_t i = 0; i < idx.size(); ++i) kernels::axpy(1.0, g.row(i), gx.row(idx[i]));
    });
}

Var scale_columns_exp(Tape& tape, Var w, Var alpha, std::size_t group_cols) {
    const Matrix& wv = tape.value(w);
    const Matrix& av = tape.value(alpha);
    if (group_cols == 0 || av.rows() != 1 || av.cols() * group_cols != wv.cols()) {
        throw ConfigError("scale_columns_exp: alpha does not tile the columns");
    }
    Matrix out(wv.rows(), wv.cols());
    for (std::size_t r = 0; r < wv.rows(); ++r) {
        for (std::size_t c = 0; c < wv.cols(); ++c) out(r, c) = std::exp(av(0, c / group_cols)) * wv(r, c);
    }
    return tape.record(std::move(out), [w, alpha, group_cols,
                                        self = tape.next()](Tape& t) {
        const Matrix& g = t.grad(self);
        const Matrix& wv = t.value(w);
        const Matrix& av = t.value(alpha);
        Matrix& gw = t.grad(w);
        Matrix& ga = t.grad(alpha);
        for (std::size_t r = 0; r < wv.rows(); ++r) {
            for (std::size_t c = 0; c < wv.cols(); ++c) {
                const double scale = std::exp(av(0, c / group_cols));
                gw(r, c) += g(r, c) * scale;
                ga(0, c / group_cols) += g(r, c) * scale * wv(r, c);
            }
        }
    });
}

Var cross_entropy(Tape& tape, Var logits, std::span<const int> targets) {
    const Matrix& lv = tape.value(logits);
    if (targets.size() != lv.rows()) throw ConfigError("cross_entropy: one target per row");
    const std::size_t vocab = lv.cols();
    Matrix probs(lv.rows(), vocab);
    double loss = 0.0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw ConfigError("cross_entropy: target " + std::to_string(targets[r]) +
                              " outside vocabulary of size " + std::to_string(vocab));
        }
        const auto row = lv.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            probs(r, j) = std::exp(row[j] - mx);
            sum += probs(r, j);
        }
        for (std::size_t j = 0; j < vocab; ++j) probs(r, j) /= sum;
        loss += std::log(sum) + mx - row[static_cast<std::size_t>(targets[r])];
    }
    const double n = lv.rows() == 0 ? 1.0 : static_cast<double>(lv.rows());
    Matrix out(1, 1, loss / n);
    std::vector<int> tg(targets.begin(), targets.end());
    return tape.record(std::move(out), [logits, probs = std::move(probs), tg = std::move(tg), n,
                                        self = tape.next()](Tape& t) {
        const double g = t.grad(self)(0, 0) / n;
        Matrix& gl = t.grad(logits);
        for (std::size_t r = 0; r < probs.rows(); ++r) {
            for (std::size_t j = 0; j < probs.cols(); ++j) gl(r, j) += g * probs(r, j);
            gl(r, static_cast<std::size_t>(tg[r])) -= g;
        }
    });
}

Var weighted_sum(Tape& tape, Var x, const Matrix& weights) {
    const Matrix& xv = tape.value(x);
    if (!xv.same_shape(weights)) throw ConfigError("weighted_sum: shape mismatch");
    Matrix out(1, 1, kernels::dot(xv.flat(), weights.flat()));
    return tape.record(std::move(out), [x, weights, self = tape.next()](Tape& t) {
        kernels::axpy(t.grad(self)(0, 0), weights.flat(), t.grad(x).flat());
    });
}

}  // namespace ramnet::ops
