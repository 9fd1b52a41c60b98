#include "ramnet/mixers.hpp"

#include <cmath>
#include <memory>
#include <numeric>

#include "ramnet/kernels.hpp"
#include "ramnet/segment_kernel.hpp"

namespace ramnet {

namespace {

Matrix column_block(const Matrix& m, std::size_t first, std::size_t width) {
    Matrix out(m.rows(), width);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto src = m.row(r).subspan(first, width);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

void add_column_block(Matrix& dst, const Matrix& src, std::size_t first) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        auto d = dst.row(r).subspan(first, src.cols());
        const auto s = src.row(r);
        for (std::size_t j = 0; j < s.size(); ++j) d[j] += s[j];
    }
}

// Saved forward state of one RAM-Net head over one sequence.
struct HeadRecord {
    std::vector<SparseAddress> raw_write, raw_read;  // before the positional shift
    std::vector<DecodeSaved> saved_write, saved_read;
    // Entry i of the shifted address at step t came from raw entry src[t][i].
    std::vector<std::vector<std::size_t>> src_write, src_read;
    std::vector<std::size_t> write_offset, read_offset;  // T + 1 prefix sums
    PdmaRecord pdma;
};

}  // namespace

Var ramnet_attention(Tape& tape, Var q, Var k, Var v, const RamNetHeads& spec,
                     const TraceSink* trace, MixerStats* stats) {
    const Matrix& Q = tape.value(q);
    const Matrix& K = tape.value(k);
    const Matrix& V = tape.value(v);
    const auto H = static_cast<std::size_t>(spec.heads);
    const auto dk = static_cast<std::size_t>(spec.decoder.key_dim());
    const auto dv = static_cast<std::size_t>(spec.value_dim);
    const std::size_t T = Q.rows();
    if (Q.cols() != H * dk || K.cols() != H * dk || V.cols() != H * dv || K.rows() != T ||
        V.rows() != T) {
        throw ConfigError("ramnet_attention: projection shapes do not match the head layout");
    }
    if (spec.modes.size() != H) throw ConfigError("ramnet_attention: one addressing mode per head");

    const auto& cfg = spec.decoder;
    const Slot M = cfg.capacity();
    Matrix out(T, H * dv);
    auto records = std::make_shared<std::vector<HeadRecord>>(H);

    for (std::size_t h = 0; h < H; ++h) {
        auto& rec = (*records)[h];
        rec.raw_write.resize(T);
        rec.raw_read.resize(T);
        rec.saved_write.resize(T);
        rec.saved_read.resize(T);
        rec.src_write.resize(T);
        rec.src_read.resize(T);
        rec.write_offset.assign(T + 1, 0);
        rec.read_offset.assign(T + 1, 0);

        std::vector<SparseAddress> w_addr(T), r_addr(T);
        std::vector<AccessEvent> stream;
        stream.reserve(2 * T * static_cast<std::size_t>(cfg.top_k()));
        for (std::size_t t = 0; t < T; ++t) {
            const auto ti = static_cast<std::int64_t>(t);
            rec.raw_write[t] = decode_address(K.row(t).subspan(h * dk, dk), cfg, &rec.saved_write[t]);
            rec.raw_read[t] = decode_address(Q.row(t).subspan(h * dk, dk), cfg, &rec.saved_read[t]);
            if (spec.modes[h] == AddressingMode::relative) {
                w_addr[t] = cyclic_shift(rec.raw_write[t], ti, rec.src_write[t]);
                r_addr[t] = cyclic_shift(rec.raw_read[t], ti, rec.src_read[t]);
            } else {
                w_addr[t] = rec.raw_write[t];
                r_addr[t] = rec.raw_read[t];
                rec.src_write[t].resize(w_addr[t].size());
                rec.src_read[t].resize(r_addr[t].size());
                std::iota(rec.src_write[t].begin(), rec.src_write[t].end(), std::size_t{0});
                std::iota(rec.src_read[t].begin(), rec.src_read[t].end(), std::size_t{0});
            }
            rec.write_offset[t + 1] = rec.write_offset[t] + w_addr[t].size();
            rec.read_offset[t + 1] = rec.read_offset[t] + r_addr[t].size();
            // Writes precede reads at the same step; build_segments keeps this order.
            for (std::size_t i = 0; i < w_addr[t].size(); ++i) {
                stream.push_back({w_addr[t].indices[i], ti, AccessKind::write, w_addr[t].weights[i],
                                  static_cast<std::uint32_t>(rec.write_offset[t] + i)});
            }
            for (std::size_t i = 0; i < r_addr[t].size(); ++i) {
                stream.push_back({r_addr[t].indices[i], ti, AccessKind::read, r_addr[t].weights[i],
                                  static_cast<std::uint32_t>(rec.read_offset[t] + i)});
            }
            if (stats != nullptr) {
                stats->touched_values += (w_addr[t].size() + r_addr[t].size()) * (dv + 1);
                stats->tie_points += static_cast<std::uint64_t>(
                    at_topk_tie(rec.saved_write[t], rec.raw_write[t], cfg) +
                    at_topk_tie(rec.saved_read[t], rec.raw_read[t], cfg));
            }
            if (trace != nullptr && trace->events != nullptr) {
                for (std::size_t i = 0; i < w_addr[t].size(); ++i) {
                    trace->events->push_back({ti, trace->layer, static_cast<int>(h), AccessKind::write,
                                              w_addr[t].indices[i], w_addr[t].weights[i]});
                }
                for (std::size_t i = 0; i < r_addr[t].size(); ++i) {
                    trace->events->push_back({ti, trace->layer, static_cast<int>(h), AccessKind::read,
                                              r_addr[t].indices[i], r_addr[t].weights[i]});
                }
            }
        }

        rec.pdma.values = column_block(V, h * dv, dv);
        rec.pdma.write_entries = rec.write_offset[T];
        rec.pdma.read_entries = rec.read_offset[T];
        rec.pdma.run = {spec.decay, spec.eps, 1.0 / static_cast<double>(M)};
        rec.pdma.segments = build_segments(stream);

        Matrix head_out;
        if (spec.engine == Engine::segmented) {
            head_out = run_segments(rec.pdma.segments, rec.pdma.values, T, rec.pdma.run, spec.exec);
        } else {
            MemoryState state(M, dv, spec.decay, spec.eps);
            head_out = Matrix(T, dv);
            for (std::size_t t = 0; t < T; ++t) {
                pdma_write(state, w_addr[t], rec.pdma.values.row(t));
                pdma_read(state, r_addr[t], head_out.row(t));
            }
        }
        for (std::size_t t = 0; t < T; ++t) {
            std::copy(head_out.row(t).begin(), head_out.row(t).end(), out.row(t).begin() + h * dv);
        }
    }
    return tape.record(std::move(out), [q, k, v, spec, records, self = tape.next()](Tape& tp) {
        const Matrix& g = tp.grad(self);
        Matrix& gq = tp.grad(q);
        Matrix& gk = tp.grad(k);
        Matrix& gv = tp.grad(v);
        const auto& cfg = spec.decoder;
        const auto dk = static_cast<std::size_t>(cfg.key_dim());
        const auto dv = static_cast<std::size_t>(spec.value_dim);
        std::vector<double> raw_grad;
        for (std::size_t h = 0; h < records->size(); ++h) {
            const auto& rec = (*records)[h];
            const std::size_t T = rec.raw_write.size();
            const auto pg = backward_pdma(rec.pdma, column_block(g, h * dv, dv), spec.proxy, spec.exec);
            add_column_block(gv, pg.values, h * dv);
            for (std::size_t t = 0; t < T; ++t) {
                raw_grad.assign(rec.raw_write[t].size(), 0.0);
                for (std::size_t i = 0; i < rec.src_write[t].size(); ++i) {
                    raw_grad[rec.src_write[t][i]] = pg.write_weights[rec.write_offset[t] + i];
                }
                const auto dkey = backward_product_softmax(rec.saved_write[t], rec.raw_write[t], raw_grad, cfg);
                kernels::axpy(1.0, dkey.key, gk.row(t).subspan(h * dk, dk));

                raw_grad.assign(rec.raw_read[t].size(), 0.0);
                for (std::size_t i = 0; i < rec.src_read[t].size(); ++i) {
                    raw_grad[rec.src_read[t][i]] = pg.read_weights[rec.read_offset[t] + i];
                }
                const auto dq = backward_product_softmax(rec.saved_read[t], rec.raw_read[t], raw_grad, cfg);
                kernels::axpy(1.0, dq.key, gq.row(t).subspan(h * dk, dk));
            }
        }
    });
}

void apply_rope(Matrix& x, int heads, double base, bool inverse) {
    const auto H = static_cast<std::size_t>(heads);
    const std::size_t d = x.cols() / H;
    if (d % 2 != 0 || d * H != x.cols()) throw ConfigError("rope: head dimension must be even");
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double freq = std::pow(base, -static_cast<double>(i) / static_cast<double>(d));
            const double angle = static_cast<double>(t) * freq * (inverse ? -1.0 : 1.0);
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            for (std::size_t h = 0; h < H; ++h) {
                double& a = x(t, h * d + i);
                double& b = x(t, h * d + i + 1);
                const double a0 = a;
                const double b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

Var full_attention(Tape& tape, Var q, Var k, Var v, int heads, double scale, bool rope,
                   double rope_base) {
    Matrix Q = tape.value(q);
    Matrix K = tape.value(k);
    const Matrix& V = tape.value(v);
    const auto H = static_cast<std::size_t>(heads);
    const std::size_t T = Q.rows();
    const std::size_t dk = Q.cols() / H;
    const std::size_t dv = V.cols() / H;
    if (K.cols() != Q.cols() || dk * H != Q.cols() || dv * H != V.cols()) {
        throw ConfigError("full_attention: projection shapes do not match the head layout");
    }
    if (rope) {
        apply_rope(Q, heads, rope_base, false);
        apply_rope(K, heads, rope_base, false);
    }

    // probs[h] is T x T, lower triangular.
    auto probs = std::make_shared<std::vector<Matrix>>(H, Matrix(T, T));
    Matrix out(T, H * dv);
    for (std::size_t h = 0; h < H; ++h) {
        Matrix& P = (*probs)[h];
        for (std::size_t t = 0; t < T; ++t) {
            const auto qt = Q.row(t).subspan(h * dk, dk);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s <= t; ++s) {
                P(t, s) = scale * kernels::dot(qt, K.row(s).subspan(h * dk, dk));
                mx = std::max(mx, P(t, s));
            }
            double sum = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                P(t, s) = std::exp(P(t, s) - mx);
                sum += P(t, s);
            }
            auto ot = out.row(t).subspan(h * dv, dv);
            for (std::size_t s = 0; s <= t; ++s) {
                P(t, s) /= sum;
                kernels::axpy(P(t, s), V.row(s).subspan(h * dv, dv), ot);
            }
        }
    }

    auto rotated = std::make_shared<std::pair<Matrix, Matrix>>(std::move(Q), std::move(K));
    return tape.record(std::move(out), [q, k, v, H, dk, dv, scale, rope, rope_base, probs, rotated,
                                        self = tape.next()](Tape& tp) {
        const Matrix& g = tp.grad(self);
        const Matrix& V = tp.value(v);
        const Matrix& Qr = rotated->first;
        const Matrix& Kr = rotated->second;
        const std::size_t T = g.rows();
        Matrix dQ(T, H * dk), dK(T, H * dk);
        Matrix& gv = tp.grad(v);
        std::vector<double> dP(T);
        for (std::size_t h = 0; h < H; ++h) {
            const Matrix& P = (*probs)[h];
            for (std::size_t t = 0; t < T; ++t) {
                const auto gt = g.row(t).subspan(h * dv, dv);
                double proj = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    dP[s] = kernels::dot(gt, V.row(s).subspan(h * dv, dv));
                    proj += dP[s] * P(t, s);
                    kernels::axpy(P(t, s), gt, gv.row(s).subspan(h * dv, dv));
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const double ds = P(t, s) * (dP[s] - proj) * scale;
                    kernels::axpy(ds, Kr.row(s).subspan(h * dk, dk), dQ.row(t).subspan(h * dk, dk));
                    kernels::axpy(ds, Qr.row(t).subspan(h * dk, dk), dK.row(s).subspan(h * dk, dk));
                }
            }
        }
        if (rope) {
            apply_rope(dQ, static_cast<int>(H), rope_base, true);
            apply_rope(dK, static_cast<int>(H), rope_base, true);
        }
        kernels::axpy(1.0, dQ.flat(), tp.grad(q).flat());
        kernels::axpy(1.0, dK.flat(), tp.grad(k).flat());
    });
}

Var linear_attention(Tape& tape, Var q, Var k, Var v, Var gate_logits, int heads) {
    const Matrix& Q = tape.value(q);
    const Matrix& K = tape.value(k);
    const Matrix& V = tape.value(v);
    const Matrix& G = tape.value(gate_logits);
    const auto H = static_cast<std::size_t>(heads);
    const std::size_t T = Q.rows();
    const std::size_t dk = Q.cols() / H;
    const std::size_t dv = V.cols() / H;
    if (K.cols() != Q.cols() || dk * H != Q.cols() || dv * H != V.cols() || G.cols() != H ||
        G.rows() != T) {
        throw ConfigError("linear_attention: projection shapes do not match the head layout");
    }

    // states[h] holds S_0 .. S_T stacked as (T + 1) rows of dk * dv.
    auto states = std::make_shared<std::vector<Matrix>>(H, Matrix(T + 1, dk * dv));
    Matrix out(T, H * dv);
    for (std::size_t h = 0; h < H; ++h) {
        Matrix& S = (*states)[h];
        for (std::size_t t = 0; t < T; ++t) {
            const double gate = 1.0 / (1.0 + std::exp(-G(t, h)));
            const auto prev = S.row(t);
            auto cur = S.row(t + 1);
            for (std::size_t i = 0; i < dk; ++i) {
                const double phik = std::max(0.0, K(t, h * dk + i));
                for (std::size_t j = 0; j < dv; ++j) {
                    cur[i * dv + j] = gate * prev[i * dv + j] + phik * V(t, h * dv + j);
                }
            }
            for (std::size_t i = 0; i < dk; ++i) {
                const double phiq = std::max(0.0, Q(t, h * dk + i));
                if (phiq == 0.0) continue;
                for (std::size_t j = 0; j < dv; ++j) out(t, h * dv + j) += phiq * cur[i * dv + j];
            }
        }
    }

    return tape.record(std::move(out), [q, k, v, gate_logits, H, dk, dv, states,
                                        self = tape.next()](Tape& tp) {
        const Matrix& g = tp.grad(self);
        const Matrix& Q = tp.value(q);
        const Matrix& K = tp.value(k);
        const Matrix& V = tp.value(v);
        const Matrix& G = tp.value(gate_logits);
        Matrix& gq = tp.grad(q);
        Matrix& gk = tp.grad(k);
        Matrix& gvv = tp.grad(v);
        Matrix& gg = tp.grad(gate_logits);
        const std::size_t T = g.rows();
        std::vector<double> dS(dk * dv);
        for (std::size_t h = 0; h < H; ++h) {
            const Matrix& S = (*states)[h];
            std::fill(dS.begin(), dS.end(), 0.0);
            for (std::size_t t = T; t-- > 0;) {
                const auto cur = S.row(t + 1);
                const auto prev = S.row(t);
                // Output o_t = relu(q_t) S_t.
                for (std::size_t i = 0; i < dk; ++i) {
                    const double qi = Q(t, h * dk + i);
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dv; ++j) acc += g(t, h * dv + j) * cur[i * dv + j];
                    if (qi > 0.0) {
                        gq(t, h * dk + i) += acc;
                        for (std::size_t j = 0; j < dv; ++j) dS[i * dv + j] += qi * g(t, h * dv + j);
                    }
                }
                // S_t = gate S_{t-1} + relu(k_t)^T v_t.
                const double gate = 1.0 / (1.0 + std::exp(-G(t, h)));
                double dgate = 0.0;
                for (std::size_t i = 0; i < dk; ++i) {
                    const double ki = K(t, h * dk + i);
                    const double phik = std::max(0.0, ki);
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dv; ++j) {
                        const double d = dS[i * dv + j];
                        acc += d * V(t, h * dv + j);
                        gvv(t, h * dv + j) += phik * d;
                        dgate += d * prev[i * dv + j];
                    }
                    if (ki > 0.0) gk(t, h * dk + i) += acc;
                }
                gg(t, h) += dgate * gate * (1.0 - gate);
                for (double& d : dS) d *= gate;
            }
        }
    });
}

}  // namespace ramnet
