#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <set>

#include "ramnet/autodiff.hpp"
#include "ramnet/cape.hpp"
#include "ramnet/mixers.hpp"
#include "ramnet/ops.hpp"
#include "ramnet/tape.hpp"

using namespace ramnet;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    std::normal_distribution<double> g(0.0, sd);
    Matrix m(r, c);
    for (double& x : m.flat()) x = g(rng);
    return m;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Finite-difference check of a scalar tape expression over all of its inputs.
GradCheckReport check_expression(const std::vector<Matrix>& inputs, const Builder& build,
                                 double rel_tol = 1e-6, double abs_floor = 1e-8) {
    std::vector<Matrix> grads;
    for (const auto& m : inputs) grads.emplace_back(m.rows(), m.cols());
    {
        Tape tape;
        std::vector<Var> vars;
        for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(inputs[i], grads[i]));
        tape.backward(build(tape, vars));
    }
    std::vector<double> point, analytic;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        point.insert(point.end(), inputs[i].flat().begin(), inputs[i].flat().end());
        analytic.insert(analytic.end(), grads[i].flat().begin(), grads[i].flat().end());
    }
    const auto f = [&](std::span<const double> x) {
        std::vector<Matrix> mats = inputs;
        std::size_t off = 0;
        for (auto& m : mats) {
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(off), m.size(), m.data());
            off += m.size();
        }
        Tape tape;
        std::vector<Var> vars;
        for (auto& m : mats) vars.push_back(tape.constant(m));
        return tape.value(build(tape, vars))(0, 0);
    };
    GradCheckOptions opts;
    opts.rel_tol = rel_tol;
    opts.abs_floor = abs_floor;
    return grad_check(f, point, analytic, opts);
}

Matrix ones_like(const Matrix& m) { return Matrix(m.rows(), m.cols(), 1.0); }

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("tape backward runs once") {
    Tape tape;
    Matrix a(1, 1, 2.0), ga(1, 1);
    const Var x = tape.parameter(a, ga);
    const Var y = ops::weighted_sum(tape, x, Matrix(1, 1, 3.0));
    tape.backward(y);
    CHECK(ga(0, 0) == 3.0);
    CHECK_THROWS(tape.backward(y));
    tape.reset();
    CHECK(tape.size() == 0);
}

TEST_CASE("gradients accumulate into parameter sinks across uses") {
    Tape tape;
    Matrix a(2, 2, 1.0), ga(2, 2);
    const Var x = tape.parameter(a, ga);
    const Var s = ops::add(tape, x, x);
    tape.backward(ops::weighted_sum(tape, s, ones_like(a)));
    for (double g : ga.flat()) CHECK(g == 2.0);
}

TEST_CASE("linear map agrees with finite differences") {
    std::mt19937_64 rng(1);
    const auto a = random_matrix(rng, 3, 4);
    const auto w = random_matrix(rng, 4, 2);
    const auto c = random_matrix(rng, 3, 2);
    const auto rep = check_expression({a, w}, [&](Tape& t, const std::vector<Var>& v) {
        return ops::weighted_sum(t, ops::matmul(t, v[0], v[1]), c);
    }, 1e-9);
    CHECK_MESSAGE(rep.passed(), rep.summary());
    CHECK(rep.max_rel_error < 1e-9);
}

TEST_CASE("dense ops agree with finite differences") {
    std::mt19937_64 rng(2);
    const auto x = random_matrix(rng, 5, 6);
    const auto gain = random_matrix(rng, 1, 6);
    const auto c = random_matrix(rng, 5, 6);

    SUBCASE("rms_norm") {
        const auto rep = check_expression({x, gain}, [&](Tape& t, const std::vector<Var>& v) {
            return ops::weighted_sum(t, ops::rms_norm(t, v[0], v[1]), c);
        });
        CHECK_MESSAGE(rep.passed(), rep.summary());
    }
    SUBCASE("gelu") {
        const auto rep = check_expression({x}, [&](Tape& t, const std::vector<Var>& v) {
            return ops::weighted_sum(t, ops::gelu(t, v[0]), c);
        });
        CHECK_MESSAGE(rep.passed(), rep.summary());
    }
    SUBCASE("embedding and select_rows") {
        const auto table = random_matrix(rng, 7, 6);
        const std::vector<int> tokens{3, 0, 3, 6, 1};
        const std::vector<std::size_t> rows{4, 1};
        const auto w = random_matrix(rng, 2, 6);
        const auto rep = check_expression({table}, [&](Tape& t, const std::vector<Var>& v) {
            return ops::weighted_sum(t, ops::select_rows(t, ops::embedding(t, v[0], tokens), rows), w);
        });
        CHECK_MESSAGE(rep.passed(), rep.summary());
    }
    SUBCASE("cross entropy") {
        const std::vector<int> targets{0, 5, 2, 2, 1};
        const auto rep = check_expression({x}, [&](Tape& t, const std::vector<Var>& v) {
            return ops::cross_entropy(t, v[0], targets);
        });
        CHECK_MESSAGE(rep.passed(), rep.summary());
    }
}

TEST_CASE("cross entropy rejects out-of-range targets") {
    Tape tape;
    const Var x = tape.constant(Matrix(2, 3));
    CHECK_THROWS_AS(ops::cross_entropy(tape, x, std::vector<int>{0, 3}), ConfigError);
    CHECK_THROWS_AS(ops::cross_entropy(tape, x, std::vector<int>{-1, 0}), ConfigError);
}

TEST_CASE("scalar re-parameterization gradient matches finite differences") {
    std::mt19937_64 rng(3);
    const auto w = random_matrix(rng, 4, 6);
    const auto alpha = random_matrix(rng, 1, 3, 0.3);
    const auto c = random_matrix(rng, 4, 6);
    std::vector<Matrix> grads{Matrix(4, 6), Matrix(1, 3)};
    {
        Tape tape;
        const Var vw = tape.parameter(w, grads[0]);
        const Var va = tape.parameter(alpha, grads[1]);
        tape.backward(ops::weighted_sum(tape, ops::scale_columns_exp(tape, vw, va, 2), c));
    }
    // d/d alpha_g of sum c * exp(alpha_g) w over group g, by central differences.
    for (std::size_t g = 0; g < 3; ++g) {
        const auto f = [&](double a) {
            double s = 0.0;
            for (std::size_t r = 0; r < 4; ++r) {
                for (std::size_t col = 2 * g; col < 2 * g + 2; ++col) s += c(r, col) * std::exp(a) * w(r, col);
            }
            return s;
        };
        const double h = 1e-5;
        const double numeric = (f(alpha(0, g) + h) - f(alpha(0, g) - h)) / (2 * h);
        CHECK(std::abs(grads[1](0, g) - numeric) < 1e-8);
    }
    const auto rep = check_expression({w, alpha}, [&](Tape& t, const std::vector<Var>& v) {
        return ops::weighted_sum(t, ops::scale_columns_exp(t, v[0], v[1], 2), c);
    });
    CHECK_MESSAGE(rep.passed(), rep.summary());
}

TEST_CASE("proxy derivative") {
    SUBCASE("degenerates to the true derivative at eps 0") {
        const ProxyGradSpec p{0.0, 1.0};
        CHECK(p.derivative(0.3) == -1.0);
        const ProxyGradSpec p2{0.0, 2.0};
        CHECK(p2.derivative(0.3) == doctest::Approx(-2.0 * 0.7));
    }
    SUBCASE("gamma 0 has zero decay derivative") {
        const ProxyGradSpec p{0.01, 0.0};
        for (double w : {0.0, 0.5, 1.0}) CHECK(p.derivative(w) == 0.0);
    }
    SUBCASE("gamma 0.5 stays bounded at w = 1") {
        const ProxyGradSpec p{0.01, 0.5};
        const double bound = 0.5 * (1 - 0.01) * std::pow(0.01, -0.5);
        CHECK(std::isfinite(p.derivative(1.0)));
        CHECK(std::abs(p.derivative(1.0)) <= bound * (1 + 1e-12));
        CHECK(std::abs(p.derivative(1.0)) == doctest::Approx(bound));
    }
    SUBCASE("converges to the true derivative as eps shrinks") {
        for (double gamma : {1.0, 1.5, 2.0, 3.0}) {
            for (double w : {0.1, 0.4, 0.8}) {
                const double truth = -gamma * std::pow(1 - w, gamma - 1);
                double prev = INFINITY;
                for (double e : {1e-1, 1e-2, 1e-3, 1e-4, 1e-6}) {
                    const double err = std::abs(ProxyGradSpec{e, gamma}.derivative(w) - truth);
                    CHECK(err <= prev);
                    prev = err;
                }
                CHECK(prev < 1e-5);
            }
        }
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS((ProxyGradSpec{1.0, 1.0}.validate()), ConfigError);
        CHECK_THROWS_AS((ProxyGradSpec{-0.1, 1.0}.validate()), ConfigError);
        CHECK_THROWS_AS((ProxyGradSpec{0.01, -1.0}.validate()), ConfigError);
        CHECK_NOTHROW((ProxyGradSpec{0.01, 0.5}.validate()));
    }
}

TEST_CASE("product softmax backward") {
    std::mt19937_64 rng(4);

    SUBCASE("zero upstream gives zero gradient") {
        const DecoderConfig cfg(3, 4, 4);
        DecodeSaved saved;
        const auto key = random_matrix(rng, 1, 12);
        const auto addr = beam_search_topk(key.flat(), cfg, nullptr, &saved);
        const auto g = backward_product_softmax(saved, addr, std::vector<double>(addr.size(), 0.0), cfg);
        for (double x : g.key) CHECK(x == 0.0);
    }

    SUBCASE("untruncated single partition is the softmax JVP") {
        const DecoderConfig cfg(1, 5, 5, 0.7);
        DecodeSaved saved;
        const auto key = random_matrix(rng, 1, 5);
        const auto addr = beam_search_topk(key.flat(), cfg, nullptr, &saved);
        const auto up = random_matrix(rng, 1, 5);
        const auto g = backward_product_softmax(saved, addr, up.flat(), cfg);
        const auto p = dense_product_softmax(key.flat(), cfg);
        double proj = 0.0;
        for (std::size_t j = 0; j < 5; ++j) proj += up(0, j) * p[j];
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK(g.key[j] == doctest::Approx(p[j] * (up(0, j) - proj) / 0.7).epsilon(1e-12));
        }
    }

    SUBCASE("masked forward agrees with finite differences") {
        for (bool renorm : {false, true}) {
            const DecoderConfig cfg(3, 4, 4, 0.8, renorm);
            int checked = 0;
            for (int rep = 0; rep < 40; ++rep) {
                const auto key = random_matrix(rng, 1, 12);
                DecodeSaved saved;
                const auto addr = decode_address(key.flat(), cfg, &saved);
                const auto up = random_matrix(rng, 1, addr.size());
                const auto g = backward_product_softmax(saved, addr, up.flat(), cfg);
                if (g.at_tie) continue;
                const auto mask = addr.indices;
                const auto f = [&](std::span<const double> k) {
                    const auto dense = dense_product_softmax(k, cfg);
                    double mass = 0.0;
                    for (Slot m : mask) mass += dense[m];
                    double s = 0.0;
                    for (std::size_t i = 0; i < mask.size(); ++i) {
                        s += up(0, i) * (renorm ? dense[mask[i]] / mass : dense[mask[i]]);
                    }
                    return s;
                };
                // Partitions whose digit is shared by every kept slot cancel under
                // renormalization; their exact zero gradient meets FD roundoff of order ulp / h.
                GradCheckOptions opts;
                opts.rel_tol = 1e-5;
                opts.abs_floor = 1e-5;
                const auto report = grad_check(f, key.flat(), g.key, opts);
                CHECK_MESSAGE(report.passed(), report.summary());
                ++checked;
            }
            CHECK(checked > 30);
        }
    }

    SUBCASE("every partition receives gradient") {
        const DecoderConfig cfg(4, 4, 3);
        for (int rep = 0; rep < 50; ++rep) {
            const auto key = random_matrix(rng, 1, 16);
            DecodeSaved saved;
            const auto addr = decode_address(key.flat(), cfg, &saved);
            const auto up = random_matrix(rng, 1, addr.size());
            const auto g = backward_product_softmax(saved, addr, up.flat(), cfg);
            for (int u = 0; u < 4; ++u) {
                int nonzero = 0;
                for (int j = 0; j < 4; ++j) nonzero += g.key[static_cast<std::size_t>(u * 4 + j)] != 0.0;
                CHECK(nonzero >= 1);
            }
        }
    }

    SUBCASE("ties are flagged") {
        const DecoderConfig cfg(2, 2, 1);
        DecodeSaved saved;
        const std::vector<double> key{0.0, 0.0, 1.0, 0.0};
        const auto addr = beam_search_topk(key, cfg, nullptr, &saved);
        CHECK(at_topk_tie(saved, addr, cfg));
        const auto g = backward_product_softmax(saved, addr, std::vector<double>{1.0}, cfg);
        CHECK(g.at_tie);
    }
}

namespace {

struct PdmaProblem {
    PdmaRecord record;
    std::vector<double> write_w, read_w;
    Matrix upstream;
};

PdmaProblem random_pdma(std::mt19937_64& rng, std::size_t T, std::size_t K, Slot M, std::size_t dv,
                        double gamma) {
    PdmaProblem p;
    std::uniform_int_distribution<Slot> pick(0, M - 1);
    std::uniform_real_distribution<double> unit(0.05, 0.9);
    std::vector<AccessEvent> events;
    std::uint32_t we = 0, re = 0;
    for (std::size_t t = 0; t < T; ++t) {
        std::set<Slot> ws, rs;
        while (ws.size() < K) ws.insert(pick(rng));
        while (rs.size() < K) rs.insert(pick(rng));
        for (Slot s : ws) {
            p.write_w.push_back(unit(rng) / K);
            events.push_back({s, static_cast<std::int64_t>(t), AccessKind::write, p.write_w.back(), we++});
        }
        for (Slot s : rs) {
            p.read_w.push_back(unit(rng) / K);
            events.push_back({s, static_cast<std::int64_t>(t), AccessKind::read, p.read_w.back(), re++});
        }
    }
    p.record.segments = build_segments(events);
    p.record.values = random_matrix(rng, T, dv);
    p.record.write_entries = we;
    p.record.read_entries = re;
    p.record.run = {DecayRule{gamma}, 1e-6, 1.0 / M};
    p.upstream = random_matrix(rng, T, dv);
    return p;
}

// Objective sum(upstream * outputs) as a function of (write weights, values, read weights).
double pdma_objective(const PdmaProblem& p, std::span<const double> x, double smoothing) {
    const std::size_t nw = p.write_w.size();
    const std::size_t nv = p.record.values.size();
    auto segs = p.record.segments;
    for (auto& seg : segs) {
        for (auto& e : seg.events) e.weight = e.kind == AccessKind::write ? x[e.entry] : x[nw + nv + e.entry];
    }
    Matrix values(p.record.values.rows(), p.record.values.cols());
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(nw), nv, values.data());
    auto run = p.record.run;
    run.decay.smoothing = smoothing;
    const auto out = run_segments(segs, values, values.rows(), run, Exec::serial);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.flat()[i] * p.upstream.flat()[i];
    return s;
}

}  // namespace

TEST_CASE("pdma backward matches finite differences of the surrogate forward") {
    std::mt19937_64 rng(5);
    for (double gamma : {0.0, 0.5, 1.0, 2.0}) {
        for (double eps_proxy : {0.0, 0.01}) {
            auto p = random_pdma(rng, 24, 3, 12, 3, gamma);
            // The backward replays the forward under the record's decay rule, so
            // carrying the smoothing makes it the exact gradient of the surrogate.
            p.record.run.decay.smoothing = eps_proxy;
            const ProxyGradSpec proxy{eps_proxy, gamma};
            const auto g = backward_pdma(p.record, p.upstream, proxy, Exec::serial);
            std::vector<double> point = p.write_w, analytic = g.write_weights;
            point.insert(point.end(), p.record.values.flat().begin(), p.record.values.flat().end());
            analytic.insert(analytic.end(), g.values.flat().begin(), g.values.flat().end());
            point.insert(point.end(), p.read_w.begin(), p.read_w.end());
            analytic.insert(analytic.end(), g.read_weights.begin(), g.read_weights.end());
            const auto f = [&](std::span<const double> x) { return pdma_objective(p, x, eps_proxy); };
            GradCheckOptions opts;
            opts.rel_tol = 1e-6;
            const auto report = grad_check(f, point, analytic, opts);
            CHECK_MESSAGE(report.passed(), "gamma " << gamma << " eps " << eps_proxy << ": " << report.summary());
        }
    }
}

TEST_CASE("pdma backward is identical in serial and parallel execution") {
    std::mt19937_64 rng(6);
    auto p = random_pdma(rng, 64, 4, 32, 4, 1.0);
    const auto a = backward_pdma(p.record, p.upstream, {}, Exec::serial);
    const auto b = backward_pdma(p.record, p.upstream, {}, Exec::parallel);
    CHECK(a.write_weights == b.write_weights);
    CHECK(a.read_weights == b.read_weights);
    CHECK(std::equal(a.values.flat().begin(), a.values.flat().end(), b.values.flat().begin()));
}

TEST_CASE("pdma backward names non-finite gradients") {
    std::mt19937_64 rng(7);
    auto p = random_pdma(rng, 8, 2, 8, 2, 1.0);
    p.upstream(3, 0) = INFINITY;
    CHECK_THROWS_AS(backward_pdma(p.record, p.upstream, {}, Exec::serial), NumericError);
}

TEST_CASE("ramnet mixer gradients are deterministic") {
    std::mt19937_64 rng(8);
    const auto q = random_matrix(rng, 16, 16);
    const auto k = random_matrix(rng, 16, 16);
    const auto v = random_matrix(rng, 16, 8);
    const auto c = random_matrix(rng, 16, 8);
    RamNetHeads spec;
    spec.heads = 2;
    spec.decoder = DecoderConfig(2, 4, 3);
    spec.value_dim = 4;
    spec.modes = {AddressingMode::relative, AddressingMode::absolute};
    const auto run = [&]() {
        std::vector<Matrix> g{Matrix(16, 16), Matrix(16, 16), Matrix(16, 8)};
        Tape tape;
        const Var vq = tape.parameter(q, g[0]);
        const Var vk = tape.parameter(k, g[1]);
        const Var vv = tape.parameter(v, g[2]);
        tape.backward(ops::weighted_sum(tape, ramnet_attention(tape, vq, vk, vv, spec), c));
        return g;
    };
    const auto a = run();
    const auto b = run();
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::equal(a[i].flat().begin(), a[i].flat().end(), b[i].flat().begin()));
    }
}

TEST_CASE("grad_check reports mismatches per coordinate") {
    const auto f = [](std::span<const double> x) { return x[0] * x[0] + 3 * x[1]; };
    const std::vector<double> point{2.0, 1.0};
    const auto ok = grad_check(f, point, std::vector<double>{4.0, 3.0});
    CHECK(ok.passed());
    CHECK(ok.checked == 2);
    const auto bad = grad_check(f, point, std::vector<double>{4.0, 2.0});
    REQUIRE(bad.failures.size() == 1);
    CHECK(bad.failures[0].index == 1);
    CHECK(bad.failures[0].numeric == doctest::Approx(3.0));
    GradCheckOptions sub;
    sub.max_coords = 1;
    CHECK(grad_check(f, point, std::vector<double>{4.0, 3.0}, sub).checked == 1);
}

TEST_CASE("finite difference step scales with magnitude") {
    const double base = std::cbrt(std::numeric_limits<double>::epsilon());
    CHECK(fd_step(0.5) == doctest::Approx(base).epsilon(1e-3));
    CHECK(fd_step(100.0) == doctest::Approx(100.0 * base).epsilon(1e-3));
}

}  // TEST_SUITE
