#include <doctest.h>

#include <cmath>
#include <random>

#include "ramnet/autodiff.hpp"
#include "ramnet/mixers.hpp"
#include "ramnet/model.hpp"
#include "ramnet/tasks.hpp"

using namespace ramnet;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    std::normal_distribution<double> g(0.0, sd);
    Matrix m(r, c);
    for (double& x : m.flat()) x = g(rng);
    return m;
}

ModelConfig small_config(MixerKind kind = MixerKind::ramnet) {
    ModelConfig c;
    c.kind = kind;
    c.vocab = 12;
    c.layers = 2;
    c.d_model = 16;
    c.heads = 2;
    c.partitions = 2;
    c.sub_dim = 4;
    c.top_k = 3;
    c.key_dim = 8;
    c.value_dim = 4;
    c.mlp_hidden = 8;
    return c;
}

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n, int vocab) {
    std::uniform_int_distribution<int> tok(0, vocab - 1);
    std::vector<int> out(n);
    for (int& x : out) x = tok(rng);
    return out;
}

Matrix logits_of(const Model& m, std::span<const int> tokens, const ForwardOptions& opts = {}) {
    Tape tape;
    GradBuffer grads;
    return tape.value(m.forward(tape, grads, tokens, opts));
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("configuration validation") {
    CHECK_NOTHROW(small_config().validate());
    auto c = small_config();
    c.vocab = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.top_k = 17;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.gamma = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.cape = desk_cape_schedule(1, 2);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.cape = desk_cape_schedule(2, 3);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.cape = desk_cape_schedule(2, 2);
    CHECK_NOTHROW(c.validate());
    c = small_config(MixerKind::full_attention);
    c.key_dim = 7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(parse_mixer_kind(to_string(MixerKind::linear_attention)) == MixerKind::linear_attention);
    CHECK_THROWS_AS(parse_mixer_kind("mamba"), ConfigError);
}

TEST_CASE("layer view derives the key dimension from the decoder") {
    const auto c = small_config();
    const auto l = c.layer(1);
    CHECK(l.key_dim == c.partitions * c.sub_dim);
    CHECK(l.decoder.capacity() == 16);
    CHECK(l.modes.size() == 2);
}

TEST_CASE("cape schedules cover every layer and head once") {
    const auto desk = desk_cape_schedule(2, 2);
    REQUIRE(desk.size() == 2);
    for (auto m : desk[0]) CHECK(m == AddressingMode::relative);
    for (auto m : desk[1]) CHECK(m == AddressingMode::absolute);

    const auto full = staged_cape_schedule(27, 16);
    REQUIRE(full.size() == 27);
    int relative = 0;
    for (int l = 0; l < 27; ++l) {
        REQUIRE(full[static_cast<std::size_t>(l)].size() == 16);
        for (int h = 0; h < 16; ++h) {
            const bool rel = full[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] == AddressingMode::relative;
            relative += rel;
            if (l < 4) CHECK(rel);
            if (l >= 8) CHECK_FALSE(rel);
        }
    }
    CHECK(relative == 4 * 16 + 4 * 8);

    auto c = small_config();
    CHECK(c.mode(0, 1) == AddressingMode::relative);
    CHECK(c.mode(1, 0) == AddressingMode::absolute);
    c.cape = {{AddressingMode::absolute, AddressingMode::relative}, {AddressingMode::relative, AddressingMode::absolute}};
    CHECK(c.mode(0, 0) == AddressingMode::absolute);
    CHECK(c.mode(1, 0) == AddressingMode::relative);
}

TEST_CASE("effective weight is exp(alpha) times the base weight") {
    std::mt19937_64 rng(1);
    const auto base = random_matrix(rng, 5, 6);
    Matrix alpha(1, 3);
    alpha(0, 0) = 0.0;
    alpha(0, 1) = 0.7;
    alpha(0, 2) = -1.3;
    const auto eff = ReparamWeight{&base, &alpha, 2}.effective();
    for (std::size_t r = 0; r < 5; ++r) {
        for (std::size_t c = 0; c < 6; ++c) CHECK(eff(r, c) == std::exp(alpha(0, c / 2)) * base(r, c));
    }
}

TEST_CASE("alpha scales only the query and key projections") {
    std::mt19937_64 rng(2);
    Model m(small_config(), 3);
    const auto tokens = random_tokens(rng, 6, 12);
    const auto project = [&]() {
        Tape tape;
        GradBuffer grads;
        const auto bound = m.bind(tape, grads);
        const auto p = m.project_qkv(tape, bound, m.embed(tape, bound, tokens), 0);
        return std::array{tape.value(p.q), tape.value(p.k), tape.value(p.v)};
    };
    const auto before = project();
    // Zero alpha is the plain linear projection.
    const auto& wq = m.params().value(m.params().index("layers.0.wq"));
    Tape tape;
    GradBuffer grads;
    const auto bound = m.bind(tape, grads);
    const Matrix x = tape.value(m.embed(tape, bound, tokens));
    for (std::size_t t = 0; t < 6; ++t) {
        for (std::size_t c = 0; c < wq.cols(); ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < x.cols(); ++i) s += x(t, i) * wq(i, c);
            CHECK(before[0](t, c) == doctest::Approx(s).epsilon(1e-12));
        }
    }
    const double delta = 0.4;
    m.params().value(m.params().index("layers.0.alpha_q"))(0, 1) = delta;
    m.params().value(m.params().index("layers.0.alpha_k"))(0, 0) = -delta;
    const auto after = project();
    for (std::size_t t = 0; t < 6; ++t) {
        for (std::size_t c = 0; c < 8; ++c) {
            CHECK(after[0](t, c) == before[0](t, c));
            CHECK(after[0](t, 8 + c) == doctest::Approx(std::exp(delta) * before[0](t, 8 + c)).epsilon(1e-12));
            CHECK(after[1](t, c) == doctest::Approx(std::exp(-delta) * before[1](t, c)).epsilon(1e-12));
            CHECK(after[1](t, 8 + c) == before[1](t, 8 + c));
        }
        for (std::size_t c = 0; c < after[2].cols(); ++c) CHECK(after[2](t, c) == before[2](t, c));
    }
}

TEST_CASE("scaling a key is a temperature change") {
    std::mt19937_64 rng(4);
    const DecoderConfig cfg(3, 4, 5);
    for (int rep = 0; rep < 200; ++rep) {
        const auto key = random_matrix(rng, 1, 12);
        // A power-of-two scale keeps both sides exact, bit for bit.
        std::vector<double> doubled(key.flat().begin(), key.flat().end());
        for (double& x : doubled) x *= 2.0;
        const auto a = decode_address(doubled, cfg);
        const auto b = decode_address(key.flat(), cfg.with_tau(0.5));
        CHECK(a.indices == b.indices);
        CHECK(a.weights == b.weights);
        // General scales agree to rounding.
        const double s = std::exp(0.37);
        std::vector<double> scaled(key.flat().begin(), key.flat().end());
        for (double& x : scaled) x *= s;
        const auto c = decode_address(scaled, cfg.with_tau(1.3));
        const auto d = decode_address(key.flat(), cfg.with_tau(1.3 / s));
        CHECK(c.indices == d.indices);
        for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.weights[i] == doctest::Approx(d.weights[i]).epsilon(1e-12));
    }
}

TEST_CASE("parameter count does not depend on memory capacity") {
    std::size_t reference = 0, mixer_reference = 0;
    for (auto [U, dp, K] : {std::tuple{2, 8, 8}, {4, 4, 8}, {8, 2, 8}, {16, 1, 1}, {1, 16, 4}}) {
        auto c = small_config();
        c.partitions = U;
        c.sub_dim = dp;
        c.top_k = K;
        const Model m(c, 1);
        INFO("U=" << U << " dp=" << dp << " M=" << c.decoder().capacity());
        if (reference == 0) {
            reference = m.parameter_count();
            mixer_reference = m.mixer_parameter_count();
        }
        CHECK(m.parameter_count() == reference);
        CHECK(m.mixer_parameter_count() == mixer_reference);
    }
}

TEST_CASE("tied embeddings drop the output head") {
    auto c = small_config();
    const Model untied(c, 1);
    c.tie_embeddings = true;
    const Model tied(c, 1);
    CHECK(untied.parameter_count() - tied.parameter_count() == static_cast<std::size_t>(c.vocab * c.d_model));
    CHECK_FALSE(tied.params().contains("head"));
    std::mt19937_64 rng(5);
    const auto tokens = random_tokens(rng, 5, c.vocab);
    const auto logits = logits_of(tied, tokens);
    CHECK(logits.rows() == 5);
    CHECK(logits.cols() == static_cast<std::size_t>(c.vocab));
}

TEST_CASE("logit shapes and row selection") {
    std::mt19937_64 rng(6);
    for (auto kind : {MixerKind::ramnet, MixerKind::full_attention, MixerKind::linear_attention}) {
        const Model m(small_config(kind), 2);
        const auto tokens = random_tokens(rng, 9, 12);
        const auto all = logits_of(m, tokens);
        CHECK(all.rows() == 9);
        CHECK(all.cols() == 12);
        const std::vector<std::size_t> rows{2, 7};
        ForwardOptions opts;
        opts.logit_rows = rows;
        const auto some = logits_of(m, tokens, opts);
        REQUIRE(some.rows() == 2);
        for (std::size_t c = 0; c < 12; ++c) {
            CHECK(some(0, c) == all(2, c));
            CHECK(some(1, c) == all(7, c));
        }
    }
}

TEST_CASE("outputs are causal") {
    std::mt19937_64 rng(7);
    for (auto kind : {MixerKind::ramnet, MixerKind::full_attention, MixerKind::linear_attention}) {
        const Model m(small_config(kind), 3);
        for (int rep = 0; rep < 10; ++rep) {
            auto tokens = random_tokens(rng, 16, 12);
            const auto base = logits_of(m, tokens);
            const std::size_t cut = 1 + static_cast<std::size_t>(rep);
            for (std::size_t t = cut + 1; t < 16; ++t) tokens[t] = (tokens[t] + 5) % 12;
            const auto changed = logits_of(m, tokens);
            for (std::size_t t = 0; t <= cut; ++t) {
                for (std::size_t c = 0; c < 12; ++c) CHECK(changed(t, c) == base(t, c));
            }
        }
    }
}

TEST_CASE("segmented and sequential engines give identical logits") {
    std::mt19937_64 rng(8);
    const Model m(small_config(), 4);
    const auto tokens = random_tokens(rng, 20, 12);
    ForwardOptions seq, seg, par;
    seq.engine = Engine::sequential;
    par.exec = Exec::parallel;
    const auto a = logits_of(m, tokens, seq);
    const auto b = logits_of(m, tokens, seg);
    const auto c = logits_of(m, tokens, par);
    CHECK(std::equal(a.flat().begin(), a.flat().end(), b.flat().begin()));
    CHECK(std::equal(a.flat().begin(), a.flat().end(), c.flat().begin()));
}

TEST_CASE("single-token mixer output is a read after one write") {
    std::mt19937_64 rng(9);
    RamNetHeads spec;
    spec.heads = 1;
    spec.decoder = DecoderConfig(2, 4, 3);
    spec.value_dim = 5;
    spec.modes = {AddressingMode::relative};
    const auto q = random_matrix(rng, 1, 8);
    const auto k = random_matrix(rng, 1, 8);
    const auto v = random_matrix(rng, 1, 5);
    Tape tape;
    const auto out = tape.value(ramnet_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v), spec));
    MemoryState state(16, 5);
    const auto step = pdma_step(state, k.flat(), q.flat(), v.flat(), 0, spec.decoder, AddressingMode::relative);
    for (std::size_t j = 0; j < 5; ++j) CHECK(out(0, j) == step.output[j]);
}

TEST_CASE("full-capacity mixer matches the dense recurrence") {
    std::mt19937_64 rng(10);
    const DecoderConfig cfg(2, 3, 9);
    RamNetHeads spec;
    spec.heads = 2;
    spec.decoder = cfg;
    spec.value_dim = 3;
    spec.modes = {AddressingMode::absolute, AddressingMode::relative};
    const auto q = random_matrix(rng, 12, 12);
    const auto k = random_matrix(rng, 12, 12);
    const auto v = random_matrix(rng, 12, 6);
    Tape tape;
    const auto out = tape.value(ramnet_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v), spec));
    for (std::size_t h = 0; h < 2; ++h) {
        Matrix qh(12, 6), kh(12, 6), vh(12, 3);
        for (std::size_t t = 0; t < 12; ++t) {
            for (std::size_t j = 0; j < 6; ++j) {
                qh(t, j) = q(t, h * 6 + j);
                kh(t, j) = k(t, h * 6 + j);
            }
            for (std::size_t j = 0; j < 3; ++j) vh(t, j) = v(t, h * 3 + j);
        }
        DenseRamNetOptions opts;
        opts.mode = spec.modes[h];
        const auto ref = dense_ramnet_reference(qh, kh, vh, cfg, opts);
        for (std::size_t t = 0; t < 12; ++t) {
            for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(out(t, h * 3 + j) - ref(t, j)) < 1e-10);
        }
    }
}

TEST_CASE("mixer rejects inconsistent head layouts") {
    RamNetHeads spec;
    spec.heads = 2;
    spec.decoder = DecoderConfig(2, 4, 3);
    spec.value_dim = 4;
    spec.modes = {AddressingMode::absolute, AddressingMode::absolute};
    Tape tape;
    CHECK_THROWS_AS(ramnet_attention(tape, tape.constant(Matrix(3, 16)), tape.constant(Matrix(3, 15)),
                                     tape.constant(Matrix(3, 8)), spec),
                    ConfigError);
    spec.modes.pop_back();
    CHECK_THROWS_AS(ramnet_attention(tape, tape.constant(Matrix(3, 16)), tape.constant(Matrix(3, 16)),
                                     tape.constant(Matrix(3, 8)), spec),
                    ConfigError);
}

TEST_CASE("language-model loss endpoints") {
    Tape tape;
    const Var uniform = tape.constant(Matrix(4, 10, 0.3));
    const std::vector<int> targets{0, 3, 9, 5};
    CHECK(tape.value(lm_loss(tape, uniform, targets))(0, 0) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    Matrix sharp(4, 10, -200.0);
    for (std::size_t r = 0; r < 4; ++r) sharp(r, static_cast<std::size_t>(targets[r])) = 200.0;
    CHECK(tape.value(lm_loss(tape, tape.constant(sharp), targets))(0, 0) < 1e-100);
    CHECK_THROWS_AS(lm_loss(tape, uniform, std::vector<int>{0, 3, 10, 5}), ConfigError);
}

TEST_CASE("whole-model gradient agrees with finite differences") {
    std::mt19937_64 rng(11);
    for (auto kind : {MixerKind::ramnet, MixerKind::full_attention, MixerKind::linear_attention}) {
        auto cfg = small_config(kind);
        cfg.gamma = 0.5;
        Model m(cfg, 12);
        const auto tokens = random_tokens(rng, 10, 12);
        const auto targets = random_tokens(rng, 10, 12);
        ForwardOptions opts;
        opts.surrogate_decay = true;
        const auto loss_at = [&]() {
            Tape tape;
            GradBuffer grads;
            return tape.value(lm_loss(tape, m.forward(tape, grads, tokens, opts), targets))(0, 0);
        };
        GradBuffer grads;
        {
            Tape tape;
            tape.backward(lm_loss(tape, m.forward(tape, grads, tokens, opts), targets));
        }
        std::vector<double> point, analytic;
        for (std::size_t i = 0; i < m.params().size(); ++i) {
            const auto& p = m.params().value(i);
            point.insert(point.end(), p.flat().begin(), p.flat().end());
            analytic.insert(analytic.end(), grads[i].flat().begin(), grads[i].flat().end());
        }
        const auto f = [&](std::span<const double> x) {
            std::size_t off = 0;
            for (std::size_t i = 0; i < m.params().size(); ++i) {
                auto& p = m.params().value(i);
                std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(off), p.size(), p.data());
                off += p.size();
            }
            return loss_at();
        };
        GradCheckOptions gopts;
        gopts.rel_tol = 1e-4;
        gopts.abs_floor = 1e-5;
        gopts.max_coords = 400;
        gopts.seed = 3;
        const auto report = grad_check(f, point, analytic, gopts);
        f(point);
        CHECK_MESSAGE(report.passed(), to_string(kind) << ": " << report.summary());
    }
}

}  // TEST_SUITE
