#include <doctest.h>

#include <array>
#include <random>
#include <set>
#include <tuple>

#include "ramnet/cape.hpp"
#include "ramnet/segment_kernel.hpp"

using namespace ramnet;

namespace {

struct Stream {
    std::vector<AccessEvent> events;
    std::vector<SparseAddress> writes, reads;
    Matrix values;
};

SparseAddress random_address(std::mt19937_64& rng, Slot M, std::size_t k) {
    std::uniform_int_distribution<Slot> pick(0, M - 1);
    std::set<Slot> chosen;
    while (chosen.size() < k) chosen.insert(pick(rng));
    const std::vector<Slot> all(chosen.begin(), chosen.end());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SparseAddress a;
    a.capacity = M;
    a.indices = all;
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        a.weights.push_back(0.01 + u(rng));
        total += a.weights.back();
    }
    const double mass = 0.2 + 0.8 * u(rng);
    for (double& w : a.weights) w *= mass / total;
    return a;
}

// Random per-step write and read addresses; a small M forces many revisits.
Stream random_stream(std::mt19937_64& rng, std::size_t T, std::size_t K, Slot M, std::size_t dv) {
    Stream s;
    s.values = Matrix(T, dv);
    std::normal_distribution<double> g(0.0, 1.0);
    for (double& x : s.values.flat()) x = g(rng);
    std::uint32_t entry = 0;
    for (std::size_t t = 0; t < T; ++t) {
        auto w = cyclic_shift(random_address(rng, M, K), static_cast<std::int64_t>(t));
        auto r = random_address(rng, M, K);
        for (std::size_t i = 0; i < w.size(); ++i) {
            s.events.push_back({w.indices[i], static_cast<std::int64_t>(t), AccessKind::write, w.weights[i], entry++});
        }
        for (std::size_t i = 0; i < r.size(); ++i) {
            s.events.push_back({r.indices[i], static_cast<std::int64_t>(t), AccessKind::read, r.weights[i], entry++});
        }
        s.writes.push_back(std::move(w));
        s.reads.push_back(std::move(r));
    }
    return s;
}

Matrix sequential(const Stream& s, Slot M, DecayRule decay, double eps) {
    const std::size_t T = s.values.rows();
    const std::size_t dv = s.values.cols();
    MemoryState state(M, dv, decay, eps);
    Matrix out(T, dv);
    for (std::size_t t = 0; t < T; ++t) {
        pdma_write(state, s.writes[t], s.values.row(t));
        pdma_read(state, s.reads[t], out.row(t));
    }
    return out;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.flat()[i] != b.flat()[i]) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("segment_kernel") {

TEST_CASE("empty stream gives no segments") {
    CHECK(build_segments({}).empty());
    CHECK(event_count({}) == 0);
}

TEST_CASE("single slot gives one segment in time order") {
    std::vector<AccessEvent> ev{{3, 2, AccessKind::read, 0.1, 0},
                                {3, 0, AccessKind::write, 0.5, 1},
                                {3, 2, AccessKind::write, 0.2, 2},
                                {3, 1, AccessKind::read, 0.3, 3}};
    // Same-step events keep their input order under the stable sort.
    const auto segs = build_segments(ev);
    REQUIRE(segs.size() == 1);
    CHECK(segs[0].slot == 3);
    REQUIRE(segs[0].events.size() == 4);
    CHECK(segs[0].events[0].entry == 1);
    CHECK(segs[0].events[1].entry == 3);
    CHECK(segs[0].events[2].entry == 0);
    CHECK(segs[0].events[3].entry == 2);
}

TEST_CASE("segments preserve the event multiset") {
    std::mt19937_64 rng(1);
    const auto s = random_stream(rng, 64, 4, 32, 2);
    const auto segs = build_segments(s.events);
    CHECK(event_count(segs) == s.events.size());
    std::vector<std::tuple<Slot, std::int64_t, int, double, std::uint32_t>> a, b;
    for (const auto& e : s.events) a.emplace_back(e.slot, e.t, static_cast<int>(e.kind), e.weight, e.entry);
    for (const auto& seg : segs) {
        for (std::size_t i = 0; i < seg.events.size(); ++i) {
            const auto& e = seg.events[i];
            b.emplace_back(seg.slot, e.t, static_cast<int>(e.kind), e.weight, e.entry);
            if (i > 0) CHECK(seg.events[i - 1].t <= e.t);
        }
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    for (std::size_t i = 1; i < segs.size(); ++i) CHECK(segs[i - 1].slot < segs[i].slot);
}

TEST_CASE("one write then one read equals a step pair") {
    Matrix values(2, 2);
    values(0, 0) = 2.0;
    values(0, 1) = -1.0;
    std::vector<AccessEvent> ev{{1, 0, AccessKind::write, 0.5, 0}, {1, 1, AccessKind::read, 0.8, 1}};
    const auto out = run_segments(build_segments(ev), values, 2, {DecayRule{1.0}, 1e-6, 0.25});
    MemoryState st(4, 2);
    SparseAddress w{{1}, {0.5}, 4}, r{{1}, {0.8}, 4};
    pdma_write(st, w, values.row(0));
    const auto o = pdma_read(st, r);
    CHECK(out(1, 0) == o[0]);
    CHECK(out(1, 1) == o[1]);
    CHECK(out(0, 0) == 0.0);
}

TEST_CASE("segment kernel is bit-identical to the sequential engine") {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 120; ++rep) {
        const Slot M = rep % 3 == 0 ? 16 : 64;
        const double gamma = std::array{0.0, 0.5, 1.0, 2.0}[rep % 4];
        const auto s = random_stream(rng, 64, 4, M, 3);
        const SegmentRunConfig cfg{DecayRule{gamma}, 1e-6, 1.0 / M};
        const auto want = sequential(s, M, DecayRule{gamma}, 1e-6);
        const auto segs = build_segments(s.events);
        CHECK(bit_equal(run_segments(segs, s.values, 64, cfg, Exec::serial), want));
        CHECK(bit_equal(run_segments(segs, s.values, 64, cfg, Exec::parallel), want));
    }
}

TEST_CASE("segment processing order does not change the output bits") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        const auto s = random_stream(rng, 48, 4, 32, 2);
        auto segs = build_segments(s.events);
        const SegmentRunConfig cfg{DecayRule{1.0}, 1e-6, 1.0 / 32};
        const auto base = run_segments(segs, s.values, 48, cfg, Exec::serial);
        std::shuffle(segs.begin(), segs.end(), rng);
        CHECK(bit_equal(run_segments(segs, s.values, 48, cfg, Exec::serial), base));
        CHECK(bit_equal(run_segments(segs, s.values, 48, cfg, Exec::parallel), base));
    }
}

TEST_CASE("out-of-order events are rejected") {
    Matrix values(3, 1);
    SlotSegment seg{0, {{2, AccessKind::write, 0.5, 0}, {1, AccessKind::write, 0.5, 1}}};
    CHECK_THROWS_AS(run_segments(std::vector<SlotSegment>{seg}, values, 3, {}), NumericError);
    SlotSegment rw{0, {{1, AccessKind::read, 0.5, 0}, {1, AccessKind::write, 0.5, 1}}};
    CHECK_THROWS_AS(run_segments(std::vector<SlotSegment>{rw}, values, 3, {}), NumericError);
    SlotSegment late{0, {{5, AccessKind::write, 0.5, 0}}};
    CHECK_THROWS_AS(run_segments(std::vector<SlotSegment>{late}, values, 3, {}), NumericError);
}

TEST_CASE("work is proportional to the event count") {
    std::mt19937_64 rng(4);
    const auto s = random_stream(rng, 64, 4, 1u << 20, 2);
    const auto segs = build_segments(s.events);
    // One segment per distinct slot touched, never per slot of M.
    CHECK(segs.size() <= 2 * 4 * 64);
    CHECK(event_count(segs) == 2 * 4 * 64);
}

}  // TEST_SUITE
