#include <doctest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "ramnet/cape.hpp"

using namespace ramnet;

namespace {

// Dyadic weights make every product and partial sum exact, so equalities of
// inner products hold bit for bit regardless of summation order.
SparseAddress random_address(std::mt19937_64& rng, Slot M, std::size_t k, bool dyadic = false) {
    std::vector<Slot> all(M);
    for (Slot i = 0; i < M; ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(std::min<std::size_t>(k, M));
    std::sort(all.begin(), all.end());
    std::uniform_real_distribution<double> u(0.01, 1.0);
    SparseAddress a;
    a.capacity = M;
    a.indices = all;
    double total = 0.0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        a.weights.push_back(u(rng));
        total += a.weights.back();
    }
    for (double& w : a.weights) w /= total * 1.25;
    if (dyadic) {
        std::uniform_int_distribution<int> n(1, 31);
        for (double& w : a.weights) w = n(rng) / 256.0;
    }
    return a;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_SUITE("cape") {

TEST_CASE("effective shift is t mod M") {
    CHECK(ShiftSpec{0, 8}.effective() == 0);
    CHECK(ShiftSpec{11, 8}.effective() == 3);
    CHECK(ShiftSpec{16, 8}.effective() == 0);
    CHECK(ShiftSpec{-1, 8}.effective() == 7);
}

TEST_CASE("single-entry example follows the defining equation") {
    SparseAddress a;
    a.capacity = 8;
    a.indices = {6};
    a.weights = {0.5};
    const auto s = cyclic_shift(a, 3);
    CHECK(s.indices == std::vector<Slot>{3});
    CHECK(s.weights == std::vector<double>{0.5});
}

TEST_CASE("zero shift and a full period are the identity") {
    std::mt19937_64 rng(1);
    const auto a = random_address(rng, 16, 5);
    const auto z = cyclic_shift(a, 0);
    CHECK(z.indices == a.indices);
    CHECK(z.weights == a.weights);
    const auto p = apply_positional(a, 16, AddressingMode::relative);
    CHECK(p.indices == a.indices);
    CHECK(p.weights == a.weights);
}

TEST_CASE("absolute mode returns the input verbatim") {
    std::mt19937_64 rng(2);
    const auto a = random_address(rng, 32, 6);
    for (std::int64_t t : {0, 1, 7, 100}) {
        const auto p = apply_positional(a, t, AddressingMode::absolute);
        CHECK(p.indices == a.indices);
        CHECK(p.weights == a.weights);
    }
}

TEST_CASE("relative mode matches the dense shift oracle") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::int64_t> step(0, 1000);
    for (int rep = 0; rep < 500; ++rep) {
        const Slot M = 1 + static_cast<Slot>(rep % 37);
        const auto a = random_address(rng, M, 1 + rep % 9);
        const auto t = step(rng);
        const auto got = apply_positional(a, t, AddressingMode::relative).dense();
        const auto want = oracle::shift(a.dense(), t);
        CHECK(got == want);
    }
}

TEST_CASE("shifts compose additively") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::int64_t> step(0, 500);
    for (int rep = 0; rep < 300; ++rep) {
        const auto a = random_address(rng, 64, 8);
        const auto t1 = step(rng);
        const auto t2 = step(rng);
        const auto two = cyclic_shift(cyclic_shift(a, t1), t2);
        const auto one = cyclic_shift(a, t1 + t2);
        CHECK(two.indices == one.indices);
        CHECK(two.weights == one.weights);
    }
}

TEST_CASE("shift preserves the weight multiset and address invariants") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 300; ++rep) {
        const auto a = random_address(rng, 50, 7);
        const auto s = cyclic_shift(a, rep * 13);
        CHECK_NOTHROW(s.validate(7));
        std::multiset<double> wa(a.weights.begin(), a.weights.end());
        std::multiset<double> ws(s.weights.begin(), s.weights.end());
        CHECK(wa == ws);
    }
}

TEST_CASE("source positions identify the origin of each shifted entry") {
    std::mt19937_64 rng(6);
    const auto a = random_address(rng, 20, 6);
    std::vector<std::size_t> src;
    const auto s = cyclic_shift(a, 9, src);
    REQUIRE(src.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(s.weights[i] == a.weights[src[i]]);
        CHECK((s.indices[i] + 9) % 20 == a.indices[src[i]]);
    }
}

TEST_CASE("read/write interaction depends only on the relative distance") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::int64_t> step(0, 10000);
    for (int rep = 0; rep < 2000; ++rep) {
        const auto a = random_address(rng, 64, 8, true);
        const auto b = random_address(rng, 64, 8, true);
        const auto t = step(rng), tp = step(rng), s = step(rng);
        const double lhs = dot(cyclic_shift(a, t + s).dense(), cyclic_shift(b, tp + s).dense());
        const double rhs = dot(cyclic_shift(a, t).dense(), cyclic_shift(b, tp).dense());
        CHECK(lhs == rhs);
    }
}

TEST_CASE("addressing modes parse and print") {
    CHECK(parse_addressing_mode("relative") == AddressingMode::relative);
    CHECK(parse_addressing_mode("absolute") == AddressingMode::absolute);
    CHECK(std::string(to_string(AddressingMode::relative)) == "relative");
    CHECK_THROWS_AS(parse_addressing_mode("cyclic"), ConfigError);
}

}  // TEST_SUITE
