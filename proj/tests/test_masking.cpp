#include "doctest.h"

#include <map>
#include <random>

#include "digest/masking.hpp"

using namespace digest;

TEST_CASE("enumerate_subsets covers all 15 non-empty subsets in order") {
    const auto subsets = enumerate_subsets();
    REQUIRE(subsets.size() == 15);
    CHECK(subsets.front().to_bitstring() == "1000");  // T1 only
    CHECK(subsets.back().to_bitstring() == "1111");   // all four

    std::map<std::string, int> seen;
    int prev_pop = 0;
    for (const auto& m : subsets) {
        CHECK(m.any());
        CHECK(m.popcount() >= prev_pop);  // singles, pairs, triples, full
        prev_pop = m.popcount();
        ++seen[m.to_bitstring()];
    }
    CHECK(seen.size() == 15);
    for (const auto& [k, v] : seen) CHECK(v == 1);
}

TEST_CASE("sample_mask never returns the empty mask and hits every subset") {
    std::mt19937 rng(42);
    std::map<std::string, int> counts;
    const int draws = 15000;
    for (int i = 0; i < draws; ++i) {
        const ModalityMask m = sample_mask(rng);
        CHECK(m.any());
        ++counts[m.to_bitstring()];
    }
    CHECK(counts.size() == 15);
    CHECK(counts.count("0000") == 0);
}

TEST_CASE("marginal availability of each bit is 8/15 within 3 sigma") {
    std::mt19937 rng(7);
    const int draws = 60000;
    int bit_counts[4] = {0, 0, 0, 0};
    for (int i = 0; i < draws; ++i) {
        const ModalityMask m = sample_mask(rng);
        for (int b = 0; b < 4; ++b) bit_counts[b] += m.bits[b];
    }
    const double p = 8.0 / 15.0;
    const double sigma = std::sqrt(p * (1.0 - p) * draws);
    for (int b = 0; b < 4; ++b)
        CHECK(std::abs(bit_counts[b] - p * draws) < 3.0 * sigma);
}

TEST_CASE("apply_mask zeroes exactly the missing channels") {
    Tensor batch({2, 4, 2, 2, 2});
    std::mt19937 rng(1);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (auto& v : batch.vec()) v = dist(rng);

    SUBCASE("full mask is the identity") {
        const Tensor out = apply_mask(batch, ModalityMask::full());
        for (std::size_t i = 0; i < batch.numel(); ++i) CHECK(out[i] == batch[i]);
    }

    SUBCASE("missing T1ce is zeroed, other channels untouched") {
        const Tensor out = apply_mask(batch, ModalityMask::from_bitstring("1011"));
        const std::size_t dhw = 8;
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 4; ++c)
                for (std::size_t i = 0; i < dhw; ++i) {
                    const std::size_t idx = (static_cast<std::size_t>(b) * 4 + c) * dhw + i;
                    if (c == 1) CHECK(out[idx] == 0.0f);
                    else CHECK(out[idx] == batch[idx]);
                }
    }

    SUBCASE("matches the elementwise-multiply oracle") {
        const ModalityMask m = ModalityMask::from_bitstring("0100");
        const Tensor out = apply_mask(batch, m);
        const std::size_t dhw = 8;
        for (std::size_t i = 0; i < batch.numel(); ++i) {
            const int c = static_cast<int>((i / dhw) % 4);
            CHECK(out[i] == batch[i] * (m.bits[c] ? 1.0f : 0.0f));
        }
    }

    SUBCASE("idempotent") {
        const ModalityMask m = ModalityMask::from_bitstring("0110");
        const Tensor once = apply_mask(batch, m);
        const Tensor twice = apply_mask(once, m);
        for (std::size_t i = 0; i < once.numel(); ++i) CHECK(once[i] == twice[i]);
    }

    SUBCASE("wrong channel count is rejected") {
        Tensor bad({1, 3, 2, 2, 2});
        CHECK_THROWS_AS(apply_mask(bad, ModalityMask::full()), std::invalid_argument);
    }
}

TEST_CASE("bitstring round-trip and empty rejection") {
    CHECK(ModalityMask::from_bitstring("1011").to_bitstring() == "1011");
    CHECK_THROWS_AS(ModalityMask::from_bitstring("0000"), std::invalid_argument);
    CHECK_THROWS_AS(ModalityMask::from_bitstring("10"), std::invalid_argument);
    CHECK_THROWS_AS(ModalityMask::from_bitstring("10x1"), std::invalid_argument);
}
