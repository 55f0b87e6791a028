#ifndef DIGEST_MASKING_HPP
#define DIGEST_MASKING_HPP

#include <array>
#include <random>
#include <string>
#include <vector>

#include "digest/tensor.hpp"

namespace digest {

inline constexpr std::array<const char*, 4> kModalityNames = {"T1", "T1ce", "T2", "FLAIR"};

// Availability of the four modalities, ordered (T1, T1ce, T2, FLAIR).
// Never empty.
struct ModalityMask {
    std::array<bool, 4> bits{};

    int popcount() const {
        int n = 0;
        for (bool b : bits) n += b;
        return n;
    }
    bool any() const { return popcount() > 0; }
    bool all() const { return popcount() == 4; }

    std::string to_bitstring() const {
        std::string s(4, '0');
        for (int i = 0; i < 4; ++i) s[i] = bits[i] ? '1' : '0';
        return s;
    }
    static ModalityMask from_bitstring(const std::string& s);
    static ModalityMask full() { return ModalityMask{{true, true, true, true}}; }

    bool operator==(const ModalityMask&) const = default;
};

// Independent Bernoulli(0.5) per modality, redrawn until non-empty.
// Conditioned on non-empty, the result is uniform over the 15 subsets.
ModalityMask sample_mask(std::mt19937& rng, int n_total = 4);

// Zeroes the channels whose mask bit is false. batch is [B,4,D,H,W].
Tensor apply_mask(const Tensor& batch, const ModalityMask& mask);

// The 15 non-empty subsets in report row order: singles, pairs, triples,
// then the full set.
std::vector<ModalityMask> enumerate_subsets();

}  // namespace digest

#endif
