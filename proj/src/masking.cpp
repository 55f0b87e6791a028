#include "digest/masking.hpp"

#include <stdexcept>

namespace digest {

ModalityMask ModalityMask::from_bitstring(const std::string& s) {
    if (s.size() != 4) throw std::invalid_argument("mask bitstring must have 4 characters: " + s);
    ModalityMask m;
    for (int i = 0; i < 4; ++i) {
        if (s[i] != '0' && s[i] != '1')
            throw std::invalid_argument("mask bitstring must be binary: " + s);
        m.bits[i] = s[i] == '1';
    }
    if (!m.any()) throw std::invalid_argument("mask must have at least one modality: " + s);
    return m;
}

ModalityMask sample_mask(std::mt19937& rng, int n_total) {
    if (n_total != 4) throw std::invalid_argument("sample_mask: only 4 modalities supported");
    std::bernoulli_distribution coin(0.5);
    ModalityMask m;
    do {
        for (int i = 0; i < n_total; ++i) m.bits[i] = coin(rng);
    } while (!m.any());
    return m;
}

Tensor apply_mask(const Tensor& batch, const ModalityMask& mask) {
    if (batch.ndim() != 5 || batch.dim(1) != 4)
        throw std::invalid_argument("apply_mask: expected [B,4,D,H,W], got " + batch.shape_str());
    Tensor out = batch;
    const std::size_t dhw =
        static_cast<std::size_t>(batch.dim(2)) * batch.dim(3) * batch.dim(4);
    for (int b = 0; b < batch.dim(0); ++b)
        for (int c = 0; c < 4; ++c)
            if (!mask.bits[c]) {
                float* p = out.data() + (static_cast<std::size_t>(b) * 4 + c) * dhw;
                std::fill(p, p + dhw, 0.0f);
            }
    return out;
}

std::vector<ModalityMask> enumerate_subsets() {
    static const char* order[15] = {
        "1000", "0100", "0010", "0001",                       // singles
        "1100", "1010", "1001", "0110", "0101", "0011",       // pairs
        "1110", "1101", "0111", "1011",                       // triples
        "1111",
    };
    std::vector<ModalityMask> out;
    out.reserve(15);
    for (const char* s : order) out.push_back(ModalityMask::from_bitstring(s));
    return out;
}

}  // namespace digest
