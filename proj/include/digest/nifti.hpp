#ifndef DIGEST_NIFTI_HPP
#define DIGEST_NIFTI_HPP

#include <array>
#include <string>

#include "digest/tensor.hpp"

namespace digest {

// Minimal NIfTI-1 gzip-compressed volume I/O. Volumes are stored float32;
// the reader also accepts uint8/int16/uint16/int32/float64 and applies
// scl_slope/scl_inter when set. Tensor layout is [D,H,W] with W fastest,
// mapped to NIfTI (x,y,z) = (W,H,D).
void write_nifti(const std::string& path, const Tensor& volume,
                 const std::array<float, 3>& spacing);

Tensor read_nifti(const std::string& path, std::array<float, 3>* spacing = nullptr);

}  // namespace digest

#endif
