#ifndef DIGEST_DATA_HPP
#define DIGEST_DATA_HPP

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "digest/tensor.hpp"

namespace digest {

// 4-channel intensity volume, channels ordered (T1, T1ce, T2, FLAIR).
struct MultiModalVolume {
    Tensor intensities;  // [4, D, H, W]
    std::array<float, 3> voxel_spacing{1.0f, 1.0f, 1.0f};

    void validate() const;
};

// BraTS-convention label ids: 0 background, 1 NCR/NET, 2 ED, 4 ET.
struct LabelVolume {
    Tensor labels;  // [D, H, W]

    void validate() const;
};

// Binary ET/TC/WT maps, nested: et <= tc <= wt voxelwise.
struct NestedTargets {
    Tensor maps;  // [3, D, H, W], channel order (ET, TC, WT)

    const float* et() const { return maps.data(); }
    const float* tc() const { return maps.data() + plane(); }
    const float* wt() const { return maps.data() + 2 * plane(); }
    std::size_t plane() const { return maps.numel() / 3; }
};

struct LesionSpec {
    std::array<float, 3> center;       // voxel coordinates (d, h, w)
    float radius;                      // outer (edema) radius, voxels
    std::array<float, 3> axis_scale{1.0f, 1.0f, 1.0f};
};

// Lesions are concentric ellipsoids: NCR core, ET rim, ED halo, with the
// core/rim boundaries at fixed fractions of the outer radius.
inline constexpr float kNcrFraction = 0.35f;
inline constexpr float kTcFraction = 0.65f;

struct PhantomSpec {
    std::array<int, 3> volume_size{32, 32, 32};
    int num_lesions = 1;
    float lesion_radius_min = 4.0f;
    float lesion_radius_max = 8.0f;
    // Rows: modality (T1, T1ce, T2, FLAIR); columns: tissue (NCR, ED, ET)
    // contrast over the brain baseline. TC contrast lives mainly in the
    // T1ce channel; WT contrast lives mainly in T2/FLAIR.
    std::array<std::array<float, 3>, 4> contrast{{
        {-8.0f, 4.0f, 6.0f},     // T1
        {-15.0f, 5.0f, 40.0f},   // T1ce
        {10.0f, 25.0f, 12.0f},   // T2
        {8.0f, 35.0f, 10.0f},    // FLAIR
    }};
    float noise_std = 5.0f;
    unsigned seed = 0;
    // When set, lesion geometry is taken verbatim instead of sampled.
    std::vector<LesionSpec> fixed_lesions;

    void validate() const;
};

std::pair<MultiModalVolume, LabelVolume> generate_phantom(const PhantomSpec& spec);

// et = (label==4); tc = et | (label==1); wt = tc | (label==2).
NestedTargets nested_targets(const LabelVolume& labels);

// Bounding-box crop over the union of nonzero channels, per-channel
// z-score over nonzero voxels, then a random (train) or center crop.
std::pair<MultiModalVolume, LabelVolume> preprocess(const MultiModalVolume& vol,
                                                    const LabelVolume& labels,
                                                    const std::array<int, 3>& crop, bool train,
                                                    unsigned seed);

// BraTS-style case directory: <name>_t1 / _t1ce / _t2 / _flair / _seg
// .nii.gz files.
void save_case(const std::string& case_dir, const std::string& case_name,
               const MultiModalVolume& vol, const LabelVolume& labels);
std::pair<MultiModalVolume, LabelVolume> load_brats_case(const std::string& case_dir);

// Sorted list of case subdirectories under a dataset directory.
std::vector<std::string> list_cases(const std::string& dataset_dir);

}  // namespace digest

#endif
