#include "digest/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "digest/masking.hpp"
#include "digest/nifti.hpp"

namespace fs = std::filesystem;

namespace digest {

namespace {

constexpr std::array<float, 4> kBrainBaseline = {80.0f, 90.0f, 100.0f, 110.0f};
constexpr std::array<const char*, 4> kFileSuffix = {"t1", "t1ce", "t2", "flair"};

int tissue_column(float label) {
    if (label == 1.0f) return 0;  // NCR
    if (label == 2.0f) return 1;  // ED
    if (label == 4.0f) return 2;  // ET
    return -1;
}

}  // namespace

void MultiModalVolume::validate() const {
    if (intensities.ndim() != 4 || intensities.dim(0) != 4)
        throw std::invalid_argument("MultiModalVolume: expected [4,D,H,W], got " +
                                    intensities.shape_str());
    if (!intensities.all_finite())
        throw std::invalid_argument("MultiModalVolume: non-finite intensity");
}

void LabelVolume::validate() const {
    if (labels.ndim() != 3)
        throw std::invalid_argument("LabelVolume: expected [D,H,W], got " + labels.shape_str());
    for (float v : labels.vec())
        if (v != 0.0f && v != 1.0f && v != 2.0f && v != 4.0f)
            throw std::invalid_argument("LabelVolume: label id outside {0,1,2,4}: " +
                                        std::to_string(v));
}

void PhantomSpec::validate() const {
    for (int s : volume_size)
        if (s < 4) throw std::invalid_argument("PhantomSpec: volume_size too small");
    if (num_lesions < 0) throw std::invalid_argument("PhantomSpec: negative num_lesions");
    if (lesion_radius_min <= 0.0f || lesion_radius_max < lesion_radius_min)
        throw std::invalid_argument("PhantomSpec: invalid lesion radius range");
    const int min_size = *std::min_element(volume_size.begin(), volume_size.end());
    if (lesion_radius_max > static_cast<float>(min_size) / 2.0f)
        throw std::invalid_argument("PhantomSpec: lesion radius exceeds half the volume size");
    if (noise_std < 0.0f) throw std::invalid_argument("PhantomSpec: negative noise_std");
}

std::pair<MultiModalVolume, LabelVolume> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const int d = spec.volume_size[0], h = spec.volume_size[1], w = spec.volume_size[2];
    const std::array<float, 3> center = {(d - 1) / 2.0f, (h - 1) / 2.0f, (w - 1) / 2.0f};
    const std::array<float, 3> brain_axes = {0.45f * d, 0.45f * h, 0.45f * w};
    const float brain_min_axis = *std::min_element(brain_axes.begin(), brain_axes.end());

    std::mt19937 rng(spec.seed);

    // Lesion geometry.
    std::vector<LesionSpec> lesions = spec.fixed_lesions;
    if (lesions.empty() && spec.num_lesions > 0) {
        std::uniform_real_distribution<float> rad(spec.lesion_radius_min, spec.lesion_radius_max);
        std::uniform_real_distribution<float> scale(0.8f, 1.25f);
        for (int i = 0; i < spec.num_lesions; ++i) {
            LesionSpec lesion;
            lesion.radius = rad(rng);
            for (auto& s : lesion.axis_scale) s = scale(rng);
            const float max_extent =
                lesion.radius * *std::max_element(lesion.axis_scale.begin(),
                                                  lesion.axis_scale.end());
            if (max_extent > 0.85f * brain_min_axis)
                throw std::invalid_argument(
                    "generate_phantom: lesion of radius " + std::to_string(lesion.radius) +
                    " cannot fit inside the brain region of a " + std::to_string(d) + "x" +
                    std::to_string(h) + "x" + std::to_string(w) + " volume");
            bool placed = false;
            for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
                for (int a = 0; a < 3; ++a) {
                    const float extent = lesion.radius * lesion.axis_scale[a];
                    const float slack = std::max(0.0f, brain_axes[a] - extent);
                    std::uniform_real_distribution<float> pos(center[a] - slack,
                                                              center[a] + slack);
                    lesion.center[a] = pos(rng);
                }
                // Conservative containment: lesion bounding box inside the
                // inscribed box of the brain ellipsoid along each axis.
                float norm = 0.0f;
                for (int a = 0; a < 3; ++a) {
                    const float extent = lesion.radius * lesion.axis_scale[a];
                    const float off = std::abs(lesion.center[a] - center[a]) + extent;
                    const float t = off / brain_axes[a];
                    norm = std::max(norm, t);
                }
                placed = norm <= 1.0f;
            }
            if (!placed)
                throw std::invalid_argument("generate_phantom: failed to place lesion " +
                                            std::to_string(i) + " inside the brain region");
            lesions.push_back(lesion);
        }
    }
    for (const auto& lesion : lesions) {
        for (int a = 0; a < 3; ++a) {
            const float extent = lesion.radius * lesion.axis_scale[a];
            if (lesion.center[a] - extent < 0.0f ||
                lesion.center[a] + extent > static_cast<float>(spec.volume_size[a] - 1))
                throw std::invalid_argument(
                    "generate_phantom: fixed lesion does not fit in the volume");
        }
    }

    // Labels: later lesions overwrite earlier ones.
    LabelVolume lab{Tensor({d, h, w})};
    for (const auto& lesion : lesions) {
        const float rz = lesion.radius * lesion.axis_scale[0];
        const float ry = lesion.radius * lesion.axis_scale[1];
        const float rx = lesion.radius * lesion.axis_scale[2];
        const int d0 = std::max(0, static_cast<int>(std::floor(lesion.center[0] - rz)));
        const int d1 = std::min(d - 1, static_cast<int>(std::ceil(lesion.center[0] + rz)));
        const int h0 = std::max(0, static_cast<int>(std::floor(lesion.center[1] - ry)));
        const int h1 = std::min(h - 1, static_cast<int>(std::ceil(lesion.center[1] + ry)));
        const int w0 = std::max(0, static_cast<int>(std::floor(lesion.center[2] - rx)));
        const int w1 = std::min(w - 1, static_cast<int>(std::ceil(lesion.center[2] + rx)));
        for (int z = d0; z <= d1; ++z)
            for (int y = h0; y <= h1; ++y)
                for (int x = w0; x <= w1; ++x) {
                    const float dz = (z - lesion.center[0]) / rz;
                    const float dy = (y - lesion.center[1]) / ry;
                    const float dx = (x - lesion.center[2]) / rx;
                    const float rho = std::sqrt(dz * dz + dy * dy + dx * dx);
                    if (rho > 1.0f) continue;
                    float id = 2.0f;                      // ED halo
                    if (rho <= kTcFraction) id = 4.0f;    // ET rim
                    if (rho <= kNcrFraction) id = 1.0f;   // NCR core
                    lab.labels[(static_cast<std::size_t>(z) * h + y) * w + x] = id;
                }
    }

    // Intensities: brain baseline + tissue contrast + noise, zero outside.
    MultiModalVolume vol{Tensor({4, d, h, w})};
    std::normal_distribution<float> noise(0.0f, 1.0f);
    const std::size_t plane = static_cast<std::size_t>(d) * h * w;
    for (int m = 0; m < 4; ++m) {
        float* out = vol.intensities.data() + static_cast<std::size_t>(m) * plane;
        std::size_t i = 0;
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x, ++i) {
                    const float bz = (z - center[0]) / brain_axes[0];
                    const float by = (y - center[1]) / brain_axes[1];
                    const float bx = (x - center[2]) / brain_axes[2];
                    if (bz * bz + by * by + bx * bx > 1.0f) continue;
                    float v = kBrainBaseline[m];
                    const int col = tissue_column(lab.labels[i]);
                    if (col >= 0) v += spec.contrast[m][col];
                    if (spec.noise_std > 0.0f) v += spec.noise_std * noise(rng);
                    out[i] = v;
                }
    }
    return {std::move(vol), std::move(lab)};
}

NestedTargets nested_targets(const LabelVolume& labels) {
    labels.validate();
    const std::size_t n = labels.labels.numel();
    NestedTargets t;
    std::vector<int> shape = {3};
    for (int dd : labels.labels.shape()) shape.push_back(dd);
    t.maps = Tensor(shape);
    float* et = t.maps.data();
    float* tc = et + n;
    float* wt = tc + n;
    for (std::size_t i = 0; i < n; ++i) {
        const float l = labels.labels[i];
        et[i] = l == 4.0f ? 1.0f : 0.0f;
        tc[i] = (l == 4.0f || l == 1.0f) ? 1.0f : 0.0f;
        wt[i] = (l == 4.0f || l == 1.0f || l == 2.0f) ? 1.0f : 0.0f;
    }
    return t;
}

std::pair<MultiModalVolume, LabelVolume> preprocess(const MultiModalVolume& vol,
                                                    const LabelVolume& labels,
                                                    const std::array<int, 3>& crop, bool train,
                                                    unsigned seed) {
    vol.validate();
    labels.validate();
    const int d = vol.intensities.dim(1), h = vol.intensities.dim(2), w = vol.intensities.dim(3);
    if (labels.labels.shape() != std::vector<int>{d, h, w})
        throw std::invalid_argument("preprocess: label shape mismatch");

    // Bounding box of nonzero intensity over the union of channels.
    int lo[3] = {d, h, w}, hi[3] = {-1, -1, -1};
    const std::size_t plane = static_cast<std::size_t>(d) * h * w;
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t i = (static_cast<std::size_t>(z) * h + y) * w + x;
                bool nz = false;
                for (int m = 0; m < 4 && !nz; ++m)
                    nz = vol.intensities[static_cast<std::size_t>(m) * plane + i] != 0.0f;
                if (!nz) continue;
                lo[0] = std::min(lo[0], z); hi[0] = std::max(hi[0], z);
                lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
                lo[2] = std::min(lo[2], x); hi[2] = std::max(hi[2], x);
            }
    if (hi[0] < 0) throw std::invalid_argument("preprocess: volume has no nonzero voxels");

    // Widen the box to at least the crop size (the brain can be smaller than
    // the requested crop), staying inside the volume.
    const int vsize[3] = {d, h, w};
    for (int a = 0; a < 3; ++a) {
        if (crop[a] > vsize[a])
            throw std::invalid_argument("preprocess: crop size " + std::to_string(crop[a]) +
                                        " exceeds volume size " + std::to_string(vsize[a]) +
                                        " on axis " + std::to_string(a));
        const int bsize = hi[a] - lo[a] + 1;
        if (bsize >= crop[a]) continue;
        const int need = crop[a] - bsize;
        lo[a] = std::max(0, lo[a] - need / 2);
        hi[a] = std::min(vsize[a] - 1, lo[a] + crop[a] - 1);
        lo[a] = hi[a] - crop[a] + 1;
    }
    const int bd = hi[0] - lo[0] + 1, bh = hi[1] - lo[1] + 1, bw = hi[2] - lo[2] + 1;

    // Bounding-box crop.
    Tensor bvol({4, bd, bh, bw});
    Tensor blab({bd, bh, bw});
    for (int z = 0; z < bd; ++z)
        for (int y = 0; y < bh; ++y)
            for (int x = 0; x < bw; ++x) {
                const std::size_t src = (static_cast<std::size_t>(z + lo[0]) * h + (y + lo[1])) * w +
                                        (x + lo[2]);
                const std::size_t dst = (static_cast<std::size_t>(z) * bh + y) * bw + x;
                blab[dst] = labels.labels[src];
                for (int m = 0; m < 4; ++m)
                    bvol[static_cast<std::size_t>(m) * bd * bh * bw + dst] =
                        vol.intensities[static_cast<std::size_t>(m) * plane + src];
            }

    // Per-channel z-score over the channel's nonzero voxels; zeros stay zero.
    const std::size_t bplane = static_cast<std::size_t>(bd) * bh * bw;
    for (int m = 0; m < 4; ++m) {
        float* ch = bvol.data() + static_cast<std::size_t>(m) * bplane;
        double sum = 0.0, sq = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < bplane; ++i)
            if (ch[i] != 0.0f) {
                sum += ch[i];
                sq += static_cast<double>(ch[i]) * ch[i];
                ++count;
            }
        if (count == 0) continue;
        const double mean = sum / static_cast<double>(count);
        const double var = std::max(0.0, sq / static_cast<double>(count) - mean * mean);
        const double inv = 1.0 / std::sqrt(var + 1e-8);
        for (std::size_t i = 0; i < bplane; ++i)
            if (ch[i] != 0.0f) ch[i] = static_cast<float>((ch[i] - mean) * inv);
    }

    // Final crop: random in train mode, centered otherwise.
    std::array<int, 3> off{};
    if (train) {
        std::mt19937 rng(seed);
        const int bsize[3] = {bd, bh, bw};
        for (int a = 0; a < 3; ++a) {
            std::uniform_int_distribution<int> dist(0, bsize[a] - crop[a]);
            off[a] = dist(rng);
        }
    } else {
        off = {(bd - crop[0]) / 2, (bh - crop[1]) / 2, (bw - crop[2]) / 2};
    }

    MultiModalVolume out_vol{Tensor({4, crop[0], crop[1], crop[2]}), vol.voxel_spacing};
    LabelVolume out_lab{Tensor({crop[0], crop[1], crop[2]})};
    const std::size_t cplane = static_cast<std::size_t>(crop[0]) * crop[1] * crop[2];
    for (int z = 0; z < crop[0]; ++z)
        for (int y = 0; y < crop[1]; ++y)
            for (int x = 0; x < crop[2]; ++x) {
                const std::size_t src =
                    (static_cast<std::size_t>(z + off[0]) * bh + (y + off[1])) * bw + (x + off[2]);
                const std::size_t dst = (static_cast<std::size_t>(z) * crop[1] + y) * crop[2] + x;
                out_lab.labels[dst] = blab[src];
                for (int m = 0; m < 4; ++m)
                    out_vol.intensities[static_cast<std::size_t>(m) * cplane + dst] =
                        bvol[static_cast<std::size_t>(m) * bplane + src];
            }
    return {std::move(out_vol), std::move(out_lab)};
}

void save_case(const std::string& case_dir, const std::string& case_name,
               const MultiModalVolume& vol, const LabelVolume& labels) {
    vol.validate();
    labels.validate();
    fs::create_directories(case_dir);
    const int d = vol.intensities.dim(1), h = vol.intensities.dim(2), w = vol.intensities.dim(3);
    const std::size_t plane = static_cast<std::size_t>(d) * h * w;
    for (int m = 0; m < 4; ++m) {
        Tensor ch({d, h, w});
        std::copy_n(vol.intensities.data() + static_cast<std::size_t>(m) * plane, plane,
                    ch.data());
        write_nifti(case_dir + "/" + case_name + "_" + kFileSuffix[m] + ".nii.gz", ch,
                    vol.voxel_spacing);
    }
    write_nifti(case_dir + "/" + case_name + "_seg.nii.gz", labels.labels, vol.voxel_spacing);
}

std::pair<MultiModalVolume, LabelVolume> load_brats_case(const std::string& case_dir) {
    if (!fs::is_directory(case_dir))
        throw std::runtime_error("not a case directory: " + case_dir);

    std::array<std::string, 4> mod_paths;
    std::string seg_path;
    for (const auto& entry : fs::directory_iterator(case_dir)) {
        const std::string name = entry.path().filename().string();
        for (int m = 0; m < 4; ++m)
            if (name.ends_with(std::string("_") + kFileSuffix[m] + ".nii.gz"))
                mod_paths[m] = entry.path().string();
        if (name.ends_with("_seg.nii.gz")) seg_path = entry.path().string();
    }
    for (int m = 0; m < 4; ++m)
        if (mod_paths[m].empty())
            throw std::runtime_error(std::string("missing ") + kModalityNames[m] +
                                     " volume in " + case_dir);
    if (seg_path.empty()) throw std::runtime_error("missing segmentation volume in " + case_dir);

    MultiModalVolume vol;
    for (int m = 0; m < 4; ++m) {
        std::array<float, 3> spacing;
        Tensor ch = read_nifti(mod_paths[m], &spacing);
        if (m == 0) {
            std::vector<int> shape = {4};
            for (int dd : ch.shape()) shape.push_back(dd);
            vol.intensities = Tensor(shape);
            vol.voxel_spacing = spacing;
        } else if (ch.numel() * 4 != vol.intensities.numel()) {
            throw std::runtime_error("modality shape mismatch in " + case_dir);
        }
        std::copy_n(ch.data(), ch.numel(),
                    vol.intensities.data() + static_cast<std::size_t>(m) * ch.numel());
    }
    LabelVolume lab{read_nifti(seg_path)};
    if (lab.labels.numel() * 4 != vol.intensities.numel())
        throw std::runtime_error("segmentation shape mismatch in " + case_dir);
    vol.validate();
    lab.validate();
    return {std::move(vol), std::move(lab)};
}

std::vector<std::string> list_cases(const std::string& dataset_dir) {
    if (!fs::is_directory(dataset_dir))
        throw std::runtime_error("not a dataset directory: " + dataset_dir);
    std::vector<std::string> out;
    for (const auto& entry : fs::directory_iterator(dataset_dir))
        if (entry.is_directory()) out.push_back(entry.path().string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace digest
