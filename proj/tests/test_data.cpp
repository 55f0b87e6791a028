#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>

#include "digest/data.hpp"
#include "digest/nifti.hpp"

using namespace digest;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("digest_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("phantom with no lesions is background plus noise") {
    PhantomSpec spec;
    spec.num_lesions = 0;
    spec.noise_std = 2.0f;
    spec.seed = 3;
    auto [vol, lab] = generate_phantom(spec);
    for (float v : lab.labels.vec()) CHECK(v == 0.0f);
    // Center voxel is inside the brain for every modality; its intensity is
    // baseline + noise, i.e. nonzero and within a few sigma of baseline.
    const std::size_t plane = lab.labels.numel();
    const std::size_t center = (static_cast<std::size_t>(16) * 32 + 16) * 32 + 16;
    for (int m = 0; m < 4; ++m) {
        const float v = vol.intensities[static_cast<std::size_t>(m) * plane + center];
        CHECK(v > 50.0f);
        CHECK(v < 150.0f);
    }
}

TEST_CASE("phantom generation is deterministic for a fixed seed") {
    PhantomSpec spec;
    spec.num_lesions = 2;
    spec.seed = 7;
    auto [v1, l1] = generate_phantom(spec);
    auto [v2, l2] = generate_phantom(spec);
    REQUIRE(v1.intensities.numel() == v2.intensities.numel());
    CHECK(std::memcmp(v1.intensities.data(), v2.intensities.data(),
                      v1.intensities.numel() * sizeof(float)) == 0);
    CHECK(std::memcmp(l1.labels.data(), l2.labels.data(),
                      l1.labels.numel() * sizeof(float)) == 0);
}

TEST_CASE("fixed centered sphere matches the brute-force geometric oracle") {
    PhantomSpec spec;
    spec.volume_size = {32, 32, 32};
    spec.noise_std = 0.0f;
    spec.fixed_lesions.push_back({{15.5f, 15.5f, 15.5f}, 5.0f, {1.0f, 1.0f, 1.0f}});
    auto [vol, lab] = generate_phantom(spec);

    std::size_t expect_ncr = 0, expect_ed = 0, expect_et = 0;
    std::size_t got_ncr = 0, got_ed = 0, got_et = 0;
    for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const double rho = std::sqrt((z - 15.5) * (z - 15.5) + (y - 15.5) * (y - 15.5) +
                                             (x - 15.5) * (x - 15.5)) /
                                   5.0;
                if (rho <= kNcrFraction) ++expect_ncr;
                else if (rho <= kTcFraction) ++expect_et;
                else if (rho <= 1.0) ++expect_ed;
                const float l = lab.labels[(static_cast<std::size_t>(z) * 32 + y) * 32 + x];
                if (l == 1.0f) ++got_ncr;
                else if (l == 4.0f) ++got_et;
                else if (l == 2.0f) ++got_ed;
            }
    CHECK(got_ncr == expect_ncr);
    CHECK(got_et == expect_et);
    CHECK(got_ed == expect_ed);
    CHECK(got_ncr > 0);
    CHECK(got_et > 0);
    CHECK(got_ed > 0);
}

TEST_CASE("oversized lesion is rejected with a descriptive error") {
    PhantomSpec spec;
    spec.volume_size = {16, 16, 16};
    spec.lesion_radius_min = 7.5f;
    spec.lesion_radius_max = 8.0f;
    CHECK_THROWS_WITH_AS(generate_phantom(spec), doctest::Contains("cannot fit"),
                         std::invalid_argument);
}

TEST_CASE("nested_targets definition and nesting invariant") {
    SUBCASE("all background -> three empty maps") {
        LabelVolume lab{Tensor({4, 4, 4})};
        const NestedTargets t = nested_targets(lab);
        for (float v : t.maps.vec()) CHECK(v == 0.0f);
    }

    SUBCASE("single ET voxel is set in all three maps") {
        LabelVolume lab{Tensor({4, 4, 4})};
        lab.labels[13] = 4.0f;
        const NestedTargets t = nested_targets(lab);
        CHECK(t.et()[13] == 1.0f);
        CHECK(t.tc()[13] == 1.0f);
        CHECK(t.wt()[13] == 1.0f);
    }

    SUBCASE("random labels match the per-voxel definition and nest") {
        std::mt19937 rng(23);
        const float ids[4] = {0.0f, 1.0f, 2.0f, 4.0f};
        std::uniform_int_distribution<int> pick(0, 3);
        LabelVolume lab{Tensor({6, 5, 4})};
        for (auto& v : lab.labels.vec()) v = ids[pick(rng)];
        const NestedTargets t = nested_targets(lab);
        for (std::size_t i = 0; i < lab.labels.numel(); ++i) {
            const float l = lab.labels[i];
            CHECK(t.et()[i] == (l == 4.0f ? 1.0f : 0.0f));
            CHECK(t.tc()[i] == ((l == 4.0f || l == 1.0f) ? 1.0f : 0.0f));
            CHECK(t.wt()[i] == ((l == 4.0f || l == 1.0f || l == 2.0f) ? 1.0f : 0.0f));
            CHECK(t.et()[i] <= t.tc()[i]);
            CHECK(t.tc()[i] <= t.wt()[i]);
        }
    }

    SUBCASE("invalid label id is rejected") {
        LabelVolume lab{Tensor({2, 2, 2})};
        lab.labels[0] = 3.0f;
        CHECK_THROWS_AS(nested_targets(lab), std::invalid_argument);
    }
}

TEST_CASE("phantom targets nest by construction") {
    PhantomSpec spec;
    spec.num_lesions = 3;
    spec.seed = 19;
    auto [vol, lab] = generate_phantom(spec);
    const NestedTargets t = nested_targets(lab);
    for (std::size_t i = 0; i < t.plane(); ++i) {
        CHECK(t.et()[i] <= t.tc()[i]);
        CHECK(t.tc()[i] <= t.wt()[i]);
    }
}

TEST_CASE("preprocess normalizes nonzero voxels and preserves finiteness") {
    PhantomSpec spec;
    spec.num_lesions = 1;
    spec.seed = 5;
    auto [vol, lab] = generate_phantom(spec);

    SUBCASE("crop equal to the brain bounding box: z-score holds on output") {
        // The 32^3 phantom brain spans 0.9 x 32 ~ 29 voxels; find the box first.
        auto [big, biglab] = preprocess(vol, lab, {2, 2, 2}, false, 0);  // probe only
        // Determine the bounding box size by scanning nonzero extents.
        int lo[3] = {32, 32, 32}, hi[3] = {-1, -1, -1};
        for (int z = 0; z < 32; ++z)
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    bool nz = false;
                    for (int m = 0; m < 4 && !nz; ++m)
                        nz = vol.intensities[((static_cast<std::size_t>(m) * 32 + z) * 32 + y) *
                                                 32 + x] != 0.0f;
                    if (!nz) continue;
                    lo[0] = std::min(lo[0], z); hi[0] = std::max(hi[0], z);
                    lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
                    lo[2] = std::min(lo[2], x); hi[2] = std::max(hi[2], x);
                }
        const std::array<int, 3> box = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
        auto [pvol, plab] = preprocess(vol, lab, box, false, 0);
        CHECK(pvol.intensities.all_finite());
        const std::size_t plane = plab.labels.numel();
        for (int m = 0; m < 4; ++m) {
            double sum = 0.0, sq = 0.0;
            std::size_t count = 0;
            for (std::size_t i = 0; i < plane; ++i) {
                const float v = pvol.intensities[static_cast<std::size_t>(m) * plane + i];
                if (v == 0.0f) continue;
                sum += v;
                sq += static_cast<double>(v) * v;
                ++count;
            }
            const double mean = sum / count;
            const double std = std::sqrt(sq / count - mean * mean);
            CHECK(std::abs(mean) < 1e-5);
            CHECK(std::abs(std - 1.0) < 1e-4);
        }
    }

    SUBCASE("train-mode crops are deterministic in the seed") {
        auto [a, al] = preprocess(vol, lab, {16, 16, 16}, true, 77);
        auto [b, bl] = preprocess(vol, lab, {16, 16, 16}, true, 77);
        CHECK(std::memcmp(a.intensities.data(), b.intensities.data(),
                          a.intensities.numel() * sizeof(float)) == 0);
        CHECK(std::memcmp(al.labels.data(), bl.labels.data(),
                          al.labels.numel() * sizeof(float)) == 0);
    }

    SUBCASE("crop larger than the volume is a size error") {
        CHECK_THROWS_WITH_AS(preprocess(vol, lab, {64, 64, 64}, false, 0),
                             doctest::Contains("exceeds"), std::invalid_argument);
    }
}

TEST_CASE("NIfTI write-then-read round-trips exactly") {
    TempDir tmp;
    Tensor volume({5, 6, 7});
    std::mt19937 rng(31);
    std::uniform_real_distribution<float> dist(-100.0f, 100.0f);
    for (auto& v : volume.vec()) v = dist(rng);

    const std::string path = (tmp.path / "vol.nii.gz").string();
    write_nifti(path, volume, {1.0f, 1.25f, 0.5f});
    std::array<float, 3> spacing;
    const Tensor back = read_nifti(path, &spacing);
    REQUIRE(back.shape() == volume.shape());
    CHECK(std::memcmp(back.data(), volume.data(), volume.numel() * sizeof(float)) == 0);
    CHECK(spacing[0] == 1.0f);
    CHECK(spacing[1] == 1.25f);
    CHECK(spacing[2] == 0.5f);
}

TEST_CASE("case save and load round-trips as a BraTS-layout directory") {
    TempDir tmp;
    PhantomSpec spec;
    spec.seed = 13;
    auto [vol, lab] = generate_phantom(spec);
    const std::string case_dir = (tmp.path / "case_0000").string();
    save_case(case_dir, "case_0000", vol, lab);

    auto [rvol, rlab] = load_brats_case(case_dir);
    REQUIRE(rvol.intensities.shape() == vol.intensities.shape());
    CHECK(std::memcmp(rvol.intensities.data(), vol.intensities.data(),
                      vol.intensities.numel() * sizeof(float)) == 0);
    CHECK(std::memcmp(rlab.labels.data(), lab.labels.data(),
                      lab.labels.numel() * sizeof(float)) == 0);

    SUBCASE("missing modality names the modality") {
        fs::remove(fs::path(case_dir) / "case_0000_t1ce.nii.gz");
        CHECK_THROWS_WITH_AS(load_brats_case(case_dir), doctest::Contains("T1ce"),
                             std::runtime_error);
    }

    SUBCASE("list_cases returns sorted case directories") {
        save_case((tmp.path / "case_0001").string(), "case_0001", vol, lab);
        const auto cases = list_cases(tmp.path.string());
        REQUIRE(cases.size() == 2);
        CHECK(cases[0] < cases[1]);
    }
}
