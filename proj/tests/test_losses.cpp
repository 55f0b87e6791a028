#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "digest/losses.hpp"

using namespace digest;

namespace {

// Central-difference derivative w.r.t. pred[i], robust to float rounding:
// the actual stored perturbation is used as the step.
template <typename F>
double central_diff(Tensor pred, std::size_t i, F&& eval) {
    const double h = 1e-4;
    const float x = pred[i];
    const float xp = static_cast<float>(x + h);
    const float xm = static_cast<float>(x - h);
    pred[i] = xp;
    const double fp = eval(pred);
    pred[i] = xm;
    const double fm = eval(pred);
    return (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
}

bool close_rel(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace

TEST_CASE("dice_loss hand oracles") {
    SUBCASE("perfect binary prediction with 8 foreground voxels -> 0 exactly") {
        Tensor pred({1, 3, 2, 2, 4});
        Tensor target({1, 3, 2, 2, 4});
        std::mt19937 rng(3);
        for (int j = 0; j < 3; ++j) {
            std::vector<std::size_t> idx(16);
            std::iota(idx.begin(), idx.end(), 0);
            std::shuffle(idx.begin(), idx.end(), rng);
            for (int k = 0; k < 8; ++k) {
                pred[static_cast<std::size_t>(j) * 16 + idx[k]] = 1.0f;
                target[static_cast<std::size_t>(j) * 16 + idx[k]] = 1.0f;
            }
        }
        // per-channel term (2*8+1)/(8+8+1) = 1
        CHECK(dice_loss(pred, target, 1.0) == doctest::Approx(0.0).epsilon(1e-9));
    }

    SUBCASE("both empty -> 0 via the smoothing term") {
        Tensor pred({1, 3, 2, 2, 2});
        Tensor target({1, 3, 2, 2, 2});
        CHECK(dice_loss(pred, target, 1.0) == doctest::Approx(0.0).epsilon(1e-9));
    }

    SUBCASE("all-one prediction against empty target over 4 voxels -> 0.8") {
        Tensor pred({1, 3, 1, 2, 2}, 1.0f);
        Tensor target({1, 3, 1, 2, 2});
        // per-channel term (0+1)/(4+0+1) = 0.2, loss 0.8
        CHECK(dice_loss(pred, target, 1.0) == doctest::Approx(0.8).epsilon(1e-9));
    }

    SUBCASE("strict published form scores ~0.5 on a perfect prediction") {
        Tensor pred({1, 3, 1, 1, 4});
        Tensor target({1, 3, 1, 1, 4});
        for (std::size_t i = 0; i < pred.numel(); ++i) pred[i] = target[i] = 1.0f;
        // term (4+1)/(4+4+1) = 5/9
        CHECK(dice_loss(pred, target, 1.0, nullptr, /*strict_form=*/true) ==
              doctest::Approx(1.0 - 5.0 / 9.0).epsilon(1e-9));
    }

    SUBCASE("out-of-range prediction is a domain error") {
        Tensor pred({1, 3, 1, 1, 2});
        Tensor target({1, 3, 1, 1, 2});
        pred[0] = 1.5f;
        CHECK_THROWS_AS(dice_loss(pred, target), std::domain_error);
    }

    SUBCASE("shape mismatch is rejected") {
        Tensor pred({1, 3, 1, 1, 2});
        Tensor target({1, 3, 1, 1, 4});
        CHECK_THROWS_AS(dice_loss(pred, target), std::invalid_argument);
    }
}

TEST_CASE("dice_loss is invariant under identical voxel permutation") {
    std::mt19937 rng(11);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    Tensor pred({1, 3, 1, 2, 8});
    Tensor target({1, 3, 1, 2, 8});
    for (auto& v : pred.vec()) v = dist(rng);
    for (auto& v : target.vec()) v = dist(rng) > 0.5f ? 1.0f : 0.0f;
    const double base = dice_loss(pred, target);

    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor pred2 = pred, target2 = target;
    for (int j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < 16; ++i) {
            pred2[static_cast<std::size_t>(j) * 16 + i] =
                pred[static_cast<std::size_t>(j) * 16 + perm[i]];
            target2[static_cast<std::size_t>(j) * 16 + i] =
                target[static_cast<std::size_t>(j) * 16 + perm[i]];
        }
    CHECK(dice_loss(pred2, target2) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("dice_loss analytic gradient matches central differences") {
    std::mt19937 rng(5);
    std::uniform_real_distribution<float> pdist(0.05f, 0.95f);
    std::bernoulli_distribution tdist(0.4);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor pred({1, 3, 1, 2, 8});  // 48 voxels
        Tensor target(pred.shape());
        for (auto& v : pred.vec()) v = pdist(rng);
        for (auto& v : target.vec()) v = tdist(rng) ? 1.0f : 0.0f;

        Tensor grad;
        dice_loss(pred, target, 1.0, &grad);
        auto eval = [&](const Tensor& p) { return dice_loss(p, target, 1.0); };
        std::uniform_int_distribution<std::size_t> pick(0, pred.numel() - 1);
        for (int k = 0; k < 5; ++k) {
            const std::size_t i = pick(rng);
            const double numeric = central_diff(pred, i, eval);
            CHECK(close_rel(grad[i], numeric, 1e-3));
        }
    }
}

TEST_CASE("ds_transfer_loss hand oracles") {
    SUBCASE("identical stage maps -> 0 exactly") {
        std::mt19937 rng(2);
        std::uniform_real_distribution<float> dist(0.0f, 1.0f);
        std::vector<Tensor> aux;
        aux.emplace_back(std::vector<int>{1, 3, 2, 2, 2});
        aux.emplace_back(std::vector<int>{1, 3, 4, 4, 4});
        for (auto& t : aux)
            for (auto& v : t.vec()) v = dist(rng);
        CHECK(ds_transfer_loss(aux, aux, 1) == 0.0);
    }

    SUBCASE("two-voxel 0.3 case") {
        Tensor t({1, 1, 1, 1, 2});
        t[0] = 0.8f;
        t[1] = 0.2f;
        Tensor s({1, 1, 1, 1, 2});
        s[0] = 0.5f;
        s[1] = 0.5f;
        CHECK(ds_transfer_loss({t}, {s}, 1) == doctest::Approx(0.3).epsilon(1e-6));
    }

    SUBCASE("stages add: per-stage values a and b give a + b") {
        Tensor t1({1, 1, 1, 1, 2});
        Tensor s1({1, 1, 1, 1, 2});
        s1[0] = 0.4f;  // stage value 0.2
        Tensor t2({1, 1, 1, 1, 1});
        Tensor s2({1, 1, 1, 1, 1});
        s2[0] = 0.7f;  // stage value 0.7
        const double a = ds_transfer_loss({t1}, {s1}, 1);
        const double b = ds_transfer_loss({t2}, {s2}, 1);
        const double both = ds_transfer_loss({t1, t2}, {s1, s2}, 1);
        CHECK(both == doctest::Approx(a + b).epsilon(1e-9));
    }

    SUBCASE("value is symmetric in the two argument lists") {
        std::mt19937 rng(9);
        std::uniform_real_distribution<float> dist(0.0f, 1.0f);
        Tensor t({1, 3, 2, 2, 2});
        Tensor s({1, 3, 2, 2, 2});
        for (auto& v : t.vec()) v = dist(rng);
        for (auto& v : s.vec()) v = dist(rng);
        CHECK(ds_transfer_loss({t}, {s}, 1) == doctest::Approx(ds_transfer_loss({s}, {t}, 1)));
    }

    SUBCASE("stage shape mismatch names the stage") {
        Tensor a({1, 3, 2, 2, 2});
        Tensor b({1, 3, 4, 4, 4});
        CHECK_THROWS_WITH_AS(ds_transfer_loss({a, a}, {a, b}, 1),
                             doctest::Contains("stage 1"), std::invalid_argument);
    }
}

TEST_CASE("ds_transfer_loss gradient matches central differences away from kinks") {
    std::mt19937 rng(17);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor t({1, 3, 1, 2, 8});
        Tensor s(t.shape());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t[i] = dist(rng);
            // Keep every |s - t| comfortably away from the kink.
            do {
                s[i] = dist(rng);
            } while (std::abs(s[i] - t[i]) < 1e-3f);
        }
        std::vector<Tensor> grads;
        ds_transfer_loss({t}, {s}, 1, &grads);
        auto eval = [&](const Tensor& sv) { return ds_transfer_loss({t}, {sv}, 1); };
        std::uniform_int_distribution<std::size_t> pick(0, s.numel() - 1);
        for (int k = 0; k < 5; ++k) {
            const std::size_t i = pick(rng);
            const double numeric = central_diff(s, i, eval);
            CHECK(close_rel(grads[0][i], numeric, 1e-3));
        }
    }
}

TEST_CASE("total_loss and LossReport invariant") {
    CHECK(total_loss(0.0, 0.0) == 0.0);
    CHECK(total_loss(0.3, 0.5) == doctest::Approx(0.8).epsilon(1e-12));
    LossReport r;
    r.l_ds = 0.25;
    r.l_seg = 0.5;
    r.l_total = total_loss(r.l_ds, r.l_seg);
    CHECK(std::abs(r.l_total - (r.l_ds + r.l_seg)) < 1e-7);
    CHECK_THROWS_AS(total_loss(std::nan(""), 0.0), std::invalid_argument);
}

TEST_CASE("teacher_pretrain_loss composition") {
    SUBCASE("perfect predictions at every stage -> 0") {
        Tensor target({1, 3, 4, 4, 4});
        for (std::size_t i = 0; i < 8; ++i) target[i] = 1.0f;  // some ET foreground
        StageOutputs out;
        out.aux.push_back(downsample_targets_max(target, 2));
        out.aux.push_back(target);
        out.final = out.aux.back();
        CHECK(teacher_pretrain_loss(out, target) == doctest::Approx(0.0).epsilon(1e-9));
    }

    SUBCASE("perfect final, maximally wrong coarse stage contributes its weighted dice") {
        Tensor target({1, 3, 4, 4, 4});  // all background
        StageOutputs out;
        Tensor coarse({1, 3, 2, 2, 2}, 1.0f);  // all-one over 8 voxels vs empty -> dice 8/9
        out.aux.push_back(coarse);
        out.aux.push_back(target);  // perfect final stage
        out.final = out.aux.back();
        // two aux stages, each weighted 1/2; coarse term is 8/9
        CHECK(teacher_pretrain_loss(out, target) == doctest::Approx(4.0 / 9.0).epsilon(1e-9));
    }

    SUBCASE("max-pool downsampling preserves thin positive structures") {
        Tensor target({1, 3, 4, 4, 4});
        target[21] = 1.0f;  // single ET voxel
        const Tensor ds = downsample_targets_max(target, 4);
        CHECK(ds.dim(2) == 1);
        double sum = 0.0;
        for (float v : ds.vec()) sum += v;
        CHECK(sum == 1.0);
    }
}
