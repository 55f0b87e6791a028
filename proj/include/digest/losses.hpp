#ifndef DIGEST_LOSSES_HPP
#define DIGEST_LOSSES_HPP

#include <array>
#include <string>
#include <vector>

#include "digest/network.hpp"
#include "digest/tensor.hpp"

namespace digest {

// Per-step loss breakdown, serialized to the training log.
struct LossReport {
    double l_ds = 0.0;
    double l_seg = 0.0;
    double l_total = 0.0;
    std::vector<double> per_stage_ds;
    std::array<double, 3> per_channel_dice{0.0, 0.0, 0.0};

    std::string to_log_line(long step) const;
};

// Smoothed soft Dice loss over nested-region channels, averaged over
// channels and batch. pred and target are [N, 3, D, H, W]; target binary.
// When strict_form is set, the conventional factor 2 in the numerator is
// dropped (literal published form; a perfect prediction then scores ~0.5).
double dice_loss(const Tensor& pred, const Tensor& target, double eps = 1.0,
                 Tensor* grad_pred = nullptr, bool strict_form = false,
                 std::array<double, 3>* per_channel = nullptr);

// Stage-wise L1 transfer loss: per stage the absolute teacher-student
// difference is averaged over voxels and channels, summed over stages and
// averaged over the batch. Gradient flows only to the student maps.
double ds_transfer_loss(const std::vector<Tensor>& teacher_aux,
                        const std::vector<Tensor>& student_aux, int batch_size,
                        std::vector<Tensor>* grads_student = nullptr,
                        std::vector<double>* per_stage = nullptr);

double total_loss(double l_ds, double l_seg);

// Max-pool a binary target down by a power-of-two factor per axis.
Tensor downsample_targets_max(const Tensor& target, int factor);

// Deep-supervision ground-truth loss for teacher pretraining:
// dice(final) plus the per-stage dice terms against max-pooled targets,
// each aux term weighted by 1/(number of aux stages). When aux_grads is
// given it receives one gradient tensor per aux map (coarsest first).
double teacher_pretrain_loss(const StageOutputs& outputs, const Tensor& target,
                             double eps = 1.0, std::vector<Tensor>* aux_grads = nullptr,
                             std::array<double, 3>* per_channel = nullptr);

}  // namespace digest

#endif
