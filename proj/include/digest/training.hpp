#ifndef DIGEST_TRAINING_HPP
#define DIGEST_TRAINING_HPP

#include <array>
#include <string>
#include <vector>

#include "digest/data.hpp"
#include "digest/network.hpp"
#include "digest/tensor.hpp"

namespace digest {

struct TrainConfig {
    int epochs = 200;
    int batch_size = 1;
    double lr_initial = 1e-4;
    int cosine_decay_start_epoch = 100;
    std::string optimizer_kind = "ranger";  // "ranger", "radam", "adam"
    double weight_decay = 0.0;
    std::array<int, 3> crop{128, 128, 128};
    unsigned seed = 0;
    std::string phase = "teacher";  // "teacher" or "student"
    bool copy_init = true;
    double ds_weight = 1.0;  // 0 disables the transfer loss (ablation)

    int base_width = 8;
    int depth = 4;
    std::string norm_kind = "group";

    double dice_eps = 1.0;
    bool strict_dice = false;
    double val_fraction = 0.2;

    void validate() const;
    void apply_scale_preset(const std::string& scale);  // "desk" or "paper"
};

// lr_initial before the decay start, then cosine decay to zero over the
// remaining epochs.
double lr_schedule(int epoch, const TrainConfig& cfg);

// Human-readable key=value config file; '#' starts a comment.
TrainConfig load_train_config(const std::string& path);
void load_train_config_into(TrainConfig& cfg, const std::string& path);
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);
void save_train_config(const TrainConfig& cfg, const std::string& path);

struct TrainResult {
    std::string checkpoint_path;
    double best_val_dice = 0.0;
    double first_steps_mean_ds = 0.0;  // mean l_ds over the first 10 steps
    double last_steps_mean_ds = 0.0;   // mean l_ds over the final 10 steps
};

// In-memory dataset of loaded cases with a deterministic train/val split.
class CaseSet {
public:
    CaseSet(const std::vector<std::string>& case_dirs, double val_fraction);

    std::size_t train_size() const { return train_.size(); }
    std::size_t val_size() const { return val_.size(); }
    const std::pair<MultiModalVolume, LabelVolume>& train_case(std::size_t i) const {
        return cases_[train_[i]];
    }
    const std::pair<MultiModalVolume, LabelVolume>& val_case(std::size_t i) const {
        return cases_[val_[i]];
    }

private:
    std::vector<std::pair<MultiModalVolume, LabelVolume>> cases_;
    std::vector<std::size_t> train_, val_;
};

// Preprocessed sample as network input/target batches of size 1.
std::pair<Tensor, Tensor> make_sample(const MultiModalVolume& vol, const LabelVolume& lab,
                                      const std::array<int, 3>& crop, bool train, unsigned seed);

// Phase 1: teacher on complete inputs with deep-supervision Dice loss.
TrainResult pretrain_teacher(const CaseSet& data, const TrainConfig& cfg,
                             const std::string& out_dir);

// Phase 2: student on Bernoulli-masked inputs; teacher frozen, total loss
// ds_weight * L_ds + L_seg.
TrainResult train_student(const CaseSet& data, const std::string& teacher_ckpt_path,
                          const TrainConfig& cfg, const std::string& out_dir);

}  // namespace digest

#endif
