#include "digest/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "digest/evaluation.hpp"
#include "digest/losses.hpp"
#include "digest/masking.hpp"
#include "digest/optimizer.hpp"

namespace fs = std::filesystem;

namespace digest {

void TrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: negative epochs");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (lr_initial <= 0.0) throw std::invalid_argument("TrainConfig: lr_initial must be > 0");
    if (epochs > 0 && (cosine_decay_start_epoch <= 0 || cosine_decay_start_epoch > epochs))
        throw std::invalid_argument("TrainConfig: need 0 < cosine_decay_start_epoch <= epochs");
    if (phase != "teacher" && phase != "student")
        throw std::invalid_argument("TrainConfig: phase must be teacher or student");
    if (ds_weight < 0.0) throw std::invalid_argument("TrainConfig: negative ds_weight");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw std::invalid_argument("TrainConfig: val_fraction must be in [0,1)");
    for (int c : crop)
        if (c < 1) throw std::invalid_argument("TrainConfig: invalid crop size");
}

void TrainConfig::apply_scale_preset(const std::string& scale) {
    if (scale == "desk") {
        crop = {32, 32, 32};
        base_width = 8;
        depth = 4;
        epochs = 30;
        cosine_decay_start_epoch = 15;
        // A fresh desk-scale network cannot move at the full-scale rate or
        // with the slow-weight optimizer within the reduced step budget.
        lr_initial = 3e-3;
        optimizer_kind = "adam";
    } else if (scale == "paper") {
        crop = {128, 128, 128};
        base_width = 16;
        depth = 4;
        epochs = 200;
        cosine_decay_start_epoch = 100;
        lr_initial = 1e-4;
        optimizer_kind = "ranger";
    } else {
        throw std::invalid_argument("unknown scale preset: " + scale);
    }
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.epochs)
        throw std::out_of_range("lr_schedule: epoch " + std::to_string(epoch) +
                                " out of range [0, " + std::to_string(cfg.epochs) + ")");
    if (epoch < cfg.cosine_decay_start_epoch) return cfg.lr_initial;
    const double span = static_cast<double>(cfg.epochs - cfg.cosine_decay_start_epoch);
    const double t = static_cast<double>(epoch - cfg.cosine_decay_start_epoch);
    return cfg.lr_initial * 0.5 * (1.0 + std::cos(M_PI * t / span));
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
    auto as_bool = [&](const std::string& v) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
    };
    if (key == "epochs") cfg.epochs = std::stoi(value);
    else if (key == "batch_size") cfg.batch_size = std::stoi(value);
    else if (key == "lr_initial") cfg.lr_initial = std::stod(value);
    else if (key == "cosine_decay_start_epoch") cfg.cosine_decay_start_epoch = std::stoi(value);
    else if (key == "optimizer_kind") cfg.optimizer_kind = value;
    else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
    else if (key == "seed") cfg.seed = static_cast<unsigned>(std::stoul(value));
    else if (key == "phase") cfg.phase = value;
    else if (key == "copy_init") cfg.copy_init = as_bool(value);
    else if (key == "ds_weight") cfg.ds_weight = std::stod(value);
    else if (key == "base_width") cfg.base_width = std::stoi(value);
    else if (key == "depth") cfg.depth = std::stoi(value);
    else if (key == "norm_kind") cfg.norm_kind = value;
    else if (key == "dice_eps") cfg.dice_eps = std::stod(value);
    else if (key == "strict_dice") cfg.strict_dice = as_bool(value);
    else if (key == "val_fraction") cfg.val_fraction = std::stod(value);
    else if (key == "crop") {
        std::stringstream ss(value);
        std::string part;
        for (int a = 0; a < 3; ++a) {
            if (!std::getline(ss, part, 'x') && !(a > 0))
                throw std::invalid_argument("config: crop must be DxHxW: " + value);
            cfg.crop[a] = std::stoi(part);
        }
    } else {
        throw std::invalid_argument("config: unknown key: " + key);
    }
}

TrainConfig load_train_config(const std::string& path) {
    TrainConfig cfg;
    load_train_config_into(cfg, path);
    return cfg;
}

void load_train_config_into(TrainConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        // trim
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected key=value, got '" + line + "'");
        auto trim = [](std::string s) {
            const auto bb = s.find_first_not_of(" \t");
            const auto ee = s.find_last_not_of(" \t");
            return bb == std::string::npos ? std::string() : s.substr(bb, ee - bb + 1);
        };
        try {
            apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const std::exception& ex) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
}

void save_train_config(const TrainConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write config: " + path);
    os << "epochs = " << cfg.epochs << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "lr_initial = " << cfg.lr_initial << "\n";
    os << "cosine_decay_start_epoch = " << cfg.cosine_decay_start_epoch << "\n";
    os << "optimizer_kind = " << cfg.optimizer_kind << "\n";
    os << "weight_decay = " << cfg.weight_decay << "\n";
    os << "crop = " << cfg.crop[0] << "x" << cfg.crop[1] << "x" << cfg.crop[2] << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "phase = " << cfg.phase << "\n";
    os << "copy_init = " << (cfg.copy_init ? "true" : "false") << "\n";
    os << "ds_weight = " << cfg.ds_weight << "\n";
    os << "base_width = " << cfg.base_width << "\n";
    os << "depth = " << cfg.depth << "\n";
    os << "norm_kind = " << cfg.norm_kind << "\n";
    os << "dice_eps = " << cfg.dice_eps << "\n";
    os << "strict_dice = " << (cfg.strict_dice ? "true" : "false") << "\n";
    os << "val_fraction = " << cfg.val_fraction << "\n";
}

CaseSet::CaseSet(const std::vector<std::string>& case_dirs, double val_fraction) {
    if (case_dirs.empty()) throw std::invalid_argument("CaseSet: no cases");
    for (const auto& dir : case_dirs) cases_.push_back(load_brats_case(dir));
    const std::size_t n = cases_.size();
    if (n == 1) {
        train_ = {0};
        val_ = {0};
        return;
    }
    std::size_t n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n))));
    if (n_val >= n) n_val = n - 1;
    for (std::size_t i = 0; i < n - n_val; ++i) train_.push_back(i);
    for (std::size_t i = n - n_val; i < n; ++i) val_.push_back(i);
}

std::pair<Tensor, Tensor> make_sample(const MultiModalVolume& vol, const LabelVolume& lab,
                                      const std::array<int, 3>& crop, bool train, unsigned seed) {
    auto [pvol, plab] = preprocess(vol, lab, crop, train, seed);
    NestedTargets targets = nested_targets(plab);

    std::vector<int> in_shape = {1};
    for (int d : pvol.intensities.shape()) in_shape.push_back(d);
    Tensor input(in_shape);
    std::copy_n(pvol.intensities.data(), pvol.intensities.numel(), input.data());

    std::vector<int> t_shape = {1};
    for (int d : targets.maps.shape()) t_shape.push_back(d);
    Tensor target(t_shape);
    std::copy_n(targets.maps.data(), targets.maps.numel(), target.data());
    return {std::move(input), std::move(target)};
}

namespace {

// Mean Dice over ET/TC/WT on a center-crop validation case.
double validation_dice(Network& net, const Tensor& input, const Tensor& target) {
    StageOutputs out = net.forward(input, /*train=*/false);
    const std::size_t vox = out.final.numel() / 3;
    double acc = 0.0;
    for (int j = 0; j < 3; ++j) {
        Tensor pred({static_cast<int>(vox)});
        Tensor targ({static_cast<int>(vox)});
        for (std::size_t i = 0; i < vox; ++i) {
            pred[i] = out.final[static_cast<std::size_t>(j) * vox + i] > 0.5f ? 1.0f : 0.0f;
            targ[i] = target[static_cast<std::size_t>(j) * vox + i];
        }
        acc += dice_score(pred, targ);
    }
    return acc / 3.0;
}

struct DsTracker {
    std::vector<double> first10, last10;
    void record(double v) {
        if (first10.size() < 10) first10.push_back(v);
        last10.push_back(v);
        if (last10.size() > 10) last10.erase(last10.begin());
    }
    static double mean(const std::vector<double>& v) {
        return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    }
};

}  // namespace

TrainResult pretrain_teacher(const CaseSet& data, const TrainConfig& cfg,
                             const std::string& out_dir) {
    cfg.validate();
    if (cfg.phase != "teacher")
        throw std::invalid_argument("pretrain_teacher: cfg.phase must be 'teacher'");
    fs::create_directories(out_dir);

    NetworkConfig ncfg;
    ncfg.base_width = cfg.base_width;
    ncfg.depth = cfg.depth;
    ncfg.use_cbam = false;
    ncfg.norm_kind = cfg.norm_kind;
    ncfg.seed = cfg.seed;
    Network net(ncfg);

    TrainResult result;
    result.checkpoint_path = out_dir + "/teacher.ckpt";
    if (cfg.epochs == 0) {
        save_checkpoint(net, result.checkpoint_path);
        return result;
    }

    Optimizer opt(net.params(), cfg.optimizer_kind, cfg.weight_decay);
    std::mt19937 rng(cfg.seed);
    std::ofstream log(out_dir + "/teacher_train_log.csv");
    log << "step,l_ds,l_seg,l_total\n";

    std::vector<std::size_t> order(data.train_size());
    std::iota(order.begin(), order.end(), 0);

    double best_val = -1.0;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t idx : order) {
            const auto& [vol, lab] = data.train_case(idx);
            auto [input, target] = make_sample(vol, lab, cfg.crop, /*train=*/true, rng());

            StageOutputs out = net.forward(input, /*train=*/true);
            std::vector<Tensor> aux_grads;
            LossReport report;
            report.l_seg = teacher_pretrain_loss(out, target, cfg.dice_eps, &aux_grads,
                                                 &report.per_channel_dice);
            report.l_total = total_loss(report.l_ds, report.l_seg);
            if (!std::isfinite(report.l_total))
                throw std::runtime_error("teacher training diverged (non-finite loss) at step " +
                                         std::to_string(step));
            net.zero_grad();
            net.backward(aux_grads);
            opt.step(lr);
            log << report.to_log_line(step) << "\n";
            ++step;
        }

        double val = 0.0;
        for (std::size_t i = 0; i < data.val_size(); ++i) {
            const auto& [vol, lab] = data.val_case(i);
            auto [input, target] = make_sample(vol, lab, cfg.crop, /*train=*/false, 0);
            val += validation_dice(net, input, target);
        }
        val /= static_cast<double>(data.val_size());
        if (val > best_val) {
            best_val = val;
            save_checkpoint(net, result.checkpoint_path);
        }
    }
    result.best_val_dice = best_val;
    return result;
}

TrainResult train_student(const CaseSet& data, const std::string& teacher_ckpt_path,
                          const TrainConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    if (cfg.phase != "student")
        throw std::invalid_argument("train_student: cfg.phase must be 'student'");
    fs::create_directories(out_dir);

    Network teacher = load_checkpoint(teacher_ckpt_path);
    NetworkConfig scfg = teacher.config();
    if (scfg.depth != cfg.depth || scfg.base_width != cfg.base_width ||
        scfg.norm_kind != cfg.norm_kind)
        throw std::invalid_argument(
            "train_student: teacher checkpoint structure does not match the configured "
            "depth/base_width/norm_kind");
    scfg.use_cbam = true;
    scfg.seed = cfg.seed;
    Network student(scfg);
    if (cfg.copy_init) init_student_from_teacher(student, teacher);

    TrainResult result;
    result.checkpoint_path = out_dir + "/student.ckpt";
    if (cfg.epochs == 0) {
        save_checkpoint(student, result.checkpoint_path);
        return result;
    }

    Optimizer opt(student.params(), cfg.optimizer_kind, cfg.weight_decay);
    std::mt19937 rng(cfg.seed);
    std::mt19937 mask_rng(cfg.seed ^ 0x51ed270bu);
    std::ofstream log(out_dir + "/student_train_log.csv");
    log << "step,l_ds,l_seg,l_total,per_stage_ds...\n";

    const auto subsets = enumerate_subsets();
    std::vector<std::size_t> order(data.train_size());
    std::iota(order.begin(), order.end(), 0);

    DsTracker ds_track;
    double best_val = -1.0;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t idx : order) {
            const auto& [vol, lab] = data.train_case(idx);
            auto [input, target] = make_sample(vol, lab, cfg.crop, /*train=*/true, rng());

            // Fresh mask each iteration; teacher always sees the complete input.
            const ModalityMask mask = sample_mask(mask_rng);
            Tensor masked = apply_mask(input, mask);

            StageOutputs t_out = teacher.forward(input, /*train=*/false);
            StageOutputs s_out = student.forward(masked, /*train=*/true);

            LossReport report;
            Tensor g_seg;
            report.l_seg = dice_loss(s_out.final, target, cfg.dice_eps, &g_seg, cfg.strict_dice,
                                     &report.per_channel_dice);
            std::vector<Tensor> g_ds;
            const double ds_raw =
                ds_transfer_loss(t_out.aux, s_out.aux, cfg.batch_size, &g_ds,
                                 &report.per_stage_ds);
            report.l_ds = cfg.ds_weight * ds_raw;
            report.l_total = total_loss(report.l_ds, report.l_seg);
            if (!std::isfinite(report.l_total))
                throw std::runtime_error("student training diverged (non-finite loss) at step " +
                                         std::to_string(step));

            std::vector<Tensor> aux_grads(g_ds.size());
            for (std::size_t z = 0; z < g_ds.size(); ++z) {
                aux_grads[z] = Tensor(g_ds[z].shape());
                for (std::size_t i = 0; i < g_ds[z].numel(); ++i)
                    aux_grads[z][i] = static_cast<float>(cfg.ds_weight) * g_ds[z][i];
            }
            for (std::size_t i = 0; i < g_seg.numel(); ++i) aux_grads.back()[i] += g_seg[i];

            student.zero_grad();
            student.backward(aux_grads);
            opt.step(lr);
            ds_track.record(report.l_ds);
            log << report.to_log_line(step) << "\n";
            ++step;
        }

        // Masked validation: deterministic rotation over the 15 subsets.
        double val = 0.0;
        for (std::size_t i = 0; i < data.val_size(); ++i) {
            const auto& [vol, lab] = data.val_case(i);
            auto [input, target] = make_sample(vol, lab, cfg.crop, /*train=*/false, 0);
            Tensor masked = apply_mask(input, subsets[(i + epoch) % subsets.size()]);
            val += validation_dice(student, masked, target);
        }
        val /= static_cast<double>(data.val_size());
        if (val > best_val) {
            best_val = val;
            save_checkpoint(student, result.checkpoint_path);
        }
    }
    result.best_val_dice = best_val;
    result.first_steps_mean_ds = DsTracker::mean(ds_track.first10);
    result.last_steps_mean_ds = DsTracker::mean(ds_track.last10);
    return result;
}

}  // namespace digest
