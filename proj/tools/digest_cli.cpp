// Command-line entry point: dataset generation, the two training phases,
// evaluation over all modality subsets, the three-configuration ablation, and
// report rendering.
//
// Exit codes: 0 success, 1 runtime/config failure (config errors carry
// file:line diagnostics), 2 unknown command.
//
// Every run is deterministic given its --seed; the DIGEST_DETERMINISTIC
// environment variable is honored for interface compatibility but the
// implementation is single-threaded and bit-reproducible regardless.

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "digest/data.hpp"
#include "digest/evaluation.hpp"
#include "digest/losses.hpp"
#include "digest/masking.hpp"
#include "digest/network.hpp"
#include "digest/training.hpp"

namespace fs = std::filesystem;
using namespace digest;

namespace {

const std::set<std::string> kCommands = {"gen-data",      "pretrain-teacher", "train-student",
                                         "evaluate",      "ablate",           "report"};

void print_usage(std::ostream& os) {
    os << "usage: digest <command> [options]\n"
          "commands:\n"
          "  gen-data          generate a synthetic phantom dataset\n"
          "  pretrain-teacher  phase 1: train the teacher on complete inputs\n"
          "  train-student     phase 2: train the student on masked inputs\n"
          "  evaluate          score a checkpoint over all 15 modality subsets\n"
          "  ablate            run the three-configuration comparison end to end\n"
          "  report            render a machine report as text\n"
          "run 'digest <command> --help' for the options of a command.\n";
}

// Shared training/evaluation options; precedence (low to high):
// defaults < --scale preset < --config file < --set overrides < --seed.
struct CommonOpts {
    std::string config_path;
    std::string scale = "desk";
    bool scale_given = false;
    unsigned seed = 0;
    bool seed_given = false;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key=value training config file");
        cmd->add_option("--scale", scale, "size preset: desk or paper (default desk)")
            ->check(CLI::IsMember({"desk", "paper"}))
            ->each([this](const std::string&) { scale_given = true; });
        cmd->add_option("--seed", seed, "top-level random seed (default 0)")
            ->each([this](const std::string&) { seed_given = true; });
        cmd->add_option("--set", overrides,
                        "config override, key=value (dotted train. prefix accepted); repeatable")
            ->take_all();
    }

    TrainConfig build(const std::string& phase) const {
        TrainConfig cfg;
        cfg.apply_scale_preset(scale);
        if (!config_path.empty()) load_train_config_into(cfg, config_path);
        for (const std::string& ov : overrides) {
            const auto eq = ov.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("--set expects key=value, got '" + ov + "'");
            std::string key = ov.substr(0, eq);
            if (key.rfind("train.", 0) == 0) key = key.substr(6);
            apply_override(cfg, key, ov.substr(eq + 1));
        }
        if (seed_given) cfg.seed = seed;
        cfg.phase = phase;
        cfg.validate();
        return cfg;
    }
};

std::vector<EvalCase> load_eval_cases(const std::string& data_dir,
                                      const std::array<int, 3>& crop) {
    std::vector<EvalCase> cases;
    for (const std::string& dir : list_cases(data_dir)) {
        auto [vol, lab] = load_brats_case(dir);
        auto [input, target] = make_sample(vol, lab, crop, /*train=*/false, 0);
        cases.push_back(EvalCase{std::move(input), std::move(target)});
    }
    if (cases.empty()) throw std::runtime_error("no cases found under " + data_dir);
    return cases;
}

void print_table(std::ostream& os, const DiceTable& table) {
    os << "  T1 T1ce   T2 FLAR |     ET     TC     WT\n";
    os << "----------------------------------------\n";
    char buf[96];
    for (const auto& row : table.rows) {
        std::snprintf(buf, sizeof(buf), "   %c    %c    %c    %c | %6.4f %6.4f %6.4f\n",
                      row.mask[0], row.mask[1], row.mask[2], row.mask[3], row.dice[0],
                      row.dice[1], row.dice[2]);
        os << buf;
    }
    os << "----------------------------------------\n";
    std::snprintf(buf, sizeof(buf), "                mean | %6.4f %6.4f %6.4f\n",
                  table.mean_row[0], table.mean_row[1], table.mean_row[2]);
    os << buf;
}

int cmd_gen_data(const std::string& out_dir, int cases, unsigned seed, int size, float noise,
                 const std::vector<float>& edema_contrast) {
    PhantomSpec spec;
    spec.volume_size = {size, size, size};
    spec.noise_std = noise;
    if (!edema_contrast.empty()) {
        if (edema_contrast.size() != 4)
            throw std::invalid_argument("--edema-contrast needs 4 values (T1 T1ce T2 FLAIR)");
        for (int m = 0; m < 4; ++m) spec.contrast[m][1] = edema_contrast[m];
    }
    fs::create_directories(out_dir);
    for (int i = 0; i < cases; ++i) {
        spec.seed = seed + static_cast<unsigned>(i);
        auto [vol, lab] = generate_phantom(spec);
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03d", i);
        save_case(out_dir + "/" + name, name, vol, lab);
    }
    std::cout << "wrote " << cases << " cases to " << out_dir << "\n";
    return 0;
}

int cmd_pretrain_teacher(const std::string& data_dir, const std::string& out_dir,
                         const CommonOpts& opts) {
    TrainConfig cfg = opts.build("teacher");
    CaseSet data(list_cases(data_dir), cfg.val_fraction);
    TrainResult res = pretrain_teacher(data, cfg, out_dir);
    save_train_config(cfg, out_dir + "/teacher_config.txt");
    std::cout << "teacher checkpoint: " << res.checkpoint_path
              << "\nbest validation dice: " << res.best_val_dice << "\n";
    return 0;
}

int cmd_train_student(const std::string& data_dir, const std::string& teacher_ckpt,
                      const std::string& out_dir, const CommonOpts& opts) {
    TrainConfig cfg = opts.build("student");
    CaseSet data(list_cases(data_dir), cfg.val_fraction);
    TrainResult res = train_student(data, teacher_ckpt, cfg, out_dir);
    save_train_config(cfg, out_dir + "/student_config.txt");
    std::cout << "student checkpoint: " << res.checkpoint_path
              << "\nbest validation dice: " << res.best_val_dice
              << "\ntransfer loss, first 10 steps mean: " << res.first_steps_mean_ds
              << "\ntransfer loss, last 10 steps mean:  " << res.last_steps_mean_ds << "\n";
    return 0;
}

int cmd_evaluate(const std::string& data_dir, const std::string& model_ckpt,
                 const std::string& out_dir, const CommonOpts& opts) {
    TrainConfig cfg = opts.build("teacher");  // phase irrelevant; crop/scale matter
    Network model = load_checkpoint(model_ckpt);
    std::vector<EvalCase> cases = load_eval_cases(data_dir, cfg.crop);
    DiceTable table = evaluate_subsets(model, cases);
    emit_report(table, {}, out_dir);
    print_table(std::cout, table);
    std::cout << "report written to " << out_dir << "/dice_table.csv\n";
    return 0;
}

int cmd_ablate(const std::string& data_dir, const std::string& test_dir,
               const std::string& out_dir, const CommonOpts& opts) {
    TrainConfig tcfg = opts.build("teacher");
    CaseSet data(list_cases(data_dir), tcfg.val_fraction);
    std::vector<EvalCase> test_set =
        load_eval_cases(test_dir.empty() ? data_dir : test_dir, tcfg.crop);

    std::cout << "[1/4] training teacher on complete inputs...\n";
    TrainResult teacher_res = pretrain_teacher(data, tcfg, out_dir + "/teacher");

    std::cout << "[2/4] scoring teacher on masked inputs (no transfer, no attention init)...\n";
    Network teacher = load_checkpoint(teacher_res.checkpoint_path);
    DiceTable baseline = evaluate_subsets(teacher, test_set);

    std::cout << "[3/4] training student with copied init only (transfer weight 0)...\n";
    TrainConfig s0 = opts.build("student");
    s0.ds_weight = 0.0;
    TrainResult r0 = train_student(data, teacher_res.checkpoint_path, s0,
                                   out_dir + "/student_copy_init_only");
    Network n0 = load_checkpoint(r0.checkpoint_path);
    DiceTable copy_only = evaluate_subsets(n0, test_set);

    std::cout << "[4/4] training student with copied init and stage transfer loss...\n";
    TrainConfig s1 = opts.build("student");
    TrainResult r1 = train_student(data, teacher_res.checkpoint_path, s1,
                                   out_dir + "/student_full");
    Network n1 = load_checkpoint(r1.checkpoint_path);
    DiceTable full = evaluate_subsets(n1, test_set);

    const std::vector<LabeledTable> ablation = {
        {"baseline_masked", baseline},
        {"copy_init_only", copy_only},
        {"copy_init_and_transfer", full},
    };
    emit_report(full, ablation, out_dir);

    std::cout << "\nmeans over the 15 modality subsets\n";
    std::cout << "config                  |     ET     TC     WT\n";
    char buf[160];
    for (const auto& lt : ablation) {
        std::snprintf(buf, sizeof(buf), "%-23s | %6.4f %6.4f %6.4f\n", lt.label.c_str(),
                      lt.table.mean_row[0], lt.table.mean_row[1], lt.table.mean_row[2]);
        std::cout << buf;
    }
    std::cout << "reports written to " << out_dir << "\n";
    return 0;
}

int cmd_report(const std::string& csv_path) {
    DiceTable table = parse_report(csv_path);
    print_table(std::cout, table);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // The layer kernels allocate large scratch buffers every step; keeping
    // them on the heap instead of fresh mmaps roughly halves step time.
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    // Unknown commands get the dedicated exit code before option parsing.
    if (argc >= 2 && argv[1][0] != '-' && !kCommands.count(argv[1])) {
        std::cerr << "unknown command: " << argv[1] << "\n";
        print_usage(std::cerr);
        return 2;
    }
    if (argc < 2) {
        print_usage(std::cerr);
        return 2;
    }

    CLI::App app{"volumetric multi-modal segmentation with teacher-student stage transfer"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
    std::string gen_out;
    int gen_cases = 20, gen_size = 32;
    unsigned gen_seed = 0;
    gen->add_option("--out", gen_out, "dataset directory")->required();
    gen->add_option("--cases", gen_cases, "number of cases (default 20)");
    gen->add_option("--seed", gen_seed, "base seed; case i uses seed+i (default 0)");
    gen->add_option("--size", gen_size, "cubic volume edge in voxels (default 32)");
    float gen_noise = 5.0f;
    std::vector<float> gen_edema;
    gen->add_option("--noise", gen_noise, "intensity noise sigma (default 5)");
    gen->add_option("--edema-contrast", gen_edema,
                    "per-modality edema contrast override: T1 T1ce T2 FLAIR")
        ->expected(4);

    // pretrain-teacher
    auto* pre = app.add_subcommand("pretrain-teacher", "phase 1 training on complete inputs");
    std::string pre_data, pre_out;
    CommonOpts pre_opts;
    pre->add_option("--data", pre_data, "dataset directory")->required();
    pre->add_option("--out", pre_out, "run output directory")->required();
    pre_opts.attach(pre);

    // train-student
    auto* stu = app.add_subcommand("train-student", "phase 2 training on masked inputs");
    std::string stu_data, stu_teacher, stu_out;
    CommonOpts stu_opts;
    stu->add_option("--data", stu_data, "dataset directory")->required();
    stu->add_option("--teacher", stu_teacher, "teacher checkpoint path")->required();
    stu->add_option("--out", stu_out, "run output directory")->required();
    stu_opts.attach(stu);

    // evaluate
    auto* eva = app.add_subcommand("evaluate", "score a checkpoint over all modality subsets");
    std::string eva_data, eva_model, eva_out;
    CommonOpts eva_opts;
    eva->add_option("--data", eva_data, "test dataset directory")->required();
    eva->add_option("--model", eva_model, "checkpoint path")->required();
    eva->add_option("--out", eva_out, "report output directory")->required();
    eva_opts.attach(eva);

    // ablate
    auto* abl = app.add_subcommand("ablate", "train and compare the three configurations");
    std::string abl_data, abl_test, abl_out;
    CommonOpts abl_opts;
    abl->add_option("--data", abl_data, "training dataset directory")->required();
    abl->add_option("--test", abl_test, "held-out test dataset (default: --data)");
    abl->add_option("--out", abl_out, "run output directory")->required();
    abl_opts.attach(abl);

    // report
    auto* rep = app.add_subcommand("report", "render a machine report as aligned text");
    std::string rep_csv;
    rep->add_option("--csv", rep_csv, "path to dice_table.csv")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_cases, gen_seed, gen_size, gen_noise, gen_edema);
        if (pre->parsed()) return cmd_pretrain_teacher(pre_data, pre_out, pre_opts);
        if (stu->parsed()) return cmd_train_student(stu_data, stu_teacher, stu_out, stu_opts);
        if (eva->parsed()) return cmd_evaluate(eva_data, eva_model, eva_out, eva_opts);
        if (abl->parsed()) return cmd_ablate(abl_data, abl_test, abl_out, abl_opts);
        if (rep->parsed()) return cmd_report(rep_csv);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    print_usage(std::cerr);
    return 2;
}
