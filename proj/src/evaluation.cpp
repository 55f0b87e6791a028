#include "digest/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace digest {

double quantize_score(double v) { return std::round(v * 10000.0) / 10000.0; }

double dice_score(const Tensor& pred_binary, const Tensor& target_binary) {
    check_same_shape(pred_binary, target_binary, "dice_score");
    std::size_t inter = 0, s = 0, r = 0;
    for (std::size_t i = 0; i < pred_binary.numel(); ++i) {
        const bool p = pred_binary[i] != 0.0f;
        const bool t = target_binary[i] != 0.0f;
        inter += p && t;
        s += p;
        r += t;
    }
    if (s + r == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(s + r);
}

void DiceTable::recompute_mean() {
    mean_row = {0.0, 0.0, 0.0};
    if (rows.empty()) return;
    for (const auto& row : rows)
        for (int j = 0; j < 3; ++j) mean_row[j] += row.dice[j];
    for (int j = 0; j < 3; ++j) mean_row[j] /= static_cast<double>(rows.size());
}

void DiceTable::validate() const {
    const auto subsets = enumerate_subsets();
    if (rows.size() != subsets.size())
        throw std::invalid_argument("DiceTable: expected 15 rows, got " +
                                    std::to_string(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].mask != subsets[i].to_bitstring())
            throw std::invalid_argument("DiceTable: row " + std::to_string(i) +
                                        " out of order: " + rows[i].mask);
    DiceTable copy = *this;
    copy.recompute_mean();
    for (int j = 0; j < 3; ++j)
        if (std::abs(copy.mean_row[j] - mean_row[j]) > 1e-9)
            throw std::invalid_argument("DiceTable: mean row inconsistent with columns");
}

DiceTable evaluate_subsets(Network& model, const std::vector<EvalCase>& test_set) {
    if (test_set.empty()) throw std::invalid_argument("evaluate_subsets: empty test set");

    DiceTable table;
    for (const ModalityMask& mask : enumerate_subsets()) {
        DiceRow row;
        row.mask = mask.to_bitstring();
        std::array<double, 3> acc{0.0, 0.0, 0.0};
        for (const EvalCase& c : test_set) {
            StageOutputs out = model.forward(apply_mask(c.input, mask), /*train=*/false);
            const std::size_t vox = out.final.numel() / 3;
            for (int j = 0; j < 3; ++j) {
                Tensor pred({static_cast<int>(vox)});
                Tensor targ({static_cast<int>(vox)});
                for (std::size_t i = 0; i < vox; ++i) {
                    pred[i] = out.final[static_cast<std::size_t>(j) * vox + i] > 0.5f ? 1.0f : 0.0f;
                    targ[i] = c.targets[static_cast<std::size_t>(j) * vox + i];
                }
                acc[j] += dice_score(pred, targ);
            }
        }
        for (int j = 0; j < 3; ++j)
            row.dice[j] = quantize_score(acc[j] / static_cast<double>(test_set.size()));
        table.rows.push_back(row);
    }
    table.recompute_mean();
    return table;
}

namespace {

void write_csv(const DiceTable& table, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write report: " + path);
    os << "mask,dice_et,dice_tc,dice_wt\n";
    char buf[96];
    for (const auto& row : table.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f\n", row.mask.c_str(), row.dice[0],
                      row.dice[1], row.dice[2]);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%.10f,%.10f,%.10f\n", table.mean_row[0],
                  table.mean_row[1], table.mean_row[2]);
    os << buf;
}

void write_text(const DiceTable& table, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write report: " + path);
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

}  // namespace

void emit_report(const DiceTable& table, const std::vector<LabeledTable>& ablation,
                 const std::string& out_dir) {
    table.validate();
    std::filesystem::create_directories(out_dir);
    write_csv(table, out_dir + "/dice_table.csv");
    write_text(table, out_dir + "/dice_table.txt");

    if (ablation.empty()) return;
    std::ofstream csv(out_dir + "/ablation_table.csv");
    std::ofstream txt(out_dir + "/ablation_table.txt");
    if (!csv || !txt) throw std::runtime_error("cannot write ablation report in " + out_dir);
    csv << "config,mean_et,mean_tc,mean_wt\n";
    txt << "Means over the 15 modality subsets\n";
    txt << "config                  |     ET     TC     WT\n";
    char buf[160];
    for (const auto& lt : ablation) {
        lt.table.validate();
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f\n", lt.label.c_str(),
                      lt.table.mean_row[0], lt.table.mean_row[1], lt.table.mean_row[2]);
        csv << buf;
        std::snprintf(buf, sizeof(buf), "%-23s | %6.4f %6.4f %6.4f\n", lt.label.c_str(),
                      lt.table.mean_row[0], lt.table.mean_row[1], lt.table.mean_row[2]);
        txt << buf;
    }
}

DiceTable parse_report(const std::string& csv_path) {
    std::ifstream is(csv_path);
    if (!is) throw std::runtime_error("cannot open report: " + csv_path);
    std::string line;
    if (!std::getline(is, line) || line != "mask,dice_et,dice_tc,dice_wt")
        throw std::runtime_error("bad report header in " + csv_path);

    DiceTable table;
    std::array<double, 3> file_mean{};
    bool saw_mean = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string mask, f0, f1, f2;
        if (!std::getline(ss, mask, ',') || !std::getline(ss, f0, ',') ||
            !std::getline(ss, f1, ',') || !std::getline(ss, f2))
            throw std::runtime_error("bad report row: " + line);
        if (mask == "mean") {
            file_mean = {std::stod(f0), std::stod(f1), std::stod(f2)};
            saw_mean = true;
            continue;
        }
        DiceRow row;
        row.mask = ModalityMask::from_bitstring(mask).to_bitstring();
        row.dice = {std::stod(f0), std::stod(f1), std::stod(f2)};
        table.rows.push_back(row);
    }
    if (!saw_mean) throw std::runtime_error("report missing mean row: " + csv_path);
    table.recompute_mean();
    for (int j = 0; j < 3; ++j)
        if (std::abs(table.mean_row[j] - file_mean[j]) > 1e-6)
            throw std::runtime_error("report mean row inconsistent with columns: " + csv_path);
    table.validate();
    return table;
}

}  // namespace digest
