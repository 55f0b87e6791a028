#ifndef DIGEST_EVALUATION_HPP
#define DIGEST_EVALUATION_HPP

#include <array>
#include <string>
#include <vector>

#include "digest/masking.hpp"
#include "digest/network.hpp"
#include "digest/tensor.hpp"

namespace digest {

// 2|S∩R| / (|S|+|R|) on binary maps; 1.0 when both are empty.
double dice_score(const Tensor& pred_binary, const Tensor& target_binary);

struct DiceRow {
    std::string mask;  // 4-bit string
    std::array<double, 3> dice{0.0, 0.0, 0.0};  // ET, TC, WT

    bool operator==(const DiceRow&) const = default;
};

// 15 rows in enumerate_subsets order plus the column-mean row. Row scores
// are quantized to 4 decimals (the report precision); the mean row is
// always the exact arithmetic mean of the stored columns.
struct DiceTable {
    std::vector<DiceRow> rows;
    std::array<double, 3> mean_row{0.0, 0.0, 0.0};

    void recompute_mean();
    void validate() const;

    bool operator==(const DiceTable&) const = default;
};

struct EvalCase {
    Tensor input;    // [1, 4, D, H, W], preprocessed
    Tensor targets;  // [1, 3, D, H, W], binary ET/TC/WT
};

// Runs the model on every case under each of the 15 masks, binarizes the
// final map at 0.5, and averages Dice per region over cases.
DiceTable evaluate_subsets(Network& model, const std::vector<EvalCase>& test_set);

struct LabeledTable {
    std::string label;
    DiceTable table;
};

// Writes dice_table.csv (machine) and dice_table.txt (aligned text); with
// ablation tables also ablation_table.csv/.txt with one mean row per
// configuration.
void emit_report(const DiceTable& table, const std::vector<LabeledTable>& ablation,
                 const std::string& out_dir);

DiceTable parse_report(const std::string& csv_path);

double quantize_score(double v);

}  // namespace digest

#endif
