#ifndef DIGEST_OPTIMIZER_HPP
#define DIGEST_OPTIMIZER_HPP

#include <string>
#include <vector>

#include "digest/layers.hpp"

namespace digest {

// Adaptive-moment optimizer with optional variance rectification (RAdam)
// and an optional lookahead wrapper (sync period 6, slow step 0.5), i.e.
// the ranger combination. kind: "ranger", "radam", or "adam".
class Optimizer {
public:
    Optimizer(std::vector<Param*> params, const std::string& kind, double weight_decay = 0.0);

    void step(double lr);
    long steps_taken() const { return step_count_; }

private:
    std::vector<Param*> params_;
    bool rectify_ = true;
    bool lookahead_ = true;
    double weight_decay_ = 0.0;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int sync_period_ = 6;
    double slow_step_ = 0.5;

    long step_count_ = 0;
    std::vector<std::vector<float>> m_, v_, slow_;
};

}  // namespace digest

#endif
