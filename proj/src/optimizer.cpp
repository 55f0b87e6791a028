#include "digest/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace digest {

Optimizer::Optimizer(std::vector<Param*> params, const std::string& kind, double weight_decay)
    : params_(std::move(params)), weight_decay_(weight_decay) {
    if (kind == "ranger") {
        rectify_ = true;
        lookahead_ = true;
    } else if (kind == "radam") {
        rectify_ = true;
        lookahead_ = false;
    } else if (kind == "adam") {
        rectify_ = false;
        lookahead_ = false;
    } else {
        throw std::invalid_argument("unknown optimizer kind: " + kind);
    }
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Param* p : params_) {
        m_.emplace_back(p->value.numel(), 0.0f);
        v_.emplace_back(p->value.numel(), 0.0f);
        if (lookahead_) slow_.push_back(p->value.vec());
    }
}

void Optimizer::step(double lr) {
    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(beta1_, t);
    const double bc2 = 1.0 - std::pow(beta2_, t);

    // RAdam rectification term (Liu et al. 2020).
    const double rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
    const double rho_t = rho_inf - 2.0 * t * std::pow(beta2_, t) / bc2;
    double rect = 1.0;
    bool adaptive = true;
    if (rectify_) {
        if (rho_t > 4.0) {
            rect = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                             ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
        } else {
            adaptive = false;  // warmup: un-adapted SGD-with-momentum step
        }
    }

    for (std::size_t k = 0; k < params_.size(); ++k) {
        Param* p = params_[k];
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            double g = p->grad[i];
            if (weight_decay_ != 0.0) g += weight_decay_ * p->value[i];
            m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * g);
            v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * g * g);
            const double mhat = m[i] / bc1;
            double update;
            if (adaptive) {
                const double vhat = std::sqrt(v[i] / bc2);
                update = rect * mhat / (vhat + eps_);
            } else {
                update = mhat;
            }
            p->value[i] = static_cast<float>(p->value[i] - lr * update);
        }
    }

    if (lookahead_ && step_count_ % sync_period_ == 0) {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Param* p = params_[k];
            auto& slow = slow_[k];
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                slow[i] = static_cast<float>(slow[i] + slow_step_ * (p->value[i] - slow[i]));
                p->value[i] = slow[i];
            }
        }
    }
}

}  // namespace digest
