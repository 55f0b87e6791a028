#include "digest/losses.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace digest {

std::string LossReport::to_log_line(long step) const {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%ld,%.8g,%.8g,%.8g", step, l_ds, l_seg, l_total);
    std::string line(buf);
    for (double v : per_stage_ds) {
        std::snprintf(buf, sizeof(buf), ",%.8g", v);
        line += buf;
    }
    return line;
}

double dice_loss(const Tensor& pred, const Tensor& target, double eps, Tensor* grad_pred,
                 bool strict_form, std::array<double, 3>* per_channel) {
    check_same_shape(pred, target, "dice_loss");
    if (pred.ndim() < 2 || pred.dim(1) != 3)
        throw std::invalid_argument("dice_loss: expected [N,3,...] prediction, got " +
                                    pred.shape_str());
    constexpr float slack = 1e-6f;
    for (std::size_t i = 0; i < pred.numel(); ++i)
        if (!(pred[i] >= -slack && pred[i] <= 1.0f + slack))
            throw std::domain_error("dice_loss: prediction value outside [0,1]");

    const int n = pred.dim(0);
    const int ch = pred.dim(1);
    const std::size_t vox = pred.numel() / (static_cast<std::size_t>(n) * ch);
    const double numer_factor = strict_form ? 1.0 : 2.0;

    if (grad_pred) {
        *grad_pred = Tensor(pred.shape());
    }
    if (per_channel) per_channel->fill(0.0);

    double mean_term = 0.0;
    for (int b = 0; b < n; ++b)
        for (int j = 0; j < ch; ++j) {
            const std::size_t base = (static_cast<std::size_t>(b) * ch + j) * vox;
            double inter = 0.0, psq = 0.0, tsq = 0.0;
            for (std::size_t i = 0; i < vox; ++i) {
                const double p = pred[base + i], t = target[base + i];
                inter += p * t;
                psq += p * p;
                tsq += t * t;
            }
            const double num = numer_factor * inter + eps;
            const double den = psq + tsq + eps;
            const double term = num / den;
            mean_term += term;
            if (per_channel) (*per_channel)[j] += term / n;
            if (grad_pred) {
                const double scale = -1.0 / (static_cast<double>(n) * ch);
                for (std::size_t i = 0; i < vox; ++i) {
                    const double p = pred[base + i], t = target[base + i];
                    const double d = (numer_factor * t * den - num * 2.0 * p) / (den * den);
                    (*grad_pred)[base + i] = static_cast<float>(scale * d);
                }
            }
        }
    return 1.0 - mean_term / (static_cast<double>(n) * ch);
}

double ds_transfer_loss(const std::vector<Tensor>& teacher_aux,
                        const std::vector<Tensor>& student_aux, int batch_size,
                        std::vector<Tensor>* grads_student, std::vector<double>* per_stage) {
    if (teacher_aux.size() != student_aux.size())
        throw std::invalid_argument("ds_transfer_loss: stage count mismatch: " +
                                    std::to_string(teacher_aux.size()) + " vs " +
                                    std::to_string(student_aux.size()));
    if (batch_size < 1) throw std::invalid_argument("ds_transfer_loss: batch_size must be >= 1");

    if (grads_student) grads_student->assign(student_aux.size(), Tensor());
    if (per_stage) per_stage->assign(student_aux.size(), 0.0);

    double loss = 0.0;
    for (std::size_t z = 0; z < teacher_aux.size(); ++z) {
        const Tensor& t = teacher_aux[z];
        const Tensor& s = student_aux[z];
        if (!t.same_shape(s))
            throw std::invalid_argument("ds_transfer_loss: shape mismatch at stage " +
                                        std::to_string(z) + ": " + t.shape_str() + " vs " +
                                        s.shape_str());
        // Per-sample mean over channels and voxels, then mean over batch;
        // with full [N,...] maps this is a plain element mean.
        const double inv = 1.0 / static_cast<double>(t.numel());
        double acc = 0.0;
        Tensor* g = grads_student ? &(*grads_student)[z] : nullptr;
        if (g) *g = Tensor(s.shape());
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const float diff = s[i] - t[i];
            acc += std::abs(diff);
            if (g) (*g)[i] = static_cast<float>((diff > 0.0f ? 1.0 : diff < 0.0f ? -1.0 : 0.0) * inv);
        }
        const double stage_val = acc * inv;
        if (per_stage) (*per_stage)[z] = stage_val;
        loss += stage_val;
    }
    return loss;
}

double total_loss(double l_ds, double l_seg) {
    if (!std::isfinite(l_ds) || !std::isfinite(l_seg))
        throw std::invalid_argument("total_loss: non-finite component");
    return l_ds + l_seg;
}

Tensor downsample_targets_max(const Tensor& target, int factor) {
    if (factor < 1 || (factor & (factor - 1)) != 0)
        throw std::invalid_argument("downsample_targets_max: factor must be a power of two");
    if (target.ndim() != 5)
        throw std::invalid_argument("downsample_targets_max: expected 5D target");
    Tensor cur = target;
    for (int f = factor; f > 1; f /= 2) {
        const int n = cur.dim(0), c = cur.dim(1), d = cur.dim(2), h = cur.dim(3), w = cur.dim(4);
        Tensor next({n, c, d / 2, h / 2, w / 2});
        for (int b = 0; b < n; ++b)
            for (int j = 0; j < c; ++j) {
                const float* src =
                    cur.data() + (static_cast<std::size_t>(b) * c + j) * d * h * w;
                float* dst = next.data() + (static_cast<std::size_t>(b) * c + j) *
                                               (d / 2) * (h / 2) * (w / 2);
                for (int zd = 0; zd < d / 2; ++zd)
                    for (int zh = 0; zh < h / 2; ++zh)
                        for (int zw = 0; zw < w / 2; ++zw) {
                            float m = 0.0f;
                            for (int dd = 0; dd < 2; ++dd)
                                for (int hh = 0; hh < 2; ++hh)
                                    for (int ww = 0; ww < 2; ++ww)
                                        m = std::max(
                                            m, src[(static_cast<std::size_t>(2 * zd + dd) * h +
                                                    (2 * zh + hh)) * w + (2 * zw + ww)]);
                            *dst++ = m;
                        }
            }
        cur = std::move(next);
    }
    return cur;
}

double teacher_pretrain_loss(const StageOutputs& outputs, const Tensor& target, double eps,
                             std::vector<Tensor>* aux_grads,
                             std::array<double, 3>* per_channel) {
    const int n_aux = static_cast<int>(outputs.aux.size());
    if (n_aux < 1) throw std::invalid_argument("teacher_pretrain_loss: no aux maps");
    const double aux_weight = 1.0 / static_cast<double>(n_aux);

    if (aux_grads) aux_grads->assign(outputs.aux.size(), Tensor());

    Tensor g_final;
    double loss =
        dice_loss(outputs.final, target, eps, aux_grads ? &g_final : nullptr, false, per_channel);

    for (int z = 0; z < n_aux; ++z) {
        const int factor = 1 << (n_aux - 1 - z);
        Tensor ds_target = factor == 1 ? target : downsample_targets_max(target, factor);
        Tensor g_aux;
        const double stage = dice_loss(outputs.aux[z], ds_target, eps,
                                       aux_grads ? &g_aux : nullptr);
        loss += aux_weight * stage;
        if (aux_grads) {
            for (auto& v : g_aux.vec()) v *= static_cast<float>(aux_weight);
            (*aux_grads)[z] = std::move(g_aux);
        }
    }
    if (aux_grads) {
        // The finest aux map is the final map; it carries both terms.
        Tensor& last = aux_grads->back();
        for (std::size_t i = 0; i < last.numel(); ++i) last[i] += g_final[i];
    }
    return loss;
}

}  // namespace digest
