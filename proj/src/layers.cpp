#include "digest/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace digest {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace {

struct Spatial {
    int n, c, d, h, w;
    std::size_t dhw() const { return static_cast<std::size_t>(d) * h * w; }
};

Spatial spatial_of(const Tensor& x, const char* where) {
    if (x.ndim() != 5)
        throw std::invalid_argument(std::string(where) + ": expected 5D tensor, got " + x.shape_str());
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)};
}

// col is [in_ch * k^3, d*h*w] for one sample.
void im2col(const float* x, int c, int d, int h, int w, int k, int pad, float* col) {
    const std::size_t dhw = static_cast<std::size_t>(d) * h * w;
    std::size_t row = 0;
    for (int ci = 0; ci < c; ++ci) {
        const float* xc = x + static_cast<std::size_t>(ci) * dhw;
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++row) {
                    float* out = col + row * dhw;
                    for (int od = 0; od < d; ++od) {
                        const int id = od + kd - pad;
                        if (id < 0 || id >= d) {
                            std::fill(out, out + static_cast<std::size_t>(h) * w, 0.0f);
                            out += static_cast<std::size_t>(h) * w;
                            continue;
                        }
                        for (int oh = 0; oh < h; ++oh) {
                            const int ih = oh + kh - pad;
                            if (ih < 0 || ih >= h) {
                                std::fill(out, out + w, 0.0f);
                                out += w;
                                continue;
                            }
                            const float* src = xc + (static_cast<std::size_t>(id) * h + ih) * w + (kw - pad);
                            const int iw0 = kw - pad;
                            int lo = std::max(0, -iw0);
                            int hi = std::min(w, w - iw0);
                            for (int ow = 0; ow < lo; ++ow) out[ow] = 0.0f;
                            for (int ow = lo; ow < hi; ++ow) out[ow] = src[ow];
                            for (int ow = hi; ow < w; ++ow) out[ow] = 0.0f;
                            out += w;
                        }
                    }
                }
    }
}

// Scatter-add of a col matrix back into an image gradient.
void col2im(const float* col, int c, int d, int h, int w, int k, int pad, float* gx) {
    const std::size_t dhw = static_cast<std::size_t>(d) * h * w;
    std::size_t row = 0;
    for (int ci = 0; ci < c; ++ci) {
        float* xc = gx + static_cast<std::size_t>(ci) * dhw;
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++row) {
                    const float* in = col + row * dhw;
                    for (int od = 0; od < d; ++od) {
                        const int id = od + kd - pad;
                        if (id < 0 || id >= d) {
                            in += static_cast<std::size_t>(h) * w;
                            continue;
                        }
                        for (int oh = 0; oh < h; ++oh) {
                            const int ih = oh + kh - pad;
                            if (ih < 0 || ih >= h) {
                                in += w;
                                continue;
                            }
                            float* dst = xc + (static_cast<std::size_t>(id) * h + ih) * w + (kw - pad);
                            const int iw0 = kw - pad;
                            int lo = std::max(0, -iw0);
                            int hi = std::min(w, w - iw0);
                            for (int ow = lo; ow < hi; ++ow) dst[ow] += in[ow];
                            in += w;
                        }
                    }
                }
    }
}

}  // namespace

Conv3d::Conv3d(std::string name, int in_ch, int out_ch, int kernel, int pad)
    : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), pad_(pad) {
    weight_.name = name + ".weight";
    weight_.resize({out_ch, in_ch * kernel * kernel * kernel});
    bias_.name = name + ".bias";
    bias_.resize({out_ch});
}

void Conv3d::init(std::mt19937& rng) {
    const int fan_in = in_ch_ * kernel_ * kernel_ * kernel_;
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (auto& v : weight_.value.vec()) v = dist(rng);
    bias_.value.zero();
}

Tensor Conv3d::forward(const Tensor& x, bool train) {
    const Spatial s = spatial_of(x, "Conv3d");
    if (s.c != in_ch_)
        throw std::invalid_argument("Conv3d: expected " + std::to_string(in_ch_) +
                                    " input channels, got " + std::to_string(s.c));
    if (train) cached_input_ = x;

    const std::size_t dhw = s.dhw();
    const int krows = in_ch_ * kernel_ * kernel_ * kernel_;
    Tensor col({krows, static_cast<int>(dhw)});
    Tensor y({s.n, out_ch_, s.d, s.h, s.w});

    CMapRM wmat(weight_.value.data(), out_ch_, krows);
    for (int n = 0; n < s.n; ++n) {
        im2col(x.data() + static_cast<std::size_t>(n) * in_ch_ * dhw, in_ch_, s.d, s.h, s.w,
               kernel_, pad_, col.data());
        CMapRM cmat(col.data(), krows, static_cast<int>(dhw));
        MapRM ymat(y.data() + static_cast<std::size_t>(n) * out_ch_ * dhw, out_ch_,
                   static_cast<int>(dhw));
        ymat.noalias() = wmat * cmat;
        for (int oc = 0; oc < out_ch_; ++oc) ymat.row(oc).array() += bias_.value[oc];
    }
    return y;
}

Tensor Conv3d::backward(const Tensor& gy) {
    const Tensor& x = cached_input_;
    const Spatial s = spatial_of(x, "Conv3d.backward");
    const std::size_t dhw = s.dhw();
    const int krows = in_ch_ * kernel_ * kernel_ * kernel_;

    Tensor col({krows, static_cast<int>(dhw)});
    Tensor gcol({krows, static_cast<int>(dhw)});
    Tensor gx(x.shape());

    MapRM gw(weight_.grad.data(), out_ch_, krows);
    CMapRM wmat(weight_.value.data(), out_ch_, krows);
    for (int n = 0; n < s.n; ++n) {
        CMapRM gymat(gy.data() + static_cast<std::size_t>(n) * out_ch_ * dhw, out_ch_,
                     static_cast<int>(dhw));
        im2col(x.data() + static_cast<std::size_t>(n) * in_ch_ * dhw, in_ch_, s.d, s.h, s.w,
               kernel_, pad_, col.data());
        CMapRM cmat(col.data(), krows, static_cast<int>(dhw));
        gw.noalias() += gymat * cmat.transpose();
        for (int oc = 0; oc < out_ch_; ++oc) bias_.grad[oc] += gymat.row(oc).sum();

        MapRM gcmat(gcol.data(), krows, static_cast<int>(dhw));
        gcmat.noalias() = wmat.transpose() * gymat;
        col2im(gcol.data(), in_ch_, s.d, s.h, s.w, kernel_, pad_,
               gx.data() + static_cast<std::size_t>(n) * in_ch_ * dhw);
    }
    return gx;
}

GroupNorm::GroupNorm(std::string name, int channels, int groups)
    : channels_(channels), groups_(groups) {
    if (channels % groups != 0)
        throw std::invalid_argument("GroupNorm: channels not divisible by groups");
    gamma_.name = name + ".gamma";
    gamma_.resize({channels});
    gamma_.value.fill(1.0f);
    beta_.name = name + ".beta";
    beta_.resize({channels});
}

Tensor GroupNorm::forward(const Tensor& x, bool train) {
    const Spatial s = spatial_of(x, "GroupNorm");
    const std::size_t dhw = s.dhw();
    const int cpg = channels_ / groups_;
    const std::size_t gsize = static_cast<std::size_t>(cpg) * dhw;
    constexpr float eps = 1e-5f;

    Tensor xhat(x.shape());
    Tensor y(x.shape());
    cached_invstd_.assign(static_cast<std::size_t>(s.n) * groups_, 0.0f);

    for (int n = 0; n < s.n; ++n)
        for (int g = 0; g < groups_; ++g) {
            const std::size_t base = (static_cast<std::size_t>(n) * channels_ +
                                      static_cast<std::size_t>(g) * cpg) * dhw;
            double sum = 0.0, sq = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) {
                const double v = x[base + i];
                sum += v;
                sq += v * v;
            }
            const double mean = sum / static_cast<double>(gsize);
            const double var = sq / static_cast<double>(gsize) - mean * mean;
            const float invstd = 1.0f / std::sqrt(static_cast<float>(var) + eps);
            cached_invstd_[static_cast<std::size_t>(n) * groups_ + g] = invstd;
            for (int c = 0; c < cpg; ++c) {
                const float ga = gamma_.value[g * cpg + c];
                const float be = beta_.value[g * cpg + c];
                const std::size_t off = base + static_cast<std::size_t>(c) * dhw;
                for (std::size_t i = 0; i < dhw; ++i) {
                    const float xh = (x[off + i] - static_cast<float>(mean)) * invstd;
                    xhat[off + i] = xh;
                    y[off + i] = ga * xh + be;
                }
            }
        }
    if (train) cached_xhat_ = std::move(xhat);
    return y;
}

Tensor GroupNorm::backward(const Tensor& gy) {
    const Tensor& xhat = cached_xhat_;
    const Spatial s = spatial_of(xhat, "GroupNorm.backward");
    const std::size_t dhw = s.dhw();
    const int cpg = channels_ / groups_;
    const std::size_t gsize = static_cast<std::size_t>(cpg) * dhw;

    Tensor gx(xhat.shape());
    for (int n = 0; n < s.n; ++n)
        for (int g = 0; g < groups_; ++g) {
            const std::size_t base = (static_cast<std::size_t>(n) * channels_ +
                                      static_cast<std::size_t>(g) * cpg) * dhw;
            const float invstd = cached_invstd_[static_cast<std::size_t>(n) * groups_ + g];
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int c = 0; c < cpg; ++c) {
                const float ga = gamma_.value[g * cpg + c];
                const std::size_t off = base + static_cast<std::size_t>(c) * dhw;
                double gsum = 0.0, gxsum = 0.0;
                for (std::size_t i = 0; i < dhw; ++i) {
                    const float go = gy[off + i];
                    gsum += go;
                    gxsum += static_cast<double>(go) * xhat[off + i];
                    sum_dxhat += static_cast<double>(go) * ga;
                    sum_dxhat_xhat += static_cast<double>(go) * ga * xhat[off + i];
                }
                gamma_.grad[g * cpg + c] += static_cast<float>(gxsum);
                beta_.grad[g * cpg + c] += static_cast<float>(gsum);
            }
            const float m = static_cast<float>(gsize);
            for (int c = 0; c < cpg; ++c) {
                const float ga = gamma_.value[g * cpg + c];
                const std::size_t off = base + static_cast<std::size_t>(c) * dhw;
                for (std::size_t i = 0; i < dhw; ++i) {
                    const float dxhat = gy[off + i] * ga;
                    gx[off + i] = invstd / m *
                                  (m * dxhat - static_cast<float>(sum_dxhat) -
                                   xhat[off + i] * static_cast<float>(sum_dxhat_xhat));
                }
            }
        }
    return gx;
}

Tensor ReLU::forward(const Tensor& x, bool train) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
    if (train) cached_output_ = y;
    return y;
}

Tensor ReLU::backward(const Tensor& gy) const {
    Tensor gx(gy.shape());
    for (std::size_t i = 0; i < gy.numel(); ++i)
        gx[i] = cached_output_[i] > 0.0f ? gy[i] : 0.0f;
    return gx;
}

Tensor Sigmoid::forward(const Tensor& x, bool train) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
    if (train) cached_output_ = y;
    return y;
}

Tensor Sigmoid::backward(const Tensor& gy) const {
    Tensor gx(gy.shape());
    for (std::size_t i = 0; i < gy.numel(); ++i) {
        const float s = cached_output_[i];
        gx[i] = gy[i] * s * (1.0f - s);
    }
    return gx;
}

Tensor MaxPool3d::forward(const Tensor& x, bool train) {
    const Spatial s = spatial_of(x, "MaxPool3d");
    if (s.d % 2 || s.h % 2 || s.w % 2)
        throw std::invalid_argument("MaxPool3d: odd spatial size " + x.shape_str());
    const int od = s.d / 2, oh = s.h / 2, ow = s.w / 2;
    Tensor y({s.n, s.c, od, oh, ow});
    if (train) {
        input_shape_ = x.shape();
        argmax_.assign(y.numel(), 0);
    }
    std::size_t oi = 0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * s.dhw();
            for (int zd = 0; zd < od; ++zd)
                for (int zh = 0; zh < oh; ++zh)
                    for (int zw = 0; zw < ow; ++zw, ++oi) {
                        float best = -std::numeric_limits<float>::infinity();
                        std::size_t besti = 0;
                        for (int dd = 0; dd < 2; ++dd)
                            for (int hh = 0; hh < 2; ++hh)
                                for (int ww = 0; ww < 2; ++ww) {
                                    const std::size_t idx =
                                        base + ((static_cast<std::size_t>(2 * zd + dd) * s.h +
                                                 (2 * zh + hh)) * s.w + (2 * zw + ww));
                                    if (x[idx] > best) {
                                        best = x[idx];
                                        besti = idx;
                                    }
                                }
                        y[oi] = best;
                        if (train) argmax_[oi] = besti;
                    }
        }
    return y;
}

Tensor MaxPool3d::backward(const Tensor& gy) const {
    Tensor gx(input_shape_);
    for (std::size_t i = 0; i < gy.numel(); ++i) gx[argmax_[i]] += gy[i];
    return gx;
}

Tensor Upsample3d::forward(const Tensor& x) const {
    const Spatial s = spatial_of(x, "Upsample3d");
    Tensor y({s.n, s.c, 2 * s.d, 2 * s.h, 2 * s.w});
    const std::size_t odhw = s.dhw() * 8;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float* src = x.data() + (static_cast<std::size_t>(n) * s.c + c) * s.dhw();
            float* dst = y.data() + (static_cast<std::size_t>(n) * s.c + c) * odhw;
            for (int zd = 0; zd < 2 * s.d; ++zd)
                for (int zh = 0; zh < 2 * s.h; ++zh)
                    for (int zw = 0; zw < 2 * s.w; ++zw)
                        *dst++ = src[(static_cast<std::size_t>(zd / 2) * s.h + zh / 2) * s.w + zw / 2];
        }
    return y;
}

Tensor Upsample3d::backward(const Tensor& gy) const {
    const Spatial s = spatial_of(gy, "Upsample3d.backward");
    const int od = s.d / 2, oh = s.h / 2, ow = s.w / 2;
    Tensor gx({s.n, s.c, od, oh, ow});
    const std::size_t idhw = static_cast<std::size_t>(od) * oh * ow;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            float* dst = gx.data() + (static_cast<std::size_t>(n) * s.c + c) * idhw;
            const float* src = gy.data() + (static_cast<std::size_t>(n) * s.c + c) * s.dhw();
            for (int zd = 0; zd < s.d; ++zd)
                for (int zh = 0; zh < s.h; ++zh)
                    for (int zw = 0; zw < s.w; ++zw)
                        dst[(static_cast<std::size_t>(zd / 2) * oh + zh / 2) * ow + zw / 2] +=
                            *src++;
        }
    return gx;
}

CbamBlock::CbamBlock(std::string name, int channels, int reduction, int spatial_kernel)
    : channels_(channels),
      hidden_(std::max(2, channels / reduction)),
      spatial_conv_(name + ".spatial_conv", 2, 1, spatial_kernel, spatial_kernel / 2) {
    mlp_w1_.name = name + ".mlp_w1";
    mlp_w1_.resize({hidden_, channels_});
    mlp_b1_.name = name + ".mlp_b1";
    mlp_b1_.resize({hidden_});
    mlp_w2_.name = name + ".mlp_w2";
    mlp_w2_.resize({channels_, hidden_});
    mlp_b2_.name = name + ".mlp_b2";
    mlp_b2_.resize({channels_});
}

void CbamBlock::init(std::mt19937& rng) {
    std::normal_distribution<float> d1(0.0f, std::sqrt(2.0f / static_cast<float>(channels_)));
    std::normal_distribution<float> d2(0.0f, std::sqrt(2.0f / static_cast<float>(hidden_)));
    for (auto& v : mlp_w1_.value.vec()) v = d1(rng);
    for (auto& v : mlp_w2_.value.vec()) v = d2(rng);
    mlp_b1_.value.zero();
    mlp_b2_.value.zero();
    spatial_conv_.init(rng);
}

void CbamBlock::collect(std::vector<Param*>& out) {
    out.push_back(&mlp_w1_);
    out.push_back(&mlp_b1_);
    out.push_back(&mlp_w2_);
    out.push_back(&mlp_b2_);
    spatial_conv_.collect(out);
}

Tensor CbamBlock::forward(const Tensor& x, bool train) {
    if (bypass_) return x;
    const Spatial s = spatial_of(x, "CbamBlock");
    if (s.c != channels_)
        throw std::invalid_argument("CbamBlock: channel mismatch " + x.shape_str());
    const std::size_t dhw = s.dhw();
    if (train) cached_input_ = x;

    // Channel descriptors.
    avg_desc_ = Tensor({s.n, s.c});
    max_desc_ = Tensor({s.n, s.c});
    chan_argmax_.assign(static_cast<std::size_t>(s.n) * s.c, 0);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * dhw;
            double sum = 0.0;
            float best = -std::numeric_limits<float>::infinity();
            std::size_t besti = base;
            for (std::size_t i = 0; i < dhw; ++i) {
                sum += x[base + i];
                if (x[base + i] > best) {
                    best = x[base + i];
                    besti = base + i;
                }
            }
            avg_desc_[static_cast<std::size_t>(n) * s.c + c] =
                static_cast<float>(sum / static_cast<double>(dhw));
            max_desc_[static_cast<std::size_t>(n) * s.c + c] = best;
            chan_argmax_[static_cast<std::size_t>(n) * s.c + c] = besti;
        }

    // Shared two-layer bottleneck on both descriptors.
    auto mlp = [&](const Tensor& in, Tensor& hidden_cache) {
        Tensor h({s.n, hidden_});
        Tensor out({s.n, s.c});
        for (int n = 0; n < s.n; ++n) {
            for (int j = 0; j < hidden_; ++j) {
                float acc = mlp_b1_.value[j];
                for (int c = 0; c < s.c; ++c)
                    acc += mlp_w1_.value[static_cast<std::size_t>(j) * s.c + c] *
                           in[static_cast<std::size_t>(n) * s.c + c];
                h[static_cast<std::size_t>(n) * hidden_ + j] = acc > 0.0f ? acc : 0.0f;
            }
            for (int c = 0; c < s.c; ++c) {
                float acc = mlp_b2_.value[c];
                for (int j = 0; j < hidden_; ++j)
                    acc += mlp_w2_.value[static_cast<std::size_t>(c) * hidden_ + j] *
                           h[static_cast<std::size_t>(n) * hidden_ + j];
                out[static_cast<std::size_t>(n) * s.c + c] = acc;
            }
        }
        hidden_cache = std::move(h);
        return out;
    };
    Tensor pre_avg = mlp(avg_desc_, hidden_avg_);
    Tensor pre_max = mlp(max_desc_, hidden_max_);

    chan_att_ = Tensor({s.n, s.c});
    for (std::size_t i = 0; i < chan_att_.numel(); ++i)
        chan_att_[i] = 1.0f / (1.0f + std::exp(-(pre_avg[i] + pre_max[i])));

    Tensor y1(x.shape());
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float att = chan_att_[static_cast<std::size_t>(n) * s.c + c];
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * dhw;
            for (std::size_t i = 0; i < dhw; ++i) y1[base + i] = x[base + i] * att;
        }

    // Spatial attention from channelwise average and max maps.
    Tensor maps({s.n, 2, s.d, s.h, s.w});
    spat_argmax_.assign(static_cast<std::size_t>(s.n) * dhw, 0);
    for (int n = 0; n < s.n; ++n) {
        float* avg_map = maps.data() + static_cast<std::size_t>(n) * 2 * dhw;
        float* max_map = avg_map + dhw;
        for (std::size_t i = 0; i < dhw; ++i) {
            double sum = 0.0;
            float best = -std::numeric_limits<float>::infinity();
            int bestc = 0;
            for (int c = 0; c < s.c; ++c) {
                const float v = y1[(static_cast<std::size_t>(n) * s.c + c) * dhw + i];
                sum += v;
                if (v > best) {
                    best = v;
                    bestc = c;
                }
            }
            avg_map[i] = static_cast<float>(sum / s.c);
            max_map[i] = best;
            spat_argmax_[static_cast<std::size_t>(n) * dhw + i] = bestc;
        }
    }
    Tensor pre_spat = spatial_conv_.forward(maps, train);
    spat_att_ = Tensor(pre_spat.shape());
    for (std::size_t i = 0; i < pre_spat.numel(); ++i)
        spat_att_[i] = 1.0f / (1.0f + std::exp(-pre_spat[i]));

    Tensor y(x.shape());
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * dhw;
            const float* att = spat_att_.data() + static_cast<std::size_t>(n) * dhw;
            for (std::size_t i = 0; i < dhw; ++i) y[base + i] = y1[base + i] * att[i];
        }
    if (train) cached_y1_ = std::move(y1);
    return y;
}

Tensor CbamBlock::backward(const Tensor& gy) {
    if (bypass_) return gy;
    const Tensor& x = cached_input_;
    const Spatial s = spatial_of(x, "CbamBlock.backward");
    const std::size_t dhw = s.dhw();

    // y = y1 * spat_att (broadcast over channels).
    Tensor g_y1(x.shape());
    Tensor g_spat({s.n, 1, s.d, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
        float* gs = g_spat.data() + static_cast<std::size_t>(n) * dhw;
        const float* att = spat_att_.data() + static_cast<std::size_t>(n) * dhw;
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * dhw;
            for (std::size_t i = 0; i < dhw; ++i) {
                g_y1[base + i] = gy[base + i] * att[i];
                gs[i] += gy[base + i] * cached_y1_[base + i];
            }
        }
    }

    // Through the spatial sigmoid + conv.
    Tensor g_pre(g_spat.shape());
    for (std::size_t i = 0; i < g_spat.numel(); ++i) {
        const float t = spat_att_[i];
        g_pre[i] = g_spat[i] * t * (1.0f - t);
    }
    Tensor g_maps = spatial_conv_.backward(g_pre);

    // Average/max map contributions back into y1.
    for (int n = 0; n < s.n; ++n) {
        const float* g_avg = g_maps.data() + static_cast<std::size_t>(n) * 2 * dhw;
        const float* g_max = g_avg + dhw;
        for (std::size_t i = 0; i < dhw; ++i) {
            const float gshare = g_avg[i] / static_cast<float>(s.c);
            for (int c = 0; c < s.c; ++c)
                g_y1[(static_cast<std::size_t>(n) * s.c + c) * dhw + i] += gshare;
            const int bc = spat_argmax_[static_cast<std::size_t>(n) * dhw + i];
            g_y1[(static_cast<std::size_t>(n) * s.c + bc) * dhw + i] += g_max[i];
        }
    }

    // y1 = x * chan_att (broadcast over voxels).
    Tensor gx(x.shape());
    Tensor g_att({s.n, s.c});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t nc = static_cast<std::size_t>(n) * s.c + c;
            const std::size_t base = nc * dhw;
            const float att = chan_att_[nc];
            double acc = 0.0;
            for (std::size_t i = 0; i < dhw; ++i) {
                gx[base + i] = g_y1[base + i] * att;
                acc += static_cast<double>(g_y1[base + i]) * x[base + i];
            }
            g_att[nc] = static_cast<float>(acc);
        }

    // Through the channel sigmoid and the shared bottleneck (both branches).
    Tensor g_pre_att({s.n, s.c});
    for (std::size_t i = 0; i < g_att.numel(); ++i) {
        const float a = chan_att_[i];
        g_pre_att[i] = g_att[i] * a * (1.0f - a);
    }
    auto mlp_back = [&](const Tensor& in, const Tensor& hidden, Tensor& g_in) {
        for (int n = 0; n < s.n; ++n) {
            std::vector<float> gh(static_cast<std::size_t>(hidden_), 0.0f);
            for (int c = 0; c < s.c; ++c) {
                const float go = g_pre_att[static_cast<std::size_t>(n) * s.c + c];
                mlp_b2_.grad[c] += go;
                for (int j = 0; j < hidden_; ++j) {
                    const float hj = hidden[static_cast<std::size_t>(n) * hidden_ + j];
                    mlp_w2_.grad[static_cast<std::size_t>(c) * hidden_ + j] += go * hj;
                    gh[j] += go * mlp_w2_.value[static_cast<std::size_t>(c) * hidden_ + j];
                }
            }
            for (int j = 0; j < hidden_; ++j) {
                if (hidden[static_cast<std::size_t>(n) * hidden_ + j] <= 0.0f) continue;
                mlp_b1_.grad[j] += gh[j];
                for (int c = 0; c < s.c; ++c) {
                    mlp_w1_.grad[static_cast<std::size_t>(j) * s.c + c] +=
                        gh[j] * in[static_cast<std::size_t>(n) * s.c + c];
                    g_in[static_cast<std::size_t>(n) * s.c + c] +=
                        gh[j] * mlp_w1_.value[static_cast<std::size_t>(j) * s.c + c];
                }
            }
        }
    };
    Tensor g_avg_desc({s.n, s.c});
    Tensor g_max_desc({s.n, s.c});
    mlp_back(avg_desc_, hidden_avg_, g_avg_desc);
    mlp_back(max_desc_, hidden_max_, g_max_desc);

    // Descriptors back into x.
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t nc = static_cast<std::size_t>(n) * s.c + c;
            const std::size_t base = nc * dhw;
            const float gshare = g_avg_desc[nc] / static_cast<float>(dhw);
            for (std::size_t i = 0; i < dhw; ++i) gx[base + i] += gshare;
            gx[chan_argmax_[nc]] += g_max_desc[nc];
        }
    return gx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const Spatial sa = spatial_of(a, "concat_channels");
    const Spatial sb = spatial_of(b, "concat_channels");
    if (sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w)
        throw std::invalid_argument("concat_channels: incompatible shapes " + a.shape_str() +
                                    " vs " + b.shape_str());
    Tensor y({sa.n, sa.c + sb.c, sa.d, sa.h, sa.w});
    const std::size_t dhw = sa.dhw();
    for (int n = 0; n < sa.n; ++n) {
        float* dst = y.data() + static_cast<std::size_t>(n) * (sa.c + sb.c) * dhw;
        std::copy_n(a.data() + static_cast<std::size_t>(n) * sa.c * dhw, sa.c * dhw, dst);
        std::copy_n(b.data() + static_cast<std::size_t>(n) * sb.c * dhw, sb.c * dhw,
                    dst + static_cast<std::size_t>(sa.c) * dhw);
    }
    return y;
}

void split_channels(const Tensor& g, int ch_a, Tensor& ga, Tensor& gb) {
    const Spatial s = spatial_of(g, "split_channels");
    const int ch_b = s.c - ch_a;
    ga = Tensor({s.n, ch_a, s.d, s.h, s.w});
    gb = Tensor({s.n, ch_b, s.d, s.h, s.w});
    const std::size_t dhw = s.dhw();
    for (int n = 0; n < s.n; ++n) {
        const float* src = g.data() + static_cast<std::size_t>(n) * s.c * dhw;
        std::copy_n(src, static_cast<std::size_t>(ch_a) * dhw,
                    ga.data() + static_cast<std::size_t>(n) * ch_a * dhw);
        std::copy_n(src + static_cast<std::size_t>(ch_a) * dhw,
                    static_cast<std::size_t>(ch_b) * dhw,
                    gb.data() + static_cast<std::size_t>(n) * ch_b * dhw);
    }
}

}  // namespace digest
