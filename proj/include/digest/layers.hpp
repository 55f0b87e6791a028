#ifndef DIGEST_LAYERS_HPP
#define DIGEST_LAYERS_HPP

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "digest/tensor.hpp"

namespace digest {

// Named parameter with accumulated gradient. Layers own their params;
// the network exposes them by pointer for the optimizer and checkpoints.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    void resize(std::vector<int> shape) {
        value = Tensor(shape);
        grad = Tensor(std::move(shape));
    }
};

// 3D convolution, stride 1, zero padding. im2col + GEMM.
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(std::string name, int in_ch, int out_ch, int kernel, int pad);

    void init(std::mt19937& rng);
    Tensor forward(const Tensor& x, bool train);
    Tensor backward(const Tensor& gy);
    void collect(std::vector<Param*>& out) { out.push_back(&weight_); out.push_back(&bias_); }

    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }

private:
    int in_ch_ = 0, out_ch_ = 0, kernel_ = 0, pad_ = 0;
    Param weight_;  // [out_ch, in_ch * k^3]
    Param bias_;    // [out_ch]
    Tensor cached_input_;
};

// Per-sample group normalization with affine parameters.
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(std::string name, int channels, int groups);

    Tensor forward(const Tensor& x, bool train);
    Tensor backward(const Tensor& gy);
    void collect(std::vector<Param*>& out) { out.push_back(&gamma_); out.push_back(&beta_); }

private:
    int channels_ = 0, groups_ = 0;
    Param gamma_, beta_;
    Tensor cached_xhat_;
    std::vector<float> cached_invstd_;  // per (n, group)
};

class ReLU {
public:
    Tensor forward(const Tensor& x, bool train);
    Tensor backward(const Tensor& gy) const;

private:
    Tensor cached_output_;
};

class Sigmoid {
public:
    Tensor forward(const Tensor& x, bool train);
    Tensor backward(const Tensor& gy) const;

private:
    Tensor cached_output_;
};

// 2x2x2 max pooling, stride 2. Spatial dims must be even.
class MaxPool3d {
public:
    Tensor forward(const Tensor& x, bool train);
    Tensor backward(const Tensor& gy) const;

private:
    std::vector<int> input_shape_;
    std::vector<std::size_t> argmax_;
};

// Nearest-neighbour x2 upsampling.
class Upsample3d {
public:
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& gy) const;
};

// Convolutional block attention: channel attention from average- and
// max-pooled descriptors through a shared two-layer bottleneck, followed
// by spatial attention from channelwise average and max maps through a
// single convolution.
class CbamBlock {
public:
    CbamBlock() = default;
    CbamBlock(std::string name, int channels, int reduction = 4, int spatial_kernel = 7);

    void init(std::mt19937& rng);
    Tensor forward(const Tensor& x, bool train);
    Tensor backward(const Tensor& gy);
    void collect(std::vector<Param*>& out);

    // Test hook: when set, the block acts as the identity.
    void set_bypass(bool b) { bypass_ = b; }
    bool bypassed() const { return bypass_; }

    // Attention maps from the last forward pass (diagnostics/tests).
    const Tensor& last_channel_attention() const { return chan_att_; }
    const Tensor& last_spatial_attention() const { return spat_att_; }

private:
    int channels_ = 0, hidden_ = 0;
    bool bypass_ = false;
    Param mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
    Conv3d spatial_conv_;

    Tensor cached_input_;
    Tensor chan_att_;            // [N, C]
    Tensor spat_att_;            // [N, 1, D, H, W]
    Tensor avg_desc_, max_desc_; // [N, C]
    Tensor hidden_avg_, hidden_max_;  // [N, hidden], post-ReLU
    std::vector<std::size_t> chan_argmax_;  // per (n, c): argmax voxel
    std::vector<int> spat_argmax_;          // per (n, voxel): argmax channel
    Tensor cached_y1_;
};

// Channel-dim concat/split helpers for skip connections.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& g, int ch_a, Tensor& ga, Tensor& gb);

}  // namespace digest

#endif
