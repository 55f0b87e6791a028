#ifndef DIGEST_NETWORK_HPP
#define DIGEST_NETWORK_HPP

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "digest/layers.hpp"
#include "digest/tensor.hpp"

namespace digest {

struct NetworkConfig {
    int in_channels = 4;
    int out_channels = 3;  // ET, TC, WT
    int base_width = 8;
    int depth = 4;
    bool use_cbam = false;
    std::string norm_kind = "group";  // "group" or "instance"
    unsigned seed = 0;

    void validate() const;
    bool structurally_equal_ignoring_cbam(const NetworkConfig& other) const;
};

// Final probability map plus one auxiliary map per decoder stage,
// coarsest first. The finest aux map is the final map itself.
struct StageOutputs {
    Tensor final;
    std::vector<Tensor> aux;
};

// Encoder-decoder segmentation backbone with a 1x1x1 sigmoid head after
// every decoder stage. CBAM blocks sit at the end of each encoder level
// when enabled (student variant).
class Network {
public:
    explicit Network(const NetworkConfig& cfg);

    const NetworkConfig& config() const { return cfg_; }

    StageOutputs forward(const Tensor& input, bool train = false);

    // Gradients arrive per aux map (coarsest first, same order/shapes as
    // StageOutputs::aux from the preceding train-mode forward).
    void backward(const std::vector<Tensor>& aux_grads);

    std::vector<Param*>& params() { return params_; }
    const std::vector<Param*>& params() const { return params_; }
    void zero_grad();
    std::size_t num_parameters() const;

    // Test hook: make every CBAM block the identity.
    void set_cbam_bypass(bool b);

private:
    struct ConvBlock {
        Conv3d c1, c2;
        GroupNorm n1, n2;
        ReLU r1, r2;
        Tensor forward(const Tensor& x, bool train);
        Tensor backward(const Tensor& gy);
        void collect(std::vector<Param*>& out);
        void init(std::mt19937& rng);
    };
    struct EncoderLevel {
        ConvBlock block;
        std::unique_ptr<CbamBlock> cbam;
        MaxPool3d pool;  // used on this level's output, except at the bottleneck
    };
    struct DecoderStage {
        Upsample3d up;
        ConvBlock block;
        Conv3d head;
        Sigmoid head_sig;
        int up_channels = 0;
        Tensor cached_features;  // block output, train mode only
    };

    static ConvBlock make_block(const std::string& name, int in_ch, int out_ch,
                                const std::string& norm_kind);
    int level_width(int level) const { return cfg_.base_width << level; }

    NetworkConfig cfg_;
    std::vector<EncoderLevel> encoder_;
    std::vector<DecoderStage> decoder_;
    std::vector<Param*> params_;

    // Train-mode caches for backward.
    std::vector<Tensor> skip_grads_;
};

Network build_network(const NetworkConfig& cfg);

// Copies every name+shape-matched parameter from teacher into student.
// CBAM parameters keep their fresh initialization. Returns the copied
// fraction of student parameter tensors. Throws on any non-CBAM mismatch.
double init_student_from_teacher(Network& student, const Network& teacher);

// Versioned binary checkpoint: config plus name -> tensor map.
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

}  // namespace digest

#endif
