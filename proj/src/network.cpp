#include "digest/network.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace digest {

namespace {

int norm_groups(const std::string& kind, int channels) {
    if (kind == "instance") return channels;
    if (kind == "group") {
        for (int g : {4, 2, 1})
            if (channels % g == 0) return g;
    }
    throw std::invalid_argument("unknown norm_kind: " + kind);
}

constexpr const char* kCkptMagic = "DGSTCKPT";
constexpr std::uint32_t kCkptVersion = 1;

}  // namespace

void NetworkConfig::validate() const {
    if (depth < 2) throw std::invalid_argument("NetworkConfig: depth must be >= 2");
    if (base_width < 2) throw std::invalid_argument("NetworkConfig: base_width must be >= 2");
    if (out_channels != 3) throw std::invalid_argument("NetworkConfig: out_channels must be 3");
    if (in_channels < 1) throw std::invalid_argument("NetworkConfig: in_channels must be >= 1");
    norm_groups(norm_kind, base_width);
}

bool NetworkConfig::structurally_equal_ignoring_cbam(const NetworkConfig& other) const {
    return in_channels == other.in_channels && out_channels == other.out_channels &&
           base_width == other.base_width && depth == other.depth && norm_kind == other.norm_kind;
}

Network::ConvBlock Network::make_block(const std::string& name, int in_ch, int out_ch,
                                       const std::string& norm_kind) {
    ConvBlock b;
    b.c1 = Conv3d(name + ".c1", in_ch, out_ch, 3, 1);
    b.n1 = GroupNorm(name + ".n1", out_ch, norm_groups(norm_kind, out_ch));
    b.c2 = Conv3d(name + ".c2", out_ch, out_ch, 3, 1);
    b.n2 = GroupNorm(name + ".n2", out_ch, norm_groups(norm_kind, out_ch));
    return b;
}

Tensor Network::ConvBlock::forward(const Tensor& x, bool train) {
    Tensor t = r1.forward(n1.forward(c1.forward(x, train), train), train);
    return r2.forward(n2.forward(c2.forward(t, train), train), train);
}

Tensor Network::ConvBlock::backward(const Tensor& gy) {
    Tensor g = c2.backward(n2.backward(r2.backward(gy)));
    return c1.backward(n1.backward(r1.backward(g)));
}

void Network::ConvBlock::collect(std::vector<Param*>& out) {
    c1.collect(out);
    n1.collect(out);
    c2.collect(out);
    n2.collect(out);
}

void Network::ConvBlock::init(std::mt19937& rng) {
    c1.init(rng);
    c2.init(rng);
}

Network::Network(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int depth = cfg_.depth;

    std::mt19937 rng_backbone(cfg_.seed);
    // CBAM draws from a derived stream so the backbone init is identical
    // with and without attention for a given seed.
    std::mt19937 rng_cbam(cfg_.seed ^ 0x9e3779b9u);

    encoder_.resize(depth);
    for (int l = 0; l < depth; ++l) {
        const int in_ch = l == 0 ? cfg_.in_channels : level_width(l - 1);
        const int out_ch = level_width(l);
        const std::string name = "enc" + std::to_string(l);
        encoder_[l].block = make_block(name, in_ch, out_ch, cfg_.norm_kind);
        encoder_[l].block.init(rng_backbone);
        if (cfg_.use_cbam) {
            encoder_[l].cbam = std::make_unique<CbamBlock>(name + ".cbam", out_ch);
            encoder_[l].cbam->init(rng_cbam);
        }
    }

    decoder_.resize(depth - 1);
    for (int z = 0; z < depth - 1; ++z) {
        const int level = depth - 2 - z;  // skip connection level
        const int up_ch = level_width(level + 1);
        const int skip_ch = level_width(level);
        const int out_ch = level_width(level);
        const std::string name = "dec" + std::to_string(z);
        decoder_[z].up_channels = up_ch;
        decoder_[z].block = make_block(name, up_ch + skip_ch, out_ch, cfg_.norm_kind);
        decoder_[z].block.init(rng_backbone);
        decoder_[z].head = Conv3d(name + ".head", out_ch, cfg_.out_channels, 1, 0);
        decoder_[z].head.init(rng_backbone);
    }

    for (auto& lvl : encoder_) {
        lvl.block.collect(params_);
        if (lvl.cbam) lvl.cbam->collect(params_);
    }
    for (auto& st : decoder_) {
        st.block.collect(params_);
        st.head.collect(params_);
    }
}

StageOutputs Network::forward(const Tensor& input, bool train) {
    if (input.ndim() != 5)
        throw std::invalid_argument("Network::forward: expected 5D input, got " +
                                    input.shape_str());
    if (input.dim(1) != cfg_.in_channels)
        throw std::invalid_argument("Network::forward: expected " +
                                    std::to_string(cfg_.in_channels) + " channels, got " +
                                    std::to_string(input.dim(1)));
    const int divisor = 1 << (cfg_.depth - 1);
    const char* axis_names[3] = {"D", "H", "W"};
    for (int a = 0; a < 3; ++a)
        if (input.dim(2 + a) % divisor != 0)
            throw std::invalid_argument(std::string("Network::forward: axis ") + axis_names[a] +
                                        " size " + std::to_string(input.dim(2 + a)) +
                                        " not divisible by " + std::to_string(divisor));

    const int depth = cfg_.depth;
    std::vector<Tensor> skips(depth);
    Tensor cur = input;
    for (int l = 0; l < depth; ++l) {
        cur = encoder_[l].block.forward(cur, train);
        if (encoder_[l].cbam) cur = encoder_[l].cbam->forward(cur, train);
        skips[l] = cur;
        if (l + 1 < depth) cur = encoder_[l].pool.forward(cur, train);
    }

    StageOutputs out;
    Tensor features = skips[depth - 1];
    for (int z = 0; z < depth - 1; ++z) {
        const int level = depth - 2 - z;
        Tensor up = decoder_[z].up.forward(features);
        Tensor cat = concat_channels(up, skips[level]);
        features = decoder_[z].block.forward(cat, train);
        if (train) decoder_[z].cached_features = features;
        Tensor logits = decoder_[z].head.forward(features, train);
        out.aux.push_back(decoder_[z].head_sig.forward(logits, train));
    }
    out.final = out.aux.back();
    return out;
}

void Network::backward(const std::vector<Tensor>& aux_grads) {
    const int depth = cfg_.depth;
    if (static_cast<int>(aux_grads.size()) != depth - 1)
        throw std::invalid_argument("Network::backward: expected " + std::to_string(depth - 1) +
                                    " aux gradients, got " + std::to_string(aux_grads.size()));

    skip_grads_.assign(depth, Tensor());
    Tensor carry;  // gradient w.r.t. current stage's input features
    for (int z = depth - 2; z >= 0; --z) {
        const int level = depth - 2 - z;
        Tensor g_feat =
            decoder_[z].head.backward(decoder_[z].head_sig.backward(aux_grads[z]));
        if (!carry.empty())
            for (std::size_t i = 0; i < g_feat.numel(); ++i) g_feat[i] += carry[i];
        Tensor g_cat = decoder_[z].block.backward(g_feat);
        Tensor g_up, g_skip;
        split_channels(g_cat, decoder_[z].up_channels, g_up, g_skip);
        if (skip_grads_[level].empty())
            skip_grads_[level] = std::move(g_skip);
        else
            for (std::size_t i = 0; i < g_skip.numel(); ++i) skip_grads_[level][i] += g_skip[i];
        carry = decoder_[z].up.backward(g_up);
    }

    // carry now holds the gradient w.r.t. the bottleneck output.
    Tensor g_level = std::move(carry);
    for (int l = depth - 1; l >= 0; --l) {
        if (l < depth - 1) {
            // g_level currently holds the gradient flowing into level l+1's
            // input; route it through the pool back to this level's output.
            g_level = encoder_[l].pool.backward(g_level);
        }
        if (!skip_grads_[l].empty())
            for (std::size_t i = 0; i < g_level.numel(); ++i) g_level[i] += skip_grads_[l][i];
        if (encoder_[l].cbam) g_level = encoder_[l].cbam->backward(g_level);
        Tensor g_in = encoder_[l].block.backward(g_level);
        g_level = std::move(g_in);
    }
}

void Network::zero_grad() {
    for (Param* p : params_) p->grad.zero();
}

std::size_t Network::num_parameters() const {
    std::size_t n = 0;
    for (const Param* p : params_) n += p->value.numel();
    return n;
}

void Network::set_cbam_bypass(bool b) {
    for (auto& lvl : encoder_)
        if (lvl.cbam) lvl.cbam->set_bypass(b);
}

Network build_network(const NetworkConfig& cfg) { return Network(cfg); }

double init_student_from_teacher(Network& student, const Network& teacher) {
    if (!student.config().structurally_equal_ignoring_cbam(teacher.config()))
        throw std::invalid_argument(
            "init_student_from_teacher: configs differ beyond use_cbam "
            "(depth/width/channels/norm must match)");

    std::map<std::string, const Param*> tmap;
    for (const Param* p : teacher.params()) tmap[p->name] = p;

    std::vector<std::string> unmatched;
    // Fraction is counted in scalar parameters, not tensors: the attention
    // blocks contribute many small tensors but few scalars.
    std::size_t copied = 0, total = 0;
    for (Param* p : student.params()) {
        total += p->value.numel();
        auto it = tmap.find(p->name);
        if (it == tmap.end()) {
            if (p->name.find(".cbam") == std::string::npos) unmatched.push_back(p->name);
            continue;
        }
        if (!it->second->value.same_shape(p->value)) {
            unmatched.push_back(p->name);
            continue;
        }
        p->value = it->second->value;
        tmap.erase(it);
        copied += p->value.numel();
    }
    for (const auto& [name, p] : tmap) unmatched.push_back(name);

    if (!unmatched.empty()) {
        std::string msg = "init_student_from_teacher: unmatched parameters:";
        for (const auto& n : unmatched) msg += " " + n;
        throw std::invalid_argument(msg);
    }
    return static_cast<double>(copied) / static_cast<double>(total);
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
std::string read_str(std::istream& is) {
    std::string s(read_u32(is), '\0');
    is.read(s.data(), static_cast<std::streamsize>(s.size()));
    return s;
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kCkptMagic, 8);
    write_u32(os, kCkptVersion);
    const NetworkConfig& c = net.config();
    write_u32(os, static_cast<std::uint32_t>(c.in_channels));
    write_u32(os, static_cast<std::uint32_t>(c.out_channels));
    write_u32(os, static_cast<std::uint32_t>(c.base_width));
    write_u32(os, static_cast<std::uint32_t>(c.depth));
    write_u32(os, c.use_cbam ? 1u : 0u);
    write_str(os, c.norm_kind);
    write_u32(os, c.seed);
    write_u64(os, net.params().size());
    for (const Param* p : net.params()) {
        write_str(os, p->name);
        write_u32(os, static_cast<std::uint32_t>(p->value.ndim()));
        for (int d : p->value.shape()) write_u32(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(p->value.data()),
                 static_cast<std::streamsize>(p->value.numel() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Network load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    if (read_u32(is) != kCkptVersion)
        throw std::runtime_error("unsupported checkpoint version: " + path);

    NetworkConfig cfg;
    cfg.in_channels = static_cast<int>(read_u32(is));
    cfg.out_channels = static_cast<int>(read_u32(is));
    cfg.base_width = static_cast<int>(read_u32(is));
    cfg.depth = static_cast<int>(read_u32(is));
    cfg.use_cbam = read_u32(is) != 0;
    cfg.norm_kind = read_str(is);
    cfg.seed = read_u32(is);

    Network net(cfg);
    std::map<std::string, Param*> pmap;
    for (Param* p : net.params()) pmap[p->name] = p;

    const std::uint64_t count = read_u64(is);
    if (count != net.params().size())
        throw std::runtime_error("checkpoint parameter count mismatch: " + path);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = read_str(is);
        auto it = pmap.find(name);
        if (it == pmap.end()) throw std::runtime_error("unknown checkpoint parameter: " + name);
        std::vector<int> shape(read_u32(is));
        for (int& d : shape) d = static_cast<int>(read_u32(is));
        if (shape != it->second->value.shape())
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        is.read(reinterpret_cast<char*>(it->second->value.data()),
                static_cast<std::streamsize>(it->second->value.numel() * sizeof(float)));
    }
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    return net;
}

}  // namespace digest
