#pragma once

#include <vector>

#include "bevflow/nn.hpp"
#include "bevflow/tensor.hpp"

namespace bevflow {

struct PredictorConfig {
    std::vector<int64_t> stage_channels = {16, 32, 64, 160, 256};
    int layers_per_stage = 2;
    int mlp_ratio = 4;
    std::vector<int> sr_ratios = {8, 4, 2, 1, 1};
    std::vector<int> heads = {1, 2, 4, 8, 8};
    int64_t decoder_dim = 64;
    int64_t t_f = 4;
    int64_t n_classes = 2;

    static PredictorConfig full();
    static PredictorConfig tiny();
    void validate() const;
};

// Feature maps f_1..f_5, each half the spatial size of the previous.
struct MultiScaleFeatures {
    std::vector<Tensor> levels;  // (B, C_k, H_k, W_k)
};

struct SegmentationVolume {
    Tensor logits;  // (T_f, C, H, W) logits or one-hot ground truth
};

struct FlowVolume {
    Tensor flow;  // (T_f, 2, H, W), cells per frame step, (d_row, d_col)
};

// Stacks time into channels, oldest frame first: (B,T,C,H,W) -> (B,T*C,H,W).
Tensor temporal_merge(const Tensor& bev_seq);

// Strided overlapping patch embedding; halves the spatial size (pad-to-ceil).
struct OverlapPatchEmbed {
    Conv2d proj;
    LayerNorm norm;

    OverlapPatchEmbed() = default;
    OverlapPatchEmbed(int64_t in_ch, int64_t out_ch, int patch, int stride, Rng& rng);
    // (B,C,H,W) -> tokens (B, H'*W', out_ch) plus the token grid size
    Tensor forward(const Tensor& x, int64_t& out_h, int64_t& out_w) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

// Multi-head attention with keys/values taken from a spatially reduced copy
// of the token map (reduction ratio R per side).
struct SRAttention {
    int64_t dim = 0;
    int n_heads = 1;
    int sr_ratio = 1;
    Linear q_proj, k_proj, v_proj, out_proj;
    Conv2d sr;
    LayerNorm sr_norm;

    SRAttention() = default;
    SRAttention(int64_t dim, int n_heads, int sr_ratio, Rng& rng);
    // tokens (B, N, dim) laid out on an h x w grid with N == h*w
    Tensor forward(const Tensor& tokens, int64_t h, int64_t w) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

// Linear expand -> depthwise 3x3 conv on the token grid -> GELU -> project.
struct MixFFN {
    Linear fc1, fc2;
    Conv2d dwconv;

    MixFFN() = default;
    MixFFN(int64_t dim, int64_t hidden, Rng& rng);
    Tensor forward(const Tensor& tokens, int64_t h, int64_t w) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

struct EncoderBlock {
    LayerNorm norm1, norm2;
    SRAttention attn;
    MixFFN ffn;

    EncoderBlock() = default;
    EncoderBlock(int64_t dim, int n_heads, int sr_ratio, int mlp_ratio, Rng& rng);
    Tensor forward(const Tensor& tokens, int64_t h, int64_t w) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

// Residual conv block: conv3x3 + batchnorm + leaky relu with a 1x1 adapter on
// the skip path when the channel count changes.
struct ResidualBlock {
    Conv2d conv;
    BatchNorm2d bn;
    Conv2d adapter;
    bool has_adapter = false;

    ResidualBlock() = default;
    ResidualBlock(int64_t in_ch, int64_t out_ch, Rng& rng);
    Tensor forward(const Tensor& x, bool training) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

// Channel trace of the four head blocks: halves at blocks 1 and 3.
std::vector<int64_t> head_channel_trace(int64_t decoder_dim);

struct PredictionHead {
    std::vector<ResidualBlock> blocks;
    Conv2d out_conv;
    int64_t t_f = 0, out_ch = 0;

    PredictionHead() = default;
    PredictionHead(int64_t in_ch, int64_t t_f, int64_t out_ch_per_frame, Rng& rng);
    // (B, in_ch, H, W) -> (B, T_f, out_ch, H, W)
    Tensor forward(const Tensor& x, bool training) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

class Predictor {
public:
    Predictor() = default;
    Predictor(const PredictorConfig& cfg, int64_t in_channels, Rng& rng);

    MultiScaleFeatures encode_multiscale(const Tensor& x, bool training) const;
    Tensor fuse_decode(const MultiScaleFeatures& f, int64_t out_h, int64_t out_w,
                       bool training) const;

    struct Output {
        Tensor seg;   // (B, T_f, C, H, W)
        Tensor flow;  // (B, T_f, 2, H, W)
    };
    Output forward(const Tensor& merged_bev, bool training) const;

    void collect(const std::string& prefix, ParamSet& out) const;
    const PredictorConfig& config() const { return cfg_; }

private:
    PredictorConfig cfg_;
    struct Stage {
        OverlapPatchEmbed embed;
        std::vector<EncoderBlock> blocks;
        LayerNorm norm;
    };
    std::vector<Stage> stages_;
    std::vector<Linear> level_proj_;  // per-level MLP to decoder_dim
    Conv2d fuse_conv_;
    BatchNorm2d fuse_bn_;
    PredictionHead seg_head_, flow_head_;
};

}  // namespace bevflow
