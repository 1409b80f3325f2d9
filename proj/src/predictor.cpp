#include "bevflow/predictor.hpp"

#include <cmath>

namespace bevflow {

PredictorConfig PredictorConfig::full() {
    PredictorConfig c;
    c.stage_channels = {16, 32, 64, 160, 256};
    c.decoder_dim = 64;
    return c;
}

PredictorConfig PredictorConfig::tiny() {
    PredictorConfig c;
    c.stage_channels = {16, 24, 32, 48, 64};
    c.decoder_dim = 32;
    return c;
}

void PredictorConfig::validate() const {
    if (stage_channels.size() != 5) {
        throw ConfigError("predictor needs exactly 5 stages, got " +
                          std::to_string(stage_channels.size()));
    }
    if (sr_ratios.size() != 5 || heads.size() != 5) {
        throw ConfigError("predictor needs 5 sr_ratios and 5 head counts");
    }
    for (size_t i = 0; i < 5; ++i) {
        if (stage_channels[i] % heads[i] != 0) {
            throw ConfigError("stage " + std::to_string(i) + ": dim " +
                              std::to_string(stage_channels[i]) + " not divisible by " +
                              std::to_string(heads[i]) + " heads");
        }
        if (sr_ratios[i] < 1) throw ConfigError("sr_ratio must be >= 1");
    }
    if (decoder_dim % 4 != 0) {
        throw ConfigError("decoder_dim " + std::to_string(decoder_dim) +
                          " must be divisible by 4 (two channel halvings in the heads)");
    }
    if (t_f < 1 || n_classes < 2) throw ConfigError("bad t_f/n_classes");
    if (layers_per_stage < 1 || mlp_ratio < 1) throw ConfigError("bad layers/mlp_ratio");
}

Tensor temporal_merge(const Tensor& bev_seq) {
    if (bev_seq.rank() == 4) {  // (T,C,H,W)
        return reshape(bev_seq, {bev_seq.dim(0) * bev_seq.dim(1), bev_seq.dim(2), bev_seq.dim(3)});
    }
    if (bev_seq.rank() == 5) {  // (B,T,C,H,W)
        return reshape(bev_seq, {bev_seq.dim(0), bev_seq.dim(1) * bev_seq.dim(2), bev_seq.dim(3),
                                 bev_seq.dim(4)});
    }
    throw ShapeError("temporal_merge expects (T,C,H,W) or (B,T,C,H,W), got " +
                     shape_str(bev_seq.shape()));
}

namespace {

Tensor map_to_tokens(const Tensor& x) {  // (B,C,H,W) -> (B,HW,C)
    return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

Tensor tokens_to_map(const Tensor& t, int64_t h, int64_t w) {  // (B,N,C) -> (B,C,h,w)
    return permute(reshape(t, {t.dim(0), h, w, t.dim(2)}), {0, 3, 1, 2});
}

}  // namespace

OverlapPatchEmbed::OverlapPatchEmbed(int64_t in_ch, int64_t out_ch, int patch, int stride, Rng& rng) {
    if (patch < stride) throw ConfigError("patch embed: patch must be >= stride (overlapping)");
    proj = Conv2d(in_ch, out_ch, patch, stride, (patch - 1) / 2, rng);
    norm = LayerNorm(out_ch);
}

Tensor OverlapPatchEmbed::forward(const Tensor& x, int64_t& out_h, int64_t& out_w) const {
    Tensor y = proj.forward(x);
    out_h = y.dim(2);
    out_w = y.dim(3);
    return norm.forward(map_to_tokens(y));
}

void OverlapPatchEmbed::collect(const std::string& prefix, ParamSet& out) const {
    proj.collect(prefix + ".proj", out);
    norm.collect(prefix + ".norm", out);
}

SRAttention::SRAttention(int64_t dim, int n_heads, int sr_ratio, Rng& rng)
    : dim(dim), n_heads(n_heads), sr_ratio(sr_ratio) {
    if (dim % n_heads != 0) {
        throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    }
    if (sr_ratio < 1) throw ConfigError("sr_ratio must be >= 1");
    q_proj = Linear(dim, dim, rng);
    k_proj = Linear(dim, dim, rng);
    v_proj = Linear(dim, dim, rng);
    out_proj = Linear(dim, dim, rng);
    if (sr_ratio > 1) {
        sr = Conv2d(dim, dim, sr_ratio, sr_ratio, 0, rng);
        sr_norm = LayerNorm(dim);
    }
}

Tensor SRAttention::forward(const Tensor& tokens, int64_t h, int64_t w) const {
    const int64_t B = tokens.dim(0), N = tokens.dim(1);
    if (N != h * w) throw ShapeError("SRAttention: token count does not match grid");
    const int64_t dh = dim / n_heads;

    Tensor kv_src = tokens;
    if (sr_ratio > 1) {
        Tensor map = tokens_to_map(tokens, h, w);
        Tensor red = sr.forward(map);
        kv_src = sr_norm.forward(map_to_tokens(red));
    }
    const int64_t M = kv_src.dim(1);

    auto split_heads = [&](const Tensor& t, int64_t n) {
        // (B,n,dim) -> (B,heads,n,dh)
        return permute(reshape(t, {B, n, static_cast<int64_t>(n_heads), dh}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(q_proj.forward(tokens), N);
    Tensor k = split_heads(k_proj.forward(kv_src), M);
    Tensor v = split_heads(v_proj.forward(kv_src), M);

    Tensor scores = matmul(q, permute(k, {0, 1, 3, 2}));
    scores = mul_scalar(scores, 1.0f / std::sqrt(static_cast<float>(dh)));
    Tensor attn = softmax(scores, -1);
    Tensor ctx = matmul(attn, v);  // (B,heads,N,dh)
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, N, dim});
    return out_proj.forward(merged);
}

void SRAttention::collect(const std::string& prefix, ParamSet& out) const {
    q_proj.collect(prefix + ".q_proj", out);
    k_proj.collect(prefix + ".k_proj", out);
    v_proj.collect(prefix + ".v_proj", out);
    out_proj.collect(prefix + ".out_proj", out);
    if (sr_ratio > 1) {
        sr.collect(prefix + ".sr", out);
        sr_norm.collect(prefix + ".sr_norm", out);
    }
}

MixFFN::MixFFN(int64_t dim, int64_t hidden, Rng& rng) {
    fc1 = Linear(dim, hidden, rng);
    dwconv = Conv2d(hidden, hidden, 3, 1, 1, rng, /*groups=*/static_cast<int>(hidden));
    fc2 = Linear(hidden, dim, rng);
}

Tensor MixFFN::forward(const Tensor& tokens, int64_t h, int64_t w) const {
    Tensor x = fc1.forward(tokens);
    x = tokens_to_map(x, h, w);
    x = dwconv.forward(x);
    x = gelu(x);
    x = map_to_tokens(x);
    return fc2.forward(x);
}

void MixFFN::collect(const std::string& prefix, ParamSet& out) const {
    fc1.collect(prefix + ".fc1", out);
    dwconv.collect(prefix + ".dwconv", out);
    fc2.collect(prefix + ".fc2", out);
}

EncoderBlock::EncoderBlock(int64_t dim, int n_heads, int sr_ratio, int mlp_ratio, Rng& rng)
    : norm1(dim), norm2(dim), attn(dim, n_heads, sr_ratio, rng),
      ffn(dim, dim * mlp_ratio, rng) {}

Tensor EncoderBlock::forward(const Tensor& tokens, int64_t h, int64_t w) const {
    Tensor x = add(tokens, attn.forward(norm1.forward(tokens), h, w));
    return add(x, ffn.forward(norm2.forward(x), h, w));
}

void EncoderBlock::collect(const std::string& prefix, ParamSet& out) const {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    ffn.collect(prefix + ".ffn", out);
}

ResidualBlock::ResidualBlock(int64_t in_ch, int64_t out_ch, Rng& rng) {
    conv = Conv2d(in_ch, out_ch, 3, 1, 1, rng);
    bn = BatchNorm2d(out_ch);
    has_adapter = in_ch != out_ch;
    if (has_adapter) adapter = Conv2d(in_ch, out_ch, 1, 1, 0, rng);
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) const {
    Tensor main = bn.forward(conv.forward(x), training);
    Tensor skip = has_adapter ? adapter.forward(x) : x;
    return leaky_relu(add(main, skip), 0.1f);
}

void ResidualBlock::collect(const std::string& prefix, ParamSet& out) const {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
    if (has_adapter) adapter.collect(prefix + ".adapter", out);
}

std::vector<int64_t> head_channel_trace(int64_t decoder_dim) {
    if (decoder_dim % 4 != 0) {
        throw ConfigError("head channels " + std::to_string(decoder_dim) +
                          " not divisible by 4 across two halvings");
    }
    // halve at blocks 1 and 3 (1-indexed)
    return {decoder_dim, decoder_dim / 2, decoder_dim / 2, decoder_dim / 4, decoder_dim / 4};
}

PredictionHead::PredictionHead(int64_t in_ch, int64_t t_f, int64_t out_ch_per_frame, Rng& rng)
    : t_f(t_f), out_ch(out_ch_per_frame) {
    const auto trace = head_channel_trace(in_ch);
    for (size_t i = 0; i + 1 < trace.size(); ++i) {
        blocks.emplace_back(trace[i], trace[i + 1], rng);
    }
    out_conv = Conv2d(trace.back(), t_f * out_ch_per_frame, 1, 1, 0, rng);
}

Tensor PredictionHead::forward(const Tensor& x, bool training) const {
    Tensor y = x;
    for (const auto& b : blocks) y = b.forward(y, training);
    y = out_conv.forward(y);
    return reshape(y, {y.dim(0), t_f, out_ch, y.dim(2), y.dim(3)});
}

void PredictionHead::collect(const std::string& prefix, ParamSet& out) const {
    for (size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    }
    out_conv.collect(prefix + ".out_conv", out);
}

Predictor::Predictor(const PredictorConfig& cfg, int64_t in_channels, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    int64_t in_ch = in_channels;
    for (size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
        Stage st;
        st.embed = OverlapPatchEmbed(in_ch, cfg_.stage_channels[i], 3, 2, rng);
        for (int l = 0; l < cfg_.layers_per_stage; ++l) {
            st.blocks.emplace_back(cfg_.stage_channels[i], cfg_.heads[i], cfg_.sr_ratios[i],
                                   cfg_.mlp_ratio, rng);
        }
        st.norm = LayerNorm(cfg_.stage_channels[i]);
        stages_.push_back(std::move(st));
        in_ch = cfg_.stage_channels[i];
    }
    for (int64_t ch : cfg_.stage_channels) {
        level_proj_.emplace_back(ch, cfg_.decoder_dim, rng);
    }
    fuse_conv_ = Conv2d(cfg_.decoder_dim * 5, cfg_.decoder_dim, 1, 1, 0, rng);
    fuse_bn_ = BatchNorm2d(cfg_.decoder_dim);
    seg_head_ = PredictionHead(cfg_.decoder_dim, cfg_.t_f, cfg_.n_classes, rng);
    flow_head_ = PredictionHead(cfg_.decoder_dim, cfg_.t_f, 2, rng);
}

MultiScaleFeatures Predictor::encode_multiscale(const Tensor& x, bool training) const {
    (void)training;
    MultiScaleFeatures out;
    Tensor cur = x;
    for (const auto& st : stages_) {
        int64_t h = 0, w = 0;
        Tensor tokens = st.embed.forward(cur, h, w);
        for (const auto& b : st.blocks) tokens = b.forward(tokens, h, w);
        tokens = st.norm.forward(tokens);
        cur = tokens_to_map(tokens, h, w);
        out.levels.push_back(cur);
    }
    return out;
}

Tensor Predictor::fuse_decode(const MultiScaleFeatures& f, int64_t out_h, int64_t out_w,
                              bool training) const {
    if (f.levels.size() != level_proj_.size()) throw ShapeError("fuse_decode: level count mismatch");
    std::vector<Tensor> ups;
    for (size_t i = 0; i < f.levels.size(); ++i) {
        const Tensor& lvl = f.levels[i];
        Tensor proj = level_proj_[i].forward(map_to_tokens(lvl));
        Tensor map = tokens_to_map(proj, lvl.dim(2), lvl.dim(3));
        ups.push_back(upsample_bilinear(map, out_h, out_w));
    }
    Tensor cat = concat(ups, 1);
    return leaky_relu(fuse_bn_.forward(fuse_conv_.forward(cat), training), 0.1f);
}

Predictor::Output Predictor::forward(const Tensor& merged_bev, bool training) const {
    if (merged_bev.rank() != 4) {
        throw ShapeError("predictor expects (B,C,H,W), got " + shape_str(merged_bev.shape()));
    }
    MultiScaleFeatures feats = encode_multiscale(merged_bev, training);
    Tensor fused = fuse_decode(feats, merged_bev.dim(2), merged_bev.dim(3), training);
    return {seg_head_.forward(fused, training), flow_head_.forward(fused, training)};
}

void Predictor::collect(const std::string& prefix, ParamSet& out) const {
    for (size_t i = 0; i < stages_.size(); ++i) {
        const std::string p = prefix + ".stage" + std::to_string(i);
        stages_[i].embed.collect(p + ".embed", out);
        for (size_t b = 0; b < stages_[i].blocks.size(); ++b) {
            stages_[i].blocks[b].collect(p + ".block" + std::to_string(b), out);
        }
        stages_[i].norm.collect(p + ".norm", out);
    }
    for (size_t i = 0; i < level_proj_.size(); ++i) {
        level_proj_[i].collect(prefix + ".decode.proj" + std::to_string(i), out);
    }
    fuse_conv_.collect(prefix + ".decode.fuse_conv", out);
    fuse_bn_.collect(prefix + ".decode.fuse_bn", out);
    seg_head_.collect(prefix + ".seg_head", out);
    flow_head_.collect(prefix + ".flow_head", out);
}

}  // namespace bevflow
