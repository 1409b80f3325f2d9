#include "bevflow/encoder.hpp"

namespace bevflow {

void EncoderSpec::validate() const {
    if (stride < 1 || (stride & (stride - 1)) != 0) {
        throw ConfigError("encoder stride must be a power of 2, got " + std::to_string(stride));
    }
    if (c_depth < 1 || c_feat < 1) throw ConfigError("encoder channel split must be positive");
    if (stage_channels.empty()) throw ConfigError("encoder needs at least one stage");
}

ImageEncoder::ImageEncoder(const EncoderSpec& spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    int downs = 0;
    for (int s = spec_.stride; s > 1; s >>= 1) ++downs;
    if (downs > static_cast<int>(spec_.stage_channels.size())) {
        throw ConfigError("encoder stride " + std::to_string(spec_.stride) + " needs more stages than " +
                          std::to_string(spec_.stage_channels.size()));
    }
    int64_t in_ch = 3;
    for (size_t i = 0; i < spec_.stage_channels.size(); ++i) {
        const int stride = static_cast<int>(i) < downs ? 2 : 1;
        Stage st;
        st.conv = Conv2d(in_ch, spec_.stage_channels[i], 3, stride, 1, rng);
        st.bn = BatchNorm2d(spec_.stage_channels[i]);
        stages_.push_back(std::move(st));
        in_ch = spec_.stage_channels[i];
    }
    head_ = Conv2d(in_ch, spec_.c_depth + spec_.c_feat, 1, 1, 0, rng);
}

Tensor ImageEncoder::forward(const Tensor& images, bool training) const {
    if (images.rank() != 4 || images.dim(1) != 3) {
        throw ShapeError("encoder expects (N,3,H,W), got " + shape_str(images.shape()));
    }
    if (images.dim(2) % spec_.stride != 0 || images.dim(3) % spec_.stride != 0) {
        throw ConfigError("image size " + std::to_string(images.dim(2)) + "x" +
                          std::to_string(images.dim(3)) + " not divisible by encoder stride " +
                          std::to_string(spec_.stride));
    }
    Tensor x = images;
    for (const auto& st : stages_) {
        x = leaky_relu(st.bn.forward(st.conv.forward(x), training), 0.1f);
    }
    return head_.forward(x);
}

void ImageEncoder::collect(const std::string& prefix, ParamSet& out) const {
    for (size_t i = 0; i < stages_.size(); ++i) {
        const std::string p = prefix + ".stage" + std::to_string(i);
        stages_[i].conv.collect(p + ".conv", out);
        stages_[i].bn.collect(p + ".bn", out);
    }
    head_.collect(prefix + ".head", out);
}

EncodedSweep encode_images(const ImageSweep& sweep, const ImageEncoder& encoder, bool training) {
    if (sweep.images.rank() != 5) {
        throw ShapeError("sweep images must be (T,N_c,3,H,W), got " + shape_str(sweep.images.shape()));
    }
    const int64_t T = sweep.images.dim(0), Nc = sweep.images.dim(1);
    const int64_t H = sweep.images.dim(3), W = sweep.images.dim(4);
    // single batched pass over all T*Nc frames
    Tensor batch = reshape(sweep.images, {T * Nc, 3, H, W});
    Tensor feat = encoder.forward(batch, training);
    const int64_t cd = encoder.spec().c_depth, cf = encoder.spec().c_feat;
    const int64_t hf = feat.dim(2), wf = feat.dim(3);
    Tensor split_d = slice(feat, 1, 0, cd);
    Tensor split_f = slice(feat, 1, cd, cf);
    return {reshape(split_d, {T, Nc, cd, hf, wf}), reshape(split_f, {T, Nc, cf, hf, wf})};
}

}  // namespace bevflow
