#pragma once

#include <vector>

#include "bevflow/geometry.hpp"
#include "bevflow/nn.hpp"
#include "bevflow/tensor.hpp"

namespace bevflow {

struct EncoderSpec {
    int stride = 8;                               // image -> feature downsampling, power of 2
    int64_t c_depth = 48;                         // depth-logit channels
    int64_t c_feat = 64;                          // context feature channels
    std::vector<int64_t> stage_channels = {32, 48, 64, 96};

    void validate() const;
};

// A camera sweep plus the calibration needed to project it.
struct ImageSweep {
    Tensor images;  // (T_p+1, N_c, 3, H, W) normalized RGB
    CameraRig rig;
    EgoTrajectory trajectory;

    int64_t t_len() const { return images.dim(0); }
    int64_t n_cameras() const { return images.dim(1); }
};

// Shared-weight pyramidal conv encoder applied to all frames and cameras of a
// sweep in one batched pass. Output channels split into depth logits and
// context features.
class ImageEncoder {
public:
    ImageEncoder() = default;
    ImageEncoder(const EncoderSpec& spec, Rng& rng);

    // (N, 3, H, W) -> (N, c_depth + c_feat, H/stride, W/stride)
    Tensor forward(const Tensor& images, bool training) const;
    void collect(const std::string& prefix, ParamSet& out) const;
    const EncoderSpec& spec() const { return spec_; }

private:
    EncoderSpec spec_;
    struct Stage {
        Conv2d conv;
        BatchNorm2d bn;
    };
    std::vector<Stage> stages_;
    Conv2d head_;
};

struct EncodedSweep {
    Tensor depth_logits;  // (T, N_c, C_D, H_f, W_f)
    Tensor features;      // (T, N_c, C_F, H_f, W_f)
};

EncodedSweep encode_images(const ImageSweep& sweep, const ImageEncoder& encoder, bool training);

}  // namespace bevflow
