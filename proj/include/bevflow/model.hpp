#pragma once

#include <vector>

#include "bevflow/encoder.hpp"
#include "bevflow/geometry.hpp"
#include "bevflow/metrics.hpp"
#include "bevflow/predictor.hpp"
#include "bevflow/synth.hpp"

namespace bevflow {

struct ModelConfig {
    EncoderSpec encoder;
    PredictorConfig predictor;
    BEVGridSpec grid;
    DepthBinSpec bins;
    SequenceSpec seq;
};

// Full pipeline: shared image encoder, lift-splat projection into the BEV
// grid, ego-warping of past frames, temporal merge, and the two-branch
// predictor. Splat indices are cached per camera since the rig is fixed.
class InstancePredictionModel {
public:
    InstancePredictionModel(const ModelConfig& cfg, const CameraRig& rig, Rng& rng);

    struct Output {
        Tensor seg;   // (B, T_f, C, H_BEV, W_BEV)
        Tensor flow;  // (B, T_f, 2, H_BEV, W_BEV)
    };

    // images: (B, T_p+1, N_c, 3, H, W), already normalized.
    Output forward(const Tensor& images, const std::vector<EgoTrajectory>& trajectories,
                   bool training) const;

    // BEV feature map of one clip after splat + warp + merge: (1, (T_p+1)*C_F, H, W)
    Tensor bev_features(const Tensor& images, const EgoTrajectory& traj, bool training) const;

    ParamSet params() const;
    UncertaintyWeights& loss_weights() { return uw_; }
    const UncertaintyWeights& loss_weights() const { return uw_; }
    const ModelConfig& config() const { return cfg_; }
    const CameraRig& rig() const { return rig_; }

private:
    ModelConfig cfg_;
    CameraRig rig_;
    ImageEncoder encoder_;
    Predictor predictor_;
    UncertaintyWeights uw_;
    std::vector<Frustum> frusta_;
    std::vector<std::vector<int64_t>> splat_idx_;
};

}  // namespace bevflow
