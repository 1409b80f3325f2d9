#include "bevflow/model.hpp"

namespace bevflow {

InstancePredictionModel::InstancePredictionModel(const ModelConfig& cfg, const CameraRig& rig,
                                                 Rng& rng)
    : cfg_(cfg), rig_(rig), encoder_(cfg.encoder, rng),
      predictor_(cfg.predictor, (cfg.seq.t_p + 1) * cfg.encoder.c_feat, rng) {
    rig_.validate();
    cfg_.seq.validate();
    if (cfg_.encoder.c_depth != cfg_.bins.n_bins) {
        throw ConfigError("encoder depth channels " + std::to_string(cfg_.encoder.c_depth) +
                          " must equal depth bin count " + std::to_string(cfg_.bins.n_bins));
    }
    const int64_t hf = rig_.image_h / cfg_.encoder.stride;
    const int64_t wf = rig_.image_w / cfg_.encoder.stride;
    frusta_ = build_frustum(rig_, cfg_.bins, hf, wf);
    for (int64_t ci = 0; ci < rig_.n_cameras(); ++ci) {
        splat_idx_.push_back(compute_splat_indices(frusta_[static_cast<size_t>(ci)],
                                                   rig_.extrinsics[static_cast<size_t>(ci)],
                                                   cfg_.grid, cfg_.bins.d_min));
    }
}

Tensor InstancePredictionModel::bev_features(const Tensor& images, const EgoTrajectory& traj,
                                             bool training) const {
    // images: (T, N_c, 3, H, W) for a single clip
    const int64_t T = images.dim(0), Nc = images.dim(1);
    if (static_cast<int64_t>(traj.poses.size()) != T) {
        throw ShapeError("bev_features: trajectory has " + std::to_string(traj.poses.size()) +
                         " poses for " + std::to_string(T) + " frames");
    }
    ImageSweep sweep{images, rig_, traj};
    EncodedSweep enc = encode_images(sweep, encoder_, training);
    const int64_t hf = enc.features.dim(3), wf = enc.features.dim(4);
    const int64_t cd = cfg_.encoder.c_depth, cf = cfg_.encoder.c_feat;

    std::vector<Tensor> frames;
    for (int64_t t = 0; t < T; ++t) {
        std::vector<Tensor> lifted;
        for (int64_t ci = 0; ci < Nc; ++ci) {
            Tensor d = reshape(slice(reshape(slice(enc.depth_logits, 0, t, 1), {Nc, cd, hf, wf}),
                                     0, ci, 1),
                               {cd, hf, wf});
            Tensor f = reshape(slice(reshape(slice(enc.features, 0, t, 1), {Nc, cf, hf, wf}),
                                     0, ci, 1),
                               {cf, hf, wf});
            lifted.push_back(lift_features(f, d));
        }
        Tensor bev = splat_with_indices(lifted, splat_idx_, cfg_.grid);
        if (t != T - 1) {
            const Mat4 present_from_t = relative_pose(traj.poses[static_cast<size_t>(t)],
                                                      traj.poses[static_cast<size_t>(T - 1)]);
            bev = warp_bev_features(bev, present_from_t, cfg_.grid);
        }
        frames.push_back(reshape(bev, {1, cf, cfg_.grid.rows(), cfg_.grid.cols()}));
    }
    Tensor seq = concat(frames, 0);  // (T, C_F, H, W)
    Tensor merged = temporal_merge(seq);
    return reshape(merged, {1, T * cf, cfg_.grid.rows(), cfg_.grid.cols()});
}

InstancePredictionModel::Output InstancePredictionModel::forward(
    const Tensor& images, const std::vector<EgoTrajectory>& trajectories, bool training) const {
    if (images.rank() != 6) {
        throw ShapeError("model expects images (B,T,N_c,3,H,W), got " + shape_str(images.shape()));
    }
    const int64_t B = images.dim(0);
    if (static_cast<int64_t>(trajectories.size()) != B) {
        throw ShapeError("model: trajectory count != batch size");
    }
    if (images.dim(1) != cfg_.seq.t_p + 1) {
        throw ShapeError("model: expected " + std::to_string(cfg_.seq.t_p + 1) + " input frames, got " +
                         std::to_string(images.dim(1)));
    }
    std::vector<Tensor> merged;
    for (int64_t b = 0; b < B; ++b) {
        Tensor clip = reshape(slice(images, 0, b, 1), {images.dim(1), images.dim(2), images.dim(3),
                                                       images.dim(4), images.dim(5)});
        merged.push_back(bev_features(clip, trajectories[static_cast<size_t>(b)], training));
    }
    Tensor batch_bev = merged.size() == 1 ? merged[0] : concat(merged, 0);
    Predictor::Output out = predictor_.forward(batch_bev, training);
    return {out.seg, out.flow};
}

ParamSet InstancePredictionModel::params() const {
    ParamSet ps;
    encoder_.collect("encoder", ps);
    predictor_.collect("predictor", ps);
    uw_.collect("loss", ps);
    return ps;
}

}  // namespace bevflow
