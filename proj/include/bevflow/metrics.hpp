#pragma once

#include <cstdint>
#include <vector>

#include "bevflow/instance.hpp"
#include "bevflow/nn.hpp"
#include "bevflow/tensor.hpp"

namespace bevflow {

// Learnable homoscedastic task weights in log-variance form:
// lambda_i = exp(-s_i), regularized by +s_i in the total loss.
struct UncertaintyWeights {
    Tensor s_seg;
    Tensor s_flow;

    UncertaintyWeights()
        : s_seg(Tensor::scalar(0.0f, true)), s_flow(Tensor::scalar(0.0f, true)) {}
    float lambda_seg() const { return std::exp(-s_seg.item()); }
    float lambda_flow() const { return std::exp(-s_flow.item()); }
    void collect(const std::string& prefix, ParamSet& out) const;
};

struct LossReport {
    float l_seg = 0, l_flow = 0, total = 0;
};

// Per-cell cross entropy over every (frame, cell); keeps the ceil(k_frac*N)
// worst cells and returns their mean.
Tensor topk_cross_entropy(const Tensor& logits, const Tensor& target_onehot, float k_frac = 0.25f);

// Smooth-L1 (delta = 1 cell) between flows, averaged over foreground cells and
// the two flow components; zero when the mask is empty.
Tensor smooth_l1_flow(const Tensor& pred, const Tensor& gt, const Tensor& fg_mask);

Tensor total_loss(const Tensor& l_seg, const Tensor& l_flow, const UncertaintyWeights& w);

// Mean over frames of |pred & gt| / |pred | gt|; a frame with both masks empty
// counts as 1.
double iou_masks(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int64_t t_len,
                 int64_t cells);

struct FrameMatch {
    int32_t pred_id = 0, gt_id = 0;
    double iou = 0;
};

struct VPQFrame {
    std::vector<FrameMatch> tp;
    int64_t n_pred = 0, n_gt = 0;
    int64_t n_tp = 0, n_fp = 0, n_fn = 0;
    double iou_sum = 0;
    double ratio = 0;
    bool counted = false;  // false when the frame has no instances on either side
};

struct VPQBreakdown {
    std::vector<VPQFrame> frames;
    double vpq = 0;
};

// Video panoptic quality. Instances match when their per-frame IoU exceeds 0.5
// and the (pred, gt) correspondence is consistent across the clip; the
// correspondence is the bijection maximizing total matched IoU. By default the
// per-frame ratios are averaged over contributing frames; sum_over_frames
// switches to the plain sum.
VPQBreakdown vpq(const InstanceVolume& pred, const InstanceVolume& gt,
                 bool sum_over_frames = false);

// Independent verifier: exhaustively enumerates pred<->gt ID bijections.
// Refuses scenes with more than max_instances per frame.
double vpq_oracle(const InstanceVolume& pred, const InstanceVolume& gt,
                  bool sum_over_frames = false, int64_t max_instances = 10);

// Flat key -> value report consumed by the CLI.
std::string format_metric_report(const std::vector<std::pair<std::string, std::string>>& kv);

}  // namespace bevflow
