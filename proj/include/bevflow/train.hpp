#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "bevflow/config.hpp"
#include "bevflow/model.hpp"

namespace bevflow {

struct LoadedClip {
    Tensor images_norm;  // (T, N_c, 3, H, W)
    EgoTrajectory traj;
    Tensor seg_onehot;  // (T_f, 2, H, W)
    Tensor flow;        // (T_f, 2, H, W)
    Tensor fg_mask;     // (T_f, 1, H, W)
    InstanceVolume ids;
};

LoadedClip load_normalized_clip(const std::string& root, const DatasetInfo& info, int64_t index);

struct EvalResult {
    double iou = 0, vpq = 0;
    int64_t n_clips = 0;
};

EvalResult evaluate_model(const InstancePredictionModel& model, const std::string& dataset_root,
                          const DatasetInfo& info, const SplitRange& split, int64_t max_clips = 0);

// Evaluates the ground truth against itself (oracle ceiling).
EvalResult evaluate_gt(const std::string& dataset_root, const DatasetInfo& info,
                       const SplitRange& split);

struct TrainResult {
    std::vector<double> loss_history;  // per-step total loss
    std::vector<double> l_seg_history, l_flow_history;
    double best_vpq = -1;
    double final_val_iou = 0, final_val_vpq = 0;
    int64_t steps = 0;
    std::string best_checkpoint, last_checkpoint;
};

TrainResult train_model(const RunConfig& cfg, std::ostream& log);

void save_model(const InstancePredictionModel& model, const RunConfig& cfg, const std::string& path);
// Builds the model from the checkpoint's sidecar config and loads weights.
InstancePredictionModel load_model(const std::string& checkpoint_path, const CameraRig& rig);
RunConfig checkpoint_config(const std::string& checkpoint_path);

struct BenchmarkResult {
    std::string variant;
    int64_t params = 0;
    double params_m = 0;
    int64_t manifest_trainable_sum = 0;
    int64_t manifest_total_sum = 0;
    double mean_ms = 0, p50_ms = 0, p95_ms = 0;
    int64_t peak_rss_bytes = 0;
    int warmup = 0, iters = 0;
};

// Forward-pass latency at batch 1, model only (no data preparation inside the
// timed region). Warmup and iteration counts are clamped to at least 10/100.
BenchmarkResult benchmark_model(const RunConfig& cfg, const std::string& variant, int warmup,
                                int iters, std::ostream& log);

int64_t peak_rss_bytes();

}  // namespace bevflow
