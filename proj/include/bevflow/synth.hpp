#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "bevflow/geometry.hpp"
#include "bevflow/instance.hpp"
#include "bevflow/tensor.hpp"

namespace bevflow {

struct SequenceSpec {
    int64_t t_p = 2;  // past input frames
    int64_t t_f = 4;  // output frames
    double hz = 2.0;
    bool t0_is_present = true;  // output frame 0 is the present frame

    int64_t input_frames() const { return t_p + 1; }
    int64_t present_frame() const { return t_p; }
    int64_t output_abs_frame(int64_t k) const { return (t0_is_present ? t_p : t_p + 1) + k; }
    int64_t required_frames() const { return output_abs_frame(t_f - 1) + 1; }
    void validate() const {
        if (t_p < 0 || t_f < 1 || hz <= 0) throw ConfigError("bad sequence spec");
    }
};

struct AgentSpec {
    int64_t spawn_frame = 0;
    double x = 0, y = 0, yaw = 0;      // initial world pose
    double length = 4.0, width = 2.0;  // meters
    double height = 1.6;
    double vx = 0, vy = 0;             // world-frame velocity, m/s
    double yaw_rate = 0;               // rad/s
    std::array<float, 3> color = {0.8f, 0.2f, 0.2f};
};

struct EgoMotionSegment {
    int64_t n_frames = 0;
    double v = 0;         // forward speed m/s
    double yaw_rate = 0;  // rad/s
};

struct SceneScript {
    std::vector<AgentSpec> agents;
    std::vector<EgoMotionSegment> ego_motion;
    int64_t duration = 7;  // frames
    double hz = 2.0;
};

struct AgentState {
    bool present = false;
    double x = 0, y = 0, yaw = 0;
};

struct SimResult {
    std::vector<EgoPose> ego;                      // world-from-ego, per frame
    std::vector<std::vector<AgentState>> agents;   // [frame][agent]
};

SimResult simulate(const SceneScript& script);

struct GroundTruth {
    Tensor seg_onehot;   // (T_f, 2, H, W)
    InstanceVolume ids;  // agent index + 1
    Tensor flow;         // (T_f, 2, H, W), cells, (d_row, d_col)
};

// Rasterizes agent rectangles into the present-ego BEV grid for every output
// frame. A cell is covered when its center lies inside the rotated rectangle.
// Backward flow points at the same agent's center in the previous output
// frame; frame 0 and newly spawned agents point at their own current center.
GroundTruth rasterize_gt(const SimResult& sim, const SceneScript& script, const BEVGridSpec& grid,
                         const SequenceSpec& seq);

// Flat-shaded raycast rendering of the input frames: gray ground, sky, and
// colored agent boxes with exact per-pixel depth ordering.
Tensor render_cameras(const SimResult& sim, const SceneScript& script, const CameraRig& rig,
                      const SequenceSpec& seq);

// Evenly spaced ring of pinhole cameras on the ego vehicle.
CameraRig make_ring_rig(int64_t n_cameras, int64_t image_h, int64_t image_w, double fov_deg,
                        double mount_height);

struct Clip {
    Tensor images;  // (T_p+1, N_c, 3, H, W) raw RGB in [0,1]
    EgoTrajectory trajectory;
    GroundTruth gt;
    int64_t n_agents = 0;
};

Clip make_clip(const SceneScript& script, const CameraRig& rig, const BEVGridSpec& grid,
               const SequenceSpec& seq);

// Random scene scripts with separation/visibility constraints that keep the
// generated ground truth consistent with backward-flow ID propagation.
struct SceneGenConfig {
    int64_t n_agents_min = 1, n_agents_max = 3;
    double speed_max = 2.0;      // m/s
    double yaw_rate_max = 0.3;   // rad/s (agents)
    double ego_speed_max = 1.0;  // m/s
    double spawn_radius_min = 0.0;   // keep agents off the ego vehicle, meters
    double spawn_radius_frac = 0.7;  // agents spawn within this fraction of grid extent
    double agent_length_min = 3.5, agent_length_max = 5.0;
    double agent_width_min = 1.8, agent_width_max = 2.2;
};

SceneScript random_script(Rng& rng, const SceneGenConfig& cfg, const BEVGridSpec& grid,
                          const SequenceSpec& seq);

// Geometric validity: separated at the first output frame, centers stay
// in-grid and self-owned through consecutive output frames.
bool script_is_valid(const SceneScript& script, const BEVGridSpec& grid, const SequenceSpec& seq);

// ---- on-disk dataset ------------------------------------------------------
// One directory per clip plus a plain-text dataset manifest. Arrays are raw
// little-endian with a 16-byte fixed header (magic BIFD0001, dtype, rank)
// followed by dims and payload.

void write_array_f32(const std::string& path, const Shape& shape, const std::vector<float>& data);
void write_array_i32(const std::string& path, const Shape& shape, const std::vector<int32_t>& data);
std::pair<Shape, std::vector<float>> read_array_f32(const std::string& path);
std::pair<Shape, std::vector<int32_t>> read_array_i32(const std::string& path);

struct SplitRange {
    int64_t begin = 0, end = 0;  // clip indices [begin, end)
    int64_t size() const { return end - begin; }
};

struct DatasetInfo {
    BEVGridSpec grid;
    DepthBinSpec bins;
    SequenceSpec seq;
    CameraRig rig;
    std::array<double, 3> norm_mean = {0.5, 0.5, 0.5};
    std::array<double, 3> norm_std = {0.25, 0.25, 0.25};
    int64_t n_clips = 0;
    SplitRange train, val, test;
};

void write_dataset(const std::string& root, const DatasetInfo& info, const std::vector<Clip>& clips);
DatasetInfo read_dataset_info(const std::string& root);
Clip read_clip(const std::string& root, const DatasetInfo& info, int64_t index);

// Generates n_clips random clips, computes normalization stats from the train
// split, and assigns train/val/test splits by fraction (70/15/15 default,
// remainder to test).
DatasetInfo generate_dataset(const std::string& root, const BEVGridSpec& grid,
                             const DepthBinSpec& bins, const SequenceSpec& seq,
                             const CameraRig& rig, const SceneGenConfig& gen, int64_t n_clips,
                             uint32_t seed, double train_frac = 0.7, double val_frac = 0.15);

}  // namespace bevflow
