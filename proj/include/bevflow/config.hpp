#pragma once

#include <string>
#include <vector>

#include "bevflow/model.hpp"
#include "bevflow/synth.hpp"

namespace bevflow {

// Everything a run needs, serializable as JSON with canonical key order so
// parse -> serialize -> parse is the identity.
struct RunConfig {
    // model
    std::string model_variant = "tiny";  // full | tiny | custom
    std::vector<int64_t> stage_channels;  // custom variant only
    int64_t decoder_dim = 0;              // 0 = variant default
    std::vector<int> sr_ratios = {8, 4, 2, 1, 1};
    std::vector<int> heads = {1, 2, 4, 8, 8};

    // grid
    std::string grid_preset = "long";  // short | long | custom
    double grid_x_min = -50, grid_x_max = 50, grid_y_min = -50, grid_y_max = 50;
    double grid_resolution = 0.5;

    DepthBinSpec bins;
    SequenceSpec seq;

    // image encoder
    int enc_stride = 8;
    int64_t c_feat = 64;
    std::vector<int64_t> enc_channels = {32, 48, 64, 96};

    // camera rig (used when generating data)
    int64_t n_cameras = 6;
    int64_t image_h = 48, image_w = 96;
    double fov_deg = 70.0, mount_height = 1.6;

    // optimizer / schedule
    double lr = 6e-5, weight_decay = 0.01, beta1 = 0.9, beta2 = 0.999;
    double poly_power = 1.0;
    int64_t epochs = 20;

    // training
    int64_t batch_size = 2;
    int64_t max_steps = 0;  // 0 = run all epochs
    double k_frac = 0.25;

    // scene generation
    SceneGenConfig scene;

    // dataset split fractions (remainder goes to test)
    double train_frac = 0.7, val_frac = 0.15;

    uint32_t seed = 7;
    std::string dataset_path = "dataset";
    std::string out_dir = "run";

    void validate() const;
};

BEVGridSpec grid_from_config(const RunConfig& cfg);
PredictorConfig predictor_from_config(const RunConfig& cfg);
EncoderSpec encoder_from_config(const RunConfig& cfg);
CameraRig rig_from_config(const RunConfig& cfg);
ModelConfig model_from_config(const RunConfig& cfg);

std::string serialize_config(const RunConfig& cfg);
RunConfig parse_config(const std::string& json_text);
RunConfig load_config_file(const std::string& path);
void save_config_file(const std::string& path, const RunConfig& cfg);

}  // namespace bevflow
