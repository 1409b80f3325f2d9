#include "bevflow/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bevflow {

using json = nlohmann::json;

void RunConfig::validate() const {
    if (model_variant != "full" && model_variant != "tiny" && model_variant != "custom") {
        throw ConfigError("model_variant must be full|tiny|custom, got '" + model_variant + "'");
    }
    if (model_variant == "custom" && stage_channels.size() != 5) {
        throw ConfigError("custom model_variant requires 5 stage_channels");
    }
    if (grid_preset != "short" && grid_preset != "long" && grid_preset != "custom") {
        throw ConfigError("grid_preset must be short|long|custom, got '" + grid_preset + "'");
    }
    if (grid_preset == "custom") {
        if (grid_x_max <= grid_x_min || grid_y_max <= grid_y_min || grid_resolution <= 0) {
            throw ConfigError("bad custom grid: ranges must be increasing and resolution positive");
        }
    }
    if (bins.n_bins < 1 || bins.d_max <= bins.d_min) throw ConfigError("bad depth_bins");
    seq.validate();
    if (lr <= 0 || batch_size < 1 || epochs < 1) throw ConfigError("bad optimizer/training settings");
    if (k_frac <= 0 || k_frac > 1) throw ConfigError("bad k_frac");
    if (n_cameras < 1 || image_h < 8 || image_w < 8) throw ConfigError("bad camera settings");
    if (train_frac <= 0 || val_frac < 0 || train_frac + val_frac > 1.0 + 1e-9) {
        throw ConfigError("bad dataset split fractions");
    }
}

BEVGridSpec grid_from_config(const RunConfig& cfg) {
    BEVGridSpec g;
    if (cfg.grid_preset == "short") {
        g = {-15, 15, -15, 15, 0.15};
    } else if (cfg.grid_preset == "long") {
        g = {-50, 50, -50, 50, 0.5};
    } else {
        g = {cfg.grid_x_min, cfg.grid_x_max, cfg.grid_y_min, cfg.grid_y_max, cfg.grid_resolution};
    }
    return g;
}

PredictorConfig predictor_from_config(const RunConfig& cfg) {
    PredictorConfig p;
    if (cfg.model_variant == "full") p = PredictorConfig::full();
    else if (cfg.model_variant == "tiny") p = PredictorConfig::tiny();
    else {
        p = PredictorConfig::full();
        p.stage_channels = cfg.stage_channels;
        p.decoder_dim = 32;
    }
    if (cfg.decoder_dim > 0) p.decoder_dim = cfg.decoder_dim;
    p.sr_ratios = cfg.sr_ratios;
    p.heads = cfg.heads;
    p.t_f = cfg.seq.t_f;
    p.n_classes = 2;
    p.validate();
    return p;
}

EncoderSpec encoder_from_config(const RunConfig& cfg) {
    EncoderSpec e;
    e.stride = cfg.enc_stride;
    e.c_depth = cfg.bins.n_bins;
    e.c_feat = cfg.c_feat;
    e.stage_channels = cfg.enc_channels;
    e.validate();
    return e;
}

CameraRig rig_from_config(const RunConfig& cfg) {
    return make_ring_rig(cfg.n_cameras, cfg.image_h, cfg.image_w, cfg.fov_deg, cfg.mount_height);
}

ModelConfig model_from_config(const RunConfig& cfg) {
    return {encoder_from_config(cfg), predictor_from_config(cfg), grid_from_config(cfg), cfg.bins,
            cfg.seq};
}

std::string serialize_config(const RunConfig& c) {
    json j;
    j["model"] = {{"variant", c.model_variant},
                  {"stage_channels", c.stage_channels},
                  {"decoder_dim", c.decoder_dim},
                  {"sr_ratios", c.sr_ratios},
                  {"heads", c.heads}};
    j["grid"] = {{"preset", c.grid_preset},
                 {"x_min", c.grid_x_min},
                 {"x_max", c.grid_x_max},
                 {"y_min", c.grid_y_min},
                 {"y_max", c.grid_y_max},
                 {"resolution", c.grid_resolution}};
    j["depth_bins"] = {{"d_min", c.bins.d_min}, {"d_max", c.bins.d_max}, {"n_bins", c.bins.n_bins}};
    j["sequence"] = {{"t_p", c.seq.t_p},
                     {"t_f", c.seq.t_f},
                     {"hz", c.seq.hz},
                     {"t0_is_present", c.seq.t0_is_present}};
    j["encoder"] = {{"stride", c.enc_stride}, {"c_feat", c.c_feat}, {"stage_channels", c.enc_channels}};
    j["camera"] = {{"n_cameras", c.n_cameras},
                   {"image_h", c.image_h},
                   {"image_w", c.image_w},
                   {"fov_deg", c.fov_deg},
                   {"mount_height", c.mount_height}};
    j["optimizer"] = {{"lr", c.lr},
                      {"weight_decay", c.weight_decay},
                      {"beta1", c.beta1},
                      {"beta2", c.beta2}};
    j["schedule"] = {{"poly_power", c.poly_power}, {"epochs", c.epochs}};
    j["train"] = {{"batch_size", c.batch_size}, {"max_steps", c.max_steps}, {"k_frac", c.k_frac}};
    j["scene"] = {{"n_agents_min", c.scene.n_agents_min},
                  {"n_agents_max", c.scene.n_agents_max},
                  {"speed_max", c.scene.speed_max},
                  {"yaw_rate_max", c.scene.yaw_rate_max},
                  {"ego_speed_max", c.scene.ego_speed_max},
                  {"spawn_radius_min", c.scene.spawn_radius_min},
                  {"spawn_radius_frac", c.scene.spawn_radius_frac},
                  {"agent_length_min", c.scene.agent_length_min},
                  {"agent_length_max", c.scene.agent_length_max},
                  {"agent_width_min", c.scene.agent_width_min},
                  {"agent_width_max", c.scene.agent_width_max}};
    j["dataset"] = {{"train_frac", c.train_frac}, {"val_frac", c.val_frac}};
    j["seed"] = c.seed;
    j["paths"] = {{"dataset", c.dataset_path}, {"out", c.out_dir}};
    return j.dump(2) + "\n";
}

namespace {

template <typename T>
void get_to_if(const json& j, const char* key, T& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    try {
        if (j.contains("model")) {
            const auto& m = j["model"];
            get_to_if(m, "variant", c.model_variant);
            get_to_if(m, "stage_channels", c.stage_channels);
            get_to_if(m, "decoder_dim", c.decoder_dim);
            get_to_if(m, "sr_ratios", c.sr_ratios);
            get_to_if(m, "heads", c.heads);
        }
        if (j.contains("grid")) {
            const auto& g = j["grid"];
            get_to_if(g, "preset", c.grid_preset);
            get_to_if(g, "x_min", c.grid_x_min);
            get_to_if(g, "x_max", c.grid_x_max);
            get_to_if(g, "y_min", c.grid_y_min);
            get_to_if(g, "y_max", c.grid_y_max);
            get_to_if(g, "resolution", c.grid_resolution);
        }
        if (j.contains("depth_bins")) {
            const auto& d = j["depth_bins"];
            get_to_if(d, "d_min", c.bins.d_min);
            get_to_if(d, "d_max", c.bins.d_max);
            get_to_if(d, "n_bins", c.bins.n_bins);
        }
        if (j.contains("sequence")) {
            const auto& s = j["sequence"];
            get_to_if(s, "t_p", c.seq.t_p);
            get_to_if(s, "t_f", c.seq.t_f);
            get_to_if(s, "hz", c.seq.hz);
            get_to_if(s, "t0_is_present", c.seq.t0_is_present);
        }
        if (j.contains("encoder")) {
            const auto& e = j["encoder"];
            get_to_if(e, "stride", c.enc_stride);
            get_to_if(e, "c_feat", c.c_feat);
            get_to_if(e, "stage_channels", c.enc_channels);
        }
        if (j.contains("camera")) {
            const auto& cam = j["camera"];
            get_to_if(cam, "n_cameras", c.n_cameras);
            get_to_if(cam, "image_h", c.image_h);
            get_to_if(cam, "image_w", c.image_w);
            get_to_if(cam, "fov_deg", c.fov_deg);
            get_to_if(cam, "mount_height", c.mount_height);
        }
        if (j.contains("optimizer")) {
            const auto& o = j["optimizer"];
            get_to_if(o, "lr", c.lr);
            get_to_if(o, "weight_decay", c.weight_decay);
            get_to_if(o, "beta1", c.beta1);
            get_to_if(o, "beta2", c.beta2);
        }
        if (j.contains("schedule")) {
            const auto& s = j["schedule"];
            get_to_if(s, "poly_power", c.poly_power);
            get_to_if(s, "epochs", c.epochs);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            get_to_if(t, "batch_size", c.batch_size);
            get_to_if(t, "max_steps", c.max_steps);
            get_to_if(t, "k_frac", c.k_frac);
        }
        if (j.contains("scene")) {
            const auto& s = j["scene"];
            get_to_if(s, "n_agents_min", c.scene.n_agents_min);
            get_to_if(s, "n_agents_max", c.scene.n_agents_max);
            get_to_if(s, "speed_max", c.scene.speed_max);
            get_to_if(s, "yaw_rate_max", c.scene.yaw_rate_max);
            get_to_if(s, "ego_speed_max", c.scene.ego_speed_max);
            get_to_if(s, "spawn_radius_min", c.scene.spawn_radius_min);
            get_to_if(s, "spawn_radius_frac", c.scene.spawn_radius_frac);
            get_to_if(s, "agent_length_min", c.scene.agent_length_min);
            get_to_if(s, "agent_length_max", c.scene.agent_length_max);
            get_to_if(s, "agent_width_min", c.scene.agent_width_min);
            get_to_if(s, "agent_width_max", c.scene.agent_width_max);
        }
        if (j.contains("dataset")) {
            const auto& d = j["dataset"];
            get_to_if(d, "train_frac", c.train_frac);
            get_to_if(d, "val_frac", c.val_frac);
        }
        get_to_if(j, "seed", c.seed);
        if (j.contains("paths")) {
            const auto& p = j["paths"];
            get_to_if(p, "dataset", c.dataset_path);
            get_to_if(p, "out", c.out_dir);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config field: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config(buf.str());
}

void save_config_file(const std::string& path, const RunConfig& cfg) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write config file: " + path);
    f << serialize_config(cfg);
}

}  // namespace bevflow
