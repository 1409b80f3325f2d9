#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "bevflow/checkpoint.hpp"
#include "bevflow/config.hpp"
#include "bevflow/metrics.hpp"
#include "bevflow/train.hpp"
#include "bevflow/viz.hpp"

namespace fs = std::filesystem;
using namespace bevflow;

namespace {

RunConfig load_or_default(const std::string& config_path, uint32_t seed_override, bool has_seed) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config_file(config_path);
    if (has_seed) cfg.seed = seed_override;
    cfg.validate();
    return cfg;
}

int cmd_generate(const RunConfig& cfg, int64_t n_clips, const std::string& out, bool force) {
    const std::string root = out.empty() ? cfg.dataset_path : out;
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!force) throw UserError("output directory " + root + " is not empty (use --force)");
        fs::remove_all(root);
    }
    DatasetInfo info = generate_dataset(root, grid_from_config(cfg), cfg.bins, cfg.seq,
                                        rig_from_config(cfg), cfg.scene, n_clips, cfg.seed,
                                        cfg.train_frac, cfg.val_frac);
    std::cout << "dataset " << root << "\n"
              << "clips " << info.n_clips << " (train " << info.train.size() << ", val "
              << info.val.size() << ", test " << info.test.size() << ")\n"
              << "grid " << info.grid.rows() << "x" << info.grid.cols() << " @ "
              << info.grid.resolution << " m\n"
              << "cameras " << info.rig.n_cameras() << " " << info.rig.image_w << "x"
              << info.rig.image_h << "\n"
              << "norm_mean " << info.norm_mean[0] << " " << info.norm_mean[1] << " "
              << info.norm_mean[2] << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    TrainResult res = train_model(cfg, std::cout);
    std::cout << "steps " << res.steps << "\n"
              << "best_val_vpq " << res.best_vpq << "\n"
              << "best_checkpoint " << res.best_checkpoint << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split_name,
             bool use_gt, const std::string& report_path) {
    DatasetInfo info = read_dataset_info(cfg.dataset_path);
    SplitRange split = split_name == "train" ? info.train
                       : split_name == "test" ? info.test
                                              : info.val;
    EvalResult res;
    std::string grid_name = "custom";
    if (use_gt) {
        res = evaluate_gt(cfg.dataset_path, info, split);
        grid_name = cfg.grid_preset;
    } else {
        if (checkpoint.empty()) throw UserError("eval needs --checkpoint (or --use-gt)");
        RunConfig ck_cfg = checkpoint_config(checkpoint);
        const BEVGridSpec ck_grid = grid_from_config(ck_cfg);
        const BEVGridSpec cfg_grid = grid_from_config(cfg);
        if (std::fabs(ck_grid.x_min - cfg_grid.x_min) > 1e-9 ||
            std::fabs(ck_grid.x_max - cfg_grid.x_max) > 1e-9 ||
            std::fabs(ck_grid.resolution - cfg_grid.resolution) > 1e-9) {
            throw UserError("checkpoint grid does not match the configured grid");
        }
        const BEVGridSpec ds_grid = info.grid;
        if (std::fabs(ck_grid.x_min - ds_grid.x_min) > 1e-9 ||
            std::fabs(ck_grid.x_max - ds_grid.x_max) > 1e-9 ||
            std::fabs(ck_grid.resolution - ds_grid.resolution) > 1e-9) {
            throw UserError("checkpoint grid does not match dataset grid");
        }
        grid_name = ck_cfg.grid_preset;
        InstancePredictionModel model = load_model(checkpoint, info.rig);
        res = evaluate_model(model, cfg.dataset_path, info, split);
    }
    std::ostringstream iou_s, vpq_s;
    iou_s << res.iou;
    vpq_s << res.vpq;
    const std::string report = format_metric_report({{"iou", iou_s.str()},
                                                     {"vpq", vpq_s.str()},
                                                     {"n_clips", std::to_string(res.n_clips)},
                                                     {"grid", grid_name},
                                                     {"t_f", std::to_string(info.seq.t_f)}});
    std::cout << report;
    if (!report_path.empty()) {
        std::ofstream f(report_path);
        if (!f) throw UserError("cannot write report to " + report_path);
        f << report;
    }
    return 0;
}

int cmd_bench(const RunConfig& cfg, int warmup, int iters, const std::string& report_path) {
    BenchmarkResult full = benchmark_model(cfg, "full", warmup, iters, std::cout);
    BenchmarkResult tiny = benchmark_model(cfg, "tiny", warmup, iters, std::cout);
    const double ratio = static_cast<double>(full.params) / static_cast<double>(tiny.params);
    std::ostringstream os;
    os << "full_params " << full.params << "\n"
       << "full_params_m " << full.params_m << "\n"
       << "full_mean_ms " << full.mean_ms << "\n"
       << "full_p50_ms " << full.p50_ms << "\n"
       << "full_p95_ms " << full.p95_ms << "\n"
       << "tiny_params " << tiny.params << "\n"
       << "tiny_params_m " << tiny.params_m << "\n"
       << "tiny_mean_ms " << tiny.mean_ms << "\n"
       << "tiny_p50_ms " << tiny.p50_ms << "\n"
       << "tiny_p95_ms " << tiny.p95_ms << "\n"
       << "full_over_tiny_params " << ratio << "\n"
       << "tiny_fewer_params " << (tiny.params < full.params ? 1 : 0) << "\n"
       << "tiny_faster " << (tiny.mean_ms < full.mean_ms ? 1 : 0) << "\n"
       << "peak_rss_bytes " << peak_rss_bytes() << "\n"
       << "warmup " << full.warmup << "\n"
       << "iters " << full.iters << "\n";
    std::cout << os.str();
    if (!report_path.empty()) {
        std::ofstream f(report_path);
        if (!f) throw UserError("cannot write report to " + report_path);
        f << os.str();
    }
    if (tiny.params >= full.params) throw Error("benchmark: tiny is not smaller than full");
    return 0;
}

int cmd_viz(const RunConfig& cfg, const std::string& checkpoint, int64_t clip_index, bool use_gt,
            const std::string& out) {
    DatasetInfo info = read_dataset_info(cfg.dataset_path);
    if (clip_index < 0 || clip_index >= info.n_clips) {
        throw UserError("clip index " + std::to_string(clip_index) + " outside dataset (n_clips=" +
                        std::to_string(info.n_clips) + ")");
    }
    const std::string out_dir = out.empty() ? cfg.out_dir + "/viz" : out;
    if (use_gt) {
        Clip clip = read_clip(cfg.dataset_path, info, clip_index);
        emit_instance_viz(clip.gt.ids, out_dir, "gt_clip" + std::to_string(clip_index));
    } else {
        if (checkpoint.empty()) throw UserError("viz needs --checkpoint (or --use-gt)");
        InstancePredictionModel model = load_model(checkpoint, info.rig);
        LoadedClip clip = load_normalized_clip(cfg.dataset_path, info, clip_index);
        Shape s = clip.images_norm.shape();
        s.insert(s.begin(), 1);
        auto pred = model.forward(reshape(clip.images_norm, s), {clip.traj}, false);
        Tensor seg = reshape(pred.seg, {pred.seg.dim(1), pred.seg.dim(2), pred.seg.dim(3),
                                        pred.seg.dim(4)});
        Tensor flow = reshape(pred.flow, {pred.flow.dim(1), pred.flow.dim(2), pred.flow.dim(3),
                                          pred.flow.dim(4)});
        emit_instance_viz(run_sequence(seg, flow), out_dir, "pred_clip" + std::to_string(clip_index));
    }
    std::cout << "wrote " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-camera BEV instance prediction pipeline"};
    app.require_subcommand(1);

    std::string config_path, out, checkpoint, split = "val", report_path;
    uint32_t seed = 0;
    bool force = false, use_gt = false;
    int64_t n_clips = 32, clip_index = 0;
    int warmup = 10, iters = 100;

    app.add_option("--config", config_path, "JSON run configuration");
    auto* seed_opt = app.add_option("--seed", seed, "override config seed");

    auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
    gen->add_option("--n-clips", n_clips, "number of clips");
    gen->add_option("--out", out, "dataset directory (default: config paths.dataset)");
    gen->add_flag("--force", force, "overwrite an existing non-empty directory");

    auto* train = app.add_subcommand("train", "train a model");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint path");
    eval->add_option("--split", split, "train|val|test");
    eval->add_flag("--use-gt", use_gt, "evaluate ground truth against itself");
    eval->add_option("--report", report_path, "write the flat-text report here");

    auto* bench = app.add_subcommand("bench", "benchmark full vs tiny configs");
    bench->add_option("--warmup", warmup, "warmup passes (min 10)");
    bench->add_option("--iters", iters, "measured passes (min 100)");
    bench->add_option("--report", report_path, "write the flat-text report here");

    auto* viz = app.add_subcommand("viz", "emit BEV instance images for a clip");
    viz->add_option("--checkpoint", checkpoint, "checkpoint path");
    viz->add_option("--clip", clip_index, "clip index");
    viz->add_flag("--use-gt", use_gt, "visualize ground truth");
    viz->add_option("--out", out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_or_default(config_path, seed, seed_opt->count() > 0);
        if (gen->parsed()) return cmd_generate(cfg, n_clips, out, force);
        if (train->parsed()) return cmd_train(cfg);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint, split, use_gt, report_path);
        if (bench->parsed()) return cmd_bench(cfg, warmup, iters, report_path);
        if (viz->parsed()) return cmd_viz(cfg, checkpoint, clip_index, use_gt, out);
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
