#include "bevflow/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bevflow/checkpoint.hpp"
#include "bevflow/instance.hpp"
#include "bevflow/metrics.hpp"

namespace fs = std::filesystem;

namespace bevflow {

namespace {

Tensor normalize_images(const Tensor& raw, const DatasetInfo& info) {
    std::vector<float> out(raw.data().size());
    const int64_t hw = raw.dim(raw.rank() - 2) * raw.dim(raw.rank() - 1);
    const int64_t frames = raw.numel() / (3 * hw);
    for (int64_t f = 0; f < frames; ++f) {
        for (int64_t ch = 0; ch < 3; ++ch) {
            const float mean = static_cast<float>(info.norm_mean[static_cast<size_t>(ch)]);
            const float inv_std = 1.0f / static_cast<float>(info.norm_std[static_cast<size_t>(ch)]);
            const float* src = raw.data().data() + (f * 3 + ch) * hw;
            float* dst = out.data() + (f * 3 + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] = (src[i] - mean) * inv_std;
        }
    }
    return Tensor(raw.shape(), std::move(out));
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    std::vector<Tensor> expanded;
    expanded.reserve(items.size());
    for (const Tensor& t : items) {
        Shape s = t.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(t, s));
    }
    return expanded.size() == 1 ? expanded[0] : concat(expanded, 0);
}

}  // namespace

LoadedClip load_normalized_clip(const std::string& root, const DatasetInfo& info, int64_t index) {
    Clip clip = read_clip(root, info, index);
    LoadedClip out;
    out.images_norm = normalize_images(clip.images, info);
    out.traj = clip.trajectory;
    out.seg_onehot = clip.gt.seg_onehot;
    out.flow = clip.gt.flow;
    out.ids = clip.gt.ids;
    const int64_t tf = out.ids.t_len, hw = out.ids.h * out.ids.w;
    std::vector<float> mask(static_cast<size_t>(tf * hw), 0.0f);
    for (int64_t i = 0; i < tf * hw; ++i) {
        mask[static_cast<size_t>(i)] = out.ids.ids[static_cast<size_t>(i)] > 0 ? 1.0f : 0.0f;
    }
    out.fg_mask = Tensor({tf, 1, out.ids.h, out.ids.w}, std::move(mask));
    return out;
}

namespace {

std::vector<uint8_t> fg_from_ids(const InstanceVolume& ids) {
    std::vector<uint8_t> fg(ids.ids.size());
    for (size_t i = 0; i < fg.size(); ++i) fg[i] = ids.ids[i] > 0 ? 1 : 0;
    return fg;
}

std::vector<uint8_t> fg_from_logits(const Tensor& seg) {  // (T,C,H,W)
    const int64_t T = seg.dim(0), H = seg.dim(2), W = seg.dim(3);
    std::vector<uint8_t> fg(static_cast<size_t>(T * H * W));
    for (int64_t t = 0; t < T; ++t) {
        auto frame = argmax_foreground(reshape(slice(seg, 0, t, 1), {seg.dim(1), H, W}));
        std::copy(frame.begin(), frame.end(), fg.begin() + t * H * W);
    }
    return fg;
}

}  // namespace

EvalResult evaluate_model(const InstancePredictionModel& model, const std::string& dataset_root,
                          const DatasetInfo& info, const SplitRange& split, int64_t max_clips) {
    EvalResult res;
    const int64_t end = max_clips > 0 ? std::min(split.end, split.begin + max_clips) : split.end;
    for (int64_t i = split.begin; i < end; ++i) {
        LoadedClip clip = load_normalized_clip(dataset_root, info, i);
        Shape s = clip.images_norm.shape();
        s.insert(s.begin(), 1);
        auto out = model.forward(reshape(clip.images_norm, s), {clip.traj}, /*training=*/false);
        Tensor seg = reshape(out.seg, {out.seg.dim(1), out.seg.dim(2), out.seg.dim(3), out.seg.dim(4)});
        Tensor flow = reshape(out.flow, {out.flow.dim(1), out.flow.dim(2), out.flow.dim(3),
                                         out.flow.dim(4)});
        InstanceVolume pred_ids = run_sequence(seg, flow);
        res.iou += iou_masks(fg_from_logits(seg), fg_from_ids(clip.ids), clip.ids.t_len,
                             clip.ids.h * clip.ids.w);
        res.vpq += vpq(pred_ids, clip.ids).vpq;
        ++res.n_clips;
    }
    if (res.n_clips > 0) {
        res.iou /= static_cast<double>(res.n_clips);
        res.vpq /= static_cast<double>(res.n_clips);
    }
    return res;
}

EvalResult evaluate_gt(const std::string& dataset_root, const DatasetInfo& info,
                       const SplitRange& split) {
    EvalResult res;
    for (int64_t i = split.begin; i < split.end; ++i) {
        Clip clip = read_clip(dataset_root, info, i);
        auto fg = fg_from_ids(clip.gt.ids);
        res.iou += iou_masks(fg, fg, clip.gt.ids.t_len, clip.gt.ids.h * clip.gt.ids.w);
        res.vpq += vpq(clip.gt.ids, clip.gt.ids).vpq;
        ++res.n_clips;
    }
    if (res.n_clips > 0) {
        res.iou /= static_cast<double>(res.n_clips);
        res.vpq /= static_cast<double>(res.n_clips);
    }
    return res;
}

void save_model(const InstancePredictionModel& model, const RunConfig& cfg,
                const std::string& path) {
    save_checkpoint(path, model.params().all());
    save_config_file(path + ".json", cfg);
}

RunConfig checkpoint_config(const std::string& checkpoint_path) {
    return load_config_file(checkpoint_path + ".json");
}

InstancePredictionModel load_model(const std::string& checkpoint_path, const CameraRig& rig) {
    RunConfig cfg = checkpoint_config(checkpoint_path);
    Rng rng(cfg.seed);
    InstancePredictionModel model(model_from_config(cfg), rig, rng);
    auto params = model.params().all();
    load_into(checkpoint_path, params);
    return model;
}

TrainResult train_model(const RunConfig& cfg, std::ostream& log) {
    cfg.validate();
    DatasetInfo info = read_dataset_info(cfg.dataset_path);

    const BEVGridSpec cfg_grid = grid_from_config(cfg);
    if (std::fabs(cfg_grid.x_min - info.grid.x_min) > 1e-9 ||
        std::fabs(cfg_grid.x_max - info.grid.x_max) > 1e-9 ||
        std::fabs(cfg_grid.resolution - info.grid.resolution) > 1e-9) {
        throw UserError("config grid does not match dataset grid");
    }
    if (cfg.seq.t_p != info.seq.t_p || cfg.seq.t_f != info.seq.t_f) {
        throw UserError("config sequence (t_p,t_f) does not match dataset");
    }

    Rng rng(cfg.seed);
    InstancePredictionModel model(model_from_config(cfg), info.rig, rng);
    ParamSet params = model.params();
    AdamW opt(params.trainable, static_cast<float>(cfg.lr), static_cast<float>(cfg.weight_decay),
              static_cast<float>(cfg.beta1), static_cast<float>(cfg.beta2));
    log << "model parameters: " << params.count_trainable() << "\n";

    const int64_t n_train = info.train.size();
    if (n_train < 1) throw UserError("dataset has no training clips");
    std::vector<LoadedClip> clips;
    clips.reserve(static_cast<size_t>(n_train));
    for (int64_t i = info.train.begin; i < info.train.end; ++i) {
        clips.push_back(load_normalized_clip(cfg.dataset_path, info, i));
    }

    const int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    int64_t total_steps = cfg.epochs * steps_per_epoch;
    if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

    fs::create_directories(cfg.out_dir);
    const std::string best_path = cfg.out_dir + "/best.bift";
    const std::string last_path = cfg.out_dir + "/last.bift";

    TrainResult result;
    result.best_checkpoint = best_path;
    result.last_checkpoint = last_path;
    std::ofstream metric_log(cfg.out_dir + "/train_log.txt");

    Rng batch_rng(cfg.seed ^ 0x9e3779b9u);
    int64_t step = 0;
    bool saved_any = false;
    for (int64_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
        double ep_seg = 0, ep_flow = 0;
        int64_t ep_steps = 0;
        for (int64_t s = 0; s < steps_per_epoch && step < total_steps; ++s, ++step) {
            std::vector<Tensor> imgs, segs, flows, masks;
            std::vector<EgoTrajectory> trajs;
            for (int64_t b = 0; b < cfg.batch_size; ++b) {
                const int64_t idx = uniform_int(batch_rng, 0, static_cast<int>(n_train - 1));
                const LoadedClip& c = clips[static_cast<size_t>(idx)];
                imgs.push_back(c.images_norm);
                segs.push_back(c.seg_onehot);
                flows.push_back(c.flow);
                masks.push_back(c.fg_mask);
                trajs.push_back(c.traj);
            }
            Tensor batch_imgs = stack_batch(imgs);
            Tensor batch_seg = stack_batch(segs);
            Tensor batch_flow = stack_batch(flows);
            Tensor batch_mask = stack_batch(masks);

            opt.set_lr(polynomial_lr(static_cast<float>(cfg.lr), step, total_steps,
                                     static_cast<float>(cfg.poly_power)));
            Tape tape;
            auto out = model.forward(batch_imgs, trajs, /*training=*/true);
            Tensor l_seg = topk_cross_entropy(out.seg, batch_seg, static_cast<float>(cfg.k_frac));
            Tensor l_flow = smooth_l1_flow(out.flow, batch_flow, batch_mask);
            Tensor total = total_loss(l_seg, l_flow, model.loss_weights());

            const float total_v = total.item();
            if (!std::isfinite(total_v)) {
                if (saved_any) {
                    throw Error("NaN loss at step " + std::to_string(step) +
                                "; last good checkpoint retained at " + last_path);
                }
                throw Error("NaN loss at step " + std::to_string(step) + " before any checkpoint");
            }
            tape.backward(total);
            opt.step();
            opt.zero_grad();

            result.loss_history.push_back(total_v);
            result.l_seg_history.push_back(l_seg.item());
            result.l_flow_history.push_back(l_flow.item());
            ep_seg += l_seg.item();
            ep_flow += l_flow.item();
            ++ep_steps;
        }
        save_model(model, cfg, last_path);
        saved_any = true;

        EvalResult val = evaluate_model(model, cfg.dataset_path, info, info.val);
        const auto& uw = model.loss_weights();
        log << "epoch " << epoch << " step " << step << " l_seg " << ep_seg / std::max<int64_t>(1, ep_steps)
            << " l_flow " << ep_flow / std::max<int64_t>(1, ep_steps) << " lambda_seg "
            << uw.lambda_seg() << " lambda_flow " << uw.lambda_flow() << " val_iou " << val.iou
            << " val_vpq " << val.vpq << "\n";
        metric_log << "epoch " << epoch << " l_seg " << ep_seg / std::max<int64_t>(1, ep_steps)
                   << " l_flow " << ep_flow / std::max<int64_t>(1, ep_steps) << " lambda_seg "
                   << uw.lambda_seg() << " lambda_flow " << uw.lambda_flow() << " val_iou "
                   << val.iou << " val_vpq " << val.vpq << "\n";
        metric_log.flush();
        if (val.vpq > result.best_vpq) {
            result.best_vpq = val.vpq;
            save_model(model, cfg, best_path);
        }
        result.final_val_iou = val.iou;
        result.final_val_vpq = val.vpq;
    }
    result.steps = step;
    return result;
}

int64_t peak_rss_bytes() {
    std::ifstream f("/proc/self/status");
    std::string line;
    while (std::getline(f, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream ls(line.substr(6));
            int64_t kb = 0;
            ls >> kb;
            return kb * 1024;
        }
    }
    return 0;
}

BenchmarkResult benchmark_model(const RunConfig& cfg_in, const std::string& variant, int warmup,
                                int iters, std::ostream& log) {
    RunConfig cfg = cfg_in;
    cfg.model_variant = variant;
    cfg.decoder_dim = 0;  // variant default
    cfg.validate();

    warmup = std::max(warmup, 10);
    iters = std::max(iters, 100);

    CameraRig rig = rig_from_config(cfg);
    Rng rng(cfg.seed);
    InstancePredictionModel model(model_from_config(cfg), rig, rng);

    // random input, prepared outside the timed region
    Rng data_rng(cfg.seed + 1);
    Tensor images = Tensor::rand_uniform({1, cfg.seq.t_p + 1, cfg.n_cameras, 3, cfg.image_h,
                                          cfg.image_w},
                                         data_rng, -1.0f, 1.0f);
    std::vector<EgoTrajectory> trajs(1);
    for (int64_t t = 0; t <= cfg.seq.t_p; ++t) {
        EgoPose p;
        p.x = 0.25 * static_cast<double>(t);
        trajs[0].poses.push_back(p);
    }

    for (int i = 0; i < warmup; ++i) model.forward(images, trajs, /*training=*/false);

    std::vector<double> times_ms(static_cast<size_t>(iters));
    for (int i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        auto out = model.forward(images, trajs, /*training=*/false);
        const auto t1 = std::chrono::steady_clock::now();
        (void)out;
        times_ms[static_cast<size_t>(i)] =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    std::vector<double> sorted = times_ms;
    std::sort(sorted.begin(), sorted.end());

    BenchmarkResult res;
    res.variant = variant;
    res.warmup = warmup;
    res.iters = iters;
    double sum = 0;
    for (double t : times_ms) sum += t;
    res.mean_ms = sum / static_cast<double>(iters);
    res.p50_ms = sorted[static_cast<size_t>(iters / 2)];
    res.p95_ms = sorted[static_cast<size_t>(std::min<int64_t>(iters - 1, (iters * 95) / 100))];

    ParamSet ps = model.params();
    res.params = ps.count_trainable();
    res.params_m = static_cast<double>(res.params) / 1e6;

    const std::string tmp = fs::temp_directory_path().string() + "/bevflow_bench_" + variant + ".bift";
    save_checkpoint(tmp, ps.all());
    for (const auto& e : read_manifest(tmp)) {
        const int64_t n = numel_of(e.shape);
        res.manifest_total_sum += n;
        const bool buffer = e.name.size() > 12 &&
                            (e.name.rfind(".running_mean") == e.name.size() - 13 ||
                             e.name.rfind(".running_var") == e.name.size() - 12);
        if (!buffer) res.manifest_trainable_sum += n;
    }
    fs::remove(tmp);

    res.peak_rss_bytes = peak_rss_bytes();
    log << variant << ": params " << res.params << " (" << res.params_m << " M), mean "
        << res.mean_ms << " ms, p50 " << res.p50_ms << " ms, p95 " << res.p95_ms << " ms\n";
    return res;
}

}  // namespace bevflow
