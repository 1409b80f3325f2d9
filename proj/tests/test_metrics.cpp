#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bevflow/metrics.hpp"
#include "helpers.hpp"

using namespace bevflow;
using bevflow::testing::close;
using bevflow::testing::gradcheck;

TEST_CASE("topk cross entropy: saturated correct logits give near-zero loss") {
    // (T,C,H,W) = (1,2,2,2), one-hot targets, logits +-20
    Tensor target({1, 2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
    std::vector<float> logit_data(8);
    for (int i = 0; i < 4; ++i) {
        const bool cls1 = target.data()[static_cast<size_t>(4 + i)] > 0.5f;
        logit_data[static_cast<size_t>(i)] = cls1 ? -20.0f : 20.0f;
        logit_data[static_cast<size_t>(4 + i)] = cls1 ? 20.0f : -20.0f;
    }
    Tensor logits({1, 2, 2, 2}, logit_data);
    CHECK(topk_cross_entropy(logits, target, 0.25f).item() < 1e-6f);
}

TEST_CASE("topk with k=1.0 equals plain mean cross entropy") {
    Rng rng(1);
    Tensor logits = Tensor::rand_uniform({2, 2, 3, 3}, rng, -2, 2);
    std::vector<float> tdata(36, 0.0f);
    Rng trng(2);
    for (int64_t t = 0; t < 2; ++t)
        for (int64_t i = 0; i < 9; ++i) {
            const int cls = uniform_int(trng, 0, 1);
            tdata[static_cast<size_t>((t * 2 + cls) * 9 + i)] = 1.0f;
        }
    Tensor target({2, 2, 3, 3}, tdata);
    const float topk = topk_cross_entropy(logits, target, 1.0f).item();
    // plain mean over cells
    Tensor logp = log_softmax(logits, 1);
    Tensor ce = neg(sum_axis(mul(logp, target), 1));
    CHECK(close(topk, mean_all(ce).item(), 1e-5f, 1e-6f));
}

TEST_CASE("topk hand case: four cells, k=0.25 keeps the worst") {
    // craft logits with per-cell CE exactly {0.1, 0.2, 0.9, 1.5}
    const std::vector<float> ces = {0.1f, 0.2f, 0.9f, 1.5f};
    std::vector<float> logit_data(8, 0.0f);
    std::vector<float> target_data(8, 0.0f);
    for (int i = 0; i < 4; ++i) {
        // target class 1, logits (a, 0): CE = log(1 + e^a) = c
        const float a = std::log(std::exp(ces[static_cast<size_t>(i)]) - 1.0f);
        logit_data[static_cast<size_t>(i)] = a;
        target_data[static_cast<size_t>(4 + i)] = 1.0f;
    }
    Tensor logits({1, 2, 2, 2}, logit_data);
    Tensor target({1, 2, 2, 2}, target_data);
    CHECK(close(topk_cross_entropy(logits, target, 0.25f).item(), 1.5f, 1e-4f, 1e-5f));
    CHECK(close(topk_cross_entropy(logits, target, 0.5f).item(), 1.2f, 1e-4f, 1e-5f));
}

TEST_CASE("topk is monotonically non-increasing in k_frac") {
    Rng rng(3);
    for (int seed = 0; seed < 5; ++seed) {
        Tensor logits = Tensor::rand_uniform({1, 2, 4, 4}, rng, -3, 3);
        std::vector<float> tdata(32, 0.0f);
        for (int64_t i = 0; i < 16; ++i) {
            const int cls = uniform_int(rng, 0, 1);
            tdata[static_cast<size_t>(cls * 16 + i)] = 1.0f;
        }
        Tensor target({1, 2, 4, 4}, tdata);
        float prev = std::numeric_limits<float>::infinity();
        for (float k : {0.125f, 0.25f, 0.5f, 0.75f, 1.0f}) {
            const float v = topk_cross_entropy(logits, target, k).item();
            CHECK(v <= prev + 1e-6f);
            prev = v;
        }
    }
}

TEST_CASE("topk cross entropy is differentiable through the kept subset") {
    Rng rng(4);
    Tensor logits = Tensor::rand_uniform({1, 2, 3, 3}, rng, -1, 1, true);
    std::vector<float> tdata(18, 0.0f);
    for (int64_t i = 0; i < 9; ++i) tdata[static_cast<size_t>(9 + i)] = 1.0f;
    Tensor target({1, 2, 3, 3}, tdata);
    auto res = gradcheck([&] { return topk_cross_entropy(logits, target, 0.5f); }, {logits});
    CHECK_MESSAGE(res.ok, res.where, " analytic=", res.analytic, " numeric=", res.numeric);
}

TEST_CASE("smooth l1 flow: exact prediction and empty mask give zero") {
    Rng rng(5);
    Tensor pred = Tensor::rand_uniform({2, 2, 3, 3}, rng);
    Tensor mask = Tensor::full({2, 1, 3, 3}, 1.0f);
    CHECK(smooth_l1_flow(pred, pred, mask).item() == 0.0f);
    Tensor gt = Tensor::rand_uniform({2, 2, 3, 3}, rng);
    Tensor empty = Tensor::zeros({2, 1, 3, 3});
    CHECK(smooth_l1_flow(pred, gt, empty).item() == 0.0f);
}

TEST_CASE("smooth l1 flow equals a dense loop oracle on random masked maps") {
    Rng rng(6);
    for (int seed = 0; seed < 5; ++seed) {
        const int64_t T = 2, H = 4, W = 5;
        Tensor pred = Tensor::rand_uniform({T, 2, H, W}, rng, -3, 3);
        Tensor gt = Tensor::rand_uniform({T, 2, H, W}, rng, -3, 3);
        std::vector<float> mdata(static_cast<size_t>(T * H * W), 0.0f);
        for (auto& v : mdata) v = uniform(rng, 0.0f, 1.0f) > 0.5f ? 1.0f : 0.0f;
        Tensor mask({T, 1, H, W}, mdata);

        double acc = 0;
        int64_t cnt = 0;
        for (int64_t t = 0; t < T; ++t)
            for (int64_t r = 0; r < H; ++r)
                for (int64_t c = 0; c < W; ++c) {
                    if (mdata[static_cast<size_t>((t * H + r) * W + c)] == 0.0f) continue;
                    ++cnt;
                    for (int64_t comp = 0; comp < 2; ++comp) {
                        const double d = static_cast<double>(pred.at({t, comp, r, c})) -
                                         gt.at({t, comp, r, c});
                        acc += std::fabs(d) < 1.0 ? 0.5 * d * d : std::fabs(d) - 0.5;
                    }
                }
        const double expect = cnt == 0 ? 0.0 : acc / (static_cast<double>(cnt) * 2.0);
        CHECK(std::fabs(smooth_l1_flow(pred, gt, mask).item() - expect) < 1e-6);
    }
}

TEST_CASE("total loss with zero log-variances is the plain sum") {
    UncertaintyWeights w;
    Tensor l_seg = Tensor::scalar(0.7f);
    Tensor l_flow = Tensor::scalar(0.3f);
    CHECK(close(total_loss(l_seg, l_flow, w).item(), 1.0f, 1e-6f, 1e-7f));
    CHECK(w.lambda_seg() == doctest::Approx(1.0));
}

TEST_CASE("total loss gradient w.r.t. s_seg is 1 - exp(-s)*l_seg") {
    UncertaintyWeights w;
    w.s_seg.mutable_data()[0] = 0.4f;
    w.s_flow.mutable_data()[0] = -0.2f;
    Tensor l_seg = Tensor::scalar(0.9f);
    Tensor l_flow = Tensor::scalar(0.5f);
    {
        Tape tape;
        Tensor total = total_loss(l_seg, l_flow, w);
        tape.backward(total);
    }
    const float expect = 1.0f - std::exp(-0.4f) * 0.9f;
    CHECK(close(w.s_seg.grad()[0], expect, 1e-5f, 1e-6f));
    // and against finite differences
    w.s_seg.zero_grad();
    w.s_flow.zero_grad();
    auto res = gradcheck([&] { return total_loss(l_seg, l_flow, w); }, {w.s_seg, w.s_flow});
    CHECK(res.ok);
}

TEST_CASE("increasing s_seg decreases the weight on l_seg") {
    Tensor l_seg = Tensor::scalar(1.0f, true);
    Tensor l_flow = Tensor::scalar(1.0f);
    float prev = std::numeric_limits<float>::infinity();
    for (float s : {-1.0f, 0.0f, 1.0f, 2.0f}) {
        UncertaintyWeights w;
        w.s_seg.mutable_data()[0] = s;
        l_seg.zero_grad();
        Tape tape;
        tape.backward(total_loss(l_seg, l_flow, w));
        const float g = l_seg.grad()[0];  // d total / d l_seg = exp(-s)
        CHECK(g < prev);
        prev = g;
        CHECK(close(g, std::exp(-s), 1e-5f, 1e-6f));
    }
}

namespace {

std::vector<uint8_t> strip_mask(int64_t cells, std::initializer_list<int64_t> on) {
    std::vector<uint8_t> m(static_cast<size_t>(cells), 0);
    for (int64_t i : on) m[static_cast<size_t>(i)] = 1;
    return m;
}

InstanceVolume volume_from(const std::vector<std::vector<int32_t>>& frames, int64_t h, int64_t w) {
    InstanceVolume v(static_cast<int64_t>(frames.size()), h, w);
    for (size_t t = 0; t < frames.size(); ++t) {
        std::copy(frames[t].begin(), frames[t].end(), v.frame(static_cast<int64_t>(t)));
    }
    return v;
}

}  // namespace

TEST_CASE("iou hand cases") {
    // identical masks
    auto a = strip_mask(8, {1, 2});
    CHECK(iou_masks(a, a, 1, 8) == doctest::Approx(1.0));
    // disjoint
    auto b = strip_mask(8, {4, 5});
    CHECK(iou_masks(a, b, 1, 8) == doctest::Approx(0.0));
    // half overlap: two 2-cell strips sharing one cell -> 1/(2+2-1)
    auto c = strip_mask(8, {2, 3});
    CHECK(iou_masks(a, c, 1, 8) == doctest::Approx(1.0 / 3.0));
    // empty/empty frame contributes 1
    std::vector<uint8_t> e(8, 0);
    CHECK(iou_masks(e, e, 1, 8) == doctest::Approx(1.0));
    // average over frames: one perfect frame, one empty-vs-empty, one disjoint
    std::vector<uint8_t> p3, g3;
    auto append = [](std::vector<uint8_t>& dst, const std::vector<uint8_t>& src) {
        dst.insert(dst.end(), src.begin(), src.end());
    };
    append(p3, a); append(g3, a);
    append(p3, e); append(g3, e);
    append(p3, a); append(g3, b);
    CHECK(iou_masks(p3, g3, 3, 8) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("vpq: perfect single instance across frames is 1.0") {
    const int64_t h = 6, w = 6;
    std::vector<std::vector<int32_t>> frames(3, std::vector<int32_t>(h * w, 0));
    for (auto& f : frames) {
        for (int64_t r = 1; r < 4; ++r)
            for (int64_t c = 1; c < 3; ++c) f[static_cast<size_t>(r * w + c)] = 1;
    }
    InstanceVolume gt = volume_from(frames, h, w);
    // relabeled prediction: same partition, different id
    std::vector<std::vector<int32_t>> pf = frames;
    for (auto& f : pf) {
        for (auto& v : f) v = v ? 7 : 0;
    }
    InstanceVolume pred = volume_from(pf, h, w);
    VPQBreakdown out = vpq(pred, gt);
    CHECK(out.vpq == doctest::Approx(1.0));
    CHECK(vpq_oracle(pred, gt) == doctest::Approx(1.0));
    for (const auto& f : out.frames) {
        CHECK(f.n_tp == 1);
        CHECK(f.n_fp == 0);
        CHECK(f.n_fn == 0);
    }
}

TEST_CASE("vpq: one GT instance, zero predictions, one frame") {
    const int64_t h = 4, w = 4;
    std::vector<int32_t> gt_frame(h * w, 0);
    gt_frame[5] = 1;
    gt_frame[6] = 1;
    InstanceVolume gt = volume_from({gt_frame}, h, w);
    InstanceVolume pred = volume_from({std::vector<int32_t>(h * w, 0)}, h, w);
    VPQBreakdown out = vpq(pred, gt);
    CHECK(out.vpq == doctest::Approx(0.0));  // 0 / (0 + 0 + 0.5*1)
    CHECK(out.frames[0].n_fn == 1);
    CHECK(vpq_oracle(pred, gt) == doctest::Approx(0.0));
}

TEST_CASE("vpq hand case: one TP with IoU 0.8 plus one FP") {
    const int64_t h = 1, w = 20;
    // gt: cells 0..9 id 1; pred: cells 0..7 id 3 (IoU 0.8) and cells 15..17 id 9 (FP)
    std::vector<int32_t> gt_frame(static_cast<size_t>(w), 0);
    for (int i = 0; i < 10; ++i) gt_frame[static_cast<size_t>(i)] = 1;
    std::vector<int32_t> pred_frame(static_cast<size_t>(w), 0);
    for (int i = 0; i < 8; ++i) pred_frame[static_cast<size_t>(i)] = 3;
    for (int i = 15; i < 18; ++i) pred_frame[static_cast<size_t>(i)] = 9;
    InstanceVolume gt = volume_from({gt_frame}, h, w);
    InstanceVolume pred = volume_from({pred_frame}, h, w);
    VPQBreakdown out = vpq(pred, gt);
    CHECK(std::fabs(out.vpq - 0.8 / 1.5) < 1e-6);
    CHECK(std::fabs(out.vpq - 0.53333333) < 1e-6);
    CHECK(out.frames[0].n_tp == 1);
    CHECK(out.frames[0].n_fp == 1);
    CHECK(out.frames[0].n_fn == 0);
    CHECK(std::fabs(vpq_oracle(pred, gt) - out.vpq) < 1e-12);
}

TEST_CASE("vpq is invariant to bijective relabeling") {
    Rng rng(7);
    const int64_t h = 10, w = 10;
    std::vector<std::vector<int32_t>> gt_frames(3, std::vector<int32_t>(h * w, 0));
    std::vector<std::vector<int32_t>> pred_frames(3, std::vector<int32_t>(h * w, 0));
    for (int64_t t = 0; t < 3; ++t) {
        for (int64_t r = 0; r < 4; ++r)
            for (int64_t c = 0; c < 3; ++c) {
                gt_frames[static_cast<size_t>(t)][static_cast<size_t>((r + t) * w + c + 1)] = 1;
                pred_frames[static_cast<size_t>(t)][static_cast<size_t>((r + t) * w + c + 1)] = 2;
            }
        for (int64_t r = 6; r < 9; ++r)
            for (int64_t c = 5; c < 9; ++c) {
                gt_frames[static_cast<size_t>(t)][static_cast<size_t>(r * w + c)] = 5;
                if (c < 8) pred_frames[static_cast<size_t>(t)][static_cast<size_t>(r * w + c)] = 4;
            }
    }
    InstanceVolume gt = volume_from(gt_frames, h, w);
    InstanceVolume pred = volume_from(pred_frames, h, w);
    const double base = vpq(pred, gt).vpq;
    // relabel pred ids 2->11, 4->3 and gt ids 1->8, 5->1
    for (auto& f : pred_frames)
        for (auto& v : f) v = v == 2 ? 11 : v == 4 ? 3 : v;
    for (auto& f : gt_frames)
        for (auto& v : f) v = v == 1 ? 8 : v == 5 ? 1 : v;
    const double relabeled = vpq(volume_from(pred_frames, h, w), volume_from(gt_frames, h, w)).vpq;
    CHECK(base == doctest::Approx(relabeled));
    CHECK(base > 0.0);
    CHECK(base <= 1.0);
}

TEST_CASE("vpq empty scenes use the defined convention") {
    InstanceVolume empty(3, 5, 5);
    CHECK(vpq(empty, empty).vpq == doctest::Approx(1.0));
    CHECK(vpq_oracle(empty, empty) == doctest::Approx(1.0));
    CHECK(vpq(empty, empty, /*sum_over_frames=*/true).vpq == doctest::Approx(0.0));
    CHECK(vpq_oracle(empty, empty, /*sum_over_frames=*/true) == doctest::Approx(0.0));
}

TEST_CASE("vpq oracle refuses oversized scenes") {
    const int64_t h = 4, w = 24;
    std::vector<int32_t> frame(static_cast<size_t>(h * w), 0);
    for (int i = 0; i < 12; ++i) frame[static_cast<size_t>(i * 2)] = i + 1;  // 12 instances
    InstanceVolume v = volume_from({frame}, h, w);
    CHECK_THROWS_AS(vpq_oracle(v, v), Error);
}

namespace {

// random scenes with moving rectangles, dropped/spurious instances, and
// occasional id switches; both volumes remain valid partitions
void random_scene(Rng& rng, InstanceVolume& pred, InstanceVolume& gt) {
    const int64_t h = 20, w = 20, T = 3;
    pred = InstanceVolume(T, h, w);
    gt = InstanceVolume(T, h, w);
    const int n_obj = uniform_int(rng, 1, 5);
    for (int obj = 0; obj < n_obj; ++obj) {
        const int64_t rh = uniform_int(rng, 2, 4), rw = uniform_int(rng, 2, 4);
        int64_t r = uniform_int(rng, 0, static_cast<int>(h - rh));
        int64_t c = uniform_int(rng, 0, static_cast<int>(w - rw));
        const int64_t vr = uniform_int(rng, -2, 2), vc = uniform_int(rng, -2, 2);
        const bool dropped = uniform(rng, 0, 1) < 0.15f;   // pred misses this object
        const bool id_switch = uniform(rng, 0, 1) < 0.2f;  // pred id changes mid-clip
        const int64_t jitter_r = uniform_int(rng, -1, 1);
        const int64_t jitter_c = uniform_int(rng, -1, 1);
        for (int64_t t = 0; t < T; ++t) {
            const int64_t rr = std::clamp<int64_t>(r + vr * t, 0, h - rh);
            const int64_t cc = std::clamp<int64_t>(c + vc * t, 0, w - rw);
            for (int64_t i = 0; i < rh; ++i)
                for (int64_t j = 0; j < rw; ++j) {
                    gt.at(t, rr + i, cc + j) = obj + 1;
                }
            if (dropped) continue;
            const int32_t pid = (id_switch && t >= 2) ? 100 + obj : 50 + obj;
            const int64_t pr = std::clamp<int64_t>(rr + jitter_r, 0, h - rh);
            const int64_t pc = std::clamp<int64_t>(cc + jitter_c, 0, w - rw);
            for (int64_t i = 0; i < rh; ++i)
                for (int64_t j = 0; j < rw; ++j) {
                    pred.at(t, pr + i, pc + j) = pid;
                }
        }
    }
    // occasional spurious prediction
    if (uniform(rng, 0, 1) < 0.3f) {
        const int64_t t = uniform_int(rng, 0, static_cast<int>(T - 1));
        const int64_t r = uniform_int(rng, 0, static_cast<int>(h - 2));
        const int64_t c = uniform_int(rng, 0, static_cast<int>(w - 2));
        for (int64_t i = 0; i < 2; ++i)
            for (int64_t j = 0; j < 2; ++j) {
                if (pred.at(t, r + i, c + j) == 0) pred.at(t, r + i, c + j) = 999;
            }
    }
}

}  // namespace

TEST_CASE("vpq equals the exhaustive oracle on 50 randomized scenes") {
    Rng rng(1234);
    for (int scene = 0; scene < 50; ++scene) {
        InstanceVolume pred, gt;
        random_scene(rng, pred, gt);
        const double main = vpq(pred, gt).vpq;
        const double oracle = vpq_oracle(pred, gt);
        CHECK_MESSAGE(std::fabs(main - oracle) <= 1e-12, "scene ", scene, ": vpq=", main,
                      " oracle=", oracle);
        CHECK(main >= 0.0);
        CHECK(main <= 1.0);
        // single-frame sums also agree
        const double main_sum = vpq(pred, gt, true).vpq;
        const double oracle_sum = vpq_oracle(pred, gt, true);
        CHECK(std::fabs(main_sum - oracle_sum) <= 1e-12);
    }
}

TEST_CASE("metric report formatting") {
    const std::string report = format_metric_report({{"iou", "0.5"}, {"vpq", "0.25"}});
    CHECK(report == "iou 0.5\nvpq 0.25\n");
}
