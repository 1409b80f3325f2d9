#include "bevflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace bevflow {

void UncertaintyWeights::collect(const std::string& prefix, ParamSet& out) const {
    out.add(prefix + ".s_seg", s_seg);
    out.add(prefix + ".s_flow", s_flow);
}

Tensor topk_cross_entropy(const Tensor& logits, const Tensor& target_onehot, float k_frac) {
    if (k_frac <= 0.0f || k_frac > 1.0f) {
        throw ConfigError("topk_cross_entropy: k_frac must be in (0,1], got " + std::to_string(k_frac));
    }
    if (logits.shape() != target_onehot.shape()) {
        throw ShapeError("topk_cross_entropy: shape mismatch " + shape_str(logits.shape()) + " vs " +
                         shape_str(target_onehot.shape()));
    }
    int class_axis;
    if (logits.rank() == 4) class_axis = 1;       // (T,C,H,W)
    else if (logits.rank() == 5) class_axis = 2;  // (B,T,C,H,W)
    else throw ShapeError("topk_cross_entropy expects rank 4 or 5 logits");

    Tensor logp = log_softmax(logits, class_axis);
    Tensor ce = neg(sum_axis(mul(logp, target_onehot), class_axis));
    const int64_t n = ce.numel();
    const int64_t k = static_cast<int64_t>(std::ceil(static_cast<double>(k_frac) * static_cast<double>(n)));
    return topk_mean(reshape(ce, {n}), std::max<int64_t>(1, k));
}

Tensor smooth_l1_flow(const Tensor& pred, const Tensor& gt, const Tensor& fg_mask) {
    if (pred.shape() != gt.shape()) {
        throw ShapeError("smooth_l1_flow: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(gt.shape()));
    }
    int comp_axis;
    if (pred.rank() == 4) comp_axis = 1;       // (T,2,H,W)
    else if (pred.rank() == 5) comp_axis = 2;  // (B,T,2,H,W)
    else throw ShapeError("smooth_l1_flow expects rank 4 or 5 flow");
    if (pred.dim(comp_axis) != 2) throw ShapeError("smooth_l1_flow: flow needs 2 components");
    if (fg_mask.rank() != pred.rank() || fg_mask.dim(comp_axis) != 1) {
        throw ShapeError("smooth_l1_flow: mask must match flow rank with a singleton component axis");
    }

    // expand the mask over the two flow components (constant, no gradient)
    double fg_count = 0;
    for (float v : fg_mask.data()) fg_count += v != 0.0f ? 1.0 : 0.0;
    if (fg_count == 0) return Tensor::scalar(0.0f);

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < comp_axis; ++d) outer *= pred.dim(d);
    for (int d = comp_axis + 1; d < pred.rank(); ++d) inner *= pred.dim(d);
    std::vector<float> mask2(static_cast<size_t>(outer * 2 * inner));
    for (int64_t o = 0; o < outer; ++o) {
        const float* src = fg_mask.data().data() + o * inner;
        for (int64_t comp = 0; comp < 2; ++comp) {
            std::copy(src, src + inner, mask2.data() + (o * 2 + comp) * inner);
        }
    }
    Tensor mask_exp(pred.shape(), std::move(mask2));

    Tensor err = mul(smooth_l1(sub(pred, gt), 1.0f), mask_exp);
    const float denom = static_cast<float>(fg_count * 2.0);
    return mul_scalar(sum_all(err), 1.0f / denom);
}

Tensor total_loss(const Tensor& l_seg, const Tensor& l_flow, const UncertaintyWeights& w) {
    Tensor term_seg = mul(exp_op(neg(w.s_seg)), l_seg);
    Tensor term_flow = mul(exp_op(neg(w.s_flow)), l_flow);
    return add(add(term_seg, term_flow), add(w.s_seg, w.s_flow));
}

double iou_masks(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int64_t t_len,
                 int64_t cells) {
    if (static_cast<int64_t>(pred.size()) != t_len * cells ||
        static_cast<int64_t>(gt.size()) != t_len * cells) {
        throw ShapeError("iou_masks: size mismatch");
    }
    double acc = 0;
    for (int64_t t = 0; t < t_len; ++t) {
        int64_t inter = 0, uni = 0;
        const uint8_t* p = pred.data() + t * cells;
        const uint8_t* g = gt.data() + t * cells;
        for (int64_t i = 0; i < cells; ++i) {
            const bool bp = p[i] != 0, bg = g[i] != 0;
            inter += bp && bg;
            uni += bp || bg;
        }
        acc += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    return acc / static_cast<double>(t_len);
}

// ---- VPQ ------------------------------------------------------------------

namespace {

struct FrameSegments {
    std::map<int32_t, int64_t> pred_size, gt_size;
    std::map<std::pair<int32_t, int32_t>, int64_t> inter;
};

FrameSegments frame_segments(const InstanceVolume& pred, const InstanceVolume& gt, int64_t t) {
    FrameSegments fs;
    const int32_t* p = pred.frame(t);
    const int32_t* g = gt.frame(t);
    const int64_t n = pred.h * pred.w;
    for (int64_t i = 0; i < n; ++i) {
        if (p[i] > 0) ++fs.pred_size[p[i]];
        if (g[i] > 0) ++fs.gt_size[g[i]];
        if (p[i] > 0 && g[i] > 0) ++fs.inter[{p[i], g[i]}];
    }
    return fs;
}

struct PairInfo {
    int32_t pred_id, gt_id;
    double w_raw = 0;                         // sum of matched IoUs over frames
    double w_eq2 = 0;                         // sum of IoU/denom_t over frames
    std::vector<std::pair<int64_t, double>> frame_ious;  // (t, iou) where IoU > 0.5
};

struct SceneTable {
    std::vector<FrameSegments> frames;
    std::vector<double> denom;    // 0.5*(P_t+G_t)
    std::vector<bool> counted;    // P_t+G_t > 0
    std::vector<PairInfo> pairs;  // candidate pairs (IoU>0.5 in some frame)
};

SceneTable build_scene_table(const InstanceVolume& pred, const InstanceVolume& gt) {
    if (pred.t_len != gt.t_len || pred.h != gt.h || pred.w != gt.w) {
        throw ShapeError("vpq: pred/gt volume shape mismatch");
    }
    SceneTable tab;
    std::map<std::pair<int32_t, int32_t>, size_t> pair_index;
    for (int64_t t = 0; t < pred.t_len; ++t) {
        FrameSegments fs = frame_segments(pred, gt, t);
        const double pg = static_cast<double>(fs.pred_size.size() + fs.gt_size.size());
        tab.denom.push_back(0.5 * pg);
        tab.counted.push_back(pg > 0);
        for (const auto& [key, inter] : fs.inter) {
            const int64_t uni = fs.pred_size[key.first] + fs.gt_size[key.second] - inter;
            const double iou = static_cast<double>(inter) / static_cast<double>(uni);
            if (iou <= 0.5) continue;
            auto it = pair_index.find(key);
            if (it == pair_index.end()) {
                it = pair_index.emplace(key, tab.pairs.size()).first;
                tab.pairs.push_back({key.first, key.second, 0, 0, {}});
            }
            PairInfo& pi = tab.pairs[it->second];
            pi.w_raw += iou;
            pi.w_eq2 += iou / (0.5 * pg);
            pi.frame_ious.push_back({t, iou});
        }
        tab.frames.push_back(std::move(fs));
    }
    return tab;
}

// Lexicographic (raw IoU sum, Eq.2 contribution) objective; both terms are
// additive over chosen pairs, so components maximize independently.
struct Objective {
    double raw = 0, eq2 = 0;
    bool better_than(const Objective& o) const {
        if (raw > o.raw + 1e-12) return true;
        if (raw < o.raw - 1e-12) return false;
        return eq2 > o.eq2 + 1e-15;
    }
    Objective plus(const PairInfo& p) const { return {raw + p.w_raw, eq2 + p.w_eq2}; }
};

void enumerate_component(const std::vector<const PairInfo*>& pairs, size_t i,
                         std::set<int32_t>& used_pred, std::set<int32_t>& used_gt,
                         std::vector<const PairInfo*>& chosen, Objective cur,
                         std::vector<const PairInfo*>& best_chosen, Objective& best) {
    if (i == pairs.size()) {
        if (cur.better_than(best)) {
            best = cur;
            best_chosen = chosen;
        }
        return;
    }
    const PairInfo* p = pairs[i];
    if (!used_pred.count(p->pred_id) && !used_gt.count(p->gt_id)) {
        used_pred.insert(p->pred_id);
        used_gt.insert(p->gt_id);
        chosen.push_back(p);
        enumerate_component(pairs, i + 1, used_pred, used_gt, chosen, cur.plus(*p), best_chosen, best);
        chosen.pop_back();
        used_pred.erase(p->pred_id);
        used_gt.erase(p->gt_id);
    }
    enumerate_component(pairs, i + 1, used_pred, used_gt, chosen, cur, best_chosen, best);
}

std::vector<const PairInfo*> select_bijection(const SceneTable& tab) {
    // group candidate pairs into conflict components via union-find over pairs
    const size_t n = tab.pairs.size();
    std::vector<size_t> parent(n);
    for (size_t i = 0; i < n; ++i) parent[i] = i;
    std::function<size_t(size_t)> find = [&](size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    std::map<int32_t, size_t> by_pred, by_gt;
    for (size_t i = 0; i < n; ++i) {
        auto link = [&](std::map<int32_t, size_t>& m, int32_t key) {
            auto it = m.find(key);
            if (it == m.end()) m.emplace(key, i);
            else parent[find(i)] = find(it->second);
        };
        link(by_pred, tab.pairs[i].pred_id);
        link(by_gt, tab.pairs[i].gt_id);
    }
    std::map<size_t, std::vector<const PairInfo*>> comps;
    for (size_t i = 0; i < n; ++i) comps[find(i)].push_back(&tab.pairs[i]);

    std::vector<const PairInfo*> selected;
    for (auto& [root, pairs] : comps) {
        Objective best{-1, 0};
        std::vector<const PairInfo*> best_chosen, chosen;
        std::set<int32_t> up, ug;
        enumerate_component(pairs, 0, up, ug, chosen, {0, 0}, best_chosen, best);
        selected.insert(selected.end(), best_chosen.begin(), best_chosen.end());
    }
    std::sort(selected.begin(), selected.end(), [](const PairInfo* a, const PairInfo* b) {
        return std::make_pair(a->pred_id, a->gt_id) < std::make_pair(b->pred_id, b->gt_id);
    });
    return selected;
}

double finalize(double eq2_total, int64_t n_counted, bool sum_over_frames) {
    if (sum_over_frames) return eq2_total;
    if (n_counted == 0) return 1.0;  // all-empty scene: perfect agreement
    return eq2_total / static_cast<double>(n_counted);
}

}  // namespace

VPQBreakdown vpq(const InstanceVolume& pred, const InstanceVolume& gt, bool sum_over_frames) {
    SceneTable tab = build_scene_table(pred, gt);
    std::vector<const PairInfo*> selected = select_bijection(tab);

    VPQBreakdown out;
    out.frames.resize(static_cast<size_t>(pred.t_len));
    for (int64_t t = 0; t < pred.t_len; ++t) {
        VPQFrame& f = out.frames[static_cast<size_t>(t)];
        f.n_pred = static_cast<int64_t>(tab.frames[static_cast<size_t>(t)].pred_size.size());
        f.n_gt = static_cast<int64_t>(tab.frames[static_cast<size_t>(t)].gt_size.size());
        f.counted = tab.counted[static_cast<size_t>(t)];
    }
    for (const PairInfo* p : selected) {
        for (const auto& [t, iou] : p->frame_ious) {
            VPQFrame& f = out.frames[static_cast<size_t>(t)];
            f.tp.push_back({p->pred_id, p->gt_id, iou});
            f.iou_sum += iou;
        }
    }
    double eq2_total = 0;
    int64_t n_counted = 0;
    for (auto& f : out.frames) {
        f.n_tp = static_cast<int64_t>(f.tp.size());
        f.n_fp = f.n_pred - f.n_tp;
        f.n_fn = f.n_gt - f.n_tp;
        if (!f.counted) continue;
        const double denom = static_cast<double>(f.n_tp) + 0.5 * static_cast<double>(f.n_fp) +
                             0.5 * static_cast<double>(f.n_fn);
        f.ratio = f.iou_sum / denom;
        eq2_total += f.ratio;
        ++n_counted;
    }
    out.vpq = finalize(eq2_total, n_counted, sum_over_frames);
    return out;
}

double vpq_oracle(const InstanceVolume& pred, const InstanceVolume& gt, bool sum_over_frames,
                  int64_t max_instances) {
    if (pred.t_len != gt.t_len || pred.h != gt.h || pred.w != gt.w) {
        throw ShapeError("vpq_oracle: pred/gt volume shape mismatch");
    }
    const int64_t T = pred.t_len, n = pred.h * pred.w;

    // independent per-frame segment extraction
    struct Frame {
        std::map<int32_t, int64_t> psz, gsz;
        std::map<std::pair<int32_t, int32_t>, int64_t> inter;
    };
    std::vector<Frame> frames(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        Frame& f = frames[static_cast<size_t>(t)];
        const int32_t* pp = pred.frame(t);
        const int32_t* gg = gt.frame(t);
        for (int64_t i = 0; i < n; ++i) {
            if (pp[i] > 0) ++f.psz[pp[i]];
            if (gg[i] > 0) ++f.gsz[gg[i]];
            if (pp[i] > 0 && gg[i] > 0) ++f.inter[{pp[i], gg[i]}];
        }
        if (static_cast<int64_t>(f.psz.size()) > max_instances ||
            static_cast<int64_t>(f.gsz.size()) > max_instances) {
            throw Error("vpq_oracle: more than " + std::to_string(max_instances) +
                        " instances in frame " + std::to_string(t));
        }
    }

    // candidate pairs: IoU > 0.5 in at least one frame
    struct Cand {
        int32_t p, g;
        double w_raw = 0, w_eq2 = 0;
        std::vector<std::pair<int64_t, double>> ious;
    };
    std::map<std::pair<int32_t, int32_t>, Cand> cands;
    for (int64_t t = 0; t < T; ++t) {
        const Frame& f = frames[static_cast<size_t>(t)];
        const double denom = 0.5 * static_cast<double>(f.psz.size() + f.gsz.size());
        for (const auto& [key, in] : f.inter) {
            const int64_t uni = f.psz.at(key.first) + f.gsz.at(key.second) - in;
            const double iou = static_cast<double>(in) / static_cast<double>(uni);
            if (iou <= 0.5) continue;
            Cand& c = cands[key];
            c.p = key.first;
            c.g = key.second;
            c.w_raw += iou;
            c.w_eq2 += iou / denom;
            c.ious.push_back({t, iou});
        }
    }

    // exhaustive assignment: each pred id takes one unused gt id or none
    std::vector<int32_t> pred_ids;
    std::map<int32_t, std::vector<const Cand*>> options;
    for (const auto& [key, c] : cands) {
        if (!options.count(key.first)) pred_ids.push_back(key.first);
        options[key.first].push_back(&c);
    }
    std::sort(pred_ids.begin(), pred_ids.end());

    Objective best{-1, 0};
    std::vector<const Cand*> chosen, best_chosen;
    std::set<int32_t> used_gt;
    std::function<void(size_t, Objective)> rec = [&](size_t i, Objective cur) {
        if (i == pred_ids.size()) {
            if (cur.better_than(best)) {
                best = cur;
                best_chosen = chosen;
            }
            return;
        }
        rec(i + 1, cur);  // leave this pred unmatched
        for (const Cand* c : options[pred_ids[i]]) {
            if (used_gt.count(c->g)) continue;
            used_gt.insert(c->g);
            chosen.push_back(c);
            rec(i + 1, Objective{cur.raw + c->w_raw, cur.eq2 + c->w_eq2});
            chosen.pop_back();
            used_gt.erase(c->g);
        }
    };
    rec(0, {0, 0});

    // Eq. 2 from the chosen bijection, assembled frame by frame
    std::vector<double> iou_sum(static_cast<size_t>(T), 0.0);
    std::vector<int64_t> tp(static_cast<size_t>(T), 0);
    for (const Cand* c : best_chosen) {
        for (const auto& [t, iou] : c->ious) {
            iou_sum[static_cast<size_t>(t)] += iou;
            ++tp[static_cast<size_t>(t)];
        }
    }
    double total = 0;
    int64_t n_counted = 0;
    for (int64_t t = 0; t < T; ++t) {
        const Frame& f = frames[static_cast<size_t>(t)];
        const int64_t np = static_cast<int64_t>(f.psz.size());
        const int64_t ng = static_cast<int64_t>(f.gsz.size());
        if (np + ng == 0) continue;
        const double denom = static_cast<double>(tp[static_cast<size_t>(t)]) +
                             0.5 * static_cast<double>(np - tp[static_cast<size_t>(t)]) +
                             0.5 * static_cast<double>(ng - tp[static_cast<size_t>(t)]);
        total += iou_sum[static_cast<size_t>(t)] / denom;
        ++n_counted;
    }
    return finalize(total, n_counted, sum_over_frames);
}

std::string format_metric_report(const std::vector<std::pair<std::string, std::string>>& kv) {
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << " " << v << "\n";
    return os.str();
}

}  // namespace bevflow
