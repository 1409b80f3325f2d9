#include "bevflow/instance.hpp"

#include <cmath>

namespace bevflow {

std::vector<int32_t> label_components(const uint8_t* mask, int64_t h, int64_t w, int connectivity,
                                      int32_t first_id) {
    if (connectivity != 4 && connectivity != 8) {
        throw ConfigError("connectivity must be 4 or 8, got " + std::to_string(connectivity));
    }
    std::vector<int32_t> labels(static_cast<size_t>(h * w), 0);
    std::vector<int64_t> stack;
    int32_t next = first_id;
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const int64_t p = r * w + c;
            if (!mask[p] || labels[static_cast<size_t>(p)] != 0) continue;
            const int32_t id = next++;
            labels[static_cast<size_t>(p)] = id;
            stack.assign(1, p);
            while (!stack.empty()) {
                const int64_t q = stack.back();
                stack.pop_back();
                const int64_t qr = q / w, qc = q % w;
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        if (connectivity == 4 && dr != 0 && dc != 0) continue;
                        const int64_t nr = qr + dr, nc = qc + dc;
                        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
                        const int64_t np = nr * w + nc;
                        if (mask[np] && labels[static_cast<size_t>(np)] == 0) {
                            labels[static_cast<size_t>(np)] = id;
                            stack.push_back(np);
                        }
                    }
                }
            }
        }
    }
    return labels;
}

std::vector<int32_t> seed_instances_t0(const std::vector<uint8_t>& seg_t0, int64_t h, int64_t w,
                                       int connectivity) {
    if (static_cast<int64_t>(seg_t0.size()) != h * w) throw ShapeError("seed_instances_t0: mask size mismatch");
    return label_components(seg_t0.data(), h, w, connectivity, 1);
}

std::vector<int32_t> propagate_ids(const std::vector<int32_t>& ids_prev,
                                   const std::vector<uint8_t>& seg_t, const float* flow_t,
                                   int64_t h, int64_t w, int32_t& next_id, int connectivity) {
    if (static_cast<int64_t>(ids_prev.size()) != h * w ||
        static_cast<int64_t>(seg_t.size()) != h * w) {
        throw ShapeError("propagate_ids: frame size mismatch");
    }
    std::vector<int32_t> out(static_cast<size_t>(h * w), 0);
    std::vector<uint8_t> orphan(static_cast<size_t>(h * w), 0);
    const float* frow = flow_t;            // (d_row) plane
    const float* fcol = flow_t + h * w;    // (d_col) plane
    bool any_orphan = false;
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const int64_t p = r * w + c;
            if (!seg_t[static_cast<size_t>(p)]) continue;
            const int64_t qr = round_half_down(static_cast<float>(r) + frow[p]);
            const int64_t qc = round_half_down(static_cast<float>(c) + fcol[p]);
            if (qr >= 0 && qr < h && qc >= 0 && qc < w && ids_prev[static_cast<size_t>(qr * w + qc)] > 0) {
                out[static_cast<size_t>(p)] = ids_prev[static_cast<size_t>(qr * w + qc)];
            } else {
                orphan[static_cast<size_t>(p)] = 1;
                any_orphan = true;
            }
        }
    }
    if (any_orphan) {
        std::vector<int32_t> fresh = label_components(orphan.data(), h, w, connectivity, next_id);
        int32_t max_id = next_id - 1;
        for (int64_t p = 0; p < h * w; ++p) {
            if (fresh[static_cast<size_t>(p)] > 0) {
                out[static_cast<size_t>(p)] = fresh[static_cast<size_t>(p)];
                max_id = std::max(max_id, fresh[static_cast<size_t>(p)]);
            }
        }
        next_id = max_id + 1;
    }
    return out;
}

std::vector<uint8_t> argmax_foreground(const Tensor& seg_frame) {
    if (seg_frame.rank() != 3) throw ShapeError("argmax_foreground expects (C,H,W)");
    const int64_t C = seg_frame.dim(0), H = seg_frame.dim(1), W = seg_frame.dim(2);
    std::vector<uint8_t> out(static_cast<size_t>(H * W), 0);
    const float* d = seg_frame.data().data();
    for (int64_t p = 0; p < H * W; ++p) {
        int64_t best = 0;
        float bv = d[p];
        for (int64_t c = 1; c < C; ++c) {
            const float v = d[c * H * W + p];
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        out[static_cast<size_t>(p)] = best != 0 ? 1 : 0;
    }
    return out;
}

InstanceVolume run_sequence(const Tensor& seg, const Tensor& flow, int connectivity) {
    if (seg.rank() != 4 || flow.rank() != 4 || flow.dim(1) != 2) {
        throw ShapeError("run_sequence expects seg (T,C,H,W) and flow (T,2,H,W), got " +
                         shape_str(seg.shape()) + " and " + shape_str(flow.shape()));
    }
    if (seg.dim(0) != flow.dim(0) || seg.dim(2) != flow.dim(2) || seg.dim(3) != flow.dim(3)) {
        throw ShapeError("run_sequence: seg/flow shape mismatch " + shape_str(seg.shape()) +
                         " vs " + shape_str(flow.shape()));
    }
    const int64_t T = seg.dim(0), H = seg.dim(2), W = seg.dim(3);
    InstanceVolume vol(T, H, W);
    std::vector<int32_t> prev;
    int32_t next_id = 1;
    for (int64_t t = 0; t < T; ++t) {
        std::vector<uint8_t> fg =
            argmax_foreground(reshape(slice(seg, 0, t, 1), {seg.dim(1), H, W}));
        std::vector<int32_t> cur;
        if (t == 0) {
            cur = label_components(fg.data(), H, W, connectivity, next_id);
            for (int32_t id : cur) next_id = std::max(next_id, id + 1);
        } else {
            const float* flow_t = flow.data().data() + (t * 2) * H * W;
            cur = propagate_ids(prev, fg, flow_t, H, W, next_id, connectivity);
        }
        std::copy(cur.begin(), cur.end(), vol.frame(t));
        prev = std::move(cur);
    }
    return vol;
}

}  // namespace bevflow
