#pragma once

#include <cstdint>
#include <vector>

#include "bevflow/tensor.hpp"

namespace bevflow {

// Per-frame instance-ID maps. 0 is background; positive IDs are stable across
// frames and unique within a clip.
struct InstanceVolume {
    int64_t t_len = 0, h = 0, w = 0;
    std::vector<int32_t> ids;  // (t, h, w) row-major

    InstanceVolume() = default;
    InstanceVolume(int64_t t, int64_t h, int64_t w)
        : t_len(t), h(h), w(w), ids(static_cast<size_t>(t * h * w), 0) {}
    int32_t at(int64_t t, int64_t r, int64_t c) const {
        return ids[static_cast<size_t>((t * h + r) * w + c)];
    }
    int32_t& at(int64_t t, int64_t r, int64_t c) {
        return ids[static_cast<size_t>((t * h + r) * w + c)];
    }
    const int32_t* frame(int64_t t) const { return ids.data() + t * h * w; }
    int32_t* frame(int64_t t) { return ids.data() + t * h * w; }
};

// Connected-component labeling of a binary mask. Components are numbered from
// first_id in row-major scan order of their first pixel.
std::vector<int32_t> label_components(const uint8_t* mask, int64_t h, int64_t w, int connectivity,
                                      int32_t first_id);

std::vector<int32_t> seed_instances_t0(const std::vector<uint8_t>& seg_t0, int64_t h, int64_t w,
                                       int connectivity = 8);

// Backward-flow ID assignment: each foreground cell p takes the previous-frame
// ID found at round(p + flow[p]); cells whose destination is background or out
// of bounds form fresh connected components numbered from next_id.
std::vector<int32_t> propagate_ids(const std::vector<int32_t>& ids_prev,
                                   const std::vector<uint8_t>& seg_t, const float* flow_t,
                                   int64_t h, int64_t w, int32_t& next_id, int connectivity = 8);

// seg: (T,C,H,W) logits or one-hot; flow: (T,2,H,W) in cells, (d_row,d_col).
InstanceVolume run_sequence(const Tensor& seg, const Tensor& flow, int connectivity = 8);

// argmax over the class axis; foreground where the argmax class is nonzero.
std::vector<uint8_t> argmax_foreground(const Tensor& seg_frame);  // (C,H,W) -> h*w mask

}  // namespace bevflow
