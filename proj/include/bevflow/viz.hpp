#pragma once

#include <array>
#include <string>

#include "bevflow/instance.hpp"

namespace bevflow {

// Stable instance color: hash of the ID picks a hue. Same ID, same color.
std::array<float, 3> color_for_id(int32_t id);

void write_ppm(const std::string& path, int64_t h, int64_t w, const std::vector<float>& rgb);

// One image per output frame: frame 0 at full opacity, frame k composited over
// it at reduced alpha (k > 0), ego marked black at the grid center.
void emit_instance_viz(const InstanceVolume& vol, const std::string& out_dir,
                       const std::string& prefix);

}  // namespace bevflow
