#include "bevflow/viz.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace bevflow {

namespace {

std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
    const float c = v * s;
    const float hp = h * 6.0f;
    const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
    float r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const float m = v - c;
    return {r + m, g + m, b + m};
}

uint32_t splitmix(uint32_t x) {
    x += 0x9e3779b9u;
    x = (x ^ (x >> 16)) * 0x85ebca6bu;
    x = (x ^ (x >> 13)) * 0xc2b2ae35u;
    return x ^ (x >> 16);
}

constexpr float kBackground = 0.12f;

}  // namespace

std::array<float, 3> color_for_id(int32_t id) {
    const float hue = static_cast<float>(splitmix(static_cast<uint32_t>(id)) % 360u) / 360.0f;
    return hsv_to_rgb(hue, 0.75f, 0.95f);
}

void write_ppm(const std::string& path, int64_t h, int64_t w, const std::vector<float>& rgb) {
    if (static_cast<int64_t>(rgb.size()) != h * w * 3) throw ShapeError("write_ppm: buffer size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open image for writing: " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> bytes(rgb.size());
    for (size_t i = 0; i < rgb.size(); ++i) {
        bytes[i] = static_cast<unsigned char>(std::clamp(rgb[i], 0.0f, 1.0f) * 255.0f + 0.5f);
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

void paint_frame(std::vector<float>& rgb, const InstanceVolume& vol, int64_t t, float alpha) {
    const int64_t h = vol.h, w = vol.w;
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const int32_t id = vol.at(t, r, c);
            if (id == 0) continue;
            const auto col = color_for_id(id);
            float* px = rgb.data() + (r * w + c) * 3;
            for (int ch = 0; ch < 3; ++ch) {
                px[ch] = (1.0f - alpha) * px[ch] + alpha * col[static_cast<size_t>(ch)];
            }
        }
    }
}

void paint_ego(std::vector<float>& rgb, int64_t h, int64_t w) {
    const int64_t r0 = h / 2, c0 = w / 2;
    for (int64_t dr = -1; dr <= 1; ++dr) {
        for (int64_t dc = -1; dc <= 1; ++dc) {
            const int64_t r = r0 + dr, c = c0 + dc;
            if (r < 0 || r >= h || c < 0 || c >= w) continue;
            float* px = rgb.data() + (r * w + c) * 3;
            px[0] = px[1] = px[2] = 0.0f;
        }
    }
}

}  // namespace

void emit_instance_viz(const InstanceVolume& vol, const std::string& out_dir,
                       const std::string& prefix) {
    std::filesystem::create_directories(out_dir);
    for (int64_t t = 0; t < vol.t_len; ++t) {
        std::vector<float> rgb(static_cast<size_t>(vol.h * vol.w * 3), kBackground);
        paint_frame(rgb, vol, 0, 1.0f);
        if (t > 0) paint_frame(rgb, vol, t, 0.55f);
        paint_ego(rgb, vol.h, vol.w);
        write_ppm(out_dir + "/" + prefix + "_frame" + std::to_string(t) + ".ppm", vol.h, vol.w, rgb);
    }
}

}  // namespace bevflow
