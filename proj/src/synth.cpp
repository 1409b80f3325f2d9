#include "bevflow/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;

namespace bevflow {

SimResult simulate(const SceneScript& script) {
    if (script.duration < 1 || script.hz <= 0) throw ConfigError("bad scene script duration/hz");
    const double dt = 1.0 / script.hz;
    SimResult out;
    out.ego.resize(static_cast<size_t>(script.duration));
    out.agents.assign(static_cast<size_t>(script.duration),
                      std::vector<AgentState>(script.agents.size()));

    // ego: unicycle integration from the origin
    double ex = 0, ey = 0, eyaw = 0;
    size_t seg = 0;
    int64_t seg_left = script.ego_motion.empty() ? std::numeric_limits<int64_t>::max()
                                                 : script.ego_motion[0].n_frames;
    for (int64_t f = 0; f < script.duration; ++f) {
        EgoPose p;
        p.x = ex;
        p.y = ey;
        p.z = 0;
        p.qw = std::cos(eyaw / 2);
        p.qz = std::sin(eyaw / 2);
        out.ego[static_cast<size_t>(f)] = p;
        double v = 0, yr = 0;
        if (seg < script.ego_motion.size()) {
            v = script.ego_motion[seg].v;
            yr = script.ego_motion[seg].yaw_rate;
        }
        ex += v * std::cos(eyaw) * dt;
        ey += v * std::sin(eyaw) * dt;
        eyaw += yr * dt;
        if (!script.ego_motion.empty() && --seg_left <= 0) {
            if (seg + 1 < script.ego_motion.size()) {
                ++seg;
                seg_left = script.ego_motion[seg].n_frames;
            }
        }
    }

    for (size_t a = 0; a < script.agents.size(); ++a) {
        const AgentSpec& sp = script.agents[a];
        for (int64_t f = 0; f < script.duration; ++f) {
            AgentState& st = out.agents[static_cast<size_t>(f)][a];
            if (f < sp.spawn_frame) continue;
            const double life = static_cast<double>(f - sp.spawn_frame) * dt;
            st.present = true;
            st.x = sp.x + sp.vx * life;
            st.y = sp.y + sp.vy * life;
            st.yaw = sp.yaw + sp.yaw_rate * life;
        }
    }
    return out;
}

namespace {

struct Footprint {
    bool visible = false;
    double rc = 0, cc = 0;               // center, continuous cell coords
    std::vector<int64_t> cells;          // covered r*W+c
};

Footprint agent_footprint(const AgentState& st, const AgentSpec& sp, const Mat4& ego_from_world,
                          const BEVGridSpec& grid) {
    Footprint fp;
    if (!st.present) return fp;
    const Vec3 center = ego_from_world.transform_point({st.x, st.y, 0});
    const Mat3 rot = ego_from_world.rotation();
    const Vec3 u = rot.apply({std::cos(st.yaw), std::sin(st.yaw), 0});
    const Vec3 v = rot.apply({-std::sin(st.yaw), std::cos(st.yaw), 0});
    fp.rc = grid.row_coord(center.x);
    fp.cc = grid.col_coord(center.y);

    const double hl = sp.length / 2, hw = sp.width / 2;
    double min_x = center.x, max_x = center.x, min_y = center.y, max_y = center.y;
    for (int sx = -1; sx <= 1; sx += 2) {
        for (int sy = -1; sy <= 1; sy += 2) {
            const double px = center.x + sx * hl * u.x + sy * hw * v.x;
            const double py = center.y + sx * hl * u.y + sy * hw * v.y;
            min_x = std::min(min_x, px);
            max_x = std::max(max_x, px);
            min_y = std::min(min_y, py);
            max_y = std::max(max_y, py);
        }
    }
    const int64_t r0 = std::max<int64_t>(0, grid.row_of(max_x) - 1);
    const int64_t r1 = std::min<int64_t>(grid.rows() - 1, grid.row_of(min_x) + 1);
    const int64_t c0 = std::max<int64_t>(0, grid.col_of(min_y) - 1);
    const int64_t c1 = std::min<int64_t>(grid.cols() - 1, grid.col_of(max_y) + 1);
    for (int64_t r = r0; r <= r1; ++r) {
        const double px = grid.x_of_row(static_cast<double>(r));
        for (int64_t c = c0; c <= c1; ++c) {
            const double py = grid.y_of_col(static_cast<double>(c));
            const double dx = px - center.x, dy = py - center.y;
            if (std::fabs(dx * u.x + dy * u.y) <= hl && std::fabs(dx * v.x + dy * v.y) <= hw) {
                fp.cells.push_back(r * grid.cols() + c);
            }
        }
    }
    fp.visible = !fp.cells.empty();
    return fp;
}

// footprints[k][a] for output frame k
std::vector<std::vector<Footprint>> output_footprints(const SimResult& sim,
                                                      const SceneScript& script,
                                                      const BEVGridSpec& grid,
                                                      const SequenceSpec& seq) {
    const Mat4 ego_from_world =
        sim.ego[static_cast<size_t>(seq.present_frame())].to_matrix().rigid_inverse();
    std::vector<std::vector<Footprint>> fps(static_cast<size_t>(seq.t_f));
    for (int64_t k = 0; k < seq.t_f; ++k) {
        const int64_t abs_f = seq.output_abs_frame(k);
        fps[static_cast<size_t>(k)].resize(script.agents.size());
        for (size_t a = 0; a < script.agents.size(); ++a) {
            fps[static_cast<size_t>(k)][a] = agent_footprint(
                sim.agents[static_cast<size_t>(abs_f)][a], script.agents[a], ego_from_world, grid);
        }
    }
    return fps;
}

}  // namespace

GroundTruth rasterize_gt(const SimResult& sim, const SceneScript& script, const BEVGridSpec& grid,
                         const SequenceSpec& seq) {
    seq.validate();
    if (static_cast<int64_t>(sim.ego.size()) < seq.required_frames()) {
        throw ConfigError("simulation too short: " + std::to_string(sim.ego.size()) + " frames, need " +
                          std::to_string(seq.required_frames()));
    }
    const int64_t H = grid.rows(), W = grid.cols();
    auto fps = output_footprints(sim, script, grid, seq);

    GroundTruth gt;
    gt.ids = InstanceVolume(seq.t_f, H, W);
    std::vector<float> seg(static_cast<size_t>(seq.t_f * 2 * H * W), 0.0f);
    std::vector<float> flow(static_cast<size_t>(seq.t_f * 2 * H * W), 0.0f);

    for (int64_t k = 0; k < seq.t_f; ++k) {
        int32_t* ids = gt.ids.frame(k);
        for (size_t a = 0; a < script.agents.size(); ++a) {
            const Footprint& fp = fps[static_cast<size_t>(k)][a];
            for (int64_t cell : fp.cells) ids[cell] = static_cast<int32_t>(a) + 1;
        }
        float* seg_bg = seg.data() + (k * 2 + 0) * H * W;
        float* seg_fg = seg.data() + (k * 2 + 1) * H * W;
        float* frow = flow.data() + (k * 2 + 0) * H * W;
        float* fcol = flow.data() + (k * 2 + 1) * H * W;
        for (int64_t cell = 0; cell < H * W; ++cell) {
            const int32_t id = ids[cell];
            if (id == 0) {
                seg_bg[cell] = 1.0f;
                continue;
            }
            seg_fg[cell] = 1.0f;
            const size_t a = static_cast<size_t>(id - 1);
            // previous output frame center; self when first seen or invisible before
            const Footprint* target = &fps[static_cast<size_t>(k)][a];
            if (k > 0 && fps[static_cast<size_t>(k - 1)][a].visible) {
                target = &fps[static_cast<size_t>(k - 1)][a];
            }
            const int64_t r = cell / W, c = cell % W;
            frow[cell] = static_cast<float>(target->rc - static_cast<double>(r));
            fcol[cell] = static_cast<float>(target->cc - static_cast<double>(c));
        }
    }
    gt.seg_onehot = Tensor({seq.t_f, 2, H, W}, std::move(seg));
    gt.flow = Tensor({seq.t_f, 2, H, W}, std::move(flow));
    return gt;
}

CameraRig make_ring_rig(int64_t n_cameras, int64_t image_h, int64_t image_w, double fov_deg,
                        double mount_height) {
    if (n_cameras < 1) throw ConfigError("rig needs at least one camera");
    CameraRig rig;
    rig.image_h = image_h;
    rig.image_w = image_w;
    const double fx = static_cast<double>(image_w) / 2.0 / std::tan(fov_deg * M_PI / 360.0);
    for (int64_t i = 0; i < n_cameras; ++i) {
        Mat3 k = Mat3::identity();
        k.at(0, 0) = fx;
        k.at(1, 1) = fx;
        k.at(0, 2) = static_cast<double>(image_w) / 2.0;
        k.at(1, 2) = static_cast<double>(image_h) / 2.0;
        rig.intrinsics.push_back(k);

        const double th = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n_cameras);
        const double c = std::cos(th), s = std::sin(th);
        // camera axes in ego frame: +z optical forward, +x image right, +y image down
        Mat4 e = Mat4::identity();
        e.at(0, 0) = s;   e.at(0, 1) = 0;  e.at(0, 2) = c;
        e.at(1, 0) = -c;  e.at(1, 1) = 0;  e.at(1, 2) = s;
        e.at(2, 0) = 0;   e.at(2, 1) = -1; e.at(2, 2) = 0;
        e.at(0, 3) = 0.3 * c;
        e.at(1, 3) = 0.3 * s;
        e.at(2, 3) = mount_height;
        rig.extrinsics.push_back(e);
    }
    rig.validate();
    return rig;
}

namespace {

struct Box {
    double cx, cy, cz, yaw, hl, hw, hh;
    std::array<float, 3> color;
};

// Slab test in the box frame; returns entry distance and hit-face axis.
bool ray_box(const Vec3& origin, const Vec3& dir, const Box& b, double& t_hit, int& axis_hit) {
    const double c = std::cos(-b.yaw), s = std::sin(-b.yaw);
    const double ox = origin.x - b.cx, oy = origin.y - b.cy, oz = origin.z - b.cz;
    const double lox = c * ox - s * oy, loy = s * ox + c * oy, loz = oz;
    const double ldx = c * dir.x - s * dir.y, ldy = s * dir.x + c * dir.y, ldz = dir.z;
    const double lo[3] = {lox, loy, loz};
    const double ld[3] = {ldx, ldy, ldz};
    const double half[3] = {b.hl, b.hw, b.hh};
    double t_near = -1e30, t_far = 1e30;
    int near_axis = -1;
    for (int i = 0; i < 3; ++i) {
        if (std::fabs(ld[i]) < 1e-12) {
            if (std::fabs(lo[i]) > half[i]) return false;
            continue;
        }
        double t0 = (-half[i] - lo[i]) / ld[i];
        double t1 = (half[i] - lo[i]) / ld[i];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > t_near) {
            t_near = t0;
            near_axis = i;
        }
        t_far = std::min(t_far, t1);
        if (t_near > t_far) return false;
    }
    if (t_near < 1e-6) return false;  // behind or inside
    t_hit = t_near;
    axis_hit = near_axis;
    return true;
}

}  // namespace

Tensor render_cameras(const SimResult& sim, const SceneScript& script, const CameraRig& rig,
                      const SequenceSpec& seq) {
    seq.validate();
    rig.validate();
    const int64_t T = seq.input_frames(), Nc = rig.n_cameras();
    const int64_t H = rig.image_h, W = rig.image_w;
    std::vector<float> img(static_cast<size_t>(T * Nc * 3 * H * W), 0.0f);

    const float ground[3] = {0.45f, 0.45f, 0.45f};
    const float sky[3] = {0.62f, 0.72f, 0.85f};
    const float face_shade[3] = {0.85f, 0.70f, 1.0f};

    for (int64_t f = 0; f < T; ++f) {
        std::vector<Box> boxes;
        for (size_t a = 0; a < script.agents.size(); ++a) {
            const AgentState& st = sim.agents[static_cast<size_t>(f)][a];
            if (!st.present) continue;
            const AgentSpec& sp = script.agents[a];
            boxes.push_back({st.x, st.y, sp.height / 2, st.yaw, sp.length / 2, sp.width / 2,
                             sp.height / 2, sp.color});
        }
        const Mat4 world_from_ego = sim.ego[static_cast<size_t>(f)].to_matrix();
        for (int64_t ci = 0; ci < Nc; ++ci) {
            const Mat4 world_from_cam = world_from_ego.mul(rig.extrinsics[static_cast<size_t>(ci)]);
            const Mat3 rot = world_from_cam.rotation();
            const Vec3 origin = world_from_cam.translation();
            const Mat3 kinv = rig.intrinsics[static_cast<size_t>(ci)].inverse();
            for (int64_t v = 0; v < H; ++v) {
                for (int64_t u = 0; u < W; ++u) {
                    const Vec3 dir_cam = kinv.apply({static_cast<double>(u) + 0.5,
                                                     static_cast<double>(v) + 0.5, 1.0});
                    const Vec3 dir = rot.apply(dir_cam);
                    float px[3];
                    if (dir.z < -1e-9) {
                        std::copy(ground, ground + 3, px);
                    } else {
                        std::copy(sky, sky + 3, px);
                    }
                    double best_t = dir.z < -1e-9 ? -origin.z / dir.z : 1e30;
                    for (const Box& b : boxes) {
                        double t;
                        int axis;
                        if (ray_box(origin, dir, b, t, axis) && t < best_t) {
                            best_t = t;
                            const float shade = face_shade[axis];
                            for (int ch = 0; ch < 3; ++ch) px[ch] = b.color[static_cast<size_t>(ch)] * shade;
                        }
                    }
                    for (int64_t ch = 0; ch < 3; ++ch) {
                        img[static_cast<size_t>((((f * Nc + ci) * 3 + ch) * H + v) * W + u)] = px[ch];
                    }
                }
            }
        }
    }
    return Tensor({T, Nc, 3, H, W}, std::move(img));
}

Clip make_clip(const SceneScript& script, const CameraRig& rig, const BEVGridSpec& grid,
               const SequenceSpec& seq) {
    if (script.duration < seq.required_frames()) {
        throw ConfigError("script duration " + std::to_string(script.duration) + " < required " +
                          std::to_string(seq.required_frames()));
    }
    SimResult sim = simulate(script);
    Clip clip;
    clip.images = render_cameras(sim, script, rig, seq);
    clip.trajectory.poses.assign(sim.ego.begin(), sim.ego.begin() + seq.input_frames());
    clip.gt = rasterize_gt(sim, script, grid, seq);
    clip.n_agents = static_cast<int64_t>(script.agents.size());
    return clip;
}

// ---- random scripts ---------------------------------------------------------

bool script_is_valid(const SceneScript& script, const BEVGridSpec& grid, const SequenceSpec& seq) {
    if (script.duration < seq.required_frames()) return false;
    SimResult sim = simulate(script);
    auto fps = output_footprints(sim, script, grid, seq);
    const int64_t H = grid.rows(), W = grid.cols();
    const size_t n_agents = script.agents.size();

    // owner maps per output frame (later agents overwrite)
    std::vector<std::vector<int32_t>> owner(static_cast<size_t>(seq.t_f),
                                            std::vector<int32_t>(static_cast<size_t>(H * W), 0));
    for (int64_t k = 0; k < seq.t_f; ++k) {
        for (size_t a = 0; a < n_agents; ++a) {
            for (int64_t cell : fps[static_cast<size_t>(k)][a].cells) {
                owner[static_cast<size_t>(k)][static_cast<size_t>(cell)] = static_cast<int32_t>(a) + 1;
            }
        }
    }

    std::vector<int64_t> first_visible(n_agents, -1);
    for (size_t a = 0; a < n_agents; ++a) {
        for (int64_t k = 0; k < seq.t_f; ++k) {
            if (fps[static_cast<size_t>(k)][a].visible) {
                first_visible[a] = k;
                break;
            }
        }
    }

    auto rounded_in_grid = [&](double rc, double cc, int64_t& r, int64_t& c) {
        // stay away from rounding ties so float32 flow arithmetic is stable
        const double fr = rc - std::floor(rc), fc = cc - std::floor(cc);
        if (std::fabs(fr - 0.5) < 1e-3 || std::fabs(fc - 0.5) < 1e-3) return false;
        r = round_half_down(static_cast<float>(rc));
        c = round_half_down(static_cast<float>(cc));
        return r >= 0 && r < H && c >= 0 && c < W;
    };

    for (int64_t k = 0; k < seq.t_f; ++k) {
        for (size_t a = 0; a < n_agents; ++a) {
            const Footprint& fp = fps[static_cast<size_t>(k)][a];
            if (!fp.visible) continue;
            if (first_visible[a] == k) {
                // fresh component: own center cell must not inherit an old ID
                if (k > 0) {
                    int64_t r, c;
                    if (rounded_in_grid(fp.rc, fp.cc, r, c) &&
                        owner[static_cast<size_t>(k - 1)][static_cast<size_t>(r * W + c)] != 0) {
                        return false;
                    }
                }
                // fresh footprints must be isolated: own cells plus a one-cell
                // halo may contain only this agent or background
                for (int64_t cell : fp.cells) {
                    const int64_t r = cell / W, c = cell % W;
                    for (int64_t dr = -1; dr <= 1; ++dr) {
                        for (int64_t dc = -1; dc <= 1; ++dc) {
                            const int64_t nr = r + dr, nc = c + dc;
                            if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
                            const int32_t o =
                                owner[static_cast<size_t>(k)][static_cast<size_t>(nr * W + nc)];
                            if (o != 0 && o != static_cast<int32_t>(a) + 1) return false;
                        }
                    }
                }
            } else {
                const Footprint& prev = fps[static_cast<size_t>(k - 1)][a];
                if (!prev.visible) return false;  // visibility gap
                int64_t r, c;
                if (!rounded_in_grid(prev.rc, prev.cc, r, c)) return false;
                if (owner[static_cast<size_t>(k - 1)][static_cast<size_t>(r * W + c)] !=
                    static_cast<int32_t>(a) + 1) {
                    return false;  // center overwritten by a later agent
                }
            }
        }
    }
    return true;
}

SceneScript random_script(Rng& rng, const SceneGenConfig& cfg, const BEVGridSpec& grid,
                          const SequenceSpec& seq) {
    const double extent_x = (grid.x_max - grid.x_min) / 2.0 * cfg.spawn_radius_frac;
    const double extent_y = (grid.y_max - grid.y_min) / 2.0 * cfg.spawn_radius_frac;
    const std::array<std::array<float, 3>, 6> palette = {{{0.85f, 0.15f, 0.15f},
                                                          {0.15f, 0.55f, 0.85f},
                                                          {0.95f, 0.75f, 0.10f},
                                                          {0.20f, 0.70f, 0.30f},
                                                          {0.70f, 0.25f, 0.75f},
                                                          {0.95f, 0.45f, 0.15f}}};
    for (int attempt = 0; attempt < 200; ++attempt) {
        SceneScript s;
        s.hz = seq.hz;
        s.duration = seq.required_frames();
        const int n = uniform_int(rng, static_cast<int>(cfg.n_agents_min),
                                  static_cast<int>(cfg.n_agents_max));
        for (int a = 0; a < n; ++a) {
            AgentSpec sp;
            for (int tries = 0; tries < 50; ++tries) {
                sp.x = uniform(rng, static_cast<float>(-extent_x), static_cast<float>(extent_x));
                sp.y = uniform(rng, static_cast<float>(-extent_y), static_cast<float>(extent_y));
                if (std::hypot(sp.x, sp.y) >= cfg.spawn_radius_min) break;
            }
            sp.yaw = uniform(rng, -static_cast<float>(M_PI), static_cast<float>(M_PI));
            sp.length = uniform(rng, static_cast<float>(cfg.agent_length_min),
                                static_cast<float>(cfg.agent_length_max));
            sp.width = uniform(rng, static_cast<float>(cfg.agent_width_min),
                               static_cast<float>(cfg.agent_width_max));
            const double speed = uniform(rng, 0.0f, static_cast<float>(cfg.speed_max));
            const double heading = uniform(rng, -static_cast<float>(M_PI), static_cast<float>(M_PI));
            sp.vx = speed * std::cos(heading);
            sp.vy = speed * std::sin(heading);
            sp.yaw_rate = uniform(rng, -static_cast<float>(cfg.yaw_rate_max),
                                  static_cast<float>(cfg.yaw_rate_max));
            sp.color = palette[static_cast<size_t>(a) % palette.size()];
            s.agents.push_back(sp);
        }
        EgoMotionSegment ego;
        ego.n_frames = s.duration;
        ego.v = uniform(rng, 0.0f, static_cast<float>(cfg.ego_speed_max));
        ego.yaw_rate = uniform(rng, -0.1f, 0.1f);
        s.ego_motion.push_back(ego);
        if (script_is_valid(s, grid, seq)) return s;
    }
    throw Error("random_script: no valid scene after 200 attempts");
}

// ---- array files ------------------------------------------------------------

namespace {

constexpr char kArrayMagic[8] = {'B', 'I', 'F', 'D', '0', '0', '0', '1'};

void write_array(const std::string& path, const Shape& shape, const void* data, uint32_t dtype,
                 size_t elem_size) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open array file for writing: " + path);
    f.write(kArrayMagic, 8);
    const uint32_t rank = static_cast<uint32_t>(shape.size());
    f.write(reinterpret_cast<const char*>(&dtype), 4);
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int64_t d : shape) {
        const uint32_t dim = static_cast<uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&dim), 4);
    }
    f.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(static_cast<size_t>(numel_of(shape)) * elem_size));
    if (!f) throw FormatError("array write failed: " + path);
}

Shape read_array_header(std::ifstream& f, const std::string& path, uint32_t expect_dtype) {
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kArrayMagic, 8) != 0) {
        throw FormatError("bad array magic at byte 0 in " + path);
    }
    uint32_t dtype = 0, rank = 0;
    f.read(reinterpret_cast<char*>(&dtype), 4);
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f) throw FormatError("truncated array header at byte 8 in " + path);
    if (dtype != expect_dtype) {
        throw FormatError("array dtype " + std::to_string(dtype) + " != expected " +
                          std::to_string(expect_dtype) + " in " + path);
    }
    if (rank == 0 || rank > 8) throw FormatError("bad array rank in " + path);
    Shape shape(rank);
    for (auto& d : shape) {
        uint32_t dim = 0;
        f.read(reinterpret_cast<char*>(&dim), 4);
        if (!f || dim == 0) throw FormatError("bad array dims in " + path);
        d = dim;
    }
    return shape;
}

template <typename T>
std::pair<Shape, std::vector<T>> read_array(const std::string& path, uint32_t dtype) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open array file: " + path);
    Shape shape = read_array_header(f, path, dtype);
    const int64_t n = numel_of(shape);
    std::vector<T> data(static_cast<size_t>(n));
    const std::streamsize want = static_cast<std::streamsize>(static_cast<size_t>(n) * sizeof(T));
    f.read(reinterpret_cast<char*>(data.data()), want);
    if (f.gcount() != want) {
        const int64_t off = 16 + static_cast<int64_t>(shape.size()) * 4 + f.gcount();
        throw FormatError("truncated array payload at byte " + std::to_string(off) + " in " + path);
    }
    return {shape, std::move(data)};
}

}  // namespace

void write_array_f32(const std::string& path, const Shape& shape, const std::vector<float>& data) {
    if (numel_of(shape) != static_cast<int64_t>(data.size())) throw ShapeError("write_array_f32: size mismatch");
    write_array(path, shape, data.data(), 0, sizeof(float));
}

void write_array_i32(const std::string& path, const Shape& shape, const std::vector<int32_t>& data) {
    if (numel_of(shape) != static_cast<int64_t>(data.size())) throw ShapeError("write_array_i32: size mismatch");
    write_array(path, shape, data.data(), 1, sizeof(int32_t));
}

std::pair<Shape, std::vector<float>> read_array_f32(const std::string& path) {
    return read_array<float>(path, 0);
}

std::pair<Shape, std::vector<int32_t>> read_array_i32(const std::string& path) {
    return read_array<int32_t>(path, 1);
}

// ---- dataset ----------------------------------------------------------------

namespace {

std::string clip_dir(const std::string& root, int64_t index) {
    std::ostringstream os;
    os << root << "/clips/clip_" << std::setw(5) << std::setfill('0') << index;
    return os.str();
}

}  // namespace

void write_dataset(const std::string& root, const DatasetInfo& info, const std::vector<Clip>& clips) {
    fs::create_directories(root + "/clips");
    {
        std::ofstream m(root + "/manifest.txt");
        if (!m) throw FormatError("cannot write dataset manifest in " + root);
        m << std::setprecision(17);
        m << "BIFDSET1\n";
        m << "n_clips " << info.n_clips << "\n";
        m << "seq " << info.seq.t_p << " " << info.seq.t_f << " " << info.seq.hz << " "
          << (info.seq.t0_is_present ? 1 : 0) << "\n";
        m << "grid " << info.grid.x_min << " " << info.grid.x_max << " " << info.grid.y_min << " "
          << info.grid.y_max << " " << info.grid.resolution << "\n";
        m << "depth " << info.bins.d_min << " " << info.bins.d_max << " " << info.bins.n_bins << "\n";
        m << "image " << info.rig.image_h << " " << info.rig.image_w << "\n";
        m << "cameras " << info.rig.n_cameras() << "\n";
        for (int64_t ci = 0; ci < info.rig.n_cameras(); ++ci) {
            m << "cam";
            const Mat3& k = info.rig.intrinsics[static_cast<size_t>(ci)];
            for (double v : k.m) m << " " << v;
            const Mat4& e = info.rig.extrinsics[static_cast<size_t>(ci)];
            for (double v : e.m) m << " " << v;
            m << "\n";
        }
        m << "norm_mean " << info.norm_mean[0] << " " << info.norm_mean[1] << " " << info.norm_mean[2]
          << "\n";
        m << "norm_std " << info.norm_std[0] << " " << info.norm_std[1] << " " << info.norm_std[2]
          << "\n";
        m << "split train " << info.train.begin << " " << info.train.end << "\n";
        m << "split val " << info.val.begin << " " << info.val.end << "\n";
        m << "split test " << info.test.begin << " " << info.test.end << "\n";
    }
    for (size_t i = 0; i < clips.size(); ++i) {
        const Clip& clip = clips[i];
        const std::string dir = clip_dir(root, static_cast<int64_t>(i));
        fs::create_directories(dir);
        write_array_f32(dir + "/images.bin", clip.images.shape(), clip.images.data());

        std::vector<float> ego;
        for (const EgoPose& p : clip.trajectory.poses) {
            for (double v : {p.x, p.y, p.z, p.qw, p.qx, p.qy, p.qz}) ego.push_back(static_cast<float>(v));
        }
        write_array_f32(dir + "/ego.bin", {static_cast<int64_t>(clip.trajectory.poses.size()), 7}, ego);

        const InstanceVolume& ids = clip.gt.ids;
        std::vector<int32_t> seg_labels(static_cast<size_t>(ids.t_len * ids.h * ids.w));
        for (size_t j = 0; j < seg_labels.size(); ++j) seg_labels[j] = ids.ids[j] > 0 ? 1 : 0;
        write_array_i32(dir + "/seg.bin", {ids.t_len, ids.h, ids.w}, seg_labels);
        write_array_i32(dir + "/ids.bin", {ids.t_len, ids.h, ids.w}, ids.ids);
        write_array_f32(dir + "/flow.bin", clip.gt.flow.shape(), clip.gt.flow.data());

        std::ofstream meta(dir + "/meta.txt");
        meta << "n_agents " << clip.n_agents << "\n";
    }
}

DatasetInfo read_dataset_info(const std::string& root) {
    std::ifstream m(root + "/manifest.txt");
    if (!m) throw FormatError("cannot open dataset manifest: " + root + "/manifest.txt");
    std::string version;
    std::getline(m, version);
    if (version != "BIFDSET1") throw FormatError("bad dataset manifest version '" + version + "'");
    DatasetInfo info;
    std::string line;
    while (std::getline(m, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "n_clips") ls >> info.n_clips;
        else if (key == "seq") {
            int t0 = 1;
            ls >> info.seq.t_p >> info.seq.t_f >> info.seq.hz >> t0;
            info.seq.t0_is_present = t0 != 0;
        } else if (key == "grid") {
            ls >> info.grid.x_min >> info.grid.x_max >> info.grid.y_min >> info.grid.y_max >>
                info.grid.resolution;
        } else if (key == "depth") {
            ls >> info.bins.d_min >> info.bins.d_max >> info.bins.n_bins;
        } else if (key == "image") {
            ls >> info.rig.image_h >> info.rig.image_w;
        } else if (key == "cam") {
            Mat3 k;
            for (double& v : k.m) ls >> v;
            Mat4 e;
            for (double& v : e.m) ls >> v;
            info.rig.intrinsics.push_back(k);
            info.rig.extrinsics.push_back(e);
        } else if (key == "norm_mean") {
            ls >> info.norm_mean[0] >> info.norm_mean[1] >> info.norm_mean[2];
        } else if (key == "norm_std") {
            ls >> info.norm_std[0] >> info.norm_std[1] >> info.norm_std[2];
        } else if (key == "split") {
            std::string name;
            SplitRange r;
            ls >> name >> r.begin >> r.end;
            if (name == "train") info.train = r;
            else if (name == "val") info.val = r;
            else if (name == "test") info.test = r;
        }
        if (!ls && !key.empty() && key != "cameras") {
            throw FormatError("bad manifest line: '" + line + "'");
        }
    }
    info.rig.validate();
    return info;
}

Clip read_clip(const std::string& root, const DatasetInfo& info, int64_t index) {
    if (index < 0 || index >= info.n_clips) {
        throw FormatError("clip index " + std::to_string(index) + " outside dataset of " +
                          std::to_string(info.n_clips));
    }
    const std::string dir = clip_dir(root, index);
    Clip clip;
    {
        auto [shape, data] = read_array_f32(dir + "/images.bin");
        const Shape expect = {info.seq.input_frames(), info.rig.n_cameras(), 3, info.rig.image_h,
                              info.rig.image_w};
        if (shape != expect) {
            throw FormatError("clip " + std::to_string(index) + " images shape " + shape_str(shape) +
                              " does not match manifest " + shape_str(expect));
        }
        clip.images = Tensor(shape, std::move(data));
    }
    {
        auto [shape, data] = read_array_f32(dir + "/ego.bin");
        if (shape.size() != 2 || shape[1] != 7) throw FormatError("bad ego array in " + dir);
        for (int64_t i = 0; i < shape[0]; ++i) {
            const float* p = data.data() + i * 7;
            clip.trajectory.poses.push_back({p[0], p[1], p[2], p[3], p[4], p[5], p[6]});
        }
    }
    {
        auto [shape, ids] = read_array_i32(dir + "/ids.bin");
        if (shape.size() != 3) throw FormatError("bad ids array in " + dir);
        clip.gt.ids = InstanceVolume(shape[0], shape[1], shape[2]);
        clip.gt.ids.ids = std::move(ids);
    }
    {
        auto [shape, labels] = read_array_i32(dir + "/seg.bin");
        if (shape.size() != 3) throw FormatError("bad seg array in " + dir);
        std::vector<float> onehot(static_cast<size_t>(shape[0] * 2 * shape[1] * shape[2]), 0.0f);
        const int64_t hw = shape[1] * shape[2];
        for (int64_t t = 0; t < shape[0]; ++t) {
            for (int64_t i = 0; i < hw; ++i) {
                const int cls = labels[static_cast<size_t>(t * hw + i)] > 0 ? 1 : 0;
                onehot[static_cast<size_t>((t * 2 + cls) * hw + i)] = 1.0f;
            }
        }
        clip.gt.seg_onehot = Tensor({shape[0], 2, shape[1], shape[2]}, std::move(onehot));
    }
    {
        auto [shape, data] = read_array_f32(dir + "/flow.bin");
        clip.gt.flow = Tensor(shape, std::move(data));
    }
    std::ifstream meta(dir + "/meta.txt");
    std::string key;
    if (meta >> key >> clip.n_agents && key != "n_agents") {
        throw FormatError("bad clip meta in " + dir);
    }
    return clip;
}

DatasetInfo generate_dataset(const std::string& root, const BEVGridSpec& grid,
                             const DepthBinSpec& bins, const SequenceSpec& seq,
                             const CameraRig& rig, const SceneGenConfig& gen, int64_t n_clips,
                             uint32_t seed, double train_frac, double val_frac) {
    if (n_clips < 1) throw ConfigError("n_clips must be positive");
    if (train_frac <= 0 || val_frac < 0 || train_frac + val_frac > 1.0 + 1e-9) {
        throw ConfigError("bad split fractions");
    }
    DatasetInfo info;
    info.grid = grid;
    info.bins = bins;
    info.seq = seq;
    info.rig = rig;
    info.n_clips = n_clips;
    const int64_t n_train =
        std::max<int64_t>(1, static_cast<int64_t>(std::llround(train_frac * static_cast<double>(n_clips))));
    const int64_t n_val = std::max<int64_t>(
        n_clips > n_train ? 1 : 0, static_cast<int64_t>(std::llround(val_frac * static_cast<double>(n_clips))));
    info.train = {0, n_train};
    info.val = {n_train, std::min(n_clips, n_train + n_val)};
    info.test = {info.val.end, n_clips};

    std::vector<Clip> clips;
    clips.reserve(static_cast<size_t>(n_clips));
    for (int64_t i = 0; i < n_clips; ++i) {
        Rng rng(seed * 1000003u + static_cast<uint32_t>(i) * 7919u + 17u);
        SceneScript script = random_script(rng, gen, grid, seq);
        clips.push_back(make_clip(script, rig, grid, seq));
    }

    // normalization stats from the train split
    double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
    int64_t count = 0;
    for (int64_t i = info.train.begin; i < info.train.end; ++i) {
        const Tensor& img = clips[static_cast<size_t>(i)].images;
        const int64_t per_ch = img.numel() / 3;
        const int64_t hw = img.dim(3) * img.dim(4);
        const int64_t frames = img.dim(0) * img.dim(1);
        for (int64_t fr = 0; fr < frames; ++fr) {
            for (int64_t ch = 0; ch < 3; ++ch) {
                const float* p = img.data().data() + (fr * 3 + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                    sum[ch] += p[j];
                    sq[ch] += static_cast<double>(p[j]) * p[j];
                }
            }
        }
        count += per_ch;
    }
    for (int ch = 0; ch < 3; ++ch) {
        const double mean = sum[ch] / static_cast<double>(count);
        const double var = sq[ch] / static_cast<double>(count) - mean * mean;
        info.norm_mean[static_cast<size_t>(ch)] = mean;
        info.norm_std[static_cast<size_t>(ch)] = std::sqrt(std::max(var, 1e-6));
    }

    write_dataset(root, info, clips);
    return info;
}

}  // namespace bevflow
