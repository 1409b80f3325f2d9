#pragma once

#include <array>
#include <vector>

#include "bevflow/tensor.hpp"

namespace bevflow {

// Small fixed-size linear algebra in double; tensors stay float32.
struct Vec3 {
    double x = 0, y = 0, z = 0;
};

struct Mat3 {
    std::array<double, 9> m{};  // row-major
    double& at(int r, int c) { return m[static_cast<size_t>(r * 3 + c)]; }
    double at(int r, int c) const { return m[static_cast<size_t>(r * 3 + c)]; }
    static Mat3 identity();
    Mat3 inverse() const;  // throws CalibrationError when singular
    Vec3 apply(const Vec3& v) const;
    double det() const;
};

struct Mat4 {
    std::array<double, 16> m{};
    double& at(int r, int c) { return m[static_cast<size_t>(r * 4 + c)]; }
    double at(int r, int c) const { return m[static_cast<size_t>(r * 4 + c)]; }
    static Mat4 identity();
    Mat4 mul(const Mat4& rhs) const;
    Vec3 transform_point(const Vec3& p) const;
    Mat4 rigid_inverse() const;  // assumes orthonormal rotation block
    Mat3 rotation() const;
    Vec3 translation() const;
};

struct CameraRig {
    std::vector<Mat3> intrinsics;   // pixels
    std::vector<Mat4> extrinsics;   // camera-to-ego, meters
    int64_t image_h = 0, image_w = 0;

    int64_t n_cameras() const { return static_cast<int64_t>(intrinsics.size()); }
    void validate() const;  // throws CalibrationError on bad calibration
};

struct EgoPose {
    double x = 0, y = 0, z = 0;
    double qw = 1, qx = 0, qy = 0, qz = 0;

    Mat4 to_matrix() const;  // world-from-ego
};

struct EgoTrajectory {
    std::vector<EgoPose> poses;  // oldest first; last entry is the present frame
};

struct BEVGridSpec {
    double x_min = -50, x_max = 50;
    double y_min = -50, y_max = 50;
    double resolution = 0.5;

    int64_t rows() const { return static_cast<int64_t>(std::llround((x_max - x_min) / resolution)); }
    int64_t cols() const { return static_cast<int64_t>(std::llround((y_max - y_min) / resolution)); }

    // +x (forward) maps to decreasing row; ego origin lands in cell (rows/2, cols/2).
    // Continuous cell coordinates put cell centers on integers.
    double row_coord(double x) const { return (x_max - x) / resolution - 0.5; }
    double col_coord(double y) const { return (y - y_min) / resolution - 0.5; }
    int64_t row_of(double x) const { return static_cast<int64_t>(std::floor((x_max - x) / resolution)); }
    int64_t col_of(double y) const { return static_cast<int64_t>(std::floor((y - y_min) / resolution)); }
    double x_of_row(double row) const { return x_max - (row + 0.5) * resolution; }
    double y_of_col(double col) const { return y_min + (col + 0.5) * resolution; }
    bool in_bounds(int64_t r, int64_t c) const {
        return r >= 0 && r < rows() && c >= 0 && c < cols();
    }
};

struct DepthBinSpec {
    double d_min = 2.0, d_max = 50.0;
    int64_t n_bins = 48;

    double bin_width() const { return (d_max - d_min) / static_cast<double>(n_bins); }
    double center(int64_t i) const { return d_min + (static_cast<double>(i) + 0.5) * bin_width(); }
};

// Camera-frame 3D points for every (depth bin, feature cell) of one camera.
struct Frustum {
    int64_t n_depth = 0, feat_h = 0, feat_w = 0;
    std::vector<Vec3> points;  // indexed [d * feat_h * feat_w + i * feat_w + j]

    const Vec3& at(int64_t d, int64_t i, int64_t j) const {
        return points[static_cast<size_t>((d * feat_h + i) * feat_w + j)];
    }
};

std::vector<Frustum> build_frustum(const CameraRig& rig, const DepthBinSpec& bins, int64_t feat_h,
                                   int64_t feat_w);

// out[d,c,i,j] = softmax_d(depth_logits)[d,i,j] * feat[c,i,j]
Tensor lift_features(const Tensor& feat, const Tensor& depth_logits);

// Target BEV cell per frustum point; cells out of grid (or closer than d_min)
// map to rows()*cols(), a drop bucket sliced away by splat.
std::vector<int64_t> compute_splat_indices(const Frustum& frustum, const Mat4& ego_from_camera,
                                           const BEVGridSpec& grid, double d_min);

// Sum-pools lifted per-camera features into the shared BEV grid.
Tensor splat_to_bev(const std::vector<Tensor>& lifted, const std::vector<Frustum>& frusta,
                    const std::vector<Mat4>& ego_from_camera, const BEVGridSpec& grid, double d_min);
Tensor splat_with_indices(const std::vector<Tensor>& lifted,
                          const std::vector<std::vector<int64_t>>& indices, const BEVGridSpec& grid);

// present_from_t = inverse(world_from_present) * world_from_t
Mat4 relative_pose(const EgoPose& pose_t, const EgoPose& pose_present);

// Resamples a past BEV map into the present frame. The 3D relative pose is
// reduced to planar (x, y, yaw) before warping; samples outside the grid read
// zero; an identity transform returns the input bit-exactly.
Tensor warp_bev_features(const Tensor& past, const Mat4& present_from_past, const BEVGridSpec& grid);

}  // namespace bevflow
