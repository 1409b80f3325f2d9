#include "bevflow/geometry.hpp"

#include <cmath>

namespace bevflow {

Mat3 Mat3::identity() {
    Mat3 r;
    r.at(0, 0) = r.at(1, 1) = r.at(2, 2) = 1.0;
    return r;
}

double Mat3::det() const {
    return at(0, 0) * (at(1, 1) * at(2, 2) - at(1, 2) * at(2, 1)) -
           at(0, 1) * (at(1, 0) * at(2, 2) - at(1, 2) * at(2, 0)) +
           at(0, 2) * (at(1, 0) * at(2, 1) - at(1, 1) * at(2, 0));
}

Mat3 Mat3::inverse() const {
    const double d = det();
    if (std::fabs(d) < 1e-12) throw CalibrationError("non-invertible 3x3 matrix (det ~ 0)");
    Mat3 r;
    r.at(0, 0) = (at(1, 1) * at(2, 2) - at(1, 2) * at(2, 1)) / d;
    r.at(0, 1) = (at(0, 2) * at(2, 1) - at(0, 1) * at(2, 2)) / d;
    r.at(0, 2) = (at(0, 1) * at(1, 2) - at(0, 2) * at(1, 1)) / d;
    r.at(1, 0) = (at(1, 2) * at(2, 0) - at(1, 0) * at(2, 2)) / d;
    r.at(1, 1) = (at(0, 0) * at(2, 2) - at(0, 2) * at(2, 0)) / d;
    r.at(1, 2) = (at(0, 2) * at(1, 0) - at(0, 0) * at(1, 2)) / d;
    r.at(2, 0) = (at(1, 0) * at(2, 1) - at(1, 1) * at(2, 0)) / d;
    r.at(2, 1) = (at(0, 1) * at(2, 0) - at(0, 0) * at(2, 1)) / d;
    r.at(2, 2) = (at(0, 0) * at(1, 1) - at(0, 1) * at(1, 0)) / d;
    return r;
}

Vec3 Mat3::apply(const Vec3& v) const {
    return {at(0, 0) * v.x + at(0, 1) * v.y + at(0, 2) * v.z,
            at(1, 0) * v.x + at(1, 1) * v.y + at(1, 2) * v.z,
            at(2, 0) * v.x + at(2, 1) * v.y + at(2, 2) * v.z};
}

Mat4 Mat4::identity() {
    Mat4 r;
    r.at(0, 0) = r.at(1, 1) = r.at(2, 2) = r.at(3, 3) = 1.0;
    return r;
}

Mat4 Mat4::mul(const Mat4& rhs) const {
    Mat4 r;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            double s = 0;
            for (int k = 0; k < 4; ++k) s += at(i, k) * rhs.at(k, j);
            r.at(i, j) = s;
        }
    }
    return r;
}

Vec3 Mat4::transform_point(const Vec3& p) const {
    return {at(0, 0) * p.x + at(0, 1) * p.y + at(0, 2) * p.z + at(0, 3),
            at(1, 0) * p.x + at(1, 1) * p.y + at(1, 2) * p.z + at(1, 3),
            at(2, 0) * p.x + at(2, 1) * p.y + at(2, 2) * p.z + at(2, 3)};
}

Mat3 Mat4::rotation() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.at(i, j) = at(i, j);
    return r;
}

Vec3 Mat4::translation() const { return {at(0, 3), at(1, 3), at(2, 3)}; }

Mat4 Mat4::rigid_inverse() const {
    Mat4 r = Mat4::identity();
    // R^T
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.at(i, j) = at(j, i);
    const Vec3 t = translation();
    r.at(0, 3) = -(r.at(0, 0) * t.x + r.at(0, 1) * t.y + r.at(0, 2) * t.z);
    r.at(1, 3) = -(r.at(1, 0) * t.x + r.at(1, 1) * t.y + r.at(1, 2) * t.z);
    r.at(2, 3) = -(r.at(2, 0) * t.x + r.at(2, 1) * t.y + r.at(2, 2) * t.z);
    return r;
}

void CameraRig::validate() const {
    if (intrinsics.size() != extrinsics.size()) {
        throw CalibrationError("rig: intrinsic/extrinsic count mismatch");
    }
    if (image_h <= 0 || image_w <= 0) throw CalibrationError("rig: bad image size");
    for (size_t ci = 0; ci < intrinsics.size(); ++ci) {
        const Mat3& k = intrinsics[ci];
        if (k.at(0, 0) <= 0 || k.at(1, 1) <= 0) {
            throw CalibrationError("camera " + std::to_string(ci) + ": non-positive focal length");
        }
        const double cx = k.at(0, 2), cy = k.at(1, 2);
        if (cx < 0 || cx > static_cast<double>(image_w) || cy < 0 || cy > static_cast<double>(image_h)) {
            throw CalibrationError("camera " + std::to_string(ci) + ": principal point outside image");
        }
        const Mat3 r = extrinsics[ci].rotation();
        // orthonormality: R R^T == I
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                double dot = 0;
                for (int l = 0; l < 3; ++l) dot += r.at(i, l) * r.at(j, l);
                const double expect = (i == j) ? 1.0 : 0.0;
                if (std::fabs(dot - expect) > 1e-5) {
                    throw CalibrationError("camera " + std::to_string(ci) +
                                           ": extrinsic rotation not orthonormal");
                }
            }
        }
        if (std::fabs(r.det() - 1.0) > 1e-5) {
            throw CalibrationError("camera " + std::to_string(ci) + ": extrinsic rotation det != +1");
        }
    }
}

Mat4 EgoPose::to_matrix() const {
    const double n = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
    if (std::fabs(n - 1.0) > 1e-3) {
        throw CalibrationError("ego pose quaternion norm " + std::to_string(n) + " not unit");
    }
    const double w = qw / n, x = qx / n, y = qy / n, z = qz / n;
    Mat4 t = Mat4::identity();
    t.at(0, 0) = 1 - 2 * (y * y + z * z);
    t.at(0, 1) = 2 * (x * y - w * z);
    t.at(0, 2) = 2 * (x * z + w * y);
    t.at(1, 0) = 2 * (x * y + w * z);
    t.at(1, 1) = 1 - 2 * (x * x + z * z);
    t.at(1, 2) = 2 * (y * z - w * x);
    t.at(2, 0) = 2 * (x * z - w * y);
    t.at(2, 1) = 2 * (y * z + w * x);
    t.at(2, 2) = 1 - 2 * (x * x + y * y);
    t.at(0, 3) = this->x;
    t.at(1, 3) = this->y;
    t.at(2, 3) = this->z;
    return t;
}

std::vector<Frustum> build_frustum(const CameraRig& rig, const DepthBinSpec& bins, int64_t feat_h,
                                   int64_t feat_w) {
    rig.validate();
    if (feat_h <= 0 || feat_w <= 0 || rig.image_h % feat_h != 0 || rig.image_w % feat_w != 0) {
        throw ConfigError("feature size " + std::to_string(feat_h) + "x" + std::to_string(feat_w) +
                          " does not divide image " + std::to_string(rig.image_h) + "x" +
                          std::to_string(rig.image_w));
    }
    const double stride_y = static_cast<double>(rig.image_h) / static_cast<double>(feat_h);
    const double stride_x = static_cast<double>(rig.image_w) / static_cast<double>(feat_w);
    std::vector<Frustum> out;
    out.reserve(rig.intrinsics.size());
    for (size_t ci = 0; ci < rig.intrinsics.size(); ++ci) {
        const Mat3 kinv = rig.intrinsics[ci].inverse();
        Frustum f;
        f.n_depth = bins.n_bins;
        f.feat_h = feat_h;
        f.feat_w = feat_w;
        f.points.resize(static_cast<size_t>(bins.n_bins * feat_h * feat_w));
        for (int64_t d = 0; d < bins.n_bins; ++d) {
            const double depth = bins.center(d);
            for (int64_t i = 0; i < feat_h; ++i) {
                const double v = (static_cast<double>(i) + 0.5) * stride_y;
                for (int64_t j = 0; j < feat_w; ++j) {
                    const double u = (static_cast<double>(j) + 0.5) * stride_x;
                    const Vec3 ray = kinv.apply({u, v, 1.0});
                    f.points[static_cast<size_t>((d * feat_h + i) * feat_w + j)] = {
                        depth * ray.x, depth * ray.y, depth * ray.z};
                }
            }
        }
        out.push_back(std::move(f));
    }
    return out;
}

Tensor lift_features(const Tensor& feat, const Tensor& depth_logits) {
    if (feat.rank() != 3 || depth_logits.rank() != 3) {
        throw ShapeError("lift_features expects (C_F,H,W) and (C_D,H,W)");
    }
    if (feat.dim(1) != depth_logits.dim(1) || feat.dim(2) != depth_logits.dim(2)) {
        throw ShapeError("lift_features spatial mismatch: " + shape_str(feat.shape()) + " vs " +
                         shape_str(depth_logits.shape()));
    }
    Tensor probs = softmax(depth_logits, 0);
    return depth_outer(probs, feat);
}

std::vector<int64_t> compute_splat_indices(const Frustum& frustum, const Mat4& ego_from_camera,
                                           const BEVGridSpec& grid, double d_min) {
    const int64_t n = frustum.n_depth * frustum.feat_h * frustum.feat_w;
    const int64_t drop = grid.rows() * grid.cols();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t p = 0; p < n; ++p) {
        const Vec3& cam_pt = frustum.points[static_cast<size_t>(p)];
        if (cam_pt.z < d_min) {
            idx[static_cast<size_t>(p)] = drop;
            continue;
        }
        const Vec3 ego_pt = ego_from_camera.transform_point(cam_pt);
        const int64_t r = grid.row_of(ego_pt.x);
        const int64_t c = grid.col_of(ego_pt.y);
        idx[static_cast<size_t>(p)] = grid.in_bounds(r, c) ? r * grid.cols() + c : drop;
    }
    return idx;
}

Tensor splat_with_indices(const std::vector<Tensor>& lifted,
                          const std::vector<std::vector<int64_t>>& indices,
                          const BEVGridSpec& grid) {
    if (lifted.empty() || lifted.size() != indices.size()) {
        throw ShapeError("splat: per-camera input count mismatch");
    }
    const int64_t cells = grid.rows() * grid.cols();
    const int64_t c_feat = lifted[0].dim(1);
    Tensor acc;
    for (size_t ci = 0; ci < lifted.size(); ++ci) {
        const Tensor& l = lifted[ci];
        if (l.rank() != 4 || l.dim(1) != c_feat) {
            throw ShapeError("splat: lifted tensor " + shape_str(l.shape()) + " invalid");
        }
        const int64_t pts = l.dim(0) * l.dim(2) * l.dim(3);
        if (static_cast<int64_t>(indices[ci].size()) != pts) {
            throw ShapeError("splat: index count mismatch for camera " + std::to_string(ci));
        }
        // (C_D,C_F,H,W) -> (C_D,H,W,C_F) -> rows of features per frustum point
        Tensor rows = reshape(permute(l, {0, 2, 3, 1}), {pts, c_feat});
        Tensor grid_rows = scatter_add_rows(rows, indices[ci], cells + 1);
        acc = acc.defined() ? add(acc, grid_rows) : grid_rows;
    }
    Tensor valid = slice(acc, 0, 0, cells);
    return permute(reshape(valid, {grid.rows(), grid.cols(), c_feat}), {2, 0, 1});
}

Tensor splat_to_bev(const std::vector<Tensor>& lifted, const std::vector<Frustum>& frusta,
                    const std::vector<Mat4>& ego_from_camera, const BEVGridSpec& grid,
                    double d_min) {
    if (lifted.size() != frusta.size() || lifted.size() != ego_from_camera.size()) {
        throw ShapeError("splat_to_bev: per-camera argument count mismatch");
    }
    std::vector<std::vector<int64_t>> indices;
    indices.reserve(frusta.size());
    for (size_t ci = 0; ci < frusta.size(); ++ci) {
        indices.push_back(compute_splat_indices(frusta[ci], ego_from_camera[ci], grid, d_min));
    }
    return splat_with_indices(lifted, indices, grid);
}

Mat4 relative_pose(const EgoPose& pose_t, const EgoPose& pose_present) {
    return pose_present.to_matrix().rigid_inverse().mul(pose_t.to_matrix());
}

Tensor warp_bev_features(const Tensor& past, const Mat4& present_from_past,
                         const BEVGridSpec& grid) {
    if (past.rank() != 3) throw ShapeError("warp_bev_features expects (C,H,W)");
    const int64_t H = past.dim(1), W = past.dim(2);
    if (H != grid.rows() || W != grid.cols()) {
        throw ShapeError("warp_bev_features: map " + shape_str(past.shape()) +
                         " does not match grid " + std::to_string(grid.rows()) + "x" +
                         std::to_string(grid.cols()));
    }
    // Planar reduction: keep x, y, yaw of the relative motion.
    const double yaw = std::atan2(present_from_past.at(1, 0), present_from_past.at(0, 0));
    const double tx = present_from_past.at(0, 3);
    const double ty = present_from_past.at(1, 3);
    // past_from_present in the plane
    const double c = std::cos(-yaw), s = std::sin(-yaw);
    const double bx = -(c * tx - s * ty);
    const double by = -(s * tx + c * ty);

    std::vector<float> rows_f(static_cast<size_t>(H * W)), cols_f(static_cast<size_t>(H * W));
    for (int64_t r = 0; r < H; ++r) {
        const double x_p = grid.x_of_row(static_cast<double>(r));
        for (int64_t cc = 0; cc < W; ++cc) {
            const double y_p = grid.y_of_col(static_cast<double>(cc));
            const double x_q = c * x_p - s * y_p + bx;
            const double y_q = s * x_p + c * y_p + by;
            double rq = grid.row_coord(x_q);
            double cq = grid.col_coord(y_q);
            // snap near-integer coordinates so identity and whole-cell shifts are exact
            if (std::fabs(rq - std::round(rq)) < 1e-6) rq = std::round(rq);
            if (std::fabs(cq - std::round(cq)) < 1e-6) cq = std::round(cq);
            rows_f[static_cast<size_t>(r * W + cc)] = static_cast<float>(rq);
            cols_f[static_cast<size_t>(r * W + cc)] = static_cast<float>(cq);
        }
    }
    return bilinear_sample(past, rows_f, cols_f, H, W);
}

}  // namespace bevflow
