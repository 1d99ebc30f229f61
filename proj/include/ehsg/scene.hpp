#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "ehsg/common.hpp"

namespace ehsg {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// ---------------------------------------------------------------------------
// Canonical-space Gaussians. Scales are stored in log space and opacities as
// logits so the optimizer is unconstrained; activation happens at render
// time. Quaternions are (w, x, y, z) and normalized on use.

struct GaussianCloud {
    std::vector<Vec3> means;
    std::vector<Vec3> raw_scales;
    std::vector<Vec4> rotations;
    std::vector<double> raw_opacities;
    std::vector<Vec3> colors;

    std::size_t count() const { return means.size(); }

    void validate() const {
        std::size_t n = means.size();
        if (raw_scales.size() != n || rotations.size() != n ||
            raw_opacities.size() != n || colors.size() != n)
            throw std::invalid_argument("GaussianCloud: attribute lengths differ");
        for (std::size_t i = 0; i < n; ++i) {
            if (!means[i].allFinite() || !raw_scales[i].allFinite() ||
                !rotations[i].allFinite() || !std::isfinite(raw_opacities[i]) ||
                !colors[i].allFinite())
                throw std::invalid_argument("GaussianCloud: non-finite attribute at index " +
                                            std::to_string(i));
            if (rotations[i].norm() == 0.0)
                throw std::invalid_argument("GaussianCloud: zero quaternion at index " +
                                            std::to_string(i));
            if (raw_scales[i].maxCoeff() > 700.0)
                throw std::invalid_argument(
                    "GaussianCloud: activated scale overflows at index " + std::to_string(i));
        }
    }

    void resize(std::size_t n) {
        means.resize(n, Vec3::Zero());
        raw_scales.resize(n, Vec3::Zero());
        rotations.resize(n, Vec4(1, 0, 0, 0));
        raw_opacities.resize(n, 0.0);
        colors.resize(n, Vec3::Zero());
    }
};

// ---------------------------------------------------------------------------
// Pinhole camera with a rigid world-to-camera transform.

struct Camera {
    int width = 128;
    int height = 128;
    double fx = 100.0, fy = 100.0;
    double cx = 64.0, cy = 64.0;
    Mat4 pose = Mat4::Identity();  // world -> camera
    double znear = 0.01;
    double zfar = 100.0;

    void validate() const {
        if (width <= 0 || height <= 0) throw std::invalid_argument("Camera: bad image size");
        if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("Camera: focal lengths must be > 0");
        if (!(znear > 0.0 && znear < zfar))
            throw std::invalid_argument("Camera: need 0 < znear < zfar");
        Mat3 r = pose.topLeftCorner<3, 3>();
        if ((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
            throw std::invalid_argument("Camera: pose rotation block not orthonormal");
    }

    Mat3 rotation() const { return pose.topLeftCorner<3, 3>(); }
    Vec3 translation() const { return pose.topRightCorner<3, 1>(); }

    Vec3 world_to_cam(const Vec3& p) const { return rotation() * p + translation(); }

    Vec3 cam_to_world(const Vec3& p) const {
        Mat3 r = rotation();
        return r.transpose() * (p - translation());
    }
};

// ---------------------------------------------------------------------------
// One training frame: RGB in [0,1], depth in world units (0 = invalid),
// tool mask (nonzero = excluded pixel), normalized timestamp.

struct FrameSample {
    Image<double> image;          // H x W x 3
    Image<double> depth;          // H x W
    Image<std::uint8_t> tool_mask;  // H x W, nonzero = tool
    double timestamp = 0.0;

    void validate() const {
        if (image.channels != 3 || depth.channels != 1 || tool_mask.channels != 1)
            throw std::invalid_argument("FrameSample: bad channel counts");
        if (image.width != depth.width || image.height != depth.height ||
            image.width != tool_mask.width || image.height != tool_mask.height)
            throw std::invalid_argument("FrameSample: image/depth/mask dimensions differ");
        if (!(timestamp >= 0.0 && timestamp <= 1.0))
            throw std::invalid_argument("FrameSample: timestamp outside [0,1]");
    }
};

// ---------------------------------------------------------------------------
// Geometry primitives

// Rotation matrix from a (w, x, y, z) quaternion; normalizes first.
inline Mat3 quat_to_rotation(const Vec4& q) {
    double n = q.norm();
    if (n == 0.0 || !std::isfinite(n))
        throw std::invalid_argument("quat_to_rotation: quaternion has zero or non-finite norm");
    double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// Sigma = R S S^T R^T with S = diag(exp(raw_scale)).
inline Mat3 covariance3d(const Vec3& raw_scale, const Vec4& quaternion) {
    Mat3 r = quat_to_rotation(quaternion);
    Vec3 s = raw_scale.array().exp();
    Mat3 m = r * s.asDiagonal();
    return m * m.transpose();
}

}  // namespace ehsg
