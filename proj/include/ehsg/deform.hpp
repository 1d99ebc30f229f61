#pragma once

#include <span>
#include <string>
#include <vector>

#include "ehsg/raster.hpp"
#include "ehsg/scene.hpp"

namespace ehsg {

// ---------------------------------------------------------------------------
// Per-Gaussian temporal trajectories built from Gaussian basis functions.
// Each attribute group (position / rotation / scale / opacity) owns one set
// of basis centers and widths per Gaussian, shared across the group's
// channels; weights are per channel.

struct AttributeField {
    std::size_t count = 0;
    int channels = 0;
    int basis = 0;
    std::vector<double> weights;  // count * channels * basis
    std::vector<double> centers;  // count * basis
    std::vector<double> widths;   // count * basis, > 0

    double* weight_row(std::size_t i) { return weights.data() + i * channels * basis; }
    const double* weight_row(std::size_t i) const { return weights.data() + i * channels * basis; }
    double* center_row(std::size_t i) { return centers.data() + i * basis; }
    const double* center_row(std::size_t i) const { return centers.data() + i * basis; }
    double* width_row(std::size_t i) { return widths.data() + i * basis; }
    const double* width_row(std::size_t i) const { return widths.data() + i * basis; }
};

enum class LifecycleMode { additive, multiplicative, none };

inline std::string to_string(LifecycleMode m) {
    switch (m) {
        case LifecycleMode::additive: return "additive";
        case LifecycleMode::multiplicative: return "multiplicative";
        case LifecycleMode::none: return "none";
    }
    return "additive";
}

inline LifecycleMode lifecycle_from_string(const std::string& s) {
    if (s == "additive") return LifecycleMode::additive;
    if (s == "multiplicative") return LifecycleMode::multiplicative;
    if (s == "none") return LifecycleMode::none;
    throw DataError("unknown lifecycle mode: " + s);
}

struct DeformField {
    AttributeField position;  // 3 channels
    AttributeField rotation;  // 4 channels
    AttributeField scale;     // 3 channels
    AttributeField opacity;   // 1 channel
    LifecycleMode lifecycle_mode = LifecycleMode::additive;

    std::size_t count() const { return position.count; }
    int basis() const { return position.basis; }
};

inline constexpr int kDefaultBasisCount = 20;
inline constexpr double kWidthFloor = 1e-6;

// ---------------------------------------------------------------------------
// Operations

inline double basis_eval(double t, double center, double width) {
    if (!(width > 0.0)) throw std::domain_error("basis_eval: width must be > 0");
    double d = t - center;
    return std::exp(-d * d / (2.0 * width * width));
}

// x_t = x0 + sum_j w[j] * b_j(t), one output channel per row of weights.
inline void deform_attribute(std::span<const double> x0, std::span<const double> weights,
                             std::span<const double> centers, std::span<const double> widths,
                             double t, std::span<double> out) {
    std::size_t channels = x0.size();
    std::size_t basis = centers.size();
    for (std::size_t c = 0; c < channels; ++c) {
        double acc = x0[c];
        for (std::size_t j = 0; j < basis; ++j)
            acc += weights[c * basis + j] * basis_eval(t, centers[j], widths[j]);
        out[c] = acc;
    }
}

// Raw (pre-sigmoid) opacity trajectory. The additive form can both raise a
// near-zero opacity and kill a high one; the multiplicative variant scales
// the canonical value and therefore cannot raise a zero.
inline double lifecycle_opacity(double raw_opacity, std::span<const double> weights,
                                std::span<const double> centers, std::span<const double> widths,
                                double t, LifecycleMode mode) {
    if (mode == LifecycleMode::none) return raw_opacity;
    double acc = 0.0;
    for (std::size_t j = 0; j < centers.size(); ++j)
        acc += weights[j] * basis_eval(t, centers[j], widths[j]);
    if (mode == LifecycleMode::additive) return raw_opacity + acc;
    return raw_opacity * acc;
}

// Zero-weight field with evenly spaced centers; deform_cloud through it is
// the identity for every t.
inline AttributeField init_attribute_field(std::size_t count, int channels, int basis) {
    if (basis < 1) throw std::invalid_argument("init_field: basis count must be >= 1");
    AttributeField f;
    f.count = count;
    f.channels = channels;
    f.basis = basis;
    f.weights.assign(count * std::size_t(channels) * basis, 0.0);
    f.centers.resize(count * std::size_t(basis));
    f.widths.assign(count * std::size_t(basis), 1.0 / basis);
    for (std::size_t i = 0; i < count; ++i)
        for (int j = 0; j < basis; ++j)
            f.centers[i * basis + j] = (j + 0.5) / basis;
    return f;
}

inline DeformField init_field(std::size_t count, int basis = kDefaultBasisCount,
                              LifecycleMode mode = LifecycleMode::additive) {
    DeformField f;
    f.position = init_attribute_field(count, 3, basis);
    f.rotation = init_attribute_field(count, 4, basis);
    f.scale = init_attribute_field(count, 3, basis);
    f.opacity = init_attribute_field(count, 1, basis);
    f.lifecycle_mode = mode;
    return f;
}

// ---------------------------------------------------------------------------
// Full deformation + activation. Inactive Gaussians bypass all four heads
// and render from their canonical attributes.

inline RenderAttributes deform_cloud(const GaussianCloud& cloud, const DeformField& field,
                                     double t, const std::vector<std::uint8_t>& active) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("deform_cloud: t outside [0,1]");
    if (active.size() != cloud.count())
        throw std::invalid_argument("deform_cloud: active flag count mismatch");
    if (field.count() != cloud.count())
        throw std::invalid_argument("deform_cloud: field count mismatch");

    std::size_t n = cloud.count();
    RenderAttributes out;
    out.means3d.resize(n);
    out.covariances3d.resize(n);
    out.opacities.resize(n);
    out.colors = cloud.colors;

    parallel_for(n, [&](std::size_t i) {
        Vec3 mean = cloud.means[i];
        Vec4 rot = cloud.rotations[i];
        Vec3 raw_scale = cloud.raw_scales[i];
        double raw_opacity = cloud.raw_opacities[i];
        if (active[i]) {
            int b = field.basis();
            deform_attribute({cloud.means[i].data(), 3},
                             {field.position.weight_row(i), std::size_t(3 * b)},
                             {field.position.center_row(i), std::size_t(b)},
                             {field.position.width_row(i), std::size_t(b)}, t,
                             {mean.data(), 3});
            deform_attribute({cloud.rotations[i].data(), 4},
                             {field.rotation.weight_row(i), std::size_t(4 * b)},
                             {field.rotation.center_row(i), std::size_t(b)},
                             {field.rotation.width_row(i), std::size_t(b)}, t,
                             {rot.data(), 4});
            deform_attribute({cloud.raw_scales[i].data(), 3},
                             {field.scale.weight_row(i), std::size_t(3 * b)},
                             {field.scale.center_row(i), std::size_t(b)},
                             {field.scale.width_row(i), std::size_t(b)}, t,
                             {raw_scale.data(), 3});
            raw_opacity = lifecycle_opacity(raw_opacity,
                                            {field.opacity.weight_row(i), std::size_t(b)},
                                            {field.opacity.center_row(i), std::size_t(b)},
                                            {field.opacity.width_row(i), std::size_t(b)}, t,
                                            field.lifecycle_mode);
        }
        out.means3d[i] = mean;
        out.covariances3d[i] = covariance3d(raw_scale, rot);
        out.opacities[i] = sigmoid(raw_opacity);
    });
    return out;
}

}  // namespace ehsg
