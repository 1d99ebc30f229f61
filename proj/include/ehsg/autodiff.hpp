#pragma once

#include <functional>
#include <sstream>

#include "ehsg/deform.hpp"
#include "ehsg/raster.hpp"

namespace ehsg {

// ---------------------------------------------------------------------------
// Gradients with respect to render-ready attributes. d_covariances3d holds
// full-matrix gradients (symmetric), i.e. dL = sum_ij G_ij dSigma_ij.

struct AttrGrads {
    std::vector<Vec3> d_means3d;
    std::vector<Mat3> d_covariances3d;
    std::vector<double> d_opacities;
    std::vector<Vec3> d_colors;

    explicit AttrGrads(std::size_t n = 0)
        : d_means3d(n, Vec3::Zero()),
          d_covariances3d(n, Mat3::Zero()),
          d_opacities(n, 0.0),
          d_colors(n, Vec3::Zero()) {}
};

struct FieldGrads {
    std::vector<double> weights;
    std::vector<double> centers;
    std::vector<double> widths;

    static FieldGrads zeros_like(const AttributeField& f) {
        FieldGrads g;
        g.weights.assign(f.weights.size(), 0.0);
        g.centers.assign(f.centers.size(), 0.0);
        g.widths.assign(f.widths.size(), 0.0);
        return g;
    }
};

struct GradientBundle {
    std::vector<Vec3> d_means;
    std::vector<Vec3> d_raw_scales;
    std::vector<Vec4> d_rotations;
    std::vector<double> d_raw_opacities;
    std::vector<Vec3> d_colors;
    FieldGrads position, rotation, scale, opacity;
};

// ---------------------------------------------------------------------------
// Reverse pass through compositing (per pixel, recomputed) and projection.
// Cutoffs (alpha skip, kernel support, early-out, alpha clamp) are treated
// as non-differentiable gates: whichever branch was active in the forward
// pass defines the gradient.

namespace detail {

struct SplatGrad {
    Vec2 mu2d = Vec2::Zero();
    double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;  // q = a dx^2 + 2b dxdy + c dy^2
    double z = 0.0;
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();

    void add(const SplatGrad& o) {
        mu2d += o.mu2d;
        conic_a += o.conic_a;
        conic_b += o.conic_b;
        conic_c += o.conic_c;
        z += o.z;
        opacity += o.opacity;
        color += o.color;
    }
};

// Backward for one pixel over its (already restricted) visible list.
// Accumulates into acc[local_index].
inline void backward_pixel(double px, double py,
                           const std::vector<VisibleGaussian>& local,
                           const RenderAttributes& attrs, const RasterSettings& settings,
                           const Vec3& g_color, double g_depth,
                           std::vector<Contribution>& scratch,
                           std::vector<SplatGrad>& acc) {
    scratch.clear();
    double raw_depth = 0.0;
    double final_t = composite_pixel(px, py, local.begin(), local.end(), attrs, settings,
                                     [&](const Contribution& k) {
                                         scratch.push_back(k);
                                         raw_depth +=
                                             local[k.vis_index].proj.view_depth * k.weight;
                                     })
                         .final_transmittance;
    if (scratch.empty()) return;

    double g_depth_raw = g_depth;
    double g_final_t = 0.0;
    if (settings.normalize_depth) {
        double accum_alpha = 1.0 - final_t;
        if (accum_alpha > 1e-12) {
            g_depth_raw = g_depth / accum_alpha;
            // depth_out = raw / (1 - T): dL/dT = g * raw / (1-T)^2
            g_final_t = g_depth * raw_depth / (accum_alpha * accum_alpha);
        }
    }

    Vec3 suffix_color = Vec3::Zero();
    double suffix_depth = 0.0;
    for (std::size_t s = scratch.size(); s-- > 0;) {
        const Contribution& k = scratch[s];
        const VisibleGaussian& g = local[k.vis_index];
        const Vec3& col = attrs.colors[g.index];
        double z = g.proj.view_depth;
        double t_here = k.weight / k.alpha;
        double one_minus = 1.0 - k.alpha;

        double d_alpha = g_color.dot(col * t_here - suffix_color / one_minus);
        d_alpha += g_depth_raw * (z * t_here - suffix_depth / one_minus);
        // final transmittance carries a factor (1 - alpha_i) for every
        // composited Gaussian
        d_alpha += g_final_t * (-final_t / one_minus);

        SplatGrad& a = acc[k.vis_index];
        a.color += g_color * k.weight;
        a.z += g_depth_raw * k.weight;
        if (!k.clamped) {
            a.opacity += d_alpha * k.gauss;
            double d_q = -0.5 * k.alpha * d_alpha;
            const Mat2& con = g.proj.conic;
            double dq_ddx = 2.0 * (con(0, 0) * k.d.x() + con(0, 1) * k.d.y());
            double dq_ddy = 2.0 * (con(0, 1) * k.d.x() + con(1, 1) * k.d.y());
            a.mu2d.x() += -d_q * dq_ddx;
            a.mu2d.y() += -d_q * dq_ddy;
            a.conic_a += d_q * k.d.x() * k.d.x();
            a.conic_b += d_q * 2.0 * k.d.x() * k.d.y();
            a.conic_c += d_q * k.d.y() * k.d.y();
        }
        suffix_color += col * k.weight;
        suffix_depth += z * k.weight;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline AttrGrads backward_render(const Camera& cam, const RenderAttributes& attrs,
                                 RenderOutput& render_output, const Image<double>& d_color,
                                 const Image<double>& d_depth,
                                 const RasterSettings& settings = {}) {
    if (d_color.width != cam.width || d_color.height != cam.height || d_color.channels != 3 ||
        d_depth.width != cam.width || d_depth.height != cam.height || d_depth.channels != 1)
        throw std::invalid_argument("backward_render: gradient image shape mismatch");

    std::size_t n = attrs.count();
    auto vis = detail::visible_sorted(cam, attrs, settings);
    auto grid = detail::bin_tiles(cam, vis, settings);

    // Per-tile sparse accumulators, merged in tile index order so the result
    // is independent of the worker count.
    std::vector<std::vector<detail::SplatGrad>> tile_acc(grid.bins.size());
    parallel_for(grid.bins.size(), [&](std::size_t tile_idx) {
        const auto& bin = grid.bins[tile_idx];
        if (bin.empty()) return;
        int tx = int(tile_idx) % grid.tiles_x;
        int ty = int(tile_idx) / grid.tiles_x;
        int x0 = tx * grid.tile, x1 = std::min(cam.width, x0 + grid.tile);
        int y0 = ty * grid.tile, y1 = std::min(cam.height, y0 + grid.tile);
        std::vector<detail::VisibleGaussian> local;
        local.reserve(bin.size());
        for (std::uint32_t v : bin) local.push_back(vis[v]);
        auto& acc = tile_acc[tile_idx];
        acc.assign(bin.size(), {});
        std::vector<detail::Contribution> scratch;
        for (int py = y0; py < y1; ++py)
            for (int px = x0; px < x1; ++px) {
                Vec3 gc(d_color.at(px, py, 0), d_color.at(px, py, 1), d_color.at(px, py, 2));
                double gd = d_depth.at(px, py);
                if (gc.isZero(0.0) && gd == 0.0) continue;
                detail::backward_pixel(double(px), double(py), local, attrs, settings, gc, gd,
                                       scratch, acc);
            }
    });

    // 2D-space gradients per visible Gaussian
    std::vector<detail::SplatGrad> splat(vis.size());
    for (std::size_t tile_idx = 0; tile_idx < grid.bins.size(); ++tile_idx) {
        const auto& bin = grid.bins[tile_idx];
        for (std::size_t k = 0; k < bin.size(); ++k) splat[bin[k]].add(tile_acc[tile_idx][k]);
    }

    // chain through projection back to 3D
    AttrGrads out(n);
    render_output.per_gaussian_grad_norm.assign(n, 0.0);
    Mat3 rot = cam.rotation();
    parallel_for(vis.size(), [&](std::size_t v) {
        const detail::VisibleGaussian& g = vis[v];
        const detail::SplatGrad& s = splat[v];
        std::size_t i = g.index;
        const Projection& p = g.proj;

        out.d_colors[i] = s.color;
        out.d_opacities[i] = s.opacity;
        render_output.per_gaussian_grad_norm[i] = s.mu2d.norm();

        // conic -> 2D covariance: dSigma2 = -Conic * F * Conic
        Mat2 f;
        f << s.conic_a, 0.5 * s.conic_b, 0.5 * s.conic_b, s.conic_c;
        Mat2 g2 = -p.conic * f * p.conic;

        double x = p.cam_point.x(), y = p.cam_point.y(), z = p.cam_point.z();
        double z2 = z * z, z3 = z2 * z;
        Eigen::Matrix<double, 2, 3> jac;
        jac << cam.fx / z, 0.0, -cam.fx * x / z2,
               0.0, cam.fy / z, -cam.fy * y / z2;
        Eigen::Matrix<double, 2, 3> m = jac * rot;
        out.d_covariances3d[i] = m.transpose() * g2 * m;

        // Sigma2 = J V J^T with V the camera-frame 3D covariance; J itself
        // depends on the camera-frame point.
        Mat3 vmat = rot * attrs.covariances3d[i] * rot.transpose();
        Eigen::Matrix<double, 2, 3> d_jac = 2.0 * g2 * jac * vmat;
        Vec3 d_cam = Vec3::Zero();
        d_cam.x() += d_jac(0, 2) * (-cam.fx / z2);
        d_cam.y() += d_jac(1, 2) * (-cam.fy / z2);
        d_cam.z() += d_jac(0, 0) * (-cam.fx / z2) + d_jac(0, 2) * (2.0 * cam.fx * x / z3) +
                     d_jac(1, 1) * (-cam.fy / z2) + d_jac(1, 2) * (2.0 * cam.fy * y / z3);

        // pixel position and blended view depth
        d_cam.x() += s.mu2d.x() * cam.fx / z;
        d_cam.y() += s.mu2d.y() * cam.fy / z;
        d_cam.z() += s.mu2d.x() * (-cam.fx * x / z2) + s.mu2d.y() * (-cam.fy * y / z2);
        d_cam.z() += s.z;

        out.d_means3d[i] = rot.transpose() * d_cam;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Backward through activation functions, covariance construction and the
// basis-function trajectories, routing into canonical parameters and field
// parameters. Inactive Gaussians send everything to the canonical side.

namespace detail {

// dL/d(unit quaternion) from a full-matrix rotation gradient.
inline Vec4 rotation_backward(const Mat3& d_rot, const Vec4& q_unit) {
    double w = q_unit[0], x = q_unit[1], y = q_unit[2], z = q_unit[3];
    Mat3 dw, dx, dy, dz;
    dw << 0, -z, y, z, 0, -x, -y, x, 0;
    dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    return 2.0 * Vec4(d_rot.cwiseProduct(dw).sum(), d_rot.cwiseProduct(dx).sum(),
                      d_rot.cwiseProduct(dy).sum(), d_rot.cwiseProduct(dz).sum());
}

// Backward of Sigma = R(q/|q|) diag(exp(raw)) ... producing gradients w.r.t.
// the unnormalized quaternion and the raw (log) scales.
inline void covariance_backward(const Mat3& d_cov, const Vec4& quat_raw, const Vec3& raw_scale,
                                Vec4& d_quat, Vec3& d_raw_scale) {
    double n = quat_raw.norm();
    Vec4 q = quat_raw / n;
    Mat3 rot = quat_to_rotation(quat_raw);
    Vec3 s = raw_scale.array().exp();
    Mat3 nmat = rot * s.asDiagonal();
    Mat3 d_n = 2.0 * d_cov * nmat;          // Sigma = N N^T, d_cov symmetric
    Mat3 d_rot = d_n * s.asDiagonal();      // N = R S
    for (int k = 0; k < 3; ++k)
        d_raw_scale[k] = d_n.col(k).dot(rot.col(k)) * s[k];
    Vec4 d_unit = rotation_backward(d_rot, q);
    d_quat = (d_unit - q * q.dot(d_unit)) / n;
}

// Accumulates basis-rule gradients for one attribute group row. d_ch holds
// dL/d(deformed channel); the weight gradient picks up b_j, centers and
// widths pick up the weighted chain through b_j.
inline void field_row_backward(const double* d_ch, int channels, const double* weights,
                               const double* centers, const double* widths, int basis, double t,
                               double* d_weights, double* d_centers, double* d_widths) {
    for (int j = 0; j < basis; ++j) {
        double b = basis_eval(t, centers[j], widths[j]);
        double dt = t - centers[j];
        double inv_w2 = 1.0 / (widths[j] * widths[j]);
        double chain = 0.0;
        for (int c = 0; c < channels; ++c) {
            d_weights[c * basis + j] += d_ch[c] * b;
            chain += d_ch[c] * weights[c * basis + j];
        }
        d_centers[j] += chain * b * dt * inv_w2;
        d_widths[j] += chain * b * dt * dt * inv_w2 / widths[j];
    }
}

}  // namespace detail

inline GradientBundle backward_deform(const GaussianCloud& cloud, const DeformField& field,
                                      double t, const std::vector<std::uint8_t>& active,
                                      const AttrGrads& d_attrs) {
    std::size_t n = cloud.count();
    if (d_attrs.d_means3d.size() != n || active.size() != n)
        throw std::invalid_argument("backward_deform: shape mismatch");

    GradientBundle g;
    g.d_means.assign(n, Vec3::Zero());
    g.d_raw_scales.assign(n, Vec3::Zero());
    g.d_rotations.assign(n, Vec4::Zero());
    g.d_raw_opacities.assign(n, 0.0);
    g.d_colors.assign(n, Vec3::Zero());
    g.position = FieldGrads::zeros_like(field.position);
    g.rotation = FieldGrads::zeros_like(field.rotation);
    g.scale = FieldGrads::zeros_like(field.scale);
    g.opacity = FieldGrads::zeros_like(field.opacity);

    int b = field.basis();
    parallel_for(n, [&](std::size_t i) {
        g.d_colors[i] = d_attrs.d_colors[i];

        Vec4 rot = cloud.rotations[i];
        Vec3 raw_scale = cloud.raw_scales[i];
        double raw_opacity = cloud.raw_opacities[i];
        if (active[i]) {
            deform_attribute({cloud.rotations[i].data(), 4},
                             {field.rotation.weight_row(i), std::size_t(4 * b)},
                             {field.rotation.center_row(i), std::size_t(b)},
                             {field.rotation.width_row(i), std::size_t(b)}, t, {rot.data(), 4});
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

        Vec4 d_quat;
        Vec3 d_raw_scale;
        detail::covariance_backward(d_attrs.d_covariances3d[i], rot, raw_scale, d_quat,
                                    d_raw_scale);
        double act = sigmoid(raw_opacity);
        double d_raw_op = d_attrs.d_opacities[i] * act * (1.0 - act);
        const Vec3& d_mean = d_attrs.d_means3d[i];

        g.d_means[i] += d_mean;
        g.d_rotations[i] += d_quat;
        g.d_raw_scales[i] += d_raw_scale;

        if (!active[i]) {
            g.d_raw_opacities[i] += d_raw_op;
            return;
        }

        detail::field_row_backward(d_mean.data(), 3, field.position.weight_row(i),
                                   field.position.center_row(i), field.position.width_row(i), b,
                                   t, g.position.weights.data() + i * 3 * b,
                                   g.position.centers.data() + i * b,
                                   g.position.widths.data() + i * b);
        detail::field_row_backward(d_quat.data(), 4, field.rotation.weight_row(i),
                                   field.rotation.center_row(i), field.rotation.width_row(i), b,
                                   t, g.rotation.weights.data() + i * 4 * b,
                                   g.rotation.centers.data() + i * b,
                                   g.rotation.widths.data() + i * b);
        detail::field_row_backward(d_raw_scale.data(), 3, field.scale.weight_row(i),
                                   field.scale.center_row(i), field.scale.width_row(i), b, t,
                                   g.scale.weights.data() + i * 3 * b,
                                   g.scale.centers.data() + i * b,
                                   g.scale.widths.data() + i * b);

        switch (field.lifecycle_mode) {
            case LifecycleMode::additive: {
                g.d_raw_opacities[i] += d_raw_op;
                detail::field_row_backward(&d_raw_op, 1, field.opacity.weight_row(i),
                                           field.opacity.center_row(i),
                                           field.opacity.width_row(i), b, t,
                                           g.opacity.weights.data() + i * b,
                                           g.opacity.centers.data() + i * b,
                                           g.opacity.widths.data() + i * b);
                break;
            }
            case LifecycleMode::multiplicative: {
                double basis_sum = 0.0;
                const double* w = field.opacity.weight_row(i);
                const double* c = field.opacity.center_row(i);
                const double* wd = field.opacity.width_row(i);
                for (int j = 0; j < b; ++j) basis_sum += w[j] * basis_eval(t, c[j], wd[j]);
                g.d_raw_opacities[i] += d_raw_op * basis_sum;
                double d_scaled = d_raw_op * cloud.raw_opacities[i];
                detail::field_row_backward(&d_scaled, 1, w, c, wd, b, t,
                                           g.opacity.weights.data() + i * b,
                                           g.opacity.centers.data() + i * b,
                                           g.opacity.widths.data() + i * b);
                break;
            }
            case LifecycleMode::none:
                g.d_raw_opacities[i] += d_raw_op;
                break;
        }
    });
    return g;
}

// ---------------------------------------------------------------------------
// Central finite-difference verification of analytic gradients.

struct ParamBlock {
    std::string path;
    double* values = nullptr;
    const double* grads = nullptr;
    std::size_t size = 0;
};

struct FdEntry {
    std::string path;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t excluded_gates = 0;
    std::size_t skipped_small = 0;
    std::vector<FdEntry> worst;  // sorted by descending relative error

    bool pass(double tolerance) const { return checked > 0 && max_rel_error < tolerance; }

    std::string summary() const {
        std::ostringstream os;
        os << "checked=" << checked << " excluded_gates=" << excluded_gates
           << " skipped_small=" << skipped_small << " max_rel_error=" << max_rel_error;
        if (!worst.empty())
            os << " worst=" << worst.front().path << "[" << worst.front().index << "]"
               << " analytic=" << worst.front().analytic << " numeric=" << worst.front().numeric;
        return os.str();
    }
};

// Central differences per scalar. Non-differentiable points of the loss
// chain are treated as gates and excluded rather than blended into the
// estimate:
//   - rasterizer cutoffs (kernel support, alpha skip, clamp, early-out),
//     probed at +-10x step via the caller's gate signature (typically
//     RenderOutput::gates.signature());
//   - L1 residual and ranking-hinge sign flips, probed at +-2.5x step via
//     the kink signature (just beyond the farthest FD evaluation, which is
//     the only range that can contaminate the estimate).
// Two step-consistency checks (one-sided disagreement, step doubling)
// guard against anything the probes miss. Entries with both gradients
// under grad_floor are skipped.
inline FdReport finite_diff_check(const std::function<double()>& loss_fn,
                                  std::vector<ParamBlock> params, double step,
                                  double grad_floor = 1e-6,
                                  const std::function<std::uint64_t()>& gate_probe = nullptr,
                                  std::size_t keep_worst = 8,
                                  const std::function<std::uint64_t()>& kink_probe = nullptr) {
    FdReport report;
    std::uint64_t gate_sig0 = gate_probe ? gate_probe() : 0;
    std::uint64_t kink_sig0 = kink_probe ? kink_probe() : 0;
    double f_base = loss_fn();
    for (auto& block : params) {
        for (std::size_t k = 0; k < block.size; ++k) {
            double saved = block.values[k];
            bool gate = false;
            if (gate_probe) {
                block.values[k] = saved + 10.0 * step;
                gate = gate_probe() != gate_sig0;
                if (!gate) {
                    block.values[k] = saved - 10.0 * step;
                    gate = gate_probe() != gate_sig0;
                }
                block.values[k] = saved;
            }
            if (!gate && kink_probe) {
                block.values[k] = saved + 2.5 * step;
                gate = kink_probe() != kink_sig0;
                if (!gate) {
                    block.values[k] = saved - 2.5 * step;
                    gate = kink_probe() != kink_sig0;
                }
                block.values[k] = saved;
            }
            if (gate) {
                ++report.excluded_gates;
                continue;
            }
            block.values[k] = saved + step;
            double f_plus = loss_fn();
            block.values[k] = saved - step;
            double f_minus = loss_fn();
            double fd = (f_plus - f_minus) / (2.0 * step);
            {
                double fd_fwd = (f_plus - f_base) / step;
                double fd_bwd = (f_base - f_minus) / step;
                double scale = std::max({std::abs(fd_fwd), std::abs(fd_bwd), grad_floor});
                gate = std::abs(fd_fwd - fd_bwd) > 0.25 * scale;
            }
            if (!gate) {
                block.values[k] = saved + 2.0 * step;
                double f_plus2 = loss_fn();
                block.values[k] = saved - 2.0 * step;
                double f_minus2 = loss_fn();
                double fd2 = (f_plus2 - f_minus2) / (4.0 * step);
                double scale = std::max({std::abs(fd), std::abs(fd2), grad_floor});
                gate = std::abs(fd - fd2) > 0.25 * scale;
            }
            block.values[k] = saved;

            if (gate) {
                ++report.excluded_gates;
                continue;
            }
            double analytic = block.grads[k];
            double mag = std::max(std::abs(analytic), std::abs(fd));
            if (mag <= grad_floor) {
                ++report.skipped_small;
                continue;
            }
            ++report.checked;
            double rel = std::abs(analytic - fd) / mag;
            if (rel > report.max_rel_error) report.max_rel_error = rel;
            FdEntry entry{block.path, k, analytic, fd, rel};
            auto pos = std::lower_bound(report.worst.begin(), report.worst.end(), rel,
                                        [](const FdEntry& e, double r) { return e.rel_error > r; });
            report.worst.insert(pos, entry);
            if (report.worst.size() > keep_worst) report.worst.resize(keep_worst);
        }
    }
    return report;
}

}  // namespace ehsg
