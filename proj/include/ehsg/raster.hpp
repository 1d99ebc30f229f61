#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "ehsg/scene.hpp"

namespace ehsg {

// ---------------------------------------------------------------------------
// Render-ready per-Gaussian attributes (already activated).

struct RenderAttributes {
    std::vector<Vec3> means3d;
    std::vector<Mat3> covariances3d;
    std::vector<double> opacities;  // in (0,1)
    std::vector<Vec3> colors;

    std::size_t count() const { return means3d.size(); }
};

// Integer tallies of every discrete branch the forward pass takes. Two
// renders with equal signatures made identical cutoff decisions; finite
// difference checks use this to spot parameters sitting next to a gate.
struct GateCounters {
    std::uint64_t visible = 0;
    std::uint64_t radius_sum = 0;
    std::uint64_t composited = 0;
    std::uint64_t clamped = 0;
    std::uint64_t skipped = 0;
    std::uint64_t breaks = 0;

    std::uint64_t signature() const {
        std::uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (std::uint64_t v : {visible, radius_sum, composited, clamped, skipped, breaks}) {
            h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
            h *= 0xbf58476d1ce4e5b9ULL;
        }
        return h;
    }
};

struct RenderOutput {
    Image<double> color;                // H x W x 3
    Image<double> depth;                // H x W
    Image<double> final_transmittance;  // H x W
    std::uint64_t splat_count = 0;      // Gaussian-tile pairs processed
    GateCounters gates;
    std::vector<double> per_gaussian_grad_norm;  // filled by backward_render
};

struct RasterSettings {
    int tile_size = 16;
    double alpha_min = 1.0 / 255.0;
    double alpha_clamp = 0.99;
    double transmittance_eps = 1e-4;
    double lowpass_floor = 0.3;   // px^2 added to the 2D covariance diagonal
    double radius_sigmas = 3.0;
    bool normalize_depth = false;  // divide depth by accumulated alpha
};

// ---------------------------------------------------------------------------
// Perspective projection of one Gaussian (EWA affine approximation).

struct Projection {
    Vec2 mean2d;
    Mat2 cov2d;   // includes the low-pass floor
    Mat2 conic;   // inverse of cov2d
    double view_depth = 0.0;
    int radius = 0;  // kernel support in pixels
    Vec3 cam_point;
};

inline std::optional<Projection> project(const Camera& cam, const Vec3& mean3d,
                                         const Mat3& cov3d,
                                         const RasterSettings& settings = {}) {
    Vec3 t = cam.world_to_cam(mean3d);
    if (t.z() <= cam.znear || t.z() >= cam.zfar) return std::nullopt;

    Projection p;
    p.cam_point = t;
    p.view_depth = t.z();
    p.mean2d = Vec2(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy);

    Eigen::Matrix<double, 2, 3> jac;
    double z2 = t.z() * t.z();
    jac << cam.fx / t.z(), 0.0, -cam.fx * t.x() / z2,
           0.0, cam.fy / t.z(), -cam.fy * t.y() / z2;
    Eigen::Matrix<double, 2, 3> m = jac * cam.rotation();
    p.cov2d = m * cov3d * m.transpose();
    p.cov2d(0, 0) += settings.lowpass_floor;
    p.cov2d(1, 1) += settings.lowpass_floor;

    double mid = 0.5 * (p.cov2d(0, 0) + p.cov2d(1, 1));
    double half = 0.5 * (p.cov2d(0, 0) - p.cov2d(1, 1));
    double lambda_max = mid + std::sqrt(half * half + p.cov2d(0, 1) * p.cov2d(0, 1));
    p.radius = int(std::ceil(settings.radius_sigmas * std::sqrt(std::max(lambda_max, 0.0))));

    double det = p.cov2d(0, 0) * p.cov2d(1, 1) - p.cov2d(0, 1) * p.cov2d(1, 0);
    p.conic << p.cov2d(1, 1) / det, -p.cov2d(0, 1) / det,
               -p.cov2d(1, 0) / det, p.cov2d(0, 0) / det;
    return p;
}

// ---------------------------------------------------------------------------
// Shared forward machinery. The per-pixel contract is identical for the
// tiled and reference paths: a Gaussian contributes to pixel (px, py) iff
// the pixel lies inside its square kernel support |px - u| <= r, alpha
// passes the 1/255 cutoff, and the pixel's transmittance has not dropped
// below the early-out threshold. Compositing order is front-to-back by
// (view_depth, index).

namespace detail {

struct VisibleGaussian {
    std::uint32_t index;  // into RenderAttributes
    Projection proj;
};

inline void check_finite(const RenderAttributes& attrs) {
    for (std::size_t i = 0; i < attrs.count(); ++i) {
        if (!attrs.means3d[i].allFinite() || !attrs.covariances3d[i].allFinite() ||
            !std::isfinite(attrs.opacities[i]) || !attrs.colors[i].allFinite())
            throw NumericError("rasterize: non-finite attribute at gaussian index " +
                               std::to_string(i));
    }
}

// Projects and sorts front-to-back with index tie-break.
inline std::vector<VisibleGaussian> visible_sorted(const Camera& cam,
                                                   const RenderAttributes& attrs,
                                                   const RasterSettings& settings) {
    std::vector<VisibleGaussian> vis;
    vis.reserve(attrs.count());
    for (std::size_t i = 0; i < attrs.count(); ++i) {
        auto p = project(cam, attrs.means3d[i], attrs.covariances3d[i], settings);
        if (p) vis.push_back({std::uint32_t(i), *p});
    }
    std::sort(vis.begin(), vis.end(), [](const VisibleGaussian& a, const VisibleGaussian& b) {
        if (a.proj.view_depth != b.proj.view_depth) return a.proj.view_depth < b.proj.view_depth;
        return a.index < b.index;
    });
    return vis;
}

// One Gaussian evaluated at one pixel, after all cutoffs.
struct Contribution {
    std::uint32_t vis_index;  // into the visible list
    double alpha;             // post-clamp
    double weight;            // alpha * T at composite time
    bool clamped;
    double gauss;  // exp(-q/2)
    Vec2 d;        // pixel - mean2d
};

struct PixelTrace {
    double final_transmittance = 1.0;
    std::uint32_t composited = 0;
    std::uint32_t clamped = 0;
    std::uint32_t skipped = 0;
    bool broke = false;
};

// Walks visible Gaussians (already front-to-back) for one pixel. Emit is
// called once per composited Gaussian.
template <typename Iter, typename Emit>
PixelTrace composite_pixel(double px, double py, Iter begin, Iter end,
                           const RenderAttributes& attrs, const RasterSettings& settings,
                           Emit&& emit) {
    PixelTrace trace;
    double transmittance = 1.0;
    for (Iter it = begin; it != end; ++it) {
        const VisibleGaussian& g = *it;
        if (std::abs(px - g.proj.mean2d.x()) > g.proj.radius ||
            std::abs(py - g.proj.mean2d.y()) > g.proj.radius)
            continue;
        Vec2 d(px - g.proj.mean2d.x(), py - g.proj.mean2d.y());
        double q = g.proj.conic(0, 0) * d.x() * d.x() +
                   2.0 * g.proj.conic(0, 1) * d.x() * d.y() +
                   g.proj.conic(1, 1) * d.y() * d.y();
        double gauss = std::exp(-0.5 * q);
        double alpha_raw = attrs.opacities[g.index] * gauss;
        bool clamped = alpha_raw > settings.alpha_clamp;
        double alpha = clamped ? settings.alpha_clamp : alpha_raw;
        if (alpha < settings.alpha_min) {
            ++trace.skipped;
            continue;
        }
        double next = transmittance * (1.0 - alpha);
        if (next < settings.transmittance_eps) {
            trace.broke = true;
            break;
        }
        emit(Contribution{std::uint32_t(it - begin), alpha, alpha * transmittance, clamped,
                          gauss, d});
        ++trace.composited;
        if (clamped) ++trace.clamped;
        transmittance = next;
    }
    trace.final_transmittance = transmittance;
    return trace;
}

inline void shade_pixel(Image<double>& color, Image<double>& depth, Image<double>& final_t,
                        GateCounters& gates, int px, int py,
                        const std::vector<VisibleGaussian>& vis,
                        const RenderAttributes& attrs, const RasterSettings& settings) {
    Vec3 c = Vec3::Zero();
    double d_acc = 0.0;
    PixelTrace trace = composite_pixel(
        double(px), double(py), vis.begin(), vis.end(), attrs, settings,
        [&](const detail::Contribution& k) {
            const VisibleGaussian& g = vis[k.vis_index];
            c += attrs.colors[g.index] * k.weight;
            d_acc += g.proj.view_depth * k.weight;
        });
    if (settings.normalize_depth) {
        double accum_alpha = 1.0 - trace.final_transmittance;
        if (accum_alpha > 1e-12) d_acc /= accum_alpha;
    }
    gates.composited += trace.composited;
    gates.clamped += trace.clamped;
    gates.skipped += trace.skipped;
    gates.breaks += trace.broke ? 1 : 0;
    color.at(px, py, 0) = c.x();
    color.at(px, py, 1) = c.y();
    color.at(px, py, 2) = c.z();
    depth.at(px, py) = d_acc;
    final_t.at(px, py) = trace.final_transmittance;
}

struct TileGrid {
    int tiles_x = 0, tiles_y = 0, tile = 16;
    // per tile: indices into the sorted visible list, in visible order
    std::vector<std::vector<std::uint32_t>> bins;
};

inline TileGrid bin_tiles(const Camera& cam, const std::vector<VisibleGaussian>& vis,
                          const RasterSettings& settings) {
    TileGrid grid;
    grid.tile = settings.tile_size;
    grid.tiles_x = (cam.width + grid.tile - 1) / grid.tile;
    grid.tiles_y = (cam.height + grid.tile - 1) / grid.tile;
    grid.bins.assign(std::size_t(grid.tiles_x) * grid.tiles_y, {});
    for (std::uint32_t v = 0; v < vis.size(); ++v) {
        const Projection& p = vis[v].proj;
        // kernel support rect in pixel coordinates
        double x_lo = p.mean2d.x() - p.radius, x_hi = p.mean2d.x() + p.radius;
        double y_lo = p.mean2d.y() - p.radius, y_hi = p.mean2d.y() + p.radius;
        int tx0 = std::max(0, int(std::floor(x_lo / grid.tile)));
        int tx1 = std::min(grid.tiles_x - 1, int(std::floor(x_hi / grid.tile)));
        int ty0 = std::max(0, int(std::floor(y_lo / grid.tile)));
        int ty1 = std::min(grid.tiles_y - 1, int(std::floor(y_hi / grid.tile)));
        if (x_hi < 0 || y_hi < 0 || x_lo > cam.width - 1 || y_lo > cam.height - 1) continue;
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                grid.bins[std::size_t(ty) * grid.tiles_x + tx].push_back(v);
    }
    return grid;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tile-based forward render of color and depth.

inline RenderOutput rasterize(const Camera& cam, const RenderAttributes& attrs,
                              const RasterSettings& settings = {}) {
    detail::check_finite(attrs);
    RenderOutput out;
    out.color = Image<double>(cam.width, cam.height, 3);
    out.depth = Image<double>(cam.width, cam.height, 1);
    out.final_transmittance = Image<double>(cam.width, cam.height, 1, 1.0);

    auto vis = detail::visible_sorted(cam, attrs, settings);
    auto grid = detail::bin_tiles(cam, vis, settings);
    out.splat_count = 0;
    for (const auto& bin : grid.bins) out.splat_count += bin.size();
    out.gates.visible = vis.size();
    for (const auto& v : vis) out.gates.radius_sum += std::uint64_t(v.proj.radius);

    std::vector<GateCounters> tile_gates(grid.bins.size());
    parallel_for(grid.bins.size(), [&](std::size_t tile_idx) {
        const auto& bin = grid.bins[tile_idx];
        int tx = int(tile_idx) % grid.tiles_x;
        int ty = int(tile_idx) / grid.tiles_x;
        int x0 = tx * grid.tile, x1 = std::min(cam.width, x0 + grid.tile);
        int y0 = ty * grid.tile, y1 = std::min(cam.height, y0 + grid.tile);
        // bin holds positions in the globally sorted list, ascending, so the
        // per-pixel traversal order matches the reference renderer exactly.
        std::vector<detail::VisibleGaussian> local;
        local.reserve(bin.size());
        for (std::uint32_t v : bin) local.push_back(vis[v]);
        for (int py = y0; py < y1; ++py)
            for (int px = x0; px < x1; ++px)
                detail::shade_pixel(out.color, out.depth, out.final_transmittance,
                                    tile_gates[tile_idx], px, py, local, attrs, settings);
    });
    for (const GateCounters& g : tile_gates) {
        out.gates.composited += g.composited;
        out.gates.clamped += g.clamped;
        out.gates.skipped += g.skipped;
        out.gates.breaks += g.breaks;
    }
    return out;
}

// Brute-force renderer: per pixel, walks every visible Gaussian. Used as the
// correctness oracle for the tiled path; shares the per-pixel contract.

inline RenderOutput rasterize_reference(const Camera& cam, const RenderAttributes& attrs,
                                        const RasterSettings& settings = {}) {
    detail::check_finite(attrs);
    RenderOutput out;
    out.color = Image<double>(cam.width, cam.height, 3);
    out.depth = Image<double>(cam.width, cam.height, 1);
    out.final_transmittance = Image<double>(cam.width, cam.height, 1, 1.0);

    auto vis = detail::visible_sorted(cam, attrs, settings);
    out.splat_count = vis.size();  // whole image acts as a single tile
    out.gates.visible = vis.size();
    for (const auto& v : vis) out.gates.radius_sum += std::uint64_t(v.proj.radius);

    for (int py = 0; py < cam.height; ++py)
        for (int px = 0; px < cam.width; ++px)
            detail::shade_pixel(out.color, out.depth, out.final_transmittance, out.gates, px,
                                py, vis, attrs, settings);
    return out;
}

}  // namespace ehsg
