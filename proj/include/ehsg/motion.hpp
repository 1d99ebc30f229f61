#pragma once

#include <cstdint>

#include "ehsg/deform.hpp"
#include "ehsg/raster.hpp"
#include "ehsg/scene.hpp"

namespace ehsg {

// ---------------------------------------------------------------------------
// Region grid over the image. Regions always tile the image exactly; a split
// replaces the parent with four children.

enum class RegionStatus : std::int32_t { dynamic = 0, static_ = 1 };

struct Region {
    std::int32_t id = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel rect
    RegionStatus status = RegionStatus::dynamic;
    int depth = 0;  // split level, 0 = original grid cell

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
};

struct MotionMask {
    std::vector<Region> regions;
    int image_width = 0, image_height = 0;
    int grid_n = 4;
    double update_interval = 500.0;         // N_m, rescaled by Eq-style loss ratio
    std::int64_t next_update_iter = 500;
    double last_update_loss = -1.0;         // < 0 until the first update
    std::int32_t next_region_id = 0;

    // region index (position in `regions`) per pixel, or -1 if out of range
    int region_index_at(int px, int py) const {
        for (std::size_t r = 0; r < regions.size(); ++r) {
            const Region& reg = regions[r];
            if (px >= reg.x0 && px < reg.x1 && py >= reg.y0 && py < reg.y1) return int(r);
        }
        return -1;
    }
};

struct MotionSettings {
    double delta1 = 0.05;   // average-deformation threshold
    double delta2 = 0.5;    // loss-difference threshold, 8-bit MAE
    double delta3 = 1.0;    // static-region recovery threshold, 8-bit MAE
    int min_region_side = 16;
    double interval_factor_min = 0.5;
    double interval_factor_max = 2.0;
    bool uc1_enabled = true;           // average-deformation criterion
    bool uc2_enabled = true;           // render-loss criterion
    bool region_split_enabled = true;  // conflicts split; off = conflicts go static
    bool adaptive_interval_enabled = true;
};

struct RegionStats {
    struct Entry {
        double avg_deform = 0.0;      // normalized mean |delta|, dimensionless
        double loss_deformed = 0.0;   // 8-bit MAE with deformation applied
        double loss_canonical = 0.0;  // 8-bit MAE without deformation
        std::size_t gaussian_count = 0;
        bool no_valid_pixels = false;  // regions without scoreable pixels go static
    };
    std::vector<Entry> entries;  // parallel to MotionMask::regions
};

// ---------------------------------------------------------------------------

inline MotionMask init_mask(int width, int height, int grid_n,
                            double initial_interval = 500.0) {
    if (grid_n < 1) throw std::invalid_argument("init_mask: grid_n must be >= 1");
    MotionMask mask;
    mask.image_width = width;
    mask.image_height = height;
    mask.grid_n = grid_n;
    mask.update_interval = initial_interval;
    mask.next_update_iter = std::int64_t(std::llround(initial_interval));
    int cell_w = width / grid_n, cell_h = height / grid_n;
    for (int gy = 0; gy < grid_n; ++gy)
        for (int gx = 0; gx < grid_n; ++gx) {
            Region r;
            r.id = mask.next_region_id++;
            r.x0 = gx * cell_w;
            r.y0 = gy * cell_h;
            r.x1 = (gx == grid_n - 1) ? width : (gx + 1) * cell_w;   // last cell absorbs
            r.y1 = (gy == grid_n - 1) ? height : (gy + 1) * cell_h;  // the remainder
            mask.regions.push_back(r);
        }
    return mask;
}

// Region membership by the canonical projected mean; off-image or culled
// Gaussians get -1.
inline std::vector<int> assign_regions(const Camera& cam, const GaussianCloud& cloud,
                                       const MotionMask& mask) {
    std::vector<int> assignment(cloud.count(), -1);
    parallel_for(cloud.count(), [&](std::size_t i) {
        Vec3 t = cam.world_to_cam(cloud.means[i]);
        if (t.z() <= cam.znear || t.z() >= cam.zfar) return;
        int px = int(std::floor(cam.fx * t.x() / t.z() + cam.cx));
        int py = int(std::floor(cam.fy * t.y() / t.z() + cam.cy));
        if (px < 0 || px >= cam.width || py < 0 || py >= cam.height) return;
        assignment[i] = mask.region_index_at(px, py);
    });
    return assignment;
}

// True = pass through the deformation field. Unassigned Gaussians stay
// deformable.
inline std::vector<std::uint8_t> active_flags(const MotionMask& mask,
                                              const std::vector<int>& assignment) {
    std::vector<std::uint8_t> flags(assignment.size(), 1);
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        int r = assignment[i];
        if (r >= 0 && mask.regions[std::size_t(r)].status == RegionStatus::static_)
            flags[i] = 0;
    }
    return flags;
}

// ---------------------------------------------------------------------------
// Update-criteria statistics over K sampled frames: mean normalized position
// change per region, and per-region 8-bit MAE of the fully deformed render
// (loss_deformed) vs the canonical render (loss_canonical) against ground
// truth. Tool pixels are excluded.

inline RegionStats compute_region_stats(const GaussianCloud& cloud, const DeformField& field,
                                        const std::vector<int>& assignment, const Camera& cam,
                                        const std::vector<const FrameSample*>& frames,
                                        const MotionMask& mask,
                                        const RasterSettings& raster_settings = {}) {
    if (frames.empty())
        throw std::invalid_argument("compute_region_stats: need at least one sampled frame");

    std::size_t n = cloud.count();
    std::size_t nregions = mask.regions.size();
    RegionStats stats;
    stats.entries.assign(nregions, {});
    for (std::size_t i = 0; i < n; ++i)
        if (assignment[i] >= 0) stats.entries[std::size_t(assignment[i])].gaussian_count++;

    // scene bounding-box extents normalize the per-axis position changes
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const Vec3& m : cloud.means) {
        lo = lo.cwiseMin(m);
        hi = hi.cwiseMax(m);
    }
    Vec3 extent = (n > 0) ? Vec3((hi - lo).cwiseMax(1e-9)) : Vec3(Vec3::Ones());

    std::vector<std::uint8_t> all_active(n, 1);
    std::vector<std::uint8_t> none_active(n, 0);
    std::vector<double> deform_sum(nregions, 0.0);
    std::vector<double> loss_d_sum(nregions, 0.0), loss_s_sum(nregions, 0.0);
    std::vector<std::size_t> valid_px(nregions, 0);

    int basis = field.basis();
    for (const FrameSample* frame : frames) {
        double t = frame->timestamp;

        for (std::size_t i = 0; i < n; ++i) {
            if (assignment[i] < 0) continue;
            Vec3 moved;
            deform_attribute({cloud.means[i].data(), 3},
                             {field.position.weight_row(i), std::size_t(3 * basis)},
                             {field.position.center_row(i), std::size_t(basis)},
                             {field.position.width_row(i), std::size_t(basis)}, t,
                             {moved.data(), 3});
            Vec3 delta = (moved - cloud.means[i]).cwiseAbs().cwiseQuotient(extent);
            deform_sum[std::size_t(assignment[i])] += delta.sum() / 3.0;
        }

        RenderOutput deformed = rasterize(cam, deform_cloud(cloud, field, t, all_active),
                                          raster_settings);
        RenderOutput canonical = rasterize(cam, deform_cloud(cloud, field, t, none_active),
                                           raster_settings);
        for (std::size_t r = 0; r < nregions; ++r) {
            const Region& reg = mask.regions[r];
            double acc_d = 0.0, acc_s = 0.0;
            std::size_t count = 0;
            for (int py = reg.y0; py < reg.y1; ++py)
                for (int px = reg.x0; px < reg.x1; ++px) {
                    if (frame->tool_mask.at(px, py)) continue;
                    for (int c = 0; c < 3; ++c) {
                        double gt = frame->image.at(px, py, c);
                        acc_d += std::abs(deformed.color.at(px, py, c) - gt);
                        acc_s += std::abs(canonical.color.at(px, py, c) - gt);
                    }
                    ++count;
                }
            if (count > 0) {
                loss_d_sum[r] += 255.0 * acc_d / double(3 * count);
                loss_s_sum[r] += 255.0 * acc_s / double(3 * count);
                valid_px[r] += count;
            }
        }
    }

    double k = double(frames.size());
    for (std::size_t r = 0; r < nregions; ++r) {
        auto& e = stats.entries[r];
        if (e.gaussian_count > 0)
            e.avg_deform = deform_sum[r] / (k * double(e.gaussian_count));
        e.no_valid_pixels = (valid_px[r] == 0);
        if (!e.no_valid_pixels) {
            e.loss_deformed = loss_d_sum[r] / k;
            e.loss_canonical = loss_s_sum[r] / k;
        }
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Mask update: classify each region from the two criteria, split conflicting
// regions into four dynamic children, recover static regions whose canonical
// loss has grown, then rescale the update interval by the loss ratio.

namespace detail {

inline bool splittable(const Region& r, int min_side) {
    return r.width() / 2 >= min_side && r.height() / 2 >= min_side;
}

inline void split_region(const Region& parent, std::vector<Region>& out,
                         std::int32_t& next_id) {
    int mx = parent.x0 + parent.width() / 2;
    int my = parent.y0 + parent.height() / 2;
    for (int quad = 0; quad < 4; ++quad) {
        Region child;
        child.id = next_id++;
        child.x0 = (quad % 2 == 0) ? parent.x0 : mx;
        child.x1 = (quad % 2 == 0) ? mx : parent.x1;
        child.y0 = (quad / 2 == 0) ? parent.y0 : my;
        child.y1 = (quad / 2 == 0) ? my : parent.y1;
        child.status = RegionStatus::dynamic;
        child.depth = parent.depth + 1;
        out.push_back(child);
    }
}

}  // namespace detail

inline MotionMask update_mask(const MotionMask& mask, const RegionStats& stats,
                              std::int64_t current_iter, double current_loss,
                              const MotionSettings& settings = {}) {
    if (stats.entries.size() != mask.regions.size())
        throw std::invalid_argument("update_mask: stats do not match mask regions");

    MotionMask out = mask;
    out.regions.clear();
    for (std::size_t r = 0; r < mask.regions.size(); ++r) {
        Region region = mask.regions[r];
        const RegionStats::Entry& e = stats.entries[r];

        if (e.no_valid_pixels) {
            region.status = RegionStatus::static_;
            out.regions.push_back(region);
            continue;
        }

        bool in_potential_dynamic = e.avg_deform > settings.delta1;              // Q
        bool in_potential_static = !in_potential_dynamic;                        // W
        bool loss_consistent =
            std::abs(e.loss_deformed - e.loss_canonical) < settings.delta2;      // W'
        bool loss_dynamic = !loss_consistent;                                    // Q'

        bool is_static, is_dynamic;
        if (settings.uc1_enabled && settings.uc2_enabled) {
            is_static = in_potential_static && loss_consistent;
            is_dynamic = in_potential_dynamic && loss_dynamic;
        } else if (settings.uc1_enabled) {
            is_static = in_potential_static;
            is_dynamic = in_potential_dynamic;
        } else if (settings.uc2_enabled) {
            is_static = loss_consistent;
            is_dynamic = loss_dynamic;
        } else {
            is_static = false;
            is_dynamic = true;
        }

        bool was_static = region.status == RegionStatus::static_;
        if (is_static) {
            region.status = RegionStatus::static_;
        } else if (is_dynamic) {
            region.status = RegionStatus::dynamic;
        } else if (!settings.region_split_enabled) {
            region.status = RegionStatus::static_;
        } else if (detail::splittable(region, settings.min_region_side)) {
            detail::split_region(region, out.regions, out.next_region_id);
            continue;
        } else {
            region.status = RegionStatus::dynamic;
        }

        // late-onset motion: a frozen static region whose canonical render
        // has degraded re-enters training
        if (was_static && region.status == RegionStatus::static_ &&
            e.loss_canonical > settings.delta3)
            region.status = RegionStatus::dynamic;

        out.regions.push_back(region);
    }

    if (settings.adaptive_interval_enabled && mask.last_update_loss > 0.0 &&
        current_loss > 0.0) {
        double factor = mask.last_update_loss / current_loss;
        factor = std::clamp(factor, settings.interval_factor_min, settings.interval_factor_max);
        out.update_interval = mask.update_interval * factor;
    }
    out.last_update_loss = current_loss;
    out.next_update_iter = current_iter + std::int64_t(std::llround(out.update_interval));
    return out;
}

}  // namespace ehsg
