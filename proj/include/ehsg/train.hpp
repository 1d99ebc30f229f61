#pragma once

#include <set>
#include <sstream>

#include "ehsg/autodiff.hpp"
#include "ehsg/data.hpp"
#include "ehsg/deform.hpp"
#include "ehsg/metrics.hpp"
#include "ehsg/motion.hpp"

namespace ehsg {

// ---------------------------------------------------------------------------
// Training configuration. Every key is settable from config files and CLI
// overrides; unknown keys are rejected.

struct TrainConfig {
    long iterations = 3000;
    double learning_rate = 1.6e-3;
    double lambda_rank = 2e-4;
    long rank_pairs = 1024;
    double rank_margin_scale = 1e-4;  // margin = scale * zfar
    double depth_weight = 1.0;
    int basis_count = kDefaultBasisCount;
    LifecycleMode lifecycle_mode = LifecycleMode::additive;
    bool amhs_enabled = true;
    int grid_n = 4;
    MotionSettings motion;
    double initial_update_interval = 500.0;
    int stats_timestamps = 10;
    bool densify_enabled = false;
    long densify_interval = 500;
    double densify_grad_threshold = 2e-4;
    double densify_scale_threshold = 0.01;  // fraction of scene extent
    double prune_opacity = 0.005;
    int init_stride = 2;
    bool normalize_depth = false;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_epsilon = 1e-15;
    std::uint64_t seed = 0;
    double lr_means = 1.0, lr_scales = 1.0, lr_rotations = 1.0, lr_opacities = 1.0,
           lr_colors = 1.0, lr_field = 1.0;

    RasterSettings raster() const {
        RasterSettings rs;
        rs.normalize_depth = normalize_depth;
        return rs;
    }

    void validate() const {
        if (iterations < 0) throw UsageError("iterations must be >= 0");
        if (basis_count < 1) throw UsageError("basis_count must be >= 1");
        if (grid_n < 1) throw UsageError("grid_n must be >= 1");
        if (!(motion.delta1 > 0 && motion.delta2 > 0 && motion.delta3 > 0))
            throw UsageError("thresholds delta1/delta2/delta3 must be > 0");
        if (init_stride < 1) throw UsageError("init_stride must be >= 1");
        if (!(initial_update_interval >= 1.0))
            throw UsageError("initial_update_interval must be >= 1");
        if (stats_timestamps < 1) throw UsageError("stats_timestamps must be >= 1");
    }
};

inline const std::set<std::string>& train_config_keys() {
    static const std::set<std::string> keys = {
        "iterations", "learning_rate", "lambda_rank", "rank_pairs", "rank_margin_scale",
        "depth_weight", "basis_count", "lifecycle_mode", "amhs_enabled", "grid_n", "delta1",
        "delta2", "delta3", "min_region_side", "uc1_enabled", "uc2_enabled",
        "region_split_enabled", "adaptive_interval_enabled", "initial_update_interval",
        "stats_timestamps", "densify_enabled", "densify_interval", "densify_grad_threshold",
        "densify_scale_threshold", "prune_opacity", "init_stride", "normalize_depth",
        "adam_beta1", "adam_beta2", "adam_epsilon", "seed", "lr_means", "lr_scales",
        "lr_rotations", "lr_opacities", "lr_colors", "lr_field"};
    return keys;
}

inline TrainConfig config_from_kv(const KvMap& kv) {
    for (const auto& [key, value] : kv)
        if (!train_config_keys().count(key)) throw UsageError("unknown config key: " + key);
    TrainConfig c;
    c.iterations = kv_long(kv, "iterations", c.iterations);
    c.learning_rate = kv_double(kv, "learning_rate", c.learning_rate);
    c.lambda_rank = kv_double(kv, "lambda_rank", c.lambda_rank);
    c.rank_pairs = kv_long(kv, "rank_pairs", c.rank_pairs);
    c.rank_margin_scale = kv_double(kv, "rank_margin_scale", c.rank_margin_scale);
    c.depth_weight = kv_double(kv, "depth_weight", c.depth_weight);
    c.basis_count = int(kv_long(kv, "basis_count", c.basis_count));
    c.lifecycle_mode = lifecycle_from_string(
        kv_string(kv, "lifecycle_mode", to_string(c.lifecycle_mode)));
    c.amhs_enabled = kv_bool(kv, "amhs_enabled", c.amhs_enabled);
    c.grid_n = int(kv_long(kv, "grid_n", c.grid_n));
    c.motion.delta1 = kv_double(kv, "delta1", c.motion.delta1);
    c.motion.delta2 = kv_double(kv, "delta2", c.motion.delta2);
    c.motion.delta3 = kv_double(kv, "delta3", c.motion.delta3);
    c.motion.min_region_side = int(kv_long(kv, "min_region_side", c.motion.min_region_side));
    c.motion.uc1_enabled = kv_bool(kv, "uc1_enabled", c.motion.uc1_enabled);
    c.motion.uc2_enabled = kv_bool(kv, "uc2_enabled", c.motion.uc2_enabled);
    c.motion.region_split_enabled =
        kv_bool(kv, "region_split_enabled", c.motion.region_split_enabled);
    c.motion.adaptive_interval_enabled =
        kv_bool(kv, "adaptive_interval_enabled", c.motion.adaptive_interval_enabled);
    c.initial_update_interval =
        kv_double(kv, "initial_update_interval", c.initial_update_interval);
    c.stats_timestamps = int(kv_long(kv, "stats_timestamps", c.stats_timestamps));
    c.densify_enabled = kv_bool(kv, "densify_enabled", c.densify_enabled);
    c.densify_interval = kv_long(kv, "densify_interval", c.densify_interval);
    c.densify_grad_threshold = kv_double(kv, "densify_grad_threshold", c.densify_grad_threshold);
    c.densify_scale_threshold =
        kv_double(kv, "densify_scale_threshold", c.densify_scale_threshold);
    c.prune_opacity = kv_double(kv, "prune_opacity", c.prune_opacity);
    c.init_stride = int(kv_long(kv, "init_stride", c.init_stride));
    c.normalize_depth = kv_bool(kv, "normalize_depth", c.normalize_depth);
    c.adam_beta1 = kv_double(kv, "adam_beta1", c.adam_beta1);
    c.adam_beta2 = kv_double(kv, "adam_beta2", c.adam_beta2);
    c.adam_epsilon = kv_double(kv, "adam_epsilon", c.adam_epsilon);
    c.seed = std::uint64_t(kv_long(kv, "seed", long(c.seed)));
    c.lr_means = kv_double(kv, "lr_means", c.lr_means);
    c.lr_scales = kv_double(kv, "lr_scales", c.lr_scales);
    c.lr_rotations = kv_double(kv, "lr_rotations", c.lr_rotations);
    c.lr_opacities = kv_double(kv, "lr_opacities", c.lr_opacities);
    c.lr_colors = kv_double(kv, "lr_colors", c.lr_colors);
    c.lr_field = kv_double(kv, "lr_field", c.lr_field);
    c.validate();
    return c;
}

inline std::string config_to_text(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "iterations=" << c.iterations << "\nlearning_rate=" << c.learning_rate
       << "\nlambda_rank=" << c.lambda_rank << "\nrank_pairs=" << c.rank_pairs
       << "\nrank_margin_scale=" << c.rank_margin_scale << "\ndepth_weight=" << c.depth_weight
       << "\nbasis_count=" << c.basis_count
       << "\nlifecycle_mode=" << to_string(c.lifecycle_mode)
       << "\namhs_enabled=" << (c.amhs_enabled ? 1 : 0) << "\ngrid_n=" << c.grid_n
       << "\ndelta1=" << c.motion.delta1 << "\ndelta2=" << c.motion.delta2
       << "\ndelta3=" << c.motion.delta3 << "\nmin_region_side=" << c.motion.min_region_side
       << "\nuc1_enabled=" << (c.motion.uc1_enabled ? 1 : 0)
       << "\nuc2_enabled=" << (c.motion.uc2_enabled ? 1 : 0)
       << "\nregion_split_enabled=" << (c.motion.region_split_enabled ? 1 : 0)
       << "\nadaptive_interval_enabled=" << (c.motion.adaptive_interval_enabled ? 1 : 0)
       << "\ninitial_update_interval=" << c.initial_update_interval
       << "\nstats_timestamps=" << c.stats_timestamps
       << "\ndensify_enabled=" << (c.densify_enabled ? 1 : 0)
       << "\ndensify_interval=" << c.densify_interval
       << "\ndensify_grad_threshold=" << c.densify_grad_threshold
       << "\ndensify_scale_threshold=" << c.densify_scale_threshold
       << "\nprune_opacity=" << c.prune_opacity << "\ninit_stride=" << c.init_stride
       << "\nnormalize_depth=" << (c.normalize_depth ? 1 : 0)
       << "\nadam_beta1=" << c.adam_beta1 << "\nadam_beta2=" << c.adam_beta2
       << "\nadam_epsilon=" << c.adam_epsilon << "\nseed=" << c.seed
       << "\nlr_means=" << c.lr_means << "\nlr_scales=" << c.lr_scales
       << "\nlr_rotations=" << c.lr_rotations << "\nlr_opacities=" << c.lr_opacities
       << "\nlr_colors=" << c.lr_colors << "\nlr_field=" << c.lr_field << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Adam with bias correction; epsilon sits outside the square root.

struct AdamTensor {
    std::vector<double> m, v;
    void resize(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
};

struct OptimizerState {
    long step = 0;
    AdamTensor means, raw_scales, rotations, raw_opacities, colors;
    struct FieldState {
        AdamTensor weights, centers, widths;
    } position, rotation, scale, opacity;

    void resize(std::size_t n, const DeformField& field) {
        means.resize(3 * n);
        raw_scales.resize(3 * n);
        rotations.resize(4 * n);
        raw_opacities.resize(n);
        colors.resize(3 * n);
        auto fit = [](FieldState& st, const AttributeField& f) {
            st.weights.resize(f.weights.size());
            st.centers.resize(f.centers.size());
            st.widths.resize(f.widths.size());
        };
        fit(position, field.position);
        fit(rotation, field.rotation);
        fit(scale, field.scale);
        fit(opacity, field.opacity);
    }
};

namespace detail {

inline void adam_step_array(double* params, const double* grads, AdamTensor& state,
                            std::size_t n, double lr, long step, double beta1, double beta2,
                            double eps, const char* path) {
    double bc1 = 1.0 - std::pow(beta1, double(step));
    double bc2 = 1.0 - std::pow(beta2, double(step));
    for (std::size_t k = 0; k < n; ++k) {
        double g = grads[k];
        if (!std::isfinite(g))
            throw NumericError(std::string("non-finite gradient at ") + path + "[" +
                               std::to_string(k) + "]");
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
        double m_hat = state.m[k] / bc1;
        double v_hat = state.v[k] / bc2;
        params[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

}  // namespace detail

// One optimizer step over all parameter groups, followed by the post-step
// projections (basis-width floor, color range).
inline void adam_step(GaussianCloud& cloud, DeformField& field, const GradientBundle& g,
                      OptimizerState& state, const TrainConfig& cfg) {
    ++state.step;
    if (cloud.count() == 0) return;
    long t = state.step;
    double lr = cfg.learning_rate;
    auto run = [&](double* p, const double* grad, AdamTensor& st, std::size_t n, double mult,
                   const char* path) {
        detail::adam_step_array(p, grad, st, n, lr * mult, t, cfg.adam_beta1, cfg.adam_beta2,
                                cfg.adam_epsilon, path);
    };

    std::size_t n = cloud.count();
    run(cloud.means.data()->data(), g.d_means.data()->data(), state.means, 3 * n, cfg.lr_means,
        "means");
    run(cloud.raw_scales.data()->data(), g.d_raw_scales.data()->data(), state.raw_scales, 3 * n,
        cfg.lr_scales, "raw_scales");
    run(cloud.rotations.data()->data(), g.d_rotations.data()->data(), state.rotations, 4 * n,
        cfg.lr_rotations, "rotations");
    run(cloud.raw_opacities.data(), g.d_raw_opacities.data(), state.raw_opacities, n,
        cfg.lr_opacities, "raw_opacities");
    run(cloud.colors.data()->data(), g.d_colors.data()->data(), state.colors, 3 * n,
        cfg.lr_colors, "colors");

    auto run_field = [&](AttributeField& f, const FieldGrads& fg,
                         OptimizerState::FieldState& st, const char* name) {
        run(f.weights.data(), fg.weights.data(), st.weights, f.weights.size(), cfg.lr_field,
            (std::string(name) + ".weights").c_str());
        run(f.centers.data(), fg.centers.data(), st.centers, f.centers.size(), cfg.lr_field,
            (std::string(name) + ".centers").c_str());
        run(f.widths.data(), fg.widths.data(), st.widths, f.widths.size(), cfg.lr_field,
            (std::string(name) + ".widths").c_str());
        for (double& w : f.widths) w = std::max(w, kWidthFloor);
    };
    run_field(field.position, g.position, state.position, "field.position");
    run_field(field.rotation, g.rotation, state.rotation, "field.rotation");
    run_field(field.scale, g.scale, state.scale, "field.scale");
    run_field(field.opacity, g.opacity, state.opacity, "field.opacity");

    for (Vec3& c : cloud.colors) c = c.cwiseMax(0.0).cwiseMin(1.0);
}

// ---------------------------------------------------------------------------
// Masked photometric/depth losses and the sampled depth-ranking hinge.

struct LossValues {
    double color = 0.0;
    double depth = 0.0;
    double rank = 0.0;
    double total = 0.0;
};

struct LossGradients {
    LossValues values;
    Image<double> d_color;  // dL_total/dC per pixel/channel
    Image<double> d_depth;  // dL_total/dD per pixel
    // hash over every residual/hinge sign the L1 terms take; used by
    // finite-difference checks to spot kinks inside the step window
    std::uint64_t kink_signature = 0;
};

namespace detail {

inline void mix_sign(std::uint64_t& h, bool positive) {
    h = (h ^ (positive ? 0x9e3779b97f4a7c15ULL : 0xc2b2ae3d27d4eb4fULL)) *
        0xbf58476d1ce4e5b9ULL;
    h ^= h >> 29;
}

}  // namespace detail

inline LossGradients loss_gradients(const RenderOutput& render, const FrameSample& frame,
                                    const TrainConfig& cfg, double zfar,
                                    std::uint64_t pair_seed) {
    const Image<double>& gt = frame.image;
    if (!render.color.same_shape(gt))
        throw std::invalid_argument("losses: render/frame shapes differ");

    if (gt.empty()) throw DataError("losses: frame has zero pixels");

    LossGradients out;
    out.d_color = Image<double>(gt.width, gt.height, 3);
    out.d_depth = Image<double>(gt.width, gt.height, 1);

    std::size_t valid_color = 0, valid_depth = 0;
    for (int y = 0; y < gt.height; ++y)
        for (int x = 0; x < gt.width; ++x) {
            if (frame.tool_mask.at(x, y)) continue;
            ++valid_color;
            if (frame.depth.at(x, y) > 0.0) ++valid_depth;
        }

    // the (1 - M) mask factor: a fully tool-masked frame scores zero
    double acc_color = 0.0, acc_depth = 0.0;
    for (int y = 0; y < gt.height && valid_color > 0; ++y)
        for (int x = 0; x < gt.width; ++x) {
            if (frame.tool_mask.at(x, y)) continue;
            for (int c = 0; c < 3; ++c) {
                double diff = render.color.at(x, y, c) - gt.at(x, y, c);
                acc_color += std::abs(diff);
                out.d_color.at(x, y, c) = sgn(diff) / double(3 * valid_color);
                detail::mix_sign(out.kink_signature, diff > 0.0);
            }
            if (frame.depth.at(x, y) > 0.0) {
                double diff = render.depth.at(x, y) - frame.depth.at(x, y);
                acc_depth += std::abs(diff) * cfg.depth_weight;
                out.d_depth.at(x, y) = sgn(diff) * cfg.depth_weight / double(valid_depth);
                detail::mix_sign(out.kink_signature, diff > 0.0);
            }
        }
    out.values.color = valid_color > 0 ? acc_color / double(3 * valid_color) : 0.0;
    out.values.depth = valid_depth > 0 ? acc_depth / double(valid_depth) : 0.0;

    // sampled pairwise ranking hinge on rendered depth, ordered by the
    // ground-truth depth with a margin
    double margin = cfg.rank_margin_scale * zfar;
    Rng rng(pair_seed);
    double acc_rank = 0.0;
    struct ActivePair {
        int px, py, qx, qy;
    };
    std::vector<ActivePair> active;
    std::size_t kept = 0;
    for (long s = 0; s < cfg.rank_pairs; ++s) {
        int ax = int(rng.uniform_index(std::uint64_t(gt.width)));
        int ay = int(rng.uniform_index(std::uint64_t(gt.height)));
        int bx = int(rng.uniform_index(std::uint64_t(gt.width)));
        int by = int(rng.uniform_index(std::uint64_t(gt.height)));
        if (frame.tool_mask.at(ax, ay) || frame.tool_mask.at(bx, by)) continue;
        double da = frame.depth.at(ax, ay), db = frame.depth.at(bx, by);
        if (!(da > 0.0) || !(db > 0.0)) continue;
        int px, py, qx, qy;
        if (da + margin < db) {
            px = ax; py = ay; qx = bx; qy = by;
        } else if (db + margin < da) {
            px = bx; py = by; qx = ax; qy = ay;
        } else {
            continue;
        }
        ++kept;
        double hinge = render.depth.at(px, py) - render.depth.at(qx, qy);
        detail::mix_sign(out.kink_signature, hinge > 0.0);
        if (hinge > 0.0) {
            acc_rank += hinge;
            active.push_back({px, py, qx, qy});
        }
    }
    if (kept > 0) {
        out.values.rank = acc_rank / double(kept);
        double w = cfg.lambda_rank / double(kept);
        for (const ActivePair& p : active) {
            out.d_depth.at(p.px, p.py) += w;
            out.d_depth.at(p.qx, p.qy) -= w;
        }
    }

    out.values.total =
        out.values.color + out.values.depth + cfg.lambda_rank * out.values.rank;
    return out;
}

inline LossValues losses(const RenderOutput& render, const FrameSample& frame,
                         const TrainConfig& cfg, double zfar, std::uint64_t pair_seed) {
    return loss_gradients(render, frame, cfg, zfar, pair_seed).values;
}

// ---------------------------------------------------------------------------
// Optional density control: clone or split high-gradient Gaussians, prune
// transparent ones (lifecycle `none` only, where low canonical opacity
// cannot mean "not yet appeared").

inline void densify_prune(GaussianCloud& cloud, DeformField& field, OptimizerState& state,
                          const std::vector<double>& mean_grad_norm, const TrainConfig& cfg,
                          double scene_extent) {
    std::size_t n = cloud.count();
    GaussianCloud next_cloud;
    DeformField next_field = init_field(0, field.basis(), field.lifecycle_mode);

    auto copy_row = [&](std::size_t i, const Vec3& mean, const Vec3& raw_scale) {
        next_cloud.means.push_back(mean);
        next_cloud.raw_scales.push_back(raw_scale);
        next_cloud.rotations.push_back(cloud.rotations[i]);
        next_cloud.raw_opacities.push_back(cloud.raw_opacities[i]);
        next_cloud.colors.push_back(cloud.colors[i]);
        auto append = [&](AttributeField& dst, const AttributeField& src) {
            dst.count++;
            dst.weights.insert(dst.weights.end(), src.weight_row(i),
                               src.weight_row(i) + src.channels * src.basis);
            dst.centers.insert(dst.centers.end(), src.center_row(i),
                               src.center_row(i) + src.basis);
            dst.widths.insert(dst.widths.end(), src.width_row(i), src.width_row(i) + src.basis);
        };
        append(next_field.position, field.position);
        append(next_field.rotation, field.rotation);
        append(next_field.scale, field.scale);
        append(next_field.opacity, field.opacity);
    };

    for (std::size_t i = 0; i < n; ++i) {
        if (field.lifecycle_mode == LifecycleMode::none &&
            sigmoid(cloud.raw_opacities[i]) < cfg.prune_opacity)
            continue;
        Vec3 scales = cloud.raw_scales[i].array().exp();
        double max_scale = scales.maxCoeff();
        bool hot = mean_grad_norm[i] > cfg.densify_grad_threshold;
        if (!hot) {
            copy_row(i, cloud.means[i], cloud.raw_scales[i]);
        } else if (max_scale <= cfg.densify_scale_threshold * scene_extent) {
            copy_row(i, cloud.means[i], cloud.raw_scales[i]);  // clone in place
            copy_row(i, cloud.means[i], cloud.raw_scales[i]);
        } else {
            int axis = 0;
            scales.maxCoeff(&axis);
            Vec3 dir = quat_to_rotation(cloud.rotations[i]).col(axis);
            Vec3 offset = dir * (0.5 * max_scale);
            Vec3 shrunk = cloud.raw_scales[i].array() - std::log(1.6);
            copy_row(i, cloud.means[i] + offset, shrunk);
            copy_row(i, cloud.means[i] - offset, shrunk);
        }
    }
    cloud = std::move(next_cloud);
    field = std::move(next_field);
    long step = state.step;
    state = OptimizerState{};
    state.step = step;
    state.resize(cloud.count(), field);
}

// ---------------------------------------------------------------------------
// Training loop

struct IterRecord {
    long iter = 0;
    LossValues loss;
    std::size_t active_count = 0;
    std::size_t gaussian_count = 0;
};

struct TrainLog {
    std::vector<IterRecord> iters;
    std::vector<std::string> events;  // mask-update tables, densify notes
    std::uint64_t deformed_evaluations = 0;

    std::string to_text() const {
        std::ostringstream os;
        os.precision(12);
        std::size_t next_event = 0;
        for (const IterRecord& r : iters) {
            os << "iter=" << r.iter << " loss_c=" << r.loss.color << " loss_d=" << r.loss.depth
               << " loss_rank=" << r.loss.rank << " loss=" << r.loss.total
               << " active=" << r.active_count << " gaussians=" << r.gaussian_count << "\n";
            while (next_event < events.size() &&
                   events[next_event].rfind("@" + std::to_string(r.iter) + " ", 0) == 0) {
                os << events[next_event].substr(events[next_event].find(' ') + 1) << "\n";
                ++next_event;
            }
        }
        for (; next_event < events.size(); ++next_event)
            os << events[next_event].substr(events[next_event].find(' ') + 1) << "\n";
        os << "deformed_evaluations=" << deformed_evaluations << "\n";
        return os.str();
    }
};

struct TrainResult {
    GaussianCloud cloud;
    DeformField field;
    MotionMask mask;
    OptimizerState optimizer;
    TrainLog log;
};

namespace detail {

inline std::vector<const FrameSample*> stats_frames(const Dataset& dataset, int k) {
    std::vector<const FrameSample*> frames;
    const auto& train = dataset.train_indices;
    int n = int(train.size());
    k = std::max(1, std::min(k, n));
    std::set<int> chosen;
    for (int j = 0; j < k; ++j)
        chosen.insert(train[std::size_t(std::llround(double(j) * (n - 1) / std::max(1, k - 1)))]);
    for (int idx : chosen) frames.push_back(&dataset.frames[std::size_t(idx)]);
    return frames;
}

inline std::string region_table(const MotionMask& before, const RegionStats& stats,
                                const MotionMask& after, long iter) {
    std::ostringstream os;
    os.precision(5);
    std::size_t statics = 0;
    for (const Region& r : after.regions)
        if (r.status == RegionStatus::static_) ++statics;
    os << "mask_update iter=" << iter << " interval=" << after.update_interval
       << " next=" << after.next_update_iter << " regions=" << after.regions.size()
       << " static=" << statics << "\n";
    for (std::size_t r = 0; r < stats.entries.size(); ++r) {
        const auto& e = stats.entries[r];
        const Region& reg = before.regions[r];
        os << "region id=" << reg.id << " rect=" << reg.x0 << "," << reg.y0 << "," << reg.x1
           << "," << reg.y1 << " dt=" << e.avg_deform << " ld=" << e.loss_deformed
           << " ls=" << e.loss_canonical << " gaussians=" << e.gaussian_count << "\n";
    }
    for (const Region& reg : after.regions)
        os << "region_status id=" << reg.id << " depth=" << reg.depth << " status="
           << (reg.status == RegionStatus::static_ ? "static" : "dynamic") << "\n";
    std::string s = os.str();
    if (!s.empty() && s.back() == '\n') s.pop_back();
    return s;
}

}  // namespace detail

inline TrainResult train(const Dataset& dataset, const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.train_indices.size() < 2)
        throw DataError("train: dataset needs at least 2 training frames");
    const Camera& cam = dataset.camera;
    RasterSettings rs = cfg.raster();

    TrainResult res;
    res.cloud = backproject_init(dataset.frames[std::size_t(dataset.train_indices.front())],
                                 cam, cfg.init_stride);
    res.field = init_field(res.cloud.count(), cfg.basis_count, cfg.lifecycle_mode);
    res.mask = init_mask(cam.width, cam.height, cfg.grid_n, cfg.initial_update_interval);
    res.optimizer.resize(res.cloud.count(), res.field);

    std::vector<double> grad_norm_accum(res.cloud.count(), 0.0);
    long grad_norm_steps = 0;

    std::size_t n_train = dataset.train_indices.size();
    for (long iter = 1; iter <= cfg.iterations; ++iter) {
        const FrameSample& frame =
            dataset.frames[std::size_t(dataset.train_indices[(iter - 1) % n_train])];

        std::vector<int> assignment;
        std::vector<std::uint8_t> flags;
        if (cfg.amhs_enabled) {
            assignment = assign_regions(cam, res.cloud, res.mask);
            flags = active_flags(res.mask, assignment);
        } else {
            flags.assign(res.cloud.count(), 1);
        }
        std::size_t active_count = 0;
        for (std::uint8_t f : flags) active_count += f;

        RenderAttributes attrs = deform_cloud(res.cloud, res.field, frame.timestamp, flags);
        RenderOutput render = rasterize(cam, attrs, rs);
        LossGradients lg = loss_gradients(render, frame, cfg, cam.zfar,
                                          mix_seed(cfg.seed, std::uint64_t(iter)));
        AttrGrads ag = backward_render(cam, attrs, render, lg.d_color, lg.d_depth, rs);
        GradientBundle bundle =
            backward_deform(res.cloud, res.field, frame.timestamp, flags, ag);
        adam_step(res.cloud, res.field, bundle, res.optimizer, cfg);

        res.log.iters.push_back(
            {iter, lg.values, active_count, res.cloud.count()});
        res.log.deformed_evaluations += active_count;

        if (cfg.densify_enabled) {
            for (std::size_t i = 0; i < res.cloud.count(); ++i)
                grad_norm_accum[i] += render.per_gaussian_grad_norm[i];
            ++grad_norm_steps;
            if (iter % cfg.densify_interval == 0 && iter < cfg.iterations) {
                Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
                Vec3 hi = -lo;
                for (const Vec3& m : res.cloud.means) {
                    lo = lo.cwiseMin(m);
                    hi = hi.cwiseMax(m);
                }
                double extent = (hi - lo).norm();
                std::vector<double> mean_norm(res.cloud.count());
                for (std::size_t i = 0; i < res.cloud.count(); ++i)
                    mean_norm[i] = grad_norm_accum[i] / double(std::max(1L, grad_norm_steps));
                std::size_t before = res.cloud.count();
                densify_prune(res.cloud, res.field, res.optimizer, mean_norm, cfg, extent);
                grad_norm_accum.assign(res.cloud.count(), 0.0);
                grad_norm_steps = 0;
                res.log.events.push_back("@" + std::to_string(iter) + " densify iter=" +
                                         std::to_string(iter) + " before=" +
                                         std::to_string(before) + " after=" +
                                         std::to_string(res.cloud.count()));
            }
        }

        if (cfg.amhs_enabled && iter >= res.mask.next_update_iter) {
            auto frames = detail::stats_frames(dataset, cfg.stats_timestamps);
            assignment = assign_regions(cam, res.cloud, res.mask);  // means moved this step
            RegionStats stats = compute_region_stats(res.cloud, res.field, assignment, cam,
                                                     frames, res.mask, rs);
            MotionMask updated = update_mask(res.mask, stats, iter, lg.values.total, cfg.motion);
            res.log.events.push_back("@" + std::to_string(iter) + " " +
                                     detail::region_table(res.mask, stats, updated, iter));
            res.mask = std::move(updated);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Test-split evaluation

struct EvalRow {
    int frame = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalResult {
    std::vector<EvalRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

inline EvalResult evaluate(const Dataset& dataset, const GaussianCloud& cloud,
                           const DeformField& field, const MotionMask& mask, bool use_mask,
                           const RasterSettings& rs = {}) {
    EvalResult result;
    const Camera& cam = dataset.camera;
    std::vector<int> assignment;
    if (use_mask) assignment = assign_regions(cam, cloud, mask);
    std::vector<std::uint8_t> flags =
        use_mask ? active_flags(mask, assignment) : std::vector<std::uint8_t>(cloud.count(), 1);
    for (int idx : dataset.test_indices) {
        const FrameSample& frame = dataset.frames[std::size_t(idx)];
        RenderAttributes attrs = deform_cloud(cloud, field, frame.timestamp, flags);
        RenderOutput render = rasterize(cam, attrs, rs);
        EvalRow row;
        row.frame = idx;
        row.psnr = psnr(render.color, frame.image);
        row.ssim = ssim(render.color, frame.image);
        result.rows.push_back(row);
        result.mean_psnr += row.psnr;
        result.mean_ssim += row.ssim;
    }
    if (!result.rows.empty()) {
        result.mean_psnr /= double(result.rows.size());
        result.mean_ssim /= double(result.rows.size());
    }
    return result;
}

}  // namespace ehsg
