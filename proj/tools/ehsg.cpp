// Command-line front end: synthetic data generation, training, rendering,
// evaluation, benchmarking and gradient checking.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>

#include "ehsg/checkpoint.hpp"
#include "ehsg/data.hpp"
#include "ehsg/metrics.hpp"
#include "ehsg/train.hpp"

namespace {

using namespace ehsg;

int resolve_threads(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("EHSG_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 0;  // hardware default
}

void write_effective_config(const std::string& out_dir, const std::string& text) {
    fs::create_directories(out_dir);
    write_file_atomic(fs::path(out_dir) / "effective-config.txt", text);
}

KvMap merge_config_sources(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
    KvMap kv;
    if (!config_path.empty()) kv = parse_kv_text(read_file(config_path), config_path);
    for (const std::string& item : overrides) {
        std::size_t eq = item.find('=');
        if (eq == std::string::npos)
            throw UsageError("--set expects key=value, got '" + item + "'");
        kv[trim(item.substr(0, eq))] = trim(item.substr(eq + 1));
    }
    return kv;
}

// 7-stop blue->green->yellow->red gradient for depth visualization
Vec3 depth_color(double v) {
    static const double stops[7][3] = {{0.19, 0.07, 0.23}, {0.27, 0.00, 0.58},
                                       {0.13, 0.37, 0.84}, {0.03, 0.70, 0.67},
                                       {0.35, 0.85, 0.28}, {0.90, 0.83, 0.10},
                                       {0.98, 0.33, 0.05}};
    v = std::clamp(v, 0.0, 1.0) * 6.0;
    int lo = std::min(5, int(v));
    double f = v - lo;
    return Vec3((1 - f) * stops[lo][0] + f * stops[lo + 1][0],
                (1 - f) * stops[lo][1] + f * stops[lo + 1][1],
                (1 - f) * stops[lo][2] + f * stops[lo + 1][2]);
}

Image<double> colorize_depth(const Image<double>& depth) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (double d : depth.data)
        if (d > 0.0) {
            lo = std::min(lo, d);
            hi = std::max(hi, d);
        }
    if (!(hi > lo)) {
        lo = 0.0;
        hi = 1.0;
    }
    Image<double> out(depth.width, depth.height, 3);
    for (int y = 0; y < depth.height; ++y)
        for (int x = 0; x < depth.width; ++x) {
            double d = depth.at(x, y);
            Vec3 c = d > 0.0 ? depth_color((d - lo) / (hi - lo)) : Vec3(Vec3::Zero());
            out.at(x, y, 0) = c.x();
            out.at(x, y, 1) = c.y();
            out.at(x, y, 2) = c.z();
        }
    return out;
}

struct BenchResult {
    double fps = 0.0;
    std::uint64_t deformed = 0;
};

BenchResult bench_mode(const Dataset& ds, const Checkpoint& ckpt, bool use_mask, int repeats) {
    const Camera& cam = ds.camera;
    std::vector<int> assignment = assign_regions(cam, ckpt.cloud, ckpt.mask);
    std::vector<std::uint8_t> flags = use_mask
                                          ? active_flags(ckpt.mask, assignment)
                                          : std::vector<std::uint8_t>(ckpt.cloud.count(), 1);
    BenchResult result;
    for (std::uint8_t f : flags) result.deformed += f;
    result.deformed *= std::uint64_t(ds.frames.size()) * std::uint64_t(repeats);

    // warmup, then timed loop
    rasterize(cam, deform_cloud(ckpt.cloud, ckpt.field, ds.frames.front().timestamp, flags));
    auto start = std::chrono::steady_clock::now();
    for (int r = 0; r < repeats; ++r)
        for (const FrameSample& frame : ds.frames) {
            RenderAttributes attrs =
                deform_cloud(ckpt.cloud, ckpt.field, frame.timestamp, flags);
            RenderOutput out = rasterize(cam, attrs);
            (void)out;
        }
    double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.fps = double(ds.frames.size()) * repeats / seconds;
    return result;
}

int run_synth(const std::string& spec_path, const std::string& out_dir, long seed_override) {
    SynthSpec spec = parse_synth_spec(spec_path);
    if (seed_override >= 0) spec.seed = std::uint64_t(seed_override);
    fs::create_directories(out_dir);
    synth_generate(spec, out_dir);
    std::ostringstream os;
    os << "command=synth\nspec=" << spec_path << "\nseed=" << spec.seed
       << "\nframes=" << spec.frames << "\nwidth=" << spec.width << "\nheight=" << spec.height
       << "\n";
    write_effective_config(out_dir, os.str());
    std::cout << "wrote " << spec.frames << " frames to " << out_dir << "\n";
    return 0;
}

int run_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, const std::vector<std::string>& overrides,
              int threads) {
    TrainConfig cfg = config_from_kv(merge_config_sources(config_path, overrides));
    Dataset ds = load_dataset(data_dir);
    fs::create_directories(out_dir);
    write_effective_config(out_dir, config_to_text(cfg) + "threads=" +
                                        std::to_string(resolve_threads(threads)) + "\n");

    TrainResult res = train(ds, cfg);
    save_checkpoint((fs::path(out_dir) / "checkpoint.ehsg").string(),
                    {res.cloud, res.field, res.mask, res.optimizer,
                     std::uint64_t(cfg.iterations)});
    write_file_atomic(fs::path(out_dir) / "train_log.txt", res.log.to_text());
    double final_loss = res.log.iters.empty() ? 0.0 : res.log.iters.back().loss.total;
    std::cout << "trained " << cfg.iterations << " iterations, " << res.cloud.count()
              << " gaussians, final loss " << final_loss << "\n";
    std::cout << "checkpoint: " << (fs::path(out_dir) / "checkpoint.ehsg").string() << "\n";
    return 0;
}

int run_render(const std::string& ckpt_path, const std::string& data_dir,
               const std::string& out_dir, const std::string& times_csv) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Dataset ds = load_dataset(data_dir);
    fs::create_directories(out_dir);

    std::vector<double> times;
    std::size_t pos = 0;
    while (pos < times_csv.size()) {
        std::size_t comma = times_csv.find(',', pos);
        if (comma == std::string::npos) comma = times_csv.size();
        std::string item = trim(times_csv.substr(pos, comma - pos));
        if (!item.empty()) times.push_back(std::stod(item));
        pos = comma + 1;
    }
    if (times.empty()) times = {0.0, 0.5, 1.0};

    std::vector<int> assignment = assign_regions(ds.camera, ckpt.cloud, ckpt.mask);
    std::vector<std::uint8_t> flags = active_flags(ckpt.mask, assignment);
    for (std::size_t i = 0; i < times.size(); ++i) {
        double t = std::clamp(times[i], 0.0, 1.0);
        RenderAttributes attrs = deform_cloud(ckpt.cloud, ckpt.field, t, flags);
        RenderOutput out = rasterize(ds.camera, attrs);
        char name[64];
        std::snprintf(name, sizeof name, "color_%03zu.png", i);
        png_write_rgb8((fs::path(out_dir) / name).string(), out.color);
        std::snprintf(name, sizeof name, "depth_%03zu.png", i);
        png_write_rgb8((fs::path(out_dir) / name).string(), colorize_depth(out.depth));
        std::cout << "t=" << t << " -> " << name << "\n";
    }
    std::ostringstream os;
    os << "command=render\ncheckpoint=" << ckpt_path << "\ndata=" << data_dir
       << "\ntimes=" << times_csv << "\n";
    write_effective_config(out_dir, os.str());
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_dir, bool all_dynamic) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Dataset ds = load_dataset(data_dir);
    if (ds.test_indices.empty()) throw DataError("dataset has no test frames (needs >= 8)");
    EvalResult result = evaluate(ds, ckpt.cloud, ckpt.field, ckpt.mask, !all_dynamic);

    std::cout << std::left << std::setw(8) << "frame" << std::right << std::setw(10) << "psnr"
              << std::setw(10) << "ssim" << "\n";
    std::cout << std::fixed << std::setprecision(3);
    for (const EvalRow& row : result.rows)
        std::cout << std::left << std::setw(8) << row.frame << std::right << std::setw(10)
                  << row.psnr << std::setw(10) << row.ssim << "\n";
    std::cout << std::left << std::setw(8) << "mean" << std::right << std::setw(10)
              << result.mean_psnr << std::setw(10) << result.mean_ssim << "\n";
    std::cout.unsetf(std::ios::fixed);

    std::ostringstream csv;
    csv << "frame,psnr,ssim\n";
    csv.precision(9);
    for (const EvalRow& row : result.rows)
        csv << row.frame << "," << row.psnr << "," << row.ssim << "\n";
    csv << "mean," << result.mean_psnr << "," << result.mean_ssim << "\n";
    std::cout << csv.str();
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file_atomic(fs::path(out_dir) / "eval.csv", csv.str());
        std::ostringstream os;
        os << "command=eval\ncheckpoint=" << ckpt_path << "\ndata=" << data_dir
           << "\nall_dynamic=" << (all_dynamic ? 1 : 0) << "\n";
        write_effective_config(out_dir, os.str());
    }
    return 0;
}

int run_bench(const std::string& ckpt_path, const std::string& data_dir,
              const std::string& out_dir, int repeats) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Dataset ds = load_dataset(data_dir);
    BenchResult with_mask = bench_mode(ds, ckpt, true, repeats);
    BenchResult all_dynamic = bench_mode(ds, ckpt, false, repeats);
    std::cout << std::fixed << std::setprecision(2);
    std::cout << "amhs_fps=" << with_mask.fps << " amhs_deformed=" << with_mask.deformed
              << "\n";
    std::cout << "alldyn_fps=" << all_dynamic.fps
              << " alldyn_deformed=" << all_dynamic.deformed << "\n";
    std::cout << "speedup=" << with_mask.fps / all_dynamic.fps << "\n";
    if (!out_dir.empty()) {
        std::ostringstream os;
        os << "command=bench\ncheckpoint=" << ckpt_path << "\ndata=" << data_dir
           << "\nrepeats=" << repeats << "\n";
        write_effective_config(out_dir, os.str());
    }
    return 0;
}

int run_gradcheck(std::uint64_t seed, int gaussians, int size, int basis, double step,
                  double tolerance) {
    Camera cam;
    cam.width = cam.height = size;
    cam.fx = cam.fy = 100.0 * size / 128.0;
    cam.cx = cam.cy = size / 2.0;

    auto random_cloud = [&](std::uint64_t s) {
        Rng rng(s);
        GaussianCloud cloud;
        for (int i = 0; i < gaussians; ++i) {
            double z = rng.uniform(3.0, 7.0);
            double half = 0.45 * size * z / cam.fx;
            cloud.means.push_back(Vec3(rng.uniform(-half, half), rng.uniform(-half, half), z));
            cloud.raw_scales.push_back(Vec3(rng.uniform(-2.5, -1.0), rng.uniform(-2.5, -1.0),
                                            rng.uniform(-2.5, -1.0)));
            Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            cloud.rotations.push_back(q.norm() > 1e-3 ? q : Vec4(1, 0, 0, 0));
            cloud.raw_opacities.push_back(rng.uniform(-1.0, 2.0));
            cloud.colors.push_back(Vec3(rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95),
                                        rng.uniform(0.05, 0.95)));
        }
        return cloud;
    };

    GaussianCloud cloud = random_cloud(seed);
    DeformField field = init_field(std::size_t(gaussians), basis);
    Rng field_rng(seed + 1);
    auto scramble = [&](AttributeField& f, double range) {
        for (double& w : f.weights) w = field_rng.uniform(-range, range);
        for (double& c : f.centers) c += field_rng.uniform(-0.1, 0.1);
        for (double& w : f.widths) w *= field_rng.uniform(0.6, 1.8);
    };
    scramble(field.position, 0.3);
    scramble(field.rotation, 0.2);
    scramble(field.scale, 0.2);
    scramble(field.opacity, 0.5);

    // target frame from a second random scene
    GaussianCloud target_cloud = random_cloud(seed + 100);
    RenderAttributes target_attrs;
    target_attrs.means3d = target_cloud.means;
    target_attrs.colors = target_cloud.colors;
    for (int i = 0; i < gaussians; ++i) {
        target_attrs.covariances3d.push_back(
            covariance3d(target_cloud.raw_scales[std::size_t(i)],
                         target_cloud.rotations[std::size_t(i)]));
        target_attrs.opacities.push_back(sigmoid(target_cloud.raw_opacities[std::size_t(i)]));
    }
    RenderOutput target = rasterize(cam, target_attrs);
    FrameSample frame;
    frame.image = target.color;
    frame.depth = target.depth;
    frame.tool_mask = Image<std::uint8_t>(size, size, 1, 0);
    frame.timestamp = 0.43;

    TrainConfig cfg;
    cfg.rank_pairs = 64;
    cfg.seed = seed;
    std::vector<std::uint8_t> all(std::size_t(gaussians), 1);
    const double t = 0.43;
    auto loss = [&]() {
        RenderAttributes attrs = deform_cloud(cloud, field, t, all);
        RenderOutput render = rasterize(cam, attrs);
        return loss_gradients(render, frame, cfg, cam.zfar, 999).values.total;
    };
    auto probe = [&]() {
        RenderAttributes attrs = deform_cloud(cloud, field, t, all);
        return rasterize(cam, attrs).gates.signature();
    };
    auto kink = [&]() {
        RenderAttributes attrs = deform_cloud(cloud, field, t, all);
        return loss_gradients(rasterize(cam, attrs), frame, cfg, cam.zfar, 999)
            .kink_signature;
    };

    RenderAttributes attrs = deform_cloud(cloud, field, t, all);
    RenderOutput render = rasterize(cam, attrs);
    LossGradients lg = loss_gradients(render, frame, cfg, cam.zfar, 999);
    AttrGrads ag = backward_render(cam, attrs, render, lg.d_color, lg.d_depth);
    GradientBundle bundle = backward_deform(cloud, field, t, all, ag);

    std::size_t n = cloud.count();
    std::vector<ParamBlock> blocks = {
        {"means", cloud.means.data()->data(), bundle.d_means.data()->data(), 3 * n},
        {"raw_scales", cloud.raw_scales.data()->data(), bundle.d_raw_scales.data()->data(),
         3 * n},
        {"rotations", cloud.rotations.data()->data(), bundle.d_rotations.data()->data(), 4 * n},
        {"raw_opacities", cloud.raw_opacities.data(), bundle.d_raw_opacities.data(), n},
        {"colors", cloud.colors.data()->data(), bundle.d_colors.data()->data(), 3 * n},
        {"field.position.weights", field.position.weights.data(),
         bundle.position.weights.data(), field.position.weights.size()},
        {"field.position.centers", field.position.centers.data(),
         bundle.position.centers.data(), field.position.centers.size()},
        {"field.position.widths", field.position.widths.data(), bundle.position.widths.data(),
         field.position.widths.size()},
        {"field.rotation.weights", field.rotation.weights.data(),
         bundle.rotation.weights.data(), field.rotation.weights.size()},
        {"field.scale.weights", field.scale.weights.data(), bundle.scale.weights.data(),
         field.scale.weights.size()},
        {"field.opacity.weights", field.opacity.weights.data(), bundle.opacity.weights.data(),
         field.opacity.weights.size()},
        {"field.opacity.centers", field.opacity.centers.data(), bundle.opacity.centers.data(),
         field.opacity.centers.size()},
        {"field.opacity.widths", field.opacity.widths.data(), bundle.opacity.widths.data(),
         field.opacity.widths.size()},
    };
    FdReport report = finite_diff_check(loss, blocks, step, 1e-6, probe, 8, kink);
    std::cout << "gradcheck seed=" << seed << " gaussians=" << gaussians << " size=" << size
              << "\n"
              << report.summary() << "\n";
    for (const FdEntry& e : report.worst)
        std::cout << "  " << e.path << "[" << e.index << "] analytic=" << e.analytic
                  << " numeric=" << e.numeric << " rel=" << e.rel_error << "\n";
    bool ok = report.pass(tolerance);
    std::cout << (ok ? "PASS" : "FAIL") << " (tolerance " << tolerance << ")\n";
    if (!ok) throw NumericError("gradient check failed: " + report.summary());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deformable-scene Gaussian splatting engine (CPU)"};
    app.require_subcommand(1);

    std::string spec_path, out_dir, data_dir, ckpt_path, config_path, times_csv;
    std::vector<std::string> overrides;
    long seed_override = -1;
    int threads = 0, repeats = 3;
    bool all_dynamic = false;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset from a spec file");
    synth->add_option("--spec", spec_path, "synthetic scene spec (key=value)")->required();
    synth->add_option("--out", out_dir, "output dataset directory")->required();
    synth->add_option("--seed", seed_override, "override the spec's RNG seed");

    auto* train_cmd = app.add_subcommand("train", "Train on a dataset directory");
    train_cmd->add_option("--data", data_dir, "dataset directory")->required();
    train_cmd->add_option("--out", out_dir, "run output directory")->required();
    train_cmd->add_option("--config", config_path, "config file (key=value)");
    train_cmd->add_option("--set", overrides, "config override key=value (repeatable)");
    train_cmd->add_option("--threads", threads, "worker cap (env EHSG_THREADS, 0 = cores)");
    train_cmd->footer("Config keys and defaults:\n" + config_to_text(TrainConfig{}));

    auto* render_cmd = app.add_subcommand("render", "Render timestamps from a checkpoint");
    render_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    render_cmd->add_option("--data", data_dir, "dataset directory (camera source)")->required();
    render_cmd->add_option("--out", out_dir, "output directory")->required();
    render_cmd->add_option("--times", times_csv, "comma list of timestamps in [0,1]");
    render_cmd->add_option("--threads", threads, "worker cap");

    auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM over the test split");
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
    eval_cmd->add_option("--out", out_dir, "optional output directory for eval.csv");
    eval_cmd->add_flag("--all-dynamic", all_dynamic, "ignore the motion mask");
    eval_cmd->add_option("--threads", threads, "worker cap");

    auto* bench_cmd = app.add_subcommand("bench", "Render-loop timing, mask on vs off");
    bench_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    bench_cmd->add_option("--data", data_dir, "dataset directory")->required();
    bench_cmd->add_option("--out", out_dir, "optional output directory");
    bench_cmd->add_option("--repeats", repeats, "timed passes over all frames");
    bench_cmd->add_option("--threads", threads, "worker cap");

    std::uint64_t gc_seed = 1;
    int gc_gaussians = 8, gc_size = 24, gc_basis = 3;
    double gc_step = 1e-4, gc_tol = 1e-3;
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "Finite-difference check on a seeded scene");
    gradcheck_cmd->add_option("--seed", gc_seed, "scene seed");
    gradcheck_cmd->add_option("--gaussians", gc_gaussians, "gaussian count");
    gradcheck_cmd->add_option("--size", gc_size, "image size in pixels");
    gradcheck_cmd->add_option("--basis", gc_basis, "basis functions per attribute");
    gradcheck_cmd->add_option("--step", gc_step, "finite-difference step");
    gradcheck_cmd->add_option("--tol", gc_tol, "relative-error tolerance");
    gradcheck_cmd->add_option("--threads", threads, "worker cap");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        set_max_threads(resolve_threads(threads));
        if (synth->parsed()) return run_synth(spec_path, out_dir, seed_override);
        if (train_cmd->parsed())
            return run_train(data_dir, out_dir, config_path, overrides, threads);
        if (render_cmd->parsed()) return run_render(ckpt_path, data_dir, out_dir, times_csv);
        if (eval_cmd->parsed()) return run_eval(ckpt_path, data_dir, out_dir, all_dynamic);
        if (bench_cmd->parsed()) return run_bench(ckpt_path, data_dir, out_dir, repeats);
        if (gradcheck_cmd->parsed())
            return run_gradcheck(gc_seed, gc_gaussians, gc_size, gc_basis, gc_step, gc_tol);
        throw UsageError("no subcommand given");
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
