#include <gtest/gtest.h>

#include "ehsg/data.hpp"
#include "ehsg/metrics.hpp"
#include "ehsg/raster.hpp"
#include "test_util.hpp"

using namespace ehsg;
namespace tu = ehsg::testutil;

namespace {

SynthSpec tiny_spec() {
    SynthSpec spec;
    spec.width = 48;
    spec.height = 48;
    spec.frames = 8;
    spec.seed = 5;
    spec.plane_count = 120;
    spec.fx = spec.fy = 37.5;
    spec.cx = spec.cy = 24.0;
    spec.moving_count = 1;
    spec.amplitude = 0.3;
    return spec;
}

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST(Pfm, RoundTripIsBitIdentical) {
    tu::TempDir dir("pfm");
    Image<double> depth(13, 9, 1);
    Rng rng(3);
    for (double& v : depth.data) v = double(float(rng.uniform(0.0, 80.0)));
    std::string path = (dir.path() / "d.pfm").string();
    pfm_write(path, depth);
    Image<double> back = pfm_read(path);
    ASSERT_TRUE(back.same_shape(depth));
    for (std::size_t i = 0; i < depth.size(); ++i) EXPECT_EQ(depth.data[i], back.data[i]);
}

TEST(Pfm, MalformedHeaderReportsByteOffset) {
    tu::TempDir dir("pfm_bad");
    std::string path = (dir.path() / "bad.pfm").string();
    write_file_atomic(path, "PF\n4 4\n-1.0\nxxxx");
    try {
        pfm_read(path);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
    }
    write_file_atomic(path, "Pf\n4\n");
    EXPECT_THROW(pfm_read(path), DataError);
    write_file_atomic(path, "Pf\n4 4\n-1.0\nshort");
    EXPECT_THROW(pfm_read(path), DataError);
}

TEST(Png16Depth, QuantizesToHalfStep) {
    tu::TempDir dir("png16");
    Image<double> depth(6, 5, 1);
    depth.at(2, 2) = 1.2345;
    depth.at(0, 0) = 0.0;
    depth.at(5, 4) = 43.21;
    std::string path = (dir.path() / "d.png").string();
    const double scale = 1000.0;
    png_write_depth16(path, depth, scale);
    Image<double> back = png_read_depth16(path, scale);
    for (std::size_t i = 0; i < depth.size(); ++i)
        EXPECT_LE(std::abs(depth.data[i] - back.data[i]), 0.5 / scale + 1e-12);
    EXPECT_TRUE(std::abs(back.at(2, 2) - 1.234) < 1e-9 || std::abs(back.at(2, 2) - 1.235) < 1e-9);
}

TEST(PngRgb, RoundTripWithinQuantization) {
    tu::TempDir dir("png8");
    Image<double> img = tu::random_image(9, 17, 11, 3);
    std::string path = (dir.path() / "img.png").string();
    png_write_rgb8(path, img);
    Image<double> back = png_read_rgb(path);
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i)
        EXPECT_LE(std::abs(img.data[i] - back.data[i]), 0.5 / 255.0 + 1e-12);
}

TEST(Backproject, PrincipalRayGeometry) {
    Camera cam = tu::small_camera(128);
    FrameSample frame;
    frame.image = Image<double>(cam.width, cam.height, 3, 0.25);
    frame.depth = Image<double>(cam.width, cam.height, 1, 0.0);
    frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
    frame.depth.at(64, 64) = 5.0;
    GaussianCloud cloud = backproject_init(frame, cam, 1);
    ASSERT_EQ(1u, cloud.count());
    EXPECT_LT((cloud.means[0] - Vec3(0, 0, 5)).norm(), 1e-12);
    EXPECT_EQ(Vec3(0.25, 0.25, 0.25), cloud.colors[0]);
    EXPECT_DOUBLE_EQ(0.0, cloud.raw_opacities[0]);  // logit(0.5)
}

TEST(Backproject, ToolPixelsAndInvalidDepthSkipped) {
    Camera cam = tu::small_camera(64);
    FrameSample frame;
    frame.image = Image<double>(cam.width, cam.height, 3, 0.5);
    frame.depth = Image<double>(cam.width, cam.height, 1, 4.0);
    frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
    frame.tool_mask.at(0, 0) = 255;
    frame.depth.at(4, 0) = 0.0;
    GaussianCloud cloud = backproject_init(frame, cam, 4);
    EXPECT_EQ(16u * 16u - 2u, cloud.count());
}

TEST(Backproject, StrideCountsPixels) {
    Camera cam = tu::small_camera(128);
    FrameSample frame;
    frame.image = Image<double>(cam.width, cam.height, 3, 0.5);
    frame.depth = Image<double>(cam.width, cam.height, 1, 5.0);
    frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
    EXPECT_EQ(1024u, backproject_init(frame, cam, 4).count());
}

TEST(Backproject, AllInvalidIsError) {
    Camera cam = tu::small_camera(32);
    FrameSample frame;
    frame.image = Image<double>(cam.width, cam.height, 3, 0.5);
    frame.depth = Image<double>(cam.width, cam.height, 1, 0.0);
    frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
    EXPECT_THROW(backproject_init(frame, cam, 2), DataError);
}

TEST(Backproject, InitialRenderClearsSanityFloor) {
    SynthSpec spec = tiny_spec();
    tu::TempDir dir("bp_floor");
    synth_generate(spec, dir.str());
    Dataset ds = load_dataset(dir.str());
    GaussianCloud cloud = backproject_init(ds.frames[0], ds.camera, 2);
    RenderOutput render = rasterize(ds.camera, tu::activate(cloud));
    EXPECT_GT(psnr(render.color, ds.frames[0].image), 20.0);
}

TEST(LoadDataset, SevenToOneSplit) {
    SynthSpec spec = tiny_spec();  // 8 frames
    tu::TempDir dir("split");
    synth_generate(spec, dir.str());
    Dataset ds = load_dataset(dir.str());
    ASSERT_EQ(8u, ds.frames.size());
    EXPECT_EQ(std::vector<int>({0, 1, 2, 3, 4, 5, 6}), ds.train_indices);
    EXPECT_EQ(std::vector<int>({7}), ds.test_indices);
    EXPECT_DOUBLE_EQ(0.0, ds.frames[0].timestamp);
    EXPECT_DOUBLE_EQ(7.0 / 8.0, ds.frames[7].timestamp);
}

TEST(LoadDataset, SplitRuleOnLongSequence) {
    // every 8th frame (index = 7 mod 8) held out
    int count = 156, test = 0;
    for (int i = 0; i < count; ++i)
        if (i % 8 == 7) ++test;
    EXPECT_EQ(19, test);
    EXPECT_EQ(137, count - test);
}

TEST(LoadDataset, MissingDepthNamesFile) {
    SynthSpec spec = tiny_spec();
    tu::TempDir dir("missing");
    synth_generate(spec, dir.str());
    fs::remove(dir.path() / "depth" / "000003.pfm");
    try {
        load_dataset(dir.str());
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("000003"), std::string::npos);
    }
}

TEST(LoadDataset, BadConfigRejected) {
    SynthSpec spec = tiny_spec();
    tu::TempDir dir("badcfg");
    synth_generate(spec, dir.str());
    write_file_atomic(dir.path() / "config.txt", "width 48\n");
    EXPECT_THROW(load_dataset(dir.str()), DataError);
}

TEST(Synth, DeterministicByteIdenticalDirectories) {
    SynthSpec spec = tiny_spec();
    tu::TempDir a("synth_a"), b("synth_b");
    synth_generate(spec, a.str());
    synth_generate(spec, b.str());
    for (auto& entry : fs::recursive_directory_iterator(a.path())) {
        if (!entry.is_regular_file()) continue;
        fs::path rel = fs::relative(entry.path(), a.path());
        ASSERT_TRUE(fs::exists(b.path() / rel)) << rel;
        EXPECT_EQ(slurp(entry.path()), slurp(b.path() / rel)) << rel;
    }
}

TEST(Synth, VanishingBlobDisappearsAtEventTime) {
    SynthSpec spec = tiny_spec();
    spec.moving_count = 0;
    spec.frames = 10;
    spec.events.push_back({false, 0.5});
    tu::TempDir dir("vanish");
    SynthTruth truth = synth_generate(spec, dir.str());
    Dataset ds = load_dataset(dir.str());
    Camera cam = spec.camera();

    std::size_t blob = truth.tracks.size() - 1;
    Vec3 cam_pt = cam.world_to_cam(truth.mean_at(blob, 0.0));
    int px = int(std::lround(cam.fx * cam_pt.x() / cam_pt.z() + cam.cx));
    int py = int(std::lround(cam.fy * cam_pt.y() / cam_pt.z() + cam.cy));

    // scene is static except the event, so all pre-vanish frames agree and
    // all post-vanish frames agree; the two halves differ at the blob
    auto pixel = [&](int f, int c) { return ds.frames[std::size_t(f)].image.at(px, py, c); };
    double diff_halves = 0.0;
    for (int c = 0; c < 3; ++c) diff_halves = std::max(diff_halves, std::abs(pixel(0, c) - pixel(9, c)));
    EXPECT_GT(diff_halves, 0.05);
    for (int f = 0; f < 10; ++f) {
        bool before = ds.frames[std::size_t(f)].timestamp < 0.5;
        for (int c = 0; c < 3; ++c)
            EXPECT_NEAR(pixel(before ? 0 : 9, c), pixel(f, c), 1.0 / 255.0 + 1e-9) << f;
    }
}

TEST(Synth, FullStaticFractionFreezesEveryFrame) {
    SynthSpec spec = tiny_spec();
    spec.static_fraction = 1.0;
    spec.moving_count = 2;
    spec.amplitude = 0.5;
    tu::TempDir dir("allstatic");
    synth_generate(spec, dir.str());
    std::string first = slurp(dir.path() / "images" / "000000.png");
    for (int f = 1; f < spec.frames; ++f)
        EXPECT_EQ(first, slurp(dir.path() / "images" /
                               (ehsg::detail::frame_name(f) + ".png")));
}

TEST(Synth, LoadAfterWriteIsIdentityUpToQuantization) {
    SynthSpec spec = tiny_spec();
    tu::TempDir a("rt_a"), b("rt_b");
    synth_generate(spec, a.str());
    Dataset ds = load_dataset(a.str());

    fs::create_directories(b.path() / "images");
    fs::create_directories(b.path() / "depth");
    fs::create_directories(b.path() / "masks");
    write_dataset_config(b.str(), ds.camera, ds.depth_format, ds.depth_scale);
    for (std::size_t f = 0; f < ds.frames.size(); ++f)
        write_frame(b.str(), int(f), ds.frames[f], ds.depth_format, ds.depth_scale);
    Dataset ds2 = load_dataset(b.str());

    ASSERT_EQ(ds.frames.size(), ds2.frames.size());
    for (std::size_t f = 0; f < ds.frames.size(); ++f) {
        EXPECT_EQ(0.0, tu::max_image_diff(ds.frames[f].image, ds2.frames[f].image));
        EXPECT_EQ(0.0, tu::max_image_diff(ds.frames[f].depth, ds2.frames[f].depth));
    }
}

TEST(Synth, TrajectorySidecarMatchesScriptedMotion) {
    SynthSpec spec = tiny_spec();
    spec.events.push_back({false, 0.4});
    tu::TempDir dir("traj");
    SynthTruth truth = synth_generate(spec, dir.str());
    auto records = load_trajectories((dir.path() / "gt" / "trajectories.txt").string());
    ASSERT_EQ(std::size_t(spec.frames) * truth.tracks.size(), records.size());
    Rng rng(77);
    for (int k = 0; k < 50; ++k) {
        const auto& rec = records[rng.uniform_index(records.size())];
        double t = double(rec.frame) / double(spec.frames);
        EXPECT_LT((rec.mean - truth.mean_at(rec.gaussian, t)).norm(), 1e-8);
        EXPECT_NEAR(truth.opacity_at(rec.gaussian, t), rec.opacity, 1e-8);
    }
    // trained-vs-truth evaluation hook: truth against itself scores zero
    double mae = 0.0;
    for (const auto& rec : records)
        mae += (rec.mean - truth.mean_at(rec.gaussian, double(rec.frame) / spec.frames)).norm();
    EXPECT_LT(mae / double(records.size()), 1e-8);
}

TEST(KvParser, RejectsGarbageAndParsesComments) {
    KvMap kv = parse_kv_text("# comment\nkey=value\n\nn=42\n", "test");
    EXPECT_EQ("value", kv_string(kv, "key", ""));
    EXPECT_EQ(42, kv_long(kv, "n", 0));
    EXPECT_THROW(parse_kv_text("not-a-pair\n", "test"), DataError);
    EXPECT_THROW(kv_long(kv, "key", 0), DataError);
}
