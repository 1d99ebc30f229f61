#include <gtest/gtest.h>

#include "ehsg/motion.hpp"
#include "test_util.hpp"

using namespace ehsg;
namespace tu = ehsg::testutil;

namespace {

// Coverage oracle: every pixel maps to exactly one region.
void expect_exact_partition(const MotionMask& mask) {
    Image<int> hits(mask.image_width, mask.image_height, 1, 0);
    for (const Region& r : mask.regions) {
        ASSERT_LT(r.x0, r.x1);
        ASSERT_LT(r.y0, r.y1);
        for (int y = r.y0; y < r.y1; ++y)
            for (int x = r.x0; x < r.x1; ++x) ++hits.at(x, y);
    }
    for (int v : hits.data) ASSERT_EQ(1, v);
}

RegionStats uniform_stats(const MotionMask& mask, double dt, double ld, double ls) {
    RegionStats stats;
    RegionStats::Entry e;
    e.avg_deform = dt;
    e.loss_deformed = ld;
    e.loss_canonical = ls;
    e.gaussian_count = 10;
    stats.entries.assign(mask.regions.size(), e);
    return stats;
}

}  // namespace

TEST(InitMask, DefaultGridIsAllDynamic) {
    MotionMask mask = init_mask(128, 128, 4);
    ASSERT_EQ(16u, mask.regions.size());
    for (const Region& r : mask.regions) {
        EXPECT_EQ(32, r.width());
        EXPECT_EQ(32, r.height());
        EXPECT_EQ(RegionStatus::dynamic, r.status);
        EXPECT_EQ(0, r.depth);
    }
    expect_exact_partition(mask);
}

TEST(InitMask, SingleRegionCoversImage) {
    MotionMask mask = init_mask(96, 80, 1);
    ASSERT_EQ(1u, mask.regions.size());
    EXPECT_EQ(96, mask.regions[0].width());
    EXPECT_EQ(80, mask.regions[0].height());
}

TEST(InitMask, RemainderAbsorbedByLastRowAndColumn) {
    MotionMask mask = init_mask(130, 128, 4);
    ASSERT_EQ(16u, mask.regions.size());
    for (const Region& r : mask.regions) {
        if (r.x1 == 130)
            EXPECT_EQ(34, r.width());
        else
            EXPECT_EQ(32, r.width());
    }
    expect_exact_partition(mask);
}

TEST(AssignRegions, ProjectedMeanPicksRegion) {
    Camera cam = tu::small_camera(128);
    MotionMask mask = init_mask(cam.width, cam.height, 4);
    GaussianCloud cloud;
    cloud.resize(3);
    // projects to (0,0): world x = (0-64)*z/100
    cloud.means[0] = Vec3(-64.0 * 5.0 / 100.0, -64.0 * 5.0 / 100.0, 5.0);
    cloud.means[1] = Vec3(0, 0, -2.0);          // behind the camera
    cloud.means[2] = Vec3(0, 0, 5.0);           // center pixel (64,64) -> region (2,2)
    std::vector<int> assignment = assign_regions(cam, cloud, mask);
    EXPECT_EQ(0, assignment[0]);
    EXPECT_EQ(-1, assignment[1]);
    EXPECT_EQ(10, assignment[2]);  // grid row 2, col 2 in a 4x4 grid
}

TEST(AssignRegions, BoundaryPixelUsesHalfOpenRect) {
    Camera cam = tu::small_camera(128);
    MotionMask mask = init_mask(cam.width, cam.height, 4);
    GaussianCloud cloud;
    cloud.resize(1);
    // projects exactly onto pixel x=32 (first column of the second cell)
    cloud.means[0] = Vec3((32.0 - 64.0) * 5.0 / 100.0, -64.0 * 5.0 / 100.0, 5.0);
    std::vector<int> assignment = assign_regions(cam, cloud, mask);
    EXPECT_EQ(1, assignment[0]);
}

TEST(ActiveFlags, FollowRegionStatus) {
    Camera cam = tu::small_camera(128);
    MotionMask mask = init_mask(cam.width, cam.height, 2);
    GaussianCloud cloud = tu::random_cloud(3, 30, cam);
    std::vector<int> assignment = assign_regions(cam, cloud, mask);

    auto flags = active_flags(mask, assignment);
    for (std::uint8_t f : flags) EXPECT_EQ(1, f);  // everything starts dynamic

    for (Region& r : mask.regions) r.status = RegionStatus::static_;
    flags = active_flags(mask, assignment);
    for (std::size_t i = 0; i < flags.size(); ++i)
        EXPECT_EQ(assignment[i] < 0 ? 1 : 0, flags[i]);  // unassigned stays deformable

    mask.regions[1].status = RegionStatus::dynamic;
    flags = active_flags(mask, assignment);
    std::size_t expected = 0, got = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (assignment[i] == 1 || assignment[i] < 0) ++expected;
        got += flags[i];
    }
    EXPECT_EQ(expected, got);
}

TEST(ActiveFlags, MoreStaticRegionsNeverIncreaseWork) {
    Camera cam = tu::small_camera(128);
    MotionMask mask = init_mask(cam.width, cam.height, 4);
    GaussianCloud cloud = tu::random_cloud(9, 100, cam);
    std::vector<int> assignment = assign_regions(cam, cloud, mask);
    std::size_t prev = cloud.count() + 1;
    for (std::size_t frozen = 0; frozen <= mask.regions.size(); ++frozen) {
        for (std::size_t r = 0; r < mask.regions.size(); ++r)
            mask.regions[r].status = r < frozen ? RegionStatus::static_ : RegionStatus::dynamic;
        auto flags = active_flags(mask, assignment);
        std::size_t active = 0;
        for (std::uint8_t f : flags) active += f;
        EXPECT_LE(active, prev);
        prev = active;
    }
}

TEST(ComputeRegionStats, ZeroWeightFieldGivesZeroDeformAndEqualLosses) {
    Camera cam = tu::small_camera(64);
    GaussianCloud cloud = tu::random_cloud(15, 25, cam);
    DeformField field = init_field(cloud.count(), 4);
    MotionMask mask = init_mask(cam.width, cam.height, 2);
    std::vector<int> assignment = assign_regions(cam, cloud, mask);

    FrameSample frame;
    RenderOutput gt = rasterize_reference(cam, tu::activate(cloud));
    frame.image = gt.color;
    frame.depth = gt.depth;
    frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
    frame.timestamp = 0.5;

    RegionStats stats =
        compute_region_stats(cloud, field, assignment, cam, {&frame}, mask);
    for (const auto& e : stats.entries) {
        EXPECT_EQ(0.0, e.avg_deform);
        EXPECT_EQ(e.loss_deformed, e.loss_canonical);
    }
}

TEST(ComputeRegionStats, EmptyRegionFlaggedWithZeroDeform) {
    Camera cam = tu::small_camera(64);
    GaussianCloud cloud;
    cloud.resize(1);
    cloud.means[0] = Vec3(0.9, 0.9, 5.0);  // bottom-right quadrant
    cloud.colors[0] = Vec3(1, 1, 1);
    DeformField field = init_field(1, 4);
    MotionMask mask = init_mask(cam.width, cam.height, 2);
    std::vector<int> assignment = assign_regions(cam, cloud, mask);

    FrameSample frame;
    frame.image = Image<double>(cam.width, cam.height, 3, 0.0);
    frame.depth = Image<double>(cam.width, cam.height, 1, 0.0);
    frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
    frame.timestamp = 0.0;

    RegionStats stats =
        compute_region_stats(cloud, field, assignment, cam, {&frame}, mask);
    EXPECT_EQ(0u, stats.entries[0].gaussian_count);
    EXPECT_EQ(0.0, stats.entries[0].avg_deform);
    EXPECT_GT(stats.entries[3].gaussian_count, 0u);
}

// A canonical blob sits displaced from where the frame shows it; the
// deformation field corrects it exactly, so the deformed render scores zero
// region loss and the canonical render pays for both blobs.
TEST(ComputeRegionStats, DeformationRemovingErrorBlobSeparatesLosses) {
    Camera cam = tu::small_camera(64);
    GaussianCloud cloud;
    cloud.resize(1);
    cloud.means[0] = Vec3(-2.2, -1.6, 5.0);  // pixel (10,16), top-left region
    cloud.raw_scales[0] = Vec3::Constant(std::log(0.25));
    cloud.raw_opacities[0] = logit(0.97);
    cloud.colors[0] = Vec3(0.55, 0.55, 0.55);

    const double t = 0.5;
    DeformField field = init_field(1, 1);
    field.position.centers[0] = t;  // basis peaks at the eval time
    field.position.weight_row(0)[0 * 1 + 0] = 1.2;  // +12 px, still inside the region

    MotionMask mask = init_mask(cam.width, cam.height, 2);
    std::vector<int> assignment = assign_regions(cam, cloud, mask);
    ASSERT_EQ(0, assignment[0]);

    std::vector<std::uint8_t> all(1, 1);
    FrameSample frame;
    RenderOutput gt = rasterize_reference(cam, deform_cloud(cloud, field, t, all));
    frame.image = gt.color;
    frame.depth = gt.depth;
    frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
    frame.timestamp = t;

    RegionStats stats =
        compute_region_stats(cloud, field, assignment, cam, {&frame}, mask);

    // oracle: per-region 8-bit MAE computed directly from reference renders
    RenderOutput canonical = rasterize_reference(cam, tu::activate(cloud));
    double acc = 0.0;
    const Region& reg = mask.regions[0];
    for (int y = reg.y0; y < reg.y1; ++y)
        for (int x = reg.x0; x < reg.x1; ++x)
            for (int c = 0; c < 3; ++c)
                acc += std::abs(canonical.color.at(x, y, c) - frame.image.at(x, y, c));
    double oracle_ls = 255.0 * acc / double(3 * reg.width() * reg.height());

    EXPECT_NEAR(oracle_ls, stats.entries[0].loss_canonical, 1e-9);
    EXPECT_EQ(0.0, stats.entries[0].loss_deformed);
    EXPECT_NEAR(10.0, stats.entries[0].loss_canonical - stats.entries[0].loss_deformed, 8.0);
    EXPECT_GT(stats.entries[0].avg_deform, 0.0);
}

TEST(UpdateMask, StaticClassification) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats stats = uniform_stats(mask, 0.01, 1.0, 1.1);
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    ASSERT_EQ(1u, out.regions.size());
    EXPECT_EQ(RegionStatus::static_, out.regions[0].status);
}

TEST(UpdateMask, DynamicClassification) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats stats = uniform_stats(mask, 0.06, 0.5, 1.5);  // ls - ld = 1.0 > 0.5
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    EXPECT_EQ(RegionStatus::dynamic, out.regions[0].status);
}

TEST(UpdateMask, ConflictLowDeformHighLossGapSplits) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats stats = uniform_stats(mask, 0.01, 0.5, 2.5);  // W but Q'
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    ASSERT_EQ(4u, out.regions.size());
    for (const Region& r : out.regions) {
        EXPECT_EQ(RegionStatus::dynamic, r.status);
        EXPECT_EQ(1, r.depth);
        EXPECT_EQ(32, r.width());
    }
    expect_exact_partition(out);
}

TEST(UpdateMask, ConflictHighDeformConsistentLossSplits) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats stats = uniform_stats(mask, 0.2, 1.0, 1.1);  // Q but W'
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    EXPECT_EQ(4u, out.regions.size());
}

TEST(UpdateMask, DeformationHurtingLossStaysDynamic) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats stats = uniform_stats(mask, 0.2, 3.0, 1.0);  // ld - ls > delta2
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    ASSERT_EQ(1u, out.regions.size());
    EXPECT_EQ(RegionStatus::dynamic, out.regions[0].status);
}

TEST(UpdateMask, MinimumSideBlocksSplit) {
    MotionMask mask = init_mask(24, 24, 1);  // halves would be 12 px < 16
    RegionStats stats = uniform_stats(mask, 0.01, 0.5, 2.5);
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    ASSERT_EQ(1u, out.regions.size());
    EXPECT_EQ(RegionStatus::dynamic, out.regions[0].status);
}

TEST(UpdateMask, RegionSplitDisabledSendsConflictsStatic) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats stats = uniform_stats(mask, 0.01, 0.5, 2.5);
    MotionSettings settings;
    settings.region_split_enabled = false;
    MotionMask out = update_mask(mask, stats, 500, 1.0, settings);
    ASSERT_EQ(1u, out.regions.size());
    EXPECT_EQ(RegionStatus::static_, out.regions[0].status);
}

TEST(UpdateMask, SingleCriterionModes) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats conflicted = uniform_stats(mask, 0.01, 0.5, 2.5);  // W but Q'

    MotionSettings uc1_only;
    uc1_only.uc2_enabled = false;
    EXPECT_EQ(RegionStatus::static_,
              update_mask(mask, conflicted, 500, 1.0, uc1_only).regions[0].status);

    MotionSettings uc2_only;
    uc2_only.uc1_enabled = false;
    EXPECT_EQ(RegionStatus::dynamic,
              update_mask(mask, conflicted, 500, 1.0, uc2_only).regions[0].status);
}

TEST(UpdateMask, StaticRecoveryWhenCanonicalLossGrows) {
    MotionMask mask = init_mask(64, 64, 1);
    mask.regions[0].status = RegionStatus::static_;
    // still classifies static (dt small, losses consistent) but ls > delta3
    RegionStats stats = uniform_stats(mask, 0.01, 1.4, 1.5);
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    EXPECT_EQ(RegionStatus::dynamic, out.regions[0].status);

    RegionStats quiet = uniform_stats(mask, 0.01, 0.6, 0.7);  // ls below delta3
    EXPECT_EQ(RegionStatus::static_, update_mask(mask, quiet, 500, 1.0).regions[0].status);
}

TEST(UpdateMask, NoValidPixelsTreatedStatic) {
    MotionMask mask = init_mask(64, 64, 1);
    RegionStats stats = uniform_stats(mask, 5.0, 0.0, 0.0);
    stats.entries[0].no_valid_pixels = true;
    MotionMask out = update_mask(mask, stats, 500, 1.0);
    EXPECT_EQ(RegionStatus::static_, out.regions[0].status);
}

TEST(UpdateMask, IntervalArithmeticWithClamping) {
    MotionMask mask = init_mask(64, 64, 1);
    mask.update_interval = 500.0;
    mask.last_update_loss = 1.0;
    RegionStats stats = uniform_stats(mask, 0.01, 1.0, 1.1);

    MotionMask out = update_mask(mask, stats, 500, 0.5);  // factor 1.0/0.5 = 2
    EXPECT_DOUBLE_EQ(1000.0, out.update_interval);
    EXPECT_EQ(1500, out.next_update_iter);
    EXPECT_DOUBLE_EQ(0.5, out.last_update_loss);

    // factor clamps to [0.5, 2.0]
    EXPECT_DOUBLE_EQ(1000.0, update_mask(mask, stats, 500, 0.01).update_interval);
    EXPECT_DOUBLE_EQ(250.0, update_mask(mask, stats, 500, 100.0).update_interval);
}

TEST(UpdateMask, FirstUpdateKeepsInterval) {
    MotionMask mask = init_mask(64, 64, 1);  // last_update_loss unset
    RegionStats stats = uniform_stats(mask, 0.01, 1.0, 1.1);
    MotionMask out = update_mask(mask, stats, 500, 0.25);
    EXPECT_DOUBLE_EQ(500.0, out.update_interval);
    EXPECT_EQ(1000, out.next_update_iter);
    EXPECT_DOUBLE_EQ(0.25, out.last_update_loss);
}

TEST(UpdateMask, AdaptiveIntervalDisabledKeepsInterval) {
    MotionMask mask = init_mask(64, 64, 1);
    mask.update_interval = 500.0;
    mask.last_update_loss = 1.0;
    MotionSettings settings;
    settings.adaptive_interval_enabled = false;
    RegionStats stats = uniform_stats(mask, 0.01, 1.0, 1.1);
    MotionMask out = update_mask(mask, stats, 700, 0.5, settings);
    EXPECT_DOUBLE_EQ(500.0, out.update_interval);
    EXPECT_EQ(1200, out.next_update_iter);
}

TEST(UpdateMask, PartitionSurvivesRepeatedSplits) {
    MotionMask mask = init_mask(65, 47, 1);
    for (int round = 0; round < 4; ++round) {
        RegionStats stats = uniform_stats(mask, 0.01, 0.5, 2.5);  // force conflicts
        mask = update_mask(mask, stats, 500 * (round + 1), 1.0);
        expect_exact_partition(mask);
    }
    for (const Region& r : mask.regions) {
        EXPECT_GE(r.width(), 16);
        EXPECT_GE(r.height(), 16);
    }
}

TEST(UpdateMask, PureFunctionOfStats) {
    MotionMask mask = init_mask(128, 128, 4);
    Rng rng(31);
    RegionStats stats;
    for (std::size_t r = 0; r < mask.regions.size(); ++r) {
        RegionStats::Entry e;
        e.avg_deform = rng.uniform(0.0, 0.1);
        e.loss_deformed = rng.uniform(0.0, 3.0);
        e.loss_canonical = rng.uniform(0.0, 3.0);
        e.gaussian_count = 5;
        stats.entries.push_back(e);
    }
    MotionMask a = update_mask(mask, stats, 500, 1.2);
    MotionMask b = update_mask(mask, stats, 500, 1.2);
    ASSERT_EQ(a.regions.size(), b.regions.size());
    for (std::size_t r = 0; r < a.regions.size(); ++r) {
        EXPECT_EQ(a.regions[r].status, b.regions[r].status);
        EXPECT_EQ(a.regions[r].x0, b.regions[r].x0);
    }
    EXPECT_EQ(a.next_update_iter, b.next_update_iter);
}

// All-dynamic mask and a build that never consults the mask produce the
// same flags, hence bit-identical renders.
TEST(MotionMask, AllDynamicMatchesNoMaskPath) {
    Camera cam = tu::small_camera(64);
    GaussianCloud cloud = tu::random_cloud(25, 30, cam);
    DeformField field = tu::random_field(26, 30, 5);
    MotionMask mask = init_mask(cam.width, cam.height, 4);
    std::vector<int> assignment = assign_regions(cam, cloud, mask);
    std::vector<std::uint8_t> from_mask = active_flags(mask, assignment);
    std::vector<std::uint8_t> all(cloud.count(), 1);
    EXPECT_EQ(all, from_mask);
    RenderOutput a = rasterize(cam, deform_cloud(cloud, field, 0.3, from_mask));
    RenderOutput b = rasterize(cam, deform_cloud(cloud, field, 0.3, all));
    EXPECT_EQ(0.0, tu::max_image_diff(a.color, b.color));
    EXPECT_EQ(0.0, tu::max_image_diff(a.depth, b.depth));
}
