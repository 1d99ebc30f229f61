#pragma once

#include <filesystem>

#include "ehsg/autodiff.hpp"
#include "ehsg/deform.hpp"
#include "ehsg/raster.hpp"

namespace ehsg::testutil {

inline Camera small_camera(int size = 64) {
    Camera cam;
    cam.width = size;
    cam.height = size;
    cam.fx = cam.fy = 100.0 * size / 128.0;
    cam.cx = cam.cy = size / 2.0;
    return cam;
}

// Random cloud whose Gaussians sit in front of the camera and mostly on
// screen; sizes chosen so several splats overlap.
inline GaussianCloud random_cloud(std::uint64_t seed, std::size_t n, const Camera& cam) {
    Rng rng(seed);
    GaussianCloud cloud;
    for (std::size_t i = 0; i < n; ++i) {
        double z = rng.uniform(3.0, 7.0);
        double half_w = 0.45 * cam.width * z / cam.fx;
        double half_h = 0.45 * cam.height * z / cam.fy;
        cloud.means.push_back(Vec3(rng.uniform(-half_w, half_w), rng.uniform(-half_h, half_h), z));
        cloud.raw_scales.push_back(Vec3(rng.uniform(-2.5, -1.0), rng.uniform(-2.5, -1.0),
                                        rng.uniform(-2.5, -1.0)));
        Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        if (q.norm() < 1e-3) q = Vec4(1, 0, 0, 0);
        cloud.rotations.push_back(q);
        cloud.raw_opacities.push_back(rng.uniform(-1.0, 2.0));
        cloud.colors.push_back(Vec3(rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95),
                                    rng.uniform(0.05, 0.95)));
    }
    cloud.validate();
    return cloud;
}

inline RenderAttributes activate(const GaussianCloud& cloud) {
    RenderAttributes attrs;
    attrs.means3d = cloud.means;
    attrs.colors = cloud.colors;
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        attrs.covariances3d.push_back(covariance3d(cloud.raw_scales[i], cloud.rotations[i]));
        attrs.opacities.push_back(sigmoid(cloud.raw_opacities[i]));
    }
    return attrs;
}

inline RenderAttributes random_scene(std::uint64_t seed, std::size_t n, const Camera& cam) {
    return activate(random_cloud(seed, n, cam));
}

// Field with random small weights and perturbed centers/widths; exercises
// every parameter without blowing the scene apart.
inline DeformField random_field(std::uint64_t seed, std::size_t n, int basis,
                                LifecycleMode mode = LifecycleMode::additive) {
    DeformField field = init_field(n, basis, mode);
    Rng rng(seed);
    auto scramble = [&](AttributeField& f, double weight_range) {
        for (double& w : f.weights) w = rng.uniform(-weight_range, weight_range);
        for (double& c : f.centers) c += rng.uniform(-0.1, 0.1);
        for (double& w : f.widths) w *= rng.uniform(0.6, 1.8);
    };
    scramble(field.position, 0.3);
    scramble(field.rotation, 0.2);
    scramble(field.scale, 0.2);
    scramble(field.opacity, 0.5);
    return field;
}

inline double max_image_diff(const Image<double>& a, const Image<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

inline Image<double> random_image(std::uint64_t seed, int w, int h, int c) {
    Rng rng(seed);
    Image<double> img(w, h, c);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("ehsg_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    std::string str() const { return path_.string(); }
    std::filesystem::path path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace ehsg::testutil
