#include <gtest/gtest.h>

#include "ehsg/metrics.hpp"
#include "test_util.hpp"

using namespace ehsg;
namespace tu = ehsg::testutil;

namespace {

double psnr_oracle(const Image<double>& a, const Image<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    double m = acc / double(a.size());
    return 10.0 * std::log10(1.0 / m);
}

// Direct windowed SSIM with centered moment sums; independent of the
// separable-filter route used by the implementation.
double ssim_oracle(const Image<double>& a, const Image<double>& b) {
    const int win = 11;
    const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double kernel[win][win];
    double norm = 0.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double dx = i - 5, dy = j - 5;
            kernel[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            norm += kernel[i][j];
        }
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) kernel[i][j] /= norm;

    double total = 0.0;
    std::size_t count = 0;
    for (int ch = 0; ch < a.channels; ++ch)
        for (int y = 0; y + win <= a.height; ++y)
            for (int x = 0; x + win <= a.width; ++x) {
                double mu_a = 0.0, mu_b = 0.0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        mu_a += kernel[i][j] * a.at(x + j, y + i, ch);
                        mu_b += kernel[i][j] * b.at(x + j, y + i, ch);
                    }
                double var_a = 0.0, var_b = 0.0, cov = 0.0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        double da = a.at(x + j, y + i, ch) - mu_a;
                        double db = b.at(x + j, y + i, ch) - mu_b;
                        var_a += kernel[i][j] * da * da;
                        var_b += kernel[i][j] * db * db;
                        cov += kernel[i][j] * da * db;
                    }
                total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                         ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                ++count;
            }
    return total / double(count);
}

}  // namespace

TEST(Psnr, IdenticalImagesAreInfinite) {
    Image<double> a = tu::random_image(3, 24, 16, 3);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
    EXPECT_GT(psnr(a, a), 0.0);
}

TEST(Psnr, UniformTenthErrorIsTwentyDecibels) {
    Image<double> a(32, 32, 3, 0.4);
    Image<double> b(32, 32, 3, 0.5);
    EXPECT_NEAR(20.0, psnr(a, b), 1e-9);
}

TEST(Psnr, MatchesDirectFormulaOracle) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Image<double> a = tu::random_image(seed, 31, 17, 3);
        Image<double> b = tu::random_image(seed + 100, 31, 17, 3);
        EXPECT_NEAR(psnr_oracle(a, b), psnr(a, b), 1e-9);
    }
}

TEST(Psnr, ShapeMismatchRejected) {
    Image<double> a(8, 8, 3), b(8, 9, 3);
    EXPECT_THROW(psnr(a, b), std::invalid_argument);
}

TEST(Ssim, SelfSimilarityIsExactlyOne) {
    Image<double> a = tu::random_image(7, 40, 28, 3);
    EXPECT_EQ(1.0, ssim(a, a));
}

TEST(Ssim, MatchesDirectFormulaOracle) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Image<double> a = tu::random_image(seed, 25, 19, 3);
        Image<double> b = tu::random_image(seed + 51, 25, 19, 3);
        EXPECT_NEAR(ssim_oracle(a, b), ssim(a, b), 1e-9) << "seed " << seed;
    }
}

TEST(Ssim, ConstantShiftMatchesOracle) {
    Image<double> a(24, 24, 1, 0.25);
    Image<double> b(24, 24, 1, 0.75);
    EXPECT_NEAR(ssim_oracle(a, b), ssim(a, b), 1e-9);
    EXPECT_LT(ssim(a, b), 1.0);
}

TEST(Ssim, InvertedBinaryImageScoresNegative) {
    Image<double> a(32, 32, 1);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) a.at(x, y) = ((x / 4 + y / 4) % 2) ? 1.0 : 0.0;
    Image<double> b = a;
    for (double& v : b.data) v = 1.0 - v;
    EXPECT_LT(ssim(a, b), 0.0);
    EXPECT_NEAR(ssim_oracle(a, b), ssim(a, b), 1e-9);
}

TEST(Ssim, ImageSmallerThanWindowRejected) {
    Image<double> a(8, 8, 1), b(8, 8, 1);
    EXPECT_THROW(ssim(a, b), std::invalid_argument);
}
