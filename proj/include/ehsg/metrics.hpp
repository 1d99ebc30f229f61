#pragma once

#include <limits>

#include "ehsg/common.hpp"

namespace ehsg {

inline double mse(const Image<double>& a, const Image<double>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mse: image shapes differ");
    if (a.empty()) throw std::invalid_argument("mse: empty image");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / double(a.size());
}

// Peak signal-to-noise ratio for images in [0,1]; identical images map to
// the +infinity sentinel.
inline double psnr(const Image<double>& a, const Image<double>& b) {
    double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> k(size);
    double sum = 0.0;
    int half = size / 2;
    for (int i = 0; i < size; ++i) {
        double d = i - half;
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Separable valid-mode filtering of one channel plane.
inline std::vector<double> filter_valid(const std::vector<double>& plane, int w, int h,
                                        const std::vector<double>& kernel) {
    int k = int(kernel.size());
    int ow = w - k + 1, oh = h - k + 1;
    std::vector<double> horiz(std::size_t(ow) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += kernel[j] * plane[std::size_t(y) * w + x + j];
            horiz[std::size_t(y) * ow + x] = acc;
        }
    std::vector<double> out(std::size_t(ow) * oh);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += kernel[j] * horiz[std::size_t(y + j) * ow + x];
            out[std::size_t(y) * ow + x] = acc;
        }
    return out;
}

}  // namespace detail

// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
// k1 = 0.01, k2 = 0.03 and dynamic range 1, evaluated over windows fully
// inside the image and averaged over positions and channels.
inline double ssim(const Image<double>& a, const Image<double>& b, int window = 11,
                   double sigma = 1.5, double k1 = 0.01, double k2 = 0.03) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: image shapes differ");
    if (a.width < window || a.height < window)
        throw std::invalid_argument("ssim: image smaller than the window");

    const double c1 = k1 * k1, c2 = k2 * k2;
    auto kernel = detail::gaussian_window(window, sigma);
    int w = a.width, h = a.height;
    std::size_t plane_px = std::size_t(w) * h;

    double total = 0.0;
    std::size_t windows = 0;
    std::vector<double> pa(plane_px), pb(plane_px), paa(plane_px), pbb(plane_px), pab(plane_px);
    for (int ch = 0; ch < a.channels; ++ch) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double va = a.at(x, y, ch), vb = b.at(x, y, ch);
                std::size_t idx = std::size_t(y) * w + x;
                pa[idx] = va;
                pb[idx] = vb;
                paa[idx] = va * va;
                pbb[idx] = vb * vb;
                pab[idx] = va * vb;
            }
        auto mu_a = detail::filter_valid(pa, w, h, kernel);
        auto mu_b = detail::filter_valid(pb, w, h, kernel);
        auto e_aa = detail::filter_valid(paa, w, h, kernel);
        auto e_bb = detail::filter_valid(pbb, w, h, kernel);
        auto e_ab = detail::filter_valid(pab, w, h, kernel);
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            double var_a = e_aa[i] - mu_a[i] * mu_a[i];
            double var_b = e_bb[i] - mu_b[i] * mu_b[i];
            double cov = e_ab[i] - mu_a[i] * mu_b[i];
            double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2);
            total += num / den;
            ++windows;
        }
    }
    return total / double(windows);
}

}  // namespace ehsg
