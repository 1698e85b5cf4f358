#pragma once

// Scalar comparison metrics shared by the evaluation harness and the module
// tests: trajectory RMSE, windowed SSIM for field snapshots, Spearman rank
// correlation, and the energy distance between two sample clouds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/tensor.hpp"

namespace envgen {

// root mean squared error over every element of two equal-shape tensors
inline double rmse(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape()) throw ShapeError("rmse: shape mismatch");
    if (pred.size() == 0) throw ShapeError("rmse: empty input");
    double sum = 0.0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        double d = static_cast<double>(pred[i]) - truth[i];
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(pred.size()));
}

constexpr int kSsimWindow = 7;

// mean SSIM over all fully-contained kSsimWindow x kSsimWindow uniform windows,
// computed per channel on [C, H, W] frames and averaged across channels.
// L defaults to the truth frame's data range (1 when the frame is constant).
inline double ssim(const Tensor& pred, const Tensor& truth, double L = -1.0) {
    if (pred.shape() != truth.shape()) throw ShapeError("ssim: shape mismatch");
    if (pred.rank() != 3) throw ShapeError("ssim: frames must be [channels, height, width]");
    const int C = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
    if (H < kSsimWindow || W < kSsimWindow)
        throw ShapeError("ssim: frame smaller than the " + std::to_string(kSsimWindow) + "x" +
                         std::to_string(kSsimWindow) + " window");
    if (L <= 0.0) {
        float lo = truth[0], hi = truth[0];
        for (std::int64_t i = 1; i < truth.size(); ++i) {
            lo = std::min(lo, truth[i]);
            hi = std::max(hi, truth[i]);
        }
        L = static_cast<double>(hi) - lo;
        if (L == 0.0) L = 1.0;
    }
    const double C1 = (0.01 * L) * (0.01 * L);
    const double C2 = (0.03 * L) * (0.03 * L);
    const double inv_n = 1.0 / (kSsimWindow * kSsimWindow);

    double channel_sum = 0.0;
    for (int c = 0; c < C; ++c) {
        const float* x = pred.data() + static_cast<std::int64_t>(c) * H * W;
        const float* y = truth.data() + static_cast<std::int64_t>(c) * H * W;
        double win_sum = 0.0;
        int wins = 0;
        for (int i = 0; i + kSsimWindow <= H; ++i) {
            for (int j = 0; j + kSsimWindow <= W; ++j) {
                double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
                for (int a = 0; a < kSsimWindow; ++a) {
                    for (int b = 0; b < kSsimWindow; ++b) {
                        double xv = x[(i + a) * W + (j + b)];
                        double yv = y[(i + a) * W + (j + b)];
                        sx += xv;
                        sy += yv;
                        sxx += xv * xv;
                        syy += yv * yv;
                        sxy += xv * yv;
                    }
                }
                double mx = sx * inv_n, my = sy * inv_n;
                double vx = sxx * inv_n - mx * mx;
                double vy = syy * inv_n - my * my;
                double cxy = sxy * inv_n - mx * my;
                double num = (2.0 * mx * my + C1) * (2.0 * cxy + C2);
                double den = (mx * mx + my * my + C1) * (vx + vy + C2);
                win_sum += num / den;
                ++wins;
            }
        }
        channel_sum += win_sum / wins;
    }
    return channel_sum / C;
}

namespace metric_detail {

// average ranks, ties share the mean of their positions
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean_rank;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw NumericError("correlation of a constant sequence is undefined");
    return sab / std::sqrt(saa * sbb);
}

}  // namespace metric_detail

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
    if (a.size() < 2) throw ShapeError("spearman: need at least two points");
    return metric_detail::pearson(metric_detail::ranks(a), metric_detail::ranks(b));
}

// energy distance between two sample clouds X [n, d] and Y [m, d]:
// sqrt(2 E|X-Y| - E|X-X'| - E|Y-Y'|) with V-statistic expectations
inline double energy_distance(const Tensor& X, const Tensor& Y) {
    if (X.rank() != 2 || Y.rank() != 2 || X.dim(1) != Y.dim(1))
        throw ShapeError("energy_distance: inputs must be [samples, dim] with equal dim");
    const int n = X.dim(0), m = Y.dim(0), d = X.dim(1);
    if (n == 0 || m == 0) throw ShapeError("energy_distance: empty sample cloud");
    auto dist = [d](const float* a, const float* b) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) {
            double dd = static_cast<double>(a[k]) - b[k];
            s += dd * dd;
        }
        return std::sqrt(s);
    };
    double axy = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) axy += dist(X.data() + static_cast<std::int64_t>(i) * d,
                                                Y.data() + static_cast<std::int64_t>(j) * d);
    axy /= static_cast<double>(n) * m;
    double axx = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) axx += dist(X.data() + static_cast<std::int64_t>(i) * d,
                                                X.data() + static_cast<std::int64_t>(j) * d);
    axx /= static_cast<double>(n) * n;
    double ayy = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) ayy += dist(Y.data() + static_cast<std::int64_t>(i) * d,
                                                Y.data() + static_cast<std::int64_t>(j) * d);
    ayy /= static_cast<double>(m) * m;
    return std::sqrt(std::max(0.0, 2.0 * axy - axx - ayy));
}

}  // namespace envgen
