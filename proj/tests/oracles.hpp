#pragma once

// Double-precision reference implementations and finite-difference machinery.
// These are written independently of the engine (plain loops, no shared math
// helpers) so they can serve as an oracle for gradient checks: gradients are
// compared against central finite differences of the reference forward pass,
// evaluated in f64 to keep FD noise far below the test tolerance.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "envgen/tensor.hpp"

namespace oracles {

using envgen::Shape;
using DVec = std::vector<double>;

struct DTensor {
    Shape shape;
    DVec v;
};

inline std::int64_t numelem(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline DTensor from_tensor(const envgen::Tensor& t) {
    DTensor d{t.shape(), DVec(static_cast<std::size_t>(t.size()))};
    for (std::int64_t i = 0; i < t.size(); ++i) d.v[static_cast<std::size_t>(i)] = t[i];
    return d;
}

// --- reference forward ops ---------------------------------------------------

inline DTensor ref_matmul(const DTensor& a, const DTensor& b, bool ta, bool tb) {
    auto last = [](const Shape& s, int i) { return s[s.size() - static_cast<std::size_t>(i)]; };
    int ar = last(a.shape, 2), ac = last(a.shape, 1);
    int br = last(b.shape, 2), bc = last(b.shape, 1);
    int m = ta ? ac : ar, k = ta ? ar : ac, n = tb ? br : bc;
    bool batched = a.shape.size() == 3 || b.shape.size() == 3;
    int nb = 1;
    if (a.shape.size() == 3) nb = a.shape[0];
    if (b.shape.size() == 3) nb = b.shape[0];
    DTensor out{batched ? Shape{nb, m, n} : Shape{m, n},
                DVec(static_cast<std::size_t>(nb) * m * n, 0.0)};
    std::int64_t sa = a.shape.size() == 3 ? static_cast<std::int64_t>(ar) * ac : 0;
    std::int64_t sb = b.shape.size() == 3 ? static_cast<std::int64_t>(br) * bc : 0;
    for (int bi = 0; bi < nb; ++bi) {
        const double* ap = a.v.data() + bi * sa;
        const double* bp = b.v.data() + bi * sb;
        double* op = out.v.data() + static_cast<std::int64_t>(bi) * m * n;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int kk = 0; kk < k; ++kk) {
                    double av = ta ? ap[kk * ac + i] : ap[i * ac + kk];
                    double bv = tb ? bp[j * bc + kk] : bp[kk * bc + j];
                    acc += av * bv;
                }
                op[i * n + j] = acc;
            }
    }
    return out;
}

inline DTensor ref_conv2d(const DTensor& x, const DTensor& k, bool circular) {
    int n = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3];
    int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    DTensor out{{n, cout, h, w}, DVec(static_cast<std::size_t>(n) * cout * h * w, 0.0)};
    for (int s = 0; s < n; ++s)
        for (int co = 0; co < cout; ++co)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    double acc = 0.0;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                int si = i + ki - ph, sj = j + kj - pw;
                                if (circular) {
                                    si = ((si % h) + h) % h;
                                    sj = ((sj % w) + w) % w;
                                } else if (si < 0 || si >= h || sj < 0 || sj >= w) {
                                    continue;
                                }
                                acc += x.v[((static_cast<std::size_t>(s) * cin + ci) * h + si) * w + sj] *
                                       k.v[((static_cast<std::size_t>(co) * cin + ci) * kh + ki) * kw + kj];
                            }
                    out.v[((static_cast<std::size_t>(s) * cout + co) * h + i) * w + j] = acc;
                }
    return out;
}

inline Shape ref_broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        int da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        out[i] = std::max(da, db);
    }
    return out;
}

template <typename F>
inline DTensor ref_broadcast(const DTensor& a, const DTensor& b, F&& f) {
    Shape os = ref_broadcast_shape(a.shape, b.shape);
    DTensor out{os, DVec(static_cast<std::size_t>(numelem(os)))};
    std::size_t r = os.size();
    std::vector<int> idx(r, 0);
    auto src_index = [&](const Shape& s) {
        std::int64_t lin = 0, stride = 1;
        for (int d = static_cast<int>(s.size()) - 1, od = static_cast<int>(r) - 1; d >= 0; --d, --od) {
            int coord = s[static_cast<std::size_t>(d)] == 1 ? 0 : idx[static_cast<std::size_t>(od)];
            lin += coord * stride;
            stride *= s[static_cast<std::size_t>(d)];
        }
        return lin;
    };
    for (std::int64_t lin = 0; lin < numelem(os); ++lin) {
        out.v[static_cast<std::size_t>(lin)] =
            f(a.v[static_cast<std::size_t>(src_index(a.shape))], b.v[static_cast<std::size_t>(src_index(b.shape))]);
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            if (++idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
    return out;
}

inline DTensor ref_map(const DTensor& x, double (*f)(double)) {
    DTensor out{x.shape, DVec(x.v.size())};
    for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = f(x.v[i]);
    return out;
}

inline double ref_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline DTensor ref_softmax(const DTensor& x) {
    DTensor out{x.shape, DVec(x.v.size())};
    std::int64_t d = x.shape.back();
    std::int64_t rows = numelem(x.shape) / d;
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xp = x.v.data() + r * d;
        double* op = out.v.data() + r * d;
        double mx = xp[0];
        for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, xp[i]);
        double den = 0.0;
        for (std::int64_t i = 0; i < d; ++i) den += std::exp(xp[i] - mx);
        for (std::int64_t i = 0; i < d; ++i) op[i] = std::exp(xp[i] - mx) / den;
    }
    return out;
}

inline DTensor ref_layer_norm(const DTensor& x, double eps) {
    DTensor out{x.shape, DVec(x.v.size())};
    std::int64_t d = x.shape.back();
    std::int64_t rows = numelem(x.shape) / d;
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xp = x.v.data() + r * d;
        double* op = out.v.data() + r * d;
        double mean = 0.0, var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) mean += xp[i];
        mean /= static_cast<double>(d);
        for (std::int64_t i = 0; i < d; ++i) var += (xp[i] - mean) * (xp[i] - mean);
        var /= static_cast<double>(d);
        for (std::int64_t i = 0; i < d; ++i) op[i] = (xp[i] - mean) / std::sqrt(var + eps);
    }
    return out;
}

// --- finite differences ------------------------------------------------------

// f: flat double inputs (one vector per operand) -> scalar loss
using RefLoss = std::function<double(const std::vector<DVec>&)>;

// Central differences with base step 1e-3, Richardson-refined with the
// half step so truncation error (O(h^2) raw) drops to O(h^4); otherwise
// truncation noise near derivative zero-crossings would dominate the
// 1e-4 comparison threshold.
inline DVec fd_grad(const RefLoss& f, std::vector<DVec> inputs, std::size_t which, double h = 1e-3) {
    DVec g(inputs[which].size());
    auto central = [&](std::size_t i, double keep, double s) {
        inputs[which][i] = keep + s;
        double up = f(inputs);
        inputs[which][i] = keep - s;
        double dn = f(inputs);
        return (up - dn) / (2.0 * s);
    };
    for (std::size_t i = 0; i < g.size(); ++i) {
        double keep = inputs[which][i];
        double d1 = central(i, keep, h);
        double d2 = central(i, keep, h / 2.0);
        inputs[which][i] = keep;
        g[i] = (4.0 * d2 - d1) / 3.0;
    }
    return g;
}

// Relative-error comparison excluding tiny coordinates. Two cutoffs: the
// absolute one (1e-6), and a scale-aware one at a small fraction of the
// tensor's largest gradient coordinate — f32 arithmetic carries an absolute
// noise floor of ~eps * (coordinate scale), so coordinates far below that
// scale cannot meet a 1e-4 relative bound in any implementation and carry
// no signal about gradient correctness.
struct GradCompare {
    double worst_rel = 0.0;
    std::int64_t compared = 0;
    bool ok(double tol = 1e-4) const { return worst_rel < tol; }
};

inline GradCompare compare_grads(const envgen::Tensor& analytic, const DVec& fd, double exclude_below = 1e-6,
                                 double scale_fraction = 5e-3) {
    double peak = 0.0;
    for (std::int64_t i = 0; i < analytic.size(); ++i) peak = std::max(peak, std::abs(static_cast<double>(analytic[i])));
    double cutoff = std::max(exclude_below, scale_fraction * peak);
    GradCompare r;
    for (std::int64_t i = 0; i < analytic.size(); ++i) {
        double a = analytic[i], b = fd[static_cast<std::size_t>(i)];
        if (std::abs(a) < cutoff) continue;
        double rel = std::abs(a - b) / std::max(std::abs(a), std::abs(b));
        r.worst_rel = std::max(r.worst_rel, rel);
        ++r.compared;
    }
    return r;
}

// loss = sum(out * weights): contracts any reference output to a scalar while
// preserving the natural gradient scale (so the 1e-6 tiny-coordinate cutoff
// stays meaningful)
inline double weighted_sum(const DVec& out, const DVec& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * w[i];
    return acc;
}

}  // namespace oracles
