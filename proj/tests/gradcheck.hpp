#pragma once

// Harness that exercises every primitive op on random instances and compares
// engine gradients against central finite differences of the double-precision
// reference forward (see oracles.hpp). Shared by the unit tests and the
// acceptance gate, so it is Catch-free.

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "envgen/graph.hpp"
#include "envgen/rng.hpp"
#include "oracles.hpp"

namespace gradcheck {

using envgen::Graph;
using envgen::Rng;
using envgen::Shape;
using envgen::Tensor;
using oracles::DTensor;
using oracles::DVec;

struct OpGradReport {
    std::string op;
    int instances = 0;
    std::int64_t coords_compared = 0;
    double worst_grad_rel = 0.0;
    double worst_forward_rel = 0.0;
    bool ok(double tol = 1e-4) const { return worst_grad_rel < tol && worst_forward_rel < tol; }
};

namespace detail {

using Builder = std::function<int(Graph&, const std::vector<int>&)>;
using RefFwd = std::function<DVec(const std::vector<DVec>&)>;

inline void run_instance(const std::vector<Tensor>& ins, const Builder& build, const RefFwd& ref, Rng& rng,
                         OpGradReport& rep) {
    Graph g;
    std::vector<int> ids;
    std::unordered_map<std::string, Tensor> binds;
    for (std::size_t i = 0; i < ins.size(); ++i) {
        std::string nm = "x" + std::to_string(i);
        ids.push_back(g.input(nm, ins[i].shape()));
        binds[nm] = ins[i];
    }
    int out = build(g, ids);
    // contraction weights bounded away from zero keep gradient coords at scale
    Tensor wt(g.shape_of(out));
    for (std::int64_t i = 0; i < wt.size(); ++i)
        wt[i] = static_cast<float>((rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5));
    int loss = g.sum_all(g.mul(out, g.constant(wt)));

    auto ev = envgen::forward_eval(g, binds);
    auto gd = envgen::grad(g, ev, loss);

    std::vector<DVec> dins;
    for (const auto& t : ins) dins.push_back(oracles::from_tensor(t).v);
    DVec dw = oracles::from_tensor(wt).v;

    DVec ref_out = ref(dins);
    const Tensor& eng_out = ev.value(out);
    for (std::int64_t i = 0; i < eng_out.size(); ++i) {
        double a = eng_out[i], b = ref_out[static_cast<std::size_t>(i)];
        double den = std::max({std::abs(a), std::abs(b), 1e-3});
        rep.worst_forward_rel = std::max(rep.worst_forward_rel, std::abs(a - b) / den);
    }

    auto loss_fn = [&](const std::vector<DVec>& xs) { return oracles::weighted_sum(ref(xs), dw); };
    for (std::size_t i = 0; i < ins.size(); ++i) {
        DVec fd = oracles::fd_grad(loss_fn, dins, i);
        auto cmp = oracles::compare_grads(gd.wrt("x" + std::to_string(i)), fd);
        rep.worst_grad_rel = std::max(rep.worst_grad_rel, cmp.worst_rel);
        rep.coords_compared += cmp.compared;
    }
    ++rep.instances;
}

inline Shape random_shape(Rng& rng, int min_rank, int max_rank, int max_dim) {
    int r = min_rank + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_rank - min_rank + 1)));
    Shape s;
    for (int i = 0; i < r; ++i) s.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_dim))));
    return s;
}

inline DTensor dwrap(const Shape& s, const DVec& v) { return DTensor{s, v}; }

}  // namespace detail

inline OpGradReport check_matmul(Rng& rng, int instances) {
    OpGradReport rep{"matmul"};
    for (int it = 0; it < instances; ++it) {
        int m = 1 + static_cast<int>(rng.below(5)), k = 1 + static_cast<int>(rng.below(5)),
            n = 1 + static_cast<int>(rng.below(5)), b = 1 + static_cast<int>(rng.below(3));
        bool ta = rng.below(2), tb = rng.below(2);
        int layout = static_cast<int>(rng.below(4));  // 2x2, 3x3, 3x2, 2x3
        Shape sa = ta ? Shape{k, m} : Shape{m, k};
        Shape sb = tb ? Shape{n, k} : Shape{k, n};
        if (layout == 1 || layout == 2) sa.insert(sa.begin(), b);
        if (layout == 1 || layout == 3) sb.insert(sb.begin(), b);
        std::vector<Tensor> ins{Tensor::rand_uniform(sa, rng, -1.0f, 1.0f),
                                Tensor::rand_uniform(sb, rng, -1.0f, 1.0f)};
        detail::run_instance(
            ins, [&](Graph& g, const std::vector<int>& id) { return g.matmul(id[0], id[1], ta, tb); },
            [&](const std::vector<DVec>& xs) {
                return oracles::ref_matmul(detail::dwrap(sa, xs[0]), detail::dwrap(sb, xs[1]), ta, tb).v;
            },
            rng, rep);
    }
    return rep;
}

inline OpGradReport check_conv2d(Rng& rng, int instances) {
    OpGradReport rep{"conv2d"};
    for (int it = 0; it < instances; ++it) {
        int n = 1 + static_cast<int>(rng.below(2)), cin = 1 + static_cast<int>(rng.below(3)),
            cout = 1 + static_cast<int>(rng.below(3));
        int h = 3 + static_cast<int>(rng.below(4)), w = 3 + static_cast<int>(rng.below(4));
        int ks = rng.below(2) ? 3 : 1;
        bool circ = rng.below(2);
        Shape sx{n, cin, h, w}, sk{cout, cin, ks, ks};
        std::vector<Tensor> ins{Tensor::rand_uniform(sx, rng, -1.0f, 1.0f),
                                Tensor::rand_uniform(sk, rng, -1.0f, 1.0f)};
        detail::run_instance(
            ins,
            [&](Graph& g, const std::vector<int>& id) {
                return g.conv2d(id[0], id[1], circ ? envgen::Pad::Circular : envgen::Pad::Zero);
            },
            [&](const std::vector<DVec>& xs) {
                return oracles::ref_conv2d(detail::dwrap(sx, xs[0]), detail::dwrap(sk, xs[1]), circ).v;
            },
            rng, rep);
    }
    return rep;
}

inline OpGradReport check_elementwise(Rng& rng, int instances, bool is_mul) {
    OpGradReport rep{is_mul ? "mul" : "add"};
    for (int it = 0; it < instances; ++it) {
        Shape sa = detail::random_shape(rng, 1, 3, 4);
        Shape sb;
        switch (rng.below(3)) {
            case 0: sb = sa; break;
            case 1: sb = {1}; break;
            default: {  // suffix of sa with random axes collapsed to 1
                std::size_t drop = rng.below(sa.size());
                sb.assign(sa.begin() + static_cast<std::ptrdiff_t>(drop), sa.end());
                for (auto& d : sb)
                    if (rng.below(2)) d = 1;
                if (sb.empty()) sb = {1};
                break;
            }
        }
        if (rng.below(2)) std::swap(sa, sb);
        std::vector<Tensor> ins{Tensor::rand_uniform(sa, rng, -1.0f, 1.0f),
                                Tensor::rand_uniform(sb, rng, -1.0f, 1.0f)};
        detail::run_instance(
            ins,
            [&](Graph& g, const std::vector<int>& id) {
                return is_mul ? g.mul(id[0], id[1]) : g.add(id[0], id[1]);
            },
            [&](const std::vector<DVec>& xs) {
                auto f_add = [](double x, double y) { return x + y; };
                auto f_mul = [](double x, double y) { return x * y; };
                return is_mul ? oracles::ref_broadcast(detail::dwrap(sa, xs[0]), detail::dwrap(sb, xs[1]), f_mul).v
                              : oracles::ref_broadcast(detail::dwrap(sa, xs[0]), detail::dwrap(sb, xs[1]), f_add).v;
            },
            rng, rep);
    }
    return rep;
}

inline OpGradReport check_unary(Rng& rng, int instances, const std::string& which) {
    OpGradReport rep{which};
    for (int it = 0; it < instances; ++it) {
        Shape s = detail::random_shape(rng, 1, 3, 5);
        if (which == "layer_norm") s.back() = std::max(s.back(), 2);
        Tensor x(s);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            double v = rng.uniform(-2.0, 2.0);
            // keep clamp test points away from the clamp edges so FD stays valid
            if (which == "exp_clamped" || which == "clamp")
                while (std::abs(std::abs(v) - 1.5) < 0.1) v = rng.uniform(-2.0, 2.0);
            x[i] = static_cast<float>(v);
        }
        if (which == "layer_norm") {
            // near-constant rows make the normalization ill-conditioned (derivatives
            // scale like 1/var); resample such rows so the FD oracle stays valid
            std::int64_t d = s.back();
            for (std::int64_t r = 0; r < x.size() / d; ++r) {
                for (;;) {
                    double mean = 0.0, var = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) mean += x[r * d + i];
                    mean /= static_cast<double>(d);
                    for (std::int64_t i = 0; i < d; ++i)
                        var += (x[r * d + i] - mean) * (x[r * d + i] - mean);
                    if (var / static_cast<double>(d) >= 0.05) break;
                    for (std::int64_t i = 0; i < d; ++i)
                        x[r * d + i] = static_cast<float>(rng.uniform(-2.0, 2.0));
                }
            }
        }
        std::vector<Tensor> ins{x};
        detail::run_instance(
            ins,
            [&](Graph& g, const std::vector<int>& id) {
                if (which == "tanh") return g.tanh(id[0]);
                if (which == "gelu") return g.gelu(id[0]);
                if (which == "exp") return g.exp(id[0]);
                if (which == "exp_clamped") return g.exp_clamped(id[0], -1.5f, 1.5f);
                if (which == "clamp") return g.clamp(id[0], -1.5f, 1.5f);
                if (which == "softmax") return g.softmax(id[0]);
                return g.layer_norm(id[0]);
            },
            [&](const std::vector<DVec>& xs) {
                DTensor d = detail::dwrap(s, xs[0]);
                if (which == "tanh") return oracles::ref_map(d, [](double v) { return std::tanh(v); }).v;
                if (which == "gelu") return oracles::ref_map(d, oracles::ref_gelu).v;
                if (which == "exp") return oracles::ref_map(d, [](double v) { return std::exp(v); }).v;
                if (which == "exp_clamped")
                    return oracles::ref_map(d, [](double v) { return std::exp(std::min(std::max(v, -1.5), 1.5)); }).v;
                if (which == "clamp")
                    return oracles::ref_map(d, [](double v) { return std::min(std::max(v, -1.5), 1.5); }).v;
                if (which == "softmax") return oracles::ref_softmax(d).v;
                return oracles::ref_layer_norm(d, envgen::kLayerNormEps).v;
            },
            rng, rep);
    }
    return rep;
}

inline OpGradReport check_reshape(Rng& rng, int instances) {
    OpGradReport rep{"reshape"};
    for (int it = 0; it < instances; ++it) {
        Shape s = detail::random_shape(rng, 2, 3, 4);
        std::int64_t n = envgen::numel(s);
        std::vector<Tensor> ins{Tensor::rand_uniform(s, rng, -1.0f, 1.0f)};
        Shape to{static_cast<int>(n)};  // flatten; gradient structure is what matters
        detail::run_instance(
            ins, [&](Graph& g, const std::vector<int>& id) { return g.reshape(id[0], to); },
            [&](const std::vector<DVec>& xs) { return xs[0]; }, rng, rep);
    }
    return rep;
}

inline OpGradReport check_concat(Rng& rng, int instances) {
    OpGradReport rep{"concat"};
    for (int it = 0; it < instances; ++it) {
        Shape base = detail::random_shape(rng, 2, 3, 4);
        int axis = static_cast<int>(rng.below(base.size()));
        int parts = 2 + static_cast<int>(rng.below(2));
        std::vector<Tensor> ins;
        std::vector<Shape> shapes;
        for (int p = 0; p < parts; ++p) {
            Shape s = base;
            s[static_cast<std::size_t>(axis)] = 1 + static_cast<int>(rng.below(3));
            shapes.push_back(s);
            ins.push_back(Tensor::rand_uniform(s, rng, -1.0f, 1.0f));
        }
        detail::run_instance(
            ins,
            [&](Graph& g, const std::vector<int>& id) { return g.concat(id, axis); },
            [&](const std::vector<DVec>& xs) {
                // reference concat: iterate outer, copy each part's slab
                std::int64_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= base[static_cast<std::size_t>(i)];
                for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < base.size(); ++i) inner *= base[i];
                std::int64_t total = 0;
                for (auto& s : shapes) total += s[static_cast<std::size_t>(axis)] * inner;
                DVec out(static_cast<std::size_t>(outer * total));
                std::int64_t off = 0;
                for (std::size_t p = 0; p < xs.size(); ++p) {
                    std::int64_t width = shapes[p][static_cast<std::size_t>(axis)] * inner;
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t i = 0; i < width; ++i)
                            out[static_cast<std::size_t>(o * total + off + i)] =
                                xs[p][static_cast<std::size_t>(o * width + i)];
                    off += width;
                }
                return out;
            },
            rng, rep);
    }
    return rep;
}

inline OpGradReport check_reduce(Rng& rng, int instances, bool mean) {
    OpGradReport rep{mean ? "mean_all" : "sum_all"};
    for (int it = 0; it < instances; ++it) {
        Shape s = detail::random_shape(rng, 1, 3, 5);
        std::vector<Tensor> ins{Tensor::rand_uniform(s, rng, -1.0f, 1.0f)};
        detail::run_instance(
            ins,
            [&](Graph& g, const std::vector<int>& id) { return mean ? g.mean_all(id[0]) : g.sum_all(id[0]); },
            [&](const std::vector<DVec>& xs) {
                double acc = 0.0;
                for (double v : xs[0]) acc += v;
                if (mean) acc /= static_cast<double>(xs[0].size());
                return DVec{acc};
            },
            rng, rep);
    }
    return rep;
}

inline std::vector<OpGradReport> run_all(std::uint64_t seed, int instances_per_op) {
    Rng rng(seed);
    std::vector<OpGradReport> out;
    out.push_back(check_matmul(rng, instances_per_op));
    out.push_back(check_conv2d(rng, instances_per_op));
    out.push_back(check_elementwise(rng, instances_per_op, false));
    out.push_back(check_elementwise(rng, instances_per_op, true));
    out.push_back(check_unary(rng, instances_per_op, "tanh"));
    out.push_back(check_unary(rng, instances_per_op, "gelu"));
    out.push_back(check_unary(rng, instances_per_op, "exp"));
    out.push_back(check_unary(rng, instances_per_op, "exp_clamped"));
    out.push_back(check_unary(rng, instances_per_op, "clamp"));
    out.push_back(check_unary(rng, instances_per_op, "softmax"));
    out.push_back(check_unary(rng, instances_per_op, "layer_norm"));
    out.push_back(check_reshape(rng, instances_per_op));
    out.push_back(check_concat(rng, instances_per_op));
    out.push_back(check_reduce(rng, instances_per_op, false));
    out.push_back(check_reduce(rng, instances_per_op, true));
    return out;
}

}  // namespace gradcheck
