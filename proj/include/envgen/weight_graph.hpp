#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/expert.hpp"
#include "envgen/io.hpp"
#include "envgen/tensor.hpp"

namespace envgen {

// One node per output neuron/channel; a node's feature vector is its incoming
// weights followed by its bias, with skip-path weights appended on merge nodes.
struct WeightGraph {
    std::uint64_t arch_id = 0;
    std::vector<Tensor> layers;  // per layer: [n_nodes, feature_len]

    int node_count() const {
        int n = 0;
        for (const auto& t : layers) n += t.dim(0);
        return n;
    }
};

struct LayerShape {
    int nodes = 0;    // D_out or C_out
    int main_len = 0; // D_in+1 or C_in*k*k+1 (weights followed by bias)
    int skip_len = 0; // appended skip-path weights on merge nodes
    int feature_len() const { return main_len + skip_len; }
};

inline std::vector<LayerShape> graph_shapes(const ArchSpec& arch) {
    arch.validate();
    std::vector<LayerShape> out;
    for (int i = 0; i < static_cast<int>(arch.layers.size()); ++i) {
        const LayerSpec& l = arch.layers[i];
        LayerShape s;
        s.nodes = l.out;
        s.main_len = (l.kind == LayerKind::Linear ? l.in : l.in * l.kernel * l.kernel) + 1;
        for (const auto& e : arch.skips)
            if (e.to == i) s.skip_len += arch.layers[e.from].out;
        out.push_back(s);
    }
    return out;
}

inline WeightGraph encode_graph(const ArchSpec& arch, const FlatWeights& w) {
    Layout lay = make_layout(arch);
    if (w.size() != lay.total)
        throw ShapeError("encode_graph: flat weights length " + std::to_string(w.size()) +
                         " != layout total " + std::to_string(lay.total));
    auto shapes = graph_shapes(arch);
    WeightGraph g;
    g.arch_id = arch.arch_id();
    g.layers.resize(shapes.size());
    for (std::size_t l = 0; l < shapes.size(); ++l)
        g.layers[l] = Tensor({shapes[l].nodes, shapes[l].feature_len()});

    for (const auto& seg : lay.segments) {
        const LayerShape& s = shapes[static_cast<std::size_t>(seg.layer)];
        Tensor& dst = g.layers[static_cast<std::size_t>(seg.layer)];
        const int F = s.feature_len();
        const float* src = w.data() + seg.offset;
        switch (seg.role) {
            case SegmentRole::Weight: {
                std::int64_t per_node = seg.count() / s.nodes;  // row-major rows are contiguous
                for (int n = 0; n < s.nodes; ++n)
                    std::copy(src + n * per_node, src + (n + 1) * per_node, dst.data() + static_cast<std::int64_t>(n) * F);
                break;
            }
            case SegmentRole::Bias:
                for (int n = 0; n < s.nodes; ++n) dst.data()[static_cast<std::int64_t>(n) * F + s.main_len - 1] = src[n];
                break;
            case SegmentRole::Skip: {
                std::int64_t per_node = seg.count() / s.nodes;
                for (int n = 0; n < s.nodes; ++n)
                    std::copy(src + n * per_node, src + (n + 1) * per_node,
                              dst.data() + static_cast<std::int64_t>(n) * F + s.main_len);
                break;
            }
        }
    }
    return g;
}

inline FlatWeights decode_graph(const ArchSpec& arch, const WeightGraph& g) {
    if (g.arch_id != arch.arch_id())
        throw ShapeError("decode_graph: graph arch id " + hex64(g.arch_id) + " does not match arch " +
                         hex64(arch.arch_id()));
    Layout lay = make_layout(arch);
    auto shapes = graph_shapes(arch);
    if (g.layers.size() != shapes.size()) throw ShapeError("decode_graph: layer count mismatch");
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        if (g.layers[l].dim(0) != shapes[l].nodes)
            throw ShapeError("decode_graph: layer " + std::to_string(l) + " has " +
                             std::to_string(g.layers[l].dim(0)) + " nodes, expected " +
                             std::to_string(shapes[l].nodes));
        if (g.layers[l].dim(1) != shapes[l].feature_len())
            throw ShapeError("decode_graph: layer " + std::to_string(l) + " node 0: feature length " +
                             std::to_string(g.layers[l].dim(1)) + " != " + std::to_string(shapes[l].feature_len()));
    }
    FlatWeights w({static_cast<int>(lay.total)});
    for (const auto& seg : lay.segments) {
        const LayerShape& s = shapes[static_cast<std::size_t>(seg.layer)];
        const Tensor& srcl = g.layers[static_cast<std::size_t>(seg.layer)];
        const int F = s.feature_len();
        float* dst = w.data() + seg.offset;
        switch (seg.role) {
            case SegmentRole::Weight: {
                std::int64_t per_node = seg.count() / s.nodes;
                for (int n = 0; n < s.nodes; ++n)
                    std::copy(srcl.data() + static_cast<std::int64_t>(n) * F,
                              srcl.data() + static_cast<std::int64_t>(n) * F + per_node, dst + n * per_node);
                break;
            }
            case SegmentRole::Bias:
                for (int n = 0; n < s.nodes; ++n) dst[n] = srcl.data()[static_cast<std::int64_t>(n) * F + s.main_len - 1];
                break;
            case SegmentRole::Skip: {
                std::int64_t per_node = seg.count() / s.nodes;
                for (int n = 0; n < s.nodes; ++n)
                    std::copy(srcl.data() + static_cast<std::int64_t>(n) * F + s.main_len,
                              srcl.data() + static_cast<std::int64_t>(n) * F + s.main_len + per_node,
                              dst + n * per_node);
                break;
            }
        }
    }
    return w;
}

// Per-coordinate population statistics over the zoo: every weight coordinate
// is keyed by its (layer, input position, output node) slot, biases by node.
struct WeightNormalizer {
    std::uint64_t arch_id = 0;
    double eps = 1e-6;
    std::vector<Tensor> mean, std;                       // same shapes as WeightGraph layers
    std::vector<std::pair<int, std::int64_t>> floored;   // degenerate coordinates (std < eps)
};

inline WeightNormalizer fit_normalizer(const ArchSpec& arch, const std::vector<const FlatWeights*>& records,
                                       double eps = 1e-6) {
    if (records.size() < 2) throw ConfigError("fit_normalizer: need at least 2 zoo records");
    WeightNormalizer nz;
    nz.arch_id = arch.arch_id();
    nz.eps = eps;
    auto shapes = graph_shapes(arch);
    std::vector<std::vector<double>> sum(shapes.size()), sumsq(shapes.size());
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        std::int64_t n = static_cast<std::int64_t>(shapes[l].nodes) * shapes[l].feature_len();
        sum[l].assign(static_cast<std::size_t>(n), 0.0);
        sumsq[l].assign(static_cast<std::size_t>(n), 0.0);
    }
    for (const FlatWeights* w : records) {
        WeightGraph g = encode_graph(arch, *w);
        for (std::size_t l = 0; l < g.layers.size(); ++l)
            for (std::int64_t i = 0; i < g.layers[l].size(); ++i) {
                double v = g.layers[l][i];
                sum[l][static_cast<std::size_t>(i)] += v;
                sumsq[l][static_cast<std::size_t>(i)] += v * v;
            }
    }
    const double R = static_cast<double>(records.size());
    nz.mean.resize(shapes.size());
    nz.std.resize(shapes.size());
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        Shape s{shapes[l].nodes, shapes[l].feature_len()};
        nz.mean[l] = Tensor(s);
        nz.std[l] = Tensor(s);
        for (std::int64_t i = 0; i < nz.mean[l].size(); ++i) {
            double m = sum[l][static_cast<std::size_t>(i)] / R;
            double var = sumsq[l][static_cast<std::size_t>(i)] / R - m * m;  // population divisor N
            double sd = std::sqrt(std::max(var, 0.0));
            if (sd < eps) {
                sd = eps;
                nz.floored.emplace_back(static_cast<int>(l), i);
            }
            nz.mean[l][i] = static_cast<float>(m);
            nz.std[l][i] = static_cast<float>(sd);
        }
    }
    return nz;
}

inline WeightGraph apply_normalizer(const WeightNormalizer& nz, const WeightGraph& g) {
    if (nz.arch_id != g.arch_id) throw ShapeError("apply_normalizer: arch id mismatch");
    WeightGraph out = g;
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        if (!g.layers[l].same_shape(nz.mean[l])) throw ShapeError("apply_normalizer: layer " + std::to_string(l) + " shape mismatch");
        for (std::int64_t i = 0; i < g.layers[l].size(); ++i)
            out.layers[l][i] = (g.layers[l][i] - nz.mean[l][i]) / nz.std[l][i];
    }
    return out;
}

inline WeightGraph invert_normalizer(const WeightNormalizer& nz, const WeightGraph& g) {
    if (nz.arch_id != g.arch_id) throw ShapeError("invert_normalizer: arch id mismatch");
    WeightGraph out = g;
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        if (!g.layers[l].same_shape(nz.mean[l])) throw ShapeError("invert_normalizer: layer " + std::to_string(l) + " shape mismatch");
        for (std::int64_t i = 0; i < g.layers[l].size(); ++i)
            out.layers[l][i] = g.layers[l][i] * nz.std[l][i] + nz.mean[l][i];
    }
    return out;
}

constexpr char kNormMagic[] = "ENVNRM1\0";

inline void save_normalizer(const WeightNormalizer& nz, const std::string& path) {
    BinaryWriter w(path);
    w.magic(kNormMagic);
    w.u32(1);
    w.u64(nz.arch_id);
    w.f64(nz.eps);
    w.u32(static_cast<std::uint32_t>(nz.mean.size()));
    for (std::size_t l = 0; l < nz.mean.size(); ++l) {
        w.tensor(nz.mean[l]);
        w.tensor(nz.std[l]);
    }
    w.u64(nz.floored.size());
    for (const auto& [l, i] : nz.floored) {
        w.u32(static_cast<std::uint32_t>(l));
        w.i64(i);
    }
    w.crc_trailer();
    w.close();
}

inline WeightNormalizer load_normalizer(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(kNormMagic);
    if (r.u32() != 1) throw IoError("unsupported normalizer version: " + path);
    WeightNormalizer nz;
    nz.arch_id = r.u64();
    nz.eps = r.f64();
    std::uint32_t layers = r.u32();
    nz.mean.resize(layers);
    nz.std.resize(layers);
    for (std::uint32_t l = 0; l < layers; ++l) {
        nz.mean[l] = r.tensor();
        nz.std[l] = r.tensor();
    }
    std::uint64_t nf = r.u64();
    for (std::uint64_t k = 0; k < nf; ++k) {
        int l = static_cast<int>(r.u32());
        nz.floored.emplace_back(l, r.i64());
    }
    r.check_crc_trailer();
    return nz;
}

}  // namespace envgen
