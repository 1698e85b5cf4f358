#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "envgen/weight_graph.hpp"

using namespace envgen;

namespace {

FlatWeights random_weights(const ArchSpec& a, std::uint64_t seed) {
    Rng rng(seed);
    FlatWeights w({static_cast<int>(param_count(a))});
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(rng.normal());
    return w;
}

}  // namespace

TEST_CASE("graph shapes: node counts and feature lengths") {
    auto mlp = graph_shapes(lv_mlp_arch());
    REQUIRE(mlp.size() == 2);
    CHECK(mlp[0].nodes == 128);
    CHECK(mlp[0].feature_len() == 3);  // D_in + 1
    CHECK(mlp[1].nodes == 2);
    CHECK(mlp[1].feature_len() == 129);

    auto cnn = graph_shapes(field_cnn_arch());
    REQUIRE(cnn.size() == 4);
    CHECK(cnn[0].feature_len() == 2 * 9 + 1);
    CHECK(cnn[1].feature_len() == 16 * 9 + 1);  // 145
    CHECK(cnn[2].main_len == 145);
    CHECK(cnn[2].skip_len == 16);
    CHECK(cnn[2].feature_len() == 161);  // main + appended skip path
    CHECK(cnn[3].nodes == 2);

    // conservation: total feature volume equals the parameter count
    for (const ArchSpec& a : {lv_mlp_arch(), field_cnn_arch(), field_cnn_arch(16, false)}) {
        std::int64_t sum = 0;
        for (const auto& s : graph_shapes(a)) sum += static_cast<std::int64_t>(s.nodes) * s.feature_len();
        CHECK(sum == param_count(a));
    }
}

TEST_CASE("encode places weights, bias, and skip path deterministically") {
    ArchSpec a;
    a.name = "tiny";
    a.layers = {{LayerKind::Linear, 2, 2, 0, Activation::Tanh}};
    a.integrator = Integrator::Rk4NeuralOde;
    // layout: weight [2,2] then bias [2]
    FlatWeights w({6}, {10, 11, 12, 13, 20, 21});
    WeightGraph g = encode_graph(a, w);
    REQUIRE(g.layers.size() == 1);
    REQUIRE(g.layers[0].shape() == Shape{2, 3});
    CHECK(g.layers[0][0] == 10.0f);  // node 0: incoming weights then bias
    CHECK(g.layers[0][1] == 11.0f);
    CHECK(g.layers[0][2] == 20.0f);
    CHECK(g.layers[0][3] == 12.0f);
    CHECK(g.layers[0][4] == 13.0f);
    CHECK(g.layers[0][5] == 21.0f);

    WeightGraph g2 = encode_graph(a, w);
    REQUIRE(std::memcmp(g.layers[0].data(), g2.layers[0].data(), sizeof(float) * 6) == 0);
}

TEST_CASE("skip features sit after the merge layer's main features") {
    ArchSpec a = field_cnn_arch(4);  // smaller channel count, same structure
    FlatWeights w = random_weights(a, 3);
    WeightGraph g = encode_graph(a, w);
    Layout lay = make_layout(a);
    const Segment* skip = nullptr;
    for (const auto& s : lay.segments)
        if (s.role == SegmentRole::Skip) skip = &s;
    REQUIRE(skip != nullptr);
    auto shapes = graph_shapes(a);
    int F = shapes[2].feature_len();
    for (int n = 0; n < shapes[2].nodes; ++n)
        for (int k = 0; k < shapes[2].skip_len; ++k)
            CHECK(g.layers[2][static_cast<std::int64_t>(n) * F + shapes[2].main_len + k] ==
                  w[skip->offset + static_cast<std::int64_t>(n) * shapes[2].skip_len + k]);
}

TEST_CASE("codec round trips are bit-exact") {
    for (const ArchSpec& a : {lv_mlp_arch(), field_cnn_arch(), field_cnn_arch(16, false)}) {
        for (std::uint64_t s = 0; s < 3; ++s) {
            FlatWeights w = random_weights(a, s + 1);
            FlatWeights back = decode_graph(a, encode_graph(a, w));
            REQUIRE(back.size() == w.size());
            REQUIRE(std::memcmp(back.data(), w.data(), sizeof(float) * w.size()) == 0);
        }
    }
}

TEST_CASE("decode rejects tampered graphs with a structured error") {
    ArchSpec a = lv_mlp_arch();
    WeightGraph g = encode_graph(a, random_weights(a, 1));
    WeightGraph bad = g;
    bad.layers[1] = Tensor({2, 128});  // feature length off by one
    try {
        decode_graph(a, bad);
        FAIL("expected shape error");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("layer 1") != std::string::npos);
        CHECK(msg.find("128") != std::string::npos);
    }
    WeightGraph foreign = g;
    foreign.arch_id ^= 1;
    CHECK_THROWS_AS(decode_graph(a, foreign), ShapeError);
}

TEST_CASE("normalizer hand case: values {1,3} map to -1,+1") {
    ArchSpec a;
    a.name = "n1";
    a.layers = {{LayerKind::Linear, 1, 1, 0, Activation::None}};
    a.integrator = Integrator::Rk4NeuralOde;
    FlatWeights r1({2}, {1.0f, 1.0f}), r2({2}, {3.0f, 3.0f});
    WeightNormalizer nz = fit_normalizer(a, {&r1, &r2});
    CHECK(nz.mean[0][0] == 2.0f);
    CHECK(nz.std[0][0] == 1.0f);  // population divisor
    CHECK(nz.floored.empty());
    WeightGraph gn = apply_normalizer(nz, encode_graph(a, r1));
    CHECK(gn.layers[0][0] == -1.0f);
    CHECK(gn.layers[0][1] == -1.0f);
    gn = apply_normalizer(nz, encode_graph(a, r2));
    CHECK(gn.layers[0][0] == 1.0f);

    // identical records: all coordinates floored, normalized features all zero
    WeightNormalizer flat = fit_normalizer(a, {&r1, &r1, &r1});
    CHECK(flat.floored.size() == 2);
    CHECK(flat.std[0][0] == 1e-6f);
    WeightGraph z = apply_normalizer(flat, encode_graph(a, r1));
    CHECK(z.layers[0][0] == 0.0f);
    CHECK(z.layers[0][1] == 0.0f);

    CHECK_THROWS_AS(fit_normalizer(a, {&r1}), ConfigError);
}

TEST_CASE("normalizer: apply then invert is identity; stats standardize the zoo") {
    ArchSpec a = lv_mlp_arch(16);
    std::vector<FlatWeights> zoo;
    for (int k = 0; k < 12; ++k) zoo.push_back(random_weights(a, 100 + k));
    std::vector<const FlatWeights*> ptrs;
    for (auto& w : zoo) ptrs.push_back(&w);
    WeightNormalizer nz = fit_normalizer(a, ptrs);

    WeightGraph g = encode_graph(a, zoo[4]);
    WeightGraph back = invert_normalizer(nz, apply_normalizer(nz, g));
    for (std::size_t l = 0; l < g.layers.size(); ++l)
        for (std::int64_t i = 0; i < g.layers[l].size(); ++i) {
            float ref = g.layers[l][i];
            REQUIRE_THAT(back.layers[l][i], Catch::Matchers::WithinAbs(ref, 1e-6 + 1e-6 * std::abs(ref)));
        }

    // normalized zoo coordinates: mean ~0, std ~1
    double worst_m = 0.0, worst_s = 0.0;
    std::vector<WeightGraph> norm;
    for (const auto& w : zoo) norm.push_back(apply_normalizer(nz, encode_graph(a, w)));
    for (std::size_t l = 0; l < norm[0].layers.size(); ++l)
        for (std::int64_t i = 0; i < norm[0].layers[l].size(); ++i) {
            double m = 0, m2 = 0;
            for (const auto& gn : norm) {
                m += gn.layers[l][i];
                m2 += static_cast<double>(gn.layers[l][i]) * gn.layers[l][i];
            }
            m /= norm.size();
            m2 = m2 / norm.size() - m * m;
            worst_m = std::max(worst_m, std::abs(m));
            worst_s = std::max(worst_s, std::abs(std::sqrt(std::max(m2, 0.0)) - 1.0));
        }
    CHECK(worst_m < 1e-5);
    CHECK(worst_s < 1e-4);
}

TEST_CASE("normalizer persistence round trip") {
    ArchSpec a = field_cnn_arch(4);
    std::vector<FlatWeights> zoo;
    for (int k = 0; k < 5; ++k) zoo.push_back(random_weights(a, 50 + k));
    std::vector<const FlatWeights*> ptrs;
    for (auto& w : zoo) ptrs.push_back(&w);
    WeightNormalizer nz = fit_normalizer(a, ptrs);
    auto path = std::filesystem::temp_directory_path() / "envgen_nrm_test.bin";
    save_normalizer(nz, path.string());
    WeightNormalizer fromdisk = load_normalizer(path.string());
    REQUIRE(fromdisk.arch_id == nz.arch_id);
    REQUIRE(fromdisk.mean.size() == nz.mean.size());
    for (std::size_t l = 0; l < nz.mean.size(); ++l) {
        REQUIRE(std::memcmp(fromdisk.mean[l].data(), nz.mean[l].data(), sizeof(float) * nz.mean[l].size()) == 0);
        REQUIRE(std::memcmp(fromdisk.std[l].data(), nz.std[l].data(), sizeof(float) * nz.std[l].size()) == 0);
    }
    REQUIRE(fromdisk.floored == nz.floored);
    std::filesystem::remove(path);
}
