#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "envgen/expert.hpp"

using namespace envgen;

namespace {

std::vector<const Trajectory*> ptrs(const std::vector<Trajectory>& v) {
    std::vector<const Trajectory*> out;
    for (const auto& t : v) out.push_back(&t);
    return out;
}

ArchSpec linear_1to1() {
    ArchSpec a;
    a.name = "lin1";
    a.layers = {{LayerKind::Linear, 1, 1, 0, Activation::None}};
    a.integrator = Integrator::Rk4NeuralOde;
    return a;
}

}  // namespace

TEST_CASE("layouts audit: parameter counts and exact coverage") {
    ArchSpec mlp = lv_mlp_arch();
    CHECK(param_count(mlp) == 642);  // 2*128+128 + 128*2+2

    ArchSpec cnn = field_cnn_arch();
    // 16*(2*9)+16 + 16*(16*9)+16 + [16*(16*9)+16 + 16*16 skip] + 2*(16*9)+2
    CHECK(param_count(cnn) == 304 + 2320 + (2320 + 256) + 290);

    ArchSpec plain = field_cnn_arch(16, false);
    CHECK(param_count(plain) == param_count(cnn) - 256);
    CHECK(cnn.arch_id() != plain.arch_id());
    CHECK(cnn.arch_id() == field_cnn_arch().arch_id());

    for (const ArchSpec& a : {mlp, cnn, plain}) {
        Layout lay = make_layout(a);
        std::int64_t off = 0;
        for (const auto& seg : lay.segments) {
            REQUIRE(seg.offset == off);  // contiguous, covers every value exactly once
            off += seg.count();
        }
        REQUIRE(off == lay.total);
    }

    ArchSpec bad = lv_mlp_arch();
    bad.layers[1].in = 64;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("init schemes: zero, determinism, fan-in bound") {
    ArchSpec a = lv_mlp_arch();
    FlatWeights z = build_expert(a, InitScheme::Zero, 1);
    for (std::int64_t i = 0; i < z.size(); ++i) REQUIRE(z[i] == 0.0f);

    FlatWeights w1 = build_expert(a, InitScheme::FanIn, 7);
    FlatWeights w2 = build_expert(a, InitScheme::FanIn, 7);
    REQUIRE(std::memcmp(w1.data(), w2.data(), sizeof(float) * w1.size()) == 0);
    FlatWeights w3 = build_expert(a, InitScheme::FanIn, 8);
    CHECK(std::memcmp(w1.data(), w3.data(), sizeof(float) * w1.size()) != 0);

    Layout lay = make_layout(a);
    double bound0 = 1.0 / std::sqrt(2.0);
    for (std::int64_t i = 0; i < lay.segments[0].count(); ++i) CHECK(std::abs(w1[i]) <= bound0);
}

TEST_CASE("zero-weight ode expert leaves the state unchanged") {
    ArchSpec a = lv_mlp_arch();
    FlatWeights w = build_expert(a, InitScheme::Zero, 0);
    Tensor frame({2}, {1.7f, 0.4f});
    Tensor next = expert_step(a, w, frame, 0.1);
    CHECK(next[0] == 1.7f);
    CHECK(next[1] == 0.4f);
}

TEST_CASE("rk4 neural-ode step equals the degree-4 taylor polynomial on a linear net") {
    ArchSpec a = linear_1to1();
    const double coef = 0.8, dt = 0.3;
    FlatWeights w({2}, {static_cast<float>(coef), 0.0f});
    Tensor next = expert_step(a, w, Tensor({1}, {1.0f}), dt);
    double ad = coef * dt;
    double taylor = 1.0 + ad + ad * ad / 2.0 + ad * ad * ad / 6.0 + ad * ad * ad * ad / 24.0;
    REQUIRE_THAT(next[0], Catch::Matchers::WithinAbs(taylor, 1e-6));

    Tensor d = expert_derivative(a, w, Tensor({3, 1}, {1.0f, 2.0f, -1.0f}));
    CHECK_THAT(d[0], Catch::Matchers::WithinAbs(coef, 1e-6));
    CHECK_THAT(d[1], Catch::Matchers::WithinAbs(2 * coef, 1e-6));
    CHECK_THAT(d[2], Catch::Matchers::WithinAbs(-coef, 1e-6));
}

TEST_CASE("field expert preserves the frame shape") {
    ArchSpec a = field_cnn_arch();
    FlatWeights w = build_expert(a, InitScheme::FanIn, 3);
    Tensor frame = Tensor::randn({2, 8, 8}, *[] { static Rng r(5); return &r; }());
    Tensor next = expert_step(a, w, frame, 0.1);
    REQUIRE(next.shape() == Shape{2, 8, 8});
    REQUIRE(next.all_finite());
}

TEST_CASE("training: zero epochs is a no-op and the curve tracks epochs") {
    EnvironmentSpec env{SystemId::LotkaVolterra, 0, {0.7, 0.6}, true};
    std::vector<Trajectory> trajs;
    Rng rng(11);
    for (int k = 0; k < 3; ++k)
        trajs.push_back(simulate_lv(env, rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), 0.1, 3.0));

    ArchSpec a = lv_mlp_arch();
    FlatWeights w0 = build_expert(a, InitScheme::FanIn, 1);
    TrainConfig cfg;
    cfg.epochs = 0;
    TrainResult r0 = train_expert(a, w0, ptrs(trajs), cfg);
    REQUIRE(std::memcmp(r0.w.data(), w0.data(), sizeof(float) * w0.size()) == 0);
    REQUIRE(r0.curve.empty());

    cfg.epochs = 3;
    cfg.seed = 21;
    TrainResult r3 = train_expert(a, w0, ptrs(trajs), cfg);
    REQUIRE(r3.curve.size() == 3);
    CHECK(r3.final_loss == r3.curve.back());
    TrainResult r3b = train_expert(a, w0, ptrs(trajs), cfg);
    REQUIRE(std::memcmp(r3.w.data(), r3b.w.data(), sizeof(float) * r3.w.size()) == 0);
}

TEST_CASE("lv expert reaches the one-step gate in 50 epochs") {
    EnvironmentSpec env{SystemId::LotkaVolterra, 0, {0.7, 0.6}, true};
    std::vector<Trajectory> trajs;
    Rng rng(17);
    for (int k = 0; k < 20; ++k)
        trajs.push_back(simulate_lv(env, rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), 0.1, 10.0));

    ArchSpec a = lv_mlp_arch();
    FlatWeights w0 = build_expert(a, InitScheme::FanIn, 2);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.lr = 1e-4;
    cfg.seed = 5;
    TrainResult r = train_expert(a, w0, ptrs(trajs), cfg);
    INFO("first epoch " << r.curve.front() << " final " << r.final_loss);
    CHECK(r.final_loss < 1e-3);

    // soft monotonicity: window-5 smoothed loss non-increasing with <10% violations
    std::vector<double> smooth;
    for (std::size_t i = 4; i < r.curve.size(); ++i) {
        double s = 0;
        for (std::size_t j = i - 4; j <= i; ++j) s += r.curve[j];
        smooth.push_back(s / 5);
    }
    int viol = 0;
    for (std::size_t i = 1; i < smooth.size(); ++i) viol += smooth[i] > smooth[i - 1] ? 1 : 0;
    CHECK(viol <= static_cast<int>(smooth.size()) / 10);

    double held = one_step_mse(a, r.w, ptrs(trajs));
    CHECK(held < 1e-3);
}

TEST_CASE("rollout: determinism, constant trajectory for zero weights, truncation") {
    ArchSpec a = lv_mlp_arch();
    FlatWeights z = build_expert(a, InitScheme::Zero, 0);
    Tensor ic({2}, {2.0f, 1.0f});
    Trajectory t = rollout(a, z, ic, 100, 0.1, 12);
    REQUIRE(t.states.shape() == Shape{101, 2});
    REQUIRE_FALSE(t.truncated);
    CHECK(t.env_id == 12);
    for (int s = 0; s <= 100; ++s) {
        CHECK(t.frame(s)[0] == 2.0f);
        CHECK(t.frame(s)[1] == 1.0f);
    }

    FlatWeights w = build_expert(a, InitScheme::FanIn, 9);
    Trajectory r1 = rollout(a, w, ic, 50, 0.1);
    Trajectory r2 = rollout(a, w, ic, 50, 0.1);
    REQUIRE(std::memcmp(r1.states.data(), r2.states.data(), sizeof(float) * r1.states.size()) == 0);

    FlatWeights boom({642});
    for (std::int64_t i = 0; i < boom.size(); ++i) boom[i] = 1e20f;
    Trajectory tb = rollout(a, boom, ic, 100, 0.1);
    CHECK(tb.truncated);
    CHECK(tb.states.dim(0) < 101);
}
