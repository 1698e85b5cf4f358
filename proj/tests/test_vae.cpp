#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "envgen/vae.hpp"

using namespace envgen;

namespace {

// small synthetic corpus: records drawn around a shared base so the
// normalizer sees nontrivial spread
struct TinyCorpus {
    ArchSpec arch;
    std::vector<ExpertRecord> records;
    WeightNormalizer normalizer;
    Tensor probes;

    std::vector<const ExpertRecord*> ptrs() const {
        std::vector<const ExpertRecord*> out;
        for (const auto& r : records) out.push_back(&r);
        return out;
    }
};

TinyCorpus make_corpus(int hidden, int count, std::uint64_t seed) {
    TinyCorpus c;
    c.arch = lv_mlp_arch(hidden);
    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
        ExpertRecord r;
        r.arch_id = c.arch.arch_id();
        r.env_id = i;
        r.index = i;
        r.w = build_expert(c.arch, InitScheme::FanIn, derive_seed(seed, "rec", {static_cast<std::uint64_t>(i)}));
        r.final_loss = 1e-3;
        c.records.push_back(std::move(r));
    }
    std::vector<const FlatWeights*> ws;
    for (const auto& r : c.records) ws.push_back(&r.w);
    c.normalizer = fit_normalizer(c.arch, ws);
    c.probes = Tensor::rand_uniform({16, 2}, rng, 0.5f, 3.0f);
    return c;
}

VaeModel make_model(const TinyCorpus& c, VaeConfig cfg) {
    VaeModel m;
    m.arch = c.arch;
    m.cfg = cfg;
    m.normalizer = c.normalizer;
    m.params = init_vae_params(c.arch, cfg, cfg.seed);
    return m;
}

VaeConfig tiny_cfg() {
    VaeConfig cfg;
    cfg.d_z = 4;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.probe_batch = 8;
    cfg.batch = 2;
    cfg.epochs = 2;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("latent heads have one token per weight-graph node") {
    auto c = make_corpus(8, 3, 21);
    auto m = make_model(c, tiny_cfg());
    REQUIRE(m.tokens() == 8 + 2);
    WeightGraph gn = apply_normalizer(c.normalizer, encode_graph(c.arch, c.records[0].w));
    Posterior post = vae_encode(m, gn);
    REQUIRE(post.mu.shape() == Shape{10, 4});
    REQUIRE(post.logvar.shape() == Shape{10, 4});
    for (std::int64_t i = 0; i < post.logvar.size(); ++i) {
        REQUIRE(post.logvar[i] >= kLogvarLo);
        REQUIRE(post.logvar[i] <= kLogvarHi);
    }
    WeightGraph dec = vae_decode(m, post.mu);
    REQUIRE(dec.arch_id == c.arch.arch_id());
    REQUIRE(dec.layers[0].shape() == Shape{8, 3});
    REQUIRE(dec.layers[1].shape() == Shape{2, 9});
}

TEST_CASE("full-size encoder matches the published node count") {
    auto arch = lv_mlp_arch();
    VaeConfig cfg;  // defaults: d_z 16, width 64, 4 heads, depth 4
    VaeModel m;
    m.arch = arch;
    m.cfg = cfg;
    REQUIRE(m.tokens() == 130);
}

TEST_CASE("encode and decode are deterministic and reject foreign graphs") {
    auto c = make_corpus(8, 3, 22);
    auto m = make_model(c, tiny_cfg());
    WeightGraph gn = apply_normalizer(c.normalizer, encode_graph(c.arch, c.records[1].w));
    Posterior a = vae_encode(m, gn);
    Posterior b = vae_encode(m, gn);
    for (std::int64_t i = 0; i < a.mu.size(); ++i) {
        REQUIRE(a.mu[i] == b.mu[i]);
        REQUIRE(a.logvar[i] == b.logvar[i]);
    }
    ParamMap again = init_vae_params(c.arch, m.cfg, m.cfg.seed);
    for (const auto& [k, v] : m.params) {
        const Tensor& w = again.at(k);
        for (std::int64_t i = 0; i < v.size(); ++i) REQUIRE(v[i] == w[i]);
    }
    WeightGraph foreign = gn;
    foreign.arch_id ^= 0x1234;
    REQUIRE_THROWS_AS(vae_encode(m, foreign), ShapeError);
    REQUIRE_THROWS_AS(vae_decode(m, Tensor::zeros({3, 4})), ShapeError);
}

TEST_CASE("reparameterized samples match the posterior moments within 5 percent") {
    Rng rng(99);
    Tensor mu({1, 1}, {0.7f});
    Tensor logvar({1, 1}, {std::log(0.25f)});  // sigma = 0.5
    const int n = 10000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        Tensor z = reparameterize(mu, logvar, rng);
        sum += z[0];
        sumsq += static_cast<double>(z[0]) * z[0];
    }
    double mean = sum / n;
    double stdev = std::sqrt(sumsq / n - mean * mean);
    REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.7, 0.05 * 0.7));
    REQUIRE_THAT(stdev, Catch::Matchers::WithinAbs(0.5, 0.05 * 0.5));
    REQUIRE_THROWS_AS(reparameterize(mu, Tensor::zeros({2, 1}), rng), ShapeError);
}

TEST_CASE("KL closed form: hand value, positivity, zero only at the prior") {
    Tensor one({1, 1}, {1.0f});
    Tensor zero = Tensor::zeros({1, 1});
    REQUIRE_THAT(kl_closed_form(one, zero), Catch::Matchers::WithinAbs(0.5, 1e-7));
    REQUIRE(kl_closed_form(zero, zero) == 0.0);
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        Tensor mu({1, 1}, {static_cast<float>(rng.uniform(-3.0, 3.0))});
        Tensor lv({1, 1}, {static_cast<float>(rng.uniform(-3.0, 3.0))});
        double kl = kl_closed_form(mu, lv);
        REQUIRE(kl >= 0.0);
        if (std::abs(mu[0]) > 1e-2 || std::abs(lv[0]) > 1e-2) REQUIRE(kl > 1e-7);
    }
    // sum over latent dims, mean over nodes: two identical nodes keep the value
    Tensor mu2({2, 1}, {1.0f, 1.0f});
    Tensor lv2 = Tensor::zeros({2, 1});
    REQUIRE_THAT(kl_closed_form(mu2, lv2), Catch::Matchers::WithinAbs(0.5, 1e-7));
}

TEST_CASE("identical graphs and identical weights score zero") {
    auto c = make_corpus(8, 2, 31);
    WeightGraph g = encode_graph(c.arch, c.records[0].w);
    REQUIRE(recon_mse(g, g) == 0.0);
    REQUIRE(functional_distance(c.arch, c.records[0].w, c.records[0].w, c.probes) == 0.0);
    REQUIRE(functional_distance(c.arch, c.records[0].w, c.records[1].w, c.probes) > 0.0);
}

TEST_CASE("loss report satisfies the combination invariant") {
    auto c = make_corpus(8, 5, 41);
    auto cfg = tiny_cfg();
    auto m = make_model(c, cfg);
    VaeLossReport rep = vae_loss(m, c.ptrs(), c.probes);
    REQUIRE(rep.recon >= 0.0);
    REQUIRE(rep.kl >= 0.0);
    REQUIRE(rep.func >= 0.0);
    REQUIRE(rep.total == rep.recon + cfg.beta * rep.kl + cfg.lambda * rep.func);
    REQUIRE(rep.recon > 0.0);  // untrained model cannot reconstruct perfectly
    REQUIRE(rep.func > 0.0);

    SECTION("disabling the function term zeroes it exactly") {
        auto cfg0 = cfg;
        cfg0.lambda = 0.0;
        auto m0 = make_model(c, cfg0);
        VaeLossReport r0 = vae_loss(m0, c.ptrs(), c.probes);
        REQUIRE(r0.func == 0.0);
        REQUIRE(r0.total == r0.recon + cfg0.beta * r0.kl);
    }
}

TEST_CASE("function-space term gradients match a directional finite difference") {
    auto c = make_corpus(6, 4, 51);
    auto cfg = tiny_cfg();
    cfg.batch = 2;
    auto m = make_model(c, cfg);
    const auto shapes = graph_shapes(c.arch);
    const int B = 2, P = 4, T = m.tokens();
    VaePlan plan = make_vae_plan(m, B, P, {2}, true);

    Rng rng(777);
    std::unordered_map<std::string, Tensor> binds;
    for (const auto& [k, v] : m.params) binds.emplace(k, v);
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        Tensor f({B, shapes[l].nodes, shapes[l].feature_len()});
        for (int b = 0; b < B; ++b) {
            WeightGraph gn = apply_normalizer(c.normalizer, encode_graph(c.arch, c.records[static_cast<std::size_t>(b)].w));
            std::copy(gn.layers[l].data(), gn.layers[l].data() + gn.layers[l].size(),
                      f.data() + static_cast<std::int64_t>(b) * gn.layers[l].size());
        }
        binds.emplace(plan.feat_names[l], std::move(f));
    }
    binds.emplace(plan.eps_name, Tensor::randn({B, T, cfg.d_z}, rng));
    Tensor probes = Tensor::rand_uniform({P, 2}, rng, 0.5f, 2.5f);
    Tensor tgt({B, P, 2});
    for (int b = 0; b < B; ++b) {
        Tensor t = probe_forward(c.arch, c.records[static_cast<std::size_t>(b)].w, probes);
        std::copy(t.data(), t.data() + t.size(), tgt.data() + static_cast<std::int64_t>(b) * t.size());
    }
    binds.emplace(plan.probe_name, probes);
    binds.emplace(plan.target_name, tgt);

    Evaluation ev = forward_eval(plan.g, binds);
    Gradients gr = grad(plan.g, ev, plan.func);

    // directional derivative along a random direction through two decoder params
    std::vector<std::string> names{"dec.out0.w", "dec.blk0.ff2.w"};
    std::unordered_map<std::string, Tensor> dir;
    double analytic = 0.0;
    for (const auto& nm : names) {
        Tensor d = Tensor::randn(m.params.at(nm).shape(), rng);
        const Tensor& gw = gr.wrt(nm);
        for (std::int64_t i = 0; i < d.size(); ++i) analytic += static_cast<double>(gw[i]) * d[i];
        dir.emplace(nm, std::move(d));
    }
    const double h = 5e-3;
    auto eval_at = [&](double t) {
        auto b2 = binds;
        for (const auto& nm : names) {
            Tensor p = m.params.at(nm);
            const Tensor& d = dir.at(nm);
            for (std::int64_t i = 0; i < p.size(); ++i) p[i] += static_cast<float>(t) * d[i];
            b2[nm] = std::move(p);
        }
        return static_cast<double>(forward_eval(plan.g, b2).value(plan.func)[0]);
    };
    double fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    REQUIRE_THAT(analytic, Catch::Matchers::WithinAbs(fd, std::max(2e-2 * std::abs(fd), 2e-3)));
}

TEST_CASE("conv arch plan runs at batch one and rejects batched function loss") {
    ArchSpec arch = field_cnn_arch(4);
    VaeConfig cfg = tiny_cfg();
    VaeModel m;
    m.arch = arch;
    m.cfg = cfg;
    m.params = init_vae_params(arch, cfg, 7);
    // identity normalizer so the test needs no corpus
    m.normalizer.arch_id = arch.arch_id();
    for (const auto& s : graph_shapes(arch)) {
        m.normalizer.mean.push_back(Tensor::zeros({s.nodes, s.feature_len()}));
        m.normalizer.std.push_back(Tensor::full({s.nodes, s.feature_len()}, 1.0f));
    }
    REQUIRE_THROWS_AS(make_vae_plan(m, 2, 2, {2, 8, 8}, true), ConfigError);

    VaePlan plan = make_vae_plan(m, 1, 2, {2, 8, 8}, true);
    Rng rng(3);
    FlatWeights w = build_expert(arch, InitScheme::FanIn, 15);
    WeightGraph gn = apply_normalizer(m.normalizer, encode_graph(arch, w));
    std::unordered_map<std::string, Tensor> binds;
    for (const auto& [k, v] : m.params) binds.emplace(k, v);
    const auto shapes = graph_shapes(arch);
    for (std::size_t l = 0; l < shapes.size(); ++l)
        binds.emplace(plan.feat_names[l],
                      gn.layers[l].reshaped({1, shapes[l].nodes, shapes[l].feature_len()}));
    binds.emplace(plan.eps_name, Tensor::zeros({1, m.tokens(), cfg.d_z}));
    Tensor probes = Tensor::rand_uniform({2, 2, 8, 8}, rng, -0.5f, 0.5f);
    binds.emplace(plan.target_name, probe_forward(arch, w, probes));
    binds.emplace(plan.probe_name, probes);
    Evaluation ev = forward_eval(plan.g, binds);
    REQUIRE(ev.value(plan.func)[0] >= 0.0f);
    REQUIRE(ev.value(plan.recon)[0] > 0.0f);
    REQUIRE(std::isfinite(ev.value(plan.total)[0]));
}

TEST_CASE("short training run lowers the loss and fills the curves") {
    auto c = make_corpus(6, 8, 61);
    Zoo zoo;
    zoo.arch = c.arch;
    zoo.records = c.records;
    zoo.normalizer = c.normalizer;
    VaeConfig cfg = tiny_cfg();
    cfg.epochs = 12;
    cfg.lr = 3e-3;
    VaeTrainResult res = train_vae(zoo, c.probes, cfg);
    REQUIRE(res.total_curve.size() == 12);
    REQUIRE(res.recon_curve.size() == 12);
    REQUIRE(res.kl_curve.size() == 12);
    REQUIRE(res.func_curve.size() == 12);
    for (double v : res.total_curve) REQUIRE(std::isfinite(v));
    REQUIRE(res.total_curve.back() < res.total_curve.front());
    // reconstruction through the posterior mean stays structurally valid
    FlatWeights rec = reconstruct_weights(res.model, c.records[0].w);
    REQUIRE(rec.size() == c.records[0].w.size());
    REQUIRE(rec.all_finite());
}

TEST_CASE("training is deterministic for a fixed seed") {
    auto c = make_corpus(6, 6, 71);
    Zoo zoo;
    zoo.arch = c.arch;
    zoo.records = c.records;
    zoo.normalizer = c.normalizer;
    VaeConfig cfg = tiny_cfg();
    cfg.epochs = 3;
    VaeTrainResult a = train_vae(zoo, c.probes, cfg);
    VaeTrainResult b = train_vae(zoo, c.probes, cfg);
    REQUIRE(a.total_curve == b.total_curve);
    for (const auto& [k, v] : a.model.params) {
        const Tensor& w = b.model.params.at(k);
        for (std::int64_t i = 0; i < v.size(); ++i) REQUIRE(v[i] == w[i]);
    }
}

TEST_CASE("checkpoint round trip preserves the model bit for bit") {
    auto c = make_corpus(6, 6, 81);
    Zoo zoo;
    zoo.arch = c.arch;
    zoo.records = c.records;
    zoo.normalizer = c.normalizer;
    VaeConfig cfg = tiny_cfg();
    cfg.epochs = 2;
    VaeTrainResult res = train_vae(zoo, c.probes, cfg);
    res.model.provenance = 0x1122334455667788ull;

    auto dir = std::filesystem::temp_directory_path() / "envgen_vae_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "vae.bin").string();
    save_vae(res.model, path);
    VaeModel loaded = load_vae(path);

    REQUIRE(loaded.arch.arch_id() == res.model.arch.arch_id());
    REQUIRE(loaded.cfg.d_z == cfg.d_z);
    REQUIRE(loaded.cfg.width == cfg.width);
    REQUIRE(loaded.cfg.beta == cfg.beta);
    REQUIRE(loaded.cfg.lambda == cfg.lambda);
    REQUIRE(loaded.provenance == res.model.provenance);
    REQUIRE(loaded.params.size() == res.model.params.size());
    for (const auto& [k, v] : res.model.params) {
        const Tensor& w = loaded.params.at(k);
        REQUIRE(v.shape() == w.shape());
        for (std::int64_t i = 0; i < v.size(); ++i) REQUIRE(v[i] == w[i]);
    }
    FlatWeights ra = reconstruct_weights(res.model, c.records[2].w);
    FlatWeights rb = reconstruct_weights(loaded, c.records[2].w);
    for (std::int64_t i = 0; i < ra.size(); ++i) REQUIRE(ra[i] == rb[i]);

    SECTION("corrupted header fails to load") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(64);
        char junk = 0x5A;
        f.write(&junk, 1);
        f.close();
        REQUIRE_THROWS_AS(load_vae(path), IoError);
    }
    SECTION("corrupted parameter payload fails the integrity check") {
        auto bytes = std::filesystem::file_size(path);
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(bytes) - 100);
        char junk = 0x5A;
        f.write(&junk, 1);
        f.close();
        REQUIRE_THROWS_AS(load_vae(path), IoError);
    }
    std::filesystem::remove_all(dir);
}
