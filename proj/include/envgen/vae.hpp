#pragma once

// Weight-graph VAE: encodes an expert's weight graph (one token per output
// neuron/channel) into per-node latents with a node-attention transformer,
// and decodes back to node features. The loss combines coordinate-space
// reconstruction, a closed-form Gaussian KL, and a function-space term that
// compares the decoded expert's outputs with the original expert's outputs
// on probe states.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/expert.hpp"
#include "envgen/graph.hpp"
#include "envgen/io.hpp"
#include "envgen/optim.hpp"
#include "envgen/rng.hpp"
#include "envgen/tensor.hpp"
#include "envgen/weight_graph.hpp"
#include "envgen/zoo.hpp"

namespace envgen {

constexpr float kLogvarLo = -20.0f;
constexpr float kLogvarHi = 4.0f;

struct VaeConfig {
    int d_z = 16;
    int width = 64;
    int heads = 4;
    int depth = 4;
    double beta = 1e-4;    // KL weight
    double lambda = 1.0;   // function-space weight; 0 disables the term (ablation)
    int probe_batch = 32;  // probe states drawn per training step
    int epochs = 20;
    double lr = 1e-3;
    int batch = 8;         // weight graphs per step (forced to 1 for conv archs)
    std::uint64_t seed = 0;

    void validate() const {
        if (d_z <= 0 || width <= 0 || heads <= 0 || depth <= 0)
            throw ConfigError("vae: d_z/width/heads/depth must be positive");
        if (width % heads != 0) throw ConfigError("vae: width must be divisible by heads");
        if (beta < 0.0 || lambda < 0.0) throw ConfigError("vae: beta and lambda must be non-negative");
        if (probe_batch <= 0 || epochs < 0 || batch <= 0) throw ConfigError("vae: bad training sizes");
    }
};

struct VaeModel {
    ArchSpec arch;
    VaeConfig cfg;
    WeightNormalizer normalizer;  // the VAE operates on normalized node features
    ParamMap params;
    std::uint64_t provenance = 0;  // hash of the producing pipeline config

    int tokens() const {
        int t = 0;
        for (const auto& s : graph_shapes(arch)) t += s.nodes;
        return t;
    }
};

// ---- parameters -------------------------------------------------------------

namespace vae_detail {

inline void add_linear(ParamMap& p, Rng& rng, const std::string& base, int out, int in) {
    float bound = 1.0f / std::sqrt(static_cast<float>(in));
    p.emplace(base + ".w", Tensor::rand_uniform({out, in}, rng, -bound, bound));
    p.emplace(base + ".b", Tensor::zeros({out}));
}

inline void add_block(ParamMap& p, Rng& rng, const std::string& base, int width, int heads) {
    int dh = width / heads;
    for (int h = 0; h < heads; ++h) {
        std::string hs = std::to_string(h);
        add_linear(p, rng, base + ".q" + hs, dh, width);
        add_linear(p, rng, base + ".k" + hs, dh, width);
        add_linear(p, rng, base + ".v" + hs, dh, width);
    }
    add_linear(p, rng, base + ".proj", width, width);
    add_linear(p, rng, base + ".ff1", 4 * width, width);
    add_linear(p, rng, base + ".ff2", width, 4 * width);
}

}  // namespace vae_detail

inline ParamMap init_vae_params(const ArchSpec& arch, const VaeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "vae_init"));
    ParamMap p;
    auto shapes = graph_shapes(arch);
    for (std::size_t l = 0; l < shapes.size(); ++l)
        vae_detail::add_linear(p, rng, "enc.in" + std::to_string(l), cfg.width, shapes[l].feature_len());
    for (int b = 0; b < cfg.depth; ++b)
        vae_detail::add_block(p, rng, "enc.blk" + std::to_string(b), cfg.width, cfg.heads);
    vae_detail::add_linear(p, rng, "enc.mu", cfg.d_z, cfg.width);
    vae_detail::add_linear(p, rng, "enc.logvar", cfg.d_z, cfg.width);
    for (std::size_t l = 0; l < shapes.size(); ++l)
        vae_detail::add_linear(p, rng, "dec.in" + std::to_string(l), cfg.width, cfg.d_z);
    for (int b = 0; b < cfg.depth; ++b)
        vae_detail::add_block(p, rng, "dec.blk" + std::to_string(b), cfg.width, cfg.heads);
    for (std::size_t l = 0; l < shapes.size(); ++l)
        vae_detail::add_linear(p, rng, "dec.out" + std::to_string(l), shapes[l].feature_len(), cfg.width);
    return p;
}

// ---- graph construction -----------------------------------------------------

namespace vae_detail {

inline int linear(Graph& g, const std::map<std::string, int>& pn, const std::string& base, int x) {
    return g.add(g.matmul(x, pn.at(base + ".w"), false, true), pn.at(base + ".b"));
}

// pre-LN transformer block: multi-head self-attention + gelu FFN, both residual
inline int block(Graph& g, const std::map<std::string, int>& pn, const std::string& base, int x, int heads,
                 int width) {
    int dh = width / heads;
    int a_in = g.layer_norm(x);
    std::vector<int> head_outs;
    float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int h = 0; h < heads; ++h) {
        std::string hs = std::to_string(h);
        int q = linear(g, pn, base + ".q" + hs, a_in);
        int k = linear(g, pn, base + ".k" + hs, a_in);
        int v = linear(g, pn, base + ".v" + hs, a_in);
        int att = g.softmax(g.scale(g.matmul(q, k, false, true), inv_sqrt));
        head_outs.push_back(g.matmul(att, v));
    }
    int o = head_outs.size() == 1 ? head_outs[0] : g.concat(head_outs, -1);
    x = g.add(x, linear(g, pn, base + ".proj", o));
    int f = g.layer_norm(x);
    f = g.gelu(linear(g, pn, base + ".ff1", f));
    f = linear(g, pn, base + ".ff2", f);
    return g.add(x, f);
}

// 0/1 row-selector pulling one layer's token rows out of the [*, T, *] sequence
inline Tensor layer_selector(const std::vector<LayerShape>& shapes, int layer) {
    int total = 0;
    for (const auto& s : shapes) total += s.nodes;
    int off = 0;
    for (int l = 0; l < layer; ++l) off += shapes[static_cast<std::size_t>(l)].nodes;
    int n = shapes[static_cast<std::size_t>(layer)].nodes;
    Tensor sel({n, total});
    for (int i = 0; i < n; ++i) sel[static_cast<std::int64_t>(i) * total + off + i] = 1.0f;
    return sel;
}

struct EncoderHeads {
    int mu = -1;
    int logvar = -1;
};

inline EncoderHeads build_encoder(Graph& g, const VaeConfig& cfg, const std::vector<LayerShape>& shapes,
                                  const std::map<std::string, int>& pn, const std::vector<int>& feats) {
    std::vector<int> toks;
    for (std::size_t l = 0; l < shapes.size(); ++l)
        toks.push_back(linear(g, pn, "enc.in" + std::to_string(l), feats[l]));
    int x = toks.size() == 1 ? toks[0] : g.concat(toks, 1);
    for (int b = 0; b < cfg.depth; ++b) x = block(g, pn, "enc.blk" + std::to_string(b), x, cfg.heads, cfg.width);
    x = g.layer_norm(x);
    EncoderHeads h;
    h.mu = linear(g, pn, "enc.mu", x);
    h.logvar = g.clamp(linear(g, pn, "enc.logvar", x), kLogvarLo, kLogvarHi);
    return h;
}

// returns per-layer normalized reconstructions [B, n_l, F_l]
inline std::vector<int> build_decoder(Graph& g, const VaeConfig& cfg, const std::vector<LayerShape>& shapes,
                                      const std::map<std::string, int>& pn, const std::vector<int>& selectors,
                                      int z) {
    std::vector<int> toks;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        int zl = g.matmul(selectors[l], z);
        toks.push_back(linear(g, pn, "dec.in" + std::to_string(l), zl));
    }
    int x = toks.size() == 1 ? toks[0] : g.concat(toks, 1);
    for (int b = 0; b < cfg.depth; ++b) x = block(g, pn, "dec.blk" + std::to_string(b), x, cfg.heads, cfg.width);
    x = g.layer_norm(x);
    std::vector<int> outs;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        int xl = g.matmul(selectors[l], x);
        outs.push_back(linear(g, pn, "dec.out" + std::to_string(l), xl));
    }
    return outs;
}

inline bool plain_mlp(const ArchSpec& arch) {
    if (!arch.skips.empty()) return false;
    for (const auto& l : arch.layers)
        if (l.kind != LayerKind::Linear) return false;
    return true;
}

inline int apply_activation(Graph& g, Activation act, int x) {
    switch (act) {
        case Activation::Tanh: return g.tanh(x);
        case Activation::Gelu: return g.gelu(x);
        case Activation::None: return x;
    }
    return x;
}

}  // namespace vae_detail

// Training/evaluation graph: features -> posterior -> reparameterized latent ->
// reconstruction, with loss heads. Bind the parameter tensors plus per-step
// feature / eps / probe inputs and evaluate.
struct VaePlan {
    Graph g;
    int B = 1;
    std::vector<std::string> feat_names;  // per layer, shape [B, n_l, F_l]
    std::string eps_name = "eps";         // [B, T, d_z]; zeros give the posterior mean
    std::string probe_name = "probes";
    std::string target_name = "probe_targets";
    bool has_func = false;
    int mu = -1, logvar = -1, z = -1;
    std::vector<int> outs;  // per-layer normalized reconstructions
    int recon = -1, kl = -1, func = -1, total = -1;
};

// frame_shape: probe-state shape of the expert's input (e.g. {2} or {2,H,W});
// only used when the function term is active.
inline VaePlan make_vae_plan(const VaeModel& m, int B, int n_probes, const Shape& frame_shape, bool with_func) {
    m.cfg.validate();
    const auto shapes = graph_shapes(m.arch);
    const bool mlp = vae_detail::plain_mlp(m.arch);
    if (B > 1 && with_func && !mlp)
        throw ConfigError("vae: function loss for conv archs requires batch 1");

    VaePlan p;
    p.B = B;
    p.has_func = with_func;
    int T = 0;
    for (const auto& s : shapes) T += s.nodes;

    std::map<std::string, int> pn;
    for (const auto& [k, v] : m.params) pn[k] = p.g.input(k, v.shape(), true);

    std::vector<int> feats;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        std::string nm = "feat" + std::to_string(l);
        p.feat_names.push_back(nm);
        feats.push_back(p.g.input(nm, {B, shapes[l].nodes, shapes[l].feature_len()}, false));
    }

    auto heads = vae_detail::build_encoder(p.g, m.cfg, shapes, pn, feats);
    p.mu = heads.mu;
    p.logvar = heads.logvar;
    int eps = p.g.input(p.eps_name, {B, T, m.cfg.d_z}, false);
    p.z = p.g.add(p.mu, p.g.mul(p.g.exp(p.g.scale(p.logvar, 0.5f)), eps));

    std::vector<int> selectors;
    for (std::size_t l = 0; l < shapes.size(); ++l)
        selectors.push_back(p.g.constant(vae_detail::layer_selector(shapes, static_cast<int>(l))));
    p.outs = vae_detail::build_decoder(p.g, m.cfg, shapes, pn, selectors, p.z);

    // coordinate reconstruction: mean squared error over every node feature
    std::int64_t total_feats = 0;
    int acc = -1;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        int d = p.g.sum_all(p.g.square(p.g.sub(p.outs[l], feats[l])));
        acc = acc < 0 ? d : p.g.add(acc, d);
        total_feats += static_cast<std::int64_t>(shapes[l].nodes) * shapes[l].feature_len();
    }
    p.recon = p.g.scale(acc, 1.0f / static_cast<float>(B * total_feats));

    // KL(q || N(0, I)) in closed form: 0.5 * (mu^2 + e^l - 1 - l),
    // summed over latent dims, averaged over nodes and batch
    int kl_elem = p.g.add_scalar(p.g.sub(p.g.add(p.g.square(p.mu), p.g.exp(p.logvar)), p.logvar), -1.0f);
    p.kl = p.g.scale(p.g.sum_all(kl_elem), 0.5f / static_cast<float>(B * T));

    if (with_func) {
        // denormalize the decoded features so the decoded expert acts in weight space
        std::vector<int> denorm;
        for (std::size_t l = 0; l < shapes.size(); ++l) {
            int s = p.g.constant(m.normalizer.std[l]);
            int mu_c = p.g.constant(m.normalizer.mean[l]);
            denorm.push_back(p.g.add(p.g.mul(p.outs[l], s), mu_c));
        }
        int pred;
        if (mlp) {
            // batched expert forward: per-graph weight matrices via feature-column selectors
            int x = p.g.input(p.probe_name, batched(frame_shape, n_probes), false);
            for (std::size_t l = 0; l < m.arch.layers.size(); ++l) {
                const LayerSpec& ls = m.arch.layers[l];
                int F = shapes[l].feature_len();
                Tensor sel_w({F, ls.in});
                for (int i = 0; i < ls.in; ++i) sel_w[static_cast<std::int64_t>(i) * ls.in + i] = 1.0f;
                Tensor sel_b({F, 1});
                sel_b[shapes[l].main_len - 1] = 1.0f;
                int W = p.g.matmul(denorm[l], p.g.constant(std::move(sel_w)));       // [B, out, in]
                int bias = p.g.matmul(denorm[l], p.g.constant(std::move(sel_b)));    // [B, out, 1]
                bias = p.g.reshape(bias, {B, 1, ls.out});
                x = p.g.add(p.g.matmul(x, W, false, true), bias);                    // [B, P, out]
                x = vae_detail::apply_activation(p.g, ls.act, x);
            }
            pred = x;
            int tgt = p.g.input(p.target_name, {B, n_probes, m.arch.layers.back().out}, false);
            p.func = p.g.scale(p.g.sum_all(p.g.square(p.g.sub(pred, tgt))),
                               1.0f / static_cast<float>(B * n_probes));
        } else {
            // single-graph path: assemble canonical segment tensors and reuse the net builder
            Layout lay = make_layout(m.arch);
            std::map<std::string, int> wnodes;
            std::vector<int> skip_off(m.arch.layers.size(), 0);
            for (const auto& seg : lay.segments) {
                const LayerShape& s = shapes[static_cast<std::size_t>(seg.layer)];
                int F = s.feature_len();
                std::int64_t per_node = seg.count() / s.nodes;
                int col0 = 0;
                if (seg.role == SegmentRole::Bias) col0 = s.main_len - 1;
                if (seg.role == SegmentRole::Skip) {
                    col0 = s.main_len + skip_off[static_cast<std::size_t>(seg.layer)];
                    skip_off[static_cast<std::size_t>(seg.layer)] += static_cast<int>(per_node);
                }
                Tensor sel({F, static_cast<int>(per_node)});
                for (std::int64_t i = 0; i < per_node; ++i)
                    sel[(col0 + i) * per_node + i] = 1.0f;
                int v = p.g.matmul(denorm[static_cast<std::size_t>(seg.layer)], p.g.constant(std::move(sel)));
                wnodes[seg.name] = p.g.reshape(v, seg.shape);
            }
            int x = p.g.input(p.probe_name, batched(frame_shape, n_probes), false);
            pred = build_net(p.g, m.arch, wnodes, x);
            int tgt = p.g.input(p.target_name, p.g.shape_of(pred), false);
            p.func = p.g.scale(p.g.sum_all(p.g.square(p.g.sub(pred, tgt))),
                               1.0f / static_cast<float>(n_probes));
        }
    }

    int total = p.recon;
    if (m.cfg.beta > 0.0) total = p.g.add(total, p.g.scale(p.kl, static_cast<float>(m.cfg.beta)));
    if (with_func && m.cfg.lambda > 0.0)
        total = p.g.add(total, p.g.scale(p.func, static_cast<float>(m.cfg.lambda)));
    p.total = total;
    return p;
}

// ---- plain-tensor helpers (used by training, reports, and tests) -------------

// z = mu + exp(0.5 * logvar) * eps, eps ~ N(0, I)
inline Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng) {
    if (mu.shape() != logvar.shape()) throw ShapeError("reparameterize: mu/logvar shape mismatch");
    Tensor z(mu.shape());
    for (std::int64_t i = 0; i < z.size(); ++i)
        z[i] = mu[i] + std::exp(0.5f * logvar[i]) * static_cast<float>(rng.normal());
    return z;
}

// closed-form KL to the standard normal: sum over the last axis (latent dims),
// mean over everything else; >= 0 with equality iff mu = 0 and logvar = 0
inline double kl_closed_form(const Tensor& mu, const Tensor& logvar) {
    if (mu.shape() != logvar.shape()) throw ShapeError("kl: mu/logvar shape mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < mu.size(); ++i) {
        double m = mu[i], l = logvar[i];
        acc += 0.5 * (m * m + std::exp(l) - 1.0 - l);
    }
    std::int64_t rows = mu.size() / mu.dim(-1);
    return acc / static_cast<double>(std::max<std::int64_t>(1, rows));
}

// mean squared difference over every node feature of two same-shape graphs
inline double recon_mse(const WeightGraph& a, const WeightGraph& b) {
    if (a.layers.size() != b.layers.size()) throw ShapeError("recon_mse: layer count mismatch");
    double acc = 0.0;
    std::int64_t n = 0;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        if (a.layers[l].shape() != b.layers[l].shape()) throw ShapeError("recon_mse: layer shape mismatch");
        for (std::int64_t i = 0; i < a.layers[l].size(); ++i) {
            double d = static_cast<double>(a.layers[l][i]) - b.layers[l][i];
            acc += d * d;
            ++n;
        }
    }
    return acc / static_cast<double>(std::max<std::int64_t>(1, n));
}

// expert core forward on a batch of probe states (derivative head for
// neural-ODE experts, next-frame map for field experts)
inline Tensor probe_forward(const ArchSpec& arch, const FlatWeights& w, const Tensor& probes) {
    Graph g;
    std::map<std::string, int> wnodes;
    for (const auto& seg : make_layout(arch).segments) wnodes[seg.name] = g.input(seg.name, seg.shape, false);
    int x = g.input("probes", probes.shape(), false);
    int y = build_net(g, arch, wnodes, x);
    std::unordered_map<std::string, Tensor> binds;
    for (auto& [k, v] : params_from_flat(arch, w)) binds.emplace(k, std::move(v));
    binds.emplace("probes", probes);
    return forward_eval(g, binds).value(y);
}

// mean over probes of the squared output-coordinate distance between two experts
inline double functional_distance(const ArchSpec& arch, const FlatWeights& wa, const FlatWeights& wb,
                                  const Tensor& probes) {
    Tensor ya = probe_forward(arch, wa, probes);
    Tensor yb = probe_forward(arch, wb, probes);
    double acc = 0.0;
    for (std::int64_t i = 0; i < ya.size(); ++i) {
        double d = static_cast<double>(ya[i]) - yb[i];
        acc += d * d;
    }
    return acc / static_cast<double>(probes.dim(0));
}

// ---- encode / decode ----------------------------------------------------------

struct Posterior {
    Tensor mu;      // [T, d_z]
    Tensor logvar;  // [T, d_z]
};

namespace vae_detail {

inline std::unordered_map<std::string, Tensor> param_binds(const VaeModel& m) {
    std::unordered_map<std::string, Tensor> binds;
    for (const auto& [k, v] : m.params) binds.emplace(k, v);
    return binds;
}

}  // namespace vae_detail

// graph must already be normalized (apply_normalizer) and match the model's arch
inline Posterior vae_encode(const VaeModel& m, const WeightGraph& gr) {
    if (gr.arch_id != m.arch.arch_id())
        throw ShapeError("vae_encode: graph arch id " + hex64(gr.arch_id) + " does not match model arch " +
                         hex64(m.arch.arch_id()));
    const auto shapes = graph_shapes(m.arch);
    Graph g;
    std::map<std::string, int> pn;
    for (const auto& [k, v] : m.params) pn[k] = g.input(k, v.shape(), false);
    std::vector<int> feats;
    for (std::size_t l = 0; l < shapes.size(); ++l)
        feats.push_back(g.input("feat" + std::to_string(l),
                                {1, shapes[l].nodes, shapes[l].feature_len()}, false));
    auto heads = vae_detail::build_encoder(g, m.cfg, shapes, pn, feats);
    auto binds = vae_detail::param_binds(m);
    for (std::size_t l = 0; l < shapes.size(); ++l)
        binds.emplace("feat" + std::to_string(l),
                      gr.layers[l].reshaped({1, shapes[l].nodes, shapes[l].feature_len()}));
    Evaluation ev = forward_eval(g, binds);
    int T = m.tokens();
    Posterior post;
    post.mu = ev.value(heads.mu).reshaped({T, m.cfg.d_z});
    post.logvar = ev.value(heads.logvar).reshaped({T, m.cfg.d_z});
    return post;
}

// z: [T, d_z] -> normalized weight graph (apply invert_normalizer for real weights)
inline WeightGraph vae_decode(const VaeModel& m, const Tensor& z) {
    const auto shapes = graph_shapes(m.arch);
    int T = m.tokens();
    if (z.rank() != 2 || z.dim(0) != T || z.dim(1) != m.cfg.d_z)
        throw ShapeError("vae_decode: latent shape " + shape_str(z.shape()) + " != [" + std::to_string(T) + ", " +
                         std::to_string(m.cfg.d_z) + "]");
    Graph g;
    std::map<std::string, int> pn;
    for (const auto& [k, v] : m.params) pn[k] = g.input(k, v.shape(), false);
    int zin = g.input("z", {1, T, m.cfg.d_z}, false);
    std::vector<int> selectors;
    for (std::size_t l = 0; l < shapes.size(); ++l)
        selectors.push_back(g.constant(vae_detail::layer_selector(shapes, static_cast<int>(l))));
    auto outs = vae_detail::build_decoder(g, m.cfg, shapes, pn, selectors, zin);
    auto binds = vae_detail::param_binds(m);
    binds.emplace("z", z.reshaped({1, T, m.cfg.d_z}));
    Evaluation ev = forward_eval(g, binds);
    WeightGraph out;
    out.arch_id = m.arch.arch_id();
    for (std::size_t l = 0; l < shapes.size(); ++l)
        out.layers.push_back(ev.value(outs[l]).reshaped({shapes[l].nodes, shapes[l].feature_len()}));
    return out;
}

// full round trip through the posterior mean: weights -> latent -> weights
inline FlatWeights reconstruct_weights(const VaeModel& m, const FlatWeights& w) {
    WeightGraph gn = apply_normalizer(m.normalizer, encode_graph(m.arch, w));
    Posterior post = vae_encode(m, gn);
    WeightGraph dec = vae_decode(m, post.mu);
    return decode_graph(m.arch, invert_normalizer(m.normalizer, dec));
}

// ---- training -----------------------------------------------------------------

struct VaeLossReport {
    double recon = 0.0;
    double kl = 0.0;
    double func = 0.0;
    double total = 0.0;  // recon + beta * kl + lambda * func
};

struct VaeTrainResult {
    VaeModel model;
    std::vector<double> total_curve, recon_curve, kl_curve, func_curve;  // per epoch
};

namespace vae_detail {

// gather probe rows `idx` from the pool into one batch tensor
inline Tensor gather_probes(const Tensor& pool, const std::vector<int>& idx) {
    Shape s = pool.shape();
    s[0] = static_cast<int>(idx.size());
    Tensor out(s);
    std::int64_t row = pool.size() / pool.dim(0);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(pool.data() + idx[i] * row, pool.data() + (idx[i] + 1) * row,
                  out.data() + static_cast<std::int64_t>(i) * row);
    return out;
}

}  // namespace vae_detail

// Evaluate the loss decomposition over records (posterior-mean pass, eps = 0).
inline VaeLossReport vae_loss(const VaeModel& m, const std::vector<const ExpertRecord*>& records,
                              const Tensor& probe_pool) {
    if (records.empty()) throw ConfigError("vae_loss: no records");
    const auto shapes = graph_shapes(m.arch);
    Shape frame(probe_pool.shape().begin() + 1, probe_pool.shape().end());
    int P = std::min<int>(m.cfg.probe_batch, probe_pool.dim(0));
    bool with_func = m.cfg.lambda > 0.0;
    VaePlan plan = make_vae_plan(m, 1, P, frame, with_func);
    std::vector<int> idx(static_cast<std::size_t>(P));
    for (int i = 0; i < P; ++i) idx[static_cast<std::size_t>(i)] = i;
    Tensor probes = vae_detail::gather_probes(probe_pool, idx);
    int T = m.tokens();

    VaeLossReport rep;
    for (const ExpertRecord* r : records) {
        WeightGraph gn = apply_normalizer(m.normalizer, encode_graph(m.arch, r->w));
        auto binds = vae_detail::param_binds(m);
        for (std::size_t l = 0; l < shapes.size(); ++l)
            binds.emplace(plan.feat_names[l],
                          gn.layers[l].reshaped({1, shapes[l].nodes, shapes[l].feature_len()}));
        binds.emplace(plan.eps_name, Tensor::zeros({1, T, m.cfg.d_z}));
        if (with_func) {
            binds.emplace(plan.probe_name, probes);
            Tensor tgt = probe_forward(m.arch, r->w, probes);
            if (vae_detail::plain_mlp(m.arch)) tgt = tgt.reshaped({1, P, m.arch.layers.back().out});
            binds.emplace(plan.target_name, std::move(tgt));
        }
        Evaluation ev = forward_eval(plan.g, binds);
        rep.recon += ev.value(plan.recon)[0];
        rep.kl += ev.value(plan.kl)[0];
        if (with_func) rep.func += ev.value(plan.func)[0];
    }
    double n = static_cast<double>(records.size());
    rep.recon /= n;
    rep.kl /= n;
    rep.func /= n;
    rep.total = rep.recon + m.cfg.beta * rep.kl + m.cfg.lambda * rep.func;
    return rep;
}

inline VaeTrainResult train_vae(const Zoo& zoo, const Tensor& probe_pool, VaeConfig cfg) {
    cfg.validate();
    std::vector<const ExpertRecord*> records;
    for (const auto& r : zoo.records)
        if (!r.flagged) records.push_back(&r);
    if (records.empty())
        for (const auto& r : zoo.records) records.push_back(&r);
    if (records.empty()) throw ConfigError("train_vae: zoo has no records");
    if (records.size() < 16)
        std::cerr << "[vae] warning: training on only " << records.size() << " weight records\n";

    const bool mlp = vae_detail::plain_mlp(zoo.arch);
    if (!mlp) cfg.batch = 1;
    cfg.batch = std::min<int>(cfg.batch, static_cast<int>(records.size()));

    VaeTrainResult res;
    res.model.arch = zoo.arch;
    res.model.cfg = cfg;
    res.model.normalizer = zoo.normalizer;
    res.model.params = init_vae_params(zoo.arch, cfg, cfg.seed);

    const auto shapes = graph_shapes(zoo.arch);
    const int T = res.model.tokens();
    const bool with_func = cfg.lambda > 0.0;
    Shape frame(probe_pool.shape().begin() + 1, probe_pool.shape().end());
    const int P = std::min<int>(cfg.probe_batch, probe_pool.dim(0));
    const int B = cfg.batch;
    VaePlan plan = make_vae_plan(res.model, B, P, frame, with_func);

    // normalized node features per record, packed once
    std::vector<WeightGraph> feats;
    feats.reserve(records.size());
    for (const ExpertRecord* r : records)
        feats.push_back(apply_normalizer(zoo.normalizer, encode_graph(zoo.arch, r->w)));

    Adam opt({static_cast<float>(cfg.lr)});
    Rng shuffle_rng(derive_seed(cfg.seed, "vae_shuffle"));
    Rng eps_rng(derive_seed(cfg.seed, "vae_eps"));
    Rng probe_rng(derive_seed(cfg.seed, "vae_probes"));
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<Tensor> feat_batch;
    for (const auto& s : shapes) feat_batch.emplace_back(Shape{B, s.nodes, s.feature_len()});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            std::size_t j = i + static_cast<std::size_t>(shuffle_rng.below(order.size() - i));
            std::swap(order[i], order[j]);
        }
        double sum_total = 0.0, sum_recon = 0.0, sum_kl = 0.0, sum_func = 0.0;
        int steps = 0;
        for (std::size_t start = 0; start + static_cast<std::size_t>(B) <= records.size();
             start += static_cast<std::size_t>(B)) {
            for (int b = 0; b < B; ++b) {
                const WeightGraph& gn = feats[order[start + static_cast<std::size_t>(b)]];
                for (std::size_t l = 0; l < shapes.size(); ++l) {
                    std::int64_t n = gn.layers[l].size();
                    std::copy(gn.layers[l].data(), gn.layers[l].data() + n,
                              feat_batch[l].data() + static_cast<std::int64_t>(b) * n);
                }
            }
            std::unordered_map<std::string, Tensor> binds;
            for (const auto& [k, v] : res.model.params) binds.emplace(k, v);
            for (std::size_t l = 0; l < shapes.size(); ++l) binds.emplace(plan.feat_names[l], feat_batch[l]);
            binds.emplace(plan.eps_name, Tensor::randn({B, T, cfg.d_z}, eps_rng));
            if (with_func) {
                std::vector<int> idx(static_cast<std::size_t>(P));
                for (auto& v : idx) v = static_cast<int>(probe_rng.below(static_cast<std::uint64_t>(probe_pool.dim(0))));
                Tensor probes = vae_detail::gather_probes(probe_pool, idx);
                if (mlp) {
                    int out_dim = zoo.arch.layers.back().out;
                    Tensor tgt({B, P, out_dim});
                    for (int b = 0; b < B; ++b) {
                        Tensor t = probe_forward(zoo.arch, records[order[start + static_cast<std::size_t>(b)]]->w,
                                                 probes);
                        std::copy(t.data(), t.data() + t.size(),
                                  tgt.data() + static_cast<std::int64_t>(b) * t.size());
                    }
                    binds.emplace(plan.target_name, std::move(tgt));
                } else {
                    binds.emplace(plan.target_name,
                                  probe_forward(zoo.arch, records[order[start]]->w, probes));
                }
                binds.emplace(plan.probe_name, std::move(probes));
            }
            Evaluation ev = forward_eval(plan.g, binds);
            Gradients gr = grad(plan.g, ev, plan.total);
            ParamMap gmap;
            for (const auto& [k, v] : res.model.params) gmap.emplace(k, gr.wrt(k));
            opt.step(res.model.params, gmap);
            sum_total += ev.value(plan.total)[0];
            sum_recon += ev.value(plan.recon)[0];
            sum_kl += ev.value(plan.kl)[0];
            if (with_func) sum_func += ev.value(plan.func)[0];
            ++steps;
        }
        if (steps == 0) throw ConfigError("train_vae: batch larger than record count");
        res.total_curve.push_back(sum_total / steps);
        res.recon_curve.push_back(sum_recon / steps);
        res.kl_curve.push_back(sum_kl / steps);
        res.func_curve.push_back(sum_func / steps);
    }
    return res;
}

// ---- persistence ----------------------------------------------------------------

inline void save_vae(const VaeModel& m, const std::string& path) {
    BinaryWriter w(path);
    w.magic("ENVVAE1\0");
    w.u32(1);  // version
    w.str(arch_to_json(m.arch).dump());
    w.u64(m.arch.arch_id());
    w.u32(static_cast<std::uint32_t>(m.cfg.d_z));
    w.u32(static_cast<std::uint32_t>(m.cfg.width));
    w.u32(static_cast<std::uint32_t>(m.cfg.heads));
    w.u32(static_cast<std::uint32_t>(m.cfg.depth));
    w.f64(m.cfg.beta);
    w.f64(m.cfg.lambda);
    w.u32(static_cast<std::uint32_t>(m.cfg.probe_batch));
    w.u32(static_cast<std::uint32_t>(m.cfg.epochs));
    w.u32(static_cast<std::uint32_t>(m.cfg.batch));
    w.f64(m.cfg.lr);
    w.u64(m.cfg.seed);
    w.u64(m.provenance);
    // normalizer payload
    w.f64(m.normalizer.eps);
    w.u32(static_cast<std::uint32_t>(m.normalizer.mean.size()));
    for (std::size_t l = 0; l < m.normalizer.mean.size(); ++l) {
        w.tensor(m.normalizer.mean[l]);
        w.tensor(m.normalizer.std[l]);
    }
    w.u32(static_cast<std::uint32_t>(m.normalizer.floored.size()));
    for (const auto& [layer, coord] : m.normalizer.floored) {
        w.u32(static_cast<std::uint32_t>(layer));
        w.u64(static_cast<std::uint64_t>(coord));
    }
    w.u32(static_cast<std::uint32_t>(m.params.size()));
    for (const auto& [name, t] : m.params) {
        w.str(name);
        w.tensor(t);
    }
    w.crc_trailer();
    w.close();
}

inline VaeModel load_vae(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("ENVVAE1\0");
    std::uint32_t version = r.u32();
    if (version != 1) throw IoError("vae checkpoint " + path + ": unsupported version " + std::to_string(version));
    VaeModel m;
    try {
        m.arch = arch_from_json(nlohmann::json::parse(r.str()));
    } catch (const nlohmann::json::exception&) {
        throw IoError("vae checkpoint " + path + ": corrupt arch description");
    }
    std::uint64_t arch_id = r.u64();
    if (arch_id != m.arch.arch_id()) throw IoError("vae checkpoint " + path + ": arch id mismatch");
    m.cfg.d_z = static_cast<int>(r.u32());
    m.cfg.width = static_cast<int>(r.u32());
    m.cfg.heads = static_cast<int>(r.u32());
    m.cfg.depth = static_cast<int>(r.u32());
    m.cfg.beta = r.f64();
    m.cfg.lambda = r.f64();
    m.cfg.probe_batch = static_cast<int>(r.u32());
    m.cfg.epochs = static_cast<int>(r.u32());
    m.cfg.batch = static_cast<int>(r.u32());
    m.cfg.lr = r.f64();
    m.cfg.seed = r.u64();
    m.provenance = r.u64();
    m.normalizer.arch_id = m.arch.arch_id();
    m.normalizer.eps = r.f64();
    std::uint32_t layers = r.u32();
    for (std::uint32_t l = 0; l < layers; ++l) {
        m.normalizer.mean.push_back(r.tensor());
        m.normalizer.std.push_back(r.tensor());
    }
    std::uint32_t floored = r.u32();
    for (std::uint32_t i = 0; i < floored; ++i) {
        int layer = static_cast<int>(r.u32());
        std::int64_t coord = static_cast<std::int64_t>(r.u64());
        m.normalizer.floored.emplace_back(layer, coord);
    }
    std::uint32_t nparams = r.u32();
    for (std::uint32_t i = 0; i < nparams; ++i) {
        std::string name = r.str();
        m.params.emplace(std::move(name), r.tensor());
    }
    r.check_crc_trailer();
    return m;
}

}  // namespace envgen
