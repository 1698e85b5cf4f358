#pragma once

// Conditional latent DDPM over per-node latent tokens. Forward process uses a
// linear beta schedule with 64-bit cumulative products; the noise network is a
// transformer with a learned positional embedding per node index, a sinusoidal
// step embedding, a condition embedding from the environment label, and
// adaptive layer norm (scale/shift generated from step + condition embeddings;
// zero embeddings reduce every block to a plain pre-LN block by construction).

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/graph.hpp"
#include "envgen/io.hpp"
#include "envgen/optim.hpp"
#include "envgen/rng.hpp"
#include "envgen/tensor.hpp"
#include "envgen/vae.hpp"

namespace envgen {

// ---- forward process ---------------------------------------------------------

struct DiffusionSchedule {
    int N = 0;
    std::vector<double> beta;       // index 1..N, beta[0] = 0
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // cumulative product, alpha_bar[0] = 1
};

inline DiffusionSchedule make_schedule(int N, double beta1 = 1e-4, double betaN = 2e-2) {
    if (N < 2) throw ConfigError("diffusion schedule needs at least 2 steps");
    if (!(beta1 > 0.0 && betaN < 1.0 && beta1 <= betaN))
        throw ConfigError("diffusion schedule needs 0 < beta1 <= betaN < 1");
    DiffusionSchedule s;
    s.N = N;
    s.beta.assign(static_cast<std::size_t>(N) + 1, 0.0);
    s.alpha.assign(static_cast<std::size_t>(N) + 1, 1.0);
    s.alpha_bar.assign(static_cast<std::size_t>(N) + 1, 1.0);
    for (int n = 1; n <= N; ++n) {
        s.beta[static_cast<std::size_t>(n)] =
            beta1 + (betaN - beta1) * static_cast<double>(n - 1) / static_cast<double>(N - 1);
        s.alpha[static_cast<std::size_t>(n)] = 1.0 - s.beta[static_cast<std::size_t>(n)];
        s.alpha_bar[static_cast<std::size_t>(n)] =
            s.alpha_bar[static_cast<std::size_t>(n - 1)] * s.alpha[static_cast<std::size_t>(n)];
    }
    return s;
}

// z_n = sqrt(abar_n) z0 + sqrt(1 - abar_n) eps
inline Tensor q_sample(const DiffusionSchedule& s, const Tensor& z0, int n, const Tensor& eps) {
    if (n < 1 || n > s.N) throw ConfigError("q_sample: step out of range");
    if (z0.shape() != eps.shape()) throw ShapeError("q_sample: z0/eps shape mismatch");
    double a = std::sqrt(s.alpha_bar[static_cast<std::size_t>(n)]);
    double b = std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(n)]);
    Tensor out(z0.shape());
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(a * z0[i] + b * eps[i]);
    return out;
}

// one ancestral reverse step; noise == nullptr omits the sigma_n term
inline Tensor reverse_step(const DiffusionSchedule& s, int n, const Tensor& z_n, const Tensor& eps_hat,
                           const Tensor* noise) {
    if (n < 1 || n > s.N) throw ConfigError("reverse_step: step out of range");
    if (z_n.shape() != eps_hat.shape()) throw ShapeError("reverse_step: z/eps shape mismatch");
    double a = s.alpha[static_cast<std::size_t>(n)];
    double abar = s.alpha_bar[static_cast<std::size_t>(n)];
    double coef = (1.0 - a) / std::sqrt(1.0 - abar);
    double inv_sqrt_a = 1.0 / std::sqrt(a);
    double sigma = std::sqrt(s.beta[static_cast<std::size_t>(n)]);
    Tensor out(z_n.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) {
        double v = inv_sqrt_a * (static_cast<double>(z_n[i]) - coef * eps_hat[i]);
        if (noise) v += sigma * (*noise)[i];
        out[i] = static_cast<float>(v);
    }
    return out;
}

// ---- conditioning ---------------------------------------------------------------

enum class LabelMode : std::uint32_t { TrueEnv = 1, Surrogate = 2 };

inline const char* label_mode_name(LabelMode m) {
    return m == LabelMode::TrueEnv ? "true-env" : "surrogate";
}

struct EnvLabel {
    LabelMode mode = LabelMode::TrueEnv;
    std::vector<double> values;
};

// ---- model ----------------------------------------------------------------------

struct LdmConfig {
    int n_steps = 500;
    double beta1 = 1e-4;
    double betaN = 2e-2;
    int width = 128;
    int heads = 4;
    int depth = 6;
    double lr = 1e-4;
    int epochs = 40;
    int batch = 16;
    double ema = 0.999;
    std::uint64_t seed = 0;

    void validate() const {
        if (width <= 0 || heads <= 0 || depth <= 0 || width % heads != 0)
            throw ConfigError("ldm: bad transformer dims (width must divide by heads)");
        if (n_steps < 2) throw ConfigError("ldm: need at least 2 diffusion steps");
        if (!(ema > 0.0 && ema < 1.0)) throw ConfigError("ldm: ema decay must be in (0, 1)");
        if (epochs < 0 || batch <= 0) throw ConfigError("ldm: bad training sizes");
    }
};

struct LdmModel {
    LdmConfig cfg;
    DiffusionSchedule sched;
    int tokens = 0;
    int d_z = 0;
    int c_dim = 0;
    LabelMode label_mode = LabelMode::TrueEnv;
    ParamMap params;
    ParamMap ema_params;        // shadow used for sampling
    Tensor lat_mean, lat_std;   // [T, d_z] whitening of the training latents
    Tensor lab_mean, lab_std;   // [c_dim] whitening of the labels
    std::uint64_t provenance = 0;

    const ParamMap& sampling_params() const { return ema_params.empty() ? params : ema_params; }
};

// sinusoidal features of the diffusion step index (half sine, half cosine)
inline Tensor step_features(int n, int width) {
    int half = width / 2;
    Tensor out({width});
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = static_cast<float>(std::sin(n * freq));
        out[half + i] = static_cast<float>(std::cos(n * freq));
    }
    if (width % 2) out[width - 1] = 1.0f;
    return out;
}

inline ParamMap init_ldm_params(int tokens, int d_z, int c_dim, const LdmConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (tokens <= 0 || d_z <= 0 || c_dim <= 0) throw ConfigError("ldm: tokens, d_z, c_dim must be positive");
    Rng rng(derive_seed(seed, "ldm_init"));
    ParamMap p;
    vae_detail::add_linear(p, rng, "ldm.in", cfg.width, d_z);
    p.emplace("ldm.pos", Tensor::randn({tokens, cfg.width}, rng, 0.02f));
    vae_detail::add_linear(p, rng, "ldm.step1", cfg.width, cfg.width);
    vae_detail::add_linear(p, rng, "ldm.step2", cfg.width, cfg.width);
    vae_detail::add_linear(p, rng, "ldm.cond1", cfg.width, c_dim);
    vae_detail::add_linear(p, rng, "ldm.cond2", cfg.width, cfg.width);
    for (int b = 0; b < cfg.depth; ++b) {
        std::string base = "ldm.blk" + std::to_string(b);
        vae_detail::add_block(p, rng, base, cfg.width, cfg.heads);
        // adaLN modulation heads start at zero: blocks begin as plain pre-LN blocks
        for (const char* head : {".mod_attn_scale", ".mod_attn_shift", ".mod_ffn_scale", ".mod_ffn_shift"}) {
            p.emplace(base + head + std::string(".w"), Tensor::zeros({cfg.width, cfg.width}));
            p.emplace(base + head + std::string(".b"), Tensor::zeros({cfg.width}));
        }
    }
    // zero-initialized output head: the freshly built network predicts exactly zero
    p.emplace("ldm.out.w", Tensor::zeros({d_z, cfg.width}));
    p.emplace("ldm.out.b", Tensor::zeros({d_z}));
    return p;
}

struct LdmPlan {
    Graph g;
    int B = 1;
    std::string z_name = "z_n";
    std::string step_name = "step_feat";   // [B, width] sinusoidal features
    std::string cond_name = "cond";        // [B, c_dim] whitened label values
    std::string target_name = "eps_target";
    int eps_hat = -1;
    int loss = -1;
};

namespace ldm_detail {

// y = LN(x) * (1 + scale) + shift, scale/shift from the conditioning embedding
inline int ada_layer_norm(Graph& g, const std::map<std::string, int>& pn, const std::string& head, int x, int emb,
                          int B, int width) {
    int scale = vae_detail::linear(g, pn, head + "_scale", emb);
    int shift = vae_detail::linear(g, pn, head + "_shift", emb);
    scale = g.reshape(scale, {B, 1, width});
    shift = g.reshape(shift, {B, 1, width});
    int h = g.layer_norm(x);
    return g.add(g.mul(h, g.add_scalar(scale, 1.0f)), shift);
}

inline int ada_block(Graph& g, const std::map<std::string, int>& pn, const std::string& base, int x, int emb, int B,
                     int heads, int width) {
    int dh = width / heads;
    int a_in = ada_layer_norm(g, pn, base + ".mod_attn", x, emb, B, width);
    std::vector<int> head_outs;
    float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int h = 0; h < heads; ++h) {
        std::string hs = std::to_string(h);
        int q = vae_detail::linear(g, pn, base + ".q" + hs, a_in);
        int k = vae_detail::linear(g, pn, base + ".k" + hs, a_in);
        int v = vae_detail::linear(g, pn, base + ".v" + hs, a_in);
        int att = g.softmax(g.scale(g.matmul(q, k, false, true), inv_sqrt));
        head_outs.push_back(g.matmul(att, v));
    }
    int o = head_outs.size() == 1 ? head_outs[0] : g.concat(head_outs, -1);
    x = g.add(x, vae_detail::linear(g, pn, base + ".proj", o));
    int f = ada_layer_norm(g, pn, base + ".mod_ffn", x, emb, B, width);
    f = g.gelu(vae_detail::linear(g, pn, base + ".ff1", f));
    f = vae_detail::linear(g, pn, base + ".ff2", f);
    return g.add(x, f);
}

}  // namespace ldm_detail

inline LdmPlan make_ldm_plan(const LdmModel& m, int B, bool with_loss, bool trainable) {
    m.cfg.validate();
    LdmPlan p;
    p.B = B;
    std::map<std::string, int> pn;
    for (const auto& [k, v] : (trainable ? m.params : m.sampling_params()))
        pn[k] = p.g.input(k, v.shape(), trainable);

    int z = p.g.input(p.z_name, {B, m.tokens, m.d_z}, false);
    int step = p.g.input(p.step_name, {B, m.cfg.width}, false);
    int cond = p.g.input(p.cond_name, {B, m.c_dim}, false);

    int s_emb = vae_detail::linear(p.g, pn, "ldm.step2",
                                   p.g.gelu(vae_detail::linear(p.g, pn, "ldm.step1", step)));
    int c_emb = vae_detail::linear(p.g, pn, "ldm.cond2",
                                   p.g.gelu(vae_detail::linear(p.g, pn, "ldm.cond1", cond)));
    int emb = p.g.add(s_emb, c_emb);  // [B, width]

    int x = p.g.add(vae_detail::linear(p.g, pn, "ldm.in", z), pn.at("ldm.pos"));
    for (int b = 0; b < m.cfg.depth; ++b)
        x = ldm_detail::ada_block(p.g, pn, "ldm.blk" + std::to_string(b), x, emb, B, m.cfg.heads, m.cfg.width);
    x = p.g.layer_norm(x);
    p.eps_hat = vae_detail::linear(p.g, pn, "ldm.out", x);  // [B, T, d_z]

    if (with_loss) {
        int tgt = p.g.input(p.target_name, {B, m.tokens, m.d_z}, false);
        // noise-matching loss: sum over latent dims, mean over tokens and batch
        p.loss = p.g.scale(p.g.sum_all(p.g.square(p.g.sub(p.eps_hat, tgt))),
                           1.0f / static_cast<float>(B * m.tokens));
    }
    return p;
}

// ---- training -------------------------------------------------------------------

struct LdmTrainResult {
    LdmModel model;
    std::vector<double> curve;  // mean loss per epoch
};

namespace ldm_detail {

// per-coordinate whitening stats with a floor on degenerate coordinates
inline void fit_whitening(const Tensor& rows, Tensor& mean, Tensor& stdev, double floor_at = 1e-6) {
    int R = rows.dim(0);
    std::int64_t C = rows.size() / R;
    Shape s(rows.shape().begin() + 1, rows.shape().end());
    mean = Tensor(s);
    stdev = Tensor(s);
    for (std::int64_t c = 0; c < C; ++c) {
        double sum = 0.0, sumsq = 0.0;
        for (int r = 0; r < R; ++r) {
            double v = rows[static_cast<std::int64_t>(r) * C + c];
            sum += v;
            sumsq += v * v;
        }
        double mu = sum / R;
        double var = std::max(0.0, sumsq / R - mu * mu);
        mean[c] = static_cast<float>(mu);
        stdev[c] = static_cast<float>(std::max(std::sqrt(var), floor_at));
    }
}

inline Tensor whiten_row(const Tensor& row, const Tensor& mean, const Tensor& stdev) {
    Tensor out(row.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = (row[i] - mean[i]) / stdev[i];
    return out;
}

}  // namespace ldm_detail

// latents: [R, T, d_z] (posterior means), labels: [R, c_dim]
inline LdmTrainResult train_ldm(const Tensor& latents, const Tensor& labels, LabelMode mode, LdmConfig cfg) {
    cfg.validate();
    if (latents.rank() != 3) throw ShapeError("train_ldm: latents must be [records, tokens, d_z]");
    if (labels.rank() != 2 || labels.dim(0) != latents.dim(0))
        throw ShapeError("train_ldm: labels must be [records, c_dim] aligned with latents");
    const int R = latents.dim(0), T = latents.dim(1), dz = latents.dim(2), cdim = labels.dim(1);
    cfg.batch = std::min(cfg.batch, R);

    LdmTrainResult res;
    res.model.cfg = cfg;
    res.model.sched = make_schedule(cfg.n_steps, cfg.beta1, cfg.betaN);
    res.model.tokens = T;
    res.model.d_z = dz;
    res.model.c_dim = cdim;
    res.model.label_mode = mode;
    res.model.params = init_ldm_params(T, dz, cdim, cfg, cfg.seed);
    ldm_detail::fit_whitening(latents, res.model.lat_mean, res.model.lat_std);
    ldm_detail::fit_whitening(labels, res.model.lab_mean, res.model.lab_std);

    const int B = cfg.batch;
    LdmPlan plan = make_ldm_plan(res.model, B, true, true);

    // whitened copies packed once
    std::vector<Tensor> z0s, labs;
    z0s.reserve(static_cast<std::size_t>(R));
    labs.reserve(static_cast<std::size_t>(R));
    std::int64_t lat_row = static_cast<std::int64_t>(T) * dz;
    for (int r = 0; r < R; ++r) {
        Tensor zr({T, dz});
        std::copy(latents.data() + r * lat_row, latents.data() + (r + 1) * lat_row, zr.data());
        z0s.push_back(ldm_detail::whiten_row(zr, res.model.lat_mean, res.model.lat_std));
        Tensor lr({cdim});
        std::copy(labels.data() + static_cast<std::int64_t>(r) * cdim,
                  labels.data() + static_cast<std::int64_t>(r + 1) * cdim, lr.data());
        labs.push_back(ldm_detail::whiten_row(lr, res.model.lab_mean, res.model.lab_std));
    }

    Adam opt({static_cast<float>(cfg.lr)});
    EmaTracker ema(static_cast<float>(cfg.ema));
    Rng shuffle_rng(derive_seed(cfg.seed, "ldm_shuffle"));
    Rng noise_rng(derive_seed(cfg.seed, "ldm_noise"));
    std::vector<std::size_t> order(static_cast<std::size_t>(R));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    Tensor zb({B, T, dz}), step_b({B, cfg.width}), cond_b({B, cdim}), tgt_b({B, T, dz});
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            std::size_t j = i + static_cast<std::size_t>(shuffle_rng.below(order.size() - i));
            std::swap(order[i], order[j]);
        }
        double sum = 0.0;
        int steps = 0;
        for (std::size_t start = 0; start + static_cast<std::size_t>(B) <= order.size();
             start += static_cast<std::size_t>(B)) {
            for (int b = 0; b < B; ++b) {
                const Tensor& z0 = z0s[order[start + static_cast<std::size_t>(b)]];
                const Tensor& lb = labs[order[start + static_cast<std::size_t>(b)]];
                int n = 1 + static_cast<int>(noise_rng.below(static_cast<std::uint64_t>(cfg.n_steps)));
                Tensor eps = Tensor::randn({T, dz}, noise_rng);
                Tensor zn = q_sample(res.model.sched, z0, n, eps);
                std::copy(zn.data(), zn.data() + lat_row, zb.data() + b * lat_row);
                std::copy(eps.data(), eps.data() + lat_row, tgt_b.data() + b * lat_row);
                Tensor sf = step_features(n, cfg.width);
                std::copy(sf.data(), sf.data() + cfg.width,
                          step_b.data() + static_cast<std::int64_t>(b) * cfg.width);
                std::copy(lb.data(), lb.data() + cdim, cond_b.data() + static_cast<std::int64_t>(b) * cdim);
            }
            std::unordered_map<std::string, Tensor> binds;
            for (const auto& [k, v] : res.model.params) binds.emplace(k, v);
            binds.emplace(plan.z_name, zb);
            binds.emplace(plan.step_name, step_b);
            binds.emplace(plan.cond_name, cond_b);
            binds.emplace(plan.target_name, tgt_b);
            Evaluation ev = forward_eval(plan.g, binds);
            Gradients gr = grad(plan.g, ev, plan.loss);
            ParamMap gmap;
            for (const auto& [k, v] : res.model.params) gmap.emplace(k, gr.wrt(k));
            opt.step(res.model.params, gmap);
            ema.update(res.model.params);
            sum += ev.value(plan.loss)[0];
            ++steps;
        }
        if (steps == 0) throw ConfigError("train_ldm: batch larger than record count");
        res.curve.push_back(sum / steps);
    }
    if (!ema.empty()) res.model.ema_params = ema.shadow();
    return res;
}

// ---- sampling -------------------------------------------------------------------

// ancestral sampling conditioned on one label per row; returns latents in the
// original (unwhitened) coordinate system, shape [B, T, d_z]
inline Tensor ldm_sample(const LdmModel& m, const std::vector<EnvLabel>& labels, std::uint64_t seed) {
    if (labels.empty()) throw ConfigError("ldm_sample: no labels");
    const int B = static_cast<int>(labels.size());
    const int T = m.tokens, dz = m.d_z;
    for (const auto& l : labels) {
        if (l.mode != m.label_mode)
            throw ConfigError(std::string("ldm_sample: label mode ") + label_mode_name(l.mode) +
                              " does not match the model's " + label_mode_name(m.label_mode));
        if (static_cast<int>(l.values.size()) != m.c_dim)
            throw ShapeError("ldm_sample: label has " + std::to_string(l.values.size()) + " values, model expects " +
                             std::to_string(m.c_dim));
    }
    LdmPlan plan = make_ldm_plan(m, B, false, false);

    Tensor cond({B, m.c_dim});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < m.c_dim; ++c)
            cond[static_cast<std::int64_t>(b) * m.c_dim + c] =
                (static_cast<float>(labels[static_cast<std::size_t>(b)].values[static_cast<std::size_t>(c)]) -
                 m.lab_mean[c]) /
                m.lab_std[c];

    Rng rng(derive_seed(seed, "ldm_sample"));
    Tensor z = Tensor::randn({B, T, dz}, rng);
    const auto& params = m.sampling_params();
    for (int n = m.sched.N; n >= 1; --n) {
        Tensor sf = step_features(n, m.cfg.width);
        Tensor step_b({B, m.cfg.width});
        for (int b = 0; b < B; ++b)
            std::copy(sf.data(), sf.data() + m.cfg.width,
                      step_b.data() + static_cast<std::int64_t>(b) * m.cfg.width);
        std::unordered_map<std::string, Tensor> binds;
        for (const auto& [k, v] : params) binds.emplace(k, v);
        binds.emplace(plan.z_name, z);
        binds.emplace(plan.step_name, std::move(step_b));
        binds.emplace(plan.cond_name, cond);
        Tensor eps_hat = forward_eval(plan.g, binds).value(plan.eps_hat);
        if (n > 1) {
            Tensor xi = Tensor::randn({B, T, dz}, rng);
            z = reverse_step(m.sched, n, z, eps_hat, &xi);
        } else {
            z = reverse_step(m.sched, n, z, eps_hat, nullptr);
        }
    }
    // back to the VAE's latent coordinates
    std::int64_t row = static_cast<std::int64_t>(T) * dz;
    for (int b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < row; ++i)
            z[b * row + i] = z[b * row + i] * m.lat_std[i] + m.lat_mean[i];
    return z;
}

// label -> latent -> normalized graph -> weights
inline std::vector<FlatWeights> generate_experts(const VaeModel& vae, const LdmModel& ldm,
                                                 const std::vector<EnvLabel>& labels, std::uint64_t seed) {
    if (ldm.tokens != vae.tokens() || ldm.d_z != vae.cfg.d_z)
        throw ConfigError("generate_experts: diffusion latent dims do not match the decoder");
    Tensor z = ldm_sample(ldm, labels, seed);
    std::vector<FlatWeights> out;
    std::int64_t row = static_cast<std::int64_t>(ldm.tokens) * ldm.d_z;
    for (int b = 0; b < static_cast<int>(labels.size()); ++b) {
        Tensor zb({ldm.tokens, ldm.d_z});
        std::copy(z.data() + b * row, z.data() + (b + 1) * row, zb.data());
        WeightGraph dec = vae_decode(vae, zb);
        out.push_back(decode_graph(vae.arch, invert_normalizer(vae.normalizer, dec)));
    }
    return out;
}

inline FlatWeights generate_expert(const VaeModel& vae, const LdmModel& ldm, const EnvLabel& label,
                                   std::uint64_t seed) {
    return generate_experts(vae, ldm, {label}, seed)[0];
}

// ---- persistence ------------------------------------------------------------------

inline void save_ldm(const LdmModel& m, const std::string& path) {
    BinaryWriter w(path);
    w.magic("ENVLDM1\0");
    w.u32(1);  // version
    w.u32(static_cast<std::uint32_t>(m.tokens));
    w.u32(static_cast<std::uint32_t>(m.d_z));
    w.u32(static_cast<std::uint32_t>(m.c_dim));
    w.u32(static_cast<std::uint32_t>(m.label_mode));
    w.u32(static_cast<std::uint32_t>(m.cfg.n_steps));
    w.f64(m.cfg.beta1);
    w.f64(m.cfg.betaN);
    w.u32(static_cast<std::uint32_t>(m.cfg.width));
    w.u32(static_cast<std::uint32_t>(m.cfg.heads));
    w.u32(static_cast<std::uint32_t>(m.cfg.depth));
    w.f64(m.cfg.lr);
    w.u32(static_cast<std::uint32_t>(m.cfg.epochs));
    w.u32(static_cast<std::uint32_t>(m.cfg.batch));
    w.f64(m.cfg.ema);
    w.u64(m.cfg.seed);
    w.u64(m.provenance);
    w.tensor(m.lat_mean);
    w.tensor(m.lat_std);
    w.tensor(m.lab_mean);
    w.tensor(m.lab_std);
    auto write_params = [&](const ParamMap& p) {
        w.u32(static_cast<std::uint32_t>(p.size()));
        for (const auto& [name, t] : p) {
            w.str(name);
            w.tensor(t);
        }
    };
    write_params(m.params);
    write_params(m.ema_params);
    w.crc_trailer();
    w.close();
}

inline LdmModel load_ldm(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("ENVLDM1\0");
    std::uint32_t version = r.u32();
    if (version != 1) throw IoError("ldm checkpoint " + path + ": unsupported version " + std::to_string(version));
    LdmModel m;
    m.tokens = static_cast<int>(r.u32());
    m.d_z = static_cast<int>(r.u32());
    m.c_dim = static_cast<int>(r.u32());
    std::uint32_t mode = r.u32();
    if (mode != static_cast<std::uint32_t>(LabelMode::TrueEnv) &&
        mode != static_cast<std::uint32_t>(LabelMode::Surrogate))
        throw IoError("ldm checkpoint " + path + ": unknown label mode " + std::to_string(mode));
    m.label_mode = static_cast<LabelMode>(mode);
    m.cfg.n_steps = static_cast<int>(r.u32());
    m.cfg.beta1 = r.f64();
    m.cfg.betaN = r.f64();
    m.cfg.width = static_cast<int>(r.u32());
    m.cfg.heads = static_cast<int>(r.u32());
    m.cfg.depth = static_cast<int>(r.u32());
    m.cfg.lr = r.f64();
    m.cfg.epochs = static_cast<int>(r.u32());
    m.cfg.batch = static_cast<int>(r.u32());
    m.cfg.ema = r.f64();
    m.cfg.seed = r.u64();
    m.provenance = r.u64();
    m.lat_mean = r.tensor();
    m.lat_std = r.tensor();
    m.lab_mean = r.tensor();
    m.lab_std = r.tensor();
    auto read_params = [&](ParamMap& p) {
        std::uint32_t n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = r.str();
            p.emplace(std::move(name), r.tensor());
        }
    };
    read_params(m.params);
    read_params(m.ema_params);
    r.check_crc_trailer();
    m.sched = make_schedule(m.cfg.n_steps, m.cfg.beta1, m.cfg.betaN);
    return m;
}

}  // namespace envgen
