#pragma once

// Surrogate environment labeling: pairwise function-space distances between
// per-environment proxy experts, a first-principal-direction projection of the
// distance profiles into scalar labels, and an epsilon-SVR (SMO dual solver)
// that predicts those labels from a single pooled observation frame.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "envgen/common.hpp"
#include "envgen/dataset.hpp"
#include "envgen/io.hpp"
#include "envgen/metrics.hpp"
#include "envgen/rng.hpp"
#include "envgen/tensor.hpp"
#include "envgen/vae.hpp"
#include "envgen/zoo.hpp"

namespace envgen {

// ---- distance matrix ---------------------------------------------------------

// uniform draw (with replacement) of states across every training trajectory
inline Tensor sample_probe_states(const TrajectorySet& data, int count, std::uint64_t seed) {
    if (count <= 0) throw ConfigError("probe pool size must be positive");
    std::vector<const Trajectory*> trajs;
    for (const auto& [id, list] : data.train)
        for (const auto& t : list) trajs.push_back(&t);
    if (trajs.empty()) throw ConfigError("probe pool needs training trajectories");
    std::vector<std::int64_t> cum{0};
    for (const auto* t : trajs) cum.push_back(cum.back() + t->states.dim(0));
    Shape frame_shape(trajs[0]->states.shape().begin() + 1, trajs[0]->states.shape().end());
    std::int64_t frame_n = numel(frame_shape);

    Shape out_shape{count};
    out_shape.insert(out_shape.end(), frame_shape.begin(), frame_shape.end());
    Tensor out(out_shape);
    Rng rng(seed);
    for (int p = 0; p < count; ++p) {
        std::int64_t u = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cum.back())));
        std::size_t ti = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin()) - 1;
        std::int64_t frame = u - cum[ti];
        const float* src = trajs[ti]->states.data() + frame * frame_n;
        std::copy(src, src + frame_n, out.data() + static_cast<std::int64_t>(p) * frame_n);
    }
    return out;
}

// D[i][j] = mean over probes of the summed squared output difference between
// experts i and j; probe outputs are evaluated once per expert
inline Tensor pairwise_function_distance(const ArchSpec& arch, const std::vector<const FlatWeights*>& experts,
                                         const Tensor& probes) {
    const int E = static_cast<int>(experts.size());
    if (E < 2) throw ConfigError("distance matrix needs at least two experts");
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(E));
    for (const auto* w : experts) outs.push_back(probe_forward(arch, *w, probes));
    const double inv_p = 1.0 / probes.dim(0);
    Tensor D({E, E});
    for (int i = 0; i < E; ++i) {
        for (int j = i + 1; j < E; ++j) {
            double sum = 0.0;
            for (std::int64_t k = 0; k < outs[static_cast<std::size_t>(i)].size(); ++k) {
                double d = static_cast<double>(outs[static_cast<std::size_t>(i)][k]) -
                           outs[static_cast<std::size_t>(j)][k];
                sum += d * d;
            }
            float v = static_cast<float>(sum * inv_p);
            D[static_cast<std::int64_t>(i) * E + j] = v;
            D[static_cast<std::int64_t>(j) * E + i] = v;
        }
    }
    return D;
}

// ---- principal-direction labeling -----------------------------------------------

struct PcaLabeler {
    std::vector<double> mean_row;   // column means of the fitted rows
    std::vector<double> direction;  // unit-norm first principal direction
    double evr = 0.0;               // explained variance ratio of that direction
};

inline std::vector<double> project_rows(const PcaLabeler& l, const Tensor& rows) {
    if (rows.rank() != 2 || rows.dim(1) != static_cast<int>(l.direction.size()))
        throw ShapeError("project_rows: row width does not match the fitted direction");
    std::vector<double> out(static_cast<std::size_t>(rows.dim(0)));
    for (int r = 0; r < rows.dim(0); ++r) {
        double s = 0.0;
        for (int c = 0; c < rows.dim(1); ++c)
            s += (static_cast<double>(rows[static_cast<std::int64_t>(r) * rows.dim(1) + c]) - l.mean_row[c]) *
                 l.direction[c];
        out[static_cast<std::size_t>(r)] = s;
    }
    return out;
}

// sign_hint: known scalar per row (first environment coefficient); labels are
// oriented to correlate positively with it. Without a hint the row with the
// largest raw norm gets a non-negative label.
inline PcaLabeler fit_pca_labeler(const Tensor& rows, const std::vector<double>* sign_hint = nullptr) {
    if (rows.rank() != 2) throw ShapeError("fit_pca_labeler: expected [rows, features]");
    const int R = rows.dim(0), F = rows.dim(1);
    if (R < 2) throw ConfigError("fit_pca_labeler: need at least two rows");
    if (sign_hint && static_cast<int>(sign_hint->size()) != R)
        throw ShapeError("fit_pca_labeler: sign hint length mismatch");

    Eigen::MatrixXd X(R, F);
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < F; ++c) X(r, c) = rows[static_cast<std::int64_t>(r) * F + c];
    Eigen::RowVectorXd mean = X.colwise().mean();
    Eigen::MatrixXd Xc = X.rowwise() - mean;
    Eigen::MatrixXd cov = Xc.transpose() * Xc / static_cast<double>(R);
    double trace = cov.trace();
    if (!(trace > 1e-30)) throw NumericError("distance rows have no variation; labels are undefined");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("principal-direction eigendecomposition failed");
    Eigen::VectorXd v = es.eigenvectors().col(F - 1);  // ascending order
    double lambda = es.eigenvalues()(F - 1);

    PcaLabeler l;
    l.mean_row.assign(mean.data(), mean.data() + F);
    l.direction.assign(v.data(), v.data() + F);
    l.evr = lambda / trace;

    std::vector<double> labels = project_rows(l, rows);
    bool flip = false;
    bool oriented = false;
    if (sign_hint) {
        double mh = 0.0, ml = 0.0;
        for (int r = 0; r < R; ++r) {
            mh += (*sign_hint)[static_cast<std::size_t>(r)];
            ml += labels[static_cast<std::size_t>(r)];
        }
        mh /= R;
        ml /= R;
        double cross = 0.0, hh = 0.0;
        for (int r = 0; r < R; ++r) {
            cross += ((*sign_hint)[static_cast<std::size_t>(r)] - mh) * (labels[static_cast<std::size_t>(r)] - ml);
            hh += ((*sign_hint)[static_cast<std::size_t>(r)] - mh) * ((*sign_hint)[static_cast<std::size_t>(r)] - mh);
        }
        if (hh > 0.0 && cross != 0.0) {
            flip = cross < 0.0;
            oriented = true;
        }
    }
    if (!oriented) {
        int best = 0;
        double best_norm = -1.0;
        for (int r = 0; r < R; ++r) {
            double n2 = 0.0;
            for (int c = 0; c < F; ++c) {
                double x = rows[static_cast<std::int64_t>(r) * F + c];
                n2 += x * x;
            }
            if (n2 > best_norm) {
                best_norm = n2;
                best = r;
            }
        }
        flip = labels[static_cast<std::size_t>(best)] < 0.0;
    }
    if (flip)
        for (auto& d : l.direction) d = -d;
    return l;
}

// ---- featurization --------------------------------------------------------------

constexpr int kPromptPool = 4;

// [C, H, W] frame -> per-channel 4x average pooling, flattened; vectors pass through
inline Tensor featurize_frame(const Tensor& frame) {
    if (frame.rank() == 1) return frame;
    if (frame.rank() != 3) throw ShapeError("featurize_frame: expected a vector or a [C, H, W] frame");
    const int C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    if (H % kPromptPool || W % kPromptPool)
        throw ShapeError("featurize_frame: field size must divide by " + std::to_string(kPromptPool));
    const int Hp = H / kPromptPool, Wp = W / kPromptPool;
    Tensor out({C * Hp * Wp});
    const double inv = 1.0 / (kPromptPool * kPromptPool);
    std::int64_t o = 0;
    for (int c = 0; c < C; ++c) {
        const float* f = frame.data() + static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < Hp; ++i)
            for (int j = 0; j < Wp; ++j) {
                double s = 0.0;
                for (int a = 0; a < kPromptPool; ++a)
                    for (int b = 0; b < kPromptPool; ++b)
                        s += f[(i * kPromptPool + a) * W + (j * kPromptPool + b)];
                out[o++] = static_cast<float>(s * inv);
            }
    }
    return out;
}

// ---- epsilon-SVR ------------------------------------------------------------------

enum class SvrKernel : std::uint32_t { Rbf = 1, Linear = 2 };

struct SvrConfig {
    SvrKernel kernel = SvrKernel::Rbf;
    double C = 10.0;
    double epsilon = -1.0;  // <0: 0.01 * std(y)
    double gamma = -1.0;    // <0: 1 / (dim * var(X))
    double tol = 1e-6;
    std::int64_t max_iter = 2000000;
};

struct SvrModel {
    SvrKernel kernel = SvrKernel::Rbf;
    double gamma = 0.0;
    double epsilon = 0.0;
    double C = 10.0;
    double bias = 0.0;
    Tensor sv;                 // [n_sv, dim]
    std::vector<double> coef;  // alpha_i - alpha_i*
};

namespace svr_detail {

inline double kernel_eval(SvrKernel k, double gamma, const float* a, const float* b, int d) {
    if (k == SvrKernel::Linear) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += static_cast<double>(a[i]) * b[i];
        return s;
    }
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        double dd = static_cast<double>(a[i]) - b[i];
        s += dd * dd;
    }
    return std::exp(-gamma * s);
}

}  // namespace svr_detail

// sequential-minimal-optimization on the 2n-variable dual with the tube offset
// handled through the equality constraint; pair selection is the maximal
// violating pair over the constraint-projected gradient
inline SvrModel fit_svr(const Tensor& X, const std::vector<double>& y, SvrConfig cfg = {}) {
    if (X.rank() != 2) throw ShapeError("fit_svr: X must be [samples, dim]");
    const int n = X.dim(0), d = X.dim(1);
    if (n < 1 || static_cast<int>(y.size()) != n) throw ShapeError("fit_svr: label count mismatch");
    if (cfg.C <= 0.0) throw ConfigError("fit_svr: C must be positive");

    SvrModel m;
    m.kernel = cfg.kernel;
    m.C = cfg.C;
    if (cfg.gamma > 0.0) {
        m.gamma = cfg.gamma;
    } else {
        double mean = 0.0, sq = 0.0;
        for (std::int64_t i = 0; i < X.size(); ++i) {
            mean += X[i];
            sq += static_cast<double>(X[i]) * X[i];
        }
        mean /= static_cast<double>(X.size());
        double var = std::max(0.0, sq / static_cast<double>(X.size()) - mean * mean);
        m.gamma = var > 0.0 ? 1.0 / (d * var) : 1.0 / d;
    }
    if (cfg.epsilon >= 0.0) {
        m.epsilon = cfg.epsilon;
    } else {
        double mean = 0.0, sq = 0.0;
        for (double v : y) {
            mean += v;
            sq += v * v;
        }
        mean /= n;
        m.epsilon = 0.01 * std::sqrt(std::max(0.0, sq / n - mean * mean));
    }

    std::vector<double> K(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            double v = svr_detail::kernel_eval(m.kernel, m.gamma, X.data() + static_cast<std::int64_t>(i) * d,
                                               X.data() + static_cast<std::int64_t>(j) * d, d);
            K[static_cast<std::size_t>(i) * n + j] = v;
            K[static_cast<std::size_t>(j) * n + i] = v;
        }

    // variable k < n is alpha_k (sign +1), k >= n is alpha*_{k-n} (sign -1)
    const int N2 = 2 * n;
    std::vector<double> u(static_cast<std::size_t>(N2), 0.0), G(static_cast<std::size_t>(N2));
    auto sgn = [n](int k) { return k < n ? 1.0 : -1.0; };
    auto row = [n](int k) { return k < n ? k : k - n; };
    for (int k = 0; k < N2; ++k) G[static_cast<std::size_t>(k)] = m.epsilon - sgn(k) * y[static_cast<std::size_t>(row(k))];

    double mval = 0.0, Mval = 0.0;
    for (std::int64_t it = 0;; ++it) {
        if (it >= cfg.max_iter) throw NumericError("fit_svr: dual solver exceeded its iteration budget");
        int bi = -1, bj = -1;
        mval = -1e300;
        Mval = 1e300;
        for (int k = 0; k < N2; ++k) {
            double g = -sgn(k) * G[static_cast<std::size_t>(k)];
            bool up = sgn(k) > 0 ? u[static_cast<std::size_t>(k)] < m.C : u[static_cast<std::size_t>(k)] > 0.0;
            bool low = sgn(k) > 0 ? u[static_cast<std::size_t>(k)] > 0.0 : u[static_cast<std::size_t>(k)] < m.C;
            if (up && g > mval) {
                mval = g;
                bi = k;
            }
            if (low && g < Mval) {
                Mval = g;
                bj = k;
            }
        }
        if (bi < 0 || bj < 0 || mval - Mval < cfg.tol) break;

        const int ri = row(bi), rj = row(bj);
        double eta = K[static_cast<std::size_t>(ri) * n + ri] + K[static_cast<std::size_t>(rj) * n + rj] -
                     2.0 * K[static_cast<std::size_t>(ri) * n + rj];
        eta = std::max(eta, 1e-12);
        double t = (mval - Mval) / eta;
        // box limits along the feasible direction (+s_i on bi, -s_j on bj)
        double cap_i = sgn(bi) > 0 ? m.C - u[static_cast<std::size_t>(bi)] : u[static_cast<std::size_t>(bi)];
        double cap_j = sgn(bj) > 0 ? u[static_cast<std::size_t>(bj)] : m.C - u[static_cast<std::size_t>(bj)];
        t = std::min(t, std::min(cap_i, cap_j));
        double di = sgn(bi) * t, dj = -sgn(bj) * t;
        u[static_cast<std::size_t>(bi)] += di;
        u[static_cast<std::size_t>(bj)] += dj;
        for (int k = 0; k < N2; ++k)
            G[static_cast<std::size_t>(k)] += sgn(k) * (sgn(bi) * K[static_cast<std::size_t>(row(k)) * n + ri] * di +
                                                        sgn(bj) * K[static_cast<std::size_t>(row(k)) * n + rj] * dj);
    }
    m.bias = 0.5 * (mval + Mval);
    if (!std::isfinite(m.bias)) throw NumericError("fit_svr: solver produced a non-finite offset");

    std::vector<int> sv_rows;
    for (int i = 0; i < n; ++i) {
        double beta = u[static_cast<std::size_t>(i)] - u[static_cast<std::size_t>(i + n)];
        if (std::abs(beta) > 1e-12) sv_rows.push_back(i);
    }
    m.sv = Tensor({static_cast<int>(sv_rows.size()), d});
    for (std::size_t s = 0; s < sv_rows.size(); ++s) {
        const float* src = X.data() + static_cast<std::int64_t>(sv_rows[s]) * d;
        std::copy(src, src + d, m.sv.data() + static_cast<std::int64_t>(s) * d);
        m.coef.push_back(u[static_cast<std::size_t>(sv_rows[s])] - u[static_cast<std::size_t>(sv_rows[s] + n)]);
    }
    return m;
}

inline double svr_predict(const SvrModel& m, const Tensor& x) {
    if (x.rank() != 1 || (m.sv.dim(0) > 0 && x.dim(0) != m.sv.dim(1)))
        throw ShapeError("svr_predict: feature length mismatch");
    double s = m.bias;
    for (int i = 0; i < m.sv.dim(0); ++i)
        s += m.coef[static_cast<std::size_t>(i)] *
             svr_detail::kernel_eval(m.kernel, m.gamma, m.sv.data() + static_cast<std::int64_t>(i) * m.sv.dim(1),
                                     x.data(), x.dim(0));
    return s;
}

// ---- fitted prompter --------------------------------------------------------------

struct PrompterConfig {
    int n_probes = 256;
    int max_examples = 512;  // SVR training frames kept (seeded subsample)
    double svr_c = 10.0;
    double svr_tol = 1e-6;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_probes <= 0 || max_examples <= 0) throw ConfigError("prompter: sizes must be positive");
        if (svr_c <= 0.0) throw ConfigError("prompter: svr C must be positive");
    }
};

struct Prompter {
    std::uint64_t arch_id = 0;
    std::vector<int> env_ids;     // distance-matrix row order (seen envs)
    std::vector<double> labels;   // surrogate scalar per seen env
    PcaLabeler pca;
    int feat_dim = 0;
    SvrModel svr;
};

inline Prompter fit_prompter(const Zoo& zoo, const TrajectorySet& data, PrompterConfig cfg) {
    cfg.validate();
    std::vector<int> seen = data.seen_ids();
    if (seen.size() < 2) throw ConfigError("fit_prompter: need at least two seen environments");

    Prompter p;
    p.arch_id = zoo.arch.arch_id();
    p.env_ids = seen;

    Tensor probes = sample_probe_states(data, cfg.n_probes, derive_seed(cfg.seed, "prompter_probes"));
    std::vector<const FlatWeights*> experts;
    for (int id : seen) experts.push_back(&zoo.proxy(id).w);
    Tensor D = pairwise_function_distance(zoo.arch, experts, probes);

    std::vector<double> hint;
    for (int id : seen) hint.push_back(data.env(id).coeffs[0]);
    p.pca = fit_pca_labeler(D, &hint);
    p.labels = project_rows(p.pca, D);

    // one (pooled frame, label) example per training frame, subsampled to budget
    std::vector<std::pair<const Trajectory*, double>> sources;
    for (std::size_t e = 0; e < seen.size(); ++e)
        for (const auto& t : data.train.at(seen[e])) sources.emplace_back(&t, p.labels[e]);
    std::vector<std::pair<std::size_t, int>> frames;  // (source, time)
    for (std::size_t s = 0; s < sources.size(); ++s)
        for (int t = 0; t < sources[s].first->states.dim(0); ++t) frames.emplace_back(s, t);
    Rng rng(derive_seed(cfg.seed, "prompter_frames"));
    const std::size_t keep = std::min<std::size_t>(frames.size(), static_cast<std::size_t>(cfg.max_examples));
    for (std::size_t i = 0; i < keep; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.below(frames.size() - i));
        std::swap(frames[i], frames[j]);
    }

    Tensor first = featurize_frame(sources[frames[0].first].first->frame(frames[0].second));
    p.feat_dim = first.dim(0);
    Tensor Xm({static_cast<int>(keep), p.feat_dim});
    std::vector<double> ym(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        Tensor f = featurize_frame(sources[frames[i].first].first->frame(frames[i].second));
        std::copy(f.data(), f.data() + f.size(), Xm.data() + static_cast<std::int64_t>(i) * p.feat_dim);
        ym[i] = sources[frames[i].first].second;
    }
    SvrConfig scfg;
    scfg.C = cfg.svr_c;
    scfg.tol = cfg.svr_tol;
    p.svr = fit_svr(Xm, ym, scfg);
    return p;
}

inline double predict_label(const Prompter& p, const Tensor& frame) {
    return svr_predict(p.svr, featurize_frame(frame));
}

// ---- persistence: structured text + binary coefficients ----------------------------

inline void save_prompter(const Prompter& p, const std::string& json_path, const std::string& bin_path) {
    nlohmann::json j;
    j["version"] = 1;
    j["arch_id"] = hex64(p.arch_id);
    j["env_ids"] = p.env_ids;
    j["labels"] = p.labels;
    j["pca"] = {{"mean_row", p.pca.mean_row}, {"direction", p.pca.direction}, {"evr", p.pca.evr}};
    j["feat_dim"] = p.feat_dim;
    j["svr"] = {{"kernel", p.svr.kernel == SvrKernel::Rbf ? "rbf" : "linear"},
                {"gamma", p.svr.gamma},
                {"epsilon", p.svr.epsilon},
                {"C", p.svr.C},
                {"bias", p.svr.bias},
                {"n_sv", p.svr.sv.dim(0)}};
    std::ofstream out(json_path);
    if (!out) throw IoError("cannot write " + json_path);
    out << j.dump(2) << "\n";
    out.close();

    BinaryWriter w(bin_path);
    w.magic("ENVSVR1\0");
    w.u32(1);
    w.tensor(p.svr.sv);
    w.u32(static_cast<std::uint32_t>(p.svr.coef.size()));
    for (double c : p.svr.coef) w.f64(c);
    w.crc_trailer();
    w.close();
}

inline Prompter load_prompter(const std::string& json_path, const std::string& bin_path) {
    std::ifstream in(json_path);
    if (!in) throw IoError("cannot read " + json_path);
    nlohmann::json j;
    try {
        in >> j;
        Prompter p;
        if (j.at("version").get<int>() != 1) throw IoError("prompter " + json_path + ": unsupported version");
        p.arch_id = parse_hex64(j.at("arch_id").get<std::string>());
        p.env_ids = j.at("env_ids").get<std::vector<int>>();
        p.labels = j.at("labels").get<std::vector<double>>();
        p.pca.mean_row = j.at("pca").at("mean_row").get<std::vector<double>>();
        p.pca.direction = j.at("pca").at("direction").get<std::vector<double>>();
        p.pca.evr = j.at("pca").at("evr").get<double>();
        p.feat_dim = j.at("feat_dim").get<int>();
        std::string kern = j.at("svr").at("kernel").get<std::string>();
        if (kern != "rbf" && kern != "linear") throw IoError("prompter " + json_path + ": unknown kernel " + kern);
        p.svr.kernel = kern == "rbf" ? SvrKernel::Rbf : SvrKernel::Linear;
        p.svr.gamma = j.at("svr").at("gamma").get<double>();
        p.svr.epsilon = j.at("svr").at("epsilon").get<double>();
        p.svr.C = j.at("svr").at("C").get<double>();
        p.svr.bias = j.at("svr").at("bias").get<double>();

        BinaryReader r(bin_path);
        r.expect_magic("ENVSVR1\0");
        if (r.u32() != 1) throw IoError("prompter " + bin_path + ": unsupported version");
        p.svr.sv = r.tensor();
        std::uint32_t nc = r.u32();
        for (std::uint32_t i = 0; i < nc; ++i) p.svr.coef.push_back(r.f64());
        r.check_crc_trailer();
        if (static_cast<int>(nc) != p.svr.sv.dim(0))
            throw IoError("prompter " + bin_path + ": coefficient count does not match support vectors");
        return p;
    } catch (const nlohmann::json::exception&) {
        throw IoError("prompter " + json_path + ": corrupt description");
    }
}

}  // namespace envgen
