#pragma once

// Symbolic distillation of planar neural-ODE experts: evaluate the expert's
// derivative head along its own rollout, regress the samples onto a fixed
// quadratic dictionary with sequentially-thresholded least squares, and read
// off a sparse closed-form vector field.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/expert.hpp"
#include "envgen/tensor.hpp"

namespace envgen {

// Dictionary over a planar state (x, y): column order is fixed and public so
// coefficient rows can be named in reports.
constexpr int kSindyTerms = 6;

inline const char* sindy_term_name(int k) {
    static const char* names[kSindyTerms] = {"1", "x", "y", "x^2", "x*y", "y^2"};
    if (k < 0 || k >= kSindyTerms) throw ConfigError("sindy_term_name: index out of range");
    return names[k];
}

// states [N, 2] -> dictionary matrix [N, 6] with columns {1, x, y, x^2, xy, y^2}.
inline Tensor sindy_dictionary(const Tensor& states) {
    if (states.rank() != 2 || states.dim(1) != 2)
        throw ShapeError("sindy_dictionary: expected [N, 2] states, got " + shape_str(states.shape()));
    const int n = states.dim(0);
    if (n < 1) throw ShapeError("sindy_dictionary: need at least one state");
    Tensor theta({n, kSindyTerms});
    for (int i = 0; i < n; ++i) {
        const double x = states[2 * i];
        const double y = states[2 * i + 1];
        float* row = theta.data() + static_cast<std::int64_t>(i) * kSindyTerms;
        row[0] = 1.0f;
        row[1] = static_cast<float>(x);
        row[2] = static_cast<float>(y);
        row[3] = static_cast<float>(x * x);
        row[4] = static_cast<float>(x * y);
        row[5] = static_cast<float>(y * y);
    }
    return theta;
}

struct StlsqConfig {
    double threshold = 0.05;  // coefficients below this magnitude are pruned
    int n_iter = 10;          // prune/refit rounds
};

namespace distill_detail {

// Least-squares solve restricted to the active columns; returns the full-width
// coefficient vector with inactive entries zero.
inline Eigen::VectorXd solve_active(const Eigen::MatrixXd& theta, const Eigen::VectorXd& rhs,
                                    const std::vector<int>& active) {
    Eigen::VectorXd full = Eigen::VectorXd::Zero(theta.cols());
    if (active.empty()) return full;
    Eigen::MatrixXd sub(theta.rows(), static_cast<Eigen::Index>(active.size()));
    for (std::size_t j = 0; j < active.size(); ++j) sub.col(static_cast<Eigen::Index>(j)) = theta.col(active[j]);
    Eigen::VectorXd c = sub.colPivHouseholderQr().solve(rhs);
    for (std::size_t j = 0; j < active.size(); ++j) full[active[j]] = c[static_cast<Eigen::Index>(j)];
    return full;
}

}  // namespace distill_detail

// Sequentially-thresholded least squares: theta [N, K], targets [N, D],
// returns coefficients [K, D].  Starts from the ordinary least-squares fit,
// then alternately prunes coefficients below the threshold and refits on the
// surviving columns.  A threshold of zero therefore reproduces plain least
// squares.  Throws NumericError when the dictionary is column-rank-deficient
// (any column subset of a full-column-rank matrix stays full rank, so the
// refits cannot degenerate afterwards).
inline Tensor stlsq(const Tensor& theta_t, const Tensor& targets_t, const StlsqConfig& cfg = {}) {
    if (theta_t.rank() != 2 || targets_t.rank() != 2)
        throw ShapeError("stlsq: dictionary and targets must be rank-2");
    if (theta_t.dim(0) != targets_t.dim(0))
        throw ShapeError("stlsq: row count mismatch between dictionary and targets");
    if (cfg.threshold < 0.0) throw ConfigError("stlsq: threshold must be non-negative");
    if (cfg.n_iter < 1) throw ConfigError("stlsq: n_iter must be >= 1");
    const int n = theta_t.dim(0), k = theta_t.dim(1), d = targets_t.dim(1);
    if (n < k) throw NumericError("stlsq: fewer samples than dictionary terms");

    Eigen::MatrixXd theta(n, k);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) theta(i, j) = theta_t[static_cast<std::int64_t>(i) * k + j];
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(theta);
    if (qr.rank() < k)
        throw NumericError("stlsq: dictionary matrix is rank-deficient (rank " + std::to_string(qr.rank()) +
                           " of " + std::to_string(k) + "); states do not excite every term");

    Tensor out = Tensor::zeros({k, d});
    for (int col = 0; col < d; ++col) {
        Eigen::VectorXd rhs(n);
        for (int i = 0; i < n; ++i) rhs[i] = targets_t[static_cast<std::int64_t>(i) * d + col];
        std::vector<int> active(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) active[static_cast<std::size_t>(j)] = j;
        Eigen::VectorXd c = qr.solve(rhs);
        for (int it = 0; it < cfg.n_iter; ++it) {
            std::vector<int> next;
            for (int j : active)
                if (std::abs(c[j]) >= cfg.threshold) next.push_back(j);
            const bool changed = next.size() != active.size();
            active = std::move(next);
            if (!changed) break;
            c = distill_detail::solve_active(theta, rhs, active);
        }
        Eigen::VectorXd final_c = Eigen::VectorXd::Zero(k);
        for (int j : active) final_c[j] = c[j];
        for (int j = 0; j < k; ++j) out[static_cast<std::int64_t>(j) * d + col] = static_cast<float>(final_c[j]);
    }
    return out;
}

struct SindyModel {
    Tensor coeffs;             // [kSindyTerms, 2]
    int rollout_steps = 0;     // samples actually used (rollout may truncate)
    bool truncated = false;
};

// Human-readable form of one output dimension, e.g. "+0.500*x -0.700*x*y".
inline std::string sindy_equation(const Tensor& coeffs, int dim) {
    if (coeffs.rank() != 2 || coeffs.dim(0) != kSindyTerms)
        throw ShapeError("sindy_equation: expected [6, D] coefficients");
    if (dim < 0 || dim >= coeffs.dim(1)) throw ConfigError("sindy_equation: dimension out of range");
    std::string s;
    for (int k = 0; k < kSindyTerms; ++k) {
        const double c = coeffs[static_cast<std::int64_t>(k) * coeffs.dim(1) + dim];
        if (c == 0.0) continue;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%+.4f", c);
        if (!s.empty()) s += ' ';
        s += buf;
        if (k > 0) {
            s += '*';
            s += sindy_term_name(k);
        }
    }
    return s.empty() ? "0" : s;
}

// Distill one planar expert: roll it forward from `initial_frame`, query its
// derivative head on the visited states, and fit the sparse dictionary model.
inline SindyModel distill_expert(const ArchSpec& arch, const FlatWeights& w, const Tensor& initial_frame,
                                 int steps, double dt, const StlsqConfig& cfg = {}) {
    if (steps < kSindyTerms + 2) throw ConfigError("distill_expert: rollout too short to identify 6 terms");
    Trajectory tr = rollout(arch, w, initial_frame, steps, dt);
    if (tr.states.rank() != 2 || tr.states.dim(1) != 2)
        throw ShapeError("distill_expert: expert state must be planar, got " + shape_str(tr.states.shape()));
    SindyModel m;
    m.truncated = tr.truncated;
    m.rollout_steps = tr.steps();
    if (tr.states.dim(0) < kSindyTerms + 2)
        throw NumericError("distill_expert: rollout diverged after " + std::to_string(tr.steps()) +
                           " steps; too few samples for the dictionary fit");
    Tensor derivs = expert_derivative(arch, w, tr.states);
    m.coeffs = stlsq(sindy_dictionary(tr.states), derivs, cfg);
    return m;
}

}  // namespace envgen
