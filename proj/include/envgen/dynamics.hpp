#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/rng.hpp"
#include "envgen/tensor.hpp"

namespace envgen {

enum class SystemId : std::uint32_t { LotkaVolterra = 1, LambdaOmega = 2 };

inline const char* system_name(SystemId s) {
    return s == SystemId::LotkaVolterra ? "lotka_volterra" : "lambda_omega";
}

// Fixed coefficients shared by every environment of a system.
constexpr double kLvAlpha = 0.5;
constexpr double kLvGamma = 0.5;
constexpr double kLoMu = 0.5;
constexpr double kLoDomainHalf = 10.0;  // domain [-10, 10]^2

struct EnvironmentSpec {
    SystemId system = SystemId::LotkaVolterra;
    int id = 0;
    std::vector<double> coeffs;  // LV: {beta, delta}; Lambda-Omega: {beta}
    bool seen = false;
};

struct Trajectory {
    Tensor states;  // time-major: LV [T+1, 2]; Lambda-Omega [T+1, 2, H, W]
    double dt = 0.0;
    int env_id = 0;
    bool truncated = false;  // rollout divergence flag; simulators always deliver full length
    int steps() const { return states.dim(0) - 1; }
    Tensor frame(int t) const {
        Shape fs(states.shape().begin() + 1, states.shape().end());
        Tensor f(fs);
        std::int64_t n = numel(fs);
        const float* src = states.data() + static_cast<std::int64_t>(t) * n;
        std::copy(src, src + n, f.data());
        return f;
    }
};

// One classic RK4 step in f64 for an autonomous system.
inline void rk4_step(std::vector<double>& y, double dt,
                     const std::function<void(const std::vector<double>&, std::vector<double>&)>& deriv,
                     std::vector<double>& k1, std::vector<double>& k2, std::vector<double>& k3,
                     std::vector<double>& k4, std::vector<double>& tmp) {
    const std::size_t n = y.size();
    deriv(y, k1);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k1[i];
    deriv(tmp, k2);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k2[i];
    deriv(tmp, k3);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + dt * k3[i];
    deriv(tmp, k4);
    for (std::size_t i = 0; i < n; ++i) y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

// Convenience wrapper allocating scratch; fine for small states.
inline void rk4_step(std::vector<double>& y, double dt,
                     const std::function<void(const std::vector<double>&, std::vector<double>&)>& deriv) {
    std::vector<double> k1(y.size()), k2(y.size()), k3(y.size()), k4(y.size()), tmp(y.size());
    rk4_step(y, dt, deriv, k1, k2, k3, k4, tmp);
}

inline int horizon_steps(double T, double dt) {
    if (dt <= 0.0) throw ConfigError("dt must be positive");
    return static_cast<int>(std::floor(T / dt + 1e-9));
}

inline void lv_deriv(double beta, double delta, const std::vector<double>& s, std::vector<double>& d) {
    d[0] = kLvAlpha * s[0] - beta * s[0] * s[1];
    d[1] = delta * s[0] * s[1] - kLvGamma * s[1];
}

inline Trajectory simulate_lv(const EnvironmentSpec& env, double x0, double y0, double dt, double T) {
    if (env.system != SystemId::LotkaVolterra || env.coeffs.size() != 2)
        throw ConfigError("simulate_lv: environment is not a Lotka-Volterra spec");
    if (x0 <= 0.0 || y0 <= 0.0) throw ConfigError("simulate_lv: initial populations must be positive");
    const double beta = env.coeffs[0], delta = env.coeffs[1];
    const int steps = horizon_steps(T, dt);
    Trajectory out;
    out.dt = dt;
    out.env_id = env.id;
    out.states = Tensor({steps + 1, 2});
    std::vector<double> s{x0, y0}, k1(2), k2(2), k3(2), k4(2), tmp(2);
    auto deriv = [beta, delta](const std::vector<double>& y, std::vector<double>& d) { lv_deriv(beta, delta, y, d); };
    out.states[0] = static_cast<float>(s[0]);
    out.states[1] = static_cast<float>(s[1]);
    for (int t = 1; t <= steps; ++t) {
        rk4_step(s, dt, deriv, k1, k2, k3, k4, tmp);
        if (std::abs(s[0]) > 1e6 || std::abs(s[1]) > 1e6 || !std::isfinite(s[0]) || !std::isfinite(s[1]))
            throw NumericError("simulate_lv: blowup in env " + std::to_string(env.id) + " at step " +
                               std::to_string(t));
        out.states[2 * t] = static_cast<float>(s[0]);
        out.states[2 * t + 1] = static_cast<float>(s[1]);
    }
    return out;
}

namespace detail {

// du/dt = mu*Lap(u) + (1 - u^2 - v^2)*u + beta*(u^2 + v^2)*v
// dv/dt = mu*Lap(v) + (1 - u^2 - v^2)*v - beta*(u^2 + v^2)*u
// 5-point Laplacian, periodic wrap, grid spacing h = 20/H.
struct LambdaOmegaField {
    int h, w;
    double beta, inv_h2;

    void operator()(const std::vector<double>& s, std::vector<double>& d) const {
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        const double* u = s.data();
        const double* v = s.data() + hw;
        double* du = d.data();
        double* dv = d.data() + hw;
        for (int i = 0; i < h; ++i) {
            int up = (i == 0 ? h - 1 : i - 1) * w;
            int dn = (i == h - 1 ? 0 : i + 1) * w;
            int row = i * w;
            for (int j = 0; j < w; ++j) {
                int lf = j == 0 ? w - 1 : j - 1;
                int rt = j == w - 1 ? 0 : j + 1;
                std::size_t c = static_cast<std::size_t>(row + j);
                double lap_u = (u[up + j] + u[dn + j] + u[row + lf] + u[row + rt] - 4.0 * u[c]) * inv_h2;
                double lap_v = (v[up + j] + v[dn + j] + v[row + lf] + v[row + rt] - 4.0 * v[c]) * inv_h2;
                double a2 = u[c] * u[c] + v[c] * v[c];
                du[c] = kLoMu * lap_u + (1.0 - a2) * u[c] + beta * a2 * v[c];
                dv[c] = kLoMu * lap_v + (1.0 - a2) * v[c] - beta * a2 * u[c];
            }
        }
    }
};

}  // namespace detail

inline Trajectory simulate_lambda_omega(const EnvironmentSpec& env, const Tensor& field0, double dt, double T) {
    if (env.system != SystemId::LambdaOmega || env.coeffs.size() != 1)
        throw ConfigError("simulate_lambda_omega: environment is not a Lambda-Omega spec");
    if (field0.rank() != 3 || field0.dim(0) != 2 || field0.dim(1) != field0.dim(2))
        throw ShapeError("simulate_lambda_omega: field must be [2, H, H], got " + shape_str(field0.shape()));
    const int H = field0.dim(1), W = field0.dim(2);
    const double hspace = 2.0 * kLoDomainHalf / H;
    const int steps = horizon_steps(T, dt);
    detail::LambdaOmegaField deriv{H, W, env.coeffs[0], 1.0 / (hspace * hspace)};

    Trajectory out;
    out.dt = dt;
    out.env_id = env.id;
    out.states = Tensor({steps + 1, 2, H, W});
    const std::size_t n = static_cast<std::size_t>(2) * H * W;
    std::vector<double> s(n), k1(n), k2(n), k3(n), k4(n), tmp(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = field0[static_cast<std::int64_t>(i)];
    auto record = [&](int t) {
        float* dst = out.states.data() + static_cast<std::int64_t>(t) * static_cast<std::int64_t>(n);
        for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(s[i]);
    };
    record(0);
    double prev_max = 0.0;
    for (double x : s) prev_max = std::max(prev_max, std::abs(x));
    for (int t = 1; t <= steps; ++t) {
        rk4_step(s, dt, std::cref(deriv), k1, k2, k3, k4, tmp);
        double cur_max = 0.0;
        for (double x : s) {
            if (!std::isfinite(x))
                throw NumericError("simulate_lambda_omega: non-finite state in env " + std::to_string(env.id) +
                                   " at step " + std::to_string(t));
            cur_max = std::max(cur_max, std::abs(x));
        }
        // CFL-violation heuristic: an unstable scheme grows by orders of magnitude per step
        if (cur_max > 10.0 * prev_max + 1e-9)
            throw NumericError("simulate_lambda_omega: unstable step (growth >10x) in env " +
                               std::to_string(env.id) + " at step " + std::to_string(t));
        prev_max = cur_max;
        record(t);
    }
    return out;
}

// Standard spiral seed: u = tanh(r) cos(theta - r), v = tanh(r) sin(theta - r),
// plus small seeded uniform noise so trajectories within an env are distinct.
inline Tensor lambda_omega_spiral_ic(int H, double noise_amp, Rng& rng) {
    Tensor f({2, H, H});
    const double hspace = 2.0 * kLoDomainHalf / H;
    for (int i = 0; i < H; ++i) {
        double y = -kLoDomainHalf + i * hspace;
        for (int j = 0; j < H; ++j) {
            double x = -kLoDomainHalf + j * hspace;
            double r = std::sqrt(x * x + y * y);
            double th = std::atan2(y, x);
            double u = std::tanh(r) * std::cos(th - r);
            double v = std::tanh(r) * std::sin(th - r);
            f[static_cast<std::int64_t>(i) * H + j] = static_cast<float>(u + noise_amp * rng.uniform(-1.0, 1.0));
            f[static_cast<std::int64_t>(H) * H + i * H + j] =
                static_cast<float>(v + noise_amp * rng.uniform(-1.0, 1.0));
        }
    }
    return f;
}

// Ground-truth continuation from an arbitrary stored frame; the evaluation
// harness uses this both as the truth reference and as an oracle "method".
inline Trajectory simulate_from(const EnvironmentSpec& env, const Tensor& frame, double dt, int steps) {
    if (env.system == SystemId::LotkaVolterra) {
        if (frame.size() != 2) throw ShapeError("simulate_from: LV frame must have 2 values");
        return simulate_lv(env, frame[0], frame[1], dt, steps * dt + dt * 0.5);
    }
    Tensor f0 = frame;
    if (f0.rank() == 3) {
        // already [2, H, W]
    } else {
        throw ShapeError("simulate_from: field frame must be rank 3");
    }
    return simulate_lambda_omega(env, f0, dt, steps * dt + dt * 0.5);
}

}  // namespace envgen
