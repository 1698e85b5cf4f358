#pragma once

#include <cmath>
#include <map>
#include <string>

#include "envgen/common.hpp"
#include "envgen/tensor.hpp"

namespace envgen {

// Ordered so iteration (and therefore any float accumulation across params)
// is independent of insertion order.
using ParamMap = std::map<std::string, Tensor>;

struct AdamConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Bias-corrected update in place; grads may omit params (treated as zero
    // after the moment decay, i.e. the moments still shrink).
    void step(ParamMap& params, const ParamMap& grads) {
        ++t_;
        double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), t_);
        double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), t_);
        for (auto& [name, p] : params) {
            Tensor& m = moment(m_, name, p.shape());
            Tensor& v = moment(v_, name, p.shape());
            const Tensor* gp = nullptr;
            if (auto it = grads.find(name); it != grads.end()) {
                if (it->second.shape() != p.shape())
                    throw ShapeError("adam: gradient shape " + shape_str(it->second.shape()) +
                                     " mismatches parameter " + name + " " + shape_str(p.shape()));
                gp = &it->second;
            }
            for (std::int64_t i = 0; i < p.size(); ++i) {
                float g = gp ? (*gp)[i] : 0.0f;
                m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g * g;
                double mh = m[i] / bc1;
                double vh = v[i] / bc2;
                p[i] -= static_cast<float>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
            if (!p.all_finite()) throw NumericError("adam: non-finite parameter after update: " + name);
        }
    }

    long t() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    void set_lr(float lr) { cfg_.lr = lr; }

private:
    static Tensor& moment(ParamMap& store, const std::string& name, const Shape& shape) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor(shape)).first;
        else if (it->second.shape() != shape)
            throw ShapeError("adam: state shape mismatch for " + name);
        return it->second;
    }

    AdamConfig cfg_;
    long t_ = 0;
    ParamMap m_, v_;
};

// Exponential moving average of parameters, used by the diffusion trainer.
class EmaTracker {
public:
    explicit EmaTracker(float decay) : decay_(decay) {}

    void update(const ParamMap& params) {
        if (shadow_.empty()) {
            shadow_ = params;
            return;
        }
        for (const auto& [name, p] : params) {
            Tensor& s = shadow_.at(name);
            for (std::int64_t i = 0; i < p.size(); ++i)
                s[i] = decay_ * s[i] + (1.0f - decay_) * p[i];
        }
    }

    const ParamMap& shadow() const {
        if (shadow_.empty()) throw NumericError("ema: never updated");
        return shadow_;
    }
    bool empty() const { return shadow_.empty(); }

private:
    float decay_;
    ParamMap shadow_;
};

}  // namespace envgen
