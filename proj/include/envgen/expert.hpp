#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/dynamics.hpp"
#include "envgen/graph.hpp"
#include "envgen/io.hpp"
#include "envgen/optim.hpp"
#include "envgen/rng.hpp"
#include "envgen/tensor.hpp"

namespace envgen {

enum class LayerKind { Linear, Conv2d };
enum class Activation { None, Tanh, Gelu };
enum class Integrator { Rk4NeuralOde, NextFrame };

struct LayerSpec {
    LayerKind kind = LayerKind::Linear;
    int in = 0, out = 0;  // widths (linear) or channels (conv)
    int kernel = 0;       // conv only, odd
    Activation act = Activation::None;
};

// Output of layer `from` (post-activation) enters layer `to` pre-activation
// through its own learnable 1x1 path (conv weights, no bias).
struct SkipEdge {
    int from = 0, to = 0;
};

struct ArchSpec {
    std::string name;
    std::vector<LayerSpec> layers;
    std::vector<SkipEdge> skips;
    Integrator integrator = Integrator::Rk4NeuralOde;
    Pad pad = Pad::Circular;  // conv padding

    void validate() const {
        if (layers.empty()) throw ConfigError("arch has no layers");
        for (std::size_t i = 0; i + 1 < layers.size(); ++i)
            if (layers[i].out != layers[i + 1].in)
                throw ConfigError("arch " + name + ": layer " + std::to_string(i) + " output width " +
                                  std::to_string(layers[i].out) + " != next input " +
                                  std::to_string(layers[i + 1].in));
        for (const auto& l : layers) {
            if (l.in <= 0 || l.out <= 0) throw ConfigError("arch " + name + ": non-positive layer width");
            if (l.kind == LayerKind::Conv2d && (l.kernel <= 0 || l.kernel % 2 == 0))
                throw ConfigError("arch " + name + ": conv kernel must be odd and positive");
        }
        for (const auto& s : skips) {
            if (s.from < 0 || s.to <= s.from || s.to >= static_cast<int>(layers.size()))
                throw ConfigError("arch " + name + ": skip edge must connect an earlier layer to a later one");
            if (layers[s.to].kind != LayerKind::Conv2d)
                throw ConfigError("arch " + name + ": skip merge layer must be conv");
        }
        if (integrator == Integrator::Rk4NeuralOde)
            for (const auto& l : layers)
                if (l.kind != LayerKind::Linear)
                    throw ConfigError("arch " + name + ": neural-ode integrator requires linear layers");
    }

    std::string describe() const {
        std::string s = name + ";";
        for (const auto& l : layers)
            s += (l.kind == LayerKind::Linear ? "lin" : "conv") + std::to_string(l.in) + "x" +
                 std::to_string(l.out) + "k" + std::to_string(l.kernel) + "a" +
                 std::to_string(static_cast<int>(l.act)) + ";";
        for (const auto& e : skips) s += "skip" + std::to_string(e.from) + ">" + std::to_string(e.to) + ";";
        s += integrator == Integrator::Rk4NeuralOde ? "rk4ode" : "nextframe";
        s += pad == Pad::Circular ? ";circ" : ";zero";
        return s;
    }
    std::uint64_t arch_id() const { return fnv1a64(describe()); }
};

enum class SegmentRole { Weight, Bias, Skip };

struct Segment {
    std::string name;
    int layer = 0;  // owning layer (merge layer for skip)
    SegmentRole role = SegmentRole::Weight;
    std::int64_t offset = 0;
    Shape shape;
    std::int64_t count() const { return numel(shape); }
};

struct Layout {
    std::vector<Segment> segments;
    std::int64_t total = 0;
};

// FlatWeights: every learnable value in one rank-1 tensor; the layout table
// maps each layer's weight/bias (plus skip paths) to an (offset, shape) span.
using FlatWeights = Tensor;

inline Layout make_layout(const ArchSpec& arch) {
    arch.validate();
    Layout lay;
    std::int64_t off = 0;
    auto push = [&](std::string name, int layer, SegmentRole role, Shape shape) {
        Segment s{std::move(name), layer, role, off, std::move(shape)};
        off += s.count();
        lay.segments.push_back(std::move(s));
    };
    for (int i = 0; i < static_cast<int>(arch.layers.size()); ++i) {
        const LayerSpec& l = arch.layers[i];
        std::string base = "layer" + std::to_string(i);
        if (l.kind == LayerKind::Linear) {
            push(base + ".weight", i, SegmentRole::Weight, {l.out, l.in});
        } else {
            push(base + ".weight", i, SegmentRole::Weight, {l.out, l.in, l.kernel, l.kernel});
        }
        push(base + ".bias", i, SegmentRole::Bias, {l.out});
        for (const auto& e : arch.skips)
            if (e.to == i)
                push(base + ".skip", i, SegmentRole::Skip, {l.out, arch.layers[e.from].out, 1, 1});
    }
    lay.total = off;
    return lay;
}

inline int64_t param_count(const ArchSpec& arch) { return make_layout(arch).total; }

// canonical predator-prey expert: 2 -> 128 -> 2, tanh hidden, derivative head
inline ArchSpec lv_mlp_arch(int hidden = 128) {
    ArchSpec a;
    a.name = "lv_mlp";
    a.layers = {{LayerKind::Linear, 2, hidden, 0, Activation::Tanh}, {LayerKind::Linear, hidden, 2, 0, Activation::None}};
    a.integrator = Integrator::Rk4NeuralOde;
    return a;
}

// canonical field expert: 4 convs 2->16->16->16->2, 3x3, gelu, one skip 0->2
inline ArchSpec field_cnn_arch(int ch = 16, bool with_skip = true) {
    ArchSpec a;
    a.name = with_skip ? "field_cnn" : "field_cnn_plain";
    a.layers = {{LayerKind::Conv2d, 2, ch, 3, Activation::Gelu},
                {LayerKind::Conv2d, ch, ch, 3, Activation::Gelu},
                {LayerKind::Conv2d, ch, ch, 3, Activation::Gelu},
                {LayerKind::Conv2d, ch, 2, 3, Activation::None}};
    if (with_skip) a.skips = {{0, 2}};
    a.integrator = Integrator::NextFrame;
    a.pad = Pad::Circular;
    return a;
}

enum class InitScheme { FanIn, Zero };

inline FlatWeights build_expert(const ArchSpec& arch, InitScheme init, std::uint64_t seed) {
    Layout lay = make_layout(arch);
    FlatWeights w = Tensor::zeros({static_cast<int>(lay.total)});
    if (init == InitScheme::Zero) return w;
    Rng rng(derive_seed(seed, "init"));
    for (const auto& seg : lay.segments) {
        const LayerSpec& l = arch.layers[seg.layer];
        std::int64_t fan_in;
        switch (seg.role) {
            case SegmentRole::Weight:
            case SegmentRole::Bias:
                fan_in = l.kind == LayerKind::Linear ? l.in : static_cast<std::int64_t>(l.in) * l.kernel * l.kernel;
                break;
            case SegmentRole::Skip:
                fan_in = seg.shape[1];
                break;
        }
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < seg.count(); ++i)
            w[seg.offset + i] = static_cast<float>(rng.uniform(-bound, bound));
    }
    return w;
}

inline Tensor segment_view(const FlatWeights& w, const Segment& seg) {
    Tensor t(seg.shape);
    std::copy(w.data() + seg.offset, w.data() + seg.offset + seg.count(), t.data());
    return t;
}

inline std::map<std::string, Tensor> params_from_flat(const ArchSpec& arch, const FlatWeights& w) {
    Layout lay = make_layout(arch);
    if (w.size() != lay.total)
        throw ShapeError("flat weights length " + std::to_string(w.size()) + " != layout total " +
                         std::to_string(lay.total));
    std::map<std::string, Tensor> out;
    for (const auto& seg : lay.segments) out.emplace(seg.name, segment_view(w, seg));
    return out;
}

inline FlatWeights flat_from_params(const ArchSpec& arch, const std::map<std::string, Tensor>& params) {
    Layout lay = make_layout(arch);
    FlatWeights w({static_cast<int>(lay.total)});
    for (const auto& seg : lay.segments) {
        const Tensor& t = params.at(seg.name);
        if (t.shape() != seg.shape) throw ShapeError("segment " + seg.name + " shape mismatch");
        std::copy(t.data(), t.data() + seg.count(), w.data() + seg.offset);
    }
    return w;
}

// ---- graph construction ----------------------------------------------------

// Core net: weight segments are pre-existing graph nodes, so the same builder
// serves plain training (segments are inputs) and the weight-VAE functional
// loss (segments are decoded tensors inside a larger graph).
inline int build_net(Graph& g, const ArchSpec& arch, const std::map<std::string, int>& wnodes, int x) {
    const Layout lay = make_layout(arch);
    std::map<int, int> skip_src;  // merge layer -> source activation node
    std::vector<int> acts;
    for (int i = 0; i < static_cast<int>(arch.layers.size()); ++i) {
        const LayerSpec& l = arch.layers[i];
        std::string base = "layer" + std::to_string(i);
        int wn = wnodes.at(base + ".weight");
        int bn = wnodes.at(base + ".bias");
        int y;
        if (l.kind == LayerKind::Linear) {
            y = g.matmul(x, wn, false, true);
            y = g.add(y, bn);
        } else {
            y = g.conv2d(x, wn, arch.pad);
            y = g.add(y, g.reshape(bn, {l.out, 1, 1}));
        }
        for (const auto& e : arch.skips)
            if (e.to == i) y = g.add(y, g.conv2d(acts[e.from], wnodes.at(base + ".skip"), arch.pad));
        switch (l.act) {
            case Activation::Tanh: y = g.tanh(y); break;
            case Activation::Gelu: y = g.gelu(y); break;
            case Activation::None: break;
        }
        acts.push_back(y);
        x = y;
    }
    return x;
}

// Full expert step: neural-ODE experts wrap the net in an RK4 update, field
// experts emit the next frame directly.
inline int build_expert_step(Graph& g, const ArchSpec& arch, const std::map<std::string, int>& wnodes, int state,
                             double dt) {
    if (arch.integrator == Integrator::NextFrame) return build_net(g, arch, wnodes, state);
    float h = static_cast<float>(dt);
    int k1 = build_net(g, arch, wnodes, state);
    int k2 = build_net(g, arch, wnodes, g.add(state, g.scale(k1, 0.5f * h)));
    int k3 = build_net(g, arch, wnodes, g.add(state, g.scale(k2, 0.5f * h)));
    int k4 = build_net(g, arch, wnodes, g.add(state, g.scale(k3, h)));
    int sum = g.add(g.add(k1, g.scale(k2, 2.0f)), g.add(g.scale(k3, 2.0f), k4));
    return g.add(state, g.scale(sum, h / 6.0f));
}

struct ExpertPlan {
    Graph g;
    std::string state_name = "state";
    std::string target_name = "target";
    int pred = -1;
    int loss = -1;  // -1 when built without a loss head
    Shape state_shape;
};

inline Shape batched(const Shape& frame, int batch) {
    Shape s{batch};
    s.insert(s.end(), frame.begin(), frame.end());
    return s;
}

inline ExpertPlan make_expert_plan(const ArchSpec& arch, const Shape& frame_shape, int batch, double dt,
                                   bool with_loss, bool weight_grads) {
    ExpertPlan plan;
    plan.state_shape = batched(frame_shape, batch);
    Layout lay = make_layout(arch);
    std::map<std::string, int> wnodes;
    for (const auto& seg : lay.segments) wnodes[seg.name] = plan.g.input(seg.name, seg.shape, weight_grads);
    int state = plan.g.input(plan.state_name, plan.state_shape, false);
    plan.pred = build_expert_step(plan.g, arch, wnodes, state, dt);
    if (with_loss) {
        int target = plan.g.input(plan.target_name, plan.state_shape, false);
        plan.loss = plan.g.mean_all(plan.g.square(plan.g.sub(plan.pred, target)));
    }
    return plan;
}

// one-shot next-state prediction (rollout/analysis convenience)
inline Tensor expert_step(const ArchSpec& arch, const FlatWeights& w, const Tensor& frame, double dt) {
    ExpertPlan plan = make_expert_plan(arch, frame.shape(), 1, dt, false, false);
    std::unordered_map<std::string, Tensor> binds;
    for (auto& [k, v] : params_from_flat(arch, w)) binds.emplace(k, std::move(v));
    binds.emplace(plan.state_name, frame.reshaped(plan.state_shape));
    Evaluation ev = forward_eval(plan.g, binds);
    return ev.value(plan.pred).reshaped(frame.shape());
}

// derivative head of a neural-ODE expert (used by symbolic distillation)
inline Tensor expert_derivative(const ArchSpec& arch, const FlatWeights& w, const Tensor& states) {
    if (arch.integrator != Integrator::Rk4NeuralOde)
        throw ConfigError("expert_derivative: arch has no derivative head");
    Shape frame{states.dim(-1)};
    int batch = static_cast<int>(states.size() / states.dim(-1));
    Graph g;
    std::map<std::string, int> wnodes;
    for (const auto& seg : make_layout(arch).segments) wnodes[seg.name] = g.input(seg.name, seg.shape, false);
    int x = g.input("state", batched(frame, batch), false);
    int d = build_net(g, arch, wnodes, x);
    std::unordered_map<std::string, Tensor> binds;
    for (auto& [k, v] : params_from_flat(arch, w)) binds.emplace(k, std::move(v));
    binds.emplace("state", states.reshaped(batched(frame, batch)));
    return forward_eval(g, binds).value(d).reshaped(states.shape());
}

// ---- training ----------------------------------------------------------------

struct TrainConfig {
    int epochs = 50;
    double lr = 1e-4;
    int batch = 32;
    std::uint64_t seed = 0;
};

struct TrainResult {
    FlatWeights w;
    double final_loss = 0.0;
    std::vector<double> curve;  // mean batch loss per epoch
};

namespace detail {

struct PairRef {
    const Trajectory* traj;
    int t;
};

inline std::vector<PairRef> one_step_pairs(const std::vector<const Trajectory*>& trajs) {
    std::vector<PairRef> pairs;
    for (const Trajectory* tr : trajs)
        for (int t = 0; t < tr->steps(); ++t) pairs.push_back({tr, t});
    if (pairs.empty()) throw ConfigError("no one-step training pairs available");
    return pairs;
}

inline void fill_batch(const std::vector<PairRef>& pairs, const std::vector<std::size_t>& order, std::size_t start,
                       int batch, Tensor& x, Tensor& y) {
    std::int64_t fn = x.size() / batch;
    for (int b = 0; b < batch; ++b) {
        const PairRef& p = pairs[order[start + b]];
        const float* base = p.traj->states.data() + static_cast<std::int64_t>(p.t) * fn;
        std::copy(base, base + fn, x.data() + b * fn);
        std::copy(base + fn, base + 2 * fn, y.data() + b * fn);
    }
}

}  // namespace detail

inline TrainResult train_expert(const ArchSpec& arch, const FlatWeights& w0,
                                const std::vector<const Trajectory*>& trajs, const TrainConfig& cfg) {
    TrainResult res;
    res.w = w0;
    if (cfg.epochs == 0) return res;
    if (trajs.empty()) throw ConfigError("train_expert: no trajectories");
    const double dt = trajs[0]->dt;
    Shape frame(trajs[0]->states.shape().begin() + 1, trajs[0]->states.shape().end());
    auto pairs = detail::one_step_pairs(trajs);
    int batch = static_cast<int>(std::min<std::size_t>(pairs.size(), static_cast<std::size_t>(cfg.batch)));

    ExpertPlan plan = make_expert_plan(arch, frame, batch, dt, true, true);
    ParamMap params;
    for (auto& [k, v] : params_from_flat(arch, res.w)) params.emplace(k, std::move(v));
    Adam opt({static_cast<float>(cfg.lr)});
    Rng rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    Tensor x(batched(frame, batch)), y(batched(frame, batch));
    res.curve.reserve(cfg.epochs);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            std::size_t j = i + static_cast<std::size_t>(rng.below(order.size() - i));
            std::swap(order[i], order[j]);
        }
        double sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start + batch <= pairs.size(); start += batch) {
            detail::fill_batch(pairs, order, start, batch, x, y);
            std::unordered_map<std::string, Tensor> binds;
            for (const auto& [k, v] : params) binds.emplace(k, v);
            binds.emplace(plan.state_name, x);
            binds.emplace(plan.target_name, y);
            Evaluation ev = forward_eval(plan.g, binds);
            Gradients gr = grad(plan.g, ev, plan.loss);
            ParamMap gmap;
            for (const auto& [k, v] : params) gmap.emplace(k, gr.wrt(k));
            opt.step(params, gmap);
            sum += ev.value(plan.loss)[0];
            ++batches;
        }
        res.curve.push_back(sum / batches);
    }
    res.final_loss = res.curve.back();
    res.w = flat_from_params(arch, params);
    return res;
}

// mean one-step prediction error over every consecutive pair (eval mode)
inline double one_step_mse(const ArchSpec& arch, const FlatWeights& w, const std::vector<const Trajectory*>& trajs) {
    if (trajs.empty()) throw ConfigError("one_step_mse: no trajectories");
    const double dt = trajs[0]->dt;
    Shape frame(trajs[0]->states.shape().begin() + 1, trajs[0]->states.shape().end());
    auto pairs = detail::one_step_pairs(trajs);
    int batch = static_cast<int>(std::min<std::size_t>(pairs.size(), 256));
    ExpertPlan plan = make_expert_plan(arch, frame, batch, dt, true, false);
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Tensor x(batched(frame, batch)), y(batched(frame, batch));
    double sum = 0.0;
    std::int64_t counted = 0;
    std::unordered_map<std::string, Tensor> wparams;
    for (auto& [k, v] : params_from_flat(arch, w)) wparams.emplace(k, std::move(v));
    for (std::size_t start = 0; start + batch <= pairs.size(); start += batch) {
        detail::fill_batch(pairs, order, start, batch, x, y);
        std::unordered_map<std::string, Tensor> binds = wparams;
        binds.emplace(plan.state_name, x);
        binds.emplace(plan.target_name, y);
        sum += forward_eval(plan.g, binds).value(plan.loss)[0] * batch;
        counted += batch;
    }
    // remainder pairs (if any) evaluated one at a time
    if (counted < static_cast<std::int64_t>(pairs.size())) {
        ExpertPlan p1 = make_expert_plan(arch, frame, 1, dt, true, false);
        Tensor x1(batched(frame, 1)), y1(batched(frame, 1));
        for (std::size_t i = counted; i < pairs.size(); ++i) {
            detail::fill_batch(pairs, order, i, 1, x1, y1);
            std::unordered_map<std::string, Tensor> binds = wparams;
            binds.emplace(p1.state_name, x1);
            binds.emplace(p1.target_name, y1);
            sum += forward_eval(p1.g, binds).value(p1.loss)[0];
            ++counted;
        }
    }
    return sum / counted;
}

// Autoregressive prediction. A non-finite state mid-rollout truncates the
// trajectory and sets the flag; evaluation treats the remainder as maximal error.
inline Trajectory rollout(const ArchSpec& arch, const FlatWeights& w, const Tensor& initial_frame, int steps,
                          double dt, int env_id = -1) {
    if (steps < 1) throw ConfigError("rollout: steps must be >= 1");
    ExpertPlan plan = make_expert_plan(arch, initial_frame.shape(), 1, dt, false, false);
    std::unordered_map<std::string, Tensor> wparams;
    for (auto& [k, v] : params_from_flat(arch, w)) wparams.emplace(k, std::move(v));

    Trajectory out;
    out.dt = dt;
    out.env_id = env_id;
    std::vector<float> frames(initial_frame.data(), initial_frame.data() + initial_frame.size());
    Tensor cur = initial_frame.reshaped(plan.state_shape);
    int done = 0;
    for (int t = 0; t < steps; ++t) {
        std::unordered_map<std::string, Tensor> binds = wparams;
        binds.emplace(plan.state_name, cur);
        try {
            Evaluation ev = forward_eval(plan.g, binds);
            cur = ev.value(plan.pred);
        } catch (const NumericError&) {
            out.truncated = true;
            break;
        }
        frames.insert(frames.end(), cur.data(), cur.data() + cur.size());
        ++done;
    }
    Shape ts{done + 1};
    ts.insert(ts.end(), initial_frame.shape().begin(), initial_frame.shape().end());
    out.states = Tensor(ts, std::vector<float>(frames.begin(), frames.end()));
    return out;
}

}  // namespace envgen
