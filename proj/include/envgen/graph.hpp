#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/tensor.hpp"

// Reverse-mode autodiff over a define-then-run graph with a fixed op set.
// Storage is f32; reductions, softmax denominators and normalization
// statistics accumulate in f64. Any non-finite node output raises eagerly.

namespace envgen {

enum class Op {
    Input,
    Constant,
    MatMul,
    Conv2d,
    Add,
    Mul,
    Tanh,
    Gelu,
    Exp,
    Clamp,
    Softmax,
    LayerNorm,
    Reshape,
    Concat,
    SumAll,
    MeanAll,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Constant: return "constant";
        case Op::MatMul: return "matmul";
        case Op::Conv2d: return "conv2d";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Tanh: return "tanh";
        case Op::Gelu: return "gelu";
        case Op::Exp: return "exp";
        case Op::Clamp: return "clamp";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::Reshape: return "reshape";
        case Op::Concat: return "concat";
        case Op::SumAll: return "sum_all";
        case Op::MeanAll: return "mean_all";
    }
    return "?";
}

enum class Pad { Zero, Circular };

constexpr float kLayerNormEps = 1e-5f;

struct Node {
    Op op = Op::Constant;
    std::string name;        // nonempty for inputs; optional label elsewhere
    Shape shape;
    std::vector<int> args;
    bool trans_a = false;    // matmul flags, applied to the last two dims
    bool trans_b = false;
    Pad pad = Pad::Zero;     // conv2d
    int axis = 0;            // concat
    bool clamp = false;      // exp: clamp input to [clamp_lo, clamp_hi] first
    float clamp_lo = 0.0f;
    float clamp_hi = 0.0f;
    bool requires_grad = false;
    Tensor value;            // constant payload
};

namespace detail {

// numpy-style right-aligned broadcast of two shapes
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* where) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        int da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(where) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `in` aligned to `out`'s rank, 0 on broadcast axes
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::int64_t> st(out.size(), 0);
    std::int64_t acc = 1;
    for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
        std::size_t oi = out.size() - in.size() + static_cast<std::size_t>(i);
        st[oi] = (in[static_cast<std::size_t>(i)] == 1 && out[oi] != 1) ? 0 : acc;
        acc *= in[static_cast<std::size_t>(i)];
    }
    return st;
}

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const EMat>;
using MapM = Eigen::Map<EMat>;

// C (+)= opA(A) * opB(B), all row-major
inline void gemm(const float* a, int ar, int ac, bool ta, const float* b, int br, int bc, bool tb, float* c,
                 bool accumulate) {
    int m = ta ? ac : ar, ka = ta ? ar : ac;
    int kb = tb ? bc : br, n = tb ? br : bc;
    if (ka != kb) throw ShapeError("gemm: inner dims disagree");
    MapC A(a, ar, ac), B(b, br, bc);
    MapM C(c, m, n);
    if (!ta && !tb) accumulate ? void(C.noalias() += A * B) : void(C.noalias() = A * B);
    else if (ta && !tb) accumulate ? void(C.noalias() += A.transpose() * B) : void(C.noalias() = A.transpose() * B);
    else if (!ta && tb) accumulate ? void(C.noalias() += A * B.transpose()) : void(C.noalias() = A * B.transpose());
    else accumulate ? void(C.noalias() += A.transpose() * B.transpose()) : void(C.noalias() = A.transpose() * B.transpose());
}

}  // namespace detail

class Graph {
public:
    int input(const std::string& name, Shape shape, bool differentiable = true) {
        if (name.empty()) throw ConfigError("graph input needs a name");
        if (input_ids_.count(name)) throw ConfigError("duplicate graph input: " + name);
        Node n;
        n.op = Op::Input;
        n.name = name;
        n.shape = std::move(shape);
        n.requires_grad = differentiable;
        int id = push(std::move(n));
        input_ids_[name] = id;
        return id;
    }

    int constant(Tensor value, std::string name = "") {
        Node n;
        n.op = Op::Constant;
        n.name = std::move(name);
        n.shape = value.shape();
        n.value = std::move(value);
        return push(std::move(n));
    }

    int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
        const Shape &sa = shape_of(a), &sb = shape_of(b);
        if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3)
            throw ShapeError("matmul: operands must be rank 2 or 3, got " + shape_str(sa) + " and " + shape_str(sb));
        int m = trans_a ? sa[sa.size() - 1] : sa[sa.size() - 2];
        int ka = trans_a ? sa[sa.size() - 2] : sa[sa.size() - 1];
        int kb = trans_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
        int n = trans_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
        if (ka != kb)
            throw ShapeError("matmul: inner dims disagree for " + shape_str(sa) + " x " + shape_str(sb));
        Shape out;
        if (sa.size() == 3 || sb.size() == 3) {
            int batch_a = sa.size() == 3 ? sa[0] : -1;
            int batch_b = sb.size() == 3 ? sb[0] : -1;
            if (batch_a >= 0 && batch_b >= 0 && batch_a != batch_b)
                throw ShapeError("matmul: batch dims disagree for " + shape_str(sa) + " x " + shape_str(sb));
            out = {std::max(batch_a, batch_b), m, n};
        } else {
            out = {m, n};
        }
        Node nd;
        nd.op = Op::MatMul;
        nd.shape = std::move(out);
        nd.args = {a, b};
        nd.trans_a = trans_a;
        nd.trans_b = trans_b;
        return push(std::move(nd));
    }

    // "same" convolution, stride 1, odd kernels; x:[N,Cin,H,W], k:[Cout,Cin,kh,kw]
    int conv2d(int x, int k, Pad pad = Pad::Zero) {
        const Shape &sx = shape_of(x), &sk = shape_of(k);
        if (sx.size() != 4 || sk.size() != 4)
            throw ShapeError("conv2d: need rank-4 input and kernel, got " + shape_str(sx) + " and " + shape_str(sk));
        if (sx[1] != sk[1])
            throw ShapeError("conv2d: channel mismatch, input " + shape_str(sx) + " kernel " + shape_str(sk));
        if (sk[2] % 2 == 0 || sk[3] % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
        if (sk[2] > sx[2] || sk[3] > sx[3]) throw ShapeError("conv2d: kernel larger than field");
        Node n;
        n.op = Op::Conv2d;
        n.shape = {sx[0], sk[0], sx[2], sx[3]};
        n.args = {x, k};
        n.pad = pad;
        return push(std::move(n));
    }

    int add(int a, int b) { return binary(Op::Add, a, b); }
    int mul(int a, int b) { return binary(Op::Mul, a, b); }
    int tanh(int a) { return unary(Op::Tanh, a); }
    int gelu(int a) { return unary(Op::Gelu, a); }
    int exp(int a) { return unary(Op::Exp, a); }
    int exp_clamped(int a, float lo, float hi) {
        int id = unary(Op::Exp, a);
        nodes_[static_cast<std::size_t>(id)].clamp = true;
        nodes_[static_cast<std::size_t>(id)].clamp_lo = lo;
        nodes_[static_cast<std::size_t>(id)].clamp_hi = hi;
        return id;
    }
    int clamp(int a, float lo, float hi) {
        if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
        int id = unary(Op::Clamp, a);
        nodes_[static_cast<std::size_t>(id)].clamp_lo = lo;
        nodes_[static_cast<std::size_t>(id)].clamp_hi = hi;
        return id;
    }
    int softmax(int a) { return unary(Op::Softmax, a); }    // last axis
    int layer_norm(int a) { return unary(Op::LayerNorm, a); }  // last axis, no affine

    int reshape(int a, Shape s) {
        if (numel(s) != numel(shape_of(a)))
            throw ShapeError("reshape " + shape_str(shape_of(a)) + " -> " + shape_str(s) + " changes element count");
        Node n;
        n.op = Op::Reshape;
        n.shape = std::move(s);
        n.args = {a};
        return push(std::move(n));
    }

    int concat(const std::vector<int>& parts, int axis) {
        if (parts.empty()) throw ShapeError("concat: no operands");
        Shape out = shape_of(parts[0]);
        int r = static_cast<int>(out.size());
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
        for (std::size_t i = 1; i < parts.size(); ++i) {
            const Shape& s = shape_of(parts[i]);
            if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
            for (int d = 0; d < r; ++d)
                if (d != axis && s[static_cast<std::size_t>(d)] != out[static_cast<std::size_t>(d)])
                    throw ShapeError("concat: shape mismatch off the concat axis");
            out[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
        }
        Node n;
        n.op = Op::Concat;
        n.shape = std::move(out);
        n.args = parts;
        n.axis = axis;
        return push(std::move(n));
    }

    int sum_all(int a) { return reduce(Op::SumAll, a); }
    int mean_all(int a) { return reduce(Op::MeanAll, a); }

    // sugar, composed from the primitive set
    int scale(int a, float c) { return mul(a, constant(Tensor::scalar(c))); }
    int neg(int a) { return scale(a, -1.0f); }
    int sub(int a, int b) { return add(a, neg(b)); }
    int square(int a) { return mul(a, a); }
    int add_scalar(int a, float c) { return add(a, constant(Tensor::scalar(c))); }

    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    int size() const { return static_cast<int>(nodes_.size()); }
    const Shape& shape_of(int id) const {
        if (id < 0 || id >= size()) throw ShapeError("bad node id");
        return nodes_[static_cast<std::size_t>(id)].shape;
    }
    int input_id(const std::string& name) const {
        auto it = input_ids_.find(name);
        return it == input_ids_.end() ? -1 : it->second;
    }
    const std::unordered_map<std::string, int>& inputs() const { return input_ids_; }

    std::string describe(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        std::string s = std::string(op_name(n.op)) + "#" + std::to_string(id);
        if (!n.name.empty()) s += "(" + n.name + ")";
        return s;
    }

private:
    int binary(Op op, int a, int b) {
        Node n;
        n.op = op;
        n.shape = detail::broadcast_shape(shape_of(a), shape_of(b), op_name(op));
        n.args = {a, b};
        return push(std::move(n));
    }
    int unary(Op op, int a) {
        Node n;
        n.op = op;
        n.shape = shape_of(a);
        n.args = {a};
        return push(std::move(n));
    }
    int reduce(Op op, int a) {
        Node n;
        n.op = op;
        n.shape = {1};
        n.args = {a};
        return push(std::move(n));
    }
    int push(Node n) {
        for (int a : n.args) {
            if (a < 0 || a >= size()) throw ShapeError("bad arg node id");
            n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(a)].requires_grad;
        }
        nodes_.push_back(std::move(n));
        return size() - 1;
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, int> input_ids_;
};

struct Evaluation {
    const Graph* graph = nullptr;
    std::vector<Tensor> values;
    const Tensor& value(int id) const { return values[static_cast<std::size_t>(id)]; }
    float scalar(int id) const {
        const Tensor& t = value(id);
        if (t.size() != 1) throw ShapeError("node is not scalar: " + graph->describe(id));
        return t[0];
    }
};

namespace detail {

inline void check_finite(const Graph& g, int id, const Tensor& t, const char* phase) {
    if (!t.all_finite())
        throw NumericError(std::string("non-finite values in ") + phase + " at node " + g.describe(id));
}

// elementwise binary with broadcast; F: (float, float) -> float
template <typename F>
inline Tensor broadcast_apply(const Tensor& a, const Tensor& b, const Shape& out_shape, F&& f) {
    Tensor out(out_shape);
    if (a.shape() == b.shape()) {
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    if (b.size() == 1) {
        float bv = b[0];
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = f(a[i], bv);
        return out;
    }
    if (a.size() == 1) {
        float av = a[0];
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = f(av, b[i]);
        return out;
    }
    auto sta = broadcast_strides(a.shape(), out_shape);
    auto stb = broadcast_strides(b.shape(), out_shape);
    std::vector<int> idx(out_shape.size(), 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t lin = 0;; ++lin) {
        out[lin] = f(a[ia], b[ib]);
        int d = static_cast<int>(out_shape.size()) - 1;
        for (; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            ++idx[du];
            ia += sta[du];
            ib += stb[du];
            if (idx[du] < out_shape[du]) break;
            ia -= sta[du] * out_shape[du];
            ib -= stb[du] * out_shape[du];
            idx[du] = 0;
        }
        if (d < 0) return out;
    }
}

// reduce `grad_out` (shaped like out_shape) into the broadcast operand's shape,
// scaled elementwise by values taken via `other` strides; f64 accumulation
template <bool Scale>
inline void broadcast_reduce_grad(const Tensor& grad_out, const Tensor& other, const Shape& out_shape,
                                  const Shape& target_shape, Tensor& target_grad) {
    std::vector<double> acc(static_cast<std::size_t>(numel(target_shape)), 0.0);
    auto stt = broadcast_strides(target_shape, out_shape);
    auto sto = broadcast_strides(other.shape(), out_shape);
    std::vector<int> idx(out_shape.size(), 0);
    std::int64_t it = 0, io = 0;
    for (std::int64_t lin = 0;; ++lin) {
        double g = grad_out[lin];
        if constexpr (Scale) g *= other[io];
        acc[static_cast<std::size_t>(it)] += g;
        int d = static_cast<int>(out_shape.size()) - 1;
        for (; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            ++idx[du];
            it += stt[du];
            io += sto[du];
            if (idx[du] < out_shape[du]) break;
            it -= stt[du] * out_shape[du];
            io -= sto[du] * out_shape[du];
            idx[du] = 0;
        }
        if (d < 0) break;
    }
    for (std::int64_t i = 0; i < target_grad.size(); ++i)
        target_grad[i] += static_cast<float>(acc[static_cast<std::size_t>(i)]);
}

struct ConvDims {
    int n, cin, h, w, cout, kh, kw, ph, pw;
};

inline ConvDims conv_dims(const Shape& sx, const Shape& sk) {
    return {sx[0], sx[1], sx[2], sx[3], sk[0], sk[2], sk[3], (sk[2] - 1) / 2, (sk[3] - 1) / 2};
}

// gather one sample into cols [cin*kh*kw, h*w]
inline void im2col(const float* x, const ConvDims& d, Pad pad, float* cols) {
    int hw = d.h * d.w;
    for (int c = 0; c < d.cin; ++c) {
        const float* xp = x + static_cast<std::int64_t>(c) * hw;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                float* row = cols + (static_cast<std::int64_t>(c) * d.kh * d.kw + ki * d.kw + kj) * hw;
                for (int i = 0; i < d.h; ++i) {
                    int si = i + ki - d.ph;
                    if (pad == Pad::Circular) si = ((si % d.h) + d.h) % d.h;
                    for (int j = 0; j < d.w; ++j) {
                        int sj = j + kj - d.pw;
                        if (pad == Pad::Circular) sj = ((sj % d.w) + d.w) % d.w;
                        bool in = si >= 0 && si < d.h && sj >= 0 && sj < d.w;
                        row[i * d.w + j] = in ? xp[si * d.w + sj] : 0.0f;
                    }
                }
            }
        }
    }
}

// scatter-add cols back into one sample's gradient
inline void col2im(const float* cols, const ConvDims& d, Pad pad, float* dx) {
    int hw = d.h * d.w;
    for (int c = 0; c < d.cin; ++c) {
        float* xp = dx + static_cast<std::int64_t>(c) * hw;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const float* row = cols + (static_cast<std::int64_t>(c) * d.kh * d.kw + ki * d.kw + kj) * hw;
                for (int i = 0; i < d.h; ++i) {
                    int si = i + ki - d.ph;
                    if (pad == Pad::Circular) si = ((si % d.h) + d.h) % d.h;
                    else if (si < 0 || si >= d.h) continue;
                    for (int j = 0; j < d.w; ++j) {
                        int sj = j + kj - d.pw;
                        if (pad == Pad::Circular) sj = ((sj % d.w) + d.w) % d.w;
                        else if (sj < 0 || sj >= d.w) continue;
                        xp[si * d.w + sj] += row[i * d.w + j];
                    }
                }
            }
        }
    }
}

inline float gelu_val(float x) {
    return static_cast<float>(0.5 * x * (1.0 + std::erf(static_cast<double>(x) * 0.7071067811865475)));
}

inline float gelu_grad(float x) {
    double xd = x;
    double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475));
    double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;
    return static_cast<float>(cdf + xd * pdf);
}

}  // namespace detail

inline Evaluation forward_eval(const Graph& g, const std::unordered_map<std::string, Tensor>& inputs) {
    Evaluation ev;
    ev.graph = &g;
    ev.values.resize(static_cast<std::size_t>(g.size()));
    for (int id = 0; id < g.size(); ++id) {
        const Node& n = g.node(id);
        Tensor& out = ev.values[static_cast<std::size_t>(id)];
        auto arg = [&](int i) -> const Tensor& { return ev.values[static_cast<std::size_t>(n.args[static_cast<std::size_t>(i)])]; };
        switch (n.op) {
            case Op::Input: {
                auto it = inputs.find(n.name);
                if (it == inputs.end()) throw ShapeError("unbound graph input: " + n.name);
                if (it->second.shape() != n.shape)
                    throw ShapeError("input " + n.name + " bound with shape " + shape_str(it->second.shape()) +
                                     ", declared " + shape_str(n.shape));
                out = it->second;
                break;
            }
            case Op::Constant:
                out = n.value;
                break;
            case Op::MatMul: {
                const Tensor &a = arg(0), &b = arg(1);
                out = Tensor(n.shape);
                bool batched = n.shape.size() == 3;
                int nb = batched ? n.shape[0] : 1;
                int ar = a.rank() == 3 ? a.dim(1) : a.dim(0), ac = a.dim(-1);
                int br = b.rank() == 3 ? b.dim(1) : b.dim(0), bc = b.dim(-1);
                std::int64_t sa = a.rank() == 3 ? static_cast<std::int64_t>(ar) * ac : 0;
                std::int64_t sb = b.rank() == 3 ? static_cast<std::int64_t>(br) * bc : 0;
                std::int64_t so = static_cast<std::int64_t>(n.shape[n.shape.size() - 2]) * n.shape[n.shape.size() - 1];
                for (int i = 0; i < nb; ++i)
                    detail::gemm(a.data() + i * sa, ar, ac, n.trans_a, b.data() + i * sb, br, bc, n.trans_b,
                                 out.data() + (batched ? i * so : 0), false);
                break;
            }
            case Op::Conv2d: {
                const Tensor &x = arg(0), &k = arg(1);
                auto d = detail::conv_dims(x.shape(), k.shape());
                out = Tensor(n.shape);
                int hw = d.h * d.w, kk = d.cin * d.kh * d.kw;
                std::vector<float> cols(static_cast<std::size_t>(kk) * hw);
                for (int s = 0; s < d.n; ++s) {
                    detail::im2col(x.data() + static_cast<std::int64_t>(s) * d.cin * hw, d, n.pad, cols.data());
                    detail::gemm(k.data(), d.cout, kk, false, cols.data(), kk, hw, false,
                                 out.data() + static_cast<std::int64_t>(s) * d.cout * hw, false);
                }
                break;
            }
            case Op::Add:
                out = detail::broadcast_apply(arg(0), arg(1), n.shape, [](float x, float y) { return x + y; });
                break;
            case Op::Mul:
                out = detail::broadcast_apply(arg(0), arg(1), n.shape, [](float x, float y) { return x * y; });
                break;
            case Op::Tanh: {
                const Tensor& x = arg(0);
                out = Tensor(n.shape);
                for (std::int64_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
                break;
            }
            case Op::Gelu: {
                const Tensor& x = arg(0);
                out = Tensor(n.shape);
                for (std::int64_t i = 0; i < x.size(); ++i) out[i] = detail::gelu_val(x[i]);
                break;
            }
            case Op::Exp: {
                const Tensor& x = arg(0);
                out = Tensor(n.shape);
                for (std::int64_t i = 0; i < x.size(); ++i) {
                    float v = x[i];
                    if (n.clamp) v = std::min(std::max(v, n.clamp_lo), n.clamp_hi);
                    out[i] = std::exp(v);
                }
                break;
            }
            case Op::Clamp: {
                const Tensor& x = arg(0);
                out = Tensor(n.shape);
                for (std::int64_t i = 0; i < x.size(); ++i)
                    out[i] = std::min(std::max(x[i], n.clamp_lo), n.clamp_hi);
                break;
            }
            case Op::Softmax: {
                const Tensor& x = arg(0);
                out = Tensor(n.shape);
                std::int64_t d = n.shape.empty() ? 1 : n.shape.back();
                std::int64_t rows = x.size() / d;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const float* xp = x.data() + r * d;
                    float* op = out.data() + r * d;
                    float mx = xp[0];
                    for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, xp[i]);
                    double denom = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        op[i] = std::exp(xp[i] - mx);
                        denom += op[i];
                    }
                    float inv = static_cast<float>(1.0 / denom);
                    for (std::int64_t i = 0; i < d; ++i) op[i] *= inv;
                }
                break;
            }
            case Op::LayerNorm: {
                const Tensor& x = arg(0);
                out = Tensor(n.shape);
                std::int64_t d = n.shape.empty() ? 1 : n.shape.back();
                std::int64_t rows = x.size() / d;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const float* xp = x.data() + r * d;
                    float* op = out.data() + r * d;
                    double mean = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) mean += xp[i];
                    mean /= static_cast<double>(d);
                    double var = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        double c = xp[i] - mean;
                        var += c * c;
                    }
                    var /= static_cast<double>(d);
                    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                    for (std::int64_t i = 0; i < d; ++i)
                        op[i] = static_cast<float>((xp[i] - mean) * inv);
                }
                break;
            }
            case Op::Reshape:
                out = arg(0).reshaped(n.shape);
                break;
            case Op::Concat: {
                out = Tensor(n.shape);
                std::int64_t outer = 1, inner = 1;
                for (int i = 0; i < n.axis; ++i) outer *= n.shape[static_cast<std::size_t>(i)];
                for (std::size_t i = static_cast<std::size_t>(n.axis) + 1; i < n.shape.size(); ++i)
                    inner *= n.shape[i];
                std::int64_t off = 0;
                for (int a : n.args) {
                    const Tensor& p = ev.values[static_cast<std::size_t>(a)];
                    std::int64_t width = p.dim(n.axis) * inner;
                    std::int64_t total = n.shape[static_cast<std::size_t>(n.axis)] * inner;
                    for (std::int64_t o = 0; o < outer; ++o)
                        std::memcpy(out.data() + o * total + off, p.data() + o * width,
                                    static_cast<std::size_t>(width) * 4);
                    off += width;
                }
                break;
            }
            case Op::SumAll:
            case Op::MeanAll: {
                const Tensor& x = arg(0);
                double acc = 0.0;
                for (std::int64_t i = 0; i < x.size(); ++i) acc += x[i];
                if (n.op == Op::MeanAll) acc /= static_cast<double>(std::max<std::int64_t>(1, x.size()));
                out = Tensor::scalar(static_cast<float>(acc));
                break;
            }
        }
        detail::check_finite(g, id, out, "forward");
    }
    return ev;
}

struct Gradients {
    std::vector<Tensor> by_node;  // empty tensor means "no gradient flowed"
    std::unordered_map<std::string, Tensor> by_input;

    const Tensor& wrt(const std::string& name) const {
        auto it = by_input.find(name);
        if (it == by_input.end()) throw ConfigError("no such input: " + name);
        return it->second;
    }
};

inline Gradients grad(const Graph& g, const Evaluation& ev, int loss_node) {
    if (numel(g.shape_of(loss_node)) != 1)
        throw ShapeError("grad: loss must be scalar, got " + shape_str(g.shape_of(loss_node)) + " at " +
                         g.describe(loss_node));
    Gradients gd;
    gd.by_node.resize(static_cast<std::size_t>(g.size()));
    auto touched = [&](int id) -> bool { return gd.by_node[static_cast<std::size_t>(id)].size() > 0; };
    auto slot = [&](int id) -> Tensor& {
        Tensor& t = gd.by_node[static_cast<std::size_t>(id)];
        if (t.size() == 0) t = Tensor(g.shape_of(id));
        return t;
    };
    slot(loss_node)[0] = 1.0f;

    for (int id = loss_node; id >= 0; --id) {
        const Node& n = g.node(id);
        if (!touched(id) || !n.requires_grad) continue;
        const Tensor& dy = gd.by_node[static_cast<std::size_t>(id)];
        auto val = [&](int i) -> const Tensor& { return ev.value(n.args[static_cast<std::size_t>(i)]); };
        auto wants = [&](int i) -> bool { return g.node(n.args[static_cast<std::size_t>(i)]).requires_grad; };
        switch (n.op) {
            case Op::Input:
            case Op::Constant:
                break;
            case Op::MatMul: {
                const Tensor &a = val(0), &b = val(1);
                bool batched = n.shape.size() == 3;
                int nb = batched ? n.shape[0] : 1;
                int ar = a.rank() == 3 ? a.dim(1) : a.dim(0), ac = a.dim(-1);
                int br = b.rank() == 3 ? b.dim(1) : b.dim(0), bc = b.dim(-1);
                int cr = n.shape[n.shape.size() - 2], cc = n.shape[n.shape.size() - 1];
                std::int64_t sa = a.rank() == 3 ? static_cast<std::int64_t>(ar) * ac : 0;
                std::int64_t sb = b.rank() == 3 ? static_cast<std::int64_t>(br) * bc : 0;
                std::int64_t so = batched ? static_cast<std::int64_t>(cr) * cc : 0;
                for (int i = 0; i < nb; ++i) {
                    const float* ap = a.data() + i * sa;
                    const float* bp = b.data() + i * sb;
                    const float* dp = dy.data() + i * so;
                    if (wants(0)) {
                        float* da = slot(n.args[0]).data() + i * sa;
                        // accumulate always: shared rank-2 operands sum over the batch
                        if (!n.trans_a)
                            n.trans_b ? detail::gemm(dp, cr, cc, false, bp, br, bc, false, da, true)
                                      : detail::gemm(dp, cr, cc, false, bp, br, bc, true, da, true);
                        else
                            n.trans_b ? detail::gemm(bp, br, bc, true, dp, cr, cc, true, da, true)
                                      : detail::gemm(bp, br, bc, false, dp, cr, cc, true, da, true);
                    }
                    if (wants(1)) {
                        float* db = slot(n.args[1]).data() + i * sb;
                        if (!n.trans_b)
                            n.trans_a ? detail::gemm(ap, ar, ac, false, dp, cr, cc, false, db, true)
                                      : detail::gemm(ap, ar, ac, true, dp, cr, cc, false, db, true);
                        else
                            n.trans_a ? detail::gemm(dp, cr, cc, true, ap, ar, ac, true, db, true)
                                      : detail::gemm(dp, cr, cc, true, ap, ar, ac, false, db, true);
                    }
                }
                break;
            }
            case Op::Conv2d: {
                const Tensor &x = val(0), &k = val(1);
                auto d = detail::conv_dims(x.shape(), k.shape());
                int hw = d.h * d.w, kk = d.cin * d.kh * d.kw;
                std::vector<float> cols(static_cast<std::size_t>(kk) * hw);
                std::vector<float> dcols(static_cast<std::size_t>(kk) * hw);
                for (int s = 0; s < d.n; ++s) {
                    const float* dyp = dy.data() + static_cast<std::int64_t>(s) * d.cout * hw;
                    if (wants(1)) {
                        detail::im2col(x.data() + static_cast<std::int64_t>(s) * d.cin * hw, d, n.pad, cols.data());
                        detail::gemm(dyp, d.cout, hw, false, cols.data(), kk, hw, true, slot(n.args[1]).data(), true);
                    }
                    if (wants(0)) {
                        detail::gemm(k.data(), d.cout, kk, true, dyp, d.cout, hw, false, dcols.data(), false);
                        detail::col2im(dcols.data(), d, n.pad,
                                       slot(n.args[0]).data() + static_cast<std::int64_t>(s) * d.cin * hw);
                    }
                }
                break;
            }
            case Op::Add: {
                for (int side = 0; side < 2; ++side) {
                    if (!wants(side)) continue;
                    const Tensor& v = val(side);
                    Tensor& dst = slot(n.args[static_cast<std::size_t>(side)]);
                    if (v.shape() == n.shape) {
                        for (std::int64_t i = 0; i < dy.size(); ++i) dst[i] += dy[i];
                    } else {
                        detail::broadcast_reduce_grad<false>(dy, val(1 - side), n.shape, v.shape(), dst);
                    }
                }
                break;
            }
            case Op::Mul: {
                for (int side = 0; side < 2; ++side) {
                    if (!wants(side)) continue;
                    const Tensor& v = val(side);
                    const Tensor& other = val(1 - side);
                    Tensor& dst = slot(n.args[static_cast<std::size_t>(side)]);
                    if (v.shape() == n.shape && other.shape() == n.shape) {
                        for (std::int64_t i = 0; i < dy.size(); ++i)
                            dst[i] += static_cast<float>(static_cast<double>(dy[i]) * other[i]);
                    } else if (v.shape() == n.shape && other.size() == 1) {
                        double ov = other[0];
                        for (std::int64_t i = 0; i < dy.size(); ++i)
                            dst[i] += static_cast<float>(dy[i] * ov);
                    } else {
                        detail::broadcast_reduce_grad<true>(dy, other, n.shape, v.shape(), dst);
                    }
                }
                break;
            }
            case Op::Tanh: {
                const Tensor& y = ev.value(id);
                Tensor& dst = slot(n.args[0]);
                for (std::int64_t i = 0; i < dy.size(); ++i) {
                    double yd = y[i];
                    dst[i] += static_cast<float>(dy[i] * (1.0 - yd * yd));
                }
                break;
            }
            case Op::Gelu: {
                const Tensor& x = val(0);
                Tensor& dst = slot(n.args[0]);
                for (std::int64_t i = 0; i < dy.size(); ++i)
                    dst[i] += static_cast<float>(static_cast<double>(dy[i]) * detail::gelu_grad(x[i]));
                break;
            }
            case Op::Exp: {
                const Tensor& x = val(0);
                const Tensor& y = ev.value(id);
                Tensor& dst = slot(n.args[0]);
                for (std::int64_t i = 0; i < dy.size(); ++i) {
                    bool live = !n.clamp || (x[i] >= n.clamp_lo && x[i] <= n.clamp_hi);
                    if (live) dst[i] += static_cast<float>(static_cast<double>(dy[i]) * y[i]);
                }
                break;
            }
            case Op::Clamp: {
                const Tensor& x = val(0);
                Tensor& dst = slot(n.args[0]);
                for (std::int64_t i = 0; i < dy.size(); ++i)
                    if (x[i] >= n.clamp_lo && x[i] <= n.clamp_hi) dst[i] += dy[i];
                break;
            }
            case Op::Softmax: {
                const Tensor& y = ev.value(id);
                Tensor& dst = slot(n.args[0]);
                std::int64_t d = n.shape.back();
                std::int64_t rows = y.size() / d;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const float* yp = y.data() + r * d;
                    const float* dp = dy.data() + r * d;
                    float* gp = dst.data() + r * d;
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) dot += static_cast<double>(dp[i]) * yp[i];
                    for (std::int64_t i = 0; i < d; ++i)
                        gp[i] += static_cast<float>(static_cast<double>(yp[i]) * (dp[i] - dot));
                }
                break;
            }
            case Op::LayerNorm: {
                // x-hat is recomputed in f64 from the raw input rather than read
                // from the f32 forward output: when the gradient is dominated by
                // the eps term the main terms cancel, and f32 rounding of y would
                // swamp the small residual.
                const Tensor& x = val(0);
                Tensor& dst = slot(n.args[0]);
                std::int64_t d = n.shape.back();
                std::int64_t rows = x.size() / d;
                std::vector<double> xhat(static_cast<std::size_t>(d));
                for (std::int64_t r = 0; r < rows; ++r) {
                    const float* xp = x.data() + r * d;
                    const float* dp = dy.data() + r * d;
                    float* gp = dst.data() + r * d;
                    double mean = 0.0, var = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) mean += xp[i];
                    mean /= static_cast<double>(d);
                    for (std::int64_t i = 0; i < d; ++i) {
                        double c = xp[i] - mean;
                        var += c * c;
                    }
                    var /= static_cast<double>(d);
                    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                    double mdy = 0.0, mdyx = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        xhat[static_cast<std::size_t>(i)] = (xp[i] - mean) * inv;
                        mdy += dp[i];
                        mdyx += dp[i] * xhat[static_cast<std::size_t>(i)];
                    }
                    mdy /= static_cast<double>(d);
                    mdyx /= static_cast<double>(d);
                    for (std::int64_t i = 0; i < d; ++i)
                        gp[i] += static_cast<float>(inv * (dp[i] - mdy - xhat[static_cast<std::size_t>(i)] * mdyx));
                }
                break;
            }
            case Op::Reshape: {
                Tensor& dst = slot(n.args[0]);
                for (std::int64_t i = 0; i < dy.size(); ++i) dst[i] += dy[i];
                break;
            }
            case Op::Concat: {
                std::int64_t outer = 1, inner = 1;
                for (int i = 0; i < n.axis; ++i) outer *= n.shape[static_cast<std::size_t>(i)];
                for (std::size_t i = static_cast<std::size_t>(n.axis) + 1; i < n.shape.size(); ++i)
                    inner *= n.shape[i];
                std::int64_t total = n.shape[static_cast<std::size_t>(n.axis)] * inner;
                std::int64_t off = 0;
                for (int a : n.args) {
                    const Tensor& p = ev.value(a);
                    std::int64_t width = p.dim(n.axis) * inner;
                    if (g.node(a).requires_grad) {
                        Tensor& dst = slot(a);
                        for (std::int64_t o = 0; o < outer; ++o) {
                            const float* src = dy.data() + o * total + off;
                            float* dp = dst.data() + o * width;
                            for (std::int64_t i = 0; i < width; ++i) dp[i] += src[i];
                        }
                    }
                    off += width;
                }
                break;
            }
            case Op::SumAll: {
                Tensor& dst = slot(n.args[0]);
                float v = dy[0];
                for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += v;
                break;
            }
            case Op::MeanAll: {
                Tensor& dst = slot(n.args[0]);
                float v = dy[0] / static_cast<float>(std::max<std::int64_t>(1, val(0).size()));
                for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += v;
                break;
            }
        }
    }

    for (const auto& [name, id] : g.inputs()) {
        if (!g.node(id).requires_grad) continue;
        if (!touched(id)) {
            gd.by_input[name] = Tensor(g.shape_of(id));  // unreachable leaf: zero gradient
        } else {
            detail::check_finite(g, id, gd.by_node[static_cast<std::size_t>(id)], "backward");
            gd.by_input[name] = gd.by_node[static_cast<std::size_t>(id)];
        }
    }
    return gd;
}

}  // namespace envgen
