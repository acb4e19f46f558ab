#include "tsae/numerics/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace tsae {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

constexpr std::array<std::pair<OpKind, std::string_view>, 24> kOpNames{{
    {OpKind::Leaf, "leaf"},
    {OpKind::MatMul, "matmul"},
    {OpKind::Add, "add"},
    {OpKind::Mul, "mul"},
    {OpKind::Conv1dDilated, "conv1d_dilated"},
    {OpKind::LeakyRelu, "leaky_relu"},
    {OpKind::Relu, "relu"},
    {OpKind::Sigmoid, "sigmoid"},
    {OpKind::Softmax, "softmax"},
    {OpKind::BatchNorm, "batch_norm"},
    {OpKind::LayerMeanPool, "layer_mean_pool"},
    {OpKind::Reshape, "reshape"},
    {OpKind::UpsampleNearest, "upsample_nearest"},
    {OpKind::Concat, "concat"},
    {OpKind::Slice, "slice"},
    {OpKind::Sum, "sum"},
    {OpKind::Mean, "mean"},
    {OpKind::SqL2, "sq_l2"},
    {OpKind::Log, "log"},
    {OpKind::Exp, "exp"},
    {OpKind::CosineSim, "cosine_sim"},
    {OpKind::JumpRelu, "jumprelu"},
    {OpKind::Step, "step"},
    {OpKind::External, "external"},
}};

constexpr double kLogFloor = 1e-300;
constexpr double kNormFloor = 1e-12;

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
    throw std::invalid_argument(std::string(op_name(kind)) + ": " + detail);
}

void expect_arity(OpKind kind, std::size_t got, std::size_t want) {
    if (got != want) {
        shape_error(kind, "expected " + std::to_string(want) + " inputs, got " + std::to_string(got));
    }
}

// Right-aligned (numpy-style) broadcasting of two shapes.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
    bool same = false;
    bool b_scalar = false;
    bool b_suffix = false;  // b's shape is a trailing block of a == out
    std::size_t nb = 1;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

Broadcast plan_broadcast(OpKind kind, const Shape& a, const Shape& b) {
    Broadcast p;
    const std::size_t r = std::max(a.size(), b.size());
    p.out.assign(r, 1);
    p.stride_a.assign(r, 0);
    p.stride_b.assign(r, 0);
    const auto sa = contiguous_strides(a);
    const auto sb = contiguous_strides(b);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t oa = r - 1 - i;
        const bool has_a = i < a.size();
        const bool has_b = i < b.size();
        const std::size_t da = has_a ? a[a.size() - 1 - i] : 1;
        const std::size_t db = has_b ? b[b.size() - 1 - i] : 1;
        std::size_t d;
        if (da == db || db == 1) {
            d = da;
        } else if (da == 1) {
            d = db;
        } else {
            shape_error(kind, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        p.out[oa] = d;
        p.stride_a[oa] = (has_a && da == d && da != 1) ? sa[a.size() - 1 - i] : 0;
        p.stride_b[oa] = (has_b && db == d && db != 1) ? sb[b.size() - 1 - i] : 0;
    }
    p.same = (a == b);
    p.nb = shape_size(b);
    p.b_scalar = p.nb == 1;
    if (!p.same && a == p.out && b.size() <= a.size()) {
        p.b_suffix = std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
    }
    return p;
}

// Calls f(out_index, a_index, b_index) for each element of the broadcast output.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
    const std::size_t n = shape_size(p.out);
    if (p.same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    if (p.b_scalar && p.stride_a.size() == p.out.size() && shape_size(p.out) == n) {
        bool a_full = true;
        for (std::size_t ax = 0; ax < p.out.size(); ++ax) {
            if (p.out[ax] != 1 && p.stride_a[ax] == 0) a_full = false;
        }
        if (a_full) {
            for (std::size_t i = 0; i < n; ++i) f(i, i, 0);
            return;
        }
    }
    if (p.b_suffix) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i % p.nb);
        return;
    }
    const std::size_t r = p.out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(o, ia, ib);
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            ia += p.stride_a[ax];
            ib += p.stride_b[ax];
            if (idx[ax] < p.out[ax]) break;
            ia -= p.stride_a[ax] * idx[ax];
            ib -= p.stride_b[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t n = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit a;
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    a.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

// Channel layout for batch_norm: axis 1 of [N,C] or [N,C,L].
struct ChannelLayout {
    std::size_t batch;
    std::size_t channels;
    std::size_t length;
};

ChannelLayout bn_layout(const Shape& s) {
    if (s.size() == 2) return {s[0], s[1], 1};
    if (s.size() == 3) return {s[0], s[1], s[2]};
    shape_error(OpKind::BatchNorm, "expected rank 2 or 3 input, got " + shape_str(s));
}

void im2col(const double* x, std::size_t cin, std::size_t len, std::size_t k, std::size_t dil, double* col) {
    for (std::size_t i = 0; i < cin; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double* row = col + (i * k + j) * len;
            const std::size_t shift = j * dil;
            const double* xi = x + i * len;
            for (std::size_t t = 0; t < len; ++t) row[t] = t >= shift ? xi[t - shift] : 0.0;
        }
    }
}

}  // namespace

std::string_view op_name(OpKind kind) {
    for (const auto& [k, name] : kOpNames) {
        if (k == kind) return name;
    }
    return "unknown";
}

OpKind op_kind_from_name(std::string_view name) {
    for (const auto& [k, n] : kOpNames) {
        if (n == name && k != OpKind::Leaf) return k;
    }
    throw std::invalid_argument("unknown op kind '" + std::string(name) + "'");
}

NodeId Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

NodeId Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::variable(const std::string& name, Tensor value) {
    if (auto it = variables_.find(name); it != variables_.end()) return it->second;
    Node n;
    n.value = std::move(value);
    n.name = name;
    n.requires_grad = true;
    const NodeId id = push(std::move(n));
    variables_.emplace(name, id);
    return id;
}

const Tensor& Graph::value(NodeId id) const {
    if (id >= nodes_.size()) throw std::out_of_range("graph node " + std::to_string(id) + " does not exist");
    return nodes_[id].value;
}

bool Graph::requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

NodeId Graph::apply(OpKind kind, std::span<const NodeId> inputs, const OpAttrs& attrs) {
    if (kind == OpKind::Leaf) throw std::invalid_argument("leaf nodes are created with constant() or variable()");
    for (NodeId in : inputs) {
        if (in >= nodes_.size()) throw std::out_of_range("graph input node " + std::to_string(in) + " does not exist");
    }
    Node n;
    n.kind = kind;
    n.inputs.assign(inputs.begin(), inputs.end());
    n.attrs = attrs;
    n.value = forward(kind, n.inputs, attrs, n.aux);
    for (NodeId in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    return push(std::move(n));
}

Tensor Graph::forward(OpKind kind, const std::vector<NodeId>& in, const OpAttrs& at,
                      std::vector<double>& aux) const {
    auto v = [&](std::size_t i) -> const Tensor& { return nodes_[in[i]].value; };

    switch (kind) {
    case OpKind::MatMul: {
        expect_arity(kind, in.size(), 2);
        const Tensor& a = v(0);
        const Tensor& b = v(1);
        if (a.rank() != 2 || b.rank() != 2) {
            shape_error(kind, "expected rank-2 operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
        const std::size_t m = a.dim(0), k = a.dim(1);
        const std::size_t bk = at.transpose_b ? b.dim(1) : b.dim(0);
        const std::size_t n = at.transpose_b ? b.dim(0) : b.dim(1);
        if (k != bk) {
            shape_error(kind, "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                                  (at.transpose_b ? "^T" : ""));
        }
        Tensor out(Shape{m, n});
        MapC A(a.values().data(), m, k);
        Map C(out.values().data(), m, n);
        if (at.transpose_b) {
            MapC B(b.values().data(), n, k);
            C.noalias() = A * B.transpose();
        } else {
            MapC B(b.values().data(), k, n);
            C.noalias() = A * B;
        }
        return out;
    }
    case OpKind::Add:
    case OpKind::Mul: {
        expect_arity(kind, in.size(), 2);
        const Tensor& a = v(0);
        const Tensor& b = v(1);
        const Broadcast p = plan_broadcast(kind, a.shape(), b.shape());
        Tensor out(p.out);
        auto o = out.values();
        auto av = a.values();
        auto bv = b.values();
        if (kind == OpKind::Add) {
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] + bv[ib]; });
        } else {
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] * bv[ib]; });
        }
        return out;
    }
    case OpKind::Conv1dDilated: {
        expect_arity(kind, in.size(), 2);
        const Tensor& x = v(0);
        const Tensor& w = v(1);
        if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1)) {
            shape_error(kind, "expected x[B,Cin,T] and w[Cout,Cin,K], got " + shape_str(x.shape()) + " and " +
                                  shape_str(w.shape()));
        }
        if (at.dilation == 0) shape_error(kind, "dilation must be positive");
        const std::size_t bsz = x.dim(0), cin = x.dim(1), len = x.dim(2);
        const std::size_t cout = w.dim(0), k = w.dim(2);
        Tensor out(Shape{bsz, cout, len});
        std::vector<double> col(cin * k * len);
        MapC W(w.values().data(), cout, cin * k);
        for (std::size_t b = 0; b < bsz; ++b) {
            im2col(x.values().data() + b * cin * len, cin, len, k, at.dilation, col.data());
            MapC Col(col.data(), cin * k, len);
            Map Y(out.values().data() + b * cout * len, cout, len);
            Y.noalias() = W * Col;
        }
        return out;
    }
    case OpKind::LeakyRelu:
    case OpKind::Relu:
    case OpKind::Sigmoid:
    case OpKind::Log:
    case OpKind::Exp: {
        expect_arity(kind, in.size(), 1);
        Tensor out = v(0);
        for (double& x : out.values()) {
            switch (kind) {
            case OpKind::LeakyRelu: x = x > 0 ? x : at.slope * x; break;
            case OpKind::Relu: x = x > 0 ? x : 0.0; break;
            case OpKind::Sigmoid: x = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); break;
            case OpKind::Log: x = std::log(std::max(x, kLogFloor)); break;
            default: x = std::exp(x); break;
            }
        }
        return out;
    }
    case OpKind::Softmax: {
        expect_arity(kind, in.size(), 1);
        Tensor out = v(0);
        if (out.rank() == 0) shape_error(kind, "expected rank >= 1");
        const std::size_t f = out.shape().back();
        auto o = out.values();
        for (std::size_t r = 0; r < out.size() / f; ++r) {
            double* row = o.data() + r * f;
            const double mx = *std::max_element(row, row + f);
            double s = 0;
            for (std::size_t j = 0; j < f; ++j) s += (row[j] = std::exp(row[j] - mx));
            for (std::size_t j = 0; j < f; ++j) row[j] /= s;
        }
        return out;
    }
    case OpKind::BatchNorm: {
        expect_arity(kind, in.size(), 3);
        const Tensor& x = v(0);
        const Tensor& gamma = v(1);
        const Tensor& beta = v(2);
        const auto lay = bn_layout(x.shape());
        if (gamma.size() != lay.channels || beta.size() != lay.channels) {
            shape_error(kind, "gamma/beta " + shape_str(gamma.shape()) + " do not match channels of " +
                                  shape_str(x.shape()));
        }
        if (at.bn == nullptr) shape_error(kind, "missing running-statistics state");
        BatchNormState& st = *at.bn;
        if (st.running_mean.size() != lay.channels) {
            shape_error(kind, "running statistics sized " + std::to_string(st.running_mean.size()) + ", input has " +
                                  std::to_string(lay.channels) + " channels");
        }
        Tensor out(x.shape());
        aux.assign(2 * lay.channels, 0.0);  // [mean, inv_std] per channel
        const std::size_t count = lay.batch * lay.length;
        auto xv = x.values();
        auto o = out.values();
        for (std::size_t c = 0; c < lay.channels; ++c) {
            double mean, var;
            if (at.training) {
                double s = 0;
                for (std::size_t b = 0; b < lay.batch; ++b) {
                    const double* p = xv.data() + (b * lay.channels + c) * lay.length;
                    for (std::size_t t = 0; t < lay.length; ++t) s += p[t];
                }
                mean = s / static_cast<double>(count);
                double ss = 0;
                for (std::size_t b = 0; b < lay.batch; ++b) {
                    const double* p = xv.data() + (b * lay.channels + c) * lay.length;
                    for (std::size_t t = 0; t < lay.length; ++t) ss += (p[t] - mean) * (p[t] - mean);
                }
                var = ss / static_cast<double>(count);
                if (at.update_stats) {
                    const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
                    st.running_mean[c] = (1 - st.momentum) * st.running_mean[c] + st.momentum * mean;
                    st.running_var[c] = (1 - st.momentum) * st.running_var[c] + st.momentum * unbiased;
                }
            } else {
                mean = st.running_mean[c];
                var = st.running_var[c];
            }
            const double inv = 1.0 / std::sqrt(var + st.eps);
            aux[2 * c] = mean;
            aux[2 * c + 1] = inv;
            const double g = gamma[c];
            const double be = beta[c];
            for (std::size_t b = 0; b < lay.batch; ++b) {
                const std::size_t off = (b * lay.channels + c) * lay.length;
                for (std::size_t t = 0; t < lay.length; ++t) o[off + t] = g * (xv[off + t] - mean) * inv + be;
            }
        }
        return out;
    }
    case OpKind::LayerMeanPool: {
        expect_arity(kind, in.size(), 1);
        const Tensor& x = v(0);
        if (x.rank() == 0) shape_error(kind, "expected rank >= 1");
        const std::size_t len = x.shape().back();
        Shape s(x.shape().begin(), x.shape().end() - 1);
        Tensor out(s);
        for (std::size_t r = 0; r < out.size(); ++r) {
            double acc = 0;
            for (std::size_t t = 0; t < len; ++t) acc += x[r * len + t];
            out[r] = acc / static_cast<double>(len);
        }
        return out;
    }
    case OpKind::Reshape: {
        expect_arity(kind, in.size(), 1);
        if (shape_size(at.shape) != v(0).size()) {
            shape_error(kind, "cannot reshape " + shape_str(v(0).shape()) + " to " + shape_str(at.shape));
        }
        return v(0).reshaped(at.shape);
    }
    case OpKind::UpsampleNearest: {
        expect_arity(kind, in.size(), 1);
        const Tensor& x = v(0);
        if (x.rank() == 0 || at.factor == 0) shape_error(kind, "expected rank >= 1 and positive factor");
        const std::size_t len = x.shape().back();
        Shape s = x.shape();
        s.back() = len * at.factor;
        Tensor out(s);
        const std::size_t rows = x.size() / len;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < len * at.factor; ++t) out[r * len * at.factor + t] = x[r * len + t / at.factor];
        }
        return out;
    }
    case OpKind::Concat: {
        if (in.empty()) shape_error(kind, "no inputs");
        const std::size_t axis = at.axis.value_or(0);
        const Shape& s0 = v(0).shape();
        if (axis >= s0.size()) shape_error(kind, "axis out of range for " + shape_str(s0));
        Shape s = s0;
        s[axis] = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const Shape& si = v(i).shape();
            bool ok = si.size() == s0.size();
            for (std::size_t d = 0; ok && d < si.size(); ++d) ok = d == axis || si[d] == s0[d];
            if (!ok) shape_error(kind, "incompatible shapes " + shape_str(s0) + " and " + shape_str(si));
            s[axis] += si[axis];
        }
        Tensor out(s);
        const auto outer = split_axis(s, axis);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const auto sp = split_axis(v(i).shape(), axis);
            const std::size_t block = sp.n * sp.inner;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                std::copy_n(v(i).values().data() + o * block, block,
                            out.values().data() + o * outer.n * outer.inner + offset * outer.inner);
            }
            offset += sp.n;
        }
        return out;
    }
    case OpKind::Slice: {
        expect_arity(kind, in.size(), 1);
        const Tensor& x = v(0);
        const std::size_t axis = at.axis.value_or(0);
        if (axis >= x.rank() || at.start >= at.stop || at.stop > x.dim(axis)) {
            shape_error(kind, "invalid range [" + std::to_string(at.start) + "," + std::to_string(at.stop) +
                                  ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
        }
        Shape s = x.shape();
        s[axis] = at.stop - at.start;
        Tensor out(s);
        const auto sp = split_axis(x.shape(), axis);
        const std::size_t block = s[axis] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(x.values().data() + o * sp.n * sp.inner + at.start * sp.inner, block,
                        out.values().data() + o * block);
        }
        return out;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
        expect_arity(kind, in.size(), 1);
        const Tensor& x = v(0);
        if (!at.axis) {
            double acc = 0;
            for (double e : x.values()) acc += e;
            if (kind == OpKind::Mean) acc /= static_cast<double>(x.size());
            return Tensor::scalar(acc);
        }
        const std::size_t axis = *at.axis;
        if (axis >= x.rank()) shape_error(kind, "axis out of range for " + shape_str(x.shape()));
        const auto sp = split_axis(x.shape(), axis);
        Shape s;
        for (std::size_t d = 0; d < x.rank(); ++d) {
            if (d != axis) s.push_back(x.dim(d));
        }
        Tensor out(s);
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t j = 0; j < sp.n; ++j) {
                const double* src = x.values().data() + (o * sp.n + j) * sp.inner;
                double* dst = out.values().data() + o * sp.inner;
                for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
            }
        }
        if (kind == OpKind::Mean) {
            for (double& e : out.values()) e /= static_cast<double>(sp.n);
        }
        return out;
    }
    case OpKind::SqL2: {
        expect_arity(kind, in.size(), 1);
        double acc = 0;
        for (double e : v(0).values()) acc += e * e;
        return Tensor::scalar(acc);
    }
    case OpKind::CosineSim: {
        expect_arity(kind, in.size(), 2);
        const Tensor& a = v(0);
        const Tensor& b = v(1);
        if (a.shape() != b.shape() || a.rank() == 0) {
            shape_error(kind, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
        const std::size_t f = a.shape().back();
        const std::size_t rows = a.size() / f;
        Tensor out(Shape(a.shape().begin(), a.shape().end() - 1));
        aux.assign(2 * rows, 0.0);  // [|a|, |b|] per row
        for (std::size_t r = 0; r < rows; ++r) {
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t j = 0; j < f; ++j) {
                const double x = a[r * f + j], y = b[r * f + j];
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            const double na = std::max(std::sqrt(aa), kNormFloor);
            const double nb = std::max(std::sqrt(bb), kNormFloor);
            aux[2 * r] = na;
            aux[2 * r + 1] = nb;
            out[r] = ab / (na * nb);
        }
        return out;
    }
    case OpKind::JumpRelu:
    case OpKind::Step: {
        expect_arity(kind, in.size(), 2);
        const Tensor& u = v(0);
        const Tensor& phi = v(1);
        if (u.rank() == 0 || phi.size() != u.shape().back()) {
            shape_error(kind, "thresholds " + shape_str(phi.shape()) + " do not match last axis of " +
                                  shape_str(u.shape()));
        }
        const std::size_t d = phi.size();
        Tensor out(u.shape());
        for (std::size_t i = 0; i < u.size(); ++i) {
            const bool on = u[i] > phi[i % d];
            out[i] = kind == OpKind::JumpRelu ? (on ? u[i] : 0.0) : (on ? 1.0 : 0.0);
        }
        return out;
    }
    case OpKind::External: {
        expect_arity(kind, in.size(), 1);
        if (!at.external || !at.external->forward) shape_error(kind, "missing external function");
        return at.external->forward(v(0));
    }
    case OpKind::Leaf:
        break;
    }
    throw std::invalid_argument("unsupported op kind");
}

Tensor& Graph::grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
}

const Tensor& Graph::grad(NodeId id) const { return nodes_.at(id).grad; }

Gradients Graph::backward(NodeId loss) {
    if (loss >= nodes_.size()) throw std::out_of_range("loss node does not exist");
    if (nodes_[loss].value.size() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                    shape_str(nodes_[loss].value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (n.kind == OpKind::Leaf || !n.requires_grad || n.grad.empty()) continue;
        backward_node(n);
    }
    Gradients out;
    for (const auto& [name, id] : variables_) {
        const Node& n = nodes_[id];
        out.emplace(name, n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad);
    }
    return out;
}

void Graph::backward_node(const Node& node) {
    const Tensor& gy = node.grad;
    const auto& in = node.inputs;
    const OpAttrs& at = node.attrs;
    auto val = [&](std::size_t i) -> const Tensor& { return nodes_[in[i]].value; };
    auto wants = [&](std::size_t i) { return nodes_[in[i]].requires_grad; };

    switch (node.kind) {
    case OpKind::MatMul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        const std::size_t m = a.dim(0), k = a.dim(1), n = node.value.dim(1);
        MapC GY(gy.values().data(), m, n);
        if (wants(0)) {
            Map GA(grad_buffer(in[0]).values().data(), m, k);
            if (at.transpose_b) {
                GA.noalias() += GY * MapC(b.values().data(), n, k);
            } else {
                GA.noalias() += GY * MapC(b.values().data(), k, n).transpose();
            }
        }
        if (wants(1)) {
            MapC A(a.values().data(), m, k);
            if (at.transpose_b) {
                Map GB(grad_buffer(in[1]).values().data(), n, k);
                GB.noalias() += GY.transpose() * A;
            } else {
                Map GB(grad_buffer(in[1]).values().data(), k, n);
                GB.noalias() += A.transpose() * GY;
            }
        }
        return;
    }
    case OpKind::Add:
    case OpKind::Mul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        const Broadcast p = plan_broadcast(node.kind, a.shape(), b.shape());
        auto g = gy.values();
        if (wants(0)) {
            auto ga = grad_buffer(in[0]).values();
            auto bv = b.values();
            if (node.kind == OpKind::Add) {
                for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
            } else {
                for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * bv[ib]; });
            }
        }
        if (wants(1)) {
            auto gb = grad_buffer(in[1]).values();
            auto av = a.values();
            if (node.kind == OpKind::Add) {
                for_each_broadcast(p, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
            } else {
                for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * av[ia]; });
            }
        }
        return;
    }
    case OpKind::Conv1dDilated: {
        const Tensor& x = val(0);
        const Tensor& w = val(1);
        const std::size_t bsz = x.dim(0), cin = x.dim(1), len = x.dim(2);
        const std::size_t cout = w.dim(0), k = w.dim(2);
        std::vector<double> col(cin * k * len);
        std::vector<double> gcol(cin * k * len);
        MapC W(w.values().data(), cout, cin * k);
        double* gw = wants(1) ? grad_buffer(in[1]).values().data() : nullptr;
        double* gx = wants(0) ? grad_buffer(in[0]).values().data() : nullptr;
        for (std::size_t b = 0; b < bsz; ++b) {
            MapC GY(gy.values().data() + b * cout * len, cout, len);
            if (gw) {
                im2col(x.values().data() + b * cin * len, cin, len, k, at.dilation, col.data());
                Map(gw, cout, cin * k).noalias() += GY * MapC(col.data(), cin * k, len).transpose();
            }
            if (gx) {
                Map(gcol.data(), cin * k, len).noalias() = W.transpose() * GY;
                double* gxb = gx + b * cin * len;
                for (std::size_t i = 0; i < cin; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const double* row = gcol.data() + (i * k + j) * len;
                        const std::size_t shift = j * at.dilation;
                        for (std::size_t t = shift; t < len; ++t) gxb[i * len + t - shift] += row[t];
                    }
                }
            }
        }
        return;
    }
    case OpKind::LeakyRelu:
    case OpKind::Relu:
    case OpKind::Sigmoid:
    case OpKind::Log:
    case OpKind::Exp: {
        if (!wants(0)) return;
        const Tensor& x = val(0);
        const Tensor& y = node.value;
        auto gx = grad_buffer(in[0]).values();
        for (std::size_t i = 0; i < x.size(); ++i) {
            double d;
            switch (node.kind) {
            case OpKind::LeakyRelu: d = x[i] > 0 ? 1.0 : at.slope; break;
            case OpKind::Relu: d = x[i] > 0 ? 1.0 : 0.0; break;
            case OpKind::Sigmoid: d = y[i] * (1.0 - y[i]); break;
            case OpKind::Log: d = 1.0 / std::max(x[i], kLogFloor); break;
            default: d = y[i]; break;
            }
            gx[i] += gy[i] * d;
        }
        return;
    }
    case OpKind::Softmax: {
        if (!wants(0)) return;
        const Tensor& y = node.value;
        const std::size_t f = y.shape().back();
        auto gx = grad_buffer(in[0]).values();
        for (std::size_t r = 0; r < y.size() / f; ++r) {
            double dot = 0;
            for (std::size_t j = 0; j < f; ++j) dot += gy[r * f + j] * y[r * f + j];
            for (std::size_t j = 0; j < f; ++j) gx[r * f + j] += y[r * f + j] * (gy[r * f + j] - dot);
        }
        return;
    }
    case OpKind::BatchNorm: {
        const Tensor& x = val(0);
        const Tensor& gamma = val(1);
        const auto lay = bn_layout(x.shape());
        const double count = static_cast<double>(lay.batch * lay.length);
        for (std::size_t c = 0; c < lay.channels; ++c) {
            const double mean = node.aux[2 * c];
            const double inv = node.aux[2 * c + 1];
            double sum_g = 0, sum_gx = 0;
            for (std::size_t b = 0; b < lay.batch; ++b) {
                const std::size_t off = (b * lay.channels + c) * lay.length;
                for (std::size_t t = 0; t < lay.length; ++t) {
                    const double xh = (x[off + t] - mean) * inv;
                    sum_g += gy[off + t];
                    sum_gx += gy[off + t] * xh;
                }
            }
            if (wants(1)) grad_buffer(in[1])[c] += sum_gx;
            if (wants(2)) grad_buffer(in[2])[c] += sum_g;
            if (!wants(0)) continue;
            auto gx = grad_buffer(in[0]).values();
            const double g = gamma[c];
            for (std::size_t b = 0; b < lay.batch; ++b) {
                const std::size_t off = (b * lay.channels + c) * lay.length;
                for (std::size_t t = 0; t < lay.length; ++t) {
                    if (at.training) {
                        const double xh = (x[off + t] - mean) * inv;
                        gx[off + t] += g * inv * (gy[off + t] - sum_g / count - xh * sum_gx / count);
                    } else {
                        gx[off + t] += g * inv * gy[off + t];
                    }
                }
            }
        }
        return;
    }
    case OpKind::LayerMeanPool: {
        if (!wants(0)) return;
        const std::size_t len = val(0).shape().back();
        auto gx = grad_buffer(in[0]).values();
        for (std::size_t r = 0; r < gy.size(); ++r) {
            const double g = gy[r] / static_cast<double>(len);
            for (std::size_t t = 0; t < len; ++t) gx[r * len + t] += g;
        }
        return;
    }
    case OpKind::Reshape: {
        if (!wants(0)) return;
        auto gx = grad_buffer(in[0]).values();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        return;
    }
    case OpKind::UpsampleNearest: {
        if (!wants(0)) return;
        const std::size_t len = val(0).shape().back();
        auto gx = grad_buffer(in[0]).values();
        const std::size_t rows = gx.size() / len;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t t = 0; t < len * at.factor; ++t) gx[r * len + t / at.factor] += gy[r * len * at.factor + t];
        }
        return;
    }
    case OpKind::Concat: {
        const std::size_t axis = at.axis.value_or(0);
        const auto outer = split_axis(node.value.shape(), axis);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const auto sp = split_axis(val(i).shape(), axis);
            if (wants(i)) {
                auto gx = grad_buffer(in[i]).values();
                const std::size_t block = sp.n * sp.inner;
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    const double* src = gy.values().data() + o * outer.n * outer.inner + offset * outer.inner;
                    for (std::size_t j = 0; j < block; ++j) gx[o * block + j] += src[j];
                }
            }
            offset += sp.n;
        }
        return;
    }
    case OpKind::Slice: {
        if (!wants(0)) return;
        const std::size_t axis = at.axis.value_or(0);
        const auto sp = split_axis(val(0).shape(), axis);
        const std::size_t block = (at.stop - at.start) * sp.inner;
        auto gx = grad_buffer(in[0]).values();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            double* dst = gx.data() + o * sp.n * sp.inner + at.start * sp.inner;
            for (std::size_t j = 0; j < block; ++j) dst[j] += gy[o * block + j];
        }
        return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
        if (!wants(0)) return;
        const Tensor& x = val(0);
        auto gx = grad_buffer(in[0]).values();
        if (!at.axis) {
            const double g = node.kind == OpKind::Mean ? gy[0] / static_cast<double>(x.size()) : gy[0];
            for (double& e : gx) e += g;
            return;
        }
        const auto sp = split_axis(x.shape(), *at.axis);
        const double scale = node.kind == OpKind::Mean ? 1.0 / static_cast<double>(sp.n) : 1.0;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t j = 0; j < sp.n; ++j) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    gx[(o * sp.n + j) * sp.inner + i] += gy[o * sp.inner + i] * scale;
                }
            }
        }
        return;
    }
    case OpKind::SqL2: {
        if (!wants(0)) return;
        const Tensor& x = val(0);
        auto gx = grad_buffer(in[0]).values();
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += 2.0 * x[i] * gy[0];
        return;
    }
    case OpKind::CosineSim: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        const std::size_t f = a.shape().back();
        for (std::size_t r = 0; r < a.size() / f; ++r) {
            const double na = node.aux[2 * r], nb = node.aux[2 * r + 1];
            const double cs = node.value[r];
            const double g = gy[r];
            for (std::size_t j = 0; j < f; ++j) {
                const double x = a[r * f + j], y = b[r * f + j];
                if (wants(0)) grad_buffer(in[0])[r * f + j] += g * (y / (na * nb) - cs * x / (na * na));
                if (wants(1)) grad_buffer(in[1])[r * f + j] += g * (x / (na * nb) - cs * y / (nb * nb));
            }
        }
        return;
    }
    case OpKind::JumpRelu:
    case OpKind::Step: {
        const Tensor& u = val(0);
        const Tensor& phi = val(1);
        const std::size_t d = phi.size();
        const double eps = at.ste_eps;
        const double kernel = 1.0 / (2.0 * eps);
        const bool jump = node.kind == OpKind::JumpRelu;
        if (wants(0) && jump) {
            auto gu = grad_buffer(in[0]).values();
            for (std::size_t i = 0; i < u.size(); ++i) {
                if (u[i] > phi[i % d]) gu[i] += gy[i];
            }
        }
        if (wants(1)) {
            auto gp = grad_buffer(in[1]).values();
            for (std::size_t i = 0; i < u.size(); ++i) {
                const double p = phi[i % d];
                if (std::abs(u[i] - p) < eps) gp[i % d] += gy[i] * (jump ? -p * kernel : -kernel);
            }
        }
        return;
    }
    case OpKind::External: {
        if (!wants(0)) return;
        if (!at.external->vjp) throw std::logic_error("external op '" + at.external->name + "' has no gradient");
        const Tensor gx = at.external->vjp(val(0), node.value, gy);
        auto dst = grad_buffer(in[0]).values();
        if (gx.size() != dst.size()) throw std::logic_error("external op vjp returned wrong shape");
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gx[i];
        return;
    }
    case OpKind::Leaf:
        return;
    }
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_b) {
    OpAttrs at;
    at.transpose_b = transpose_b;
    const NodeId ins[] = {a, b};
    return apply(OpKind::MatMul, ins, at);
}

NodeId Graph::add(NodeId a, NodeId b) {
    const NodeId ins[] = {a, b};
    return apply(OpKind::Add, ins);
}

NodeId Graph::sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }

NodeId Graph::mul(NodeId a, NodeId b) {
    const NodeId ins[] = {a, b};
    return apply(OpKind::Mul, ins);
}

NodeId Graph::scale(NodeId a, double s) { return mul(a, constant(Tensor::scalar(s))); }

NodeId Graph::add_scalar(NodeId a, double s) { return add(a, constant(Tensor::scalar(s))); }

NodeId Graph::conv1d(NodeId x, NodeId w, std::size_t dilation) {
    OpAttrs at;
    at.dilation = dilation;
    const NodeId ins[] = {x, w};
    return apply(OpKind::Conv1dDilated, ins, at);
}

NodeId Graph::leaky_relu(NodeId x, double slope) {
    OpAttrs at;
    at.slope = slope;
    const NodeId ins[] = {x};
    return apply(OpKind::LeakyRelu, ins, at);
}

NodeId Graph::relu(NodeId x) {
    const NodeId ins[] = {x};
    return apply(OpKind::Relu, ins);
}

NodeId Graph::sigmoid(NodeId x) {
    const NodeId ins[] = {x};
    return apply(OpKind::Sigmoid, ins);
}

NodeId Graph::softmax(NodeId x) {
    const NodeId ins[] = {x};
    return apply(OpKind::Softmax, ins);
}

NodeId Graph::batch_norm(NodeId x, NodeId gamma, NodeId beta, BatchNormState& state, bool training,
                         bool update_stats) {
    OpAttrs at;
    at.bn = &state;
    at.training = training;
    at.update_stats = update_stats;
    const NodeId ins[] = {x, gamma, beta};
    return apply(OpKind::BatchNorm, ins, at);
}

NodeId Graph::mean_pool(NodeId x) {
    const NodeId ins[] = {x};
    return apply(OpKind::LayerMeanPool, ins);
}

NodeId Graph::reshape(NodeId x, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    const NodeId ins[] = {x};
    return apply(OpKind::Reshape, ins, at);
}

NodeId Graph::upsample(NodeId x, std::size_t factor) {
    OpAttrs at;
    at.factor = factor;
    const NodeId ins[] = {x};
    return apply(OpKind::UpsampleNearest, ins, at);
}

NodeId Graph::concat(std::span<const NodeId> xs, std::size_t axis) {
    OpAttrs at;
    at.axis = axis;
    return apply(OpKind::Concat, xs, at);
}

NodeId Graph::slice(NodeId x, std::size_t axis, std::size_t start, std::size_t stop) {
    OpAttrs at;
    at.axis = axis;
    at.start = start;
    at.stop = stop;
    const NodeId ins[] = {x};
    return apply(OpKind::Slice, ins, at);
}

NodeId Graph::sum(NodeId x, std::optional<std::size_t> axis) {
    OpAttrs at;
    at.axis = axis;
    const NodeId ins[] = {x};
    return apply(OpKind::Sum, ins, at);
}

NodeId Graph::mean(NodeId x, std::optional<std::size_t> axis) {
    OpAttrs at;
    at.axis = axis;
    const NodeId ins[] = {x};
    return apply(OpKind::Mean, ins, at);
}

NodeId Graph::sq_l2(NodeId x) {
    const NodeId ins[] = {x};
    return apply(OpKind::SqL2, ins);
}

NodeId Graph::log(NodeId x) {
    const NodeId ins[] = {x};
    return apply(OpKind::Log, ins);
}

NodeId Graph::exp(NodeId x) {
    const NodeId ins[] = {x};
    return apply(OpKind::Exp, ins);
}

NodeId Graph::cosine_sim(NodeId a, NodeId b) {
    const NodeId ins[] = {a, b};
    return apply(OpKind::CosineSim, ins);
}

NodeId Graph::jumprelu(NodeId u, NodeId phi, double ste_eps) {
    OpAttrs at;
    at.ste_eps = ste_eps;
    const NodeId ins[] = {u, phi};
    return apply(OpKind::JumpRelu, ins, at);
}

NodeId Graph::step(NodeId u, NodeId phi, double ste_eps) {
    OpAttrs at;
    at.ste_eps = ste_eps;
    const NodeId ins[] = {u, phi};
    return apply(OpKind::Step, ins, at);
}

NodeId Graph::external(NodeId x, std::shared_ptr<const ExternalFunction> fn) {
    OpAttrs at;
    at.external = std::move(fn);
    const NodeId ins[] = {x};
    return apply(OpKind::External, ins, at);
}

}  // namespace tsae
