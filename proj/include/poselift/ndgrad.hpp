#pragma once

// Dense-array reverse-mode autodiff on a per-step tape. Nodes are whole
// arrays (row-major f64), the graph is define-by-run and rebuilt every
// training step, and backward walks nodes in exact reverse construction
// order (inputs always precede outputs on the tape).

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace poselift::ndgrad {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

enum class Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul,
    ScalarAdd,
    MatMul,
    Sigmoid,
    Tanh,
    Relu,
    MaxConst,
    Exp,
    Log,
    Square,
    Sqrt,
    SumAxis,   // axis in c0; axis == -1 reduces all to a scalar
    MeanAxis,
    Concat,    // along last axis
    SliceLast, // [c0, c1) of last axis
    Reshape,
    Transpose2,
    Permute3,
};

struct Node {
    Op op = Op::Leaf;
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated on first contribution during backward
    std::vector<int> ins;
    long c0 = 0, c1 = 0;       // op-specific integer params (axis, slice bounds, perm...)
    double s0 = 0.0;           // op-specific scalar param
};

class Tape;

// Lightweight handle into a tape; cheap to copy.
struct Array {
    Tape* tape = nullptr;
    int id = -1;

    const Shape& shape() const;
    std::span<const double> data() const;
    std::span<const double> grad() const;
    long size() const { return numel(shape()); }
    bool is_scalar() const { return shape().empty(); }
    double value() const;  // scalar only
};

class Tape {
  public:
    Tape() { nodes_.reserve(1024); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Array leaf(Shape shape, std::vector<double> data) {
        if (static_cast<long>(data.size()) != numel(shape))
            throw std::invalid_argument("leaf: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        Node n;
        n.op = Op::Leaf;
        n.shape = std::move(shape);
        n.data = std::move(data);
        return push(std::move(n));
    }

    Array scalar(double v) { return leaf({}, {v}); }

    Array push(Node n) {
        nodes_.push_back(std::move(n));
        return Array{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Populates grads of every node reachable from `loss`, accumulating
    // additively across fan-out. Unreachable nodes keep an empty grad.
    void backward(Array loss);

  private:
    std::vector<Node> nodes_;

    std::vector<double>& grad_buf(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
        return n.grad;
    }

    void backprop_node(int id);
};

inline const Shape& Array::shape() const { return tape->node(id).shape; }
inline std::span<const double> Array::data() const { return tape->node(id).data; }
inline std::span<const double> Array::grad() const { return tape->node(id).grad; }
inline double Array::value() const {
    if (!is_scalar()) throw std::invalid_argument("value(): array is not a scalar, shape " + shape_str(shape()));
    return data()[0];
}

namespace detail {

// Elementwise ops allow b to broadcast over leading axes of a: b.shape must
// equal a trailing suffix of a.shape (possibly all of it).
inline bool suffix_of(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    for (std::size_t i = 0; i < b.size(); ++i)
        if (a[a.size() - b.size() + i] != b[i]) return false;
    return true;
}

inline void check_binary(const char* op, const Shape& a, const Shape& b) {
    if (!suffix_of(a, b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                    shape_str(b) + " (b must equal a trailing suffix of a)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op builders

inline Array binary(Op op, const char* name, Array a, Array b) {
    if (a.tape != b.tape) throw std::invalid_argument("operands belong to different tapes");
    detail::check_binary(name, a.shape(), b.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    const long bn = static_cast<long>(bd.size());
    Node n;
    n.op = op;
    n.shape = a.shape();
    n.ins = {a.id, b.id};
    n.data.resize(ad.size());
    switch (op) {
        case Op::Add:
            for (long i = 0; i < static_cast<long>(ad.size()); ++i) n.data[i] = ad[i] + bd[i % bn];
            break;
        case Op::Sub:
            for (long i = 0; i < static_cast<long>(ad.size()); ++i) n.data[i] = ad[i] - bd[i % bn];
            break;
        case Op::Mul:
            for (long i = 0; i < static_cast<long>(ad.size()); ++i) n.data[i] = ad[i] * bd[i % bn];
            break;
        case Op::Div:
            for (long i = 0; i < static_cast<long>(ad.size()); ++i) n.data[i] = ad[i] / bd[i % bn];
            break;
        default:
            throw std::logic_error("binary: bad op");
    }
    return a.tape->push(std::move(n));
}

inline Array add(Array a, Array b) { return binary(Op::Add, "add", a, b); }
inline Array sub(Array a, Array b) { return binary(Op::Sub, "sub", a, b); }
inline Array mul(Array a, Array b) { return binary(Op::Mul, "mul", a, b); }
inline Array div(Array a, Array b) { return binary(Op::Div, "div", a, b); }

inline Array smul(Array a, double c) {
    Node n;
    n.op = Op::ScalarMul;
    n.shape = a.shape();
    n.ins = {a.id};
    n.s0 = c;
    n.data.resize(a.data().size());
    for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = a.data()[i] * c;
    return a.tape->push(std::move(n));
}

inline Array sadd(Array a, double c) {
    Node n;
    n.op = Op::ScalarAdd;
    n.shape = a.shape();
    n.ins = {a.id};
    n.s0 = c;
    n.data.resize(a.data().size());
    for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = a.data()[i] + c;
    return a.tape->push(std::move(n));
}

inline Array matmul(Array a, Array b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
    const long m = sa[0], k = sa[1], p = sb[1];
    Node n;
    n.op = Op::MatMul;
    n.shape = {m, p};
    n.ins = {a.id, b.id};
    n.data.assign(static_cast<std::size_t>(m * p), 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = n.data.data();
    for (long i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* crow = C + i * p;
        for (long l = 0; l < k; ++l) {
            const double av = arow[l];
            const double* brow = B + l * p;
            for (long j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return a.tape->push(std::move(n));
}

inline Array unary(Op op, Array a) {
    Node n;
    n.op = op;
    n.shape = a.shape();
    n.ins = {a.id};
    n.data.resize(a.data().size());
    const auto& x = a.data();
    switch (op) {
        case Op::Sigmoid:
            for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = 1.0 / (1.0 + std::exp(-x[i]));
            break;
        case Op::Tanh:
            for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = std::tanh(x[i]);
            break;
        case Op::Relu:
            for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
        case Op::Exp:
            for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = std::exp(x[i]);
            break;
        case Op::Log:
            for (std::size_t i = 0; i < n.data.size(); ++i) {
                if (!(x[i] > 0.0))
                    throw std::invalid_argument("log: non-positive input " + std::to_string(x[i]) +
                                                "; clamp before taking log");
                n.data[i] = std::log(x[i]);
            }
            break;
        case Op::Square:
            for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = x[i] * x[i];
            break;
        case Op::Sqrt:
            for (std::size_t i = 0; i < n.data.size(); ++i) {
                if (x[i] < 0.0)
                    throw std::invalid_argument("sqrt: negative input " + std::to_string(x[i]));
                n.data[i] = std::sqrt(x[i]);
            }
            break;
        default:
            throw std::logic_error("unary: bad op");
    }
    return a.tape->push(std::move(n));
}

inline Array sigmoid(Array a) { return unary(Op::Sigmoid, a); }
inline Array tanh(Array a) { return unary(Op::Tanh, a); }
inline Array relu(Array a) { return unary(Op::Relu, a); }
inline Array exp(Array a) { return unary(Op::Exp, a); }
inline Array log(Array a) { return unary(Op::Log, a); }
inline Array square(Array a) { return unary(Op::Square, a); }
inline Array sqrt(Array a) { return unary(Op::Sqrt, a); }

inline Array maxc(Array a, double c) {
    Node n;
    n.op = Op::MaxConst;
    n.shape = a.shape();
    n.ins = {a.id};
    n.s0 = c;
    n.data.resize(a.data().size());
    for (std::size_t i = 0; i < n.data.size(); ++i) n.data[i] = a.data()[i] > c ? a.data()[i] : c;
    return a.tape->push(std::move(n));
}

namespace detail {

inline void reduce_dims(const Shape& s, long axis, long& outer, long& len, long& inner) {
    outer = 1;
    inner = 1;
    len = s[static_cast<std::size_t>(axis)];
    for (long i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// axis == -1 reduces over all elements and yields a scalar (shape []).
inline Array reduce(Op op, Array a, long axis) {
    const Shape& s = a.shape();
    if (axis != -1 && (axis < 0 || axis >= static_cast<long>(s.size())))
        throw std::invalid_argument("reduce: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    Node n;
    n.op = op;
    n.ins = {a.id};
    n.c0 = axis;
    const auto& x = a.data();
    if (axis == -1) {
        n.shape = {};
        double acc = 0.0;
        for (double v : x) acc += v;
        if (op == Op::MeanAxis) acc /= static_cast<double>(x.size());
        n.data = {acc};
    } else {
        long outer, len, inner;
        detail::reduce_dims(s, axis, outer, len, inner);
        n.shape = s;
        n.shape.erase(n.shape.begin() + axis);
        n.data.assign(static_cast<std::size_t>(outer * inner), 0.0);
        for (long o = 0; o < outer; ++o)
            for (long l = 0; l < len; ++l) {
                const double* src = x.data() + (o * len + l) * inner;
                double* dst = n.data.data() + o * inner;
                for (long i = 0; i < inner; ++i) dst[i] += src[i];
            }
        if (op == Op::MeanAxis)
            for (auto& v : n.data) v /= static_cast<double>(len);
    }
    return a.tape->push(std::move(n));
}

inline Array sum(Array a, long axis = -1) { return reduce(Op::SumAxis, a, axis); }
inline Array mean(Array a, long axis = -1) { return reduce(Op::MeanAxis, a, axis); }

inline Array concat(const std::vector<Array>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input list");
    Tape* tape = parts[0].tape;
    Shape lead = parts[0].shape();
    if (lead.empty()) lead = {1};  // scalars concatenate into a vector
    long last_total = 0;
    for (const Array& p : parts) {
        Shape ps = p.shape();
        if (ps.empty()) ps = {1};
        if (ps.size() != lead.size())
            throw std::invalid_argument("concat: rank mismatch " + shape_str(lead) + " vs " + shape_str(ps));
        for (std::size_t i = 0; i + 1 < ps.size(); ++i)
            if (ps[i] != lead[i])
                throw std::invalid_argument("concat: leading dims differ " + shape_str(lead) + " vs " +
                                            shape_str(ps));
        last_total += ps.back();
    }
    Node n;
    n.op = Op::Concat;
    n.shape = lead;
    n.shape.back() = last_total;
    for (const Array& p : parts) n.ins.push_back(p.id);
    n.data.resize(static_cast<std::size_t>(numel(n.shape)));
    long rows = numel(n.shape) / last_total;
    long off = 0;
    for (const Array& p : parts) {
        const long w = p.shape().empty() ? 1 : p.shape().back();
        const auto& src = p.data();
        for (long r = 0; r < rows; ++r)
            for (long j = 0; j < w; ++j) n.data[static_cast<std::size_t>(r * last_total + off + j)] = src[static_cast<std::size_t>(r * w + j)];
        off += w;
    }
    return tape->push(std::move(n));
}

// Stacks scalar nodes into a length-n vector.
inline Array stack(const std::vector<Array>& scalars) {
    for (const Array& s : scalars)
        if (!s.is_scalar()) throw std::invalid_argument("stack: all inputs must be scalars");
    return concat(scalars);
}

inline Array slice_last(Array a, long from, long to) {
    const Shape& s = a.shape();
    if (s.empty() || from < 0 || to > s.back() || from >= to)
        throw std::invalid_argument("slice_last: bad range [" + std::to_string(from) + "," + std::to_string(to) +
                                    ") for shape " + shape_str(s));
    Node n;
    n.op = Op::SliceLast;
    n.shape = s;
    n.shape.back() = to - from;
    n.ins = {a.id};
    n.c0 = from;
    n.c1 = to;
    const long w = s.back(), rows = numel(s) / w, ow = to - from;
    n.data.resize(static_cast<std::size_t>(rows * ow));
    for (long r = 0; r < rows; ++r)
        for (long j = 0; j < ow; ++j) n.data[static_cast<std::size_t>(r * ow + j)] = a.data()[static_cast<std::size_t>(r * w + from + j)];
    return a.tape->push(std::move(n));
}

inline Array reshape(Array a, Shape to) {
    if (numel(to) != a.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(to));
    Node n;
    n.op = Op::Reshape;
    n.shape = std::move(to);
    n.ins = {a.id};
    n.data.assign(a.data().begin(), a.data().end());
    return a.tape->push(std::move(n));
}

inline Array transpose(Array a) {
    const Shape& s = a.shape();
    if (s.size() != 2) throw std::invalid_argument("transpose: expected rank-2, got " + shape_str(s));
    const long m = s[0], k = s[1];
    Node n;
    n.op = Op::Transpose2;
    n.shape = {k, m};
    n.ins = {a.id};
    n.data.resize(a.data().size());
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < k; ++j) n.data[static_cast<std::size_t>(j * m + i)] = a.data()[static_cast<std::size_t>(i * k + j)];
    return a.tape->push(std::move(n));
}

// out.dims[k] = a.dims[perm[k]]; out[o] = a[m] with m[perm[k]] = o[k].
inline Array permute(Array a, const Shape& perm) {
    const Shape& s = a.shape();
    if (s.size() != 3 || perm.size() != 3)
        throw std::invalid_argument("permute: expected rank-3, got " + shape_str(s));
    Shape seen = {0, 0, 0};
    for (long p : perm) {
        if (p < 0 || p > 2) throw std::invalid_argument("permute: bad axis order");
        seen[static_cast<std::size_t>(p)]++;
    }
    if (seen != Shape{1, 1, 1}) throw std::invalid_argument("permute: axis order must be a permutation of 0,1,2");
    Node n;
    n.op = Op::Permute3;
    n.shape = {s[static_cast<std::size_t>(perm[0])], s[static_cast<std::size_t>(perm[1])], s[static_cast<std::size_t>(perm[2])]};
    n.ins = {a.id};
    n.c0 = perm[0] * 9 + perm[1] * 3 + perm[2];  // packed
    n.data.resize(a.data().size());
    const long in_stride[3] = {s[1] * s[2], s[2], 1};
    const long st0 = in_stride[perm[0]], st1 = in_stride[perm[1]], st2 = in_stride[perm[2]];
    const double* src = a.data().data();
    double* dst = n.data.data();
    long idx = 0;
    for (long o0 = 0; o0 < n.shape[0]; ++o0)
        for (long o1 = 0; o1 < n.shape[1]; ++o1)
            for (long o2 = 0; o2 < n.shape[2]; ++o2) dst[idx++] = src[o0 * st0 + o1 * st1 + o2 * st2];
    return a.tape->push(std::move(n));
}

// Cuts the gradient path: returns a fresh leaf holding a copy of the values.
inline Array detach(Array a) {
    return a.tape->leaf(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
}

// ---------------------------------------------------------------------------
// backward

inline void Tape::backprop_node(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    const std::vector<double>& g = n.grad;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add:
        case Op::Sub: {
            auto& ga = grad_buf(n.ins[0]);
            auto& gb = grad_buf(n.ins[1]);
            const long bn = static_cast<long>(gb.size());
            const double sgn = n.op == Op::Sub ? -1.0 : 1.0;
            for (long i = 0; i < static_cast<long>(g.size()); ++i) {
                ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
                gb[static_cast<std::size_t>(i % bn)] += sgn * g[static_cast<std::size_t>(i)];
            }
            break;
        }
        case Op::Mul:
        case Op::Div: {
            auto& ga = grad_buf(n.ins[0]);
            auto& gb = grad_buf(n.ins[1]);
            const auto& ad = nodes_[static_cast<std::size_t>(n.ins[0])].data;
            const auto& bd = nodes_[static_cast<std::size_t>(n.ins[1])].data;
            const long bn = static_cast<long>(bd.size());
            for (long i = 0; i < static_cast<long>(g.size()); ++i) {
                const double gi = g[static_cast<std::size_t>(i)];
                const double b = bd[static_cast<std::size_t>(i % bn)];
                if (n.op == Op::Mul) {
                    ga[static_cast<std::size_t>(i)] += gi * b;
                    gb[static_cast<std::size_t>(i % bn)] += gi * ad[static_cast<std::size_t>(i)];
                } else {
                    ga[static_cast<std::size_t>(i)] += gi / b;
                    gb[static_cast<std::size_t>(i % bn)] -= gi * ad[static_cast<std::size_t>(i)] / (b * b);
                }
            }
            break;
        }
        case Op::ScalarMul: {
            auto& ga = grad_buf(n.ins[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.s0 * g[i];
            break;
        }
        case Op::ScalarAdd: {
            auto& ga = grad_buf(n.ins[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            break;
        }
        case Op::MatMul: {
            const Node& na = nodes_[static_cast<std::size_t>(n.ins[0])];
            const Node& nb = nodes_[static_cast<std::size_t>(n.ins[1])];
            const long m = na.shape[0], k = na.shape[1], p = nb.shape[1];
            auto& ga = grad_buf(n.ins[0]);
            auto& gb = grad_buf(n.ins[1]);
            const double* A = na.data.data();
            const double* B = nb.data.data();
            const double* G = g.data();
            // dA = G * B^T
            for (long i = 0; i < m; ++i) {
                const double* grow = G + i * p;
                double* garow = ga.data() + i * k;
                for (long l = 0; l < k; ++l) {
                    const double* brow = B + l * p;
                    double acc = 0.0;
                    for (long j = 0; j < p; ++j) acc += grow[j] * brow[j];
                    garow[l] += acc;
                }
            }
            // dB = A^T * G
            for (long i = 0; i < m; ++i) {
                const double* arow = A + i * k;
                const double* grow = G + i * p;
                for (long l = 0; l < k; ++l) {
                    const double av = arow[l];
                    double* gbrow = gb.data() + l * p;
                    for (long j = 0; j < p; ++j) gbrow[j] += av * grow[j];
                }
            }
            break;
        }
        case Op::Sigmoid: {
            auto& ga = grad_buf(n.ins[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.data[i] * (1.0 - n.data[i]);
            break;
        }
        case Op::Tanh: {
            auto& ga = grad_buf(n.ins[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - n.data[i] * n.data[i]);
            break;
        }
        case Op::Relu: {
            auto& ga = grad_buf(n.ins[0]);
            const auto& x = nodes_[static_cast<std::size_t>(n.ins[0])].data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
            break;
        }
        case Op::MaxConst: {
            auto& ga = grad_buf(n.ins[0]);
            const auto& x = nodes_[static_cast<std::size_t>(n.ins[0])].data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > n.s0 ? g[i] : 0.0;
            break;
        }
        case Op::Exp: {
            auto& ga = grad_buf(n.ins[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.data[i];
            break;
        }
        case Op::Log: {
            auto& ga = grad_buf(n.ins[0]);
            const auto& x = nodes_[static_cast<std::size_t>(n.ins[0])].data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
            break;
        }
        case Op::Square: {
            auto& ga = grad_buf(n.ins[0]);
            const auto& x = nodes_[static_cast<std::size_t>(n.ins[0])].data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
            break;
        }
        case Op::Sqrt: {
            auto& ga = grad_buf(n.ins[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 0.5 / n.data[i] * g[i];
            break;
        }
        case Op::SumAxis:
        case Op::MeanAxis: {
            auto& ga = grad_buf(n.ins[0]);
            const Shape& is = nodes_[static_cast<std::size_t>(n.ins[0])].shape;
            if (n.c0 == -1) {
                const double gv = n.op == Op::MeanAxis ? g[0] / static_cast<double>(ga.size()) : g[0];
                for (auto& v : ga) v += gv;
            } else {
                long outer, len, inner;
                detail::reduce_dims(is, n.c0, outer, len, inner);
                const double scale = n.op == Op::MeanAxis ? 1.0 / static_cast<double>(len) : 1.0;
                for (long o = 0; o < outer; ++o)
                    for (long l = 0; l < len; ++l) {
                        const double* gsrc = g.data() + o * inner;
                        double* gdst = ga.data() + (o * len + l) * inner;
                        for (long i = 0; i < inner; ++i) gdst[i] += scale * gsrc[i];
                    }
            }
            break;
        }
        case Op::Concat: {
            const long w_total = n.shape.back();
            const long rows = numel(n.shape) / w_total;
            long off = 0;
            for (int in_id : n.ins) {
                auto& gi = grad_buf(in_id);
                const Shape& is = nodes_[static_cast<std::size_t>(in_id)].shape;
                const long w = is.empty() ? 1 : is.back();
                for (long r = 0; r < rows; ++r)
                    for (long j = 0; j < w; ++j) gi[static_cast<std::size_t>(r * w + j)] += g[static_cast<std::size_t>(r * w_total + off + j)];
                off += w;
            }
            break;
        }
        case Op::SliceLast: {
            auto& ga = grad_buf(n.ins[0]);
            const Shape& is = nodes_[static_cast<std::size_t>(n.ins[0])].shape;
            const long w = is.back(), ow = n.c1 - n.c0, rows = numel(is) / w;
            for (long r = 0; r < rows; ++r)
                for (long j = 0; j < ow; ++j) ga[static_cast<std::size_t>(r * w + n.c0 + j)] += g[static_cast<std::size_t>(r * ow + j)];
            break;
        }
        case Op::Reshape: {
            auto& ga = grad_buf(n.ins[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            break;
        }
        case Op::Transpose2: {
            auto& ga = grad_buf(n.ins[0]);
            const long k = n.shape[0], m = n.shape[1];  // output is (k, m)
            for (long j = 0; j < k; ++j)
                for (long i = 0; i < m; ++i) ga[static_cast<std::size_t>(i * k + j)] += g[static_cast<std::size_t>(j * m + i)];
            break;
        }
        case Op::Permute3: {
            auto& ga = grad_buf(n.ins[0]);
            const Shape& is = nodes_[static_cast<std::size_t>(n.ins[0])].shape;
            const long perm[3] = {n.c0 / 9, (n.c0 / 3) % 3, n.c0 % 3};
            const long in_stride[3] = {is[1] * is[2], is[2], 1};
            const long st0 = in_stride[perm[0]], st1 = in_stride[perm[1]], st2 = in_stride[perm[2]];
            long idx = 0;
            for (long o0 = 0; o0 < n.shape[0]; ++o0)
                for (long o1 = 0; o1 < n.shape[1]; ++o1)
                    for (long o2 = 0; o2 < n.shape[2]; ++o2) ga[static_cast<std::size_t>(o0 * st0 + o1 * st1 + o2 * st2)] += g[static_cast<std::size_t>(idx++)];
            break;
        }
    }
}

inline void Tape::backward(Array loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
    if (!loss.is_scalar())
        throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    grad_buf(loss.id)[0] += 1.0;
    // Inputs always have smaller ids, so one reverse sweep is a valid
    // reverse-topological visit; nodes with an empty grad were never reached.
    for (int id = loss.id; id >= 0; --id) {
        if (nodes_[static_cast<std::size_t>(id)].grad.empty()) continue;
        backprop_node(id);
    }
}

// ---------------------------------------------------------------------------
// Long-lived trainable parameters. Values persist across tapes; a Binder maps
// each parameter to exactly one leaf per tape so gradients from every use
// within a step accumulate in one place.

struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    // Adam state, managed by the optimizer.
    std::vector<double> m, v;

    long size() const { return numel(shape); }
};

class Binder {
  public:
    explicit Binder(Tape& tape) : tape_(&tape) {}

    Array bind(Param& p) {
        auto it = bound_.find(&p);
        if (it != bound_.end()) return it->second;
        Array leaf = tape_->leaf(p.shape, p.value);
        bound_.emplace(&p, leaf);
        return leaf;
    }

    // Gradient of the bound leaf; empty span if the parameter never received one.
    std::span<const double> grad_of(Param& p) const {
        auto it = bound_.find(&p);
        if (it == bound_.end()) return {};
        return it->second.grad();
    }

    bool has(Param& p) const { return bound_.count(&p) > 0; }

  private:
    Tape* tape_;
    std::unordered_map<Param*, Array> bound_;
};

}  // namespace poselift::ndgrad
