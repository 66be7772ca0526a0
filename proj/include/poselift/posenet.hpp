#pragma once

// Denoiser D(y_t, x, t): shared per-joint input embedding of the
// concatenated 2D keypoints and noisy 3D pose, a sinusoidal timestep
// embedding added to every token, then alternating residual MLP mixing
// across the joint axis (spatial) and the frame axis (temporal), and a
// linear head back to 3 coordinates.
//
// Two forward paths exist: an on-tape one for training and a plain one for
// inference. They perform identical floating-point operations in identical
// order, so a trained model scores the same both ways.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "poselift/ndgrad.hpp"
#include "poselift/pose.hpp"
#include "poselift/rng.hpp"

namespace poselift::posenet {

using ndgrad::Array;
using ndgrad::Binder;
using ndgrad::Param;
using ndgrad::Tape;

struct DenoiserConfig {
    long frames = 16;
    long joints = 8;
    long embed_dim = 64;
    long spatial_layers = 2;
    long temporal_layers = 2;
    long hidden_mult = 2;

    void validate() const {
        if (frames < 1 || joints < 1) throw std::invalid_argument("DenoiserConfig: frames and joints must be >= 1");
        if (embed_dim < 8 || embed_dim % 2 != 0)
            throw std::invalid_argument("DenoiserConfig: embed_dim must be even and >= 8");
        if (spatial_layers < 1 || temporal_layers < 1)
            throw std::invalid_argument("DenoiserConfig: layer counts must be >= 1");
        if (hidden_mult < 1) throw std::invalid_argument("DenoiserConfig: hidden_mult must be >= 1");
    }
};

struct MixParams {
    Param w1, b1, w2, b2;
};

struct DenoiserParams {
    DenoiserConfig cfg;
    Param w_in, b_in;    // [5,d], [d]
    Param w_t, b_t;      // [d,d], [d]
    std::vector<MixParams> spatial;   // mix across joints: [J,hJ],[hJ],[hJ,J],[J]
    std::vector<MixParams> temporal;  // mix across frames: [N,hN],[hN],[hN,N],[N]
    Param w_out, b_out;  // [d,3], [3]

    std::vector<Param*> all() {
        std::vector<Param*> ps = {&w_in, &b_in, &w_t, &b_t};
        for (auto& m : spatial) {
            ps.push_back(&m.w1);
            ps.push_back(&m.b1);
            ps.push_back(&m.w2);
            ps.push_back(&m.b2);
        }
        for (auto& m : temporal) {
            ps.push_back(&m.w1);
            ps.push_back(&m.b1);
            ps.push_back(&m.w2);
            ps.push_back(&m.b2);
        }
        ps.push_back(&w_out);
        ps.push_back(&b_out);
        return ps;
    }
};

namespace detail {

inline Param make_param(std::string name, ndgrad::Shape shape, std::mt19937_64& eng) {
    Param p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    const long n = ndgrad::numel(p.shape);
    p.value.resize(static_cast<std::size_t>(n));
    if (p.shape.size() == 1) {
        for (auto& v : p.value) v = 0.0;  // biases start at zero
    } else {
        const double fan_in = static_cast<double>(p.shape[0]);
        const double fan_out = static_cast<double>(p.shape[1]);
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-a, a);
        for (auto& v : p.value) v = dist(eng);
    }
    return p;
}

// C += A (m x k) * B (k x p); C must be zeroed by the caller. Loop order
// matches the tape's MatMul so both paths are bit-identical.
inline void mm_acc(const double* A, long m, long k, const double* B, long p, double* C) {
    for (long i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* crow = C + i * p;
        for (long l = 0; l < k; ++l) {
            const double av = arow[l];
            const double* brow = B + l * p;
            for (long j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void add_bias_rows(std::vector<double>& x, const std::vector<double>& b) {
    const std::size_t w = b.size();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += b[i % w];
}

}  // namespace detail

inline DenoiserParams init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DenoiserParams p;
    p.cfg = cfg;
    auto eng = rng::engine(seed, "init.denoiser");
    const long d = cfg.embed_dim, N = cfg.frames, J = cfg.joints, h = cfg.hidden_mult;
    p.w_in = detail::make_param("den.w_in", {5, d}, eng);
    p.b_in = detail::make_param("den.b_in", {d}, eng);
    p.w_t = detail::make_param("den.w_t", {d, d}, eng);
    p.b_t = detail::make_param("den.b_t", {d}, eng);
    for (long l = 0; l < cfg.spatial_layers; ++l) {
        MixParams m;
        const std::string base = "den.spatial" + std::to_string(l);
        m.w1 = detail::make_param(base + ".w1", {J, h * J}, eng);
        m.b1 = detail::make_param(base + ".b1", {h * J}, eng);
        m.w2 = detail::make_param(base + ".w2", {h * J, J}, eng);
        m.b2 = detail::make_param(base + ".b2", {J}, eng);
        p.spatial.push_back(std::move(m));
    }
    for (long l = 0; l < cfg.temporal_layers; ++l) {
        MixParams m;
        const std::string base = "den.temporal" + std::to_string(l);
        m.w1 = detail::make_param(base + ".w1", {N, h * N}, eng);
        m.b1 = detail::make_param(base + ".b1", {h * N}, eng);
        m.w2 = detail::make_param(base + ".w2", {h * N, N}, eng);
        m.b2 = detail::make_param(base + ".b2", {N}, eng);
        p.temporal.push_back(std::move(m));
    }
    p.w_out = detail::make_param("den.w_out", {d, 3}, eng);
    p.b_out = detail::make_param("den.b_out", {3}, eng);
    return p;
}

// Sinusoidal encoding of the diffusion step, 10000-base frequency ladder.
inline std::vector<double> timestep_encoding(long t, long d) {
    std::vector<double> e(static_cast<std::size_t>(d));
    const long half = d / 2;
    for (long i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * (2.0 * static_cast<double>(i) / static_cast<double>(d)));
        e[static_cast<std::size_t>(2 * i)] = std::sin(static_cast<double>(t) * freq);
        e[static_cast<std::size_t>(2 * i + 1)] = std::cos(static_cast<double>(t) * freq);
    }
    return e;
}

struct BoundMix {
    Array w1, b1, w2, b2;
};

struct BoundDenoiser {
    const DenoiserConfig* cfg = nullptr;
    Array w_in, b_in, w_t, b_t, w_out, b_out;
    std::vector<BoundMix> spatial, temporal;
};

inline BoundDenoiser bind(Binder& binder, DenoiserParams& p) {
    BoundDenoiser b;
    b.cfg = &p.cfg;
    b.w_in = binder.bind(p.w_in);
    b.b_in = binder.bind(p.b_in);
    b.w_t = binder.bind(p.w_t);
    b.b_t = binder.bind(p.b_t);
    for (auto& m : p.spatial) b.spatial.push_back({binder.bind(m.w1), binder.bind(m.b1), binder.bind(m.w2), binder.bind(m.b2)});
    for (auto& m : p.temporal) b.temporal.push_back({binder.bind(m.w1), binder.bind(m.b1), binder.bind(m.w2), binder.bind(m.b2)});
    b.w_out = binder.bind(p.w_out);
    b.b_out = binder.bind(p.b_out);
    return b;
}

// Shared input embedding of [x | y] per joint token; also the front end of
// the conformity scorer. Returns (N*J, d).
inline Array embed_input_tape(Tape& tape, Array w_in, Array b_in, const PoseSeq2D& x, Array y) {
    const long N = x.frames, J = x.joints;
    if (y.shape() != ndgrad::Shape{N, J, 3})
        throw std::invalid_argument("embed_input: y shape " + ndgrad::shape_str(y.shape()) + " does not match x " +
                                    std::to_string(N) + "x" + std::to_string(J));
    Array xl = tape.leaf({N, J, 2}, x.coords);
    Array tok = ndgrad::concat({xl, y});
    Array tok2 = ndgrad::reshape(tok, {N * J, 5});
    return ndgrad::add(ndgrad::matmul(tok2, w_in), b_in);
}

inline std::vector<double> embed_input_plain(const DenoiserParams& p, const PoseSeq2D& x,
                                             const std::vector<double>& y) {
    const long N = x.frames, J = x.joints, d = p.cfg.embed_dim;
    if (static_cast<long>(y.size()) != N * J * 3)
        throw std::invalid_argument("embed_input: y buffer does not match x dims");
    std::vector<double> tok(static_cast<std::size_t>(N * J * 5));
    for (long r = 0; r < N * J; ++r) {
        tok[static_cast<std::size_t>(r * 5 + 0)] = x.coords[static_cast<std::size_t>(r * 2 + 0)];
        tok[static_cast<std::size_t>(r * 5 + 1)] = x.coords[static_cast<std::size_t>(r * 2 + 1)];
        for (long c = 0; c < 3; ++c) tok[static_cast<std::size_t>(r * 5 + 2 + c)] = y[static_cast<std::size_t>(r * 3 + c)];
    }
    std::vector<double> e(static_cast<std::size_t>(N * J * d), 0.0);
    detail::mm_acc(tok.data(), N * J, 5, p.w_in.value.data(), d, e.data());
    detail::add_bias_rows(e, p.b_in.value);
    return e;
}

namespace detail {

// (N,J,d) -> mix across the given axis with a tanh MLP, residual added.
// On-tape version; axis 0 mixes joints (per frame), axis 1 mixes frames
// (per joint).
inline Array mix_tape(Array e, long N, long J, long d, const BoundMix& m, bool over_joints) {
    using namespace ndgrad;
    Array h3 = reshape(e, {N, J, d});
    Array hp = over_joints ? permute(h3, {0, 2, 1})   // (N,d,J)
                           : permute(h3, {1, 2, 0});  // (J,d,N)
    const long rows = over_joints ? N * d : J * d;
    const long mixw = over_joints ? J : N;
    Array hm = reshape(hp, {rows, mixw});
    Array z = ndgrad::tanh(add(matmul(hm, m.w1), m.b1));
    Array z2 = add(matmul(z, m.w2), m.b2);
    Array z3 = reshape(z2, over_joints ? Shape{N, d, J} : Shape{J, d, N});
    Array zp = over_joints ? permute(z3, {0, 2, 1})   // (N,J,d)
                           : permute(z3, {2, 0, 1});  // (N,J,d)
    return add(e, reshape(zp, {N * J, d}));
}

inline void permute_to(const std::vector<double>& in, long d0, long d1, long d2, const long perm[3],
                       std::vector<double>& out) {
    const long dims[3] = {d0, d1, d2};
    const long in_stride[3] = {d1 * d2, d2, 1};
    const long st0 = in_stride[perm[0]], st1 = in_stride[perm[1]], st2 = in_stride[perm[2]];
    const long o0n = dims[perm[0]], o1n = dims[perm[1]], o2n = dims[perm[2]];
    out.resize(in.size());
    long idx = 0;
    for (long o0 = 0; o0 < o0n; ++o0)
        for (long o1 = 0; o1 < o1n; ++o1)
            for (long o2 = 0; o2 < o2n; ++o2) out[static_cast<std::size_t>(idx++)] = in[static_cast<std::size_t>(o0 * st0 + o1 * st1 + o2 * st2)];
}

inline void mix_plain(std::vector<double>& e, long N, long J, long d, const MixParams& m, bool over_joints) {
    const long rows = over_joints ? N * d : J * d;
    const long mixw = over_joints ? J : N;
    const long hidden = m.b1.shape[0];
    static thread_local std::vector<double> hp, z, z2, zp;
    const long perm_fwd_j[3] = {0, 2, 1}, perm_fwd_t[3] = {1, 2, 0};
    permute_to(e, N, J, d, over_joints ? perm_fwd_j : perm_fwd_t, hp);
    z.assign(static_cast<std::size_t>(rows * hidden), 0.0);
    mm_acc(hp.data(), rows, mixw, m.w1.value.data(), hidden, z.data());
    add_bias_rows(z, m.b1.value);
    for (auto& v : z) v = std::tanh(v);
    z2.assign(static_cast<std::size_t>(rows * mixw), 0.0);
    mm_acc(z.data(), rows, hidden, m.w2.value.data(), mixw, z2.data());
    add_bias_rows(z2, m.b2.value);
    const long perm_bwd_j[3] = {0, 2, 1}, perm_bwd_t[3] = {2, 0, 1};
    if (over_joints)
        permute_to(z2, N, d, J, perm_bwd_j, zp);
    else
        permute_to(z2, J, d, N, perm_bwd_t, zp);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += zp[i];
}

}  // namespace detail

// Full denoiser forward on the tape. x and y_t enter as constants; the
// result is differentiable w.r.t. every bound parameter.
inline Array denoise_tape(Tape& tape, const BoundDenoiser& b, const PoseSeq2D& x, const std::vector<double>& y_t,
                          long t) {
    using namespace ndgrad;
    const DenoiserConfig& cfg = *b.cfg;
    const long N = cfg.frames, J = cfg.joints, d = cfg.embed_dim;
    if (x.frames != N || x.joints != J)
        throw std::invalid_argument("denoise: input dims " + std::to_string(x.frames) + "x" + std::to_string(x.joints) +
                                    " do not match config " + std::to_string(N) + "x" + std::to_string(J));
    for (double v : y_t)
        if (!std::isfinite(v)) throw std::invalid_argument("denoise: non-finite y_t input");
    if (!x.finite()) throw std::invalid_argument("denoise: non-finite 2D input");

    Array yl = tape.leaf({N, J, 3}, y_t);
    Array e = embed_input_tape(tape, b.w_in, b.b_in, x, yl);
    Array ts = tape.leaf({1, d}, timestep_encoding(t, d));
    Array tproj = add(matmul(ts, b.w_t), b.b_t);
    e = add(e, reshape(tproj, {d}));
    const std::size_t layers = std::max(b.spatial.size(), b.temporal.size());
    for (std::size_t l = 0; l < layers; ++l) {
        if (l < b.spatial.size()) e = detail::mix_tape(e, N, J, d, b.spatial[l], true);
        if (l < b.temporal.size()) e = detail::mix_tape(e, N, J, d, b.temporal[l], false);
    }
    Array out = add(matmul(e, b.w_out), b.b_out);
    return reshape(out, {N, J, 3});
}

// Tape-free forward, same arithmetic as denoise_tape.
inline std::vector<double> denoise_plain(const DenoiserParams& p, const PoseSeq2D& x, const std::vector<double>& y_t,
                                         long t) {
    const DenoiserConfig& cfg = p.cfg;
    const long N = cfg.frames, J = cfg.joints, d = cfg.embed_dim;
    if (x.frames != N || x.joints != J)
        throw std::invalid_argument("denoise: input dims do not match config");
    for (double v : y_t)
        if (!std::isfinite(v)) throw std::invalid_argument("denoise: non-finite y_t input");
    if (!x.finite()) throw std::invalid_argument("denoise: non-finite 2D input");

    std::vector<double> e = embed_input_plain(p, x, y_t);
    std::vector<double> ts = timestep_encoding(t, d);
    std::vector<double> tproj(static_cast<std::size_t>(d), 0.0);
    detail::mm_acc(ts.data(), 1, d, p.w_t.value.data(), d, tproj.data());
    for (long i = 0; i < d; ++i) tproj[static_cast<std::size_t>(i)] += p.b_t.value[static_cast<std::size_t>(i)];
    detail::add_bias_rows(e, tproj);
    const std::size_t layers = std::max(p.spatial.size(), p.temporal.size());
    for (std::size_t l = 0; l < layers; ++l) {
        if (l < p.spatial.size()) detail::mix_plain(e, N, J, d, p.spatial[l], true);
        if (l < p.temporal.size()) detail::mix_plain(e, N, J, d, p.temporal[l], false);
    }
    std::vector<double> out(static_cast<std::size_t>(N * J * 3), 0.0);
    detail::mm_acc(e.data(), N * J, d, p.w_out.value.data(), 3, out.data());
    detail::add_bias_rows(out, p.b_out.value);
    return out;
}

// Squared Frobenius distance over N*J (coordinate sum not averaged).
inline Array pose_loss(Tape& tape, Array yhat, const std::vector<double>& y0) {
    if (static_cast<long>(y0.size()) != yhat.size())
        throw std::invalid_argument("pose_loss: target size " + std::to_string(y0.size()) +
                                    " does not match prediction " + ndgrad::shape_str(yhat.shape()));
    const ndgrad::Shape& s = yhat.shape();
    if (s.size() != 3 || s[2] != 3) throw std::invalid_argument("pose_loss: expected (N,J,3) prediction");
    Array target = tape.leaf(s, y0);
    const double denom = static_cast<double>(s[0] * s[1]);
    return ndgrad::smul(ndgrad::sum(ndgrad::square(ndgrad::sub(yhat, target))), 1.0 / denom);
}

inline double pose_loss_plain(const std::vector<double>& yhat, const std::vector<double>& y0, long N, long J) {
    if (yhat.size() != y0.size()) throw std::invalid_argument("pose_loss: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < yhat.size(); ++i) {
        const double dv = yhat[i] - y0[i];
        acc += dv * dv;
    }
    return acc / static_cast<double>(N * J);
}

}  // namespace poselift::posenet
