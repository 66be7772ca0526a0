#pragma once

// Learned conformity score over the shared input embedding of [x | y]:
// the MLP hidden layers (d -> 2d -> d) run per joint token, the hidden
// features are mean-pooled over frames and joints, and a sigmoid head maps
// the pooled d-vector to (0,1). Higher = more plausible. Pooling after the
// hidden layers keeps the score sequence-length invariant while letting
// each token contribute nonlinear features; a single token already sees
// whether its 3D joint reprojects onto its 2D keypoint.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "poselift/ndgrad.hpp"
#include "poselift/pose.hpp"
#include "poselift/posenet.hpp"

namespace poselift::scorer {

using ndgrad::Array;
using ndgrad::Binder;
using ndgrad::Param;
using ndgrad::Tape;

struct ScorerParams {
    long embed_dim = 0;
    Param w1, b1, w2, b2, w3, b3;

    std::vector<Param*> all() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
};

inline ScorerParams init_scorer(long embed_dim, std::uint64_t seed) {
    if (embed_dim < 1) throw std::invalid_argument("init_scorer: bad embed_dim");
    ScorerParams p;
    p.embed_dim = embed_dim;
    auto eng = rng::engine(seed, "init.scorer");
    const long d = embed_dim;
    p.w1 = posenet::detail::make_param("sc.w1", {d, 2 * d}, eng);
    p.b1 = posenet::detail::make_param("sc.b1", {2 * d}, eng);
    p.w2 = posenet::detail::make_param("sc.w2", {2 * d, d}, eng);
    p.b2 = posenet::detail::make_param("sc.b2", {d}, eng);
    p.w3 = posenet::detail::make_param("sc.w3", {d, 1}, eng);
    p.b3 = posenet::detail::make_param("sc.b3", {1}, eng);
    // Hidden biases start away from zero: the pooled mean of a zero-bias
    // tanh feature is blind to the spread of its input, and spread is the
    // main cue separating noisy hypotheses from ground truth.
    std::uniform_real_distribution<double> bias(-0.3, 0.3);
    for (auto& v : p.b1.value) v = bias(eng);
    for (auto& v : p.b2.value) v = bias(eng);
    return p;
}

struct BoundScorer {
    Array w1, b1, w2, b2, w3, b3;
};

inline BoundScorer bind(Binder& binder, ScorerParams& p) {
    return {binder.bind(p.w1), binder.bind(p.b1), binder.bind(p.w2),
            binder.bind(p.b2), binder.bind(p.w3), binder.bind(p.b3)};
}

// Score from raw embedding tokens (R, d): per-token hidden layers, mean
// pool, sigmoid head.
inline Array score_tokens_tape(const BoundScorer& s, Array tokens) {
    using namespace ndgrad;
    const long d = tokens.shape().back();
    Array h1 = ndgrad::tanh(add(matmul(tokens, s.w1), s.b1));  // (R, 2d)
    Array h2 = ndgrad::tanh(add(matmul(h1, s.w2), s.b2));      // (R, d)
    Array pooled = mean(h2, 0);                                // (d)
    Array out = sigmoid(add(matmul(reshape(pooled, {1, d}), s.w3), s.b3));
    return reshape(out, {});
}

// Full conformity score of a (possibly on-tape) pose sequence y given x.
// Differentiable w.r.t. scorer params, the shared embedding params, and y.
inline Array conformity_score_tape(Tape& tape, Array emb_w, Array emb_b, const BoundScorer& s,
                                   const PoseSeq2D& x, Array y) {
    for (double v : y.data())
        if (!std::isfinite(v)) throw std::invalid_argument("conformity_score: non-finite pose input");
    if (!x.finite()) throw std::invalid_argument("conformity_score: non-finite 2D input");
    Array e = posenet::embed_input_tape(tape, emb_w, emb_b, x, y);  // (N*J, d)
    return score_tokens_tape(s, e);
}

inline double conformity_score_plain(const posenet::DenoiserParams& den, const ScorerParams& sc,
                                     const PoseSeq2D& x, const std::vector<double>& y) {
    for (double v : y)
        if (!std::isfinite(v)) throw std::invalid_argument("conformity_score: non-finite pose input");
    if (!x.finite()) throw std::invalid_argument("conformity_score: non-finite 2D input");
    const long d = sc.embed_dim;
    std::vector<double> e = posenet::embed_input_plain(den, x, y);
    const long rows = static_cast<long>(e.size()) / d;
    std::vector<double> h1(static_cast<std::size_t>(rows * 2 * d), 0.0);
    posenet::detail::mm_acc(e.data(), rows, d, sc.w1.value.data(), 2 * d, h1.data());
    posenet::detail::add_bias_rows(h1, sc.b1.value);
    for (auto& v : h1) v = std::tanh(v);
    std::vector<double> h2(static_cast<std::size_t>(rows * d), 0.0);
    posenet::detail::mm_acc(h1.data(), rows, 2 * d, sc.w2.value.data(), d, h2.data());
    posenet::detail::add_bias_rows(h2, sc.b2.value);
    for (auto& v : h2) v = std::tanh(v);
    // mean pool over tokens, matching the tape's row-accumulation order
    std::vector<double> pooled(static_cast<std::size_t>(d), 0.0);
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < d; ++c) pooled[static_cast<std::size_t>(c)] += h2[static_cast<std::size_t>(r * d + c)];
    for (auto& v : pooled) v /= static_cast<double>(rows);
    double acc = 0.0;
    for (long i = 0; i < d; ++i) acc += pooled[static_cast<std::size_t>(i)] * sc.w3.value[static_cast<std::size_t>(i)];
    const double out = acc + sc.b3.value[0];
    return 1.0 / (1.0 + std::exp(-out));
}

// (S(gt) - 1)^2 + mean_h S(hyp)^2; expectations taken as means.
inline Array discriminator_loss(Array score_gt, const std::vector<Array>& scores_hyp) {
    if (scores_hyp.empty()) throw std::invalid_argument("discriminator_loss: empty hypothesis score list");
    using namespace ndgrad;
    Array gt_term = square(sadd(score_gt, -1.0));
    Array hyp_term = mean(square(stack(scores_hyp)));
    return add(gt_term, hyp_term);
}

// mean_h (S(hyp) - 1)^2; pushes generated poses toward the real manifold.
inline Array adversarial_loss(const std::vector<Array>& scores_hyp) {
    if (scores_hyp.empty()) throw std::invalid_argument("adversarial_loss: empty hypothesis score list");
    using namespace ndgrad;
    return mean(square(sadd(stack(scores_hyp), -1.0)));
}

}  // namespace poselift::scorer
