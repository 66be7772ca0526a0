#pragma once

// Conformal prediction, twice: a differentiable simulation used inside the
// training loss (soft ranks -> soft quantile -> soft set membership ->
// inefficiency), and the standard split-CP path used at inference (order
// statistic threshold, hard prediction sets, empirical coverage).
//
// Scores are conformity scores (higher = better) and the prediction set
// keeps {y : score(y) >= tau}, so tau is a LOWER quantile of the
// calibration scores: k-th smallest with k = floor(alpha * (n + 1)).

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "poselift/aggregate.hpp"
#include "poselift/ndgrad.hpp"

namespace poselift::conformal {

using ndgrad::Array;
using ndgrad::Tape;

struct SoftCPConfig {
    double alpha = 0.1;      // miscoverage level; target coverage 1 - alpha
    double eta_sig = 0.1;    // sigmoid temperature for set membership
    double eta_rank = 0.1;   // temperature for pairwise soft ranking
    double kappa = 1.0;      // singleton allowance inside the inefficiency
    double size_eps = 1e-8;  // floor inside the log of the size loss

    void validate() const {
        if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("SoftCPConfig: alpha must lie in (0,1)");
        if (eta_sig <= 0.0 || eta_rank <= 0.0)
            throw std::invalid_argument("SoftCPConfig: temperatures must be strictly positive");
        if (kappa < 0.0) throw std::invalid_argument("SoftCPConfig: kappa must be >= 0");
        if (size_eps <= 0.0) throw std::invalid_argument("SoftCPConfig: size_eps must be positive");
    }
};

struct CalibrationResult {
    double tau = 0.0;
    double alpha = 0.1;
    long n_cal = 0;
    std::vector<double> scores;  // sorted ascending
};

inline long quantile_index(double alpha, long n) {
    long k = static_cast<long>(std::floor(alpha * static_cast<double>(n + 1)));
    return std::min(std::max(k, 1L), n);
}

inline double hard_quantile_tau(const std::vector<double>& cal_scores, double alpha) {
    if (cal_scores.empty()) throw std::invalid_argument("hard_quantile_tau: empty calibration set");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("hard_quantile_tau: alpha must lie in (0,1)");
    std::vector<double> sorted = cal_scores;
    std::sort(sorted.begin(), sorted.end());
    const long k = quantile_index(alpha, static_cast<long>(sorted.size()));
    return sorted[static_cast<std::size_t>(k - 1)];
}

inline CalibrationResult calibrate(const std::vector<double>& cal_scores, double alpha) {
    CalibrationResult r;
    r.tau = hard_quantile_tau(cal_scores, alpha);
    r.alpha = alpha;
    r.n_cal = static_cast<long>(cal_scores.size());
    r.scores = cal_scores;
    std::sort(r.scores.begin(), r.scores.end());
    return r;
}

// Differentiable quantile: soft rank each score via pairwise sigmoids, then
// softmax-weight the scores by closeness of rank to the target
// k* = alpha * (n + 1). Smoothly approaches hard_quantile_tau as
// eta_rank -> 0 on well-separated scores.
inline Array soft_quantile_tau(Tape& tape, Array scores, const SoftCPConfig& cfg) {
    cfg.validate();
    if (scores.shape().size() != 1)
        throw std::invalid_argument("soft_quantile_tau: expected a rank-1 score array");
    const long n = scores.shape()[0];
    if (n < 2) throw std::invalid_argument("soft_quantile_tau: need at least 2 calibration scores");
    using namespace ndgrad;
    Array ones_col = tape.leaf({n, 1}, std::vector<double>(static_cast<std::size_t>(n), 1.0));
    Array ones_row = tape.leaf({1, n}, std::vector<double>(static_cast<std::size_t>(n), 1.0));
    Array s_col = reshape(scores, {n, 1});
    Array s_row = reshape(scores, {1, n});
    Array by_row = matmul(s_col, ones_row);  // (n,n), entry (i,j) = s_i
    Array by_col = matmul(ones_col, s_row);  // (n,n), entry (i,j) = s_j
    Array pair = sigmoid(smul(sub(by_row, by_col), 1.0 / cfg.eta_rank));
    // diagonal contributes sigmoid(0) = 0.5, so rank = 1 + rowsum - 0.5
    Array ranks = sadd(sum(pair, 1), 0.5);  // (n)
    const double k_star = cfg.alpha * static_cast<double>(n + 1);
    Array dist = smul(square(sadd(ranks, -k_star)), -1.0 / cfg.eta_rank);
    // softmax over -dist; max shift is a constant w.r.t. gradients
    double m = dist.data()[0];
    for (double v : dist.data()) m = std::max(m, v);
    Array e = exp(sadd(dist, -m));
    Array w = div(e, sum(e));
    return sum(mul(w, scores));
}

// sigmoid((score - tau) / eta); the soft membership of one hypothesis.
inline Array soft_assignment(Array score, Array tau, double eta_sig) {
    if (eta_sig <= 0.0) throw std::invalid_argument("soft_assignment: eta_sig must be positive");
    return ndgrad::sigmoid(ndgrad::smul(ndgrad::sub(score, tau), 1.0 / eta_sig));
}

// max(sum of memberships - kappa, 0); subgradient 0 at the kink.
inline Array inefficiency(const std::vector<Array>& soft_memberships, double kappa) {
    if (soft_memberships.empty()) throw std::invalid_argument("inefficiency: empty membership list");
    using namespace ndgrad;
    return maxc(sadd(sum(stack(soft_memberships)), -kappa), 0.0);
}

// log(mean(omega) + eps) across the batch.
inline Array size_loss(const std::vector<Array>& omegas, double size_eps) {
    if (omegas.empty()) throw std::invalid_argument("size_loss: empty batch");
    using namespace ndgrad;
    return log(sadd(mean(stack(omegas)), size_eps));
}

// One sample's soft-CP inefficiency: first half of the hypothesis scores
// calibrates a soft tau, second half is softly assigned against it.
inline Array sample_inefficiency(Tape& tape, const std::vector<Array>& hyp_scores, const SoftCPConfig& cfg) {
    const long h = static_cast<long>(hyp_scores.size());
    if (h < 4 || h % 2 != 0)
        throw std::invalid_argument("sample_inefficiency: hypothesis count must be even and >= 4, got " +
                                    std::to_string(h));
    const long half = h / 2;
    std::vector<Array> cal(hyp_scores.begin(), hyp_scores.begin() + half);
    Array tau = soft_quantile_tau(tape, ndgrad::stack(cal), cfg);
    std::vector<Array> memberships;
    memberships.reserve(static_cast<std::size_t>(half));
    for (long i = half; i < h; ++i) memberships.push_back(soft_assignment(hyp_scores[static_cast<std::size_t>(i)], tau, cfg.eta_sig));
    return inefficiency(memberships, cfg.kappa);
}

// Batch-level differentiable CP loss used during training: every sample
// splits its own hypothesis scores into a calibration half and a
// prediction half.
inline Array train_step_cp(Tape& tape, const std::vector<std::vector<Array>>& batch_hyp_scores,
                           const SoftCPConfig& cfg) {
    if (batch_hyp_scores.empty()) throw std::invalid_argument("train_step_cp: empty batch");
    std::vector<Array> omegas;
    omegas.reserve(batch_hyp_scores.size());
    for (const auto& hyp_scores : batch_hyp_scores) omegas.push_back(sample_inefficiency(tape, hyp_scores, cfg));
    return size_loss(omegas, cfg.size_eps);
}

// Alternative split at mini-batch granularity, mirroring inference-time CP:
// tau is the soft quantile of the ground-truth conformity scores of the
// calibration half of the batch; the inefficiency counts hypothesis
// memberships of the prediction half against that tau.
inline Array train_step_cp_batch(Tape& tape, const std::vector<Array>& cal_gt_scores,
                                 const std::vector<std::vector<Array>>& pred_hyp_scores,
                                 const SoftCPConfig& cfg) {
    if (cal_gt_scores.size() < 2)
        throw std::invalid_argument("train_step_cp_batch: need at least 2 calibration samples");
    if (pred_hyp_scores.empty()) throw std::invalid_argument("train_step_cp_batch: empty prediction half");
    Array tau = soft_quantile_tau(tape, ndgrad::stack(cal_gt_scores), cfg);
    std::vector<Array> omegas;
    omegas.reserve(pred_hyp_scores.size());
    for (const auto& hyp_scores : pred_hyp_scores) {
        if (hyp_scores.empty()) throw std::invalid_argument("train_step_cp_batch: sample without hypothesis scores");
        std::vector<Array> memberships;
        memberships.reserve(hyp_scores.size());
        for (Array s : hyp_scores) memberships.push_back(soft_assignment(s, tau, cfg.eta_sig));
        omegas.push_back(inefficiency(memberships, cfg.kappa));
    }
    return size_loss(omegas, cfg.size_eps);
}

struct PredictSetResult {
    aggregate::HypothesisBatch batch;      // retained hypotheses, original order
    std::vector<long> retained_indices;    // into the input batch
    bool fallback = false;                 // no score met tau; kept argmax only
};

inline PredictSetResult predict_set(const aggregate::HypothesisBatch& input, const CalibrationResult& calib) {
    input.validate();
    if (input.scores.empty()) throw std::invalid_argument("predict_set: batch carries no scores");
    PredictSetResult res;
    for (long h = 0; h < input.count; ++h)
        if (input.scores[static_cast<std::size_t>(h)] >= calib.tau) res.retained_indices.push_back(h);
    if (res.retained_indices.empty()) {
        long best = 0;
        for (long h = 1; h < input.count; ++h)
            if (input.scores[static_cast<std::size_t>(h)] > input.scores[static_cast<std::size_t>(best)]) best = h;
        res.retained_indices.push_back(best);
        res.fallback = true;
    }
    res.batch.frames = input.frames;
    res.batch.joints = input.joints;
    res.batch.source_x = input.source_x;
    for (long h : res.retained_indices) {
        res.batch.push(input.hypothesis(h));
        res.batch.scores.push_back(input.scores[static_cast<std::size_t>(h)]);
    }
    return res;
}

// Fraction of (ground-truth score, tau) pairs with score >= tau.
inline double empirical_coverage(const std::vector<std::pair<double, double>>& test_pairs) {
    if (test_pairs.empty()) throw std::invalid_argument("empirical_coverage: empty test list");
    long covered = 0;
    for (const auto& [score, tau] : test_pairs)
        if (score >= tau) ++covered;
    return static_cast<double>(covered) / static_cast<double>(test_pairs.size());
}

inline nlohmann::json to_json(const CalibrationResult& r) {
    return nlohmann::json{{"tau", r.tau}, {"alpha", r.alpha}, {"n_cal", r.n_cal}, {"scores", r.scores}};
}

inline CalibrationResult calibration_from_json(const nlohmann::json& j) {
    CalibrationResult r;
    r.tau = j.at("tau").get<double>();
    r.alpha = j.at("alpha").get<double>();
    r.n_cal = j.at("n_cal").get<long>();
    r.scores = j.at("scores").get<std::vector<double>>();
    return r;
}

}  // namespace poselift::conformal
