#pragma once

// Evaluation protocol: MPJPE, Procrustes-aligned MPJPE (per-frame similarity
// alignment, reflections excluded), PCK at a strict threshold, AUC over the
// standard 0..150mm grid, and the score-vs-error correlation study.

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "poselift/pose.hpp"

namespace poselift::metrics {

inline double mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt) {
    require_same_dims(pred, gt, "mpjpe");
    double acc = 0.0;
    for (long n = 0; n < pred.frames; ++n)
        for (long j = 0; j < pred.joints; ++j) {
            const double dx = pred.at(n, j, 0) - gt.at(n, j, 0);
            const double dy = pred.at(n, j, 1) - gt.at(n, j, 1);
            const double dz = pred.at(n, j, 2) - gt.at(n, j, 2);
            acc += std::sqrt(dx * dx + dy * dy + dz * dz);
        }
    return acc / static_cast<double>(pred.frames * pred.joints);
}

// Per-frame best similarity transform (scale, rotation, translation) of the
// prediction onto the ground truth, then MPJPE on the aligned poses.
// Rank-deficient frames fall back to translation-only alignment; the count
// of such frames is reported through `degenerate_frames` when non-null.
inline double p_mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt, long* degenerate_frames = nullptr) {
    require_same_dims(pred, gt, "p_mpjpe");
    const long N = pred.frames, J = pred.joints;
    long degenerate = 0;
    double acc = 0.0;
    for (long n = 0; n < N; ++n) {
        Eigen::MatrixXd X(J, 3), Y(J, 3);
        for (long j = 0; j < J; ++j)
            for (long c = 0; c < 3; ++c) {
                X(j, c) = pred.at(n, j, c);
                Y(j, c) = gt.at(n, j, c);
            }
        const Eigen::RowVector3d mx = X.colwise().mean(), my = Y.colwise().mean();
        X.rowwise() -= mx;
        Y.rowwise() -= my;
        const double norm_x2 = X.squaredNorm();
        const Eigen::Matrix3d M = X.transpose() * Y;  // sum_j x_j y_j^T
        Eigen::JacobiSVD<Eigen::Matrix3d> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
        const Eigen::Vector3d S = svd.singularValues();
        const bool rank_deficient = J < 3 || norm_x2 < 1e-18 || S(0) <= 0.0 || S(1) / S(0) < 1e-9;
        if (rank_deficient) {
            ++degenerate;
            // translation-only: centered pred vs centered gt
            for (long j = 0; j < J; ++j) acc += (X.row(j) - Y.row(j)).norm();
            continue;
        }
        Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
        const double det = (svd.matrixV() * svd.matrixU().transpose()).determinant();
        if (det < 0.0) D(2, 2) = -1.0;
        const Eigen::Matrix3d R = svd.matrixV() * D * svd.matrixU().transpose();
        const double scale = (S(0) * D(0, 0) + S(1) * D(1, 1) + S(2) * D(2, 2)) / norm_x2;
        for (long j = 0; j < J; ++j) {
            const Eigen::Vector3d aligned = scale * (R * X.row(j).transpose());
            acc += (aligned - Y.row(j).transpose()).norm();
        }
    }
    if (degenerate_frames) *degenerate_frames = degenerate;
    return acc / static_cast<double>(N * J);
}

// Percentage of joints with error strictly below the threshold.
inline double pck(const PoseSeq3D& pred, const PoseSeq3D& gt, double threshold_mm) {
    require_same_dims(pred, gt, "pck");
    if (threshold_mm <= 0.0) throw std::invalid_argument("pck: threshold must be positive");
    long hits = 0;
    for (long n = 0; n < pred.frames; ++n)
        for (long j = 0; j < pred.joints; ++j) {
            const double dx = pred.at(n, j, 0) - gt.at(n, j, 0);
            const double dy = pred.at(n, j, 1) - gt.at(n, j, 1);
            const double dz = pred.at(n, j, 2) - gt.at(n, j, 2);
            if (std::sqrt(dx * dx + dy * dy + dz * dz) < threshold_mm) ++hits;
        }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(pred.frames * pred.joints);
}

// Mean PCK over 31 evenly spaced thresholds spanning 0..150mm inclusive.
// The 0mm point uses the same strict inequality, so it contributes 0.
inline double auc(const PoseSeq3D& pred, const PoseSeq3D& gt) {
    require_same_dims(pred, gt, "auc");
    std::vector<double> errors;
    errors.reserve(static_cast<std::size_t>(pred.frames * pred.joints));
    for (long n = 0; n < pred.frames; ++n)
        for (long j = 0; j < pred.joints; ++j) {
            const double dx = pred.at(n, j, 0) - gt.at(n, j, 0);
            const double dy = pred.at(n, j, 1) - gt.at(n, j, 1);
            const double dz = pred.at(n, j, 2) - gt.at(n, j, 2);
            errors.push_back(std::sqrt(dx * dx + dy * dy + dz * dz));
        }
    double acc = 0.0;
    for (int i = 0; i <= 30; ++i) {
        const double thr = 150.0 * static_cast<double>(i) / 30.0;
        long hits = 0;
        for (double e : errors)
            if (e < thr) ++hits;
        acc += 100.0 * static_cast<double>(hits) / static_cast<double>(errors.size());
    }
    return acc / 31.0;
}

struct ScoreErrorStudy {
    double pearson_r = 0.0;
    double ols_slope = 0.0;
    double ols_intercept = 0.0;
    double ols_r2 = 0.0;
};

// Pearson correlation of (conformity score, per-hypothesis MPJPE) pairs and
// an OLS fit regressing error on score.
inline ScoreErrorStudy score_error_study(const std::vector<std::pair<double, double>>& pairs) {
    const long n = static_cast<long>(pairs.size());
    if (n < 3) throw std::invalid_argument("score_error_study: need at least 3 pairs");
    double ms = 0.0, me = 0.0;
    for (const auto& [s, e] : pairs) {
        ms += s;
        me += e;
    }
    ms /= static_cast<double>(n);
    me /= static_cast<double>(n);
    double css = 0.0, cee = 0.0, cse = 0.0;
    for (const auto& [s, e] : pairs) {
        css += (s - ms) * (s - ms);
        cee += (e - me) * (e - me);
        cse += (s - ms) * (e - me);
    }
    if (css <= 0.0 || cee <= 0.0)
        throw std::invalid_argument("score_error_study: zero variance in scores or errors");
    ScoreErrorStudy out;
    out.pearson_r = cse / std::sqrt(css * cee);
    out.ols_slope = cse / css;
    out.ols_intercept = me - out.ols_slope * ms;
    double ss_res = 0.0;
    for (const auto& [s, e] : pairs) {
        const double fit = out.ols_slope * s + out.ols_intercept;
        ss_res += (e - fit) * (e - fit);
    }
    out.ols_r2 = 1.0 - ss_res / cee;
    return out;
}

struct MetricsReport {
    double mpjpe_mm = 0.0;
    double p_mpjpe_mm = 0.0;
    double pck_percent = 0.0;
    double auc_percent = 0.0;
    double coverage = -1.0;  // -1 when no calibration was supplied
    double mean_set_size = 0.0;
    double pearson_r = 0.0;
    double ols_r2 = 0.0;
    long sample_count = 0;
};

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j{{"mpjpe_mm", r.mpjpe_mm},       {"p_mpjpe_mm", r.p_mpjpe_mm},
                     {"pck_percent", r.pck_percent}, {"auc_percent", r.auc_percent},
                     {"mean_set_size", r.mean_set_size}, {"pearson_r", r.pearson_r},
                     {"ols_r2", r.ols_r2},           {"sample_count", r.sample_count}};
    if (r.coverage >= 0.0)
        j["coverage"] = r.coverage;
    else
        j["coverage"] = nullptr;
    return j;
}

inline std::string csv_header() {
    return "mpjpe_mm,p_mpjpe_mm,pck_percent,auc_percent,coverage,mean_set_size,pearson_r,ols_r2,sample_count";
}

inline std::string csv_row(const MetricsReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << r.mpjpe_mm << ',' << r.p_mpjpe_mm << ',' << r.pck_percent << ',' << r.auc_percent << ',';
    if (r.coverage >= 0.0)
        os << r.coverage;
    os << ',' << r.mean_set_size << ',' << r.pearson_r << ',' << r.ols_r2 << ',' << r.sample_count;
    return os.str();
}

}  // namespace poselift::metrics
