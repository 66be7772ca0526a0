#pragma once

// Collapse a hypothesis set into one pose sequence: plain mean,
// score-weighted mean, per-joint reprojection selection (J-Agg), and the
// ground-truth oracle (J-Best).

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "poselift/pose.hpp"

namespace poselift::aggregate {

struct CameraIntrinsics {
    double fx = 1.0, fy = 1.0;
    double cx = 0.0, cy = 0.0;
    // Root-relative poses sit near z = 0; this scene offset (mm) moves them
    // in front of the pinhole before projecting.
    double z_offset = 5000.0;

    void validate() const {
        if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("CameraIntrinsics: focal lengths must be positive");
    }
};

struct HypothesisBatch {
    long count = 0;   // H
    long frames = 0;  // N
    long joints = 0;  // J
    std::vector<double> data;    // H x N x J x 3 row-major
    std::vector<double> scores;  // per-hypothesis conformity, empty if absent
    PoseSeq2D source_x;

    double at(long h, long n, long j, long c) const {
        return data[static_cast<std::size_t>(((h * frames + n) * joints + j) * 3 + c)];
    }
    double& at(long h, long n, long j, long c) {
        return data[static_cast<std::size_t>(((h * frames + n) * joints + j) * 3 + c)];
    }

    PoseSeq3D hypothesis(long h) const {
        const std::size_t stride = static_cast<std::size_t>(frames * joints * 3);
        return PoseSeq3D(frames, joints,
                         std::vector<double>(data.begin() + static_cast<long>(stride) * h,
                                             data.begin() + static_cast<long>(stride) * (h + 1)));
    }

    void push(const PoseSeq3D& pose) {
        if (count == 0 && frames == 0) {
            frames = pose.frames;
            joints = pose.joints;
        }
        if (pose.frames != frames || pose.joints != joints)
            throw std::invalid_argument("HypothesisBatch: inconsistent pose dims");
        data.insert(data.end(), pose.coords.begin(), pose.coords.end());
        ++count;
    }

    void validate() const {
        if (count < 1) throw std::invalid_argument("HypothesisBatch: need at least one hypothesis");
        if (!scores.empty() && static_cast<long>(scores.size()) != count)
            throw std::invalid_argument("HypothesisBatch: score count does not match hypotheses");
    }
};

inline bool project_point(double X, double Y, double Z, const CameraIntrinsics& cam, double& u, double& v) {
    const double depth = Z + cam.z_offset;
    if (depth <= 0.0) return false;
    u = cam.fx * X / depth + cam.cx;
    v = cam.fy * Y / depth + cam.cy;
    return true;
}

inline PoseSeq2D project(const PoseSeq3D& pose, const CameraIntrinsics& cam) {
    cam.validate();
    PoseSeq2D out(pose.frames, pose.joints);
    for (long n = 0; n < pose.frames; ++n)
        for (long j = 0; j < pose.joints; ++j) {
            double u, v;
            if (!project_point(pose.at(n, j, 0), pose.at(n, j, 1), pose.at(n, j, 2), cam, u, v))
                throw std::invalid_argument("project: nonpositive depth at frame " + std::to_string(n) +
                                            ", joint " + std::to_string(j));
            out.at(n, j, 0) = u;
            out.at(n, j, 1) = v;
        }
    return out;
}

inline PoseSeq3D plain_mean(const HypothesisBatch& batch) {
    batch.validate();
    PoseSeq3D out(batch.frames, batch.joints);
    const std::size_t stride = out.coords.size();
    for (long h = 0; h < batch.count; ++h)
        for (std::size_t i = 0; i < stride; ++i) out.coords[i] += batch.data[static_cast<std::size_t>(h) * stride + i];
    for (auto& v : out.coords) v /= static_cast<double>(batch.count);
    return out;
}

inline PoseSeq3D weighted_mean(const HypothesisBatch& batch) {
    batch.validate();
    if (batch.scores.empty()) throw std::invalid_argument("weighted_mean: batch carries no scores");
    double wsum = 0.0;
    for (double s : batch.scores) wsum += s;
    if (wsum <= 0.0) throw std::invalid_argument("weighted_mean: all scores zero, weights degenerate");
    PoseSeq3D out(batch.frames, batch.joints);
    const std::size_t stride = out.coords.size();
    for (long h = 0; h < batch.count; ++h) {
        const double w = batch.scores[static_cast<std::size_t>(h)];
        for (std::size_t i = 0; i < stride; ++i) out.coords[i] += w * batch.data[static_cast<std::size_t>(h) * stride + i];
    }
    for (auto& v : out.coords) v /= wsum;
    return out;
}

struct JaggResult {
    PoseSeq3D pose;
    long fallback_joints = 0;  // joints where every hypothesis failed to project
};

// Per frame and joint independently, keep the hypothesis whose reprojection
// lands closest to the observed keypoint. Ties break toward the lower index.
inline JaggResult j_agg(const HypothesisBatch& batch, const CameraIntrinsics& cam) {
    batch.validate();
    cam.validate();
    if (batch.source_x.frames != batch.frames || batch.source_x.joints != batch.joints)
        throw std::invalid_argument("j_agg: batch has no matching source 2D sequence");
    JaggResult res;
    res.pose = PoseSeq3D(batch.frames, batch.joints);
    PoseSeq3D mean_pose;  // computed lazily for fallback joints
    bool have_mean = false;
    for (long n = 0; n < batch.frames; ++n)
        for (long j = 0; j < batch.joints; ++j) {
            long best = -1;
            double best_err = std::numeric_limits<double>::infinity();
            const double ox = batch.source_x.at(n, j, 0), oy = batch.source_x.at(n, j, 1);
            for (long h = 0; h < batch.count; ++h) {
                double u, v;
                if (!project_point(batch.at(h, n, j, 0), batch.at(h, n, j, 1), batch.at(h, n, j, 2), cam, u, v))
                    continue;  // hypothesis excluded for this joint
                const double err = std::hypot(u - ox, v - oy);
                if (err < best_err) {
                    best_err = err;
                    best = h;
                }
            }
            if (best < 0) {
                if (!have_mean) {
                    mean_pose = plain_mean(batch);
                    have_mean = true;
                }
                for (long c = 0; c < 3; ++c) res.pose.at(n, j, c) = mean_pose.at(n, j, c);
                ++res.fallback_joints;
            } else {
                for (long c = 0; c < 3; ++c) res.pose.at(n, j, c) = batch.at(best, n, j, c);
            }
        }
    return res;
}

// Oracle: per frame and joint, keep the hypothesis joint closest to ground
// truth. Upper bound only, never a deployable predictor.
inline PoseSeq3D j_best(const HypothesisBatch& batch, const PoseSeq3D& gt) {
    batch.validate();
    if (gt.frames != batch.frames || gt.joints != batch.joints)
        throw std::invalid_argument("j_best: ground truth dims do not match batch");
    PoseSeq3D out(batch.frames, batch.joints);
    for (long n = 0; n < batch.frames; ++n)
        for (long j = 0; j < batch.joints; ++j) {
            long best = 0;
            double best_d2 = std::numeric_limits<double>::infinity();
            for (long h = 0; h < batch.count; ++h) {
                double d2 = 0.0;
                for (long c = 0; c < 3; ++c) {
                    const double dv = batch.at(h, n, j, c) - gt.at(n, j, c);
                    d2 += dv * dv;
                }
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = h;
                }
            }
            for (long c = 0; c < 3; ++c) out.at(n, j, c) = batch.at(best, n, j, c);
        }
    return out;
}

}  // namespace poselift::aggregate
