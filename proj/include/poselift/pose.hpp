#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace poselift {

// Root-relative 3D joint positions in millimeters, N frames x J joints x 3.
struct PoseSeq3D {
    long frames = 0;
    long joints = 0;
    std::vector<double> coords;  // row-major (frame, joint, xyz)

    PoseSeq3D() = default;
    PoseSeq3D(long n, long j) : frames(n), joints(j), coords(static_cast<std::size_t>(n * j * 3), 0.0) {}
    PoseSeq3D(long n, long j, std::vector<double> c) : frames(n), joints(j), coords(std::move(c)) {
        if (coords.size() != static_cast<std::size_t>(n * j * 3))
            throw std::invalid_argument("PoseSeq3D: coord buffer does not match " + std::to_string(n) + "x" +
                                        std::to_string(j) + "x3");
    }

    double& at(long n, long j, long c) { return coords[static_cast<std::size_t>((n * joints + j) * 3 + c)]; }
    double at(long n, long j, long c) const { return coords[static_cast<std::size_t>((n * joints + j) * 3 + c)]; }
    long size() const { return frames * joints * 3; }

    bool finite() const {
        for (double v : coords)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Observed 2D keypoints in normalized image units, N x J x 2.
struct PoseSeq2D {
    long frames = 0;
    long joints = 0;
    std::vector<double> coords;  // row-major (frame, joint, uv)

    PoseSeq2D() = default;
    PoseSeq2D(long n, long j) : frames(n), joints(j), coords(static_cast<std::size_t>(n * j * 2), 0.0) {}
    PoseSeq2D(long n, long j, std::vector<double> c) : frames(n), joints(j), coords(std::move(c)) {
        if (coords.size() != static_cast<std::size_t>(n * j * 2))
            throw std::invalid_argument("PoseSeq2D: coord buffer does not match " + std::to_string(n) + "x" +
                                        std::to_string(j) + "x2");
    }

    double& at(long n, long j, long c) { return coords[static_cast<std::size_t>((n * joints + j) * 2 + c)]; }
    double at(long n, long j, long c) const { return coords[static_cast<std::size_t>((n * joints + j) * 2 + c)]; }
    long size() const { return frames * joints * 2; }

    bool finite() const {
        for (double v : coords)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_dims(const PoseSeq3D& a, const PoseSeq3D& b, const char* where) {
    if (a.frames != b.frames || a.joints != b.joints)
        throw std::invalid_argument(std::string(where) + ": sequence dims differ (" + std::to_string(a.frames) +
                                    "x" + std::to_string(a.joints) + " vs " + std::to_string(b.frames) + "x" +
                                    std::to_string(b.joints) + ")");
}

}  // namespace poselift
