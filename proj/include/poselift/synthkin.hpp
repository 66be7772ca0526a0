#pragma once

// Synthetic articulated-skeleton sequences: forward kinematics over smoothly
// varying joint angles (sums of random-phase sinusoids), pinhole-projected
// to noisy 2D observations, partitioned into disjoint train/calibration/test
// splits. Sequences are i.i.d. across seeds, so calibration and test data
// are exchangeable by construction; the shared-phase knob deliberately
// breaks that for coverage-degradation experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "poselift/aggregate.hpp"
#include "poselift/pose.hpp"
#include "poselift/rng.hpp"

namespace poselift::synthkin {

enum class MotionFamily { WalkLike, ReachLike, Idle };

inline const char* family_name(MotionFamily f) {
    switch (f) {
        case MotionFamily::WalkLike: return "walk-like";
        case MotionFamily::ReachLike: return "reach-like";
        case MotionFamily::Idle: return "idle";
    }
    return "?";
}

inline MotionFamily family_from_name(const std::string& s) {
    if (s == "walk-like") return MotionFamily::WalkLike;
    if (s == "reach-like") return MotionFamily::ReachLike;
    if (s == "idle") return MotionFamily::Idle;
    throw std::invalid_argument("unknown motion family: " + s);
}

struct SkeletonSpec {
    long joints = 8;
    std::vector<long> parent;          // parent[0] == 0 (root is its own parent)
    std::vector<double> bone_length_mm;
    MotionFamily family = MotionFamily::WalkLike;
    double freq_lo = 0.25, freq_hi = 0.8;  // radians per frame
    double amplitude = 0.5;                // radians

    void validate() const {
        if (joints < 2) throw std::invalid_argument("SkeletonSpec: need at least 2 joints");
        if (static_cast<long>(parent.size()) != joints || static_cast<long>(bone_length_mm.size()) != joints)
            throw std::invalid_argument("SkeletonSpec: parent/bone arrays must have one entry per joint");
        if (parent[0] != 0) throw std::invalid_argument("SkeletonSpec: joint 0 must be the root");
        for (long j = 1; j < joints; ++j) {
            if (parent[static_cast<std::size_t>(j)] < 0 || parent[static_cast<std::size_t>(j)] >= j)
                throw std::invalid_argument("SkeletonSpec: parents must precede children (tree rooted at 0)");
            if (bone_length_mm[static_cast<std::size_t>(j)] <= 0.0)
                throw std::invalid_argument("SkeletonSpec: bone lengths must be positive");
        }
        if (freq_lo <= 0.0 || freq_hi < freq_lo) throw std::invalid_argument("SkeletonSpec: bad frequency band");
    }
};

inline SkeletonSpec default_skeleton(long joints, MotionFamily family) {
    SkeletonSpec s;
    s.joints = joints;
    s.family = family;
    s.parent.resize(static_cast<std::size_t>(joints));
    s.bone_length_mm.resize(static_cast<std::size_t>(joints));
    s.parent[0] = 0;
    s.bone_length_mm[0] = 0.0;
    for (long j = 1; j < joints; ++j) {
        s.parent[static_cast<std::size_t>(j)] = (j - 1) / 2;  // shallow binary tree
        s.bone_length_mm[static_cast<std::size_t>(j)] = 150.0 + 50.0 * static_cast<double>(j % 4);
    }
    s.bone_length_mm[0] = 1.0;  // unused (root), kept positive for validate()
    switch (family) {
        case MotionFamily::WalkLike:
            s.freq_lo = 0.25;
            s.freq_hi = 0.8;
            s.amplitude = 0.5;
            break;
        case MotionFamily::ReachLike:
            s.freq_lo = 0.08;
            s.freq_hi = 0.3;
            s.amplitude = 0.35;
            break;
        case MotionFamily::Idle:
            s.freq_lo = 0.02;
            s.freq_hi = 0.08;
            s.amplitude = 0.03;
            break;
    }
    return s;
}

// Optional cross-sequence phase coupling; weight 0 keeps sequences i.i.d.
struct PhaseCoupling {
    double weight = 0.0;
    std::uint64_t common_seed = 0;
};

// Forward kinematics with per-joint direction angles driven by 2-3
// random-phase sinusoids inside the family's frequency band. Bone lengths
// are exact in every frame and the root stays at the origin.
inline PoseSeq3D generate_sequence(const SkeletonSpec& spec, long frames, std::uint64_t seed,
                                   const PhaseCoupling& coupling = {}) {
    if (frames < 1) throw std::invalid_argument("generate_sequence: frames must be >= 1");
    spec.validate();
    std::mt19937_64 eng(seed);
    std::mt19937_64 common(coupling.common_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double two_pi = 2.0 * std::acos(-1.0);

    struct Osc {
        double amp, omega, phase;
    };
    struct JointMotion {
        double theta0, phi0;
        std::vector<Osc> theta_osc, phi_osc;
    };
    std::vector<JointMotion> motion(static_cast<std::size_t>(spec.joints));
    for (long j = 1; j < spec.joints; ++j) {
        JointMotion m;
        m.theta0 = 0.4 + 2.3 * unit(eng);   // keep away from the poles
        m.phi0 = two_pi * unit(eng);
        const int n_theta = 2 + (eng() % 2), n_phi = 2 + (eng() % 2);
        auto draw = [&](std::vector<Osc>& v, int k) {
            for (int i = 0; i < k; ++i) {
                Osc o;
                o.amp = spec.amplitude * (0.4 + 0.6 * unit(eng)) / static_cast<double>(k);
                o.omega = spec.freq_lo + (spec.freq_hi - spec.freq_lo) * unit(eng);
                double phase = two_pi * unit(eng);
                if (coupling.weight > 0.0) {
                    const double shared = two_pi * std::uniform_real_distribution<double>(0.0, 1.0)(common);
                    phase = (1.0 - coupling.weight) * phase + coupling.weight * shared;
                }
                o.phase = phase;
                v.push_back(o);
            }
        };
        draw(m.theta_osc, n_theta);
        draw(m.phi_osc, n_phi);
        motion[static_cast<std::size_t>(j)] = std::move(m);
    }

    PoseSeq3D pose(frames, spec.joints);
    std::vector<double> px(static_cast<std::size_t>(spec.joints)), py(px), pz(px);
    for (long t = 0; t < frames; ++t) {
        px[0] = py[0] = pz[0] = 0.0;
        for (long j = 1; j < spec.joints; ++j) {
            const JointMotion& m = motion[static_cast<std::size_t>(j)];
            double theta = m.theta0, phi = m.phi0;
            for (const Osc& o : m.theta_osc) theta += o.amp * std::sin(o.omega * static_cast<double>(t) + o.phase);
            for (const Osc& o : m.phi_osc) phi += o.amp * std::sin(o.omega * static_cast<double>(t) + o.phase);
            const double L = spec.bone_length_mm[static_cast<std::size_t>(j)];
            const long p = spec.parent[static_cast<std::size_t>(j)];
            px[static_cast<std::size_t>(j)] = px[static_cast<std::size_t>(p)] + L * std::sin(theta) * std::cos(phi);
            py[static_cast<std::size_t>(j)] = py[static_cast<std::size_t>(p)] + L * std::sin(theta) * std::sin(phi);
            pz[static_cast<std::size_t>(j)] = pz[static_cast<std::size_t>(p)] + L * std::cos(theta);
        }
        for (long j = 0; j < spec.joints; ++j) {
            pose.at(t, j, 0) = px[static_cast<std::size_t>(j)];
            pose.at(t, j, 1) = py[static_cast<std::size_t>(j)];
            pose.at(t, j, 2) = pz[static_cast<std::size_t>(j)];
        }
    }
    return pose;
}

// Pinhole projection plus i.i.d. Gaussian keypoint noise.
inline PoseSeq2D observe_2d(const PoseSeq3D& y, const aggregate::CameraIntrinsics& cam, double noise_std,
                            std::uint64_t seed) {
    PoseSeq2D obs = aggregate::project(y, cam);
    if (noise_std > 0.0) {
        std::mt19937_64 eng(seed);
        std::normal_distribution<double> dist(0.0, noise_std);
        for (auto& v : obs.coords) v += dist(eng);
    }
    return obs;
}

struct Sample {
    long id = 0;
    MotionFamily family = MotionFamily::WalkLike;
    PoseSeq2D x;
    PoseSeq3D y;
    aggregate::CameraIntrinsics cam;
};

struct DatasetSplit {
    std::vector<Sample> train, calibration, test;
    std::uint64_t seed = 0;
    long frames = 0, joints = 0;
};

struct GeneratorConfig {
    long count = 512;
    long frames = 16;
    long joints = 8;
    double cal_fraction = 0.02;
    double test_fraction = 0.2;
    double noise_std = 0.02;
    double shared_phase = 0.0;  // > 0 couples phases across sequences (breaks exchangeability)
    aggregate::CameraIntrinsics cam;
};

inline DatasetSplit make_splits(const GeneratorConfig& cfg, std::uint64_t seed) {
    if (cfg.count < 10) throw std::invalid_argument("make_splits: need at least 10 sequences");
    if (!(cfg.cal_fraction > 0.0 && cfg.cal_fraction < 0.5))
        throw std::invalid_argument("make_splits: cal_fraction must lie in (0, 0.5)");
    if (cfg.cal_fraction + cfg.test_fraction >= 1.0)
        throw std::invalid_argument("make_splits: calibration and test fractions must sum below 1");

    const MotionFamily families[3] = {MotionFamily::WalkLike, MotionFamily::ReachLike, MotionFamily::Idle};
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(cfg.count));
    PhaseCoupling coupling{cfg.shared_phase, rng::derive(seed, "data.common_phase")};
    for (long i = 0; i < cfg.count; ++i) {
        Sample s;
        s.id = i;
        s.family = families[i % 3];
        const SkeletonSpec spec = default_skeleton(cfg.joints, s.family);
        s.y = generate_sequence(spec, cfg.frames, rng::derive(seed, "data.seq", static_cast<std::uint64_t>(i)),
                                coupling);
        s.cam = cfg.cam;
        s.x = observe_2d(s.y, s.cam, cfg.noise_std, rng::derive(seed, "data.obs", static_cast<std::uint64_t>(i)));
        samples.push_back(std::move(s));
    }

    const long n_cal = std::max(1L, static_cast<long>(std::floor(cfg.cal_fraction * static_cast<double>(cfg.count))));
    const long n_test = std::max(1L, static_cast<long>(std::floor(cfg.test_fraction * static_cast<double>(cfg.count))));
    std::vector<long> idx(static_cast<std::size_t>(cfg.count));
    std::iota(idx.begin(), idx.end(), 0L);
    auto eng = rng::engine(seed, "data.split");
    std::shuffle(idx.begin(), idx.end(), eng);

    DatasetSplit split;
    split.seed = seed;
    split.frames = cfg.frames;
    split.joints = cfg.joints;
    for (long i = 0; i < cfg.count; ++i) {
        Sample& s = samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        if (i < n_cal)
            split.calibration.push_back(std::move(s));
        else if (i < n_cal + n_test)
            split.test.push_back(std::move(s));
        else
            split.train.push_back(std::move(s));
    }
    auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
    std::sort(split.train.begin(), split.train.end(), by_id);
    std::sort(split.calibration.begin(), split.calibration.end(), by_id);
    std::sort(split.test.begin(), split.test.end(), by_id);
    return split;
}

// ---------------------------------------------------------------------------
// JSON-Lines dataset serialization; f64 arrays are base64-encoded
// little-endian.

namespace detail {

inline std::string base64_encode(const std::vector<double>& values) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(values.data());
    const std::size_t n = values.size() * sizeof(double);
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (std::size_t i = 0; i < n; i += 3) {
        unsigned v = static_cast<unsigned>(bytes[i]) << 16;
        if (i + 1 < n) v |= static_cast<unsigned>(bytes[i + 1]) << 8;
        if (i + 2 < n) v |= static_cast<unsigned>(bytes[i + 2]);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(i + 1 < n ? tbl[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < n ? tbl[v & 63] : '=');
    }
    return out;
}

inline std::vector<double> base64_decode(const std::string& text) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw std::invalid_argument("base64: bad character");
    };
    std::vector<unsigned char> bytes;
    bytes.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i + 3 < text.size(); i += 4) {
        const int a = val(text[i]), b = val(text[i + 1]), c = val(text[i + 2]), d = val(text[i + 3]);
        const unsigned v = (static_cast<unsigned>(a) << 18) | (static_cast<unsigned>(b) << 12) |
                           ((c < 0 ? 0u : static_cast<unsigned>(c)) << 6) | (d < 0 ? 0u : static_cast<unsigned>(d));
        bytes.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
        if (c >= 0) bytes.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
        if (d >= 0) bytes.push_back(static_cast<unsigned char>(v & 0xff));
    }
    if (bytes.size() % sizeof(double) != 0) throw std::invalid_argument("base64: payload is not a f64 array");
    std::vector<double> out(bytes.size() / sizeof(double));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

}  // namespace detail

inline nlohmann::json camera_to_json(const aggregate::CameraIntrinsics& c) {
    return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"z_offset", c.z_offset}};
}

inline aggregate::CameraIntrinsics camera_from_json(const nlohmann::json& j) {
    aggregate::CameraIntrinsics c;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.z_offset = j.at("z_offset").get<double>();
    return c;
}

inline void save_dataset(const std::string& path, const DatasetSplit& split) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
    nlohmann::json meta{{"type", "meta"},
                        {"seed", split.seed},
                        {"frames", split.frames},
                        {"joints", split.joints},
                        {"count", split.train.size() + split.calibration.size() + split.test.size()}};
    os << meta.dump() << '\n';
    auto emit = [&](const std::vector<Sample>& group, const char* tag) {
        for (const Sample& s : group) {
            nlohmann::json rec{{"type", "seq"},
                               {"id", s.id},
                               {"split", tag},
                               {"family", family_name(s.family)},
                               {"frames", s.y.frames},
                               {"joints", s.y.joints},
                               {"camera", camera_to_json(s.cam)},
                               {"coords2d", detail::base64_encode(s.x.coords)},
                               {"coords3d", detail::base64_encode(s.y.coords)}};
            os << rec.dump() << '\n';
        }
    };
    emit(split.train, "train");
    emit(split.calibration, "calibration");
    emit(split.test, "test");
    if (!os) throw std::runtime_error("save_dataset: write failed: " + path);
}

inline DatasetSplit load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
    DatasetSplit split;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        const std::string type = j.at("type").get<std::string>();
        if (type == "meta") {
            split.seed = j.at("seed").get<std::uint64_t>();
            split.frames = j.at("frames").get<long>();
            split.joints = j.at("joints").get<long>();
            continue;
        }
        Sample s;
        s.id = j.at("id").get<long>();
        s.family = family_from_name(j.at("family").get<std::string>());
        const long n = j.at("frames").get<long>(), jt = j.at("joints").get<long>();
        s.cam = camera_from_json(j.at("camera"));
        s.x = PoseSeq2D(n, jt, detail::base64_decode(j.at("coords2d").get<std::string>()));
        s.y = PoseSeq3D(n, jt, detail::base64_decode(j.at("coords3d").get<std::string>()));
        const std::string tag = j.at("split").get<std::string>();
        if (tag == "train")
            split.train.push_back(std::move(s));
        else if (tag == "calibration")
            split.calibration.push_back(std::move(s));
        else if (tag == "test")
            split.test.push_back(std::move(s));
        else
            throw std::runtime_error("load_dataset: unknown split tag " + tag);
    }
    return split;
}

}  // namespace poselift::synthkin
