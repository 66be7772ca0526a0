#pragma once

// Cosine variance schedule, forward corruption, and the DDIM sampling loop.
// Everything here is plain (tape-free) array math; the trainer drives the
// on-tape denoiser directly for its single-step hypothesis generation.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <vector>

#include "poselift/pose.hpp"
#include "poselift/rng.hpp"

namespace poselift::diffusion {

struct DiffusionSchedule {
    long T = 0;
    double eta_ddim = 0.0;
    std::vector<double> alpha_bar;  // [0..T], alpha_bar[0] == 1
    std::vector<double> beta;       // [0..T], beta[0] unused

    double sigma2(long t) const { return eta_ddim * beta[static_cast<std::size_t>(t)]; }
};

inline DiffusionSchedule build_cosine_schedule(long T, double eta_ddim = 0.0) {
    if (T < 1) throw std::invalid_argument("build_cosine_schedule: T must be >= 1");
    if (eta_ddim < 0.0) throw std::invalid_argument("build_cosine_schedule: eta_ddim must be >= 0");
    constexpr double s = 0.008;
    const double pi_half = std::acos(0.0);
    auto f = [&](double t) {
        const double c = std::cos((t / static_cast<double>(T) + s) / (1.0 + s) * pi_half);
        return c * c;
    };
    DiffusionSchedule sched;
    sched.T = T;
    sched.eta_ddim = eta_ddim;
    sched.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
    sched.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
    const double f0 = f(0.0);
    sched.alpha_bar[0] = 1.0;
    for (long t = 1; t <= T; ++t) {
        sched.alpha_bar[static_cast<std::size_t>(t)] = f(static_cast<double>(t)) / f0;
        const double b = 1.0 - sched.alpha_bar[static_cast<std::size_t>(t)] / sched.alpha_bar[static_cast<std::size_t>(t - 1)];
        sched.beta[static_cast<std::size_t>(t)] = std::min(b, 0.999);
    }
    return sched;
}

// q(y_t | y_0): sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps. Noise is injected by
// the caller so tests can use fixtures.
inline std::vector<double> forward_diffuse(const PoseSeq3D& y0, long t, const std::vector<double>& eps,
                                           const DiffusionSchedule& sched) {
    if (t < 0 || t > sched.T)
        throw std::invalid_argument("forward_diffuse: t=" + std::to_string(t) + " outside [0," +
                                    std::to_string(sched.T) + "]");
    if (eps.size() != y0.coords.size())
        throw std::invalid_argument("forward_diffuse: noise buffer size mismatch");
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    std::vector<double> out(y0.coords.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * y0.coords[i] + b * eps[i];
    return out;
}

// One DDIM chain from y_T ~ N(0, I). The denoiser predicts y0 directly; the
// implied noise is re-derived each jump. Steps follow t = T*(1 - k/K) with
// nearest-integer rounding and a forced final t' = 0. Returns the last
// predicted y0. With eta_ddim = 0 the chain is a deterministic function of
// the seed and the conditioning sequence.
template <typename Denoiser>
PoseSeq3D ddim_sample(Denoiser&& denoiser, const PoseSeq2D& x, long K, const DiffusionSchedule& sched,
                      std::uint64_t rng_seed) {
    if (K < 1) throw std::invalid_argument("ddim_sample: K must be >= 1");
    const long N = x.frames, J = x.joints;
    const std::size_t n = static_cast<std::size_t>(N * J * 3);
    std::mt19937_64 eng(rng_seed);
    std::vector<double> y = rng::gaussian(eng, n);
    std::vector<double> yhat;
    bool warned = false;
    auto step_t = [&](long k) {
        const double raw = static_cast<double>(sched.T) * (1.0 - static_cast<double>(k) / static_cast<double>(K));
        long t = std::lround(raw);
        return std::min(std::max(t, 0L), sched.T);
    };
    for (long k = 0; k < K; ++k) {
        const long t = step_t(k);
        const long t2 = (k + 1 == K) ? 0 : step_t(k + 1);
        yhat = denoiser(y, x, t);
        if (k + 1 == K) break;
        const double ab_t = sched.alpha_bar[static_cast<std::size_t>(t)];
        const double ab_t2 = sched.alpha_bar[static_cast<std::size_t>(t2)];
        double sig2 = sched.sigma2(t);
        double radicand = 1.0 - ab_t2 - sig2;
        if (radicand < 0.0) {
            sig2 = 1.0 - ab_t2;
            radicand = 0.0;
            if (!warned) {
                std::cerr << "ddim_sample: sigma_t clamped at t=" << t << " to keep the jump variance valid\n";
                warned = true;
            }
        }
        const double sig = std::sqrt(sig2);
        const double denom = std::max(std::sqrt(1.0 - ab_t), 1e-12);
        const double a_t = std::sqrt(ab_t), a_t2 = std::sqrt(ab_t2), c_eps = std::sqrt(radicand);
        if (sig > 0.0) {
            std::normal_distribution<double> dist(0.0, 1.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double eps_hat = (y[i] - a_t * yhat[i]) / denom;
                y[i] = a_t2 * yhat[i] + c_eps * eps_hat + sig * dist(eng);
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                const double eps_hat = (y[i] - a_t * yhat[i]) / denom;
                y[i] = a_t2 * yhat[i] + c_eps * eps_hat;
            }
        }
    }
    return PoseSeq3D(N, J, std::move(yhat));
}

}  // namespace poselift::diffusion
