#pragma once

// Joint optimization of the denoiser and the conformity scorer:
//   L_gen  = L_pose + lambda * (L_size + L_adv)   -> denoiser parameters
//   L_disc = lambda * L_S                         -> scorer parameters
// Both losses live on one tape and one backward pass splits them
// structurally: discriminator scores run on detached (off-tape) token
// embeddings, so L_S cannot reach the denoiser; adversarial scores run
// through a constant binding of the scorer, so L_adv cannot reach the
// scorer. The size loss connects to whatever the tape naturally wires.
// The whole conformalization stack scales with lambda, so lambda = 0 is
// exactly plain diffusion-pose training with the scorer left at its
// initialization.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "poselift/checkpoint.hpp"
#include "poselift/conformal.hpp"
#include "poselift/diffusion.hpp"
#include "poselift/ndgrad.hpp"
#include "poselift/posenet.hpp"
#include "poselift/rng.hpp"
#include "poselift/scorer.hpp"
#include "poselift/synthkin.hpp"

namespace poselift::trainer {

using ndgrad::Array;
using ndgrad::Binder;
using ndgrad::Param;
using ndgrad::Tape;

// How the differentiable CP loss splits its calibration/prediction halves:
// each sample's own hypothesis list, or the mini-batch with ground-truth
// scores calibrating (the same structure inference-time CP uses).
enum class CpSplit { PerSampleHypotheses, BatchGroundTruth };

struct TrainConfig {
    double lambda = 0.6;
    long h_train = 20;
    long batch_size = 8;
    double lr = 5e-5;
    double beta1 = 0.99;
    double beta2 = 0.99;
    double weight_decay = 0.1;
    double plateau_factor = 0.5;
    long plateau_patience = 10;
    long epochs = 30;
    std::uint64_t seed = 0;
    conformal::SoftCPConfig cp;
    CpSplit cp_split = CpSplit::PerSampleHypotheses;
    long diffusion_steps = 999;  // T
    double eta_ddim = 0.0;
    long k_train = 1;
    // divisor mapping millimeter poses into diffusion units; ~200 gives the
    // default skeleton roughly unit variance, matching the N(0,1) chain
    double pose_scale_mm = 200.0;
    long warm_start_epochs = 0;

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
        if (h_train < 4 || h_train % 2 != 0)
            throw std::invalid_argument("TrainConfig: h_train must be even and >= 4");
        if (batch_size < 1 || epochs < 1) throw std::invalid_argument("TrainConfig: batch_size/epochs must be >= 1");
        if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be positive");
        if (diffusion_steps < 1) throw std::invalid_argument("TrainConfig: diffusion step count must be >= 1");
        if (pose_scale_mm <= 0.0) throw std::invalid_argument("TrainConfig: pose_scale_mm must be positive");
        cp.validate();
    }
};

// ---------------------------------------------------------------------------
// Adam with bias correction and decoupled weight decay (applied after the
// adaptive step).

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.99;
    double beta2 = 0.99;
    double weight_decay = 0.1;
    double eps = 1e-8;
};

struct AdamState {
    long t = 0;
};

// Single-parameter update; `grad` may be empty (treated as all-zero, which
// still applies weight decay). `t` is the post-increment step count.
inline void adam_step(Param& p, std::span<const double> grad, long t, const AdamConfig& cfg) {
    if (p.m.empty()) p.m.assign(p.value.size(), 0.0);
    if (p.v.empty()) p.v.assign(p.value.size(), 0.0);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = i < grad.size() ? grad[i] : 0.0;
        p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
        p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = p.m[i] / bc1;
        const double vhat = p.v[i] / bc2;
        p.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        p.value[i] -= cfg.lr * cfg.weight_decay * p.value[i];
    }
}

// Applies one Adam step across a parameter group, reading gradients from the
// binder. Returns false (and leaves everything untouched) on non-finite
// gradients.
inline bool apply_adam(const std::vector<Param*>& params, const Binder& binder, AdamState& state,
                       const AdamConfig& cfg) {
    for (Param* p : params)
        for (double g : binder.grad_of(*p))
            if (!std::isfinite(g)) {
                std::cerr << "adam: non-finite gradient on " << p->name << ", step skipped\n";
                return false;
            }
    ++state.t;
    for (Param* p : params) adam_step(*p, binder.grad_of(*p), state.t, cfg);
    return true;
}

// ---------------------------------------------------------------------------
// Model bundle

struct Model {
    posenet::DenoiserParams den;
    scorer::ScorerParams sc;
    diffusion::DiffusionSchedule sched;
    double pose_scale_mm = 1000.0;
    long epochs_trained = 0;
    double current_lr = 0.0;
    double plateau_best = std::numeric_limits<double>::infinity();
    long plateau_wait = 0;
    AdamState den_opt, sc_opt;
};

inline Model init_model(const posenet::DenoiserConfig& den_cfg, const TrainConfig& cfg) {
    cfg.validate();
    Model m;
    m.den = posenet::init_denoiser(den_cfg, cfg.seed);
    m.sc = scorer::init_scorer(den_cfg.embed_dim, cfg.seed);
    m.sched = diffusion::build_cosine_schedule(cfg.diffusion_steps, cfg.eta_ddim);
    m.pose_scale_mm = cfg.pose_scale_mm;
    m.current_lr = cfg.lr;
    return m;
}

inline void save_model(const std::string& path, Model& model) {
    std::vector<checkpoint::NamedArray> arrays;
    auto dump_group = [&](std::vector<Param*> params) {
        for (Param* p : params) {
            arrays.push_back({p->name, p->shape, p->value});
            if (!p->m.empty()) {
                arrays.push_back({"opt.m." + p->name, p->shape, p->m});
                arrays.push_back({"opt.v." + p->name, p->shape, p->v});
            }
        }
    };
    dump_group(model.den.all());
    dump_group(model.sc.all());
    const auto& c = model.den.cfg;
    arrays.push_back({"meta.model",
                      {6},
                      {static_cast<double>(c.frames), static_cast<double>(c.joints),
                       static_cast<double>(c.embed_dim), static_cast<double>(c.spatial_layers),
                       static_cast<double>(c.temporal_layers), static_cast<double>(c.hidden_mult)}});
    arrays.push_back({"meta.schedule", {2}, {static_cast<double>(model.sched.T), model.sched.eta_ddim}});
    arrays.push_back({"meta.train",
                      {7},
                      {model.pose_scale_mm, static_cast<double>(model.epochs_trained), model.current_lr,
                       model.plateau_best, static_cast<double>(model.plateau_wait),
                       static_cast<double>(model.den_opt.t), static_cast<double>(model.sc_opt.t)}});
    checkpoint::save(path, arrays);
}

inline Model load_model(const std::string& path) {
    auto arrays = checkpoint::load(path);
    std::unordered_map<std::string, checkpoint::NamedArray*> by_name;
    for (auto& a : arrays) by_name[a.name] = &a;
    auto need = [&](const std::string& name) -> checkpoint::NamedArray& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint missing array: " + name);
        return *it->second;
    };
    const auto& mm = need("meta.model").data;
    posenet::DenoiserConfig cfg;
    cfg.frames = static_cast<long>(mm[0]);
    cfg.joints = static_cast<long>(mm[1]);
    cfg.embed_dim = static_cast<long>(mm[2]);
    cfg.spatial_layers = static_cast<long>(mm[3]);
    cfg.temporal_layers = static_cast<long>(mm[4]);
    cfg.hidden_mult = static_cast<long>(mm[5]);
    const auto& ms = need("meta.schedule").data;
    const auto& mt = need("meta.train").data;

    Model model;
    model.den = posenet::init_denoiser(cfg, 0);
    model.sc = scorer::init_scorer(cfg.embed_dim, 0);
    model.sched = diffusion::build_cosine_schedule(static_cast<long>(ms[0]), ms[1]);
    model.pose_scale_mm = mt[0];
    model.epochs_trained = static_cast<long>(mt[1]);
    model.current_lr = mt[2];
    model.plateau_best = mt[3];
    model.plateau_wait = static_cast<long>(mt[4]);
    model.den_opt.t = static_cast<long>(mt[5]);
    model.sc_opt.t = static_cast<long>(mt[6]);

    auto fill_group = [&](std::vector<Param*> params) {
        for (Param* p : params) {
            auto& src = need(p->name);
            if (src.shape != p->shape)
                throw std::runtime_error("checkpoint shape mismatch for " + p->name);
            p->value = src.data;
            if (by_name.count("opt.m." + p->name)) {
                p->m = need("opt.m." + p->name).data;
                p->v = need("opt.v." + p->name).data;
            }
        }
    };
    fill_group(model.den.all());
    fill_group(model.sc.all());
    return model;
}

// ---------------------------------------------------------------------------
// One optimization step over a mini-batch

struct StepLosses {
    double pose = 0.0, size = 0.0, adv = 0.0, s = 0.0, total = 0.0;
    bool skipped = false;
};

inline std::vector<double> scale_coords(const std::vector<double>& mm, double scale) {
    std::vector<double> out(mm.size());
    for (std::size_t i = 0; i < mm.size(); ++i) out[i] = mm[i] / scale;
    return out;
}

inline StepLosses train_step(Model& model, std::span<const synthkin::Sample> batch, const TrainConfig& cfg,
                             std::uint64_t step_seed, bool warm_start = false) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const long T = model.sched.T;
    const long d = model.den.cfg.embed_dim;
    // lambda = 0 scales every conformalization term (and the scorer's
    // discriminator step) to zero, so the step is plain pose training
    warm_start = warm_start || cfg.lambda == 0.0;

    Tape tape;
    Binder trainable(tape);
    Binder frozen(tape);
    auto bd = posenet::bind(trainable, model.den);
    auto bs = scorer::bind(trainable, model.sc);
    auto bs_const = scorer::bind(frozen, model.sc);

    // batch-granular split needs at least two calibration samples; tiny
    // trailing batches fall back to the per-sample split
    const long n_cal_split =
        cfg.cp_split == CpSplit::BatchGroundTruth ? static_cast<long>(batch.size()) / 2 : 0;
    const bool batch_split = n_cal_split >= 2;

    std::vector<Array> pose_terms, adv_terms, disc_terms, cal_gt_scores;
    std::vector<std::vector<Array>> batch_scores;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const synthkin::Sample& sample = batch[i];
        const std::vector<double> y0 = scale_coords(sample.y.coords, model.pose_scale_mm);
        PoseSeq3D y0_pose(sample.y.frames, sample.y.joints, y0);

        auto t_eng = rng::engine(step_seed, "step.t", i);
        const long t = std::uniform_int_distribution<long>(0, T)(t_eng);
        auto eps_eng = rng::engine(step_seed, "step.eps", i);
        const std::vector<double> eps = rng::gaussian(eps_eng, y0.size());
        const std::vector<double> y_t = diffusion::forward_diffuse(y0_pose, t, eps, model.sched);

        Array yhat = posenet::denoise_tape(tape, bd, sample.x, y_t, t);
        pose_terms.push_back(posenet::pose_loss(tape, yhat, y0));
        if (warm_start) continue;

        const bool is_cal_sample = batch_split && static_cast<long>(i) < n_cal_split;
        const bool need_size_scores = !batch_split || !is_cal_sample;
        std::vector<Array> size_scores, adv_scores, disc_scores;
        for (long h = 0; h < cfg.h_train; ++h) {
            auto z_eng = rng::engine(step_seed, "step.hyp", i, static_cast<std::uint64_t>(h));
            const std::vector<double> z = rng::gaussian(z_eng, y0.size());
            Array yh = posenet::denoise_tape(tape, bd, sample.x, z, T);  // single-jump DDIM
            if (need_size_scores)
                size_scores.push_back(scorer::conformity_score_tape(tape, bd.w_in, bd.b_in, bs, sample.x, yh));
            adv_scores.push_back(scorer::conformity_score_tape(tape, bd.w_in, bd.b_in, bs_const, sample.x, yh));
            // discriminator input: embedding detached from the generator path
            std::vector<double> yh_vals(yh.data().begin(), yh.data().end());
            auto tokens = posenet::embed_input_plain(model.den, sample.x, yh_vals);
            disc_scores.push_back(
                scorer::score_tokens_tape(bs, tape.leaf({sample.y.frames * sample.y.joints, d}, std::move(tokens))));
        }
        if (is_cal_sample) {
            Array y0_leaf = tape.leaf({sample.y.frames, sample.y.joints, 3}, y0);
            cal_gt_scores.push_back(scorer::conformity_score_tape(tape, bd.w_in, bd.b_in, bs, sample.x, y0_leaf));
        }
        auto gt_tokens = posenet::embed_input_plain(model.den, sample.x, y0);
        Array gt_score =
            scorer::score_tokens_tape(bs, tape.leaf({sample.y.frames * sample.y.joints, d}, std::move(gt_tokens)));
        disc_terms.push_back(scorer::discriminator_loss(gt_score, disc_scores));
        adv_terms.push_back(scorer::adversarial_loss(adv_scores));
        if (need_size_scores) batch_scores.push_back(std::move(size_scores));
    }

    Array l_pose = ndgrad::mean(ndgrad::stack(pose_terms));
    Array total = l_pose;
    StepLosses out;
    out.pose = l_pose.value();
    const bool scorer_active = !warm_start && cfg.lambda > 0.0;
    if (!warm_start) {
        Array l_size = batch_split ? conformal::train_step_cp_batch(tape, cal_gt_scores, batch_scores, cfg.cp)
                                   : conformal::train_step_cp(tape, batch_scores, cfg.cp);
        Array l_adv = ndgrad::mean(ndgrad::stack(adv_terms));
        Array l_s = ndgrad::mean(ndgrad::stack(disc_terms));
        Array l_gen = ndgrad::add(l_pose, ndgrad::smul(ndgrad::add(l_size, l_adv), cfg.lambda));
        total = ndgrad::add(l_gen, ndgrad::smul(l_s, cfg.lambda));
        out.size = l_size.value();
        out.adv = l_adv.value();
        out.s = l_s.value();
        out.total = l_gen.value();
    } else {
        out.total = out.pose;
    }

    if (!std::isfinite(total.value())) {
        std::cerr << "train_step: non-finite loss, step skipped\n";
        out.skipped = true;
        return out;
    }
    tape.backward(total);

    AdamConfig opt{model.current_lr, cfg.beta1, cfg.beta2, cfg.weight_decay};
    const bool den_ok = apply_adam(model.den.all(), trainable, model.den_opt, opt);
    if (scorer_active && den_ok) apply_adam(model.sc.all(), trainable, model.sc_opt, opt);
    out.skipped = !den_ok;
    return out;
}

// ---------------------------------------------------------------------------
// Epoch loop with shuffled mini-batches, plateau LR reduction on the mean
// epoch pose loss, and a JSON-Lines step log.

inline void fit(Model& model, const synthkin::DatasetSplit& data, const TrainConfig& cfg,
                std::ostream* log_stream = nullptr) {
    cfg.validate();
    if (data.train.empty()) throw std::invalid_argument("fit: empty training split");
    if (model.current_lr <= 0.0) model.current_lr = cfg.lr;
    const long n = static_cast<long>(data.train.size());
    long global_step = model.den_opt.t;
    const long first_epoch = model.epochs_trained;
    for (long e = first_epoch; e < first_epoch + cfg.epochs; ++e) {
        std::vector<long> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0L);
        auto shuffle_eng = rng::engine(cfg.seed, "train.shuffle", static_cast<std::uint64_t>(e));
        std::shuffle(order.begin(), order.end(), shuffle_eng);

        const bool warm = e < cfg.warm_start_epochs;
        double epoch_pose = 0.0;
        long steps_in_epoch = 0;
        for (long start = 0; start < n; start += cfg.batch_size) {
            const long stop = std::min(start + cfg.batch_size, n);
            std::vector<synthkin::Sample> batch;
            batch.reserve(static_cast<std::size_t>(stop - start));
            for (long k = start; k < stop; ++k) batch.push_back(data.train[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
            const auto t0 = std::chrono::steady_clock::now();
            const std::uint64_t step_seed =
                rng::derive(cfg.seed, "train.step", static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(steps_in_epoch));
            StepLosses losses = train_step(model, batch, cfg, step_seed, warm);
            const double wall_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            ++global_step;
            ++steps_in_epoch;
            epoch_pose += losses.pose;
            if (log_stream) {
                nlohmann::json row{{"epoch", e},          {"step", global_step}, {"l_pose", losses.pose},
                                   {"l_size", losses.size}, {"l_adv", losses.adv}, {"l_s", losses.s},
                                   {"lr", model.current_lr}, {"wall_ms", wall_ms}};
                *log_stream << row.dump() << '\n';
            }
        }
        epoch_pose /= static_cast<double>(steps_in_epoch);
        if (epoch_pose < model.plateau_best - 1e-12) {
            model.plateau_best = epoch_pose;
            model.plateau_wait = 0;
        } else if (++model.plateau_wait > cfg.plateau_patience) {
            model.current_lr *= cfg.plateau_factor;
            model.plateau_wait = 0;
        }
        ++model.epochs_trained;
    }
}

}  // namespace poselift::trainer
