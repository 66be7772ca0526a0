#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "poselift/pipeline.hpp"
#include "poselift/trainer.hpp"
#include "testutil.hpp"

using namespace poselift;
using ndgrad::Param;

namespace {

synthkin::DatasetSplit tiny_dataset(long count = 12, long frames = 4, long joints = 4, std::uint64_t seed = 5) {
    synthkin::GeneratorConfig cfg;
    cfg.count = count;
    cfg.frames = frames;
    cfg.joints = joints;
    cfg.cal_fraction = 0.1;
    cfg.test_fraction = 0.2;
    return synthkin::make_splits(cfg, seed);
}

trainer::TrainConfig tiny_train_config() {
    trainer::TrainConfig cfg;
    cfg.h_train = 4;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.epochs = 1;
    cfg.seed = 42;
    return cfg;
}

posenet::DenoiserConfig tiny_model_config(long frames = 4, long joints = 4) {
    posenet::DenoiserConfig dc;
    dc.frames = frames;
    dc.joints = joints;
    dc.embed_dim = 8;
    dc.spatial_layers = 1;
    dc.temporal_layers = 1;
    return dc;
}

}  // namespace

TEST(Adam, ZeroGradZeroDecayLeavesParamsUntouched) {
    Param p;
    p.name = "p";
    p.shape = {3};
    p.value = {1.0, -2.0, 0.5};
    trainer::AdamConfig cfg;
    cfg.weight_decay = 0.0;
    std::vector<double> zero(3, 0.0);
    trainer::adam_step(p, zero, 1, cfg);
    EXPECT_EQ(p.value, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, ZeroGradWithDecayShrinksByLrTimesDecay) {
    Param p;
    p.name = "p";
    p.shape = {2};
    p.value = {1.0, -4.0};
    trainer::AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    std::vector<double> zero(2, 0.0);
    trainer::adam_step(p, zero, 1, cfg);
    EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.01 * 0.1 * 1.0);
    EXPECT_DOUBLE_EQ(p.value[1], -4.0 - 0.01 * 0.1 * -4.0);
}

TEST(Adam, ThreeStepTraceMatchesHandRecursion) {
    Param p;
    p.name = "p";
    p.shape = {1};
    p.value = {0.7};
    trainer::AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.99;
    cfg.weight_decay = 0.0;
    cfg.eps = 1e-8;
    const std::vector<double> grads = {0.5, -0.3, 0.1};

    // hand recursion
    double theta = 0.7, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        const double g = grads[static_cast<std::size_t>(t - 1)];
        m = 0.9 * m + 0.1 * g;
        v = 0.99 * v + 0.01 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.99, t));
        theta -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    }

    for (int t = 1; t <= 3; ++t) {
        std::vector<double> g = {grads[static_cast<std::size_t>(t - 1)]};
        trainer::adam_step(p, g, t, cfg);
    }
    EXPECT_NEAR(p.value[0], theta, 1e-15);
}

TEST(Adam, SkipsStepOnNonFiniteGradient) {
    ndgrad::Tape tape;
    ndgrad::Binder binder(tape);
    Param p;
    p.name = "p";
    p.shape = {1};
    p.value = {1.0};
    ndgrad::Array leaf = binder.bind(p);
    ndgrad::Array loss = ndgrad::log(ndgrad::sigmoid(leaf));  // force a grad buffer
    tape.backward(ndgrad::reshape(loss, {}));
    tape.node(leaf.id).grad[0] = std::numeric_limits<double>::quiet_NaN();
    trainer::AdamState state;
    trainer::AdamConfig cfg;
    EXPECT_FALSE(trainer::apply_adam({&p}, binder, state, cfg));
    EXPECT_DOUBLE_EQ(p.value[0], 1.0);
    EXPECT_EQ(state.t, 0);
}

TEST(TrainStep, LambdaZeroTotalEqualsPoseLoss) {
    auto data = tiny_dataset();
    auto cfg = tiny_train_config();
    cfg.lambda = 0.0;
    auto model = trainer::init_model(tiny_model_config(), cfg);
    std::vector<synthkin::Sample> batch(data.train.begin(), data.train.begin() + 4);
    auto losses = trainer::train_step(model, batch, cfg, 99);
    EXPECT_EQ(losses.total, losses.pose);  // exact, not approximate
    EXPECT_FALSE(losses.skipped);
}

TEST(TrainStep, DeterministicLossBreakdown) {
    auto data = tiny_dataset();
    auto cfg = tiny_train_config();
    std::vector<synthkin::Sample> batch(data.train.begin(), data.train.begin() + 4);
    auto model_a = trainer::init_model(tiny_model_config(), cfg);
    auto la = trainer::train_step(model_a, batch, cfg, 123);
    auto model_b = trainer::init_model(tiny_model_config(), cfg);
    auto lb = trainer::train_step(model_b, batch, cfg, 123);
    EXPECT_EQ(la.pose, lb.pose);
    EXPECT_EQ(la.size, lb.size);
    EXPECT_EQ(la.adv, lb.adv);
    EXPECT_EQ(la.s, lb.s);
    // params after the step are identical too
    for (std::size_t i = 0; i < model_a.den.w_in.value.size(); ++i)
        EXPECT_EQ(model_a.den.w_in.value[i], model_b.den.w_in.value[i]);
}

// With lambda = 0 the whole conformalization stack scales away: the
// denoiser update must be bit-identical to a pose-only step and the scorer
// must stay at its initialization. With lambda > 0 the scorer trains.
TEST(TrainStep, LambdaZeroReducesToPoseOnlyTraining) {
    auto data = tiny_dataset();
    auto cfg = tiny_train_config();
    cfg.lambda = 0.0;
    std::vector<synthkin::Sample> batch(data.train.begin(), data.train.begin() + 4);

    auto joint = trainer::init_model(tiny_model_config(), cfg);
    trainer::train_step(joint, batch, cfg, 7, /*warm_start=*/false);
    auto pose_only = trainer::init_model(tiny_model_config(), cfg);
    trainer::train_step(pose_only, batch, cfg, 7, /*warm_start=*/true);

    for (Param* pj : joint.den.all()) {
        bool found = false;
        for (Param* pp : pose_only.den.all())
            if (pp->name == pj->name) {
                EXPECT_EQ(pj->value, pp->value) << pj->name;
                found = true;
            }
        EXPECT_TRUE(found);
    }
    auto fresh = scorer::init_scorer(tiny_model_config().embed_dim, cfg.seed);
    EXPECT_EQ(joint.sc.w1.value, fresh.w1.value);
    EXPECT_EQ(pose_only.sc.w1.value, fresh.w1.value);

    // lambda > 0 trains the scorer
    cfg.lambda = 0.6;
    auto active = trainer::init_model(tiny_model_config(), cfg);
    trainer::train_step(active, batch, cfg, 7, /*warm_start=*/false);
    EXPECT_NE(active.sc.w1.value, fresh.w1.value);
}

TEST(TrainStep, LossComponentsMatchScriptedPipeline) {
    auto data = tiny_dataset();
    auto cfg = tiny_train_config();
    std::vector<synthkin::Sample> batch(data.train.begin(), data.train.begin() + 2);
    auto model = trainer::init_model(tiny_model_config(), cfg);
    // keep pre-step parameter values for the oracle
    auto den_copy = model.den;
    auto sc_copy = model.sc;
    const std::uint64_t step_seed = 555;
    auto losses = trainer::train_step(model, batch, cfg, step_seed);

    // scripted re-evaluation from the plain forward paths and the tested
    // conformal primitives
    double pose_acc = 0.0, s_acc = 0.0, adv_acc = 0.0;
    std::vector<std::vector<double>> all_scores;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& sample = batch[i];
        auto y0 = trainer::scale_coords(sample.y.coords, model.pose_scale_mm);
        PoseSeq3D y0_pose(sample.y.frames, sample.y.joints, y0);
        auto t_eng = rng::engine(step_seed, "step.t", i);
        const long t = std::uniform_int_distribution<long>(0, model.sched.T)(t_eng);
        auto eps_eng = rng::engine(step_seed, "step.eps", i);
        auto eps = rng::gaussian(eps_eng, y0.size());
        auto y_t = diffusion::forward_diffuse(y0_pose, t, eps, model.sched);
        auto yhat = posenet::denoise_plain(den_copy, sample.x, y_t, t);
        pose_acc += posenet::pose_loss_plain(yhat, y0, sample.y.frames, sample.y.joints);

        std::vector<double> scores, disc_scores;
        for (long h = 0; h < cfg.h_train; ++h) {
            auto z_eng = rng::engine(step_seed, "step.hyp", i, static_cast<std::uint64_t>(h));
            auto z = rng::gaussian(z_eng, y0.size());
            auto yh = posenet::denoise_plain(den_copy, sample.x, z, model.sched.T);
            const double s = scorer::conformity_score_plain(den_copy, sc_copy, sample.x, yh);
            scores.push_back(s);
            adv_acc += (s - 1.0) * (s - 1.0) / static_cast<double>(cfg.h_train);
            disc_scores.push_back(s);
        }
        const double gt_score = scorer::conformity_score_plain(den_copy, sc_copy, sample.x, y0);
        double disc = (gt_score - 1.0) * (gt_score - 1.0);
        double hyp_sq = 0.0;
        for (double s : disc_scores) hyp_sq += s * s;
        disc += hyp_sq / static_cast<double>(disc_scores.size());
        s_acc += disc;
        all_scores.push_back(scores);
    }
    const double n = static_cast<double>(batch.size());
    EXPECT_NEAR(losses.pose, pose_acc / n, 1e-9);
    EXPECT_NEAR(losses.s, s_acc / n, 1e-9);
    EXPECT_NEAR(losses.adv, adv_acc / n, 1e-9);

    // size loss from the independently tested conformal ops on the scripted scores
    ndgrad::Tape tape;
    std::vector<std::vector<ndgrad::Array>> batch_arrays;
    for (const auto& scores : all_scores) {
        std::vector<ndgrad::Array> arr;
        for (double s : scores) arr.push_back(tape.scalar(s));
        batch_arrays.push_back(arr);
    }
    const double expected_size = conformal::train_step_cp(tape, batch_arrays, cfg.cp).value();
    EXPECT_NEAR(losses.size, expected_size, 1e-9);
    EXPECT_NEAR(losses.total, losses.pose + cfg.lambda * (losses.size + losses.adv), 1e-12);
}

TEST(TrainStep, SkipsOnNonFiniteLoss) {
    auto data = tiny_dataset();
    auto cfg = tiny_train_config();
    auto model = trainer::init_model(tiny_model_config(), cfg);
    model.den.w_in.value[0] = 1e308;  // provoke overflow
    auto before = model.den.w_out.value;
    std::vector<synthkin::Sample> batch(data.train.begin(), data.train.begin() + 2);
    auto losses = trainer::train_step(model, batch, cfg, 1);
    EXPECT_TRUE(losses.skipped);
    EXPECT_EQ(model.den.w_out.value, before);
}

TEST(Fit, LogHasOneRowPerStepWithContractFields) {
    auto data = tiny_dataset(12, 4, 4);
    data.train.resize(1);  // 1 sample, batch 4 -> ceil(1/4) = 1 row per epoch
    auto cfg = tiny_train_config();
    cfg.epochs = 3;
    auto model = trainer::init_model(tiny_model_config(), cfg);
    std::ostringstream log;
    trainer::fit(model, data, cfg, &log);
    std::istringstream is(log.str());
    std::string line;
    long rows = 0;
    while (std::getline(is, line)) {
        auto j = nlohmann::json::parse(line);
        for (const char* field : {"epoch", "step", "l_pose", "l_size", "l_adv", "l_s", "lr", "wall_ms"})
            EXPECT_TRUE(j.contains(field)) << field;
        ++rows;
    }
    EXPECT_EQ(rows, 3);  // one row per epoch at one step each
    EXPECT_EQ(model.epochs_trained, 3);
}

TEST(Fit, WarmStartEpochsTrainPoseOnly) {
    auto data = tiny_dataset();
    auto cfg = tiny_train_config();
    cfg.epochs = 2;
    cfg.warm_start_epochs = 1;
    auto model = trainer::init_model(tiny_model_config(), cfg);
    const auto scorer_before = model.sc.w1.value;
    std::ostringstream log;
    trainer::fit(model, data, cfg, &log);
    std::istringstream is(log.str());
    std::string line;
    bool saw_warm = false, saw_joint = false;
    while (std::getline(is, line)) {
        auto j = nlohmann::json::parse(line);
        if (j["epoch"].get<long>() == 0) {
            EXPECT_EQ(j["l_s"].get<double>(), 0.0);  // scorer untouched during warm start
            saw_warm = true;
        } else {
            EXPECT_NE(j["l_s"].get<double>(), 0.0);
            saw_joint = true;
        }
    }
    EXPECT_TRUE(saw_warm);
    EXPECT_TRUE(saw_joint);
    EXPECT_NE(model.sc.w1.value, scorer_before);  // joint epoch trained the scorer
}

TEST(Fit, ResumeContinuesEpochNumbering) {
    auto data = tiny_dataset();
    auto cfg = tiny_train_config();
    cfg.epochs = 2;
    auto model = trainer::init_model(tiny_model_config(), cfg);
    std::ostringstream log1;
    trainer::fit(model, data, cfg, &log1);
    const std::string path = "trainer_resume.ckpt";
    trainer::save_model(path, model);

    auto resumed = trainer::load_model(path);
    EXPECT_EQ(resumed.epochs_trained, 2);
    cfg.epochs = 1;
    std::ostringstream log2;
    trainer::fit(resumed, data, cfg, &log2);
    EXPECT_EQ(resumed.epochs_trained, 3);
    auto j = nlohmann::json::parse(log2.str().substr(0, log2.str().find('\n')));
    EXPECT_EQ(j["epoch"].get<long>(), 2);  // numbering picks up where it left off
    std::remove(path.c_str());
}

TEST(Fit, FixedSeedReproducesIdenticalCheckpointBytes) {
    auto run = [](const std::string& path) {
        auto data = tiny_dataset();
        auto cfg = tiny_train_config();
        cfg.epochs = 2;
        auto model = trainer::init_model(tiny_model_config(), cfg);
        trainer::fit(model, data, cfg, nullptr);
        trainer::save_model(path, model);
    };
    run("trainer_repro_a.ckpt");
    run("trainer_repro_b.ckpt");
    std::ifstream a("trainer_repro_a.ckpt", std::ios::binary), b("trainer_repro_b.ckpt", std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str());
    std::remove("trainer_repro_a.ckpt");
    std::remove("trainer_repro_b.ckpt");
}

TEST(Fit, RejectsEmptyTrainSplit) {
    auto data = tiny_dataset();
    data.train.clear();
    auto cfg = tiny_train_config();
    auto model = trainer::init_model(tiny_model_config(), cfg);
    EXPECT_THROW(trainer::fit(model, data, cfg, nullptr), std::invalid_argument);
}

TEST(ModelIo, SaveLoadRoundTripsParamsAndState) {
    auto cfg = tiny_train_config();
    auto model = trainer::init_model(tiny_model_config(), cfg);
    auto data = tiny_dataset();
    trainer::fit(model, data, cfg, nullptr);  // populate adam state
    const std::string path = "trainer_io.ckpt";
    trainer::save_model(path, model);
    auto loaded = trainer::load_model(path);
    EXPECT_EQ(loaded.den.cfg.frames, model.den.cfg.frames);
    EXPECT_EQ(loaded.den.cfg.embed_dim, model.den.cfg.embed_dim);
    EXPECT_EQ(loaded.sched.T, model.sched.T);
    EXPECT_EQ(loaded.epochs_trained, model.epochs_trained);
    EXPECT_EQ(loaded.den.w_in.value, model.den.w_in.value);
    EXPECT_EQ(loaded.den.w_in.m, model.den.w_in.m);
    EXPECT_EQ(loaded.sc.w3.value, model.sc.w3.value);
    EXPECT_DOUBLE_EQ(loaded.pose_scale_mm, model.pose_scale_mm);
    EXPECT_EQ(loaded.den_opt.t, model.den_opt.t);
    std::remove(path.c_str());
}
