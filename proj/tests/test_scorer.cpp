#include <gtest/gtest.h>

#include <random>

#include "poselift/scorer.hpp"
#include "testutil.hpp"

using namespace poselift;
using ndgrad::Array;
using ndgrad::Binder;
using ndgrad::Tape;

namespace {

struct Rig {
    posenet::DenoiserConfig cfg;
    posenet::DenoiserParams den;
    scorer::ScorerParams sc;
    PoseSeq2D x;
    std::vector<double> y;
};

Rig make_rig(std::uint64_t seed) {
    Rig r;
    r.cfg.frames = 2;
    r.cfg.joints = 3;
    r.cfg.embed_dim = 8;
    r.cfg.spatial_layers = 1;
    r.cfg.temporal_layers = 1;
    r.den = posenet::init_denoiser(r.cfg, seed);
    r.sc = scorer::init_scorer(r.cfg.embed_dim, seed);
    std::mt19937_64 eng(seed + 101);
    r.x = PoseSeq2D(r.cfg.frames, r.cfg.joints,
                    testutil::uniform_vec(eng, static_cast<std::size_t>(r.cfg.frames * r.cfg.joints * 2), -0.5, 0.5));
    r.y = testutil::uniform_vec(eng, static_cast<std::size_t>(r.cfg.frames * r.cfg.joints * 3), -1, 1);
    return r;
}

}  // namespace

TEST(ConformityScore, AlwaysInOpenUnitInterval) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rig r = make_rig(seed);
        const double s = scorer::conformity_score_plain(r.den, r.sc, r.x, r.y);
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
    }
}

TEST(ConformityScore, PureOnIdenticalInputs) {
    Rig r = make_rig(33);
    EXPECT_DOUBLE_EQ(scorer::conformity_score_plain(r.den, r.sc, r.x, r.y),
                     scorer::conformity_score_plain(r.den, r.sc, r.x, r.y));
}

TEST(ConformityScore, TapeMatchesPlain) {
    Rig r = make_rig(44);
    Tape tape;
    Binder binder(tape);
    auto bd = posenet::bind(binder, r.den);
    auto bs = scorer::bind(binder, r.sc);
    Array yl = tape.leaf({r.cfg.frames, r.cfg.joints, 3}, r.y);
    Array s = scorer::conformity_score_tape(tape, bd.w_in, bd.b_in, bs, r.x, yl);
    EXPECT_DOUBLE_EQ(s.value(), scorer::conformity_score_plain(r.den, r.sc, r.x, r.y));
}

TEST(ConformityScore, RejectsNonFiniteInput) {
    Rig r = make_rig(55);
    r.y[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(scorer::conformity_score_plain(r.den, r.sc, r.x, r.y), std::invalid_argument);
}

TEST(ConformityScore, GradientsMatchFiniteDifferences) {
    Rig r = make_rig(66);
    auto value = [&] { return scorer::conformity_score_plain(r.den, r.sc, r.x, r.y); };

    Tape tape;
    Binder binder(tape);
    auto bd = posenet::bind(binder, r.den);
    auto bs = scorer::bind(binder, r.sc);
    Array yl = tape.leaf({r.cfg.frames, r.cfg.joints, 3}, r.y);
    Array s = scorer::conformity_score_tape(tape, bd.w_in, bd.b_in, bs, r.x, yl);
    tape.backward(s);

    for (ndgrad::Param* p : r.sc.all()) {
        auto g = binder.grad_of(*p);
        ASSERT_FALSE(g.empty()) << p->name;
        for (std::size_t k = 0; k < p->value.size(); ++k) {
            const double fd = testutil::fd_derivative(value, p->value, k);
            ASSERT_LE(testutil::rel_err(g[k], fd), 1e-4) << p->name << "[" << k << "]";
        }
    }
    // shared embedding parameters are differentiable too
    for (ndgrad::Param* p : {&r.den.w_in, &r.den.b_in}) {
        auto g = binder.grad_of(*p);
        ASSERT_FALSE(g.empty()) << p->name;
        for (std::size_t k = 0; k < p->value.size(); ++k) {
            const double fd = testutil::fd_derivative(value, p->value, k);
            ASSERT_LE(testutil::rel_err(g[k], fd), 1e-4) << p->name << "[" << k << "]";
        }
    }
}

TEST(DiscriminatorLoss, PerfectDiscriminatorScoresZero) {
    Tape tape;
    Array gt = tape.scalar(1.0);
    std::vector<Array> hyp = {tape.scalar(0.0), tape.scalar(0.0)};
    EXPECT_DOUBLE_EQ(scorer::discriminator_loss(gt, hyp).value(), 0.0);
}

TEST(DiscriminatorLoss, ArithmeticExamples) {
    {
        Tape tape;
        Array gt = tape.scalar(0.5);
        std::vector<Array> hyp = {tape.scalar(0.5)};
        EXPECT_DOUBLE_EQ(scorer::discriminator_loss(gt, hyp).value(), 0.5);  // 0.25 + 0.25
    }
    {
        Tape tape;
        Array gt = tape.scalar(0.9);
        std::vector<Array> hyp = {tape.scalar(0.2), tape.scalar(0.4)};
        EXPECT_NEAR(scorer::discriminator_loss(gt, hyp).value(), 0.01 + 0.10, 1e-12);
    }
}

TEST(DiscriminatorLoss, RejectsEmptyHypothesisList) {
    Tape tape;
    Array gt = tape.scalar(0.5);
    EXPECT_THROW(scorer::discriminator_loss(gt, {}), std::invalid_argument);
}

TEST(AdversarialLoss, Examples) {
    {
        Tape tape;
        std::vector<Array> hyp = {tape.scalar(1.0), tape.scalar(1.0)};
        EXPECT_DOUBLE_EQ(scorer::adversarial_loss(hyp).value(), 0.0);
    }
    {
        Tape tape;
        std::vector<Array> hyp = {tape.scalar(0.0)};
        EXPECT_DOUBLE_EQ(scorer::adversarial_loss(hyp).value(), 1.0);
    }
    {
        Tape tape;
        std::vector<Array> hyp = {tape.scalar(0.25), tape.scalar(0.75)};
        EXPECT_NEAR(scorer::adversarial_loss(hyp).value(), 0.3125, 1e-12);
    }
    {
        Tape tape;
        EXPECT_THROW(scorer::adversarial_loss({}), std::invalid_argument);
    }
}

TEST(ScorerLosses, BoundedOnUnitIntervalInputs) {
    std::mt19937_64 eng(77);
    std::uniform_real_distribution<double> unit(1e-6, 1.0 - 1e-6);
    for (int trial = 0; trial < 200; ++trial) {
        Tape tape;
        Array gt = tape.scalar(unit(eng));
        std::vector<Array> hyp;
        const int h = 1 + static_cast<int>(eng() % 8);
        for (int i = 0; i < h; ++i) hyp.push_back(tape.scalar(unit(eng)));
        const double disc = scorer::discriminator_loss(gt, hyp).value();
        const double adv = scorer::adversarial_loss(hyp).value();
        EXPECT_GE(disc, 0.0);
        EXPECT_LE(disc, 2.0);
        EXPECT_GE(adv, 0.0);
        EXPECT_LE(adv, 1.0);
    }
}

// The discriminator loss must never touch denoiser parameters (its inputs
// are detached pooled embeddings), and the adversarial loss must never touch
// the scorer MLP through its trainable binding.
TEST(ScorerLosses, DetachmentContract) {
    Rig r = make_rig(88);
    const long d = r.cfg.embed_dim;

    const long tokens = r.cfg.frames * r.cfg.joints;
    {
        // discriminator path
        Tape tape;
        Binder trainable(tape);
        auto bd = posenet::bind(trainable, r.den);
        auto bs = scorer::bind(trainable, r.sc);
        auto tok_gt = posenet::embed_input_plain(r.den, r.x, r.y);
        Array gt_score = scorer::score_tokens_tape(bs, tape.leaf({tokens, d}, tok_gt));
        std::vector<Array> hyp_scores;
        for (int h = 0; h < 3; ++h) {
            auto yh = r.y;
            for (auto& v : yh) v += 0.1 * static_cast<double>(h + 1);
            auto tok = posenet::embed_input_plain(r.den, r.x, yh);
            hyp_scores.push_back(scorer::score_tokens_tape(bs, tape.leaf({tokens, d}, tok)));
        }
        Array loss = scorer::discriminator_loss(gt_score, hyp_scores);
        tape.backward(loss);
        for (ndgrad::Param* p : r.den.all()) EXPECT_TRUE(trainable.grad_of(*p).empty()) << p->name;
        bool scorer_touched = false;
        for (ndgrad::Param* p : r.sc.all())
            for (double g : trainable.grad_of(*p))
                if (g != 0.0) scorer_touched = true;
        EXPECT_TRUE(scorer_touched);
    }
    {
        // adversarial path: scorer applied through a frozen binding
        Tape tape;
        Binder trainable(tape);
        Binder frozen(tape);
        auto bd = posenet::bind(trainable, r.den);
        auto bs_train = scorer::bind(trainable, r.sc);  // exists on tape, must stay untouched
        auto bs_const = scorer::bind(frozen, r.sc);
        Array yl = tape.leaf({r.cfg.frames, r.cfg.joints, 3}, r.y);
        std::vector<Array> hyp_scores = {
            scorer::conformity_score_tape(tape, bd.w_in, bd.b_in, bs_const, r.x, yl)};
        Array loss = scorer::adversarial_loss(hyp_scores);
        tape.backward(loss);
        for (ndgrad::Param* p : r.sc.all()) EXPECT_TRUE(trainable.grad_of(*p).empty()) << p->name;
        bool embed_touched = false;
        for (double g : trainable.grad_of(r.den.w_in))
            if (g != 0.0) embed_touched = true;
        EXPECT_TRUE(embed_touched);
    }
}
