#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scanflow/reward.hpp"
#include "util.hpp"

using namespace scanflow;

namespace {

IorGeometry geom(double m_w, double m_h, int w, int h) {
    IorGeometry g;
    g.m_w = m_w;
    g.m_h = m_h;
    g.w_inp = w;
    g.h_inp = h;
    return g;
}

Scanpath path(std::vector<Fixation> f) { return {"s", std::nullopt, std::move(f)}; }

} // namespace

TEST(IorGeometry, WorkedExample) {
    auto g = ior_geometry(100, 1920, 1080, 3840, 2160, 224, 224);
    EXPECT_NEAR(g.m_orig, 200.0, 1e-12);
    EXPECT_NEAR(g.m_w, 11.6667, 5e-5);
    EXPECT_NEAR(g.m_h, 20.7407, 5e-5);
}

TEST(IorGeometry, IdentityAndLinearity) {
    auto g = ior_geometry(37, 500, 500, 500, 500, 500, 500);
    EXPECT_DOUBLE_EQ(g.m_orig, 37);
    EXPECT_DOUBLE_EQ(g.m_w, 37);
    EXPECT_DOUBLE_EQ(g.m_h, 37);
    auto a = ior_geometry(80, 1920, 1080, 1000, 700, 64, 48);
    auto b = ior_geometry(80, 1920, 1080, 1000, 700, 128, 48);
    EXPECT_NEAR(b.m_w, 2 * a.m_w, 1e-12);
    EXPECT_DOUBLE_EQ(b.m_h, a.m_h);
}

TEST(IorGeometry, FieldEqualitiesOverRandomTuples) {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(1.0, 4000.0);
    std::uniform_int_distribution<int> inp(8, 512);
    for (int k = 0; k < 1000; ++k) {
        const double md = u(rng) / 10, W = u(rng), H = u(rng), wi = u(rng), hi = u(rng);
        const int w = inp(rng), h = inp(rng);
        auto g = ior_geometry(md, W, H, wi, hi, w, h);
        const double orig = md / std::min(W / wi, H / hi);
        EXPECT_LT(std::abs(g.m_orig - orig) / orig, 1e-12);
        EXPECT_LT(std::abs(g.m_w - w / wi * orig) / (w / wi * orig), 1e-12);
        EXPECT_LT(std::abs(g.m_h - h / hi * orig) / (h / hi * orig), 1e-12);
    }
}

TEST(IorGeometry, RejectsNonPositive) {
    EXPECT_THROW(ior_geometry(0, 1920, 1080, 100, 100, 64, 64), ValidationError);
    EXPECT_THROW(ior_geometry(10, 1920, 1080, 100, 100, 0, 64), ValidationError);
}

TEST(ApplyIor, EmptyPriorLeavesMap) {
    SaliencyMap m(8, 8);
    std::mt19937_64 rng(1);
    for (auto& v : m.values) v = std::uniform_real_distribution<double>(0, 1)(rng);
    auto out = apply_ior(m, {}, geom(2, 2, 8, 8));
    EXPECT_EQ(out.values, m.values);
    EXPECT_TRUE(out.inhibitions.empty());
}

TEST(ApplyIor, QueryAtPriorIsZeroAndBoundaryInclusive) {
    SaliencyMap m(10, 10);
    std::fill(m.values.begin(), m.values.end(), 1.0);
    const Fixation f{0.45, 0.45, 0.2};
    auto out = apply_ior(m, std::span(&f, 1), geom(2, 1, 10, 10));
    EXPECT_EQ(salient_value(out, 0.45, 0.45), 0.0);
    // (4.5,4.5) centre; cell centre (6.5,4.5) lies exactly on the ellipse
    EXPECT_EQ(out.at(6, 4), 0.0);
    EXPECT_EQ(out.at(7, 4), 1.0);
    EXPECT_EQ(out.at(4, 5), 0.0);
    EXPECT_EQ(out.at(4, 6), 1.0);
    EXPECT_TRUE(Inhibition({4.5, 4.5, 2, 1}).contains(6.5, 4.5));
}

TEST(SalientValue, PeakOutsideAndMidpoint) {
    SaliencyMap m(4, 4);
    m.at(1, 1) = 1.0;
    EXPECT_DOUBLE_EQ(salient_value(m, 1.5 / 4, 1.5 / 4), 1.0);
    EXPECT_EQ(salient_value(m, -0.01, 0.5), 0.0);
    EXPECT_EQ(salient_value(m, 0.5, 1.2), 0.0);
    // halfway between cell (1,1)=1 and cell (2,1)=0
    EXPECT_DOUBLE_EQ(salient_value(m, 2.0 / 4, 1.5 / 4), 0.5);
}

TEST(EmpiricalSaliency, SingleAndDoublePeaks) {
    const Fixation c{0.5 + 0.5 / 16, 0.5 + 0.5 / 16, 0.3};
    auto m = build_empirical_saliency(std::span(&c, 1), 16, 16, 1.5);
    EXPECT_DOUBLE_EQ(m.at(8, 8), 1.0);
    EXPECT_DOUBLE_EQ(m.max_value(), 1.0);
    std::vector<Fixation> two{{0.1 + 0.5 / 40, 0.5 + 0.5 / 40, 0.2}, {0.9 + 0.5 / 40, 0.5 + 0.5 / 40, 0.2}};
    auto d = build_empirical_saliency(two, 40, 40, 1.0);
    EXPECT_NEAR(d.at(4, 20), 1.0, 1e-12);
    EXPECT_NEAR(d.at(36, 20), 1.0, 1e-12);
}

TEST(EmpiricalSaliency, UniformFixationsFlattenTowardConstantField) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.2, 0.8);
    auto ratio = [&](std::size_t n) {
        std::vector<Fixation> f;
        for (std::size_t i = 0; i < n; ++i) f.push_back({u(rng), u(rng), 0.2});
        auto m = build_empirical_saliency(f, 32, 32, 2.0);
        // interior region away from the border falloff
        double mx = 0, sum = 0;
        int cnt = 0;
        for (int r = 10; r < 22; ++r)
            for (int c = 10; c < 22; ++c) {
                mx = std::max(mx, m.at(c, r));
                sum += m.at(c, r);
                ++cnt;
            }
        return mx / (sum / cnt);
    };
    const double r100 = ratio(100), r1000 = ratio(1000), r10000 = ratio(10000);
    EXPECT_GT(r100, r1000);
    EXPECT_GT(r1000, r10000);
    EXPECT_LT(r10000, 1.1);
}

TEST(EpisodeReward, ArithmeticOfTotal) {
    RewardBreakdown r;
    r.r_dtwd = 2.0;
    r.r_sal_steps = {0.5, 0.3};
    const double total = -1.0 * r.r_dtwd + 1.0 * (0.5 + 0.3);
    EXPECT_NEAR(total, -1.2, 1e-12);

    // Same numbers through episode_reward: a 2-step path against a truth 2.0 away in DTWD
    SaliencyMap m(2, 1);
    m.at(0, 0) = 0.5;
    m.at(1, 0) = 0.3;
    auto pred = path({{0.25, 0.5, 0.2}, {0.75, 0.5, 0.2}});
    auto truth = pred;
    truth.fixations = {{0.25, 0.5, 1.2}, {0.75, 0.5, 1.2}};  // each aligned pair differs by 1.0 in t
    auto out = episode_reward(pred, truth, m, geom(0.1, 0.1, 2, 1));
    EXPECT_NEAR(out.r_dtwd, 2.0, 1e-12);
    EXPECT_NEAR(out.r_sal_steps[0], 0.5, 1e-12);
    EXPECT_NEAR(out.r_sal_steps[1], 0.3, 1e-12);
    EXPECT_NEAR(out.total, -1.2, 1e-12);
}

TEST(EpisodeReward, PerfectPredictionScoresT) {
    SaliencyMap m(8, 8);
    std::fill(m.values.begin(), m.values.end(), 1.0);
    auto p = path({{0.1, 0.1, 0.2}, {0.9, 0.1, 0.2}, {0.1, 0.9, 0.2}, {0.9, 0.9, 0.2}});
    auto r = episode_reward(p, p, m, geom(1, 1, 8, 8));
    EXPECT_NEAR(r.total, 4.0, 1e-12);
}

TEST(EpisodeReward, RepeatedLocationIsInhibited) {
    SaliencyMap m(8, 8);
    std::fill(m.values.begin(), m.values.end(), 1.0);
    auto p = path({{0.4, 0.4, 0.2}, {0.4, 0.4, 0.2}});
    auto r = episode_reward(p, p, m, geom(1, 1, 8, 8));
    EXPECT_GT(r.r_sal_steps[0], 0.0);
    EXPECT_EQ(r.r_sal_steps[1], 0.0);
    RewardFlags no_ior;
    no_ior.use_ior = false;
    EXPECT_GT(episode_reward(p, p, m, geom(1, 1, 8, 8), no_ior).r_sal_steps[1], 0.0);
}

TEST(EpisodeReward, MatchesStraightLineOracle) {
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> u(0, 1);
    const int w = 12, h = 9;
    for (int ep = 0; ep < 50; ++ep) {
        SaliencyMap m(w, h);
        for (auto& v : m.values) v = u(rng);
        auto pred = path(oracle::random_fixations(rng, 6));
        auto truth = path(oracle::random_fixations(rng, 5));
        const auto g = geom(0.5 + 2 * u(rng), 0.5 + 2 * u(rng), w, h);
        RewardFlags f;
        f.use_r_sal = ep % 4 != 1;
        f.use_r_dtwd = ep % 4 != 2;
        f.use_ior = ep % 4 != 3;
        const double got = episode_reward(pred, truth, m, g, f).total;
        const double want = oracle::straight_reward(pred.fixations, truth.fixations, m.values, w, h, g.m_w, g.m_h,
                                                    f.use_r_sal, f.use_r_dtwd, f.use_ior);
        EXPECT_NEAR(got, want, 1e-12) << "episode " << ep;
    }
}

TEST(EpisodeReward, RejectsStimulusMismatch) {
    SaliencyMap m(2, 2);
    auto a = path({{0.5, 0.5, 0.2}});
    auto b = a;
    b.stimulus_id = "other";
    EXPECT_THROW(episode_reward(a, b, m, geom(1, 1, 2, 2)), ValidationError);
}

TEST(SaliencyGrid, FileRoundTripAndBadMagic) {
    testutil::TempDir dir;
    SaliencyMap m(3, 2);
    m.values = {0, 0.25, 0.5, 0.75, 1, 0.125};
    write_saliency_grid(m, dir / "a.salg");
    auto back = read_saliency_grid(dir / "a.salg");
    EXPECT_EQ(back.values, m.values);
    std::ofstream(dir / "bad.salg") << "NOPE1234";
    EXPECT_THROW(read_saliency_grid(dir / "bad.salg"), FormatError);
}
