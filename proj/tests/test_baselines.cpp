#include <gtest/gtest.h>

#include <cmath>

#include "mcseg/baselines.hpp"
#include "support.hpp"

using namespace mcseg;
using namespace mcseg::testing;

namespace {

MedianModel axes() { return MedianModel{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

std::vector<std::vector<double>> random_points(std::size_t n, std::size_t d, SplitMix64& rng) {
    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    for (auto& p : x)
        for (auto& v : p) v = rng.uniform(-5, 5);
    return x;
}

}  // namespace

TEST(Medians, WorkedExamples) {
    const auto m = fit_medians({{{0, 0, 0}, 0}, {{2, 2, 2}, 0}, {{4, 4, 4}, 0}, {{1, 5, 9}, 1}}, 2);
    EXPECT_EQ(m.medians[0], (std::vector<double>{2, 2, 2}));
    EXPECT_EQ(m.medians[1], (std::vector<double>{1, 5, 9}));
    // Even count takes the lower median.
    const auto e = fit_medians({{{1}, 0}, {{7}, 0}, {{3}, 0}, {{5}, 0}}, 1);
    EXPECT_EQ(e.medians[0][0], 3.0);
}

TEST(Medians, Errors) {
    EXPECT_THROW(fit_medians({}, 2), ArgumentError);
    try {
        fit_medians({{{1, 1}, 0}}, 2);
        FAIL();
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find('1'), std::string::npos);
    }
    EXPECT_THROW(fit_medians({{{0, 0}, 0}}, 1), ArgumentError);
}

TEST(Medians, PermutationInvariant) {
    SplitMix64 rng(1);
    std::vector<LabeledPixel> px;
    for (int i = 0; i < 60; ++i)
        px.push_back({{rng.uniform(1, 2), rng.uniform(1, 2)}, static_cast<std::uint8_t>(rng.index(3))});
    const auto a = fit_medians(px, 3);
    rng.shuffle(std::span<LabeledPixel>(px));
    EXPECT_EQ(fit_medians(px, 3).medians, a.medians);
}

TEST(Knn, WorkedExamples) {
    const MedianModel m{{{1, 0, 0}, {0, 1, 0}}};
    const std::vector<double> x{0.9, 0.1, 0};
    EXPECT_EQ(knn_classify(x, m), 0u);  // first median, index 0
    EXPECT_EQ(knn_classify(x, m, KnnRule::Literal), 1u);
    const auto ax = axes();
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(knn_classify(ax.medians[j], ax), j);
        std::vector<double> twice = ax.medians[j];
        for (auto& v : twice) v *= 2;
        EXPECT_EQ(knn_classify(twice, ax), j);
    }
    const std::vector<double> tie{1, 1, 0};
    EXPECT_EQ(knn_classify(tie, ax), 0u);
    EXPECT_THROW(knn_classify(std::vector<double>{0, 0, 0}, ax), ArgumentError);
    EXPECT_THROW(knn_classify(std::vector<double>{1, 0}, ax), ArgumentError);
}

TEST(Knn, ScaleInvariance) {
    SplitMix64 rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        MedianModel m;
        for (int j = 0; j < 6; ++j) m.medians.push_back({rng.uniform(0.1, 1), rng.uniform(0.1, 1), rng.uniform(0.1, 1)});
        const std::vector<double> x{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.1, 1)};
        const auto base = knn_classify(x, m);
        std::vector<double> sx = x;
        for (auto& v : sx) v *= 4.0;  // power-of-two scale keeps every product exact
        ASSERT_EQ(knn_classify(sx, m), base);
        auto sm = m;
        for (auto& v : sm.medians[rng.index(6)]) v *= 0.5;
        ASSERT_EQ(knn_classify(x, sm), base);
    }
}

TEST(Knn, SegmentUniformVolumeAndZeroPixels) {
    const auto ax = axes();
    MultiChannelVolume v(3, 2, 3);
    for (std::size_t p = 0; p < 6; ++p) v.channel(1)[p] = 5.0f;
    v.channel(1)[4] = 0.0f;  // all-zero pixel
    const auto r = knn_segment(v, ax);
    EXPECT_EQ(r.zero_vector_pixels, 1u);
    for (std::size_t p = 0; p < 6; ++p) EXPECT_EQ(r.labels.labels()[p], p == 4 ? 0 : 1);
    EXPECT_THROW(knn_segment(MultiChannelVolume(2, 2, 2), ax), ArgumentError);
}

TEST(Knn, ThreadCountDoesNotChangeResults) {
    SplitMix64 rng(3);
    MultiChannelVolume v(3, 37, 23);
    for (auto& x : v.data()) x = static_cast<float>(rng.uniform(0, 255));
    v.data()[5] = v.data()[5 + v.pixels()] = v.data()[5 + 2 * v.pixels()] = 0.0f;
    MedianModel m;
    for (int j = 0; j < 6; ++j) m.medians.push_back({rng.uniform(1, 255), rng.uniform(1, 255), rng.uniform(1, 255)});
    const auto one = knn_segment(v, m, KnnRule::MostSimilar, 1);
    for (unsigned t : {2u, 3u, 8u}) {
        const auto many = knn_segment(v, m, KnnRule::MostSimilar, t);
        EXPECT_EQ(many.labels, one.labels);
        EXPECT_EQ(many.zero_vector_pixels, 1u);
    }
}

TEST(Fcm, SingleClusterIsTheMean) {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const auto x = random_points(1 + rng.index(40), 3, rng);
        const auto s = fuzzy_cmeans(x, {1, 2.0, 1e-12, 50, rng.next()});
        std::vector<double> mean(3, 0.0);
        for (const auto& p : x)
            for (std::size_t d = 0; d < 3; ++d) mean[d] += p[d] / static_cast<double>(x.size());
        for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(s.centers[0][d], mean[d], 1e-9);
        for (const auto& w : s.memberships) EXPECT_EQ(w[0], 1.0);
    }
}

TEST(Fcm, SymmetricPairConvergesToSymmetricCenters) {
    const auto s = fuzzy_cmeans({{-1.0}, {1.0}}, {2, 2.0, 1e-12, 500, 0});
    EXPECT_TRUE(s.converged);
    EXPECT_NEAR(s.centers[0][0], -s.centers[1][0], 1e-9);
    EXPECT_GT(std::abs(s.centers[0][0]), 0.5);
}

TEST(Fcm, ObjectiveNonIncreasingAndMembershipsNormalized) {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_points(20 + rng.index(80), 1 + rng.index(4), rng);
        FcmOptions opt;
        opt.clusters = 2 + rng.index(5);
        opt.fuzzifier = rng.uniform(1.3, 3.0);
        opt.seed = rng.next();
        const auto s = fuzzy_cmeans(x, opt);
        for (std::size_t i = 1; i < s.objective.size(); ++i)
            ASSERT_LE(s.objective[i], s.objective[i - 1] + 1e-9) << "trial " << trial << " step " << i;
        for (const auto& w : s.memberships) {
            double sum = 0.0;
            for (double v : w) {
                ASSERT_GE(v, 0.0);
                ASSERT_LE(v, 1.0);
                sum += v;
            }
            ASSERT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(Fcm, CoincidentPointTakesFullMembership) {
    const std::vector<std::vector<double>> x{{0.0}, {10.0}};
    const auto s = fuzzy_cmeans(x, {2, 2.0, 1e-12, 0, 0});
    // With no iterations the centers are the seeds, which are data points.
    for (std::size_t i = 0; i < 2; ++i) {
        const auto a = s.assignments()[i];
        EXPECT_EQ(s.memberships[i][a], 1.0);
        EXPECT_EQ(s.memberships[i][1 - a], 0.0);
    }
    EXPECT_FALSE(s.converged);
}

TEST(Fcm, DeterministicAndValidated) {
    SplitMix64 rng(6);
    const auto x = random_points(50, 2, rng);
    const auto a = fuzzy_cmeans(x, {3, 2.0, 1e-8, 100, 9});
    const auto b = fuzzy_cmeans(x, {3, 2.0, 1e-8, 100, 9});
    EXPECT_EQ(a.centers, b.centers);
    EXPECT_EQ(a.objective, b.objective);
    EXPECT_THROW(fuzzy_cmeans({}, {}), ArgumentError);
    EXPECT_THROW(fuzzy_cmeans(x, {3, 1.0, 1e-8, 100, 0}), ArgumentError);
    EXPECT_THROW(fuzzy_cmeans(x, {0, 2.0, 1e-8, 100, 0}), ArgumentError);
}
