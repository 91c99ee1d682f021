#include <gtest/gtest.h>

#include <cmath>

#include "cfl/clustering.hpp"

using namespace cfl;

namespace {

SimilarityMatrix random_matrix(RandomStream& rng, std::size_t m) {
    std::vector<double> a(m * m, 1.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) a[i * m + j] = a[j * m + i] = rng.uniform(-1.0, 1.0);
    std::vector<int> ids(m);
    for (std::size_t i = 0; i < m; ++i) ids[i] = static_cast<int>(i);
    return SimilarityMatrix(ids, a);
}

SimilarityMatrix block_matrix() {
    std::vector<double> a(16);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) a[i * 4 + j] = i == j ? 1.0 : ((i < 2) == (j < 2) ? 0.9 : -0.8);
    return SimilarityMatrix({0, 1, 2, 3}, a);
}

SimilarityMatrix three_client() { return SimilarityMatrix({0, 1, 2}, {1, .9, -.5, .9, 1, -.4, -.5, -.4, 1}); }

// Check every invariant of a bipartition against its matrix.
void expect_valid(const Bipartition& bp, const SimilarityMatrix& a) {
    ASSERT_FALSE(bp.c1.empty());
    ASSERT_FALSE(bp.c2.empty());
    std::vector<int> all = bp.c1;
    all.insert(all.end(), bp.c2.begin(), bp.c2.end());
    std::sort(all.begin(), all.end());
    std::vector<int> ids = a.ids();
    std::sort(ids.begin(), ids.end());
    EXPECT_EQ(all, ids);
    double mx = -2;
    auto row = [&](int id) { return static_cast<std::size_t>(std::find(a.ids().begin(), a.ids().end(), id) - a.ids().begin()); };
    for (int i : bp.c1)
        for (int j : bp.c2) mx = std::max(mx, a(row(i), row(j)));
    EXPECT_EQ(bp.cross_max, mx);
}

}  // namespace

TEST(SimilarityMatrix, CollinearAndOrthogonal) {
    const ParamVec v{1, 2, -3};
    const std::vector<ParamVec> ups{v, v, -v};
    const SimilarityMatrix a = similarity_matrix(ups);
    const double expect[3][3] = {{1, 1, -1}, {1, 1, -1}, {-1, -1, 1}};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) EXPECT_NEAR(a(i, j), expect[i][j], 1e-15);
    const std::vector<ParamVec> orth{ParamVec{1, 0}, ParamVec{0, 3}};
    EXPECT_EQ(similarity_matrix(orth)(0, 1), 0.0);
}

TEST(SimilarityMatrix, MatchesDirectCosineAndIsScaleInvariant) {
    RandomStream rng(2);
    std::vector<ParamVec> ups;
    for (int i = 0; i < 9; ++i) ups.emplace_back(rng.normal_vector(7));
    const SimilarityMatrix a = similarity_matrix(ups);
    std::vector<ParamVec> scaled;
    for (const auto& u : ups) scaled.push_back(3.7 * u);
    const SimilarityMatrix b = similarity_matrix(scaled);
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 9; ++j) {
            double d = 0, ni = 0, nj = 0;
            for (std::size_t t = 0; t < 7; ++t) {
                d += ups[i][t] * ups[j][t];
                ni += ups[i][t] * ups[i][t];
                nj += ups[j][t] * ups[j][t];
            }
            EXPECT_NEAR(a(i, j), i == j ? 1.0 : d / std::sqrt(ni * nj), 1e-12);
            EXPECT_EQ(a(i, j), a(j, i));
            EXPECT_NEAR(a(i, j), b(i, j), 1e-12);
        }
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(a(i, i), 1.0);
}

TEST(SimilarityMatrix, ZeroUpdateNamesClient) {
    const std::vector<ParamVec> ups{ParamVec{1, 0}, ParamVec{0, 0}};
    try {
        similarity_matrix(ups, {10, 42});
        FAIL();
    } catch (const DegenerateVector& e) {
        EXPECT_EQ(e.client(), 42);
    }
    const std::vector<ParamVec> mixed{ParamVec{1, 0}, ParamVec{1}};
    EXPECT_THROW(similarity_matrix(mixed), InvalidArgument);
}

TEST(SimilarityMatrix, ConstructorValidates) {
    EXPECT_THROW(SimilarityMatrix({0, 1}, {1, 0.5, 0.4, 1}), InvalidArgument);
    EXPECT_THROW(SimilarityMatrix({0, 1}, {0.9, 0.5, 0.5, 1}), InvalidArgument);
    EXPECT_THROW(SimilarityMatrix({0, 1}, {1, 1.5, 1.5, 1}), InvalidArgument);
    EXPECT_THROW(SimilarityMatrix({0, 1}, {1, 0.5, 0.5}), InvalidArgument);
}

TEST(Bipartition, Examples) {
    const Bipartition two = optimal_bipartition(SimilarityMatrix({0, 1}, {1, 0.99, 0.99, 1}));
    EXPECT_EQ(two.c1, (std::vector<int>{0}));
    EXPECT_EQ(two.c2, (std::vector<int>{1}));

    const Bipartition bp = optimal_bipartition(three_client());
    EXPECT_EQ(bp.c1, (std::vector<int>{0, 1}));
    EXPECT_EQ(bp.c2, (std::vector<int>{2}));
    EXPECT_DOUBLE_EQ(bp.cross_max, -0.4);

    const Bipartition blocks = optimal_bipartition(block_matrix());
    EXPECT_EQ(blocks.c1, (std::vector<int>{0, 1}));
    EXPECT_EQ(blocks.c2, (std::vector<int>{2, 3}));
    EXPECT_DOUBLE_EQ(blocks.cross_max, -0.8);
    const Bipartition brute = brute_force_bipartition(block_matrix());
    EXPECT_EQ(brute.c1, blocks.c1);
    EXPECT_EQ(brute.c2, blocks.c2);
    EXPECT_THROW(optimal_bipartition(SimilarityMatrix({0}, {1})), InvalidArgument);
}

TEST(Bipartition, BruteForceTieBreak) {
    // All off-diagonal entries equal: every bipartition ties; the smallest c1 containing 0 is {0}.
    const SimilarityMatrix a({0, 1, 2}, {1, 0.2, 0.2, 0.2, 1, 0.2, 0.2, 0.2, 1});
    const Bipartition bp = brute_force_bipartition(a);
    EXPECT_EQ(bp.c1, (std::vector<int>{0}));
    EXPECT_EQ(bp.c2, (std::vector<int>{1, 2}));
    const Bipartition two = brute_force_bipartition(SimilarityMatrix({0, 1}, {1, -0.3, -0.3, 1}));
    EXPECT_EQ(two.c1, (std::vector<int>{0}));
}

TEST(Bipartition, AgglomerativeMatchesBruteForceOnRandomMatrices) {
    RandomStream rng(2024);
    for (int t = 0; t < 200; ++t) {
        const std::size_t m = 3 + rng.below(10);
        const SimilarityMatrix a = random_matrix(rng, m);
        const Bipartition fast = optimal_bipartition(a);
        const Bipartition slow = brute_force_bipartition(a);
        expect_valid(fast, a);
        expect_valid(slow, a);
        EXPECT_EQ(fast.cross_max, slow.cross_max) << "trial " << t << " m=" << m;
    }
}

TEST(Bipartition, DeterministicUnderIdentity) {
    RandomStream rng(1);
    const SimilarityMatrix a = random_matrix(rng, 10);
    const Bipartition x = optimal_bipartition(a), y = optimal_bipartition(a);
    EXPECT_EQ(x.c1, y.c1);
    EXPECT_EQ(x.c2, y.c2);
}

TEST(Bipartition, BruteForceRejectsLargeInputs) {
    RandomStream rng(1);
    EXPECT_THROW(brute_force_bipartition(random_matrix(rng, 21)), InvalidArgument);
}

TEST(SeparationGap, Examples) {
    std::vector<double> ideal(16);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) ideal[i * 4 + j] = (i % 2 == j % 2) ? 1.0 : -1.0;
    const std::vector<int> truth{0, 1, 0, 1};
    EXPECT_DOUBLE_EQ(separation_gap(SimilarityMatrix({0, 1, 2, 3}, ideal), truth), 2.0);
    const std::vector<int> blocks{0, 0, 1, 1};
    EXPECT_NEAR(separation_gap(block_matrix(), blocks), 1.7, 1e-15);
    const std::vector<int> distinct{0, 1, 2};
    EXPECT_THROW(separation_gap(three_client(), distinct), InvalidArgument);
}

TEST(SeparationGap, PositiveGapMeansCorrectBipartition) {
    RandomStream rng(77);
    int positive = 0;
    for (int t = 0; t < 300; ++t) {
        // Noisy directions around k random centers, so gaps of both signs occur.
        const int k = 2 + static_cast<int>(rng.below(3));
        const std::size_t m = static_cast<std::size_t>(k) * 3;
        std::vector<ParamVec> centers;
        for (int c = 0; c < k; ++c) centers.emplace_back(rng.normal_vector(5));
        std::vector<ParamVec> ups;
        std::vector<int> truth;
        std::map<int, int> truth_of;
        const double noise = rng.uniform(0.0, 1.5);
        for (std::size_t i = 0; i < m; ++i) {
            truth.push_back(static_cast<int>(i) % k);
            truth_of[static_cast<int>(i)] = truth.back();
            ParamVec n(rng.normal_vector(5));
            ups.push_back(centers[truth.back()] + noise * n);
        }
        const SimilarityMatrix a = similarity_matrix(ups);
        const double g = separation_gap(a, truth);
        const bool correct = is_correct_bipartition(optimal_bipartition(a), truth_of);
        if (g > 0) {
            ++positive;
            EXPECT_TRUE(correct);
        }
        if (!correct) {
            EXPECT_LE(g, 0.0);
        }
    }
    EXPECT_GT(positive, 20);
}

TEST(Bounds, HBoundExamples) {
    EXPECT_EQ(h_bound(0, 0), 1.0);
    EXPECT_NEAR(h_bound(0.6, 0.8), 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(h_bound(0.3, 0), std::sqrt(1 - 0.09));
    EXPECT_THROW(h_bound(1.0, 0), InvalidArgument);
    EXPECT_THROW(h_bound(0, -0.1), InvalidArgument);
}

TEST(Bounds, CrossBoundExamples) {
    EXPECT_EQ(cross_bound(2, 1.0), -1.0);
    EXPECT_DOUBLE_EQ(cross_bound(2, 0.3), -0.3);
    EXPECT_NEAR(cross_bound(3, 1.0), 0.0, 1e-15);
    EXPECT_EQ(cross_bound(5, 0.5), 1.0);
    EXPECT_THROW(cross_bound(1, 0.5), InvalidArgument);
}

TEST(SplitDecision, Examples) {
    SplitConfig cfg;
    cfg.eps1 = 1e-3;
    cfg.eps2 = 0.1;
    cfg.gamma_max = 0.5;
    EXPECT_EQ(split_decision(1e-4, 0.5, -0.2, cfg), SplitDecision::split);
    EXPECT_EQ(split_decision(1e-4, 1e-3, 0.7, cfg), SplitDecision::converged_terminal);
    EXPECT_EQ(split_decision(2e-3, 0.5, -0.2, cfg), SplitDecision::not_stationary);
    EXPECT_EQ(split_decision(1e-3, 0.5, -0.2, cfg), SplitDecision::not_stationary);
    EXPECT_EQ(split_decision(1e-4, 0.1, -0.2, cfg), SplitDecision::converged_terminal);
    cfg.gamma_max = 0.9;
    EXPECT_EQ(split_decision(1e-4, 0.5, -0.2, cfg), SplitDecision::stationary_but_reject);
    EXPECT_NEAR(gamma_acceptance_threshold(-0.2), std::sqrt(0.6), 1e-15);
}

TEST(SplitConfig, Validation) {
    SplitConfig cfg;
    cfg.gamma_max = 1.0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg.gamma_max = 0.0;
    cfg.eps2 = 0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(AdjustedRandIndex, Examples) {
    const std::vector<int> a{0, 0, 1, 1, 2, 2};
    const std::vector<int> relabeled{5, 5, 3, 3, 9, 9};
    EXPECT_DOUBLE_EQ(adjusted_rand_index(a, relabeled), 1.0);
    const std::vector<int> merged{0, 0, 0, 0, 1, 1};
    const double ari = adjusted_rand_index(a, merged);
    EXPECT_LT(ari, 1.0);
    EXPECT_GT(ari, 0.0);
    // Hand computation: index 3, sums 3 and 7, expected 21/15.
    EXPECT_NEAR(ari, (3.0 - 21.0 / 15) / (5.0 - 21.0 / 15), 1e-12);
    const std::vector<int> shorter{0, 1};
    EXPECT_THROW(adjusted_rand_index(a, shorter), InvalidArgument);
}

TEST(SimilarityCsv, RoundTrip) {
    RandomStream rng(8);
    std::vector<ParamVec> ups;
    for (int i = 0; i < 6; ++i) ups.emplace_back(rng.normal_vector(4));
    const SimilarityMatrix a = similarity_matrix(ups, {3, 8, 1, 0, 12, 7});
    const SimilarityMatrix b = similarity_from_csv(to_csv(a));
    EXPECT_EQ(a.ids(), b.ids());
    EXPECT_EQ(a.entries(), b.entries());
}

TEST(SimilarityCsv, Errors) {
    EXPECT_THROW(similarity_from_csv(""), FormatError);
    EXPECT_THROW(similarity_from_csv("0,1\n1\n0.5,1\n"), FormatError);                     // short row
    EXPECT_THROW(similarity_from_csv("0,1\n1,0.5\n0.4,1\n"), FormatError);               // asymmetric
    EXPECT_THROW(similarity_from_csv("0,1\n1,2\n2,1\n"), FormatError);                   // out of range
    EXPECT_THROW(similarity_from_csv("0,1\n1,x\nx,1\n"), FormatError);                   // not a number
    EXPECT_THROW(similarity_from_csv("0,1\n1,0.5\n"), FormatError);                      // missing row
    EXPECT_THROW(similarity_from_csv("0.5,1\n1,0.5\n0.5,1\n"), FormatError);             // fractional id
    EXPECT_NO_THROW(similarity_from_csv("0,1\r\n1,0.5\r\n0.5,1\r\n"));
}
