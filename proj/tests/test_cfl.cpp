#include <gtest/gtest.h>

#include "cfl/cfl.hpp"
#include "fixtures.hpp"

using namespace cfl;

namespace {

FLConfig quad_fl() {
    FLConfig cfg;
    cfg.eps1 = 1e-3;
    cfg.max_rounds = 2000;
    cfg.lr = 0.5;
    cfg.batch_size = 1;
    return cfg;
}

SplitConfig quad_split() {
    SplitConfig s;
    s.eps1 = 1e-3;
    s.eps2 = 0.1;
    return s;
}

const ModelSpec kDummy = ModelSpec::softmax(1, 2);

}  // namespace

TEST(Masking, RoundTripIsExact) {
    RandomStream rng(1);
    for (int t = 0; t < 100; ++t) {
        const std::size_t d = 1 + rng.below(64);
        const PermutationKey key(rng.next_u64(), d);
        const ParamVec v(rng.normal_vector(d));
        EXPECT_EQ(unmask(key, mask(key, v)), v);
        EXPECT_EQ(mask(key, unmask(key, v)), v);
    }
}

TEST(Masking, IdentityKeyLeavesVectorsUnchanged) {
    const ParamVec v{1, -2, 3.5};
    EXPECT_EQ(mask(PermutationKey::identity(3), v), v);
}

TEST(Masking, PreservesCosinesAndMeans) {
    RandomStream rng(2);
    const PermutationKey key(99, 20);
    std::vector<ParamVec> raw, masked;
    for (int i = 0; i < 8; ++i) {
        raw.emplace_back(rng.normal_vector(20));
        masked.push_back(mask(key, raw.back()));
    }
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) EXPECT_NEAR(cosine(masked[i], masked[j]), cosine(raw[i], raw[j]), 1e-10);
    const std::vector<double> w(8, 1.0);
    EXPECT_LT(norm(unmask(key, weighted_mean(masked, w)) - weighted_mean(raw, w)), 1e-12);
    const SimilarityMatrix a = similarity_matrix(raw), b = similarity_matrix(masked);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(a.entries()[i], b.entries()[i], 1e-10);
}

TEST(Masking, DimensionMismatch) {
    const PermutationKey key(1, 4);
    EXPECT_THROW(mask(key, ParamVec{1, 2}), InvalidArgument);
    EXPECT_THROW(unmask(key, ParamVec{1, 2, 3, 4, 5}), InvalidArgument);
}

TEST(ParameterTree, ValidateRejectsBrokenStructure) {
    ParameterTree t;
    EXPECT_THROW(t.validate(), InvalidArgument);
    t.add_node({0, 1, 2}, -1);
    const int a = t.add_node({0}, 0), b = t.add_node({1, 2}, 0);
    EdgeCache ca{{0}, {ParamVec{1}}}, cb{{1, 2}, {ParamVec{1}, ParamVec{2}}};
    t.attach_children(0, a, b, ca, cb);
    EXPECT_NO_THROW(t.validate());
    EXPECT_EQ(t.leaves(), (std::vector<int>{1, 2}));
    EXPECT_EQ(t.assignment(), (std::map<int, int>{{0, 1}, {1, 2}, {2, 2}}));

    ParameterTree bad = t;
    bad.node(0).edge_cache[1].updates.pop_back();
    EXPECT_THROW(bad.validate(), InvalidArgument);
    bad = t;
    bad.node(2).clients = {1, 3};
    EXPECT_THROW(bad.validate(), InvalidArgument);
    bad = t;
    bad.node(0).children = {1};
    EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(RecursiveCFL, OpposedQuadraticsSplitIntoSingletons) {
    const auto clients = make_quadratic_clients({ParamVec{1, 0}, ParamVec{-1, 0}}, {0, 1});
    const CFLResult r = run_cfl_recursive(kDummy, ParamVec{0.2, 0.4}, clients, quad_fl(), quad_split(), 10, RandomStream(0));
    r.tree.validate();
    ASSERT_EQ(r.tree.nodes().size(), 3u);
    EXPECT_EQ(r.tree.leaves().size(), 2u);
    EXPECT_EQ(r.tree.node(0).clients, (std::vector<int>{0, 1}));
    EXPECT_NEAR(*r.tree.node(0).cross_max, -1.0, 1e-4);
    EXPECT_EQ(r.events[0].decision, SplitDecision::split);
    EXPECT_LT(norm(r.theta.at(0) - ParamVec{1, 0}), 1e-2);
    EXPECT_LT(norm(r.theta.at(1) - ParamVec{-1, 0}), 1e-2);
    EXPECT_NE(r.assignment.at(0), r.assignment.at(1));
}

TEST(RecursiveCFL, IdenticalQuadraticsStayTogether) {
    const auto clients = make_quadratic_clients({ParamVec{1, 1}, ParamVec{1, 1}, ParamVec{1, 1}}, {0, 0, 0});
    const CFLResult r = run_cfl_recursive(kDummy, ParamVec{0, 0}, clients, quad_fl(), quad_split(), 10, RandomStream(0));
    EXPECT_EQ(r.tree.nodes().size(), 1u);
    EXPECT_EQ(r.events[0].decision, SplitDecision::converged_terminal);
}

TEST(RecursiveCFL, MaxDepthZeroIsPlainFL) {
    const auto clients = make_quadratic_clients({ParamVec{1, 0}, ParamVec{-1, 0}}, {0, 1});
    const CFLResult r = run_cfl_recursive(kDummy, ParamVec{0.2, 0.4}, clients, quad_fl(), quad_split(), 0, RandomStream(0));
    EXPECT_EQ(r.tree.nodes().size(), 1u);
    const FLResult fl = run_fl(kDummy, ParamVec{0.2, 0.4}, view_of(clients), quad_fl(), RandomStream(0).derive("node", 0));
    EXPECT_EQ(r.theta.at(0), fl.theta);
}

TEST(RecursiveCFL, CongruentPopulationIsASingleLeafEqualToFL) {
    fixture::Setup s;
    PopulationSpec spec;
    spec.scenario = Scenario::congruent_split;
    spec.k = 1;
    spec.m = 4;
    spec.n_per_client = 100;
    s.clients = make_population(spec);
    s.model = ModelSpec::mlp(2, 8, 4);
    RandomStream init(0, "init");
    s.theta0 = init_params(s.model, init);
    const auto cfg = fixture::label_perm_k4();
    const CFLResult r = run_cfl_recursive(s.model, s.theta0, s.clients, cfg.fl, cfg.split, 10, RandomStream(0, "run"));
    ASSERT_EQ(r.tree.nodes().size(), 1u);
    EXPECT_EQ(r.events[0].decision, SplitDecision::converged_terminal);
    const FLResult fl = run_fl(s.model, s.theta0, view_of(s.clients), cfg.fl, RandomStream(0, "run").derive("node", 0));
    for (const auto& c : s.clients) EXPECT_EQ(r.theta.at(c.id), fl.theta);
}

TEST(RecursiveCFL, RecoversFourPermutationClusters) {
    const auto cfg = fixture::label_perm_k4();
    const fixture::Setup s = fixture::materialize(cfg);
    const CFLResult r = run_cfl_recursive(s.model, s.theta0, s.clients, cfg.fl, cfg.split, cfg.max_depth, RandomStream(cfg.seed, "run"));
    r.tree.validate();
    EXPECT_EQ(r.tree.leaves().size(), 4u);
    EXPECT_EQ(adjusted_rand_index(fixture::labels_of(r.assignment), fixture::truths_of(s.clients)), 1.0);
    // k - 1 splits at most along any path.
    EXPECT_LE(r.tree.max_depth(), 3);
    for (const auto& ev : r.events)
        if (ev.decision == SplitDecision::split) {
            std::map<int, int> truth_of;
            for (const auto& c : s.clients) truth_of[c.id] = c.truth;
            EXPECT_TRUE(is_correct_bipartition(*ev.bipartition, truth_of));
        }
    double acc = 0;
    for (const auto& c : s.clients) acc += accuracy(s.model, r.theta.at(c.id), c.test);
    EXPECT_GE(acc / s.clients.size(), 0.9);
}

TEST(OnlineCFL, PrivacyDoesNotChangeTheRun) {
    const auto cfg = fixture::label_perm_k4();
    const fixture::Setup s = fixture::materialize(cfg);
    const RandomStream rng(cfg.seed, "run");
    std::vector<SimilarityMatrix> plain_alphas, masked_alphas;
    auto collect = [](std::vector<SimilarityMatrix>& out) {
        return [&out](const OnlineRoundView& v, std::vector<OnlineClusterRecord>&) {
            std::vector<ParamVec> ups(v.uploads.begin(), v.uploads.end());
            out.push_back(similarity_matrix(ups));
        };
    };
    const OnlineResult plain = run_cfl_online(s.model, s.theta0, s.clients, cfg.fl, cfg.split, std::nullopt, 300, rng, 10, collect(plain_alphas));
    const PermutationKey key(1234, s.theta0.dim());
    const OnlineResult masked = run_cfl_online(s.model, s.theta0, s.clients, cfg.fl, cfg.split, key, 300, rng, 10, collect(masked_alphas));
    ASSERT_EQ(plain_alphas.size(), masked_alphas.size());
    for (std::size_t t = 0; t < plain_alphas.size(); ++t)
        for (std::size_t i = 0; i < plain_alphas[t].entries().size(); ++i)
            ASSERT_NEAR(plain_alphas[t].entries()[i], masked_alphas[t].entries()[i], 1e-10);
    EXPECT_EQ(plain.assignment, masked.assignment);
    for (const auto& [id, th] : plain.theta) EXPECT_LT(norm(th - masked.theta.at(id)), 1e-9);
    for (std::size_t t = 0; t < plain.history.size(); ++t) EXPECT_EQ(plain.history[t].clusters_after, masked.history[t].clusters_after);
}

TEST(OnlineCFL, ClusterCountGrowsOneSplitAtATimeToFour) {
    const auto cfg = fixture::label_perm_k4();
    const fixture::Setup s = fixture::materialize(cfg);
    const OnlineResult r = run_cfl_online(s.model, s.theta0, s.clients, cfg.fl, cfg.split, std::nullopt, 6000, RandomStream(cfg.seed, "run"));
    r.tree.validate();
    std::vector<int> trajectory{1};
    for (const auto& round : r.history)
        if (round.clusters_after != trajectory.back()) trajectory.push_back(round.clusters_after);
    EXPECT_EQ(trajectory, (std::vector<int>{1, 2, 3, 4}));
    EXPECT_EQ(adjusted_rand_index(fixture::labels_of(r.assignment), fixture::truths_of(s.clients)), 1.0);
}

TEST(OnlineCFL, HighEps2NeverSplitsAndMatchesFL) {
    const auto clients = make_quadratic_clients({ParamVec{1, 0}, ParamVec{-1, 0}}, {0, 1});
    SplitConfig split = quad_split();
    split.eps2 = 100;
    FLConfig fl = quad_fl();
    fl.eps1 = 1e-12;
    fl.max_rounds = 50;
    const RandomStream rng(0);
    const OnlineResult r = run_cfl_online(kDummy, ParamVec{0.2, 0.4}, clients, fl, split, std::nullopt, 50, rng);
    EXPECT_EQ(r.tree.nodes().size(), 1u);
    const FLResult base = run_fl(kDummy, ParamVec{0.2, 0.4}, view_of(clients), fl, rng);
    EXPECT_LT(norm(r.theta.at(0) - base.theta), 1e-12);
}

TEST(OnlineCFL, QuadraticsSplitAndReachTheirCenters) {
    const auto clients = make_quadratic_clients({ParamVec{1, 0}, ParamVec{-1, 0}}, {0, 1});
    const OnlineResult r = run_cfl_online(kDummy, ParamVec{0.2, 0.4}, clients, quad_fl(), quad_split(), std::nullopt, 200, RandomStream(0));
    EXPECT_EQ(r.tree.leaves().size(), 2u);
    EXPECT_LT(norm(r.theta.at(0) - ParamVec{1, 0}), 1e-3);
    EXPECT_LT(norm(r.theta.at(1) - ParamVec{-1, 0}), 1e-3);
}

TEST(Assign, SingleLeafTreeNeedsNoTraining) {
    ParameterTree t;
    t.add_node({0}, -1);
    t.node(0).theta_star = ParamVec{0.5, 0.5};
    const auto clients = make_quadratic_clients({ParamVec{0.5, 0.5}}, {0});
    // A zero update would be a routing error at an internal node; at a leaf nothing is computed.
    const Assignment a = assign_client(t, clients[0], kDummy, quad_fl(), RandomStream(0));
    EXPECT_EQ(a.leaf, 0);
    EXPECT_EQ(a.path, (std::vector<int>{0}));
    EXPECT_EQ(a.theta, (ParamVec{0.5, 0.5}));
}

TEST(Assign, QuadraticClientsFollowTheirSide) {
    const auto clients = make_quadratic_clients({ParamVec{1, 0}, ParamVec{-1, 0}}, {0, 1});
    const CFLResult r = run_cfl_recursive(kDummy, ParamVec{0.2, 0.4}, clients, quad_fl(), quad_split(), 10, RandomStream(0));
    const auto fresh = make_quadratic_clients({ParamVec{2, 0.3}, ParamVec{-0.5, -0.2}}, {0, 1});
    EXPECT_EQ(assign_client(r.tree, fresh[0], kDummy, quad_fl(), RandomStream(1)).leaf, r.assignment.at(0));
    EXPECT_EQ(assign_client(r.tree, fresh[1], kDummy, quad_fl(), RandomStream(1)).leaf, r.assignment.at(1));
}

TEST(Assign, ZeroUpdateIsARoutingError) {
    const auto clients = make_quadratic_clients({ParamVec{1, 0}, ParamVec{-1, 0}}, {0, 1});
    const CFLResult r = run_cfl_recursive(kDummy, ParamVec{0.2, 0.4}, clients, quad_fl(), quad_split(), 10, RandomStream(0));
    const auto stuck = make_quadratic_clients({r.tree.node(0).theta_star}, {0});
    EXPECT_THROW(assign_client(r.tree, stuck[0], kDummy, quad_fl(), RandomStream(0)), DegenerateVector);
}

TEST(Assign, HeldOutAndExistingClientsReachTheirClusterLeaf) {
    const auto cfg = fixture::label_perm_k4();
    const fixture::Setup s = fixture::materialize(cfg);
    const CFLResult r = run_cfl_recursive(s.model, s.theta0, s.clients, cfg.fl, cfg.split, cfg.max_depth, RandomStream(cfg.seed, "run"));
    ASSERT_EQ(r.tree.leaves().size(), 4u);
    std::map<int, int> leaf_of_truth;
    for (const auto& c : s.clients) leaf_of_truth[c.truth] = r.assignment.at(c.id);
    const RandomStream route(7, "route");
    for (const auto& c : s.clients) EXPECT_EQ(assign_client(r.tree, c, s.model, cfg.fl, route).leaf, r.assignment.at(c.id));
    for (int truth = 0; truth < 4; ++truth)
        for (int i = 0; i < 5; ++i) {
            const ClientRecord fresh = make_heldout_client(cfg.population, truth, 100 + truth * 5 + i, i);
            EXPECT_EQ(assign_client(r.tree, fresh, s.model, cfg.fl, route).leaf, leaf_of_truth[truth]) << truth << "/" << i;
        }
}
