#pragma once

// Synthetic client populations with a known clustering structure.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cfl/models.hpp"
#include "cfl/numerics.hpp"

namespace cfl {

enum class Scenario { label_permutation, congruent_split, xor_clusters, conditional_flip };

inline const char* to_string(Scenario s) {
    switch (s) {
        case Scenario::label_permutation: return "label_permutation";
        case Scenario::congruent_split: return "congruent_split";
        case Scenario::xor_clusters: return "xor_clusters";
        case Scenario::conditional_flip: return "conditional_flip";
    }
    return "?";
}

struct PopulationSpec {
    Scenario scenario = Scenario::label_permutation;
    int m = 20;             // clients
    int k = 4;              // data generating distributions
    int n_per_client = 50;  // training examples per client
    int n_test = 0;         // test examples per client; 0 means n_per_client
    int p = 2;              // feature dimension
    int classes = 4;
    std::uint64_t seed = 0;
    double sigma = 1.0;          // blob standard deviation
    double separation = 6.0;     // minimum center distance in units of sigma

    int test_size() const { return n_test > 0 ? n_test : n_per_client; }

    void validate() const {
        if (m < 1 || k < 1 || m < k) throw InvalidArgument("population needs m >= k >= 1");
        if (n_per_client < 1 || n_test < 0) throw InvalidArgument("population needs n_per_client >= 1");
        if (p < 1 || classes < 2) throw InvalidArgument("population needs p >= 1 and C >= 2");
        if (!(sigma > 0.0) || !(separation > 0.0)) throw InvalidArgument("sigma and separation must be positive");
        switch (scenario) {
            case Scenario::label_permutation:
                if (k < 2) throw InvalidArgument("label_permutation requires k >= 2");
                break;
            case Scenario::congruent_split:
                if (k != 1) throw InvalidArgument("congruent_split is a single distribution (k = 1)");
                break;
            case Scenario::xor_clusters:
                if (k != 2 || classes != 2 || p < 2) throw InvalidArgument("xor_clusters requires k = 2, C = 2, p >= 2");
                break;
            case Scenario::conditional_flip:
                if (k < 2 || k > classes) throw InvalidArgument("conditional_flip requires 2 <= k <= C");
                break;
        }
    }
};

struct ClientRecord {
    int id = 0;
    Batch train;
    Batch test;
    int truth = 0;  // harness-only ground truth; learners never read it
    // Per-client objective, used by quadratic toy populations whose risk is not data-driven.
    std::optional<ModelSpec> objective;

    std::size_t data_size() const noexcept { return train.rows; }
};

/// The model a client trains locally: its own objective if it has one, else the shared spec.
inline const ModelSpec& local_spec(const ModelSpec& shared, const ClientRecord& client) {
    return client.objective ? *client.objective : shared;
}

/// Everything about a scenario that is shared by its clients, drawn once from the seed.
struct ScenarioGeometry {
    std::vector<std::vector<double>> centers;     // blob centers
    std::vector<std::vector<int>> permutations;   // label_permutation: per-cluster label map
    std::vector<bool> flip_blob;                  // conditional_flip: blobs inside the flipped region
};

namespace detail {

inline int permutation_agreements(const std::vector<int>& a, const std::vector<int>& b) {
    int same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
    return same;
}

inline std::vector<std::vector<double>> sample_centers(const PopulationSpec& spec, RandomStream& rng) {
    // Random centers in a cube just large enough to host C well-separated blobs.
    const double min_dist = spec.separation * spec.sigma;
    double half = min_dist * std::max(1.0, std::pow(static_cast<double>(spec.classes), 1.0 / spec.p));
    std::vector<std::vector<double>> centers;
    int attempts = 0;
    while (static_cast<int>(centers.size()) < spec.classes) {
        if (++attempts > 20000) {  // grow the box rather than loop forever
            half *= 1.5;
            attempts = 0;
            centers.clear();
        }
        std::vector<double> c(static_cast<std::size_t>(spec.p));
        for (double& x : c) x = rng.uniform(-half, half);
        bool ok = true;
        for (const auto& o : centers) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < c.size(); ++i) d2 += (c[i] - o[i]) * (c[i] - o[i]);
            if (d2 < min_dist * min_dist) {
                ok = false;
                break;
            }
        }
        if (ok) centers.push_back(std::move(c));
    }
    return centers;
}

// Per-cluster label permutations. With k <= C every pair of permutations
// disagrees on every label, so no single model can serve two clusters on any
// blob; otherwise each pair must still differ on at least two labels.
inline std::vector<std::vector<int>> sample_permutations(const PopulationSpec& spec, RandomStream& rng) {
    const bool latin = spec.k <= spec.classes;
    std::vector<std::vector<int>> perms;
    for (int c = 0; c < spec.k; ++c) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000000) throw InvalidArgument("could not sample distinct label permutations");
            std::vector<int> cand = rng.permutation(static_cast<std::size_t>(spec.classes));
            bool ok = true;
            for (const auto& prev : perms) {
                const int same = permutation_agreements(cand, prev);
                if (latin ? same > 0 : same > spec.classes - 2) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                perms.push_back(std::move(cand));
                break;
            }
        }
    }
    return perms;
}

// Labels a client draws from: all classes, or a contiguous block for congruent_split.
inline std::vector<int> client_label_pool(const PopulationSpec& spec, int client) {
    std::vector<int> pool;
    if (spec.scenario != Scenario::congruent_split) {
        for (int y = 0; y < spec.classes; ++y) pool.push_back(y);
        return pool;
    }
    if (spec.m <= spec.classes) {
        for (int y = 0; y < spec.classes; ++y) {
            if (y * spec.m / spec.classes == client) pool.push_back(y);
        }
    } else {
        pool.push_back(client * spec.classes / spec.m);
    }
    return pool;
}

}  // namespace detail

inline ScenarioGeometry make_geometry(const PopulationSpec& spec) {
    spec.validate();
    const RandomStream root(spec.seed, "population");
    ScenarioGeometry g;
    if (spec.scenario == Scenario::xor_clusters) {
        // Four blobs at (+-a, +-a), adjacent centers `separation` sigmas apart.
        const double a = 0.5 * spec.separation * spec.sigma;
        for (int q = 0; q < 4; ++q) {
            std::vector<double> c(static_cast<std::size_t>(spec.p), 0.0);
            c[0] = (q & 1) ? a : -a;
            c[1] = (q & 2) ? a : -a;
            g.centers.push_back(std::move(c));
        }
        return g;
    }
    RandomStream crng = root.derive("centers");
    g.centers = detail::sample_centers(spec, crng);
    if (spec.scenario == Scenario::label_permutation) {
        RandomStream prng = root.derive("permutations");
        g.permutations = detail::sample_permutations(spec, prng);
    }
    if (spec.scenario == Scenario::conditional_flip) {
        // Flipped region: the half of the blobs with the largest first coordinate.
        std::vector<int> order(static_cast<std::size_t>(spec.classes));
        for (int i = 0; i < spec.classes; ++i) order[static_cast<std::size_t>(i)] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return g.centers[static_cast<std::size_t>(a)][0] < g.centers[static_cast<std::size_t>(b)][0]; });
        g.flip_blob.assign(static_cast<std::size_t>(spec.classes), false);
        for (int r = spec.classes - spec.classes / 2; r < spec.classes; ++r) g.flip_blob[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = true;
    }
    return g;
}

/// Draws `n` examples from distribution `truth`, with base classes cycling
/// through `label_pool` (shuffled). Class counts are balanced up to one.
inline Batch sample_distribution(const PopulationSpec& spec, const ScenarioGeometry& geo, int truth, int n,
                                 const std::vector<int>& label_pool, RandomStream& rng) {
    if (n < 1) throw InvalidArgument("sample_distribution: n must be positive");
    if (truth < 0 || truth >= spec.k) throw InvalidArgument("sample_distribution: truth index out of range");
    Batch b;
    b.rows = static_cast<std::size_t>(n);
    b.cols = static_cast<std::size_t>(spec.p);
    b.features.reserve(b.rows * b.cols);
    b.labels.reserve(b.rows);

    const int blobs = spec.scenario == Scenario::xor_clusters ? 4 : spec.classes;
    std::vector<int> base(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        base[static_cast<std::size_t>(i)] = spec.scenario == Scenario::xor_clusters
                                                ? i % blobs
                                                : label_pool[static_cast<std::size_t>(i) % label_pool.size()];
    }
    rng.shuffle(base);

    for (int i = 0; i < n; ++i) {
        const int blob = base[static_cast<std::size_t>(i)];
        const auto& c = geo.centers[static_cast<std::size_t>(blob)];
        for (int j = 0; j < spec.p; ++j) b.features.push_back(c[static_cast<std::size_t>(j)] + spec.sigma * rng.normal());
        int y = blob;
        switch (spec.scenario) {
            case Scenario::label_permutation: y = geo.permutations[static_cast<std::size_t>(truth)][static_cast<std::size_t>(blob)]; break;
            case Scenario::congruent_split: break;
            case Scenario::xor_clusters: {
                const int x_or = (blob & 1) ^ ((blob >> 1) & 1);
                y = truth == 0 ? x_or : 1 - x_or;
                break;
            }
            case Scenario::conditional_flip:
                if (geo.flip_blob[static_cast<std::size_t>(blob)]) y = (blob + truth) % spec.classes;
                break;
        }
        b.labels.push_back(y);
    }
    return b;
}

/// Builds the client population. Client i belongs to distribution i mod k.
inline std::vector<ClientRecord> make_population(const PopulationSpec& spec) {
    const ScenarioGeometry geo = make_geometry(spec);
    const RandomStream root(spec.seed, "population");
    std::vector<ClientRecord> clients;
    clients.reserve(static_cast<std::size_t>(spec.m));
    for (int i = 0; i < spec.m; ++i) {
        ClientRecord c;
        c.id = i;
        c.truth = i % spec.k;
        const std::vector<int> pool = detail::client_label_pool(spec, i);
        RandomStream train_rng = root.derive("train", i);
        RandomStream test_rng = root.derive("test", i);
        c.train = sample_distribution(spec, geo, c.truth, spec.n_per_client, pool, train_rng);
        c.test = sample_distribution(spec, geo, c.truth, spec.test_size(), pool, test_rng);
        clients.push_back(std::move(c));
    }
    return clients;
}

/// A fresh client drawn from distribution `truth`, independent of the population's
/// own clients (used for held-out routing checks). `index` selects the draw.
inline ClientRecord make_heldout_client(const PopulationSpec& spec, int truth, int id, int index) {
    const ScenarioGeometry geo = make_geometry(spec);
    const RandomStream root(spec.seed, "heldout");
    ClientRecord c;
    c.id = id;
    c.truth = truth;
    std::vector<int> pool;
    for (int y = 0; y < spec.classes; ++y) pool.push_back(y);
    RandomStream train_rng = root.derive("train", truth, index);
    RandomStream test_rng = root.derive("test", truth, index);
    c.train = sample_distribution(spec, geo, truth, spec.n_per_client, pool, train_rng);
    c.test = sample_distribution(spec, geo, truth, spec.test_size(), pool, test_rng);
    return c;
}

/// Clients with quadratic risks 0.5 |theta - mu_i|^2 (one dummy example each).
inline std::vector<ClientRecord> make_quadratic_clients(const std::vector<ParamVec>& centers, const std::vector<int>& truths) {
    if (centers.size() != truths.size() || centers.empty()) throw InvalidArgument("quadratic clients: size mismatch");
    std::vector<ClientRecord> out;
    for (std::size_t i = 0; i < centers.size(); ++i) {
        ClientRecord c;
        c.id = static_cast<int>(i);
        c.truth = truths[i];
        c.objective = ModelSpec::quadratic(centers[i]);
        c.train.rows = 1;
        c.train.cols = centers[i].dim();
        c.train.features = centers[i].values();
        c.train.labels = {0};
        c.test = c.train;
        out.push_back(std::move(c));
    }
    return out;
}

/// Harness estimate of the true-risk gradient of distribution `truth` at theta,
/// from a fresh sample of `n_oracle` examples.
inline ParamVec true_risk_gradient_oracle(const PopulationSpec& spec, int truth, const ModelSpec& model, const ParamVec& theta,
                                          int n_oracle, std::uint64_t seed) {
    if (n_oracle < 10 * spec.n_per_client) throw InvalidArgument("oracle sample must be at least 10x the client sample");
    const ScenarioGeometry geo = make_geometry(spec);
    std::vector<int> pool;
    for (int y = 0; y < spec.classes; ++y) pool.push_back(y);
    RandomStream rng(seed, "oracle", truth);
    const Batch big = sample_distribution(spec, geo, truth, n_oracle, pool, rng);
    return grad(model, theta, big);
}

/// Quadratic clients have no sampling noise: the true gradient is theta - mu.
inline ParamVec true_risk_gradient_oracle(const ClientRecord& client, const ModelSpec& model, const ParamVec& theta) {
    if (!client.objective || client.objective->kind != ModelKind::quadratic)
        throw InvalidArgument("closed-form oracle requires a quadratic client");
    (void)model;
    return grad(*client.objective, theta, client.train);
}

}  // namespace cfl
