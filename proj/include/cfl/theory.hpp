#pragma once

// Monte-Carlo checks of the separation guarantees on synthetic gradient
// configurations with known ground truth, plus the gradient-vs-weight-update
// comparison on real FL runs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cfl/clustering.hpp"
#include "cfl/datagen.hpp"
#include "cfl/flcore.hpp"
#include "cfl/io.hpp"
#include "cfl/numerics.hpp"
#include "cfl/parallel.hpp"

namespace cfl {

/// Floating-point slack granted to proven inequalities. The quantities are
/// cosines of order 1, so this only absorbs rounding.
inline constexpr double kBoundSlack = 1e-12;

/// Noisy gradients g_i = v_{I(i)} + X_i around true gradients with
/// sum_l a_l v_l = 0 and |X_i| = gamma_i |v_{I(i)}|.
struct StationaryConfig {
    int k = 0;
    int m = 0;
    int d = 0;
    std::vector<double> weights;
    std::vector<ParamVec> true_grads;
    std::vector<double> gammas;
    std::vector<ParamVec> noisy;
    std::vector<int> truth;

    /// |sum_l a_l v_l|
    double stationarity_residual() const {
        std::vector<double> s(static_cast<std::size_t>(d), 0.0);
        for (int l = 0; l < k; ++l)
            for (int j = 0; j < d; ++j) s[static_cast<std::size_t>(j)] += weights[static_cast<std::size_t>(l)] * true_grads[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)];
        return norm(s);
    }
};

inline StationaryConfig sample_stationary_config(int k, int m, int d, double gamma, RandomStream& rng,
                                                 std::vector<double> weights = {}) {
    if (k < 2 || m < k || d < 2) throw InvalidArgument("stationary config needs m >= k >= 2 and d >= 2");
    if (!(gamma >= 0.0)) throw InvalidArgument("stationary config: gamma must be nonnegative");
    if (weights.empty()) weights.assign(static_cast<std::size_t>(k), 1.0);
    if (weights.size() != static_cast<std::size_t>(k)) throw InvalidArgument("stationary config: one weight per distribution");
    StationaryConfig cfg;
    cfg.k = k;
    cfg.m = m;
    cfg.d = d;
    cfg.weights = weights;

    std::vector<double> last(static_cast<std::size_t>(d), 0.0);
    for (int l = 0; l + 1 < k; ++l) {
        ParamVec v(rng.normal_vector(static_cast<std::size_t>(d)));
        for (int j = 0; j < d; ++j) last[static_cast<std::size_t>(j)] -= weights[static_cast<std::size_t>(l)] * v[static_cast<std::size_t>(j)];
        cfg.true_grads.push_back(std::move(v));
    }
    for (double& x : last) x /= weights.back();
    cfg.true_grads.emplace_back(std::move(last));

    for (int i = 0; i < m; ++i) {
        const int t = i % k;
        const ParamVec& v = cfg.true_grads[static_cast<std::size_t>(t)];
        std::vector<double> x = rng.normal_vector(static_cast<std::size_t>(d));
        const double scale = gamma == 0.0 ? 0.0 : gamma * norm(v) / norm(x);
        for (double& e : x) e *= scale;
        cfg.truth.push_back(t);
        cfg.gammas.push_back(gamma);
        cfg.noisy.push_back(v + ParamVec(std::move(x)));
    }
    return cfg;
}

inline StationaryConfig sample_stationary_config(int k, int m, int d, double gamma, std::uint64_t seed) {
    RandomStream rng(seed, "stationary");
    return sample_stationary_config(k, m, d, gamma, rng);
}

/// Pair bounds for one configuration: min over same-distribution pairs of H,
/// and max over different-distribution pairs of the cross bound.
struct TheoremBounds {
    double intra_lower = 1.0;
    double cross_upper = -1.0;
    bool upper_applicable = false;  // every cross pair has H >= cos(pi/(k-1))
};

inline TheoremBounds theorem_bounds(int k, std::span<const double> gammas, std::span<const int> truth) {
    TheoremBounds b;
    double intra = std::numeric_limits<double>::infinity();
    double cross = -std::numeric_limits<double>::infinity();
    const std::size_t m = gammas.size();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
            const double h = h_bound(gammas[i], gammas[j]);
            if (truth[i] == truth[j]) intra = std::min(intra, h);
            else cross = std::max(cross, cross_bound(k, h));
        }
    b.intra_lower = intra;
    b.cross_upper = cross;
    b.upper_applicable = cross < 1.0;
    return b;
}

/// Whether the bounds alone guarantee a correct split for k distributions and a
/// uniform noise ratio gamma (lower intra bound strictly above the cross bound).
inline bool separation_guaranteed(int k, double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0)) return false;
    const double h = h_bound(gamma, gamma);
    return h > cross_bound(k, h);
}

struct TheoremReport {
    int trials = 0;
    int lower_bound_violations = 0;
    int upper_bound_violations = 0;
    int upper_applicable_trials = 0;
    int correct_clusterings = 0;
    double worst_lower_margin = std::numeric_limits<double>::infinity();  // min(alpha_intra - bound)
    double worst_upper_margin = std::numeric_limits<double>::infinity();  // min(bound - alpha_cross)
    double correct_clustering_rate() const { return trials ? static_cast<double>(correct_clusterings) / trials : 0.0; }
};

namespace detail {

struct TheoremTrial {
    bool correct = false;
    bool bounded = false;
    bool applicable = false;
    double lower_margin = 0.0;
    double upper_margin = 0.0;
};

inline TheoremTrial theorem_trial(const StationaryConfig& cfg, const std::optional<TheoremBounds>& bounds) {
    TheoremTrial out;
    const SimilarityMatrix alpha = similarity_matrix(cfg.noisy);
    const Bipartition bp = optimal_bipartition(alpha);
    const std::size_t m = alpha.size();
    double intra = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j)
            if (cfg.truth[i] == cfg.truth[j]) intra = std::min(intra, alpha(i, j));
    out.correct = intra - bp.cross_max > 0.0;
    if (!bounds) return out;
    out.bounded = true;
    out.lower_margin = intra - bounds->intra_lower;
    if (bounds->upper_applicable) {
        out.applicable = true;
        out.upper_margin = bounds->cross_upper - bp.cross_max;
    }
    return out;
}

}  // namespace detail

/// Samples `trials` configurations and checks both similarity bounds. With
/// gamma >= 1 the bounds do not apply and only the clustering rate is counted.
/// Trial t draws from its own stream, so the report does not depend on `threads`.
inline TheoremReport verify_theorem(int trials, int k, int m, int d, double gamma, std::uint64_t seed, int threads = 1) {
    if (trials < 1) throw InvalidArgument("verify_theorem: trials must be >= 1");
    const RandomStream base(seed, "theorem");
    std::vector<double> gammas(static_cast<std::size_t>(m), gamma);
    std::vector<int> truth;
    for (int i = 0; i < m; ++i) truth.push_back(i % k);
    std::optional<TheoremBounds> bounds;
    if (gamma < 1.0) bounds = theorem_bounds(k, gammas, truth);

    std::vector<detail::TheoremTrial> results(static_cast<std::size_t>(trials));
    parallel_for(results.size(), threads, [&](std::size_t t) {
        RandomStream rng = base.derive("trial", k * 100000 + m, static_cast<std::int64_t>(t));
        results[t] = detail::theorem_trial(sample_stationary_config(k, m, d, gamma, rng), bounds);
    });

    TheoremReport rep;
    for (const auto& r : results) {
        ++rep.trials;
        if (r.correct) ++rep.correct_clusterings;
        if (!r.bounded) continue;
        rep.worst_lower_margin = std::min(rep.worst_lower_margin, r.lower_margin);
        if (r.lower_margin < -kBoundSlack) ++rep.lower_bound_violations;
        if (!r.applicable) continue;
        ++rep.upper_applicable_trials;
        rep.worst_upper_margin = std::min(rep.worst_upper_margin, r.upper_margin);
        if (r.upper_margin < -kBoundSlack) ++rep.upper_bound_violations;
    }
    return rep;
}

struct PhaseCell {
    int k = 0;
    double gamma = 0.0;
    int m = 0;
    int trials = 0;
    int correct = 0;
    bool guaranteed = false;
    double probability() const { return trials ? static_cast<double>(correct) / trials : 0.0; }
};

/// Empirical P[g(alpha) > 0] on a (k, gamma) grid with m = 3k clients per cell.
inline std::vector<PhaseCell> phase_diagram(const std::vector<int>& k_grid, const std::vector<double>& gamma_grid, int d,
                                            int trials_per_cell, std::uint64_t seed, int threads = 1) {
    if (k_grid.empty() || gamma_grid.empty()) throw InvalidArgument("phase_diagram: empty grid");
    std::vector<PhaseCell> cells;
    for (int k : k_grid) {
        for (std::size_t gi = 0; gi < gamma_grid.size(); ++gi) {
            const double gamma = gamma_grid[gi];
            PhaseCell cell;
            cell.k = k;
            cell.gamma = gamma;
            cell.m = 3 * k;
            cell.trials = trials_per_cell;
            cell.guaranteed = separation_guaranteed(k, gamma);
            const RandomStream base(seed, "phase", k, static_cast<std::int64_t>(gi));
            std::vector<char> ok(static_cast<std::size_t>(trials_per_cell), 0);
            parallel_for(ok.size(), threads, [&](std::size_t t) {
                RandomStream rng = base.derive("trial", 0, static_cast<std::int64_t>(t));
                const StationaryConfig cfg = sample_stationary_config(k, cell.m, d, gamma, rng);
                ok[t] = separation_gap(similarity_matrix(cfg.noisy), cfg.truth) > 0.0;
            });
            cell.correct = static_cast<int>(std::count(ok.begin(), ok.end(), 1));
            cells.push_back(cell);
        }
    }
    return cells;
}

inline std::string phase_to_csv(const std::vector<PhaseCell>& cells) {
    std::ostringstream out;
    out << "k,gamma,m,trials,correct,probability,guaranteed\n";
    for (const auto& c : cells) {
        out << c.k << ',' << format_double(c.gamma) << ',' << c.m << ',' << c.trials << ',' << c.correct << ','
            << format_double(c.probability()) << ',' << (c.guaranteed ? 1 : 0) << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Lemma checks

struct LemmaReport {
    int trials = 0;
    int violations = 0;
    double max_excess = -std::numeric_limits<double>::infinity();  // max over trials of (lhs - allowed), <= 0 when sound
};

namespace detail {

inline std::vector<double> unit_orthogonal_to(const std::vector<double>& v, RandomStream& rng) {
    std::vector<double> u = rng.normal_vector(v.size());
    const double vv = dot(v, v);
    const double uv = dot(u, v);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] -= uv / vv * v[i];
    const double n = norm(u);
    for (double& x : u) x /= n;
    return u;
}

// a*cos(phi)*vhat + a*sin(phi)*u
inline std::vector<double> rotate_in_plane(const std::vector<double>& vhat, const std::vector<double>& u, double phi, double length) {
    std::vector<double> out(vhat.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = length * (std::cos(phi) * vhat[i] + std::sin(phi) * u[i]);
    return out;
}

inline std::vector<double> scaled_direction(std::size_t d, double length, RandomStream& rng) {
    std::vector<double> x = rng.normal_vector(d);
    const double n = norm(x);
    for (double& e : x) e *= length / n;
    return x;
}

inline double cos_raw(const std::vector<double>& a, const std::vector<double>& b) { return cosine(ParamVec(a), ParamVec(b)); }

inline std::vector<double> add(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> o(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) o[i] = a[i] + b[i];
    return o;
}

inline std::vector<double> sub(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> o(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) o[i] = a[i] - b[i];
    return o;
}

inline void record(LemmaReport& rep, double excess) {
    ++rep.trials;
    rep.max_excess = std::max(rep.max_excess, excess);
    if (excess > kBoundSlack) ++rep.violations;
}

}  // namespace detail

/// Lower bound on alpha(v + X, v + Y) for |X|, |Y| < |v|. Every fourth trial
/// uses the extremal (tangent) configuration where the bound is attained.
inline LemmaReport verify_lemma1(int trials, int d, std::uint64_t seed) {
    if (trials < 1 || d < 2) throw InvalidArgument("verify_lemma1: trials >= 1 and d >= 2 required");
    const RandomStream base(seed, "lemma1");
    LemmaReport rep;
    for (int t = 0; t < trials; ++t) {
        RandomStream rng = base.derive("trial", d, t);
        const std::vector<double> v = rng.normal_vector(static_cast<std::size_t>(d));
        const double nv = norm(v);
        const double x = rng.uniform(0.0, 0.999), y = rng.uniform(0.0, 0.999);
        std::vector<double> a, b;
        if (t % 4 == 3) {
            std::vector<double> vhat = v;
            for (double& e : vhat) e /= nv;
            const std::vector<double> u = detail::unit_orthogonal_to(v, rng);
            a = detail::rotate_in_plane(vhat, u, std::asin(x), nv * std::sqrt(1.0 - x * x));
            b = detail::rotate_in_plane(vhat, u, -std::asin(y), nv * std::sqrt(1.0 - y * y));
        } else {
            a = detail::add(v, detail::scaled_direction(static_cast<std::size_t>(d), x * nv, rng));
            b = detail::add(v, detail::scaled_direction(static_cast<std::size_t>(d), y * nv, rng));
        }
        const double rx = norm(detail::sub(a, v)) / nv, ry = norm(detail::sub(b, v)) / nv;
        const double bound = -rx * ry + std::sqrt(1.0 - rx * rx) * std::sqrt(1.0 - ry * ry);
        detail::record(rep, bound - detail::cos_raw(a, b));
    }
    return rep;
}

/// Upper bound on alpha(v + X, w + Y) under alpha(v, w) <= h, where
/// h = -xy + sqrt(1 - x^2) sqrt(1 - y^2), x = |X|/|v|, y = |Y|/|w|.
/// Configurations violating the precondition are rejected and redrawn.
inline LemmaReport verify_lemma2(int trials, int d, std::uint64_t seed) {
    if (trials < 1 || d < 2) throw InvalidArgument("verify_lemma2: trials >= 1 and d >= 2 required");
    const RandomStream base(seed, "lemma2");
    LemmaReport rep;
    for (int t = 0; t < trials; ++t) {
        RandomStream rng = base.derive("trial", d, t);
        for (;;) {
            const std::vector<double> v = rng.normal_vector(static_cast<std::size_t>(d));
            const std::vector<double> w = rng.normal_vector(static_cast<std::size_t>(d));
            const double nv = norm(v), nw = norm(w);
            const double x = rng.uniform(0.0, 0.999), y = rng.uniform(0.0, 0.999);
            const double h = -x * y + std::sqrt(1.0 - x * x) * std::sqrt(1.0 - y * y);
            const double avw = detail::cos_raw(v, w);
            if (avw > h) continue;
            std::vector<double> a, b;
            if (t % 4 == 3) {
                // Extremal: both noisy vectors tangent to their noise balls, rotated toward each other.
                std::vector<double> vhat = v, what = w;
                for (double& e : vhat) e /= nv;
                for (double& e : what) e /= nw;
                std::vector<double> toward_w = what;
                const double c = dot(what, vhat);
                for (std::size_t i = 0; i < toward_w.size(); ++i) toward_w[i] -= c * vhat[i];
                const double nt = norm(toward_w);
                if (nt < 1e-12) continue;
                for (double& e : toward_w) e /= nt;
                const double theta = std::acos(std::clamp(c, -1.0, 1.0));
                a = detail::rotate_in_plane(vhat, toward_w, std::asin(x), nv * std::sqrt(1.0 - x * x));
                b = detail::rotate_in_plane(vhat, toward_w, theta - std::asin(y), nw * std::sqrt(1.0 - y * y));
            } else {
                a = detail::add(v, detail::scaled_direction(static_cast<std::size_t>(d), x * nv, rng));
                b = detail::add(w, detail::scaled_direction(static_cast<std::size_t>(d), y * nw, rng));
            }
            const double bound = avw * h + std::sqrt(std::max(0.0, 1.0 - avw * avw)) * std::sqrt(std::max(0.0, 1.0 - h * h));
            detail::record(rep, detail::cos_raw(a, b) - bound);
            break;
        }
    }
    return rep;
}

/// Any zero-sum set sum_l a_l v_l = 0 (a_l > 0) admits a bipartition whose
/// maximum cross similarity is at most cos(pi/(k-1)). Checked with the
/// exhaustive bipartition on random sets.
inline LemmaReport verify_lemma3(int trials, int k, int d, std::uint64_t seed) {
    if (trials < 1 || k < 2 || d < 2) throw InvalidArgument("verify_lemma3: trials >= 1, k >= 2 and d >= 2 required");
    const RandomStream base(seed, "lemma3");
    const double bound = k == 2 ? -1.0 : std::cos(std::numbers::pi / (k - 1));
    LemmaReport rep;
    for (int t = 0; t < trials; ++t) {
        RandomStream rng = base.derive("trial", k * 1000 + d, t);
        std::vector<double> weights(static_cast<std::size_t>(k));
        for (double& a : weights) a = rng.uniform(0.1, 2.0);
        const StationaryConfig cfg = sample_stationary_config(k, k, d, 0.0, rng, weights);
        const SimilarityMatrix alpha = similarity_matrix(cfg.true_grads);
        detail::record(rep, brute_force_bipartition(alpha).cross_max - bound);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Weight updates versus gradients

struct GapComparison {
    int round = 0;
    double g_gradient = 0.0;
    double g_weight_update = 0.0;
};

/// Runs `rounds` rounds of FL and, at every round's synchronized parameters,
/// computes the separation gap both from full-batch client gradients and from
/// the clients' weight updates.
inline std::vector<GapComparison> compare_update_vs_gradient(const std::vector<ClientRecord>& clients, const ModelSpec& model,
                                                             FLConfig cfg, const ParamVec& theta0, int rounds, std::uint64_t seed) {
    if (!model.is_classifier()) throw InvalidArgument("compare_update_vs_gradient needs a classifier population");
    cfg.max_rounds = rounds;
    cfg.eps1 = std::numeric_limits<double>::min();
    cfg.record_client_metrics = false;
    std::vector<int> truth;
    for (const auto& c : clients) truth.push_back(c.truth);
    std::vector<GapComparison> out;
    FLObserver obs = [&](const FLRoundView& view) -> std::optional<double> {
        std::vector<ParamVec> grads;
        for (const ClientRecord* c : view.clients) grads.push_back(grad(local_spec(model, *c), view.theta, c->train));
        GapComparison row;
        row.round = view.round;
        row.g_gradient = separation_gap(similarity_matrix(grads), truth);
        row.g_weight_update = separation_gap(similarity_matrix(view.updates), truth);
        out.push_back(row);
        return row.g_weight_update;
    };
    run_fl(model, theta0, view_of(clients), cfg, RandomStream(seed, "compare"), obs);
    return out;
}

/// cos(Delta theta_i, -grad r_i(theta)) for every client: how well one round of
/// local training tracks the full-batch descent direction.
inline std::vector<double> update_gradient_alignment(const std::vector<ClientRecord>& clients, const ModelSpec& model,
                                                     const FLConfig& cfg, const ParamVec& theta, const RandomStream& rng) {
    std::vector<double> out;
    for (const auto& c : clients) {
        RandomStream local = rng.derive("local", c.id, 0);
        const ParamVec delta = client_update(model, theta, c, cfg, local);
        const ParamVec g = grad(local_spec(model, c), theta, c.train);
        out.push_back(cosine(delta, -g));
    }
    return out;
}

/// gamma_i = |grad R - grad r_i| / |grad R| with grad R estimated from a large fresh sample.
inline double estimate_gamma(const PopulationSpec& spec, const ClientRecord& client, const ModelSpec& model, const ParamVec& theta,
                             int n_oracle, std::uint64_t seed) {
    const ParamVec truth_grad = true_risk_gradient_oracle(spec, client.truth, model, theta, n_oracle, seed);
    const ParamVec local = grad(model, theta, client.train);
    return norm(local - truth_grad) / norm(truth_grad);
}

}  // namespace cfl
