#pragma once

// Federated Learning: local client updates, weighted aggregation, and the
// round loop that runs until the aggregated update becomes stationary.

#include <algorithm>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "cfl/datagen.hpp"
#include "cfl/models.hpp"
#include "cfl/numerics.hpp"
#include "cfl/parallel.hpp"

namespace cfl {

enum class Weighting { data_size, uniform };

inline const char* to_string(Weighting w) { return w == Weighting::data_size ? "data_size" : "uniform"; }

struct FLConfig {
    double eps1 = 1e-3;  // stationarity threshold on the aggregated update norm
    int max_rounds = 200;
    int local_n = 1;     // local epochs (or steps, see local_steps)
    double lr = 0.1;
    int batch_size = 10;
    Weighting weighting = Weighting::data_size;
    LocalSteps local_steps = LocalSteps::epochs;
    int threads = 1;
    bool record_client_metrics = true;

    void validate() const {
        if (!(eps1 > 0.0)) throw InvalidArgument("FLConfig: eps1 must be positive");
        if (max_rounds < 1) throw InvalidArgument("FLConfig: max_rounds must be >= 1");
        if (local_n < 1) throw InvalidArgument("FLConfig: local n must be >= 1");
        if (!(lr > 0.0)) throw InvalidArgument("FLConfig: lr must be positive");
        if (batch_size < 1) throw InvalidArgument("FLConfig: batch_size must be >= 1");
    }
};

struct RoundRecord {
    int round = 0;
    int node = 0;  // cluster/tree node the round belongs to
    double server_update_norm = 0.0;
    double max_client_norm = 0.0;
    std::vector<int> client_ids;
    std::vector<double> client_norms;
    // Measured after aggregation. Accuracy is empty for quadratic objectives.
    std::vector<double> train_loss;
    std::vector<double> test_accuracy;
    std::optional<double> g_alpha;  // filled by harness observers that know the ground truth
};

using ClientSet = std::vector<const ClientRecord*>;

inline ClientSet view_of(std::span<const ClientRecord> clients) {
    ClientSet out;
    out.reserve(clients.size());
    for (const auto& c : clients) out.push_back(&c);
    return out;
}

/// Delta theta_i = SGD_n(theta, D_i) - theta.
inline ParamVec client_update(const ModelSpec& model, const ParamVec& theta, const ClientRecord& client, const FLConfig& cfg,
                              RandomStream& rng) {
    const ModelSpec& spec = local_spec(model, client);
    return sgd_n(spec, theta, client.train, cfg.local_n, cfg.lr, cfg.batch_size, rng, cfg.local_steps) - theta;
}

inline ParamVec aggregate(std::span<const ParamVec> updates, std::span<const std::size_t> data_sizes, Weighting weighting) {
    if (updates.empty()) throw InvalidArgument("aggregate: empty input");
    if (updates.size() != data_sizes.size()) throw InvalidArgument("aggregate: size list length mismatch");
    std::vector<double> w(updates.size(), 1.0);
    if (weighting == Weighting::data_size) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (data_sizes[i] == 0) throw InvalidArgument("aggregate: data sizes must be positive");
            w[i] = static_cast<double>(data_sizes[i]);
        }
    }
    return weighted_mean(updates, w);
}

/// What an observer sees each round: synchronized parameters before the
/// aggregation step, and the clients' updates computed from them.
struct FLRoundView {
    int round;
    const ParamVec& theta;
    const ClientSet& clients;
    std::span<const ParamVec> updates;
};

using FLObserver = std::function<std::optional<double>(const FLRoundView&)>;

struct FLResult {
    ParamVec theta;
    std::vector<RoundRecord> history;
    bool converged = false;
    // Updates of the final round (computed at the last synchronized parameters).
    std::vector<ParamVec> last_updates;
};

inline void record_metrics(const ModelSpec& model, const ParamVec& theta, const ClientSet& clients, RoundRecord& rec) {
    for (const ClientRecord* c : clients) {
        const ModelSpec& spec = local_spec(model, *c);
        rec.train_loss.push_back(loss(spec, theta, c->train));
        if (spec.is_classifier()) rec.test_accuracy.push_back(accuracy(spec, theta, c->test));
    }
}

/// Runs Federated Learning on `clients` from theta0 until the aggregated update
/// norm drops below eps1 or max_rounds is reached. Client i's randomness in
/// round t comes from rng.derive("local", id, t).
inline FLResult run_fl(const ModelSpec& model, const ParamVec& theta0, const ClientSet& clients, const FLConfig& cfg,
                       const RandomStream& rng, const FLObserver& observer = {}, int node = 0, int round_offset = 0) {
    if (clients.empty()) throw InvalidArgument("run_fl: empty client set");
    cfg.validate();
    FLResult res{theta0, {}, false, {}};
    std::vector<std::size_t> sizes;
    for (const ClientRecord* c : clients) sizes.push_back(c->data_size());

    for (int t = 0; t < cfg.max_rounds; ++t) {
        const int global_round = round_offset + t;
        std::vector<ParamVec> updates(clients.size());
        parallel_for(clients.size(), cfg.threads, [&](std::size_t i) {
            RandomStream local = rng.derive("local", clients[i]->id, global_round);
            updates[i] = client_update(model, res.theta, *clients[i], cfg, local);
        });
        const ParamVec agg = aggregate(updates, sizes, cfg.weighting);

        RoundRecord rec;
        rec.round = global_round;
        rec.node = node;
        rec.server_update_norm = norm(agg);
        for (std::size_t i = 0; i < clients.size(); ++i) {
            const double n = norm(updates[i]);
            rec.client_ids.push_back(clients[i]->id);
            rec.client_norms.push_back(n);
            rec.max_client_norm = std::max(rec.max_client_norm, n);
        }
        if (observer) rec.g_alpha = observer(FLRoundView{global_round, res.theta, clients, updates});

        res.theta = res.theta + agg;
        if (cfg.record_client_metrics) record_metrics(model, res.theta, clients, rec);
        res.history.push_back(std::move(rec));
        res.last_updates = std::move(updates);
        if (res.history.back().server_update_norm < cfg.eps1) {
            res.converged = true;
            break;
        }
    }
    return res;
}

}  // namespace cfl
