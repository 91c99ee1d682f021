#pragma once

// Clustered Federated Learning controllers: the recursive bipartitioning
// procedure, the flat online multi-round variant with optional update masking,
// the parameter tree they build, and routing of new clients through that tree.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfl/clustering.hpp"
#include "cfl/datagen.hpp"
#include "cfl/flcore.hpp"
#include "cfl/models.hpp"
#include "cfl/numerics.hpp"

namespace cfl {

// ---------------------------------------------------------------------------
// Masking

/// Coordinate permutation shared by all clients (derived from a common seed).
/// Norms and cosine similarities are invariant under it, so the server can
/// cluster masked updates without seeing raw parameters.
class PermutationKey {
public:
    PermutationKey(std::uint64_t seed, std::size_t dim) : seed_(seed) {
        RandomStream rng(seed, "mask");
        perm_ = rng.permutation(dim);
        build_inverse();
    }

    static PermutationKey identity(std::size_t dim) {
        PermutationKey k;
        k.perm_.resize(dim);
        for (std::size_t i = 0; i < dim; ++i) k.perm_[i] = static_cast<int>(i);
        k.build_inverse();
        return k;
    }

    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t dim() const noexcept { return perm_.size(); }
    const std::vector<int>& permutation() const noexcept { return perm_; }
    const std::vector<int>& inverse() const noexcept { return inv_; }

private:
    PermutationKey() = default;
    void build_inverse() {
        inv_.assign(perm_.size(), 0);
        for (std::size_t i = 0; i < perm_.size(); ++i) inv_[static_cast<std::size_t>(perm_[i])] = static_cast<int>(i);
    }

    std::uint64_t seed_ = 0;
    std::vector<int> perm_;
    std::vector<int> inv_;
};

/// out[i] = v[perm[i]]
inline ParamVec mask(const PermutationKey& key, const ParamVec& v) {
    if (v.dim() != key.dim()) throw InvalidArgument("mask: dimension mismatch");
    std::vector<double> out(v.dim());
    const auto& p = key.permutation();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[static_cast<std::size_t>(p[i])];
    return ParamVec(std::move(out));
}

inline ParamVec unmask(const PermutationKey& key, const ParamVec& v) {
    if (v.dim() != key.dim()) throw InvalidArgument("unmask: dimension mismatch");
    std::vector<double> out(v.dim());
    const auto& q = key.inverse();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[static_cast<std::size_t>(q[i])];
    return ParamVec(std::move(out));
}

// ---------------------------------------------------------------------------
// Parameter tree

/// Updates of one child's clients, computed at the parent's stationary point.
struct EdgeCache {
    std::vector<int> client_ids;
    std::vector<ParamVec> updates;
};

struct ClusterNode {
    int id = 0;
    int parent = -1;
    int depth = 0;
    std::vector<int> clients;
    ParamVec theta_star;
    std::vector<int> children;         // empty or two node ids
    std::vector<EdgeCache> edge_cache;  // parallel to children
    std::string decision;              // why the node was split or left as a leaf
    std::optional<double> cross_max;   // of the bipartition evaluated at this node
    int split_round = -1;
};

class ParameterTree {
public:
    int root() const noexcept { return 0; }
    const std::vector<ClusterNode>& nodes() const noexcept { return nodes_; }
    const ClusterNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    ClusterNode& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
    bool empty() const noexcept { return nodes_.empty(); }

    int add_node(std::vector<int> clients, int parent) {
        ClusterNode n;
        n.id = static_cast<int>(nodes_.size());
        n.parent = parent;
        n.depth = parent < 0 ? 0 : node(parent).depth + 1;
        n.clients = std::move(clients);
        std::sort(n.clients.begin(), n.clients.end());
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    void attach_children(int parent, int a, int b, EdgeCache cache_a, EdgeCache cache_b) {
        ClusterNode& p = node(parent);
        p.children = {a, b};
        p.edge_cache = {std::move(cache_a), std::move(cache_b)};
    }

    std::vector<int> leaves() const {
        std::vector<int> out;
        for (const auto& n : nodes_)
            if (n.children.empty()) out.push_back(n.id);
        return out;
    }

    /// Leaf id for every client of the root.
    std::map<int, int> assignment() const {
        std::map<int, int> out;
        for (int leaf : leaves())
            for (int c : node(leaf).clients) out[c] = leaf;
        return out;
    }

    int max_depth() const {
        int d = 0;
        for (const auto& n : nodes_) d = std::max(d, n.depth);
        return d;
    }

    /// Throws InvalidArgument if the structural invariants do not hold.
    void validate() const {
        if (nodes_.empty()) throw InvalidArgument("parameter tree is empty");
        if (nodes_[0].parent != -1) throw InvalidArgument("tree root must not have a parent");
        for (const auto& n : nodes_) {
            if (n.children.empty()) {
                if (!n.edge_cache.empty()) throw InvalidArgument("leaf carries an edge cache");
                continue;
            }
            if (n.children.size() != 2) throw InvalidArgument("internal nodes must have exactly two children");
            if (n.edge_cache.size() != 2) throw InvalidArgument("every edge needs a cache");
            std::vector<int> merged;
            for (std::size_t e = 0; e < 2; ++e) {
                const ClusterNode& ch = node(n.children[e]);
                if (ch.parent != n.id) throw InvalidArgument("child does not point back to its parent");
                if (ch.clients.empty()) throw InvalidArgument("child cluster is empty");
                const EdgeCache& cache = n.edge_cache[e];
                if (cache.updates.size() != ch.clients.size() || cache.client_ids.size() != ch.clients.size())
                    throw InvalidArgument("edge cache size does not match the child's client count");
                std::vector<int> cached = cache.client_ids;
                std::sort(cached.begin(), cached.end());
                if (cached != ch.clients) throw InvalidArgument("edge cache clients differ from the child's clients");
                merged.insert(merged.end(), ch.clients.begin(), ch.clients.end());
            }
            std::sort(merged.begin(), merged.end());
            if (merged != n.clients) throw InvalidArgument("children do not partition the parent's clients");
        }
    }

private:
    std::vector<ClusterNode> nodes_;
};

// ---------------------------------------------------------------------------
// Recursive CFL

struct SplitEvent {
    int node = 0;
    int round = 0;  // last FL round at this node
    SplitDecision decision = SplitDecision::not_stationary;
    double server_norm = 0.0;
    double max_client_norm = 0.0;
    int clusters_alive = 1;  // leaves of the tree while this node trained
    std::optional<SimilarityMatrix> alpha;
    std::optional<Bipartition> bipartition;
};

struct CFLResult {
    ParameterTree tree;
    std::map<int, int> assignment;      // client id -> leaf node
    std::map<int, ParamVec> theta;      // client id -> final parameters
    std::vector<RoundRecord> history;   // all FL rounds, in execution order
    std::vector<SplitEvent> events;     // one per evaluated node
};

namespace detail {

inline std::vector<ParamVec> gradients_at(const ModelSpec& model, const ParamVec& theta, const ClientSet& clients) {
    std::vector<ParamVec> out;
    for (const ClientRecord* c : clients) out.push_back(grad(local_spec(model, *c), theta, c->train));
    return out;
}

inline ClientSet select(const ClientSet& clients, const std::vector<int>& ids) {
    ClientSet out;
    for (const ClientRecord* c : clients)
        if (std::binary_search(ids.begin(), ids.end(), c->id)) out.push_back(c);
    return out;
}

inline EdgeCache cache_for(const ClientSet& clients, const std::vector<ParamVec>& updates, const std::vector<int>& ids) {
    EdgeCache cache;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        if (std::binary_search(ids.begin(), ids.end(), clients[i]->id)) {
            cache.client_ids.push_back(clients[i]->id);
            cache.updates.push_back(updates[i]);
        }
    }
    return cache;
}

}  // namespace detail

/// Depth-first recursive CFL. Each node runs FL to a stationary point, then
/// splits its clients into the min-max bipartition of their final-round update
/// similarities if the split decision allows it, and recurses on both halves
/// from the node's solution. Node v's randomness is rng.derive("node", v).
inline CFLResult run_cfl_recursive(const ModelSpec& model, const ParamVec& theta0, const std::vector<ClientRecord>& clients,
                                   const FLConfig& fl_cfg, const SplitConfig& split_cfg, int max_depth, const RandomStream& rng,
                                   const FLObserver& observer = {}) {
    if (clients.empty()) throw InvalidArgument("run_cfl_recursive: no clients");
    split_cfg.validate();
    CFLResult res;
    const ClientSet all = view_of(clients);
    std::vector<int> ids;
    for (const auto& c : clients) ids.push_back(c.id);
    int round_offset = 0;

    std::function<void(int, const ClientSet&, const ParamVec&)> visit = [&](int node_id, const ClientSet& members,
                                                                           const ParamVec& start) {
        const int alive = static_cast<int>(res.tree.leaves().size());
        FLResult fl = run_fl(model, start, members, fl_cfg, rng.derive("node", node_id), observer, node_id, round_offset);
        round_offset += static_cast<int>(fl.history.size());
        const RoundRecord& last = fl.history.back();
        res.history.insert(res.history.end(), fl.history.begin(), fl.history.end());

        SplitEvent ev;
        ev.node = node_id;
        ev.round = last.round;
        ev.server_norm = last.server_update_norm;
        ev.max_client_norm = last.max_client_norm;
        ev.clusters_alive = alive;
        ev.decision = split_decision(ev.server_norm, ev.max_client_norm, 1.0, split_cfg);

        ClusterNode& node = res.tree.node(node_id);
        node.theta_star = fl.theta;
        node.decision = to_string(ev.decision);

        // Only a stationary, non-terminal node needs the similarity structure.
        const bool candidate = ev.decision == SplitDecision::stationary_but_reject;
        if (candidate && members.size() < 2) node.decision = "singleton";
        if (candidate && members.size() >= 2 && node.depth >= max_depth) node.decision = "max_depth";
        if (candidate && members.size() >= 2 && node.depth < max_depth) {
            std::vector<int> member_ids;
            for (const ClientRecord* c : members) member_ids.push_back(c->id);
            const std::vector<ParamVec> vectors = split_cfg.similarity_source == SimilaritySource::weight_update
                                                      ? fl.last_updates
                                                      : detail::gradients_at(model, fl.theta, members);
            try {
                ev.alpha = similarity_matrix(vectors, member_ids);
            } catch (const DegenerateVector&) {
                node.decision = "degenerate_update";
            }
            if (ev.alpha) {
                ev.bipartition = optimal_bipartition(*ev.alpha);
                ev.decision = split_decision(ev.server_norm, ev.max_client_norm, ev.bipartition->cross_max, split_cfg);
                node.decision = to_string(ev.decision);
                node.cross_max = ev.bipartition->cross_max;
            }
        }
        res.events.push_back(ev);

        if (ev.decision != SplitDecision::split || !ev.bipartition) {
            for (const ClientRecord* c : members) res.theta[c->id] = fl.theta;
            return;
        }
        std::vector<int> c1 = ev.bipartition->c1, c2 = ev.bipartition->c2;
        std::sort(c1.begin(), c1.end());
        std::sort(c2.begin(), c2.end());
        node.split_round = last.round;
        const int a = res.tree.add_node(c1, node_id);
        const int b = res.tree.add_node(c2, node_id);
        res.tree.attach_children(node_id, a, b, detail::cache_for(members, fl.last_updates, c1),
                                 detail::cache_for(members, fl.last_updates, c2));
        const ParamVec theta_star = fl.theta;
        visit(a, detail::select(members, c1), theta_star);
        visit(b, detail::select(members, c2), theta_star);
    };

    std::sort(ids.begin(), ids.end());
    res.tree.add_node(ids, -1);
    visit(0, all, theta0);
    res.assignment = res.tree.assignment();
    return res;
}

// ---------------------------------------------------------------------------
// Online CFL

struct OnlineClusterRecord {
    int node = 0;
    std::vector<int> clients;
    double server_norm = 0.0;
    double max_client_norm = 0.0;
    bool evaluated = false;  // stationarity criteria met, bipartition computed
    std::optional<double> cross_max;
    bool split = false;
    std::optional<double> g_alpha;
};

struct OnlineRound {
    int round = 0;
    std::vector<OnlineClusterRecord> clusters;  // clusters active during the round
    int clusters_after = 0;
    std::optional<double> mean_test_accuracy;
};

/// What an online observer sees: the clusters active in the round and the
/// (possibly masked) updates the server received, indexed like `clients`.
struct OnlineRoundView {
    int round;
    const std::vector<OnlineClusterRecord>& clusters;
    std::span<const ParamVec> uploads;
    const std::vector<ClientRecord>& clients;
};

using OnlineObserver = std::function<void(const OnlineRoundView&, std::vector<OnlineClusterRecord>&)>;

struct OnlineResult {
    ParameterTree tree;
    std::vector<OnlineRound> history;
    std::map<int, ParamVec> theta;  // client id -> final parameters
    std::map<int, int> assignment;
};

/// Flat multi-round CFL. Every round each client applies its cluster's last
/// aggregate, trains locally, and uploads its (masked) update. The server
/// aggregates per cluster and, for stationary clusters whose clients are not,
/// bipartitions and splits when the noise criterion accepts. New clusters
/// inherit their parent's aggregate for the next round. Runs exactly
/// `total_rounds` rounds.
inline OnlineResult run_cfl_online(const ModelSpec& model, const ParamVec& theta0, const std::vector<ClientRecord>& clients,
                                   const FLConfig& fl_cfg, const SplitConfig& split_cfg, const std::optional<PermutationKey>& privacy,
                                   int total_rounds, const RandomStream& rng, int max_depth = 10,
                                   const OnlineObserver& observer = {}) {
    if (clients.empty()) throw InvalidArgument("run_cfl_online: no clients");
    if (total_rounds < 1) throw InvalidArgument("run_cfl_online: total_rounds must be >= 1");
    fl_cfg.validate();
    split_cfg.validate();
    if (privacy && privacy->dim() != theta0.dim()) throw InvalidArgument("run_cfl_online: key dimension mismatch");

    const std::size_t m = clients.size();
    auto to_server = [&](const ParamVec& v) { return privacy ? mask(*privacy, v) : v; };
    auto from_server = [&](const ParamVec& v) { return privacy ? unmask(*privacy, v) : v; };

    OnlineResult res;
    std::vector<int> all_ids;
    std::map<int, std::size_t> slot;  // client id -> index into `clients`
    for (std::size_t i = 0; i < m; ++i) {
        all_ids.push_back(clients[i].id);
        slot[clients[i].id] = i;
    }
    std::sort(all_ids.begin(), all_ids.end());
    res.tree.add_node(all_ids, -1);

    std::vector<int> active{0};                      // node ids of current clusters
    std::map<int, ParamVec> cluster_update;          // node id -> last aggregate (server space)
    cluster_update[0] = ParamVec::zeros(theta0.dim());
    std::vector<ParamVec> theta(m, theta0);
    std::vector<ParamVec> uploads(m);
    std::vector<int> cluster_of(m, 0);

    const bool classifiers =
        std::all_of(clients.begin(), clients.end(), [&](const ClientRecord& c) { return local_spec(model, c).is_classifier(); });
    for (int t = 0; t < total_rounds; ++t) {
        parallel_for(m, fl_cfg.threads, [&](std::size_t i) {
            theta[i] = theta[i] + from_server(cluster_update.at(cluster_of[i]));
            RandomStream local = rng.derive("local", clients[i].id, t);
            uploads[i] = to_server(client_update(model, theta[i], clients[i], fl_cfg, local));
        });

        OnlineRound round;
        round.round = t;
        std::vector<int> next_active;
        for (int node_id : active) {
            const ClusterNode& node = res.tree.node(node_id);
            OnlineClusterRecord rec;
            rec.node = node_id;
            rec.clients = node.clients;
            std::vector<ParamVec> ups;
            std::vector<std::size_t> sizes;
            for (int id : node.clients) {
                ups.push_back(uploads[slot.at(id)]);
                sizes.push_back(clients[slot.at(id)].data_size());
                rec.max_client_norm = std::max(rec.max_client_norm, norm(ups.back()));
            }
            const ParamVec agg = aggregate(ups, sizes, fl_cfg.weighting);
            rec.server_norm = norm(agg);
            cluster_update[node_id] = agg;
            round.clusters.push_back(rec);
        }
        if (observer) observer(OnlineRoundView{t, round.clusters, uploads, clients}, round.clusters);

        for (OnlineClusterRecord& rec : round.clusters) {
            const int node_id = rec.node;
            const bool eligible = rec.server_norm < split_cfg.eps1 && rec.max_client_norm > split_cfg.eps2 &&
                                  rec.clients.size() >= 2 && res.tree.node(node_id).depth < max_depth;
            if (!eligible) {
                next_active.push_back(node_id);
                continue;
            }
            std::vector<ParamVec> ups;
            for (int id : rec.clients) ups.push_back(uploads[slot.at(id)]);
            std::optional<SimilarityMatrix> alpha;
            try {
                alpha = similarity_matrix(ups, rec.clients);
            } catch (const DegenerateVector&) {
                next_active.push_back(node_id);
                continue;
            }
            const Bipartition bp = optimal_bipartition(*alpha);
            rec.evaluated = true;
            rec.cross_max = bp.cross_max;
            if (!(split_cfg.gamma_max < gamma_acceptance_threshold(bp.cross_max))) {
                next_active.push_back(node_id);
                continue;
            }
            rec.split = true;
            std::vector<int> c1 = bp.c1, c2 = bp.c2;
            std::sort(c1.begin(), c1.end());
            std::sort(c2.begin(), c2.end());
            {
                ClusterNode& node = res.tree.node(node_id);
                node.theta_star = theta[slot.at(rec.clients.front())];
                node.decision = "split";
                node.cross_max = bp.cross_max;
                node.split_round = t;
            }
            const int a = res.tree.add_node(c1, node_id);
            const int b = res.tree.add_node(c2, node_id);
            auto cache = [&](const std::vector<int>& ids) {
                EdgeCache e;
                for (int id : ids) {
                    e.client_ids.push_back(id);
                    e.updates.push_back(uploads[slot.at(id)]);
                }
                return e;
            };
            res.tree.attach_children(node_id, a, b, cache(c1), cache(c2));
            cluster_update[a] = cluster_update.at(node_id);
            cluster_update[b] = cluster_update.at(node_id);
            for (int id : c1) cluster_of[slot.at(id)] = a;
            for (int id : c2) cluster_of[slot.at(id)] = b;
            next_active.push_back(a);
            next_active.push_back(b);
        }
        active = std::move(next_active);
        round.clusters_after = static_cast<int>(active.size());

        if (fl_cfg.record_client_metrics && classifiers) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const ParamVec next = theta[i] + from_server(cluster_update.at(cluster_of[i]));
                acc += accuracy(local_spec(model, clients[i]), next, clients[i].test);
            }
            round.mean_test_accuracy = acc / static_cast<double>(m);
        }
        res.history.push_back(std::move(round));
    }

    for (std::size_t i = 0; i < m; ++i) {
        theta[i] = theta[i] + from_server(cluster_update.at(cluster_of[i]));
        res.theta[clients[i].id] = theta[i];
    }
    for (int node_id : active) {
        ClusterNode& node = res.tree.node(node_id);
        node.theta_star = theta[slot.at(node.clients.front())];
        if (node.decision.empty()) node.decision = "leaf";
    }
    res.assignment = res.tree.assignment();
    return res;
}

// ---------------------------------------------------------------------------
// Routing new clients

struct Assignment {
    int leaf = 0;
    ParamVec theta;
    std::vector<int> path;  // visited node ids, root first
};

/// Walks from the root to a leaf, at each internal node training the new
/// client from that node's solution and following the child whose cached
/// updates contain the most similar one (ties go to the first child).
inline Assignment assign_client(const ParameterTree& tree, const ClientRecord& client, const ModelSpec& model, const FLConfig& cfg,
                                const RandomStream& rng, const std::optional<PermutationKey>& privacy = std::nullopt) {
    if (tree.empty()) throw InvalidArgument("assign_client: empty tree");
    int v = tree.root();
    Assignment out;
    out.path.push_back(v);
    while (!tree.node(v).children.empty()) {
        const ClusterNode& node = tree.node(v);
        RandomStream local = rng.derive("assign", client.id, v);
        ParamVec delta = client_update(model, node.theta_star, client, cfg, local);
        if (privacy) delta = mask(*privacy, delta);
        if (norm(delta) == 0.0) throw DegenerateVector("assign_client: new client's update has zero norm", client.id);
        double best[2] = {-2.0, -2.0};
        for (std::size_t e = 0; e < 2; ++e)
            for (const ParamVec& u : node.edge_cache[e].updates) best[e] = std::max(best[e], cosine(delta, u));
        v = best[0] >= best[1] ? node.children[0] : node.children[1];
        out.path.push_back(v);
    }
    out.leaf = v;
    out.theta = tree.node(v).theta_star;
    return out;
}

}  // namespace cfl
