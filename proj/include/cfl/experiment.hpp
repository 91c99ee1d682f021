#pragma once

// Config-driven experiment runs: builds the population, runs the chosen mode
// and renders every output file in memory before anything touches the disk.

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cfl/cfl.hpp"
#include "cfl/serialize.hpp"

namespace cfl {

inline constexpr int kSchemaVersion = 1;

enum class Mode { fl_baseline, cfl_recursive, cfl_online };

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::fl_baseline: return "fl_baseline";
        case Mode::cfl_recursive: return "cfl_recursive";
        case Mode::cfl_online: return "cfl_online";
    }
    return "?";
}

struct ExperimentConfig {
    Mode mode = Mode::cfl_recursive;
    std::uint64_t seed = 0;
    PopulationSpec population;
    ModelSpec model;
    FLConfig fl;
    SplitConfig split;
    int max_depth = 10;
    int online_rounds = 0;  // cfl_online only
    bool privacy = false;
    std::optional<std::uint64_t> privacy_seed;  // defaults to a stream of `seed`
    std::optional<std::string> output_dir;

    std::uint64_t mask_seed() const { return privacy_seed ? *privacy_seed : RandomStream(seed, "privacy").next_u64(); }
};

inline json to_json(const ExperimentConfig& c) {
    json j{{"schema_version", kSchemaVersion},
           {"mode", to_string(c.mode)},
           {"seed", c.seed},
           {"population", to_json(c.population)},
           {"model", to_json(c.model)},
           {"fl", to_json(c.fl)},
           {"split", to_json(c.split)},
           {"max_depth", c.max_depth},
           {"privacy", c.privacy}};
    if (c.mode == Mode::cfl_online) j["online_rounds"] = c.online_rounds;
    if (c.privacy_seed) j["privacy_seed"] = *c.privacy_seed;
    if (c.output_dir) j["output_dir"] = *c.output_dir;
    return j;
}

inline ExperimentConfig config_from_json(const JsonDocument& doc) {
    const ObjectReader r(doc, doc.value, "");
    r.allow_only({"schema_version", "mode", "seed", "population", "model", "fl", "split", "max_depth", "online_rounds", "privacy",
                  "privacy_seed", "output_dir", "description"});
    if (r.integer("schema_version", 0, 1LL << 30) != kSchemaVersion)
        r.fail("schema_version", "unsupported schema version (expected " + std::to_string(kSchemaVersion) + ")");
    ExperimentConfig c;
    c.mode = static_cast<Mode>(r.choice("mode", {"fl_baseline", "cfl_recursive", "cfl_online"}));
    c.seed = r.seed("seed");
    c.population = population_from_json(r.object("population"), c.seed);
    c.model = model_from_json(r.object("model"), std::pair{c.population.p, c.population.classes});
    if (!c.model.is_classifier()) r.fail("model", "experiments need a classifier model");
    c.fl = r.has("fl") ? fl_from_json(r.object("fl")) : FLConfig{};
    c.split = r.has("split") ? split_from_json(r.object("split"), c.fl.eps1) : SplitConfig{};
    c.max_depth = static_cast<int>(r.integer("max_depth", 0, 64, c.max_depth));
    if (c.mode == Mode::cfl_online) c.online_rounds = static_cast<int>(r.integer("online_rounds", 1, 100000000));
    else if (r.has("online_rounds")) r.fail("online_rounds", "only meaningful with mode cfl_online");
    c.privacy = r.boolean("privacy", false);
    if (c.privacy && c.mode != Mode::cfl_online) r.fail("privacy", "masking is only used by mode cfl_online");
    if (r.has("privacy_seed")) c.privacy_seed = r.seed("privacy_seed");
    if (r.has("output_dir")) c.output_dir = r.string("output_dir");
    if (r.has("description")) r.string("description");
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::runtime_error& e) {
        throw FormatError(e.what());
    }
    return config_from_json(parse_json_document(text, path.string()));
}

/// Output directory: the config's own choice, else $CFL_OUTPUT_DIR, else ./cfl_out.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg, const std::optional<std::string>& override_dir) {
    if (override_dir) return *override_dir;
    if (cfg.output_dir) return *cfg.output_dir;
    if (const char* env = std::getenv("CFL_OUTPUT_DIR"); env && *env) return env;
    return "cfl_out";
}

struct ExperimentOutputs {
    json summary;
    std::map<std::string, std::string> files;  // file name -> contents
};

namespace detail {

inline double mean_accuracy(const ModelSpec& model, const std::vector<ClientRecord>& clients, const std::map<int, ParamVec>& theta) {
    double s = 0.0;
    for (const auto& c : clients) s += accuracy(model, theta.at(c.id), c.test);
    return s / static_cast<double>(clients.size());
}

inline std::optional<double> gap_if_defined(const SimilarityMatrix& alpha, const std::map<int, int>& truth_of) {
    std::vector<int> truth;
    for (int id : alpha.ids()) truth.push_back(truth_of.at(id));
    bool shared = false;
    for (std::size_t i = 0; i < truth.size() && !shared; ++i)
        for (std::size_t j = i + 1; j < truth.size(); ++j)
            if (truth[i] == truth[j]) shared = true;
    if (!shared || truth.size() < 2) return std::nullopt;
    return separation_gap(alpha, truth);
}

inline std::string clients_csv(const ModelSpec& model, const std::vector<ClientRecord>& clients, const std::map<int, int>& leaf,
                               const std::map<int, ParamVec>& theta) {
    std::ostringstream out;
    out << "client,truth,leaf,train_loss,test_accuracy\n";
    for (const auto& c : clients) {
        const ParamVec& t = theta.at(c.id);
        out << c.id << ',' << c.truth << ',' << leaf.at(c.id) << ',' << format_double(loss(model, t, c.train)) << ','
            << format_double(accuracy(model, t, c.test)) << '\n';
    }
    return out.str();
}

}  // namespace detail

/// Runs the configured experiment. Numeric outputs depend only on the config,
/// not on `threads`.
inline ExperimentOutputs run_experiment(const ExperimentConfig& cfg, int threads = 1) {
    const std::vector<ClientRecord> clients = make_population(cfg.population);
    FLConfig fl = cfg.fl;
    fl.threads = threads;
    RandomStream init_rng(cfg.seed, "init");
    const ParamVec theta0 = init_params(cfg.model, init_rng);
    const RandomStream run_rng(cfg.seed, "run");

    std::map<int, int> truth_of;
    for (const auto& c : clients) truth_of[c.id] = c.truth;
    std::vector<int> all_truth;
    for (const auto& c : clients) all_truth.push_back(c.truth);

    FLObserver gap_observer = [&](const FLRoundView& view) -> std::optional<double> {
        std::vector<int> ids;
        for (const ClientRecord* c : view.clients) ids.push_back(c->id);
        try {
            return detail::gap_if_defined(similarity_matrix(view.updates, ids), truth_of);
        } catch (const DegenerateVector&) {
            return std::nullopt;
        }
    };

    ExperimentOutputs out;
    json summary;
    summary["schema_version"] = kSchemaVersion;
    summary["mode"] = to_string(cfg.mode);
    summary["seed"] = cfg.seed;
    summary["n_clients"] = clients.size();

    ParameterTree tree;
    std::map<int, ParamVec> theta;
    std::map<int, int> leaf_of;
    json splits = json::array();
    json root_fl = nullptr;
    std::optional<PermutationKey> key;
    if (cfg.privacy) key.emplace(cfg.mask_seed(), theta0.dim());

    if (cfg.mode == Mode::fl_baseline) {
        const FLResult r = run_fl(cfg.model, theta0, view_of(clients), fl, run_rng.derive("node", 0), gap_observer);
        std::vector<int> ids;
        for (const auto& c : clients) ids.push_back(c.id);
        std::sort(ids.begin(), ids.end());
        tree.add_node(ids, -1);
        tree.node(0).theta_star = r.theta;
        tree.node(0).decision = r.converged ? "fl_converged" : "fl_round_budget";
        for (const auto& c : clients) {
            theta[c.id] = r.theta;
            leaf_of[c.id] = 0;
        }
        out.files["history.jsonl"] = to_jsonl(r.history);
        out.files["history.csv"] = history_csv(r.history, std::vector<int>(r.history.size(), 1));
        root_fl = json{{"mean_test_accuracy", detail::mean_accuracy(cfg.model, clients, theta)},
                       {"rounds", r.history.size()},
                       {"converged", r.converged}};
        summary["rounds"] = r.history.size();
    } else if (cfg.mode == Mode::cfl_recursive) {
        const CFLResult r = run_cfl_recursive(cfg.model, theta0, clients, fl, cfg.split, cfg.max_depth, run_rng, gap_observer);
        tree = r.tree;
        theta = r.theta;
        leaf_of = r.assignment;
        std::map<int, int> alive;
        for (const SplitEvent& e : r.events) {
            alive[e.node] = e.clusters_alive;
            json ev{{"node", e.node},
                    {"round", e.round},
                    {"decision", to_string(e.decision)},
                    {"server_norm", e.server_norm},
                    {"max_client_norm", e.max_client_norm}};
            ev["cross_max"] = e.bipartition ? json(e.bipartition->cross_max) : json(nullptr);
            std::optional<double> g;
            if (e.alpha) g = detail::gap_if_defined(*e.alpha, truth_of);
            ev["g_alpha"] = g ? json(*g) : json(nullptr);
            if (e.decision == SplitDecision::split && e.bipartition) {
                ev["c1"] = e.bipartition->c1;
                ev["c2"] = e.bipartition->c2;
                ev["correct"] = is_correct_bipartition(*e.bipartition, truth_of);
                out.files["similarity_node" + std::to_string(e.node) + ".csv"] = to_csv(*e.alpha);
            }
            splits.push_back(std::move(ev));
        }
        std::vector<int> n_clusters;
        for (const RoundRecord& rec : r.history) n_clusters.push_back(alive.at(rec.node));
        out.files["history.jsonl"] = to_jsonl(r.history);
        out.files["history.csv"] = history_csv(r.history, n_clusters);
        std::map<int, ParamVec> root_theta;
        for (const auto& c : clients) root_theta[c.id] = tree.node(0).theta_star;
        int root_rounds = 0;
        for (const RoundRecord& rec : r.history) root_rounds += rec.node == 0;
        root_fl = json{{"mean_test_accuracy", detail::mean_accuracy(cfg.model, clients, root_theta)},
                       {"rounds", root_rounds},
                       {"converged", r.history.at(static_cast<std::size_t>(root_rounds - 1)).server_update_norm < fl.eps1}};
        summary["rounds"] = r.history.size();
    } else {
        OnlineObserver obs = [&](const OnlineRoundView& view, std::vector<OnlineClusterRecord>& recs) {
            std::map<int, std::size_t> slot;
            for (std::size_t i = 0; i < view.clients.size(); ++i) slot[view.clients[i].id] = i;
            for (OnlineClusterRecord& rec : recs) {
                if (rec.clients.size() < 2) continue;
                std::vector<ParamVec> ups;
                for (int id : rec.clients) ups.push_back(view.uploads[slot.at(id)]);
                try {
                    rec.g_alpha = detail::gap_if_defined(similarity_matrix(ups, rec.clients), truth_of);
                } catch (const DegenerateVector&) {
                }
            }
        };
        const OnlineResult r = run_cfl_online(cfg.model, theta0, clients, fl, cfg.split, key, cfg.online_rounds, run_rng,
                                              cfg.max_depth, obs);
        tree = r.tree;
        theta = r.theta;
        leaf_of = r.assignment;
        for (const OnlineRound& round : r.history)
            for (const OnlineClusterRecord& rec : round.clusters)
                if (rec.split) {
                    const ClusterNode& n = tree.node(rec.node);
                    splits.push_back(json{{"node", rec.node},
                                          {"round", round.round},
                                          {"decision", "split"},
                                          {"server_norm", rec.server_norm},
                                          {"max_client_norm", rec.max_client_norm},
                                          {"cross_max", *rec.cross_max},
                                          {"g_alpha", rec.g_alpha ? json(*rec.g_alpha) : json(nullptr)},
                                          {"c1", tree.node(n.children[0]).clients},
                                          {"c2", tree.node(n.children[1]).clients}});
                }
        out.files["history.jsonl"] = to_jsonl(r.history);
        out.files["history.csv"] = history_csv(r.history);
        summary["rounds"] = r.history.size();
    }

    std::vector<int> leaf_labels;
    for (const auto& c : clients) leaf_labels.push_back(leaf_of.at(c.id));
    std::map<int, double> acc_of;
    for (const auto& c : clients) acc_of[c.id] = accuracy(cfg.model, theta.at(c.id), c.test);
    json per_client = json::array();
    for (const auto& c : clients) {
        per_client.push_back(json{{"id", c.id},
                                  {"truth", c.truth},
                                  {"leaf", leaf_of.at(c.id)},
                                  {"test_accuracy", acc_of.at(c.id)}});
    }
    json leaves = json::array();
    for (int leaf : tree.leaves()) {
        double s = 0.0;
        const auto& members = tree.node(leaf).clients;
        for (int id : members) s += acc_of.at(id);
        leaves.push_back(json{{"node", leaf}, {"clients", members}, {"mean_test_accuracy", s / static_cast<double>(members.size())}});
    }
    summary["n_leaves"] = tree.leaves().size();
    summary["leaves"] = leaves;
    summary["clients"] = per_client;
    summary["mean_test_accuracy"] = detail::mean_accuracy(cfg.model, clients, theta);
    summary["root_fl"] = root_fl;
    summary["splits"] = splits;
    summary["adjusted_rand_index"] = adjusted_rand_index(all_truth, leaf_labels);
    summary["max_depth"] = tree.max_depth();

    TreeDocument doc{cfg.model, cfg.fl, std::nullopt, cfg.seed, tree};
    if (key) doc.privacy_seed = key->seed();
    out.files["tree.json"] = to_json(doc).dump(1) + "\n";
    out.files["clients.csv"] = detail::clients_csv(cfg.model, clients, leaf_of, theta);
    out.files["summary.json"] = summary.dump(2) + "\n";
    out.summary = std::move(summary);
    return out;
}

inline void write_outputs(const ExperimentOutputs& out, const std::filesystem::path& dir) {
    for (const auto& [name, contents] : out.files) write_file_atomic(dir / name, contents);
}

/// Routing seed stream used for new clients of a tree written by run_experiment.
inline RandomStream routing_stream(std::uint64_t routing_seed) { return RandomStream(routing_seed, "route"); }

}  // namespace cfl
