// cfl: experiment runner and command-line access to the library.
//
//   cfl run CONFIG [--out DIR] [--threads N]
//   cfl bipartition SIMILARITY.csv
//   cfl verify {theorem,lemma1,lemma2,lemma3,phase} [params] [--out FILE]
//   cfl assign TREE.json CLIENT.json [--client ID] [--out FILE]
//
// Exit status: 0 success, 1 runtime failure or failed check, 2 malformed input.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cfl/experiment.hpp"
#include "cfl/theory.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kBadInput = 2;

/// "a..b" or a single value.
template <class T>
std::pair<T, T> parse_range(const std::string& text) {
    const auto dots = text.find("..");
    try {
        if (dots == std::string::npos) {
            const T v = static_cast<T>(std::stod(text));
            return {v, v};
        }
        return {static_cast<T>(std::stod(text.substr(0, dots))), static_cast<T>(std::stod(text.substr(dots + 2)))};
    } catch (const std::logic_error&) {
        throw cfl::InvalidArgument("bad range '" + text + "'");
    }
}

std::filesystem::path default_dir() {
    if (const char* env = std::getenv("CFL_OUTPUT_DIR"); env && *env) return env;
    return "cfl_out";
}

std::string ids(const std::vector<int>& v) {
    std::string out = "{";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out + "}";
}

struct VerifyArgs {
    std::string what;
    std::string k = "4";
    std::string gamma = "0.5";
    double gamma_step = 0.1;
    int trials = 1000;
    int d = 100;
    int m = 0;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_run(const std::string& config, const std::optional<std::string>& out, int threads) {
    const cfl::ExperimentConfig cfg = cfl::load_config(config);
    const cfl::ExperimentOutputs res = cfl::run_experiment(cfg, threads);
    const auto dir = cfl::resolve_output_dir(cfg, out);
    cfl::write_outputs(res, dir);
    // The population export is large, so it is only written here, next to the run.
    cfl::PopulationDocument pop{cfg.population, cfl::make_population(cfg.population)};
    cfl::write_file_atomic(dir / "population.json", cfl::to_json(pop).dump() + "\n");
    std::printf("mode %s: %d leaves, mean test accuracy %s, ARI %s -> %s\n", cfl::to_string(cfg.mode),
                res.summary["n_leaves"].get<int>(), cfl::format_double(res.summary["mean_test_accuracy"].get<double>()).c_str(),
                cfl::format_double(res.summary["adjusted_rand_index"].get<double>()).c_str(), dir.string().c_str());
    return kOk;
}

int cmd_bipartition(const std::string& path) {
    std::string text;
    try {
        text = cfl::read_file(path);
    } catch (const std::runtime_error& e) {
        throw cfl::FormatError(e.what());
    }
    const cfl::SimilarityMatrix alpha = cfl::similarity_from_csv(text);
    if (alpha.size() < 2) throw cfl::FormatError(path + ": a bipartition needs at least 2 clients");
    const cfl::Bipartition bp = cfl::optimal_bipartition(alpha);
    std::printf("%s | %s  cross_max=%s\n", ids(bp.c1).c_str(), ids(bp.c2).c_str(), cfl::format_double(bp.cross_max).c_str());
    return kOk;
}

void write_report(const std::string& out, const std::string& fallback_name, const std::string& contents) {
    const std::filesystem::path path = out.empty() ? default_dir() / fallback_name : std::filesystem::path(out);
    cfl::write_file_atomic(path, contents);
    std::printf("report: %s\n", path.string().c_str());
}

cfl::json lemma_json(const std::string& name, const cfl::LemmaReport& r) {
    return cfl::json{{"check", name}, {"trials", r.trials}, {"violations", r.violations}, {"max_excess", r.max_excess}};
}

int cmd_verify(const VerifyArgs& a, int threads) {
    if (a.trials < 1) throw cfl::InvalidArgument("--trials must be >= 1");
    if (a.what == "theorem") {
        const auto [k, k_hi] = parse_range<int>(a.k);
        const auto [g, g_hi] = parse_range<double>(a.gamma);
        if (k != k_hi || g != g_hi) throw cfl::InvalidArgument("theorem takes a single --k and --gamma");
        if (k < 2 || !(g >= 0.0)) throw cfl::InvalidArgument("theorem needs k >= 2 and gamma >= 0");
        const int m = a.m > 0 ? a.m : 3 * k;
        const cfl::TheoremReport r = cfl::verify_theorem(a.trials, k, m, a.d, g, a.seed, threads);
        cfl::json j{{"check", "theorem"},
                    {"k", k},
                    {"m", m},
                    {"d", a.d},
                    {"gamma", g},
                    {"trials", r.trials},
                    {"lower_bound_violations", r.lower_bound_violations},
                    {"upper_bound_violations", r.upper_bound_violations},
                    {"upper_applicable_trials", r.upper_applicable_trials},
                    {"correct_clustering_rate", r.correct_clustering_rate()}};
        std::printf("theorem k=%d m=%d gamma=%s: lower violations %d, upper violations %d (%d applicable), correct rate %s\n", k, m,
                    cfl::format_double(g).c_str(), r.lower_bound_violations, r.upper_bound_violations, r.upper_applicable_trials,
                    cfl::format_double(r.correct_clustering_rate()).c_str());
        write_report(a.out, "theorem.json", j.dump(2) + "\n");
        return r.lower_bound_violations + r.upper_bound_violations == 0 ? kOk : kFailure;
    }
    if (a.what == "lemma1" || a.what == "lemma2" || a.what == "lemma3") {
        cfl::LemmaReport r;
        if (a.what == "lemma1") r = cfl::verify_lemma1(a.trials, a.d, a.seed);
        else if (a.what == "lemma2") r = cfl::verify_lemma2(a.trials, a.d, a.seed);
        else {
            const auto [k_lo, k_hi] = parse_range<int>(a.k);
            if (k_lo < 2 || k_hi < k_lo) throw cfl::InvalidArgument("lemma3 needs 2 <= k");
            for (int k = k_lo; k <= k_hi; ++k) {
                const cfl::LemmaReport part = cfl::verify_lemma3(a.trials, k, a.d, a.seed);
                r.trials += part.trials;
                r.violations += part.violations;
                r.max_excess = std::max(r.max_excess, part.max_excess);
            }
        }
        std::printf("%s: %d trials, %d violations, max excess %s\n", a.what.c_str(), r.trials, r.violations,
                    cfl::format_double(r.max_excess).c_str());
        write_report(a.out, a.what + ".json", lemma_json(a.what, r).dump(2) + "\n");
        return r.violations == 0 ? kOk : kFailure;
    }
    if (a.what == "phase") {
        const auto [k_lo, k_hi] = parse_range<int>(a.k);
        const auto [g_lo, g_hi] = parse_range<double>(a.gamma);
        if (k_lo < 2 || k_hi < k_lo || g_lo < 0.0 || g_hi < g_lo || !(a.gamma_step > 0.0))
            throw cfl::InvalidArgument("phase needs 2 <= k_lo <= k_hi, 0 <= gamma_lo <= gamma_hi and a positive step");
        std::vector<int> ks;
        for (int k = k_lo; k <= k_hi; ++k) ks.push_back(k);
        std::vector<double> gs;
        // Integer stepping keeps grid values free of accumulated rounding.
        for (int i = 0; g_lo + i * a.gamma_step <= g_hi + 1e-9; ++i) gs.push_back(g_lo + i * a.gamma_step);
        const auto cells = cfl::phase_diagram(ks, gs, a.d, a.trials, a.seed, threads);
        int bad = 0;
        for (const auto& c : cells)
            if (c.guaranteed && c.correct != c.trials) ++bad;
        std::printf("phase: %zu cells, %d guaranteed cells below probability 1\n", cells.size(), bad);
        write_report(a.out, "phase.csv", cfl::phase_to_csv(cells));
        return bad == 0 ? kOk : kFailure;
    }
    throw cfl::InvalidArgument("unknown check '" + a.what + "'");
}

int cmd_assign(const std::string& tree_path, const std::string& client_path, std::optional<int> client_id, const std::string& out) {
    auto load = [](const std::string& path) {
        try {
            return cfl::parse_json_document(cfl::read_file(path), path);
        } catch (const std::runtime_error& e) {
            if (dynamic_cast<const cfl::FormatError*>(&e)) throw;
            throw cfl::FormatError(e.what());
        }
    };
    const cfl::JsonDocument tree_doc = load(tree_path);
    const cfl::TreeDocument t = cfl::tree_document_from_json(tree_doc);
    const cfl::JsonDocument client_doc = load(client_path);

    cfl::ClientRecord client;
    if (client_doc.value.is_object() && client_doc.value.contains("clients")) {
        const cfl::PopulationDocument pop = cfl::population_document_from_json(client_doc);
        if (!client_id) throw cfl::FormatError(client_path + ": population file needs --client ID");
        const auto it = std::find_if(pop.clients.begin(), pop.clients.end(), [&](const cfl::ClientRecord& c) { return c.id == *client_id; });
        if (it == pop.clients.end()) throw cfl::FormatError(client_path + ": no client with id " + std::to_string(*client_id));
        client = *it;
    } else {
        client = cfl::client_from_json(cfl::ObjectReader(client_doc, client_doc.value, ""));
    }
    const cfl::ModelSpec& spec = cfl::local_spec(t.model, client);
    if (spec.is_classifier() && client.train.cols != static_cast<std::size_t>(spec.input_dim))
        throw cfl::InvalidArgument("client features have dimension " + std::to_string(client.train.cols) + ", the tree's model expects " +
                                   std::to_string(spec.input_dim));
    if (spec.param_dim() != t.tree.node(0).theta_star.dim())
        throw cfl::InvalidArgument("client objective dimension does not match the tree's parameters");

    std::optional<cfl::PermutationKey> key;
    if (t.privacy_seed) key.emplace(*t.privacy_seed, t.model.param_dim());
    const cfl::Assignment a = cfl::assign_client(t.tree, client, t.model, t.fl, cfl::routing_stream(t.routing_seed), key);
    const std::filesystem::path path = out.empty() ? default_dir() / ("leaf_" + std::to_string(a.leaf) + "_theta.json") : std::filesystem::path(out);
    cfl::write_file_atomic(path, cfl::json{{"leaf", a.leaf}, {"path", a.path}, {"theta", a.theta.values()}}.dump() + "\n");
    std::printf("leaf %d path %s theta %s\n", a.leaf, ids(a.path).c_str(), path.string().c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Clustered Federated Learning experiments and checks"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "Worker threads for client updates and trials")->check(CLI::Range(1, 256));

    std::string config;
    std::optional<std::string> run_out;
    auto* run = app.add_subcommand("run", "Run an experiment config");
    run->add_option("config", config, "Experiment JSON")->required();
    run->add_option("--out", run_out, "Output directory (default: config, then $CFL_OUTPUT_DIR, then ./cfl_out)");

    std::string csv;
    auto* bip = app.add_subcommand("bipartition", "Optimal bipartition of a similarity matrix CSV");
    bip->add_option("csv", csv, "Similarity CSV: id header, then m rows")->required();

    VerifyArgs va;
    auto* ver = app.add_subcommand("verify", "Monte-Carlo checks of the separation bounds");
    ver->add_option("what", va.what, "theorem | lemma1 | lemma2 | lemma3 | phase")
        ->required()
        ->check(CLI::IsMember({"theorem", "lemma1", "lemma2", "lemma3", "phase"}));
    ver->add_option("--k", va.k, "Distributions: value or range a..b");
    ver->add_option("--gamma", va.gamma, "Noise ratio: value or range a..b");
    ver->add_option("--gamma-step", va.gamma_step, "Grid step for phase");
    ver->add_option("--trials", va.trials, "Trials (per cell for phase)");
    ver->add_option("--d", va.d, "Vector dimension")->check(CLI::Range(2, 1 << 20));
    ver->add_option("--m", va.m, "Clients for theorem (default 3k)");
    ver->add_option("--seed", va.seed, "Seed");
    ver->add_option("--out", va.out, "Report file");

    std::string tree_path, client_path, assign_out;
    std::optional<int> client_id;
    auto* asg = app.add_subcommand("assign", "Route a new client through a parameter tree");
    asg->add_option("tree", tree_path, "tree.json written by run")->required();
    asg->add_option("client_data", client_path, "Client JSON, or a population JSON with --client")->required();
    asg->add_option("--client", client_id, "Client id inside a population file");
    asg->add_option("--out", assign_out, "Where to write the leaf parameters");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kBadInput;
    }

    try {
        if (*run) {
            try {
                return cmd_run(config, run_out, threads);
            } catch (const cfl::InvalidArgument& e) {
                // The config validated, so anything rejected now is a failure of the run itself.
                std::cerr << "runtime failure: " << e.what() << '\n';
                return kFailure;
            }
        }
        if (*bip) return cmd_bipartition(csv);
        if (*ver) return cmd_verify(va, threads);
        if (*asg) return cmd_assign(tree_path, client_path, client_id, assign_out);
    } catch (const cfl::FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadInput;
    } catch (const cfl::InvalidArgument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadInput;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << '\n';
        return kFailure;
    }
    return kFailure;
}
