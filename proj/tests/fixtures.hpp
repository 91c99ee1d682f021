#pragma once

#include <string>

#include "cfl/cfl.hpp"
#include "cfl/experiment.hpp"

namespace fixture {

inline std::string source_path(const std::string& rel) { return std::string(CFL_SOURCE_DIR) + "/" + rel; }

inline cfl::ExperimentConfig load(const std::string& rel) { return cfl::load_config(source_path(rel)); }

// The bundled four-permutation experiment, optionally with a different seed.
inline cfl::ExperimentConfig label_perm_k4(std::uint64_t seed = 0) {
    cfl::ExperimentConfig cfg = load("configs/label_perm_k4.json");
    cfg.seed = seed;
    cfg.population.seed = seed;
    return cfg;
}

struct Setup {
    cfl::ModelSpec model;
    std::vector<cfl::ClientRecord> clients;
    cfl::ParamVec theta0;
};

inline Setup materialize(const cfl::ExperimentConfig& cfg) {
    Setup s{cfg.model, cfl::make_population(cfg.population), {}};
    cfl::RandomStream init(cfg.seed, "init");
    s.theta0 = cfl::init_params(s.model, init);
    return s;
}

inline std::vector<int> labels_of(const std::map<int, int>& m) {
    std::vector<int> out;
    for (auto [id, v] : m) out.push_back(v);
    return out;
}

inline std::vector<int> truths_of(const std::vector<cfl::ClientRecord>& clients) {
    std::vector<int> out;
    for (const auto& c : clients) out.push_back(c.truth);
    return out;
}

}  // namespace fixture
