#pragma once

// JSON forms of specs, populations, parameter trees and round histories, and
// a schema reader that reports violations with the offending line.

#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cfl/cfl.hpp"
#include "cfl/clustering.hpp"
#include "cfl/datagen.hpp"
#include "cfl/flcore.hpp"
#include "cfl/io.hpp"
#include "cfl/models.hpp"

namespace cfl {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Source positions

/// Line of every value in a JSON text, keyed by JSON pointer. Built by a
/// small scan of the raw text, since the parsed tree does not keep positions.
class SourceMap {
public:
    SourceMap() = default;
    explicit SourceMap(std::string_view text) : text_(text) { scan_value(""); }

    /// 1-based line of the value at `pointer`, or of the nearest enclosing value.
    int line_of(std::string pointer) const {
        for (;;) {
            if (auto it = lines_.find(pointer); it != lines_.end()) return it->second;
            if (pointer.empty()) return 1;
            pointer.erase(pointer.rfind('/'));
        }
    }

private:
    void skip_ws() {
        while (pos_ < text_.size()) {
            const char c = text_[pos_];
            if (c == '\n') ++line_;
            if (c != ' ' && c != '\t' && c != '\n' && c != '\r') break;
            ++pos_;
        }
    }

    std::string scan_string() {
        std::string out;
        ++pos_;  // opening quote
        while (pos_ < text_.size() && text_[pos_] != '"') {
            if (text_[pos_] == '\\' && pos_ + 1 < text_.size()) {
                out += text_[pos_ + 1];
                pos_ += 2;
                continue;
            }
            if (text_[pos_] == '\n') ++line_;
            out += text_[pos_++];
        }
        ++pos_;
        return out;
    }

    static std::string escape(const std::string& key) {
        std::string out;
        for (char c : key) {
            if (c == '~') out += "~0";
            else if (c == '/') out += "~1";
            else out += c;
        }
        return out;
    }

    void scan_value(const std::string& pointer) {
        skip_ws();
        if (pos_ >= text_.size()) return;
        lines_.emplace(pointer, line_);
        const char c = text_[pos_];
        if (c == '{') {
            ++pos_;
            for (;;) {
                skip_ws();
                if (pos_ >= text_.size() || text_[pos_] == '}') break;
                if (text_[pos_] == ',') {
                    ++pos_;
                    continue;
                }
                if (text_[pos_] != '"') return;
                const int key_line = line_;
                const std::string key = scan_string();
                skip_ws();
                if (pos_ < text_.size() && text_[pos_] == ':') ++pos_;
                const std::string child = pointer + "/" + escape(key);
                lines_.emplace(child, key_line);
                scan_value(child);
            }
            ++pos_;
        } else if (c == '[') {
            ++pos_;
            int index = 0;
            for (;;) {
                skip_ws();
                if (pos_ >= text_.size() || text_[pos_] == ']') break;
                if (text_[pos_] == ',') {
                    ++pos_;
                    continue;
                }
                scan_value(pointer + "/" + std::to_string(index++));
            }
            ++pos_;
        } else if (c == '"') {
            scan_string();
        } else {
            while (pos_ < text_.size() && std::string_view(",]} \t\r\n").find(text_[pos_]) == std::string_view::npos) ++pos_;
        }
    }

    std::string_view text_;
    std::size_t pos_ = 0;
    int line_ = 1;
    std::map<std::string, int> lines_;
};

/// A parsed document plus what is needed to point at its lines in errors.
struct JsonDocument {
    std::string name;
    json value;
    SourceMap lines;

    [[noreturn]] void fail(const std::string& pointer, const std::string& message) const {
        throw FormatError(name + ":" + std::to_string(lines.line_of(pointer)) + ": " + (pointer.empty() ? "/" : pointer) + ": " +
                          message);
    }
};

inline JsonDocument parse_json_document(const std::string& text, std::string name) {
    JsonDocument doc;
    doc.name = std::move(name);
    try {
        doc.value = json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
        const int line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
        throw FormatError(doc.name + ":" + std::to_string(line) + ": invalid JSON: " + e.what());
    }
    doc.lines = SourceMap(text);
    return doc;
}

/// Typed, schema-checked access to one JSON object of a document.
class ObjectReader {
public:
    ObjectReader(const JsonDocument& doc, const json& v, std::string pointer) : doc_(doc), v_(v), ptr_(std::move(pointer)) {
        if (!v_.is_object()) doc_.fail(ptr_, "expected an object");
    }

    const std::string& pointer() const noexcept { return ptr_; }
    const JsonDocument& document() const noexcept { return doc_; }
    [[noreturn]] void fail(const std::string& message) const { doc_.fail(ptr_, message); }
    [[noreturn]] void fail(const std::string& key, const std::string& message) const { doc_.fail(child(key), message); }

    bool has(const std::string& key) const { return v_.contains(key); }

    void allow_only(std::initializer_list<std::string_view> keys) const {
        const std::set<std::string_view> allowed(keys);
        for (const auto& [key, _] : v_.items())
            if (!allowed.count(key)) doc_.fail(child(key), "unknown field '" + key + "'");
    }

    const json& raw(const std::string& key) const {
        if (!v_.contains(key)) doc_.fail(ptr_, "missing required field '" + key + "'");
        return v_.at(key);
    }

    ObjectReader object(const std::string& key) const { return ObjectReader(doc_, raw(key), child(key)); }

    long long integer(const std::string& key, long long lo, long long hi) const {
        const json& x = raw(key);
        if (!x.is_number_integer()) doc_.fail(child(key), "expected an integer");
        const bool huge = x.is_number_unsigned() && x.get<unsigned long long>() > static_cast<unsigned long long>(hi);
        const long long v = huge ? hi : x.get<long long>();
        if (huge || v < lo || v > hi)
            doc_.fail(child(key), "value " + x.dump() + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        return v;
    }
    long long integer(const std::string& key, long long lo, long long hi, long long fallback) const {
        return has(key) ? integer(key, lo, hi) : fallback;
    }

    std::uint64_t seed(const std::string& key) const {
        const json& x = raw(key);
        if (!x.is_number_unsigned()) doc_.fail(child(key), "expected a nonnegative integer seed");
        return x.get<std::uint64_t>();
    }

    double number(const std::string& key) const {
        const json& x = raw(key);
        if (!x.is_number()) doc_.fail(child(key), "expected a number");
        return x.get<double>();
    }
    double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }

    bool boolean(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const json& x = raw(key);
        if (!x.is_boolean()) doc_.fail(child(key), "expected true or false");
        return x.get<bool>();
    }

    std::string string(const std::string& key) const {
        const json& x = raw(key);
        if (!x.is_string()) doc_.fail(child(key), "expected a string");
        return x.get<std::string>();
    }

    /// One of `names`; the returned index is the position in the list.
    std::size_t choice(const std::string& key, std::initializer_list<std::string_view> names) const {
        const std::string s = string(key);
        std::size_t i = 0;
        std::string listed;
        for (std::string_view n : names) {
            if (n == s) return i;
            listed += (i ? ", " : "") + std::string(n);
            ++i;
        }
        doc_.fail(child(key), "'" + s + "' is not one of {" + listed + "}");
    }

    std::vector<double> numbers(const std::string& key) const { return number_array(raw(key), child(key)); }

    std::vector<double> number_array(const json& x, const std::string& pointer) const {
        if (!x.is_array()) doc_.fail(pointer, "expected an array of numbers");
        std::vector<double> out;
        out.reserve(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!x[i].is_number()) doc_.fail(pointer + "/" + std::to_string(i), "expected a number");
            out.push_back(x[i].get<double>());
        }
        return out;
    }

    std::vector<int> integers(const std::string& key) const {
        const json& x = raw(key);
        if (!x.is_array()) doc_.fail(child(key), "expected an array of integers");
        std::vector<int> out;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!x[i].is_number_integer()) doc_.fail(child(key) + "/" + std::to_string(i), "expected an integer");
            out.push_back(x[i].get<int>());
        }
        return out;
    }

    std::string child(const std::string& key) const { return ptr_ + "/" + key; }

    /// Runs a domain validator and reports its complaint at this object.
    template <class Fn>
    void check(Fn&& fn) const {
        try {
            fn();
        } catch (const InvalidArgument& e) {
            fail(e.what());
        }
    }

private:
    const JsonDocument& doc_;
    const json& v_;
    std::string ptr_;
};

// ---------------------------------------------------------------------------
// Specs

inline json to_json(const ParamVec& v) { return json(v.values()); }

inline json to_json(const ModelSpec& s) {
    json j;
    j["kind"] = to_string(s.kind);
    if (s.kind == ModelKind::quadratic) {
        j["center"] = to_json(s.center);
        return j;
    }
    j["input_dim"] = s.input_dim;
    j["classes"] = s.classes;
    if (s.kind == ModelKind::mlp) {
        j["hidden"] = s.hidden;
        j["activation"] = to_string(s.activation);
    }
    return j;
}

/// `input_dim` and `classes` may be left out when `defaults` supplies them.
inline ModelSpec model_from_json(const ObjectReader& r, std::optional<std::pair<int, int>> defaults = std::nullopt) {
    r.allow_only({"kind", "input_dim", "classes", "hidden", "activation", "center"});
    ModelSpec s;
    s.kind = static_cast<ModelKind>(r.choice("kind", {"softmax", "mlp", "quadratic"}));
    if (s.kind == ModelKind::quadratic) {
        const std::vector<double> c = r.numbers("center");
        r.check([&] { s = ModelSpec::quadratic(ParamVec(c)); });
        return s;
    }
    if (defaults) {
        s.input_dim = static_cast<int>(r.integer("input_dim", 1, 1 << 20, defaults->first));
        s.classes = static_cast<int>(r.integer("classes", 2, 1 << 20, defaults->second));
        if (s.input_dim != defaults->first) r.fail("input_dim", "does not match the population's feature dimension");
        if (s.classes != defaults->second) r.fail("classes", "does not match the population's class count");
    } else {
        s.input_dim = static_cast<int>(r.integer("input_dim", 1, 1 << 20));
        s.classes = static_cast<int>(r.integer("classes", 2, 1 << 20));
    }
    if (s.kind == ModelKind::mlp) {
        s.hidden = static_cast<int>(r.integer("hidden", 1, 1 << 16));
        s.activation = r.has("activation") ? static_cast<Activation>(r.choice("activation", {"tanh", "relu"})) : Activation::tanh;
    }
    r.check([&] { s.validate(); });
    return s;
}

inline json to_json(const PopulationSpec& s) {
    return json{{"scenario", to_string(s.scenario)},
                {"m", s.m},
                {"k", s.k},
                {"n_per_client", s.n_per_client},
                {"n_test", s.n_test},
                {"p", s.p},
                {"classes", s.classes},
                {"seed", s.seed},
                {"sigma", s.sigma},
                {"separation", s.separation}};
}

inline PopulationSpec population_from_json(const ObjectReader& r, std::optional<std::uint64_t> default_seed = std::nullopt) {
    r.allow_only({"scenario", "m", "k", "n_per_client", "n_test", "p", "classes", "seed", "sigma", "separation"});
    PopulationSpec s;
    s.scenario = static_cast<Scenario>(
        r.choice("scenario", {"label_permutation", "congruent_split", "xor_clusters", "conditional_flip"}));
    s.m = static_cast<int>(r.integer("m", 1, 100000));
    s.k = static_cast<int>(r.integer("k", 1, 100000));
    s.n_per_client = static_cast<int>(r.integer("n_per_client", 1, 10000000));
    s.n_test = static_cast<int>(r.integer("n_test", 0, 10000000, 0));
    s.p = static_cast<int>(r.integer("p", 1, 100000));
    s.classes = static_cast<int>(r.integer("classes", 2, 100000));
    if (r.has("seed")) s.seed = r.seed("seed");
    else if (default_seed) s.seed = *default_seed;
    else r.fail("missing required field 'seed'");
    s.sigma = r.number("sigma", s.sigma);
    s.separation = r.number("separation", s.separation);
    r.check([&] { s.validate(); });
    return s;
}

inline json to_json(const FLConfig& c) {
    return json{{"eps1", c.eps1},
                {"max_rounds", c.max_rounds},
                {"local_n", c.local_n},
                {"lr", c.lr},
                {"batch_size", c.batch_size},
                {"weighting", to_string(c.weighting)},
                {"local_steps", to_string(c.local_steps)}};
}

inline FLConfig fl_from_json(const ObjectReader& r) {
    r.allow_only({"eps1", "max_rounds", "local_n", "lr", "batch_size", "weighting", "local_steps"});
    FLConfig c;
    c.eps1 = r.number("eps1", c.eps1);
    c.max_rounds = static_cast<int>(r.integer("max_rounds", 1, 100000000, c.max_rounds));
    c.local_n = static_cast<int>(r.integer("local_n", 1, 1000000, c.local_n));
    c.lr = r.number("lr", c.lr);
    c.batch_size = static_cast<int>(r.integer("batch_size", 1, 100000000, c.batch_size));
    if (r.has("weighting")) c.weighting = static_cast<Weighting>(r.choice("weighting", {"data_size", "uniform"}));
    if (r.has("local_steps")) c.local_steps = static_cast<LocalSteps>(r.choice("local_steps", {"epochs", "steps"}));
    r.check([&] { c.validate(); });
    return c;
}

inline json to_json(const SplitConfig& c) {
    return json{{"eps1", c.eps1}, {"eps2", c.eps2}, {"gamma_max", c.gamma_max}, {"similarity_source", to_string(c.similarity_source)}};
}

inline SplitConfig split_from_json(const ObjectReader& r, double default_eps1) {
    r.allow_only({"eps1", "eps2", "gamma_max", "similarity_source"});
    SplitConfig c;
    c.eps1 = r.number("eps1", default_eps1);
    c.eps2 = r.number("eps2", c.eps2);
    c.gamma_max = r.number("gamma_max", c.gamma_max);
    if (r.has("similarity_source"))
        c.similarity_source = static_cast<SimilaritySource>(r.choice("similarity_source", {"weight_update", "gradient"}));
    r.check([&] { c.validate(); });
    return c;
}

// ---------------------------------------------------------------------------
// Data

inline json to_json(const Batch& b) {
    json rows = json::array();
    for (std::size_t i = 0; i < b.rows; ++i) {
        const auto r = b.row(i);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    return json{{"features", rows}, {"labels", b.labels}};
}

inline Batch batch_from_json(const ObjectReader& r) {
    r.allow_only({"features", "labels"});
    Batch b;
    const json& rows = r.raw("features");
    if (!rows.is_array() || rows.empty()) r.fail("features", "expected a nonempty array of rows");
    b.rows = rows.size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::vector<double> row = r.number_array(rows[i], r.child("features") + "/" + std::to_string(i));
        if (i == 0) b.cols = row.size();
        if (row.size() != b.cols || row.empty()) r.document().fail(r.child("features") + "/" + std::to_string(i), "row length differs from the first row");
        b.features.insert(b.features.end(), row.begin(), row.end());
    }
    b.labels = r.integers("labels");
    r.check([&] { b.validate(0); });
    return b;
}

inline json to_json(const ClientRecord& c) {
    json j{{"id", c.id}, {"truth", c.truth}, {"train", to_json(c.train)}, {"test", to_json(c.test)}};
    if (c.objective) j["objective"] = to_json(*c.objective);
    return j;
}

inline ClientRecord client_from_json(const ObjectReader& r) {
    r.allow_only({"id", "truth", "train", "test", "objective"});
    ClientRecord c;
    c.id = static_cast<int>(r.integer("id", 0, 1 << 30));
    c.truth = static_cast<int>(r.integer("truth", 0, 1 << 30, 0));
    c.train = batch_from_json(r.object("train"));
    c.test = r.has("test") ? batch_from_json(r.object("test")) : c.train;
    if (r.has("objective")) c.objective = model_from_json(r.object("objective"));
    return c;
}

struct PopulationDocument {
    PopulationSpec spec;
    std::vector<ClientRecord> clients;
};

inline json to_json(const PopulationDocument& p) {
    json clients = json::array();
    for (const auto& c : p.clients) clients.push_back(to_json(c));
    return json{{"spec", to_json(p.spec)}, {"clients", clients}};
}

inline PopulationDocument population_document_from_json(const JsonDocument& doc) {
    ObjectReader r(doc, doc.value, "");
    r.allow_only({"spec", "clients"});
    PopulationDocument p;
    p.spec = population_from_json(r.object("spec"));
    const json& arr = r.raw("clients");
    if (!arr.is_array()) r.fail("clients", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) p.clients.push_back(client_from_json(ObjectReader(doc, arr[i], "/clients/" + std::to_string(i))));
    return p;
}

// ---------------------------------------------------------------------------
// Parameter tree

/// A tree plus what is needed to route new clients through it.
struct TreeDocument {
    ModelSpec model;
    FLConfig fl;
    std::optional<std::uint64_t> privacy_seed;
    std::uint64_t routing_seed = 0;
    ParameterTree tree;
};

inline json to_json(const ParameterTree& tree) {
    json nodes = json::array();
    for (const ClusterNode& n : tree.nodes()) {
        json j{{"id", n.id},
               {"parent", n.parent},
               {"depth", n.depth},
               {"clients", n.clients},
               {"theta_star", n.theta_star.empty() ? json::array() : to_json(n.theta_star)},
               {"children", n.children},
               {"decision", n.decision},
               {"cross_max", n.cross_max ? json(*n.cross_max) : json(nullptr)},
               {"split_round", n.split_round}};
        json caches = json::array();
        for (const EdgeCache& e : n.edge_cache) {
            json ups = json::array();
            for (const ParamVec& u : e.updates) ups.push_back(to_json(u));
            caches.push_back(json{{"client_ids", e.client_ids}, {"updates", ups}});
        }
        j["edge_cache"] = caches;
        nodes.push_back(std::move(j));
    }
    return json{{"root", tree.root()}, {"nodes", nodes}};
}

inline json to_json(const TreeDocument& t) {
    return json{{"format", "cfl-parameter-tree"},
                {"version", 1},
                {"model", to_json(t.model)},
                {"fl", to_json(t.fl)},
                {"privacy_seed", t.privacy_seed ? json(*t.privacy_seed) : json(nullptr)},
                {"routing_seed", t.routing_seed},
                {"tree", to_json(t.tree)}};
}

inline TreeDocument tree_document_from_json(const JsonDocument& doc) {
    ObjectReader r(doc, doc.value, "");
    r.allow_only({"format", "version", "model", "fl", "privacy_seed", "routing_seed", "tree"});
    if (r.string("format") != "cfl-parameter-tree") r.fail("format", "not a parameter tree document");
    r.integer("version", 1, 1);
    TreeDocument t;
    t.model = model_from_json(r.object("model"));
    t.fl = fl_from_json(r.object("fl"));
    if (!r.raw("privacy_seed").is_null()) t.privacy_seed = r.seed("privacy_seed");
    t.routing_seed = r.seed("routing_seed");

    const ObjectReader tr = r.object("tree");
    tr.allow_only({"root", "nodes"});
    tr.integer("root", 0, 0);
    const json& nodes = tr.raw("nodes");
    if (!nodes.is_array() || nodes.empty()) tr.fail("nodes", "expected a nonempty array");
    const std::size_t dim = t.model.param_dim();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const ObjectReader nr(doc, nodes[i], tr.child("nodes") + "/" + std::to_string(i));
        nr.allow_only({"id", "parent", "depth", "clients", "theta_star", "children", "decision", "cross_max", "split_round", "edge_cache"});
        if (nr.integer("id", 0, 1 << 30) != static_cast<long long>(i)) nr.fail("id", "node ids must equal their position");
        const int parent = static_cast<int>(nr.integer("parent", -1, static_cast<long long>(i) - 1));
        std::vector<int> clients = nr.integers("clients");
        if (parent < 0 && i != 0) nr.fail("parent", "only the root may lack a parent");
        t.tree.add_node(clients, parent);
        ClusterNode& n = t.tree.node(static_cast<int>(i));
        if (nr.integer("depth", 0, 1 << 20) != n.depth) nr.fail("depth", "inconsistent with the parent chain");
        const std::vector<double> theta = nr.numbers("theta_star");
        if (theta.size() != dim) nr.fail("theta_star", "has " + std::to_string(theta.size()) + " entries, model needs " + std::to_string(dim));
        nr.check([&] { n.theta_star = ParamVec(theta); });
        n.children = nr.integers("children");
        n.decision = nr.string("decision");
        if (nr.has("cross_max") && !nr.raw("cross_max").is_null()) n.cross_max = nr.number("cross_max");
        n.split_round = static_cast<int>(nr.integer("split_round", -1, 1LL << 40, -1));
        const json& caches = nr.raw("edge_cache");
        if (!caches.is_array()) nr.fail("edge_cache", "expected an array");
        for (std::size_t e = 0; e < caches.size(); ++e) {
            const ObjectReader cr(doc, caches[e], nr.child("edge_cache") + "/" + std::to_string(e));
            cr.allow_only({"client_ids", "updates"});
            EdgeCache cache;
            cache.client_ids = cr.integers("client_ids");
            const json& ups = cr.raw("updates");
            if (!ups.is_array()) cr.fail("updates", "expected an array");
            for (std::size_t u = 0; u < ups.size(); ++u) {
                const std::string ptr = cr.child("updates") + "/" + std::to_string(u);
                const std::vector<double> vals = cr.number_array(ups[u], ptr);
                if (vals.size() != dim) doc.fail(ptr, "update dimension does not match the model");
                try {
                    cache.updates.emplace_back(vals);
                } catch (const InvalidArgument& ex) {
                    doc.fail(ptr, ex.what());
                }
            }
            n.edge_cache.push_back(std::move(cache));
        }
    }
    for (const ClusterNode& n : t.tree.nodes())
        for (int c : n.children)
            if (c <= n.id || c >= static_cast<int>(t.tree.nodes().size()))
                doc.fail("/tree/nodes/" + std::to_string(n.id) + "/children", "child id out of range");
    try {
        t.tree.validate();
    } catch (const InvalidArgument& e) {
        doc.fail("/tree", e.what());
    }
    return t;
}

// ---------------------------------------------------------------------------
// Histories

inline json to_json(const RoundRecord& r) {
    json j{{"round", r.round},
           {"node", r.node},
           {"server_norm", r.server_update_norm},
           {"max_client_norm", r.max_client_norm},
           {"client_ids", r.client_ids},
           {"client_norms", r.client_norms}};
    if (!r.train_loss.empty()) j["train_loss"] = r.train_loss;
    if (!r.test_accuracy.empty()) j["test_accuracy"] = r.test_accuracy;
    j["g_alpha"] = r.g_alpha ? json(*r.g_alpha) : json(nullptr);
    return j;
}

inline std::string to_jsonl(const std::vector<RoundRecord>& history) {
    std::string out;
    for (const auto& r : history) out += to_json(r).dump() + "\n";
    return out;
}

inline std::string optional_field(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

inline std::string mean_or_empty(const std::vector<double>& xs) {
    if (xs.empty()) return "";
    double s = 0.0;
    for (double x : xs) s += x;
    return format_double(s / static_cast<double>(xs.size()));
}

/// Flat columns for plotting. Recursive FL runs one cluster at a time, so
/// n_clusters counts the clusters alive while the round's node trained.
inline std::string history_csv(const std::vector<RoundRecord>& history, const std::vector<int>& n_clusters) {
    std::ostringstream out;
    out << "round,server_norm,max_client_norm,n_clusters,mean_acc,g_alpha,node\n";
    for (std::size_t i = 0; i < history.size(); ++i) {
        const RoundRecord& r = history[i];
        out << r.round << ',' << format_double(r.server_update_norm) << ',' << format_double(r.max_client_norm) << ','
            << n_clusters[i] << ',' << mean_or_empty(r.test_accuracy) << ',' << optional_field(r.g_alpha) << ',' << r.node << '\n';
    }
    return out.str();
}

inline json to_json(const OnlineClusterRecord& c) {
    return json{{"node", c.node},
                {"clients", c.clients},
                {"server_norm", c.server_norm},
                {"max_client_norm", c.max_client_norm},
                {"evaluated", c.evaluated},
                {"cross_max", c.cross_max ? json(*c.cross_max) : json(nullptr)},
                {"split", c.split},
                {"g_alpha", c.g_alpha ? json(*c.g_alpha) : json(nullptr)}};
}

inline json to_json(const OnlineRound& r) {
    json clusters = json::array();
    for (const auto& c : r.clusters) clusters.push_back(to_json(c));
    return json{{"round", r.round},
                {"clusters", clusters},
                {"clusters_after", r.clusters_after},
                {"mean_test_accuracy", r.mean_test_accuracy ? json(*r.mean_test_accuracy) : json(nullptr)}};
}

inline std::string to_jsonl(const std::vector<OnlineRound>& history) {
    std::string out;
    for (const auto& r : history) out += to_json(r).dump() + "\n";
    return out;
}

/// One row per round: the largest server and client norms over the active
/// clusters, and the largest defined separation gap.
inline std::string history_csv(const std::vector<OnlineRound>& history) {
    std::ostringstream out;
    out << "round,server_norm,max_client_norm,n_clusters,mean_acc,g_alpha\n";
    for (const OnlineRound& r : history) {
        double sn = 0.0, mx = 0.0;
        std::optional<double> g;
        for (const auto& c : r.clusters) {
            sn = std::max(sn, c.server_norm);
            mx = std::max(mx, c.max_client_norm);
            if (c.g_alpha) g = g ? std::max(*g, *c.g_alpha) : *c.g_alpha;
        }
        out << r.round << ',' << format_double(sn) << ',' << format_double(mx) << ',' << r.clusters.size() << ','
            << optional_field(r.mean_test_accuracy) << ',' << optional_field(g) << '\n';
    }
    return out.str();
}

}  // namespace cfl
