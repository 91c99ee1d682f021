#include <gtest/gtest.h>

#include "cfl/serialize.hpp"

using namespace cfl;

namespace {

// Message of the FormatError thrown by `fn`, or "" if none.
template <class F>
std::string format_error(F fn) {
    try {
        fn();
    } catch (const FormatError& e) {
        return e.what();
    }
    return "";
}

ParameterTree small_tree() {
    ParameterTree t;
    t.add_node({0, 1, 2}, -1);
    const int a = t.add_node({0}, 0), b = t.add_node({1, 2}, 0);
    t.node(0).theta_star = ParamVec{0.1, 0.2, 0.3, 0.4};
    t.node(0).decision = "split";
    t.node(0).cross_max = -0.75;
    t.node(0).split_round = 12;
    t.node(a).theta_star = ParamVec{1, 2, 3, 4};
    t.node(b).theta_star = ParamVec{-1, 0.1 + 0.2, 1e-300, 4};
    t.attach_children(0, a, b, EdgeCache{{0}, {ParamVec{1, 0, 0, 0}}}, EdgeCache{{2, 1}, {ParamVec{0, 1, 0, 0}, ParamVec{0, 0, 1, 0}}});
    return t;
}

TreeDocument small_document() {
    TreeDocument d;
    d.model = ModelSpec::softmax(1, 2);
    d.fl.lr = 0.25;
    d.routing_seed = 77;
    d.tree = small_tree();
    return d;
}

}  // namespace

TEST(JsonDocument, ParseErrorsCarryLineNumbers) {
    const std::string msg = format_error([] { parse_json_document("{\n  \"a\": 1,\n  \"b\": ]\n}", "cfg.json"); });
    EXPECT_EQ(msg.rfind("cfg.json:3:", 0), 0u) << msg;
}

TEST(JsonDocument, SchemaErrorsPointAtTheField) {
    const std::string text = "{\n  \"spec\": {\n    \"scenario\": \"label_permutation\",\n    \"m\": -4\n  },\n  \"clients\": []\n}\n";
    const std::string msg = format_error([&] { population_document_from_json(parse_json_document(text, "pop.json")); });
    EXPECT_EQ(msg.rfind("pop.json:4: /spec/m:", 0), 0u) << msg;

    const std::string unknown = "{\n  \"spec\": {\"scenario\": \"label_permutation\"},\n  \"clients\": [],\n  \"extra\": 1\n}";
    const std::string m2 = format_error([&] { population_document_from_json(parse_json_document(unknown, "pop.json")); });
    EXPECT_EQ(m2.rfind("pop.json:4: /extra:", 0), 0u) << m2;

    const std::string bad_enum = "{\"spec\": {\n\"scenario\": \"spiral\"}, \"clients\": []}";
    const std::string m3 = format_error([&] { population_document_from_json(parse_json_document(bad_enum, "p")); });
    EXPECT_NE(m3.find("p:2: /spec/scenario"), std::string::npos) << m3;
}

TEST(ModelJson, RoundTripAllKinds) {
    for (const ModelSpec& s : {ModelSpec::softmax(3, 5), ModelSpec::mlp(2, 7, 4, Activation::relu), ModelSpec::quadratic(ParamVec{1, -2})}) {
        const JsonDocument doc = parse_json_document(to_json(s).dump(), "m");
        const ModelSpec back = model_from_json(ObjectReader(doc, doc.value, ""));
        EXPECT_EQ(back.kind, s.kind);
        EXPECT_EQ(back.input_dim, s.input_dim);
        EXPECT_EQ(back.classes, s.classes);
        EXPECT_EQ(back.hidden, s.hidden);
        EXPECT_EQ(back.activation, s.activation);
        EXPECT_EQ(back.center, s.center);
    }
}

TEST(PopulationJson, RoundTripIsBitExact) {
    PopulationSpec spec;
    spec.k = 2;
    spec.m = 4;
    spec.n_per_client = 7;
    spec.seed = 5;
    const PopulationDocument p{spec, make_population(spec)};
    const std::string text = to_json(p).dump(1);
    const PopulationDocument back = population_document_from_json(parse_json_document(text, "p"));
    ASSERT_EQ(back.clients.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(back.clients[i].id, p.clients[i].id);
        EXPECT_EQ(back.clients[i].truth, p.clients[i].truth);
        EXPECT_EQ(back.clients[i].train.features, p.clients[i].train.features);
        EXPECT_EQ(back.clients[i].test.labels, p.clients[i].test.labels);
    }
    EXPECT_EQ(to_json(back).dump(1), text);
}

TEST(TreeJson, RoundTrip) {
    const TreeDocument d = small_document();
    const std::string text = to_json(d).dump(1);
    const TreeDocument back = tree_document_from_json(parse_json_document(text, "t"));
    EXPECT_EQ(back.tree.nodes().size(), 3u);
    EXPECT_EQ(back.tree.node(2).theta_star, d.tree.node(2).theta_star);
    EXPECT_EQ(back.tree.node(0).edge_cache[1].client_ids, (std::vector<int>{2, 1}));
    EXPECT_EQ(*back.tree.node(0).cross_max, -0.75);
    EXPECT_EQ(back.routing_seed, 77u);
    EXPECT_EQ(back.fl.lr, 0.25);
    EXPECT_EQ(to_json(back).dump(1), text);
}

TEST(TreeJson, CorruptionIsAFormatError) {
    const json good = to_json(small_document());
    auto expect_bad = [](json j, const std::string& where) {
        const std::string msg = format_error([&] { tree_document_from_json(parse_json_document(j.dump(1), "t")); });
        EXPECT_NE(msg.find(where), std::string::npos) << "got: " << msg;
    };
    json j = good;
    j["tree"]["nodes"][1]["theta_star"] = json::array({1, 2});
    expect_bad(j, "/tree/nodes/1/theta_star");
    j = good;
    j["tree"]["nodes"][0]["edge_cache"][1]["updates"].erase(0);
    expect_bad(j, "/tree");
    j = good;
    j["tree"]["nodes"][2]["clients"] = json::array({1, 5});
    expect_bad(j, "/tree");
    j = good;
    j["format"] = "something-else";
    expect_bad(j, "/format");
    j = good;
    j["tree"]["nodes"][0]["children"] = json::array({1, 9});
    expect_bad(j, "children");
    j = good;
    j["tree"]["nodes"][0]["edge_cache"][0]["updates"][0][2] = "x";
    expect_bad(j, "/tree/nodes/0/edge_cache/0/updates/0");
    EXPECT_FALSE(format_error([] { parse_json_document("{\"format\": \"cfl-parameter-tree\", ", "t"); }).empty());
}

TEST(History, JsonLinesAndCsv) {
    RoundRecord r;
    r.round = 3;
    r.node = 2;
    r.server_update_norm = 0.5;
    r.max_client_norm = 1.25;
    r.client_ids = {0, 1};
    r.client_norms = {1.25, 0.75};
    r.test_accuracy = {1.0, 0.5};
    r.g_alpha = 0.1;
    RoundRecord q = r;
    q.round = 4;
    q.test_accuracy.clear();
    q.g_alpha.reset();
    const std::string jl = to_jsonl({r, q});
    EXPECT_EQ(std::count(jl.begin(), jl.end(), '\n'), 2);
    const json first = json::parse(jl.substr(0, jl.find('\n')));
    EXPECT_EQ(first["server_norm"], 0.5);
    EXPECT_EQ(first["g_alpha"], 0.1);
    const std::string csv = history_csv({r, q}, {1, 3});
    EXPECT_EQ(csv, "round,server_norm,max_client_norm,n_clusters,mean_acc,g_alpha,node\n"
                   "3,0.5,1.25,1,0.75,0.1,2\n"
                   "4,0.5,1.25,3,,,2\n");
}
