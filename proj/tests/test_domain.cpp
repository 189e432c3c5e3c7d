#include <doctest.h>

#include <set>

#include "mtseg/domain.hpp"
#include "test_support.hpp"

using namespace mtseg;

TEST_CASE("grid index is canonical x, y, z with z fastest") {
    Grid3<int> g(Shape3{2, 3, 4});
    CHECK(g.size() == 24);
    CHECK(g.index(0, 0, 1) == 1);
    CHECK(g.index(0, 1, 0) == 4);
    CHECK(g.index(1, 0, 0) == 12);
    g(1, 2, 3) = 7;
    CHECK(g[23] == 7);
    CHECK(g.contains(1, 2, 3));
    CHECK_FALSE(g.contains(2, 0, 0));
    CHECK_FALSE(g.contains(0, -1, 0));
    CHECK_THROWS_AS(Grid3<int>(Shape3{-1, 2, 2}), ShapeError);
}

TEST_CASE("label map validation") {
    LabelMap y(Shape3{2, 2, 2}, 3);
    CHECK_NOTHROW(y.validate());
    y.labels(1, 1, 1) = 3;
    CHECK_THROWS_AS(y.validate(), InvalidLabelError);
    LabelMap bad(Shape3{1, 1, 1}, 1);
    CHECK_THROWS_AS(bad.validate(), InvalidLabelError);
}

TEST_CASE("volume mask must match the voxel grid") {
    Volume v{Grid3<float>(Shape3{2, 2, 2}, 1.0f), Mask(Shape3{2, 2, 2}, 1)};
    CHECK_NOTHROW(v.validate());
    v.mask = Mask(Shape3{2, 2, 1}, 1);
    CHECK_THROWS_AS(v.validate(), ShapeError);
}

TEST_CASE("probability maps") {
    std::mt19937_64 rng(5);
    ProbabilityMap p = testing::random_probabilities(3, Shape3{3, 2, 2}, rng);
    CHECK(validate_probability_map(p));
    p.at(0, 0) += 1e-3;
    CHECK_FALSE(validate_probability_map(p));
    p.at(0, 0) = -0.1;
    CHECK_FALSE(validate_probability_map(p));
}

TEST_CASE("one_hot and argmax are inverse on hard labels") {
    std::mt19937_64 rng(11);
    const LabelMap y = testing::random_labels(4, Shape3{3, 3, 3}, rng);
    const ProbabilityMap p = one_hot(y);
    CHECK(validate_probability_map(p));
    CHECK(argmax(p) == y);
}

TEST_CASE("argmax ties resolve to the lowest class") {
    ProbabilityMap p(3, Shape3{1, 1, 2}, 0.0);
    p.at(0, 0) = 0.25;
    p.at(1, 0) = 0.5;
    p.at(2, 0) = 0.25;
    p.at(0, 1) = 0.2;
    p.at(1, 1) = 0.4;
    p.at(2, 1) = 0.4;
    const LabelMap y = argmax(p);
    CHECK(y.labels[0] == 1);
    CHECK(y.labels[1] == 1);
}

TEST_CASE("weights: schema, lookup and zeros_like") {
    ModelWeights w;
    w.entries.push_back({"a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}});
    w.entries.push_back({"a.bias", {2}, {0.5f, -0.5f}});
    CHECK(w.parameter_count() == 8);
    CHECK(w.all_finite());
    CHECK(w.find("a.bias").values[1] == -0.5f);
    CHECK_THROWS(w.find("missing"));

    const Gradients g = w.zeros_like<double>();
    CHECK(g.schema_id() == w.schema_id());
    CHECK(g.parameter_count() == 8);
    CHECK_NOTHROW(require_same_schema(w, g));

    ModelWeights renamed = w;
    renamed.entries[1].name = "b.bias";
    CHECK(renamed.schema_id() != w.schema_id());
    CHECK_THROWS_AS(require_same_schema(w, renamed), SchemaError);

    ModelWeights reshaped = w;
    reshaped.entries[0].dims = {3, 2};
    CHECK(reshaped.schema_id() != w.schema_id());

    w.entries[0].values[2] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(w.all_finite());
}

TEST_CASE("derived streams are reproducible and label-separated") {
    Rng a = derive_stream(42, "noise-student", 3);
    Rng b = derive_stream(42, "noise-student", 3);
    CHECK(a() == b());
    std::set<std::uint64_t> firsts;
    for (const char* label : {"noise-student", "noise-teacher"}) {
        for (std::uint64_t idx : {0, 1, 2}) {
            for (std::uint64_t seed : {1, 2}) firsts.insert(derive_stream(seed, label, idx)());
        }
    }
    CHECK(firsts.size() == 12);
}

TEST_CASE("fnv1a matches published test vectors") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
}
