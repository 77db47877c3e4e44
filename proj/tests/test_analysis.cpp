#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "paramdelta/analysis.hpp"
#include "paramdelta/combine.hpp"
#include "paramdelta/generator.hpp"
#include "support.hpp"

using namespace paramdelta;
using namespace testsupport;

namespace {

const ClassificationRules& default_rules() {
    static ClassificationRules rules = ClassificationRules::defaults();
    return rules;
}

Checkpoint scaled_copy(const Checkpoint& src, double factor, const std::filesystem::path& out) {
    CombineSpec spec;
    spec.terms = {{src, factor}};
    spec.out_dtype_policy = OutDTypePolicy::ForceF32;
    return linear_combine(spec, out);
}

} // namespace

TEST_CASE("default rules classify decoder tensor names") {
    auto classify = [&](const std::string& name) { return default_rules().classify(name); };

    CHECK(classify("model.layers.3.self_attn.q_proj.weight") ==
          std::make_pair(LayerClass::Attention, std::optional<int>(3)));
    CHECK(classify("model.layers.0.mlp.down_proj.weight") ==
          std::make_pair(LayerClass::FeedForward, std::optional<int>(0)));
    CHECK(classify("model.layers.12.post_attention_layernorm.weight") ==
          std::make_pair(LayerClass::Norm, std::optional<int>(12)));
    CHECK(classify("model.embed_tokens.weight") ==
          std::make_pair(LayerClass::Embedding, std::optional<int>()));
    CHECK(classify("lm_head.weight") == std::make_pair(LayerClass::Output, std::optional<int>()));
    CHECK(classify("model.norm.weight") == std::make_pair(LayerClass::Norm, std::optional<int>()));
    CHECK(classify("foo.bar") == std::make_pair(LayerClass::Other, std::optional<int>()));
}

TEST_CASE("rules files override the defaults, first match wins") {
    ScratchDir dir("an_rules");
    write_file(dir / "rules.json",
               [] {
                   std::string text = R"([
                       {"pattern": "special", "class": "Output"},
                       {"pattern": ".*", "class": "Embedding"}
                   ])";
                   return std::vector<uint8_t>(text.begin(), text.end());
               }());
    ClassificationRules rules = ClassificationRules::from_file(dir / "rules.json");
    CHECK(rules.classify("very.special.tensor").first == LayerClass::Output);
    CHECK(rules.classify("anything.else").first == LayerClass::Embedding);
}

TEST_CASE("cosine of a delta with itself is 1, with its negation -1") {
    ScratchDir dir("an_self");
    GenSpec spec;
    spec.seed = 41;
    spec.layers = 1;
    spec.hidden_dim = 16;
    spec.ffn_dim = 16;
    spec.vocab_dim = 16;
    Checkpoint d = generate_checkpoint(spec, dir / "d");
    Checkpoint neg = scaled_copy(d, -1.0, dir / "neg");

    AnalysisReport self_map = cosine_map(d, d, default_rules());
    for (const auto& rec : self_map.records) {
        REQUIRE(rec.value.has_value());
        CHECK(std::fabs(*rec.value - 1.0) < 1e-6);
    }
    AnalysisReport anti_map = cosine_map(d, neg, default_rules());
    for (const auto& rec : anti_map.records) {
        REQUIRE(rec.value.has_value());
        CHECK(std::fabs(*rec.value + 1.0) < 1e-6);
    }
}

TEST_CASE("cosine scale invariance: cosine(s*a, t*b) == sign(s*t) * cosine(a, b)") {
    ScratchDir dir("an_scale");
    GenSpec spec;
    spec.seed = 43;
    spec.layers = 1;
    spec.hidden_dim = 32;
    spec.ffn_dim = 32;
    spec.vocab_dim = 32;
    Checkpoint a = generate_checkpoint(spec, dir / "a");
    spec.seed = 44;
    Checkpoint b = generate_checkpoint(spec, dir / "b");

    AnalysisReport baseline = cosine_map(a, b, default_rules());

    Checkpoint a_scaled = scaled_copy(a, 2.5, dir / "a_scaled");
    Checkpoint b_scaled = scaled_copy(b, -0.375, dir / "b_scaled");
    AnalysisReport scaled = cosine_map(a_scaled, b_scaled, default_rules());

    REQUIRE(baseline.records.size() == scaled.records.size());
    for (size_t i = 0; i < baseline.records.size(); ++i) {
        REQUIRE(baseline.records[i].value.has_value());
        REQUIRE(scaled.records[i].value.has_value());
        // s*t < 0 flips the sign, magnitude is unchanged
        CHECK(std::fabs(*scaled.records[i].value + *baseline.records[i].value) < 1e-6);
    }
}

TEST_CASE("cosine symmetry: swapping the inputs changes nothing beyond 1e-12") {
    ScratchDir dir("an_sym");
    GenSpec spec;
    spec.seed = 45;
    spec.layers = 1;
    spec.hidden_dim = 24;
    spec.ffn_dim = 24;
    spec.vocab_dim = 24;
    Checkpoint a = generate_checkpoint(spec, dir / "a");
    spec.seed = 46;
    Checkpoint b = generate_checkpoint(spec, dir / "b");

    AnalysisReport ab = cosine_map(a, b, default_rules());
    AnalysisReport ba = cosine_map(b, a, default_rules());
    REQUIRE(ab.records.size() == ba.records.size());
    for (size_t i = 0; i < ab.records.size(); ++i) {
        REQUIRE(ab.records[i].value.has_value());
        CHECK(std::fabs(*ab.records[i].value - *ba.records[i].value) <= 1e-12);
        CHECK(ab.records[i].norm_a == ba.records[i].norm_b);
    }
}

TEST_CASE("zero-norm tensors yield Undefined, never a number") {
    ScratchDir dir("an_zero");
    auto zero = make_checkpoint(dir / "zero", {{"w", {8}, std::vector<float>(8, 0.0f)}});
    auto ones = make_checkpoint(dir / "ones", {{"w", {8}, std::vector<float>(8, 1.0f)}});
    AnalysisReport report = cosine_map(zero, ones, default_rules());
    REQUIRE(report.records.size() == 1);
    CHECK_FALSE(report.records[0].value.has_value());
    CHECK(report.records[0].norm_a == 0.0);
    // undefined records are excluded from histograms
    CHECK(report.histograms.count(report.records[0].cls) == 0);
    CHECK(report.summary(report.records[0].cls).count == 1);
    CHECK(report.summary(report.records[0].cls).defined == 0);
}

TEST_CASE("independently seeded random deltas are near-orthogonal at dim 4096") {
    ScratchDir dir("an_ortho");
    GenSpec spec;
    spec.seed = 60;
    spec.layers = 2;
    spec.hidden_dim = 64;
    spec.ffn_dim = 128;
    spec.vocab_dim = 64;
    spec.include_norms = false; // norm vectors are below the dimension floor
    Checkpoint a = generate_checkpoint(spec, dir / "a");
    spec.seed = 61;
    Checkpoint b = generate_checkpoint(spec, dir / "b");

    for (const auto& name : a.names()) {
        CHECK(a.meta(name).num_elements() >= 4096);
    }
    AnalysisReport report = cosine_map(a, b, default_rules());
    for (const auto& rec : report.records) {
        REQUIRE(rec.value.has_value());
        CHECK(std::fabs(*rec.value) < 0.08);
    }
}

TEST_CASE("norms: zero delta, 3-4-5 triangle, homogeneity") {
    ScratchDir dir("an_norm");

    auto zero = make_checkpoint(dir / "zero", {{"w", {16}, std::vector<float>(16, 0.0f)}});
    AnalysisReport zero_report = norm_map(zero, default_rules());
    CHECK(zero_report.records[0].value == 0.0);

    auto triangle = make_checkpoint(dir / "triangle", {{"w", {2}, {3.0f, 4.0f}}});
    AnalysisReport tri_report = norm_map(triangle, default_rules());
    CHECK(tri_report.records[0].value == 5.0);

    GenSpec spec;
    spec.seed = 62;
    spec.layers = 1;
    spec.hidden_dim = 32;
    spec.ffn_dim = 48;
    spec.vocab_dim = 32;
    Checkpoint d = generate_checkpoint(spec, dir / "d");
    Checkpoint scaled = scaled_copy(d, -2.5, dir / "scaled");
    AnalysisReport base_report = norm_map(d, default_rules());
    AnalysisReport scaled_report = norm_map(scaled, default_rules());
    REQUIRE(base_report.records.size() == scaled_report.records.size());
    for (size_t i = 0; i < base_report.records.size(); ++i) {
        double expect = 2.5 * *base_report.records[i].value;
        double got = *scaled_report.records[i].value;
        if (expect == 0.0) {
            CHECK(got == 0.0);
        } else {
            CHECK(std::fabs(got - expect) / expect < 1e-6);
        }
    }
}

TEST_CASE("planted feed-forward scale shows up as the class norm ratio") {
    ScratchDir dir("an_plant");
    GenSpec spec;
    spec.seed = 63;
    spec.layers = 3;
    spec.hidden_dim = 64;
    spec.ffn_dim = 64; // equal projection sizes so the ratio is the plant factor
    spec.vocab_dim = 64;
    Checkpoint base = generate_checkpoint(spec, dir / "base");

    GenSpec planted_spec = spec;
    PlantSpec plant;
    plant.delta_scales[LayerClass::FeedForward] = 4.0;
    planted_spec.plant = plant;
    Checkpoint planted = generate_checkpoint(planted_spec, dir / "planted");

    Checkpoint delta = extract_delta(planted, base, dir / "delta");
    AnalysisReport report = norm_map(delta, default_rules());
    double ratio = report.summary(LayerClass::FeedForward).mean /
                   report.summary(LayerClass::Attention).mean;
    CHECK(ratio > 3.6);
    CHECK(ratio < 4.4);
}

TEST_CASE("analysis values are independent of thread count") {
    ScratchDir dir("an_threads");
    GenSpec spec;
    spec.seed = 64;
    spec.layers = 2;
    spec.hidden_dim = 64;
    spec.ffn_dim = 96;
    spec.vocab_dim = 64;
    Checkpoint a = generate_checkpoint(spec, dir / "a");
    spec.seed = 65;
    Checkpoint b = generate_checkpoint(spec, dir / "b");

    std::string one = to_json_string(cosine_map(a, b, default_rules(), 50, 1));
    std::string eight = to_json_string(cosine_map(a, b, default_rules(), 50, 8));
    CHECK(one == eight);
    CHECK(to_json_string(norm_map(a, default_rules(), 50, 1)) ==
          to_json_string(norm_map(a, default_rules(), 50, 8)));
}

TEST_CASE("report invariants: class counts and histogram mass") {
    ScratchDir dir("an_invariants");
    GenSpec spec;
    spec.seed = 66;
    spec.layers = 2;
    spec.hidden_dim = 16;
    spec.ffn_dim = 24;
    spec.vocab_dim = 16;
    Checkpoint a = generate_checkpoint(spec, dir / "a");
    spec.seed = 67;
    Checkpoint b = generate_checkpoint(spec, dir / "b");

    for (const AnalysisReport& report :
         {cosine_map(a, b, default_rules()), norm_map(a, default_rules())}) {
        size_t count_sum = 0;
        for (const auto& [cls, summary] : report.class_summary) {
            count_sum += summary.count;
            auto hist = report.histograms.find(cls);
            if (summary.defined == 0) {
                CHECK(hist == report.histograms.end());
            } else {
                REQUIRE(hist != report.histograms.end());
                size_t mass = 0;
                for (size_t c : hist->second.counts) mass += c;
                CHECK(mass == summary.defined);
            }
        }
        CHECK(count_sum == report.records.size());
        CHECK(std::is_sorted(report.records.begin(), report.records.end(),
                             [](const AnalysisRecord& x, const AnalysisRecord& y) {
                                 return x.tensor < y.tensor;
                             }));
    }
}

TEST_CASE("report JSON carries the declared schema and field order") {
    ScratchDir dir("an_json");
    auto a = make_checkpoint(dir / "a", {{"model.layers.0.self_attn.q_proj.weight", {2}, {3, 4}}});
    AnalysisReport report = norm_map(a, default_rules());
    std::string text = to_json_string(report);

    auto doc = nlohmann::ordered_json::parse(text);
    CHECK(doc["schema"] == "paramdelta.report/1");
    CHECK(doc["kind"] == "NormMap");
    CHECK(doc["records"][0]["tensor"] == "model.layers.0.self_attn.q_proj.weight");
    CHECK(doc["records"][0]["class"] == "Attention");
    CHECK(doc["records"][0]["layer"] == 0);
    CHECK(doc["records"][0]["norm"] == 5.0);
    CHECK(doc["class_summary"]["Attention"]["count"] == 1);

    std::vector<std::string> keys;
    for (auto it = doc.begin(); it != doc.end(); ++it) keys.push_back(it.key());
    CHECK(keys == std::vector<std::string>{"schema", "kind", "inputs", "records", "class_summary",
                                           "histograms"});
}

TEST_CASE("errors: no shared tensors, shape conflict") {
    ScratchDir dir("an_errors");
    auto a = make_checkpoint(dir / "a", {{"x", {2}, {1, 2}}});
    auto b = make_checkpoint(dir / "b", {{"y", {2}, {1, 2}}});
    CHECK_THROWS_WITH_AS(cosine_map(a, b, default_rules()), doctest::Contains("NoSharedTensors"),
                         Error);

    auto c = make_checkpoint(dir / "c", {{"x", {1, 2}, {1, 2}}});
    CHECK_THROWS_WITH_AS(cosine_map(a, c, default_rules()), doctest::Contains("ShapeConflict"),
                         Error);
}

TEST_CASE("histogram mechanics") {
    SUBCASE("uniform split") {
        std::vector<double> values = {0, 1, 2, 3};
        Histogram h = histogram(values, 2);
        CHECK(h.counts == std::vector<size_t>{2, 2});
        CHECK(h.edges.front() == 0.0);
        CHECK(h.edges.back() == 3.0);
    }
    SUBCASE("degenerate range: all values land in one bin") {
        std::vector<double> values(7, 5.0);
        Histogram h = histogram(values, 4);
        size_t total = 0;
        size_t occupied = 0;
        for (size_t c : h.counts) {
            total += c;
            occupied += c > 0;
        }
        CHECK(total == 7);
        CHECK(occupied == 1);
    }
    SUBCASE("1000 seeded uniform values, counts conserve mass") {
        std::mt19937 gen(99);
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        std::vector<double> values(1000);
        for (auto& v : values) v = dist(gen);
        Histogram h = histogram(values, 10);
        size_t total = 0;
        for (size_t c : h.counts) total += c;
        CHECK(total == 1000);
        CHECK(h.counts.size() == 10);
    }
    SUBCASE("right edge of the last bin is inclusive") {
        std::vector<double> values = {0.0, 1.0};
        Histogram h = histogram(values, 4);
        CHECK(h.counts == std::vector<size_t>{1, 0, 0, 1});
    }
    SUBCASE("empty input and zero bins are rejected") {
        CHECK_THROWS_WITH_AS(histogram({}, 4), doctest::Contains("EmptyInput"), Error);
        std::vector<double> one = {1.0};
        CHECK_THROWS_WITH_AS(histogram(one, 0), doctest::Contains("InvalidSpec"), Error);
    }
}
