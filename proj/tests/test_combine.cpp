#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "paramdelta/combine.hpp"
#include "paramdelta/generator.hpp"
#include "paramdelta/membudget.hpp"
#include "paramdelta/rng.hpp"
#include "support.hpp"

using namespace paramdelta;
using namespace testsupport;

namespace {

ErrorClass combine_error(const CombineSpec& spec, const std::filesystem::path& out) {
    try {
        linear_combine(spec, out);
    } catch (const Error& e) {
        return e.cls();
    }
    FAIL("expected linear_combine to throw");
    return ErrorClass::IoFailure;
}

std::vector<uint8_t> tensor_bytes(const Checkpoint& ck, const std::string& name) {
    return ck.read_raw(name);
}

bool tensor_data_identical(const Checkpoint& a, const Checkpoint& b) {
    if (a.names() != b.names()) return false;
    for (const auto& name : a.names()) {
        if (a.meta(name).dtype != b.meta(name).dtype) return false;
        if (tensor_bytes(a, name) != tensor_bytes(b, name)) return false;
    }
    return true;
}

} // namespace

TEST_CASE("identity combination reproduces the input values") {
    ScratchDir dir("cb_identity");
    auto a = make_checkpoint(dir / "a", {{"x", {3}, {1.5f, -2.25f, 0.125f}}});
    CombineSpec spec;
    spec.terms = {{a, 1.0}};
    Checkpoint out = linear_combine(spec, dir / "out");
    CHECK(tensor_values(out, "x") == std::vector<float>{1.5f, -2.25f, 0.125f});
    CHECK(out.kind() == CheckpointKind::Fused);
    CHECK(out.metadata().count(std::string(kRecipeKey)) == 1);
}

TEST_CASE("self-cancellation yields all-zero tensors") {
    ScratchDir dir("cb_cancel");
    auto a = make_checkpoint(dir / "a", {{"x", {4}, {1, -2, 3, -4}}, {"y", {1}, {9}}});
    CombineSpec spec;
    spec.terms = {{a, 1.0}, {a, -1.0}};
    Checkpoint out = linear_combine(spec, dir / "out");
    CHECK(tensor_values(out, "x") == std::vector<float>{0, 0, 0, 0});
    CHECK(tensor_values(out, "y") == std::vector<float>{0});
}

TEST_CASE("scalar arithmetic oracles") {
    ScratchDir dir("cb_scalar");
    auto a = make_checkpoint(dir / "a", {{"v", {1}, {2.0f}}});
    auto b = make_checkpoint(dir / "b", {{"v", {1}, {4.0f}}});

    SUBCASE("0.5*A + 0.5*B = 3") {
        CombineSpec spec;
        spec.terms = {{a, 0.5}, {b, 0.5}};
        CHECK(tensor_values(linear_combine(spec, dir / "out"), "v") == std::vector<float>{3.0f});
    }
    SUBCASE("apply: anchor 1.0 + 2.0 * delta 0.5 = 2") {
        auto anchor = make_checkpoint(dir / "anchor", {{"v", {1}, {1.0f}}});
        auto delta = make_checkpoint(dir / "delta", {{"v", {1}, {0.5f}}});
        CHECK(tensor_values(apply_delta(anchor, delta, 2.0, dir / "out2"), "v") ==
              std::vector<float>{2.0f});
    }
    SUBCASE("fuse: anchor 1 + 0.5*2 + 0.25*4 = 3") {
        auto anchor = make_checkpoint(dir / "anchor3", {{"v", {1}, {1.0f}}});
        auto d1 = make_checkpoint(dir / "d1", {{"v", {1}, {2.0f}}});
        auto d2 = make_checkpoint(dir / "d2", {{"v", {1}, {4.0f}}});
        Checkpoint out = fuse(anchor, {{d1, 0.5}, {d2, 0.25}}, dir / "out3");
        CHECK(tensor_values(out, "v") == std::vector<float>{3.0f});
    }
}

TEST_CASE("extract_delta recovers exactly what was planted") {
    ScratchDir dir("cb_planted");
    GenSpec base_spec;
    base_spec.seed = 7;
    base_spec.layers = 2;
    base_spec.hidden_dim = 8;
    base_spec.ffn_dim = 16;
    base_spec.vocab_dim = 8;
    Checkpoint base = generate_checkpoint(base_spec, dir / "base");

    GenSpec post_spec = base_spec;
    PlantSpec plant;
    plant.offsets["model.layers.0.self_attn.q_proj.weight"] = 0.25;
    plant.offsets["model.layers.1.mlp.down_proj.weight"] = -0.125;
    post_spec.plant = plant;
    Checkpoint post = generate_checkpoint(post_spec, dir / "post");

    Checkpoint delta = extract_delta(post, base, dir / "delta");
    CHECK(delta.kind() == CheckpointKind::Delta);
    CHECK(delta.metadata().at(std::string(kMinuendKey)) == post.path().string());
    CHECK(delta.metadata().at(std::string(kSubtrahendKey)) == base.path().string());

    for (const auto& name : delta.names()) {
        float expect = 0.0f;
        auto it = plant.offsets.find(name);
        if (it != plant.offsets.end()) expect = static_cast<float>(it->second);
        for (float v : tensor_values(delta, name)) {
            CHECK(v == expect);
        }
        CHECK(delta.meta(name).dtype == DType::F32); // deltas are stored F32
    }
}

TEST_CASE("zero delta from identical checkpoints; base of zeros passes post through") {
    ScratchDir dir("cb_triv");
    auto post = make_checkpoint(dir / "post", {{"x", {3}, {1.25f, -0.5f, 2.0f}}});
    Checkpoint d0 = extract_delta(post, post, dir / "d0");
    CHECK(tensor_values(d0, "x") == std::vector<float>{0, 0, 0});

    auto zeros = make_checkpoint(dir / "zeros", {{"x", {3}, {0, 0, 0}}});
    Checkpoint d1 = extract_delta(post, zeros, dir / "d1");
    CHECK(tensor_values(d1, "x") == std::vector<float>{1.25f, -0.5f, 2.0f});
}

TEST_CASE("16-bit reconstruction is bit-identical") {
    ScratchDir dir("cb_reconstruct");
    for (DType t : {DType::BF16, DType::F16}) {
        GenSpec spec;
        spec.seed = t == DType::BF16 ? 11 : 12;
        spec.layers = 2;
        spec.hidden_dim = 16;
        spec.ffn_dim = 32;
        spec.vocab_dim = 16;
        spec.dtype = t;
        Checkpoint base = generate_checkpoint(spec, dir / "base");
        spec.seed += 500;
        Checkpoint post = generate_checkpoint(spec, dir / "post");

        Checkpoint delta = extract_delta(post, base, dir / "delta");
        Checkpoint rec = apply_delta(base, delta, 1.0, dir / "rec");
        CHECK(rec.meta("lm_head.weight").dtype == t); // out dtype matches anchor
        CHECK(tensor_data_identical(rec, post));
    }
}

TEST_CASE("f32 reconstruction error stays within 2 ulp") {
    ScratchDir dir("cb_reconstruct32");
    // adversarial non-grid values: random floats of varying magnitude
    std::mt19937 gen(202406);
    std::uniform_real_distribution<float> mag(-4.0f, 4.0f);
    std::vector<float> post_vals(4096), base_vals(4096);
    for (size_t i = 0; i < post_vals.size(); ++i) {
        post_vals[i] = std::ldexp(mag(gen), static_cast<int>(i % 7) - 3);
        base_vals[i] = std::ldexp(mag(gen), static_cast<int>(i % 5) - 2);
    }
    auto post = make_checkpoint(dir / "post", {{"w", {4096}, post_vals}});
    auto base = make_checkpoint(dir / "base", {{"w", {4096}, base_vals}});
    Checkpoint rec = apply_delta(base, extract_delta(post, base, dir / "d"), 1.0, dir / "rec");
    auto rec_vals = tensor_values(rec, "w");
    for (size_t i = 0; i < rec_vals.size(); ++i) {
        // |reconstructed − post| ≤ 2 ULP(F32) at max(|post|, |base|)
        float m = std::max(std::fabs(post_vals[i]), std::fabs(base_vals[i]));
        float ulp = std::nextafterf(m, std::numeric_limits<float>::infinity()) - m;
        CHECK(std::fabs(rec_vals[i] - post_vals[i]) <= 2.0f * ulp);
    }
}

TEST_CASE("alpha=0 application is value-identical to the anchor") {
    ScratchDir dir("cb_alpha0");
    GenSpec spec;
    spec.seed = 21;
    spec.hidden_dim = 8;
    spec.ffn_dim = 8;
    spec.vocab_dim = 8;
    spec.dtype = DType::BF16;
    Checkpoint anchor = generate_checkpoint(spec, dir / "anchor");
    spec.seed = 22;
    Checkpoint other = generate_checkpoint(spec, dir / "other");
    Checkpoint delta = extract_delta(other, anchor, dir / "delta");
    Checkpoint out = apply_delta(anchor, delta, 0.0, dir / "out");
    CHECK(tensor_data_identical(out, anchor));
}

TEST_CASE("degenerate fusion equals single application bitwise") {
    ScratchDir dir("cb_degenerate");
    GenSpec spec;
    spec.seed = 31;
    spec.hidden_dim = 8;
    spec.ffn_dim = 8;
    spec.vocab_dim = 8;
    Checkpoint anchor = generate_checkpoint(spec, dir / "anchor");
    spec.seed = 32;
    Checkpoint other = generate_checkpoint(spec, dir / "other");
    Checkpoint delta = extract_delta(other, anchor, dir / "delta");

    Checkpoint fused = fuse(anchor, {{delta, 1.0}}, dir / "fused");
    Checkpoint applied = apply_delta(anchor, delta, 1.0, dir / "applied");
    CHECK(tensor_data_identical(fused, applied));
}

TEST_CASE("splitting a delta in two halves matches single application within 2 ulp") {
    ScratchDir dir("cb_split");
    std::mt19937 gen(777);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> anchor_vals(2048), delta_vals(2048);
    for (size_t i = 0; i < anchor_vals.size(); ++i) {
        anchor_vals[i] = dist(gen);
        delta_vals[i] = dist(gen) * 0.37f;
    }
    auto anchor = make_checkpoint(dir / "anchor", {{"w", {2048}, anchor_vals}});
    auto delta = make_checkpoint(dir / "delta", {{"w", {2048}, delta_vals}});

    Checkpoint once = apply_delta(anchor, delta, 1.0, dir / "once");
    Checkpoint twice = fuse(anchor, {{delta, 0.5}, {delta, 0.5}}, dir / "twice");
    auto v_once = tensor_values(once, "w");
    auto v_twice = tensor_values(twice, "w");
    for (size_t i = 0; i < v_once.size(); ++i) {
        float scale = std::fabs(anchor_vals[i]) + std::fabs(delta_vals[i]);
        CHECK(std::fabs(v_once[i] - v_twice[i]) <= 2.0f * ulp_at(scale));
    }
}

TEST_CASE("linearity: nested combines equal one flat combine within 2 ulp") {
    ScratchDir dir("cb_linearity");
    std::mt19937 gen(4242);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    auto rand_tensor = [&](size_t n) {
        std::vector<float> v(n);
        for (auto& x : v) x = dist(gen);
        return v;
    };
    std::vector<float> va = rand_tensor(1024), vb = rand_tensor(1024), vc = rand_tensor(1024);
    auto a = make_checkpoint(dir / "a", {{"w", {1024}, va}});
    auto b = make_checkpoint(dir / "b", {{"w", {1024}, vb}});
    auto c = make_checkpoint(dir / "c", {{"w", {1024}, vc}});

    CombineSpec inner;
    inner.terms = {{a, 0.7}, {b, -0.3}};
    Checkpoint ab = linear_combine(inner, dir / "ab");

    CombineSpec outer;
    outer.terms = {{ab, 1.0}, {c, 0.45}};
    Checkpoint nested = linear_combine(outer, dir / "nested");

    CombineSpec flat;
    flat.terms = {{a, 0.7}, {b, -0.3}, {c, 0.45}};
    Checkpoint direct = linear_combine(flat, dir / "direct");

    auto vn = tensor_values(nested, "w");
    auto vd = tensor_values(direct, "w");
    for (size_t i = 0; i < vn.size(); ++i) {
        float scale = std::fabs(0.7f * va[i]) + std::fabs(0.3f * vb[i]) + std::fabs(0.45f * vc[i]);
        CHECK(std::fabs(vn[i] - vd[i]) <= 2.0f * ulp_at(scale));
    }
}

TEST_CASE("term permutation with compensated summation is bit-identical on grid fixtures") {
    ScratchDir dir("cb_perm");
    std::vector<Checkpoint> cks;
    for (int i = 0; i < 6; ++i) {
        GenSpec spec;
        spec.seed = 100 + static_cast<uint64_t>(i);
        spec.layers = 1;
        spec.hidden_dim = 16;
        spec.ffn_dim = 16;
        spec.vocab_dim = 16;
        cks.push_back(generate_checkpoint(spec, dir / ("g" + std::to_string(i))));
    }
    const double coeffs[6] = {1.0, -0.5, 0.25, 0.125, -1.0, 0.5};

    CombineSpec fwd;
    for (int i = 0; i < 6; ++i) fwd.terms.push_back({cks[i], coeffs[i]});
    Checkpoint out_fwd = linear_combine(fwd, dir / "fwd");

    CombineSpec rev;
    for (int i = 5; i >= 0; --i) rev.terms.push_back({cks[i], coeffs[i]});
    rev.anchor_index = 5; // same anchor checkpoint after reversal
    Checkpoint out_rev = linear_combine(rev, dir / "rev");

    CHECK(tensor_data_identical(out_fwd, out_rev));
}

TEST_CASE("term permutation on arbitrary values stays within 2 ulp") {
    ScratchDir dir("cb_perm2");
    std::mt19937 gen(90210);
    std::uniform_real_distribution<float> dist(-3.0f, 3.0f);
    std::vector<Checkpoint> cks;
    std::vector<std::vector<float>> values;
    for (int i = 0; i < 5; ++i) {
        std::vector<float> v(512);
        for (auto& x : v) x = dist(gen);
        cks.push_back(make_checkpoint(dir / ("r" + std::to_string(i)), {{"w", {512}, v}}));
        values.push_back(std::move(v));
    }
    const double coeffs[5] = {0.31, -0.77, 1.13, 0.059, -0.4};

    CombineSpec fwd;
    for (int i = 0; i < 5; ++i) fwd.terms.push_back({cks[i], coeffs[i]});
    CombineSpec rev;
    for (int i = 4; i >= 0; --i) rev.terms.push_back({cks[i], coeffs[i]});
    rev.anchor_index = 4;

    auto vf = tensor_values(linear_combine(fwd, dir / "f"), "w");
    auto vr = tensor_values(linear_combine(rev, dir / "r"), "w");
    for (size_t i = 0; i < vf.size(); ++i) {
        float scale = 0.0f;
        for (int t = 0; t < 5; ++t) {
            scale += std::fabs(static_cast<float>(coeffs[t]) * values[t][i]);
        }
        CHECK(std::fabs(vf[i] - vr[i]) <= 2.0f * ulp_at(scale));
    }
}

TEST_CASE("outputs are byte-identical across thread counts") {
    ScratchDir dir("cb_threads");
    GenSpec spec;
    spec.seed = 55;
    spec.layers = 2;
    spec.hidden_dim = 64;
    spec.ffn_dim = 96;
    spec.vocab_dim = 64;
    Checkpoint base = generate_checkpoint(spec, dir / "base");
    spec.seed = 56;
    Checkpoint post = generate_checkpoint(spec, dir / "post");

    extract_delta(post, base, dir / "d1", 1);
    extract_delta(post, base, dir / "d8", 8);
    CHECK(read_file(dir / "d1") == read_file(dir / "d8"));

    Checkpoint delta = Checkpoint::open(dir / "d1");
    apply_delta(base, delta, 0.7, dir / "a1", MissingPolicy::Strict, 1);
    apply_delta(base, delta, 0.7, dir / "a8", MissingPolicy::Strict, 8);
    CHECK(read_file(dir / "a1") == read_file(dir / "a8"));
}

TEST_CASE("missing-tensor policies") {
    ScratchDir dir("cb_policy");
    auto anchor = make_checkpoint(dir / "anchor", {{"shared", {2}, {1, 2}}, {"extra", {2}, {5, 6}}});
    auto delta = make_checkpoint(dir / "delta", {{"shared", {2}, {10, 20}}});

    SUBCASE("strict fails on structural difference") {
        CombineSpec spec;
        spec.terms = {{anchor, 1.0}, {delta, 1.0}};
        CHECK(combine_error(spec, dir / "out") == ErrorClass::NotHomologous);
    }
    SUBCASE("intersect keeps only shared names and reports the skipped") {
        std::vector<std::string> skipped;
        CombineSpec spec;
        spec.terms = {{anchor, 1.0}, {delta, 1.0}};
        spec.missing_policy = MissingPolicy::Intersect;
        Checkpoint out = linear_combine(spec, dir / "out", &skipped);
        CHECK(out.names() == std::vector<std::string>{"shared"});
        CHECK(tensor_values(out, "shared") == std::vector<float>{11, 22});
        CHECK(skipped == std::vector<std::string>{"extra"});
    }
    SUBCASE("anchor passthrough copies anchor-only tensors untouched") {
        Checkpoint out = apply_delta(anchor, delta, 1.0, dir / "out",
                                     MissingPolicy::AnchorPassthrough);
        CHECK(out.names() == std::vector<std::string>{"extra", "shared"});
        CHECK(tensor_values(out, "shared") == std::vector<float>{11, 22});
        CHECK(out.read_raw("extra") == anchor.read_raw("extra"));
    }
    SUBCASE("anchor passthrough requires anchor coefficient 1") {
        CombineSpec spec;
        spec.terms = {{anchor, 2.0}, {delta, 1.0}};
        spec.missing_policy = MissingPolicy::AnchorPassthrough;
        CHECK(combine_error(spec, dir / "out") == ErrorClass::InvalidSpec);
    }
    SUBCASE("empty intersection fails") {
        auto disjoint = make_checkpoint(dir / "disjoint", {{"unrelated", {1}, {0}}});
        CombineSpec spec;
        spec.terms = {{anchor, 1.0}, {disjoint, 1.0}};
        spec.missing_policy = MissingPolicy::Intersect;
        CHECK(combine_error(spec, dir / "out") == ErrorClass::EmptyIntersection);
    }
}

TEST_CASE("shape conflicts on shared names are always fatal") {
    ScratchDir dir("cb_shape");
    auto a = make_checkpoint(dir / "a", {{"w", {4}, {1, 2, 3, 4}}});
    auto b = make_checkpoint(dir / "b", {{"w", {2, 2}, {1, 2, 3, 4}}});
    for (MissingPolicy policy :
         {MissingPolicy::Strict, MissingPolicy::Intersect, MissingPolicy::AnchorPassthrough}) {
        CombineSpec spec;
        spec.terms = {{a, 1.0}, {b, 1.0}};
        spec.missing_policy = policy;
        ErrorClass cls = combine_error(spec, dir / "out");
        if (policy == MissingPolicy::Strict) {
            CHECK(cls == ErrorClass::NotHomologous);
        } else {
            CHECK(cls == ErrorClass::ShapeConflict);
        }
    }
}

TEST_CASE("non-finite coefficients and empty specs are rejected") {
    ScratchDir dir("cb_badspec");
    auto a = make_checkpoint(dir / "a", {{"w", {1}, {1}}});

    CombineSpec nan_spec;
    nan_spec.terms = {{a, std::nan("")}};
    CHECK(combine_error(nan_spec, dir / "out") == ErrorClass::NonFiniteCoefficient);

    CombineSpec inf_spec;
    inf_spec.terms = {{a, std::numeric_limits<double>::infinity()}};
    CHECK(combine_error(inf_spec, dir / "out") == ErrorClass::NonFiniteCoefficient);

    CombineSpec empty_spec;
    CHECK(combine_error(empty_spec, dir / "out") == ErrorClass::InvalidSpec);
}

TEST_CASE("recipe metadata renders coefficients at full precision") {
    ScratchDir dir("cb_recipe");
    auto a = make_checkpoint(dir / "a", {{"w", {1}, {1}}});
    CombineSpec spec;
    spec.terms = {{a, 0.1}};
    std::string recipe = render_recipe(spec);
    CHECK(recipe.find("1.0000000000000001e-01") != std::string::npos);
    CHECK(recipe.find(a.path().string()) != std::string::npos);

    Checkpoint out = linear_combine(spec, dir / "out");
    CHECK(out.metadata().at(std::string(kRecipeKey)) == recipe);
}

TEST_CASE("bounded memory: streaming combine never materializes whole large tensors") {
    ScratchDir dir("cb_mem");
    // 9 tensors of 512 KiB each: total 4.5 MiB ≥ 8× the largest (512 KiB)
    std::vector<NamedTensor> tensors;
    std::vector<float> vals(128 * 1024, 0.5f);
    for (int i = 0; i < 9; ++i) {
        tensors.push_back({"t" + std::to_string(i), {128, 1024}, vals});
    }
    auto a = make_checkpoint(dir / "a", tensors);
    auto b = make_checkpoint(dir / "b", tensors);
    uint64_t largest = a.largest_tensor_bytes();
    REQUIRE(a.total_tensor_bytes() >= 8 * largest);

    mem::reset_peak();
    extract_delta(a, b, dir / "delta", 1);
    CHECK(mem::peak_bytes() <= 3 * largest);
}
