#include "hmerge/error.hpp"
#include "hmerge/hierarchical.hpp"
#include "hmerge/kernels.hpp"
#include "hmerge/testkit.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace hmerge;

namespace {

std::vector<float> scaled(std::span<const float> v, float c) {
    std::vector<float> out(v.begin(), v.end());
    for (auto & x : out) {
        x *= c;
    }
    return out;
}

MergeRecipe toy_hierarchical(const testkit::ToyPreset & p) {
    MergeRecipe r        = make_recipe(MergeMethod::Hierarchical);
    r.attention_patterns = testkit::toy_attention_rules(p);
    return r;
}

} // namespace

TEST_CASE("layer weight fixtures") {
    CHECK(layer_weight(std::vector<float>{1, 2, 3}, std::vector<float>{1, 2, 3}) == doctest::Approx(1.0));
    CHECK(layer_weight(std::vector<float>{1, 0}, std::vector<float>{0, 1}) == 0.0);
    CHECK(std::abs(layer_weight(std::vector<float>{1, 0}, std::vector<float>{1, 1}) - 1.0 / std::sqrt(2.0)) <= 1e-6);
    CHECK(layer_weight(std::vector<float>{1, 0}, std::vector<float>{-1, 0}) == 0.0);
    CHECK(layer_weight(std::vector<float>{0, 0}, std::vector<float>{1, 1}) == 0.0);
    CHECK(layer_weight(std::vector<float>{1, 1}, std::vector<float>{0, 0}) == 0.0);
    CHECK(layer_weight(std::vector<float>{}, std::vector<float>{}) == 0.0);
    CHECK_THROWS_AS(layer_weight(std::vector<float>{1}, std::vector<float>{1, 2}), Error);
}

TEST_CASE("layer weight is scale invariant and in [0, 1]") {
    for (unsigned seed = 0; seed < 50; ++seed) {
        const auto da = test::random_buffer(300, seed);
        const auto db = test::random_buffer(300, seed + 77);
        const double w = layer_weight(da, db);
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        for (float c : {1e-3f, 0.5f, 3.0f, 1e4f}) {
            CHECK(std::abs(layer_weight(scaled(da, c), db) - w) <= 1e-6);
            CHECK(std::abs(layer_weight(da, scaled(db, c)) - w) <= 1e-6);
        }
    }
}

TEST_CASE("layer weight from parents matches explicit deltas") {
    for (unsigned seed = 0; seed < 10; ++seed) {
        const auto base = test::random_buffer(200, seed);
        const auto a    = test::random_buffer(200, seed + 1);
        const auto b    = test::random_buffer(200, seed + 2);
        std::vector<float> da(200), db(200);
        subtract(a, base, da);
        subtract(b, base, db);
        CHECK(layer_weight_from_parents(base, a, b) == doctest::Approx(layer_weight(da, db)).epsilon(1e-12));
    }
}

TEST_CASE("layer classification") {
    const MergeRecipe r = make_recipe(MergeMethod::Hierarchical);
    const auto q = classify_layer("model.layers.0.self_attn.q_proj.weight", r);
    CHECK(q.kind == LayerKind::AttentionProjection);
    REQUIRE(q.projection);
    CHECK(*q.projection == Projection::Q);
    CHECK(q.layout->split_axis == SplitAxis::Rows);
    CHECK(q.layout->num_heads == 32);

    const auto k = classify_layer("model.layers.3.self_attn.k_proj.weight", r);
    CHECK(*k.projection == Projection::K);
    CHECK(k.layout->num_heads == 8);
    const auto o = classify_layer("model.layers.31.self_attn.o_proj.weight", r);
    CHECK(*o.projection == Projection::O);
    CHECK(o.layout->split_axis == SplitAxis::Columns);

    CHECK(classify_layer("model.layers.5.mlp.gate_proj.weight", r).kind == LayerKind::Other);
    CHECK(classify_layer("model.embed_tokens.weight", r).kind == LayerKind::Other);
    CHECK(classify_layer("model.layers.0.self_attn.q_proj.bias", r).kind == LayerKind::Other);
    CHECK(classify_layer("model.norm.weight", r).kind == LayerKind::Other);

    SUBCASE("first matching rule wins") {
        MergeRecipe custom = r;
        custom.attention_patterns.insert(custom.attention_patterns.begin(),
                                         AttentionRule{Projection::V, "q_proj", HeadLayout{4, 2, SplitAxis::Rows}});
        CHECK(*classify_layer("model.layers.0.self_attn.q_proj.weight", custom).projection == Projection::V);
    }
    SUBCASE("bad pattern") {
        MergeRecipe custom = r;
        custom.attention_patterns.push_back(AttentionRule{Projection::Q, "([", HeadLayout{}});
        CHECK_THROWS_AS(LayerClassifier(custom.attention_patterns), Error);
    }
}

TEST_CASE("endpoint fidelity") {
    const auto pa   = test::random_buffer(64, 1);
    const auto pb   = test::random_buffer(64, 2);
    const LayerClass other{"x", LayerKind::Other, std::nullopt, std::nullopt};

    std::vector<float> a = pa;
    auto rep = merge_layer(other, 0.0, {64}, a, pb, {});
    CHECK(a == pa);
    CHECK_FALSE(rep.aligned);

    a = pa;
    merge_layer(other, 1.0, {64}, a, pb, {});
    CHECK(a == pb);

    const LayerClass attn{"q", LayerKind::AttentionProjection, Projection::Q, HeadLayout{4, 2, SplitAxis::Rows}};
    std::vector<float> scratch(64);
    a   = pa;
    rep = merge_layer(attn, 1.0, {8, 8}, a, pb, scratch);
    CHECK(rep.aligned);
    REQUIRE(rep.permutation);
    CHECK(a == permute_heads({pb, 8, 8}, *attn.layout, *rep.permutation));
    a = pa;
    merge_layer(attn, 0.0, {8, 8}, a, pb, scratch);
    CHECK(a == pa);

    CHECK_THROWS_AS(merge_layer(attn, 0.5, {64}, a, pb, scratch), Error);
}

TEST_CASE("hierarchical merge on the toy trio") {
    const auto preset = testkit::ToyPreset::mistral_micro(4);
    const auto trio   = testkit::gen_toy_trio(preset);
    const auto recipe = toy_hierarchical(preset);
    const auto [merged, reports] = hierarchical_merge(trio.base, trio.parent_a, trio.parent_b, recipe);

    REQUIRE(reports.size() == trio.base.tensors.size());
    auto it = trio.base.tensors.begin();
    for (const auto & rep : reports) {
        CHECK(rep.name == (it++)->first);
        CHECK(rep.w >= 0.0);
        CHECK(rep.w <= 1.0);
        const bool attn = classify_layer(rep.name, recipe).kind == LayerKind::AttentionProjection;
        CHECK(rep.aligned == attn);
        CHECK(rep.assignment_cost.has_value() == attn);
        if (trio.manifest.planted.count(rep.name)) {
            REQUIRE(rep.permutation);
            CHECK(*rep.permutation == trio.manifest.planted.at(rep.name));
            CHECK_FALSE(rep.permutation->is_identity());
        }
    }
    CHECK(merged == testkit::reference_merge(MergeMethod::Hierarchical, trio.base, trio.parent_a, trio.parent_b,
                                             recipe));
    CHECK(merged.metadata.at("merge_method") == "hierarchical");

    const std::string table = format_report_table(reports);
    CHECK(table.rfind("name,w,aligned,assignment_cost\n", 0) == 0);
    CHECK(static_cast<std::size_t>(std::count(table.begin(), table.end(), '\n')) == reports.size() + 1);
    const auto & q = *std::find_if(reports.begin(), reports.end(),
                                   [](const auto & r) { return r.name.find("q_proj") != std::string::npos; });
    const std::string line = format_alignment_line(q);
    CHECK(line.find(q.name) == 0);
    CHECK(line.find("H=8") != std::string::npos);
}

TEST_CASE("identical parents give weight 1 and return parent A") {
    const auto preset = testkit::ToyPreset::mistral_micro(6);
    const auto trio   = testkit::gen_toy_trio(preset);
    const auto [merged, reports] =
        hierarchical_merge(trio.base, trio.parent_a, trio.parent_a, toy_hierarchical(preset), DType::F32);
    for (const auto & rep : reports) {
        CHECK(rep.w == doctest::Approx(1.0));
        if (rep.permutation) {
            CHECK(rep.permutation->is_identity());
        }
    }
    for (const auto & [name, t] : merged.tensors) {
        CHECK(decode_values(t) == decode_values(trio.parent_a.at(name)));
    }
}

TEST_CASE("opposed deltas give weight 0 and return parent A exactly") {
    Checkpoint base, a, b;
    const auto b0 = test::random_buffer(32, 1);
    const auto d  = test::random_buffer(32, 2, 0.125f);
    std::vector<float> pa(32), pb(32);
    for (std::size_t i = 0; i < 32; ++i) {
        pa[i] = b0[i] + d[i];
        pb[i] = b0[i] - d[i];
    }
    base.add(encode_tensor("w", {32}, b0, DType::F32));
    a.add(encode_tensor("w", {32}, pa, DType::F32));
    b.add(encode_tensor("w", {32}, pb, DType::F32));
    const auto [merged, reports] = hierarchical_merge(base, a, b, make_recipe(MergeMethod::Hierarchical));
    CHECK(reports.at(0).w == 0.0);
    CHECK(merged.at("w") == a.at("w"));
}

TEST_CASE("without attention rules the merge is per-tensor interpolation") {
    const auto preset = testkit::ToyPreset::mistral_micro(8);
    const auto trio   = testkit::gen_toy_trio(preset);
    MergeRecipe r     = make_recipe(MergeMethod::Hierarchical);
    r.attention_patterns.clear();
    const auto [merged, reports] = hierarchical_merge(trio.base, trio.parent_a, trio.parent_b, r, DType::F32);
    for (const auto & rep : reports) {
        CHECK_FALSE(rep.aligned);
        const auto pa = decode_values(trio.parent_a.at(rep.name));
        const auto pb = decode_values(trio.parent_b.at(rep.name));
        CHECK(decode_values(merged.at(rep.name)) == linear_average(pa, pb, rep.w));
    }
    CHECK(merged == testkit::reference_merge(MergeMethod::Hierarchical, trio.base, trio.parent_a, trio.parent_b, r,
                                             DType::F32));
}

TEST_CASE("hierarchical merge ignores alpha") {
    const auto preset = testkit::ToyPreset::mistral_micro(9);
    const auto trio   = testkit::gen_toy_trio(preset);
    auto r            = toy_hierarchical(preset);
    const auto first  = hierarchical_merge(trio.base, trio.parent_a, trio.parent_b, r).first;
    r.alpha           = 0.1;
    CHECK(hierarchical_merge(trio.base, trio.parent_a, trio.parent_b, r).first == first);
}

TEST_CASE("planted permutations are recovered for many seeds") {
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
        const auto preset = testkit::ToyPreset::mistral_micro(seed);
        const auto trio   = testkit::gen_toy_trio(preset);
        for (const auto & [name, sigma] : trio.manifest.planted) {
            const auto a = decode_values(trio.parent_a.at(name));
            const auto b = decode_values(trio.parent_b.at(name));
            const auto & shape = trio.base.at(name).shape;
            const auto [aligned, result] =
                align_heads({a, shape[0], shape[1]}, {b, shape[0], shape[1]},
                            HeadLayout{preset.q_heads, preset.head_dim, SplitAxis::Rows});
            CAPTURE(name);
            CHECK(result.permutation == sigma);
        }
    }
}

TEST_CASE("layout mismatch surfaces as a layout error") {
    const auto preset = testkit::ToyPreset::mistral_micro(1);
    const auto trio   = testkit::gen_toy_trio(preset);
    MergeRecipe r     = make_recipe(MergeMethod::Hierarchical);  // 32 heads x 128: wrong for the toy
    try {
        hierarchical_merge(trio.base, trio.parent_a, trio.parent_b, r);
        FAIL("expected layout error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::Layout);
    }
}
