#include "hmerge/assignment.hpp"
#include "hmerge/error.hpp"
#include "hmerge/heads.hpp"
#include "hmerge/testkit.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

using namespace hmerge;

namespace {

HeadPermutation perm(std::vector<std::size_t> m) {
    return HeadPermutation{std::move(m)};
}

HeadPermutation random_perm(std::size_t n, std::mt19937 & gen) {
    HeadPermutation p;
    p.mapping.resize(n);
    std::iota(p.mapping.begin(), p.mapping.end(), 0);
    std::shuffle(p.mapping.begin(), p.mapping.end(), gen);
    return p;
}

CostMatrix random_costs(std::size_t n, std::mt19937 & gen) {
    std::uniform_real_distribution<double> dist(0.0, 2.0);
    CostMatrix c(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            c(i, j) = dist(gen);
        }
    }
    return c;
}

} // namespace

TEST_CASE("split and merge heads along rows") {
    const std::vector<float> p = {0, 1, 2, 3, 4, 5, 6, 7};  // 4x2
    const HeadLayout layout{2, 2, SplitAxis::Rows};
    const auto heads = split_heads({p, 4, 2}, layout);
    REQUIRE(heads.size() == 2);
    CHECK(heads[0] == std::vector<float>{0, 1, 2, 3});
    CHECK(heads[1] == std::vector<float>{4, 5, 6, 7});
    CHECK(merge_heads(heads, 4, 2, layout) == p);
}

TEST_CASE("split and merge heads along columns") {
    const std::vector<float> p = {0, 1, 2, 3, 4, 5, 6, 7};  // 2x4
    const HeadLayout layout{2, 2, SplitAxis::Columns};
    const auto heads = split_heads({p, 2, 4}, layout);
    REQUIRE(heads.size() == 2);
    CHECK(heads[0] == std::vector<float>{0, 1, 4, 5});
    CHECK(heads[1] == std::vector<float>{2, 3, 6, 7});
    CHECK(merge_heads(heads, 2, 4, layout) == p);
}

TEST_CASE("split/merge round trip on random matrices") {
    for (unsigned seed = 0; seed < 10; ++seed) {
        const auto p = test::random_buffer(12 * 10, seed);
        for (SplitAxis axis : {SplitAxis::Rows, SplitAxis::Columns}) {
            const std::size_t rows = axis == SplitAxis::Rows ? 12 : 10;
            const std::size_t cols = axis == SplitAxis::Rows ? 10 : 12;
            const HeadLayout layout{4, 3, axis};
            CHECK(merge_heads(split_heads({p, rows, cols}, layout), rows, cols, layout) == p);
        }
    }
}

TEST_CASE("layout errors") {
    const std::vector<float> p(12);
    CHECK_THROWS_AS(split_heads({p, 4, 3}, HeadLayout{3, 2, SplitAxis::Rows}), Error);
    CHECK_THROWS_AS(split_heads({p, 3, 4}, HeadLayout{2, 2, SplitAxis::Rows}), Error);
    CHECK_THROWS_AS(split_heads({p, 4, 3}, HeadLayout{2, 2, SplitAxis::Columns}), Error);
    CHECK_THROWS_AS(split_heads({p, 5, 3}, HeadLayout{2, 2, SplitAxis::Rows}), Error);
    try {
        check_layout(5, 3, HeadLayout{2, 2, SplitAxis::Rows});
        FAIL("expected layout error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::Layout);
    }
}

TEST_CASE("permute heads moves whole slabs") {
    const std::vector<float> p = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};  // 3x4, rows are heads
    const HeadLayout rows{3, 1, SplitAxis::Rows};
    CHECK(permute_heads({p, 3, 4}, rows, perm({2, 0, 1})) ==
          std::vector<float>{8, 9, 10, 11, 0, 1, 2, 3, 4, 5, 6, 7});
    const HeadLayout cols{2, 2, SplitAxis::Columns};
    CHECK(permute_heads({p, 3, 4}, cols, perm({1, 0})) ==
          std::vector<float>{2, 3, 0, 1, 6, 7, 4, 5, 10, 11, 8, 9});
    CHECK_THROWS_AS(permute_heads({p, 3, 4}, rows, perm({0, 0, 1})), Error);
}

TEST_CASE("cosine cost matrix examples") {
    const std::vector<std::vector<float>> unit = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    const CostMatrix c = head_cost_matrix(unit, unit);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(c(i, j) == (i == j ? 0.0 : 1.0));
        }
    }
    CHECK(head_cost_matrix({{1, 0}}, {{-1, 0}})(0, 0) == 2.0);
    CHECK(head_cost_matrix({{0, 0}}, {{1, 0}})(0, 0) == 1.0);
    CHECK(head_cost_matrix({{0, 0}}, {{0, 0}})(0, 0) == 1.0);
    CHECK(head_cost_matrix({{1, 1}}, {{1, 0}})(0, 0) == doctest::Approx(1.0 - std::sqrt(0.5)));
}

TEST_CASE("matrix cost path agrees with the scalar reference and stays in [0, 2]") {
    for (unsigned seed = 0; seed < 20; ++seed) {
        for (SplitAxis axis : {SplitAxis::Rows, SplitAxis::Columns}) {
            const HeadLayout layout{6, 4, axis};
            const std::size_t rows = axis == SplitAxis::Rows ? 24 : 7;
            const std::size_t cols = axis == SplitAxis::Rows ? 7 : 24;
            const auto a = test::random_buffer(rows * cols, seed);
            const auto b = test::random_buffer(rows * cols, seed + 500);
            const CostMatrix fast = head_cost_matrix({a, rows, cols}, {b, rows, cols}, layout);
            const CostMatrix slow = testkit::reference_head_costs(a, b, rows, cols, layout);
            const CostMatrix split =
                head_cost_matrix(split_heads({a, rows, cols}, layout), split_heads({b, rows, cols}, layout));
            for (std::size_t k = 0; k < fast.values().size(); ++k) {
                CHECK(std::abs(fast.values()[k] - slow.values()[k]) <= 1e-6);
                CHECK(std::abs(split.values()[k] - slow.values()[k]) <= 1e-6);
                CHECK(fast.values()[k] >= 0.0);
                CHECK(fast.values()[k] <= 2.0);
            }
        }
    }
}

TEST_CASE("linear sum assignment examples") {
    const CostMatrix two{{0.1, 0.9}, {0.9, 0.1}};
    CHECK(linear_sum_assignment(two) == perm({0, 1}));
    CHECK(assignment_cost(two, perm({0, 1})) == doctest::Approx(0.2));

    const CostMatrix three{{4, 1, 3}, {2, 0, 5}, {3, 2, 2}};
    const auto p = linear_sum_assignment(three);
    CHECK(p == perm({1, 0, 2}));
    CHECK(assignment_cost(three, p) == 5.0);

    CHECK(linear_sum_assignment(CostMatrix{{3.5}}) == perm({0}));
    CHECK(linear_sum_assignment(CostMatrix{}).mapping.empty());

    CostMatrix bad{{0, 1}, {1, 0}};
    bad(1, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(linear_sum_assignment(bad), Error);
    bad(1, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(linear_sum_assignment(bad), Error);
}

TEST_CASE("permutation-structured costs recover the permutation") {
    std::mt19937 gen(3);
    for (std::size_t n = 1; n <= 16; ++n) {
        for (int trial = 0; trial < 10; ++trial) {
            const auto sigma = random_perm(n, gen);
            CostMatrix c(n, 1.0);
            for (std::size_t i = 0; i < n; ++i) {
                c(i, sigma.mapping[i]) = 0.0;
            }
            CHECK(linear_sum_assignment(c) == sigma);
            if (n <= 8) {
                CHECK(testkit::brute_force_assignment(c).permutation == sigma);
            }
        }
    }
}

TEST_CASE("assignment is optimal and follows the tie rule") {
    std::mt19937 gen(99);
    SUBCASE("continuous costs") {
        for (std::size_t n = 1; n <= 6; ++n) {
            for (int trial = 0; trial < 200; ++trial) {
                const CostMatrix c = random_costs(n, gen);
                const auto bf      = testkit::brute_force_assignment(c);
                const auto p       = linear_sum_assignment(c);
                CHECK(is_bijection(p.mapping));
                CHECK(p == bf.permutation);
                CHECK(std::abs(assignment_cost(c, p) - bf.cost) <= 1e-9);
            }
        }
    }
    SUBCASE("small integer costs with many optima") {
        std::uniform_int_distribution<int> dist(0, 2);
        for (std::size_t n = 2; n <= 7; ++n) {
            for (int trial = 0; trial < 200; ++trial) {
                CostMatrix c(n);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        c(i, j) = dist(gen);
                    }
                }
                CHECK(linear_sum_assignment(c) == testkit::brute_force_assignment(c).permutation);
            }
        }
    }
    SUBCASE("constant matrix gives the identity") {
        CHECK(linear_sum_assignment(CostMatrix(7, 0.25)).is_identity());
    }
}

TEST_CASE("brute force oracle basics") {
    const auto one = testkit::brute_force_assignment(CostMatrix{{0.7}});
    CHECK(one.permutation == perm({0}));
    CHECK(one.cost == 0.7);
    CHECK_THROWS_AS(testkit::brute_force_assignment(CostMatrix(9)), Error);
}

TEST_CASE("larger assignments stay bijective and no worse than identity") {
    std::mt19937 gen(5);
    for (std::size_t n : {10u, 32u, 64u}) {
        const CostMatrix c = random_costs(n, gen);
        const auto p       = linear_sum_assignment(c);
        CHECK(is_bijection(p.mapping));
        CHECK(assignment_cost(c, p) <= assignment_cost(c, perm([&] {
                                          std::vector<std::size_t> id(n);
                                          std::iota(id.begin(), id.end(), 0);
                                          return id;
                                      }())) + 1e-12);
    }
}

TEST_CASE("align heads recovers planted permutations") {
    std::mt19937 gen(21);
    for (int trial = 0; trial < 50; ++trial) {
        for (SplitAxis axis : {SplitAxis::Rows, SplitAxis::Columns}) {
            const std::size_t h = 2 + trial % 7;
            const HeadLayout layout{h, 3, axis};
            const std::size_t rows = axis == SplitAxis::Rows ? h * 3 : 5;
            const std::size_t cols = axis == SplitAxis::Rows ? 5 : h * 3;
            const auto a           = test::random_buffer(rows * cols, 1000 + trial);
            // B's slot j holds A's head inverse(sigma)[j], so B's head sigma[i] is A's head i
            const auto sigma = random_perm(h, gen);
            HeadPermutation inverse;
            inverse.mapping.resize(h);
            for (std::size_t i = 0; i < h; ++i) {
                inverse.mapping[sigma.mapping[i]] = i;
            }
            const auto b                 = permute_heads({a, rows, cols}, layout, inverse);
            const auto [aligned, result] = align_heads({a, rows, cols}, {b, rows, cols}, layout);
            CHECK(result.permutation == sigma);
            CHECK(aligned == a);
            CHECK(result.cost <= result.identity_cost + 1e-12);
            CHECK(std::abs(result.cost) <= 1e-9);
        }
    }
}

TEST_CASE("align heads on identical inputs and single heads") {
    const auto a = test::random_buffer(8 * 6, 4);
    const HeadLayout layout{4, 2, SplitAxis::Rows};
    const auto [same, r] = align_heads({a, 8, 6}, {a, 8, 6}, layout);
    CHECK(r.permutation.is_identity());
    CHECK(same == a);

    const auto b = test::random_buffer(8 * 6, 5);
    const auto [one, r1] = align_heads({a, 8, 6}, {b, 8, 6}, HeadLayout{1, 8, SplitAxis::Rows});
    CHECK(r1.permutation.is_identity());
    CHECK(one == b);
}

TEST_CASE("aligned output is a rearrangement of B's heads") {
    for (unsigned seed = 0; seed < 20; ++seed) {
        const HeadLayout layout{5, 2, SplitAxis::Columns};
        const auto a = test::random_buffer(4 * 10, seed);
        const auto b = test::random_buffer(4 * 10, seed + 50);
        const auto [aligned, r] = align_heads({a, 4, 10}, {b, 4, 10}, layout);
        auto heads_b   = split_heads({b, 4, 10}, layout);
        auto heads_out = split_heads({aligned, 4, 10}, layout);
        std::sort(heads_b.begin(), heads_b.end());
        std::sort(heads_out.begin(), heads_out.end());
        CHECK(heads_b == heads_out);
        CHECK(r.cost <= r.identity_cost + 1e-12);
    }
}

TEST_CASE("align heads rejects mismatched inputs") {
    const auto a = test::random_buffer(8 * 6, 4);
    const auto b = test::random_buffer(6 * 8, 4);
    CHECK_THROWS_AS(align_heads({a, 8, 6}, {b, 6, 8}, HeadLayout{4, 2, SplitAxis::Rows}), Error);
    CHECK_THROWS_AS(align_heads({a, 8, 6}, {a, 8, 6}, HeadLayout{3, 2, SplitAxis::Rows}), Error);
}
