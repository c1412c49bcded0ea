#pragma once

// Toy checkpoint generator and independent oracles.
//
// Nothing here calls into the merge kernels, the head alignment code or the
// assignment solver: reference_merge and brute_force_assignment re-derive
// every result with plain loops so they can check those modules.

#include "hmerge/assignment.hpp"
#include "hmerge/checkpoint.hpp"
#include "hmerge/recipe.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hmerge::testkit {

/// Geometry of a miniature Mistral-style decoder.
struct ToyPreset {
    std::size_t layers   = 4;
    std::size_t hidden   = 64;
    std::size_t q_heads  = 8;
    std::size_t kv_heads = 2;
    std::size_t head_dim = 8;
    std::size_t vocab    = 256;
    std::uint64_t seed   = 0;

    std::size_t kv_dim() const noexcept { return kv_heads * head_dim; }
    std::size_t intermediate() const noexcept { return hidden * 7 / 2; }

    void validate() const;

    static ToyPreset mistral_micro(std::uint64_t seed = 0);
};

ToyPreset preset_by_name(const std::string & name, std::uint64_t seed);

struct ToyManifest {
    std::map<std::string, std::vector<float>> delta_a;  // parent_a - base, F32
    std::map<std::string, std::vector<float>> delta_b;  // parent_b - base, F32
    /// Per projection: head sigma(i) of parent B holds what would have been head i.
    std::map<std::string, HeadPermutation> planted;
    std::uint64_t parameter_count = 0;
};

struct ToyTrio {
    Checkpoint base;
    Checkpoint parent_a;
    Checkpoint parent_b;
    ToyManifest manifest;
};

/// Seeded Gaussian base plus two perturbed parents sharing a common delta component.
/// Parent B's q_proj heads are shuffled by a planted permutation in every layer.
ToyTrio gen_toy_trio(const ToyPreset & preset);

/// Writes base/parent_a/parent_b archives, manifest.txt and a ready-to-run hierarchical.recipe.
void write_toy_trio(const ToyTrio & trio, const ToyPreset & preset, const std::filesystem::path & dir);

/// Attention rules matching the toy geometry.
std::vector<AttentionRule> toy_attention_rules(const ToyPreset & preset);

/// Recipe text for `method` over a toy trio written by write_toy_trio.
std::string toy_recipe_text(const ToyPreset & preset, MergeMethod method, const std::string & output,
                            std::uint64_t seed = 0);

struct BruteForceAssignment {
    HeadPermutation permutation;
    double cost = 0.0;
};

/// Exhaustive search over all H! permutations for H <= 8. Returns the lexicographically
/// first permutation whose cost is within H * 1e-9 * (1 + max|C|) of the minimum.
BruteForceAssignment brute_force_assignment(const CostMatrix & c);

/// Straight-line re-implementation of every merge method.
Checkpoint reference_merge(MergeMethod method, const Checkpoint & base, const Checkpoint & a, const Checkpoint & b,
                           const MergeRecipe & recipe, std::optional<DType> output_dtype = std::nullopt);

/// 1 - cosine over explicitly extracted head slabs, scalar loops.
CostMatrix reference_head_costs(const std::vector<float> & a, const std::vector<float> & b, std::size_t rows,
                                std::size_t cols, const HeadLayout & layout);

} // namespace hmerge::testkit
