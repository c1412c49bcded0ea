#pragma once

#include "hmerge/checkpoint.hpp"
#include "hmerge/random.hpp"
#include "hmerge/recipe.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hmerge {

// Elementwise merge kernels. Each kernel evaluates its formula in double and
// rounds once to F32, so identities that hold exactly in real arithmetic
// (task arithmetic vs. interpolation with dyadic weights) hold bitwise here.
// Output spans may alias an input of the same length.

/// Per-tensor deltas of a model against a base, in F32.
struct TaskVector {
    std::map<std::string, std::vector<float>> deltas;
    std::map<std::string, Shape> shapes;
};

/// Throws Error(Compatibility) listing the symmetric difference of names, or the first shape mismatch.
void check_compatible(const std::map<std::string, Shape> & a, const std::map<std::string, Shape> & b,
                      std::string_view label_a = "a", std::string_view label_b = "b");
void check_compatible(const Checkpoint & a, const Checkpoint & b, std::string_view label_a = "a",
                      std::string_view label_b = "b");

std::map<std::string, Shape> shapes_of(const Checkpoint & cp);

TaskVector compute_task_vector(const Checkpoint & model, const Checkpoint & base);

/// out = model - base, in F32.
void subtract(std::span<const float> model, std::span<const float> base, std::span<float> out);

/// out = (1 - alpha) * a + alpha * b
void linear_average(std::span<const float> a, std::span<const float> b, double alpha, std::span<float> out);
std::vector<float> linear_average(std::span<const float> a, std::span<const float> b, double alpha);

/// out = base + alpha * da + (1 - alpha) * db
void task_arithmetic(std::span<const float> base, std::span<const float> da, std::span<const float> db, double alpha,
                     std::span<float> out);
std::vector<float> task_arithmetic(std::span<const float> base, std::span<const float> da,
                                   std::span<const float> db, double alpha);

/// Keeps each element with probability `density` and rescales survivors by 1/density.
void dare_drop_rescale(std::span<const float> d, double density, const KeyedUniform & rng, std::span<float> out);
std::vector<float> dare_drop_rescale(std::span<const float> d, double density, std::uint64_t seed);

/// Elects a sign per element from sign(da + db), ties going to +, then returns the
/// weighted mean of the nonzero entries that agree with it (weights weight_a, 1 - weight_a).
/// With the default weight this is the plain disjoint mean.
void ties_sign_consensus(std::span<const float> da, std::span<const float> db, double weight_a,
                         std::span<float> out);
std::vector<float> ties_sign_consensus(std::span<const float> da, std::span<const float> db,
                                       double weight_a = 0.5);

/// Magnitude-ranked drop (DELLA's MAGPRUNE). Rank r of n (ascending |d|, ties share their
/// midrank) is dropped with p_r = (1 - density) + epsilon * (1 - 2r/(n-1)); survivors are
/// scaled by 1/(1 - p_r), which keeps every element's expectation equal to its input.
void della_magprune(std::span<const float> d, double density, double epsilon, const KeyedUniform & rng,
                    std::span<float> out);
std::vector<float> della_magprune(std::span<const float> d, double density, double epsilon, std::uint64_t seed);

/// Drop probability used by della_magprune for (mid)rank r among n elements.
double della_drop_probability(double rank, std::size_t n, double density, double epsilon) noexcept;

/// Dual-threshold mask: zeroes the ceil(gamma*n) largest and the remaining smallest
/// magnitudes so that floor(density*n) middle elements survive, unscaled.
/// Magnitude ties order by flat index (lower index counts as smaller).
void breadcrumbs_mask(std::span<const float> d, double density, double gamma, std::span<float> out);
std::vector<float> breadcrumbs_mask(std::span<const float> d, double density, double gamma);

/// Merges one tensor with an elementwise method. `base`, `a` and `b` are F32 workspaces
/// that the kernel may overwrite; the merged values are left in `a`. `base` is unused
/// (and may be empty) for LinearAverage.
void merge_tensor_elementwise(const MergeRecipe & recipe, std::string_view name, std::span<float> base,
                              std::span<float> a, std::span<float> b);

/// Whole-checkpoint elementwise merge. Output dtype follows parent A per tensor unless overridden.
Checkpoint merge_elementwise(const MergeRecipe & recipe, const Checkpoint & base, const Checkpoint & a,
                             const Checkpoint & b, std::optional<DType> output_dtype = std::nullopt);

} // namespace hmerge
