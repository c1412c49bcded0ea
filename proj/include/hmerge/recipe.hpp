#pragma once

#include "hmerge/dtype.hpp"
#include "hmerge/heads.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

namespace hmerge {

enum class MergeMethod { LinearAverage, TaskArithmetic, DareTies, Della, Breadcrumbs, Hierarchical };

std::string_view method_name(MergeMethod m) noexcept;
MergeMethod parse_method(std::string_view name);

enum class Projection { Q, K, V, O };

std::string_view projection_name(Projection p) noexcept;

/// Tensors whose name matches `pattern` (ECMAScript regex, searched anywhere in the name)
/// are attention projections with the given head layout.
struct AttentionRule {
    Projection projection = Projection::Q;
    std::string pattern;
    HeadLayout layout;
};

struct MergeRecipe {
    MergeMethod method = MergeMethod::LinearAverage;
    double alpha       = 0.5;
    double density     = 1.0;
    double epsilon     = 0.05;
    double gamma       = 0.01;
    std::uint64_t seed = 0;
    std::vector<AttentionRule> attention_patterns;

    /// Throws Error(Parameter) if any hyperparameter is out of range for the chosen method.
    void validate() const;
};

/// Default per-method density: 0.6 for DARE-TIES and DELLA, 0.9 for Breadcrumbs, 1 otherwise.
double default_density(MergeMethod m) noexcept;

/// Llama/Mistral naming for the four projections. Q and O use q_heads, K and V use kv_heads;
/// Q/K/V split along output rows and O along input columns.
std::vector<AttentionRule> default_attention_rules(std::size_t q_heads, std::size_t kv_heads, std::size_t head_dim);

MergeRecipe make_recipe(MergeMethod method);

/// Parsed recipe file: a MergeRecipe plus the file-level paths.
struct RecipeFile {
    MergeRecipe recipe;
    std::filesystem::path base;
    std::filesystem::path parent_a;
    std::filesystem::path parent_b;
    std::filesystem::path output;
    std::optional<DType> output_dtype;  // empty means "same as parent A per tensor"
    std::optional<std::filesystem::path> report;
};

/// Parses the line-oriented `key = value` recipe format. Relative paths resolve
/// against `relative_to`. All failures throw Error(Recipe).
RecipeFile parse_recipe(std::string_view text, const std::filesystem::path & relative_to = {});
RecipeFile load_recipe(const std::filesystem::path & path);

} // namespace hmerge
