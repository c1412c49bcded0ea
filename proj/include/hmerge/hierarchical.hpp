#pragma once

#include "hmerge/checkpoint.hpp"
#include "hmerge/heads.hpp"
#include "hmerge/recipe.hpp"

#include <optional>
#include <regex>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace hmerge {

enum class LayerKind { AttentionProjection, Other };

struct LayerClass {
    std::string name;
    LayerKind kind = LayerKind::Other;
    std::optional<Projection> projection;
    std::optional<HeadLayout> layout;
};

/// Compiled form of a recipe's attention rules. First matching rule wins.
class LayerClassifier {
public:
    explicit LayerClassifier(const std::vector<AttentionRule> & rules);

    LayerClass classify(const std::string & name) const;

private:
    std::vector<std::pair<std::regex, AttentionRule>> rules_;
};

LayerClass classify_layer(const std::string & name, const MergeRecipe & recipe);

struct LayerWeightReport {
    std::string name;
    double w     = 0.0;
    bool aligned = false;
    std::optional<double> assignment_cost;
    std::optional<HeadPermutation> permutation;
};

/// max(0, cos(da, db)) over the flattened deltas; 0 when either delta is all zero.
double layer_weight(std::span<const float> da, std::span<const float> db);

/// layer_weight(a - base, b - base) without materializing the deltas.
double layer_weight_from_parents(std::span<const float> base, std::span<const float> a, std::span<const float> b);

/// Interpolates one tensor: a <- (1 - w) a + w b', where b' is b with its heads
/// aligned to a for attention projections and b itself otherwise. `scratch`
/// holds b' and must have a's size for attention projections (may be empty otherwise).
LayerWeightReport merge_layer(const LayerClass & cls, double w, const Shape & shape, std::span<float> a,
                              std::span<const float> b, std::span<float> scratch);

/// Per-tensor cosine-weighted interpolation with head alignment on attention projections.
/// Returns the merged checkpoint and one report per tensor, in name order.
std::pair<Checkpoint, std::vector<LayerWeightReport>>
hierarchical_merge(const Checkpoint & base, const Checkpoint & a, const Checkpoint & b, const MergeRecipe & recipe,
                   std::optional<DType> output_dtype = std::nullopt);

/// "name,w,aligned,assignment_cost" table, one row per report.
std::string format_report_table(const std::vector<LayerWeightReport> & reports);

/// One line per aligned tensor: name, head count, permutation, assignment cost.
std::string format_alignment_line(const LayerWeightReport & report);

} // namespace hmerge
