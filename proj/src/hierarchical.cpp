#include "hmerge/hierarchical.hpp"

#include "hmerge/error.hpp"
#include "hmerge/kernels.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>

namespace hmerge {

LayerClassifier::LayerClassifier(const std::vector<AttentionRule> & rules) {
    for (const auto & rule : rules) {
        try {
            rules_.emplace_back(std::regex(rule.pattern, std::regex::ECMAScript), rule);
        } catch (const std::regex_error & e) {
            throw Error(ErrorKind::Recipe, fmt::format("attention pattern '{}': {}", rule.pattern, e.what()));
        }
    }
}

LayerClass LayerClassifier::classify(const std::string & name) const {
    LayerClass cls;
    cls.name = name;
    for (const auto & [re, rule] : rules_) {
        if (std::regex_search(name, re)) {
            cls.kind       = LayerKind::AttentionProjection;
            cls.projection = rule.projection;
            cls.layout     = rule.layout;
            break;
        }
    }
    return cls;
}

LayerClass classify_layer(const std::string & name, const MergeRecipe & recipe) {
    return LayerClassifier(recipe.attention_patterns).classify(name);
}

namespace {

double clamped_cosine(double dot, double sq_a, double sq_b) {
    if (sq_a == 0.0 || sq_b == 0.0) {
        return 0.0;
    }
    return std::clamp(dot / (std::sqrt(sq_a) * std::sqrt(sq_b)), 0.0, 1.0);
}

} // namespace

double layer_weight(std::span<const float> da, std::span<const float> db) {
    if (da.size() != db.size()) {
        throw Error(ErrorKind::Compatibility, fmt::format("layer_weight: delta sizes differ ({} vs {})", da.size(),
                                                          db.size()));
    }
    double dot = 0.0, sq_a = 0.0, sq_b = 0.0;
    for (std::size_t i = 0; i < da.size(); ++i) {
        dot += static_cast<double>(da[i]) * db[i];
        sq_a += static_cast<double>(da[i]) * da[i];
        sq_b += static_cast<double>(db[i]) * db[i];
    }
    return clamped_cosine(dot, sq_a, sq_b);
}

double layer_weight_from_parents(std::span<const float> base, std::span<const float> a, std::span<const float> b) {
    if (a.size() != base.size() || b.size() != base.size()) {
        throw Error(ErrorKind::Compatibility, "layer_weight: parent and base sizes differ");
    }
    double dot = 0.0, sq_a = 0.0, sq_b = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        const float da = a[i] - base[i];
        const float db = b[i] - base[i];
        dot += static_cast<double>(da) * db;
        sq_a += static_cast<double>(da) * da;
        sq_b += static_cast<double>(db) * db;
    }
    return clamped_cosine(dot, sq_a, sq_b);
}

LayerWeightReport merge_layer(const LayerClass & cls, double w, const Shape & shape, std::span<float> a,
                              std::span<const float> b, std::span<float> scratch) {
    LayerWeightReport report;
    report.name = cls.name;
    report.w    = w;
    if (cls.kind != LayerKind::AttentionProjection) {
        linear_average(a, b, w, a);
        return report;
    }
    if (shape.size() != 2) {
        throw Error(ErrorKind::Layout, fmt::format("attention projection '{}' has rank {}, expected a matrix",
                                                   cls.name, shape.size()));
    }
    if (scratch.size() != a.size()) {
        throw Error(ErrorKind::Layout, fmt::format("'{}': alignment scratch has the wrong size", cls.name));
    }
    const std::size_t rows = shape[0];
    const std::size_t cols = shape[1];
    check_layout(rows, cols, *cls.layout, cls.name);
    const HeadAlignment alignment =
        align_heads(MatrixView{a, rows, cols}, MatrixView{b, rows, cols}, *cls.layout, scratch);
    linear_average(a, scratch, w, a);
    report.aligned         = true;
    report.assignment_cost = alignment.cost;
    report.permutation     = alignment.permutation;
    return report;
}

std::pair<Checkpoint, std::vector<LayerWeightReport>>
hierarchical_merge(const Checkpoint & base, const Checkpoint & a, const Checkpoint & b, const MergeRecipe & recipe,
                   std::optional<DType> output_dtype) {
    check_compatible(base, a, "base", "parent_a");
    check_compatible(base, b, "base", "parent_b");
    const LayerClassifier classifier(recipe.attention_patterns);

    Checkpoint out;
    out.metadata = {{"merge_method", std::string(method_name(MergeMethod::Hierarchical))}};
    std::vector<LayerWeightReport> reports;
    reports.reserve(base.tensors.size());
    for (const auto & [name, bt] : base.tensors) {
        const TensorRecord & at = a.at(name);
        auto wa                 = decode_values(at);
        const auto wb           = decode_values(b.at(name));
        const double w          = layer_weight_from_parents(decode_values(bt), wa, wb);
        const LayerClass cls    = classifier.classify(name);
        std::vector<float> scratch(cls.kind == LayerKind::AttentionProjection ? wa.size() : 0);
        reports.push_back(merge_layer(cls, w, bt.shape, wa, wb, scratch));
        out.tensors.emplace(name, encode_tensor(name, bt.shape, wa, output_dtype.value_or(at.dtype)));
    }
    return {std::move(out), std::move(reports)};
}

std::string format_report_table(const std::vector<LayerWeightReport> & reports) {
    std::string s = "name,w,aligned,assignment_cost\n";
    for (const auto & r : reports) {
        s += fmt::format("{},{:.9g},{},{}\n", r.name, r.w, r.aligned ? "true" : "false",
                         r.assignment_cost ? fmt::format("{:.9g}", *r.assignment_cost) : std::string());
    }
    return s;
}

std::string format_alignment_line(const LayerWeightReport & report) {
    std::string perm;
    if (report.permutation) {
        for (std::size_t i = 0; i < report.permutation->size(); ++i) {
            perm += (i ? " " : "") + std::to_string(report.permutation->mapping[i]);
        }
    }
    return fmt::format("{}\tH={}\tperm=[{}]\tcost={:.9g}", report.name,
                       report.permutation ? report.permutation->size() : 0, perm, report.assignment_cost.value_or(0.0));
}

} // namespace hmerge
