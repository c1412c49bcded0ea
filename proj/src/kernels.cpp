#include "hmerge/kernels.hpp"

#include "hmerge/error.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hmerge {

namespace {

void require_same_size(std::size_t a, std::size_t b, const char * what) {
    if (a != b) {
        throw Error(ErrorKind::Compatibility, fmt::format("{}: buffer sizes differ ({} vs {})", what, a, b));
    }
}

// Element indices sorted by |d| ascending, ties by index.
std::vector<std::size_t> magnitude_order(std::span<const float> d) {
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
        const float mx = std::abs(d[x]);
        const float my = std::abs(d[y]);
        return mx != my ? mx < my : x < y;
    });
    return idx;
}

} // namespace

std::map<std::string, Shape> shapes_of(const Checkpoint & cp) {
    std::map<std::string, Shape> out;
    for (const auto & [name, t] : cp.tensors) {
        out.emplace(name, t.shape);
    }
    return out;
}

void check_compatible(const std::map<std::string, Shape> & a, const std::map<std::string, Shape> & b,
                      std::string_view label_a, std::string_view label_b) {
    std::vector<std::string> only_a, only_b;
    for (const auto & [name, shape] : a) {
        if (!b.count(name)) {
            only_a.push_back(name);
        }
    }
    for (const auto & [name, shape] : b) {
        if (!a.count(name)) {
            only_b.push_back(name);
        }
    }
    if (!only_a.empty() || !only_b.empty()) {
        std::string msg = fmt::format("tensor sets of {} and {} differ", label_a, label_b);
        for (const auto & n : only_a) {
            msg += fmt::format("\n  missing from {}: {}", label_b, n);
        }
        for (const auto & n : only_b) {
            msg += fmt::format("\n  missing from {}: {}", label_a, n);
        }
        throw Error(ErrorKind::Compatibility, msg);
    }
    for (const auto & [name, shape] : a) {
        const Shape & other = b.at(name);
        if (shape != other) {
            throw Error(ErrorKind::Compatibility, fmt::format("tensor '{}': shape {} in {} but {} in {}", name,
                                                              shape_to_string(shape), label_a,
                                                              shape_to_string(other), label_b));
        }
    }
}

void check_compatible(const Checkpoint & a, const Checkpoint & b, std::string_view label_a,
                      std::string_view label_b) {
    check_compatible(shapes_of(a), shapes_of(b), label_a, label_b);
}

void subtract(std::span<const float> model, std::span<const float> base, std::span<float> out) {
    require_same_size(model.size(), base.size(), "subtract");
    require_same_size(model.size(), out.size(), "subtract");
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = model[i] - base[i];
    }
}

TaskVector compute_task_vector(const Checkpoint & model, const Checkpoint & base) {
    check_compatible(model, base, "model", "base");
    TaskVector tv;
    for (const auto & [name, bt] : base.tensors) {
        const auto mv = decode_values(model.at(name));
        const auto bv = decode_values(bt);
        std::vector<float> d(bv.size());
        subtract(mv, bv, d);
        tv.deltas.emplace(name, std::move(d));
        tv.shapes.emplace(name, bt.shape);
    }
    return tv;
}

void linear_average(std::span<const float> a, std::span<const float> b, double alpha, std::span<float> out) {
    require_same_size(a.size(), b.size(), "linear_average");
    require_same_size(a.size(), out.size(), "linear_average");
    const double wa = 1.0 - alpha;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(wa * a[i] + alpha * b[i]);
    }
}

std::vector<float> linear_average(std::span<const float> a, std::span<const float> b, double alpha) {
    std::vector<float> out(a.size());
    linear_average(a, b, alpha, out);
    return out;
}

void task_arithmetic(std::span<const float> base, std::span<const float> da, std::span<const float> db, double alpha,
                     std::span<float> out) {
    require_same_size(base.size(), da.size(), "task_arithmetic");
    require_same_size(base.size(), db.size(), "task_arithmetic");
    require_same_size(base.size(), out.size(), "task_arithmetic");
    const double wb = 1.0 - alpha;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(base[i] + alpha * da[i] + wb * db[i]);
    }
}

std::vector<float> task_arithmetic(std::span<const float> base, std::span<const float> da,
                                   std::span<const float> db, double alpha) {
    std::vector<float> out(base.size());
    task_arithmetic(base, da, db, alpha, out);
    return out;
}

void dare_drop_rescale(std::span<const float> d, double density, const KeyedUniform & rng, std::span<float> out) {
    if (!(density > 0.0) || density > 1.0) {
        throw Error(ErrorKind::Parameter, fmt::format("dare density {} outside (0, 1]", density));
    }
    require_same_size(d.size(), out.size(), "dare_drop_rescale");
    if (density == 1.0) {
        std::copy(d.begin(), d.end(), out.begin());
        return;
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        out[i] = rng(i) < density ? static_cast<float>(d[i] / density) : 0.0f;
    }
}

std::vector<float> dare_drop_rescale(std::span<const float> d, double density, std::uint64_t seed) {
    std::vector<float> out(d.size());
    dare_drop_rescale(d, density, KeyedUniform(seed, ""), out);
    return out;
}

void ties_sign_consensus(std::span<const float> da, std::span<const float> db, double weight_a,
                         std::span<float> out) {
    require_same_size(da.size(), db.size(), "ties_sign_consensus");
    require_same_size(da.size(), out.size(), "ties_sign_consensus");
    const double wb = 1.0 - weight_a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x        = da[i];
        const double y        = db[i];
        const bool positive   = x + y >= 0.0;
        double num = 0.0, den = 0.0;
        if (x != 0.0 && (x > 0.0) == positive) {
            num += weight_a * x;
            den += weight_a;
        }
        if (y != 0.0 && (y > 0.0) == positive) {
            num += wb * y;
            den += wb;
        }
        out[i] = den > 0.0 ? static_cast<float>(num / den) : 0.0f;
    }
}

std::vector<float> ties_sign_consensus(std::span<const float> da, std::span<const float> db, double weight_a) {
    std::vector<float> out(da.size());
    ties_sign_consensus(da, db, weight_a, out);
    return out;
}

double della_drop_probability(double rank, std::size_t n, double density, double epsilon) noexcept {
    if (n <= 1) {
        return 1.0 - density;
    }
    return (1.0 - density) + epsilon * (1.0 - 2.0 * rank / static_cast<double>(n - 1));
}

void della_magprune(std::span<const float> d, double density, double epsilon, const KeyedUniform & rng,
                    std::span<float> out) {
    if (!(density > 0.0) || density >= 1.0 || epsilon < 0.0 || epsilon >= std::min(density, 1.0 - density)) {
        throw Error(ErrorKind::Parameter,
                    fmt::format("della needs density in (0, 1) and 0 <= epsilon < min(density, 1 - density); "
                                "got density {}, epsilon {}", density, epsilon));
    }
    require_same_size(d.size(), out.size(), "della_magprune");
    const std::size_t n = d.size();
    const auto order    = magnitude_order(d);
    // A tie group is delimited before any of its members is written, so out may alias d.
    for (std::size_t lo = 0; lo < n;) {
        std::size_t hi = lo + 1;
        while (hi < n && std::abs(d[order[hi]]) == std::abs(d[order[lo]])) {
            ++hi;
        }
        const double midrank = 0.5 * static_cast<double>(lo + hi - 1);
        const double keep    = 1.0 - della_drop_probability(midrank, n, density, epsilon);
        for (std::size_t k = lo; k < hi; ++k) {
            const std::size_t i = order[k];
            out[i]              = rng(i) < keep ? static_cast<float>(d[i] / keep) : 0.0f;
        }
        lo = hi;
    }
}

std::vector<float> della_magprune(std::span<const float> d, double density, double epsilon, std::uint64_t seed) {
    std::vector<float> out(d.size());
    della_magprune(d, density, epsilon, KeyedUniform(seed, ""), out);
    return out;
}

void breadcrumbs_mask(std::span<const float> d, double density, double gamma, std::span<float> out) {
    if (!(density > 0.0) || density > 1.0 || gamma < 0.0 || gamma >= 1.0 || density + gamma > 1.0 + 1e-12) {
        throw Error(ErrorKind::Parameter,
                    fmt::format("breadcrumbs needs density in (0, 1], gamma in [0, 1), density + gamma <= 1; "
                                "got density {}, gamma {}", density, gamma));
    }
    require_same_size(d.size(), out.size(), "breadcrumbs_mask");
    const std::size_t n = d.size();
    // the small slack absorbs representation error such as 0.9 * 1000 = 900.0000000000001
    const auto top  = static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n) - 1e-9));
    const auto keep = std::min(n - top, static_cast<std::size_t>(std::floor(density * static_cast<double>(n) + 1e-9)));
    const std::size_t bottom = n - top - keep;

    const auto order = magnitude_order(d);
    if (out.data() != d.data()) {
        std::copy(d.begin(), d.end(), out.begin());
    }
    for (std::size_t k = 0; k < bottom; ++k) {
        out[order[k]] = 0.0f;
    }
    for (std::size_t k = n - top; k < n; ++k) {
        out[order[k]] = 0.0f;
    }
}

std::vector<float> breadcrumbs_mask(std::span<const float> d, double density, double gamma) {
    std::vector<float> out(d.size());
    breadcrumbs_mask(d, density, gamma, out);
    return out;
}

void merge_tensor_elementwise(const MergeRecipe & recipe, std::string_view name, std::span<float> base,
                              std::span<float> a, std::span<float> b) {
    switch (recipe.method) {
        case MergeMethod::LinearAverage:
            linear_average(a, b, recipe.alpha, a);
            return;
        case MergeMethod::TaskArithmetic:
            subtract(a, base, a);
            subtract(b, base, b);
            task_arithmetic(base, a, b, recipe.alpha, a);
            return;
        case MergeMethod::DareTies: {
            subtract(a, base, a);
            subtract(b, base, b);
            dare_drop_rescale(a, recipe.density, KeyedUniform(recipe.seed, name, 0), a);
            dare_drop_rescale(b, recipe.density, KeyedUniform(recipe.seed, name, 1), b);
            ties_sign_consensus(a, b, recipe.alpha, a);
            for (std::size_t i = 0; i < a.size(); ++i) {
                a[i] = static_cast<float>(static_cast<double>(base[i]) + a[i]);
            }
            return;
        }
        case MergeMethod::Della:
            subtract(a, base, a);
            subtract(b, base, b);
            della_magprune(a, recipe.density, recipe.epsilon, KeyedUniform(recipe.seed, name, 0), a);
            della_magprune(b, recipe.density, recipe.epsilon, KeyedUniform(recipe.seed, name, 1), b);
            task_arithmetic(base, a, b, recipe.alpha, a);
            return;
        case MergeMethod::Breadcrumbs:
            subtract(a, base, a);
            subtract(b, base, b);
            breadcrumbs_mask(a, recipe.density, recipe.gamma, a);
            breadcrumbs_mask(b, recipe.density, recipe.gamma, b);
            task_arithmetic(base, a, b, recipe.alpha, a);
            return;
        case MergeMethod::Hierarchical:
            break;
    }
    throw Error(ErrorKind::Parameter,
                fmt::format("method '{}' is not an elementwise method", method_name(recipe.method)));
}

Checkpoint merge_elementwise(const MergeRecipe & recipe, const Checkpoint & base, const Checkpoint & a,
                             const Checkpoint & b, std::optional<DType> output_dtype) {
    recipe.validate();
    if (recipe.method == MergeMethod::Hierarchical) {
        throw Error(ErrorKind::Parameter, "merge_elementwise does not handle the hierarchical method");
    }
    check_compatible(base, a, "base", "parent_a");
    check_compatible(base, b, "base", "parent_b");

    Checkpoint out;
    out.metadata = {{"merge_method", std::string(method_name(recipe.method))}};
    for (const auto & [name, bt] : base.tensors) {
        const TensorRecord & at = a.at(name);
        auto wa = decode_values(at);
        auto wb = decode_values(b.at(name));
        std::vector<float> wbase;
        if (recipe.method != MergeMethod::LinearAverage) {
            wbase = decode_values(bt);
        }
        merge_tensor_elementwise(recipe, name, wbase, wa, wb);
        out.tensors.emplace(name, encode_tensor(name, bt.shape, wa, output_dtype.value_or(at.dtype)));
    }
    return out;
}

} // namespace hmerge
