#include "hmerge/recipe.hpp"

#include "hmerge/error.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace hmerge {

namespace fs = std::filesystem;

std::string_view method_name(MergeMethod m) noexcept {
    switch (m) {
        case MergeMethod::LinearAverage:  return "linear_average";
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::DareTies:       return "dare_ties";
        case MergeMethod::Della:          return "della";
        case MergeMethod::Breadcrumbs:    return "breadcrumbs";
        case MergeMethod::Hierarchical:   return "hierarchical";
    }
    return "?";
}

MergeMethod parse_method(std::string_view name) {
    for (auto m : {MergeMethod::LinearAverage, MergeMethod::TaskArithmetic, MergeMethod::DareTies, MergeMethod::Della,
                   MergeMethod::Breadcrumbs, MergeMethod::Hierarchical}) {
        if (method_name(m) == name) {
            return m;
        }
    }
    throw Error(ErrorKind::Parameter, fmt::format("unknown merge method '{}'", name));
}

std::string_view projection_name(Projection p) noexcept {
    switch (p) {
        case Projection::Q: return "q";
        case Projection::K: return "k";
        case Projection::V: return "v";
        case Projection::O: return "o";
    }
    return "?";
}

double default_density(MergeMethod m) noexcept {
    switch (m) {
        case MergeMethod::DareTies:
        case MergeMethod::Della:       return 0.6;
        case MergeMethod::Breadcrumbs: return 0.9;
        default:                       return 1.0;
    }
}

std::vector<AttentionRule> default_attention_rules(std::size_t q_heads, std::size_t kv_heads, std::size_t head_dim) {
    return {
        {Projection::Q, R"((^|\.)self_attn\.q_proj\.weight$)", {q_heads, head_dim, SplitAxis::Rows}},
        {Projection::K, R"((^|\.)self_attn\.k_proj\.weight$)", {kv_heads, head_dim, SplitAxis::Rows}},
        {Projection::V, R"((^|\.)self_attn\.v_proj\.weight$)", {kv_heads, head_dim, SplitAxis::Rows}},
        {Projection::O, R"((^|\.)self_attn\.o_proj\.weight$)", {q_heads, head_dim, SplitAxis::Columns}},
    };
}

MergeRecipe make_recipe(MergeMethod method) {
    MergeRecipe r;
    r.method             = method;
    r.density            = default_density(method);
    // Mistral-7B geometry: 32 query heads, 8 key/value heads, head_dim 128
    r.attention_patterns = default_attention_rules(32, 8, 128);
    return r;
}

void MergeRecipe::validate() const {
    auto fail = [](const std::string & msg) { throw Error(ErrorKind::Parameter, msg); };
    for (double x : {alpha, density, epsilon, gamma}) {
        if (!std::isfinite(x)) {
            fail("hyperparameters must be finite");
        }
    }
    if (alpha < 0.0 || alpha > 1.0) {
        fail(fmt::format("alpha {} outside [0, 1]", alpha));
    }
    if (density <= 0.0 || density > 1.0) {
        fail(fmt::format("density {} outside (0, 1]", density));
    }
    if (epsilon < 0.0) {
        fail(fmt::format("epsilon {} must be >= 0", epsilon));
    }
    if (gamma < 0.0 || gamma >= 1.0) {
        fail(fmt::format("gamma {} outside [0, 1)", gamma));
    }
    if (method == MergeMethod::Breadcrumbs && density + gamma > 1.0 + 1e-12) {
        fail(fmt::format("density {} + gamma {} exceeds 1", density, gamma));
    }
    if (method == MergeMethod::Della) {
        if (density >= 1.0) {
            fail("della needs density < 1");
        }
        if (epsilon >= std::min(density, 1.0 - density)) {
            fail(fmt::format("della needs epsilon {} < min(density, 1 - density) = {}", epsilon,
                             std::min(density, 1.0 - density)));
        }
    }
    for (const auto & rule : attention_patterns) {
        if (rule.layout.num_heads == 0 || rule.layout.head_dim == 0) {
            fail(fmt::format("attention rule '{}': head count and head_dim must be positive", rule.pattern));
        }
        try {
            std::regex re(rule.pattern, std::regex::ECMAScript);
        } catch (const std::regex_error & e) {
            fail(fmt::format("attention pattern '{}' is not a valid regex: {}", rule.pattern, e.what()));
        }
    }
}

namespace {

std::string_view trim(std::string_view s) {
    const auto ws = " \t\r\n";
    const auto b  = s.find_first_not_of(ws);
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

std::string unquote(std::string_view v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') {
        v = v.substr(1, v.size() - 2);
    }
    return std::string(v);
}

[[noreturn]] void recipe_error(std::size_t line, const std::string & msg) {
    throw Error(ErrorKind::Recipe, fmt::format("line {}: {}", line, msg));
}

double parse_real(std::string_view v, std::size_t line, std::string_view key) {
    double x       = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        recipe_error(line, fmt::format("'{}' expects a number, got '{}'", key, v));
    }
    return x;
}

std::uint64_t parse_uint(std::string_view v, std::size_t line, std::string_view key) {
    std::uint64_t x = 0;
    const auto res  = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        recipe_error(line, fmt::format("'{}' expects a non-negative integer, got '{}'", key, v));
    }
    return x;
}

DType parse_output_dtype(std::string_view v, std::size_t line) {
    std::string upper(v);
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    if (upper == "BF16") return DType::BF16;
    if (upper == "F16")  return DType::F16;
    if (upper == "F32")  return DType::F32;
    recipe_error(line, fmt::format("output_dtype must be auto, bf16, f16 or f32, got '{}'", v));
}

} // namespace

RecipeFile parse_recipe(std::string_view text, const fs::path & relative_to) {
    static const std::set<std::string, std::less<>> kTopKeys = {
        "method", "alpha", "density", "epsilon", "gamma", "seed",
        "base", "parent_a", "parent_b", "output", "output_dtype", "report",
    };
    static const std::set<std::string, std::less<>> kAttentionKeys = {
        "pattern.q", "pattern.k", "pattern.v", "pattern.o", "heads.q", "heads.kv", "head_dim",
    };

    std::map<std::string, std::pair<std::string, std::size_t>> top;
    std::map<std::string, std::pair<std::string, std::size_t>> attention;
    bool in_attention = false;

    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#' || line.front() == ';') {
            continue;
        }
        if (line.front() == '[') {
            if (line == "[attention]") {
                in_attention = true;
                continue;
            }
            recipe_error(line_no, fmt::format("unknown section {}", line));
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            recipe_error(line_no, fmt::format("expected 'key = value', got '{}'", line));
        }
        const std::string key(trim(line.substr(0, eq)));
        const std::string value = unquote(trim(line.substr(eq + 1)));
        const auto & allowed    = in_attention ? kAttentionKeys : kTopKeys;
        if (!allowed.count(key)) {
            recipe_error(line_no, fmt::format("unknown key '{}'{}", key, in_attention ? " in [attention]" : ""));
        }
        auto & target = in_attention ? attention : top;
        if (!target.emplace(key, std::make_pair(value, line_no)).second) {
            recipe_error(line_no, fmt::format("duplicate key '{}'", key));
        }
    }

    auto get = [](const auto & m, const std::string & k) -> const std::pair<std::string, std::size_t> * {
        auto it = m.find(k);
        return it == m.end() ? nullptr : &it->second;
    };

    RecipeFile rf;
    const auto * method = get(top, "method");
    if (!method) {
        throw Error(ErrorKind::Recipe, "missing required key 'method'");
    }
    try {
        rf.recipe = make_recipe(parse_method(method->first));
    } catch (const Error & e) {
        recipe_error(method->second, e.what());
    }
    MergeRecipe & r = rf.recipe;
    if (auto * v = get(top, "alpha"))   r.alpha   = parse_real(v->first, v->second, "alpha");
    if (auto * v = get(top, "density")) r.density = parse_real(v->first, v->second, "density");
    if (auto * v = get(top, "epsilon")) r.epsilon = parse_real(v->first, v->second, "epsilon");
    if (auto * v = get(top, "gamma"))   r.gamma   = parse_real(v->first, v->second, "gamma");
    if (auto * v = get(top, "seed"))    r.seed    = parse_uint(v->first, v->second, "seed");

    auto path_of = [&](const std::string & key, bool required) -> std::optional<fs::path> {
        const auto * v = get(top, key);
        if (!v || v->first.empty()) {
            if (required) {
                throw Error(ErrorKind::Recipe, fmt::format("missing required key '{}'", key));
            }
            return std::nullopt;
        }
        fs::path p(v->first);
        return p.is_absolute() || relative_to.empty() ? p : relative_to / p;
    };
    rf.base     = *path_of("base", true);
    rf.parent_a = *path_of("parent_a", true);
    rf.parent_b = *path_of("parent_b", true);
    rf.output   = *path_of("output", true);
    rf.report   = path_of("report", false);
    if (auto * v = get(top, "output_dtype"); v && v->first != "auto" && !v->first.empty()) {
        rf.output_dtype = parse_output_dtype(v->first, v->second);
    }

    std::size_t q_heads = 32, kv_heads = 8, head_dim = 128;
    if (auto * v = get(attention, "heads.q"))  q_heads  = parse_uint(v->first, v->second, "heads.q");
    if (auto * v = get(attention, "heads.kv")) kv_heads = parse_uint(v->first, v->second, "heads.kv");
    if (auto * v = get(attention, "head_dim")) head_dim = parse_uint(v->first, v->second, "head_dim");
    std::vector<AttentionRule> rules;
    for (auto & rule : default_attention_rules(q_heads, kv_heads, head_dim)) {
        const std::string key = fmt::format("pattern.{}", projection_name(rule.projection));
        if (auto * v = get(attention, key)) {
            // an empty pattern switches alignment off for that projection
            if (v->first.empty()) {
                continue;
            }
            rule.pattern = v->first;
        }
        rules.push_back(std::move(rule));
    }
    r.attention_patterns = std::move(rules);

    try {
        r.validate();
    } catch (const Error & e) {
        throw Error(ErrorKind::Recipe, e.what());
    }
    return rf;
}

RecipeFile load_recipe(const fs::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorKind::Recipe, fmt::format("cannot open recipe '{}'", path.string()));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_recipe(ss.str(), path.parent_path());
}

} // namespace hmerge
