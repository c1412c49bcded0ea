#include "hmerge/testkit.hpp"

#include "hmerge/error.hpp"
#include "hmerge/random.hpp"

#include <fmt/core.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <regex>

namespace hmerge::testkit {

namespace fs = std::filesystem;

namespace {

constexpr double kInitStd = 0.02;
// perturbations are 1% of the base spread
constexpr double kPerturbScale = 0.01 * kInitStd;

enum Stream : std::uint32_t {
    kBaseStream    = 10,
    kSharedStream  = 11,
    kParentAStream = 12,
    kParentBStream = 13,
    kShuffleStream = 14,
};

// Box-Muller over counter-addressed uniforms; element i uses counters 2i and 2i+1.
std::vector<double> gaussian(std::uint64_t seed, const std::string & name, std::uint32_t stream, std::size_t n) {
    const KeyedUniform rng(seed, name, stream);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u1 = (static_cast<double>(rng.bits(2 * i)) + 1.0) * 0x1p-32;  // (0, 1]
        const double u2 = rng(2 * i + 1);
        out[i] = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    return out;
}

std::vector<float> round_trip(const std::vector<float> & v, DType dtype, const std::string & name, const Shape & shape) {
    return decode_values(encode_tensor(name, shape, v, dtype));
}

HeadPermutation seeded_shuffle(std::uint64_t seed, const std::string & name, std::size_t h) {
    const KeyedUniform rng(seed, name, kShuffleStream);
    std::vector<std::size_t> p(h);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = h; i-- > 1;) {
        const auto j = static_cast<std::size_t>(rng(i) * static_cast<double>(i + 1));
        std::swap(p[i], p[std::min(j, i)]);
    }
    if (h > 1 && std::is_sorted(p.begin(), p.end())) {
        std::swap(p[0], p[1]);
    }
    return HeadPermutation{std::move(p)};
}

struct ToyTensor {
    std::string name;
    Shape shape;
    DType dtype;
    bool is_norm = false;
};

std::vector<ToyTensor> toy_layout(const ToyPreset & p) {
    std::vector<ToyTensor> t;
    t.push_back({"model.embed_tokens.weight", {p.vocab, p.hidden}, DType::BF16});
    t.push_back({"model.norm.weight", {p.hidden}, DType::F32, true});
    t.push_back({"lm_head.weight", {p.vocab, p.hidden}, DType::BF16});
    for (std::size_t l = 0; l < p.layers; ++l) {
        const std::string pre = fmt::format("model.layers.{}.", l);
        t.push_back({pre + "input_layernorm.weight", {p.hidden}, DType::F32, true});
        t.push_back({pre + "post_attention_layernorm.weight", {p.hidden}, DType::F32, true});
        t.push_back({pre + "self_attn.q_proj.weight", {p.q_heads * p.head_dim, p.hidden}, DType::BF16});
        t.push_back({pre + "self_attn.k_proj.weight", {p.kv_dim(), p.hidden}, DType::BF16});
        t.push_back({pre + "self_attn.v_proj.weight", {p.kv_dim(), p.hidden}, DType::BF16});
        t.push_back({pre + "self_attn.o_proj.weight", {p.hidden, p.q_heads * p.head_dim}, DType::BF16});
        t.push_back({pre + "mlp.gate_proj.weight", {p.intermediate(), p.hidden}, DType::BF16});
        t.push_back({pre + "mlp.up_proj.weight", {p.intermediate(), p.hidden}, DType::BF16});
        t.push_back({pre + "mlp.down_proj.weight", {p.hidden, p.intermediate()}, DType::BF16});
    }
    return t;
}

bool ends_with(const std::string & s, const std::string & suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace

void ToyPreset::validate() const {
    auto fail = [](const std::string & m) { throw Error(ErrorKind::Parameter, "toy preset: " + m); };
    if (layers == 0 || hidden == 0 || q_heads == 0 || kv_heads == 0 || head_dim == 0 || vocab == 0) {
        fail("all extents must be positive");
    }
    if (hidden != q_heads * head_dim) {
        fail(fmt::format("hidden {} != q_heads {} x head_dim {}", hidden, q_heads, head_dim));
    }
    if (q_heads % kv_heads != 0) {
        fail(fmt::format("q_heads {} not divisible by kv_heads {}", q_heads, kv_heads));
    }
}

ToyPreset ToyPreset::mistral_micro(std::uint64_t seed) {
    ToyPreset p;
    p.seed = seed;
    return p;
}

ToyPreset preset_by_name(const std::string & name, std::uint64_t seed) {
    if (name == "mistral-micro") {
        return ToyPreset::mistral_micro(seed);
    }
    throw Error(ErrorKind::Parameter, fmt::format("unknown toy preset '{}'", name));
}

ToyTrio gen_toy_trio(const ToyPreset & preset) {
    preset.validate();
    ToyTrio trio;
    trio.base.metadata     = {{"format", "pt"}, {"toy_role", "base"}};
    trio.parent_a.metadata = {{"format", "pt"}, {"toy_role", "parent_a"}};
    trio.parent_b.metadata = {{"format", "pt"}, {"toy_role", "parent_b"}};

    for (const auto & spec : toy_layout(preset)) {
        const std::size_t n = shape_numel(spec.shape);
        trio.manifest.parameter_count += n;

        const auto z = gaussian(preset.seed, spec.name, kBaseStream, n);
        std::vector<float> base(n);
        for (std::size_t i = 0; i < n; ++i) {
            base[i] = static_cast<float>(spec.is_norm ? 1.0 + kInitStd * z[i] : kInitStd * z[i]);
        }
        base = round_trip(base, spec.dtype, spec.name, spec.shape);

        // shared + independent components give cos(delta_a, delta_b) around 0.5
        const auto shared = gaussian(preset.seed, spec.name, kSharedStream, n);
        const auto own_a  = gaussian(preset.seed, spec.name, kParentAStream, n);
        const auto own_b  = gaussian(preset.seed, spec.name, kParentBStream, n);
        std::vector<float> pa(n), pb(n);
        for (std::size_t i = 0; i < n; ++i) {
            pa[i] = static_cast<float>(base[i] + kPerturbScale * (shared[i] + own_a[i]) / std::numbers::sqrt2);
            pb[i] = static_cast<float>(base[i] + kPerturbScale * (shared[i] + own_b[i]) / std::numbers::sqrt2);
        }
        pa = round_trip(pa, spec.dtype, spec.name, spec.shape);
        pb = round_trip(pb, spec.dtype, spec.name, spec.shape);

        if (ends_with(spec.name, "self_attn.q_proj.weight")) {
            const HeadPermutation sigma = seeded_shuffle(preset.seed, spec.name, preset.q_heads);
            const std::size_t slab      = preset.head_dim * spec.shape[1];
            std::vector<float> shuffled(n);
            for (std::size_t i = 0; i < preset.q_heads; ++i) {
                std::copy_n(pb.begin() + static_cast<std::ptrdiff_t>(i * slab), slab,
                            shuffled.begin() + static_cast<std::ptrdiff_t>(sigma.mapping[i] * slab));
            }
            pb = std::move(shuffled);
            trio.manifest.planted.emplace(spec.name, sigma);
        }

        std::vector<float> da(n), db(n);
        for (std::size_t i = 0; i < n; ++i) {
            da[i] = pa[i] - base[i];
            db[i] = pb[i] - base[i];
        }
        trio.manifest.delta_a.emplace(spec.name, std::move(da));
        trio.manifest.delta_b.emplace(spec.name, std::move(db));
        trio.base.add(encode_tensor(spec.name, spec.shape, base, spec.dtype));
        trio.parent_a.add(encode_tensor(spec.name, spec.shape, pa, spec.dtype));
        trio.parent_b.add(encode_tensor(spec.name, spec.shape, pb, spec.dtype));
    }
    return trio;
}

std::vector<AttentionRule> toy_attention_rules(const ToyPreset & preset) {
    return default_attention_rules(preset.q_heads, preset.kv_heads, preset.head_dim);
}

std::string toy_recipe_text(const ToyPreset & preset, MergeMethod method, const std::string & output,
                            std::uint64_t seed) {
    return fmt::format("# toy merge recipe\n"
                       "method = {}\n"
                       "seed = {}\n"
                       "base = base.safetensors\n"
                       "parent_a = parent_a.safetensors\n"
                       "parent_b = parent_b.safetensors\n"
                       "output = {}\n"
                       "\n[attention]\n"
                       "heads.q = {}\n"
                       "heads.kv = {}\n"
                       "head_dim = {}\n",
                       method_name(method), seed, output, preset.q_heads, preset.kv_heads, preset.head_dim);
}

void write_toy_trio(const ToyTrio & trio, const ToyPreset & preset, const fs::path & dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorKind::Io, fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
    }
    save_checkpoint(trio.base, dir / "base.safetensors");
    save_checkpoint(trio.parent_a, dir / "parent_a.safetensors");
    save_checkpoint(trio.parent_b, dir / "parent_b.safetensors");

    std::ofstream m(dir / "manifest.txt");
    fmt::print(m, "preset mistral-micro\nseed {}\nlayers {}\nhidden {}\nq_heads {}\nkv_heads {}\nhead_dim {}\n"
                  "vocab {}\nintermediate {}\n",
               preset.seed, preset.layers, preset.hidden, preset.q_heads, preset.kv_heads, preset.head_dim,
               preset.vocab, preset.intermediate());
    fmt::print(m, "parameter_count {}\ntensor_count {}\n", trio.manifest.parameter_count, trio.base.tensors.size());
    for (const auto & [name, sigma] : trio.manifest.planted) {
        std::string p;
        for (auto j : sigma.mapping) {
            p += fmt::format(" {}", j);
        }
        fmt::print(m, "planted {}{}\n", name, p);
    }
    for (const auto & [name, t] : trio.base.tensors) {
        auto l2 = [](const std::vector<float> & v) {
            double s = 0.0;
            for (float x : v) {
                s += static_cast<double>(x) * x;
            }
            return std::sqrt(s);
        };
        fmt::print(m, "delta {} {} {} norm_a={:.9g} norm_b={:.9g}\n", name, dtype_name(t.dtype),
                   shape_to_string(t.shape), l2(trio.manifest.delta_a.at(name)), l2(trio.manifest.delta_b.at(name)));
    }
    if (!m) {
        throw Error(ErrorKind::Io, "cannot write manifest.txt");
    }
    std::ofstream r(dir / "hierarchical.recipe");
    r << toy_recipe_text(preset, MergeMethod::Hierarchical, "merged.safetensors");
}

// ---------------------------------------------------------------------------
// oracles

BruteForceAssignment brute_force_assignment(const CostMatrix & c) {
    const std::size_t n = c.size();
    if (n > 8) {
        throw Error(ErrorKind::Parameter, fmt::format("brute force assignment limited to 8x8, got {}x{}", n, n));
    }
    double max_abs = 0.0;
    for (double x : c.values()) {
        max_abs = std::max(max_abs, std::abs(x));
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<std::pair<std::vector<std::size_t>, double>> all;
    double best = INFINITY;
    do {
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            cost += c(i, perm[i]);
        }
        best = std::min(best, cost);
        all.emplace_back(perm, cost);
    } while (std::next_permutation(perm.begin(), perm.end()));

    const double tol = static_cast<double>(n) * 1e-9 * (1.0 + max_abs);
    for (auto & [p, cost] : all) {  // already in lexicographic order
        if (cost <= best + tol) {
            return {HeadPermutation{p}, cost};
        }
    }
    return {};
}

CostMatrix reference_head_costs(const std::vector<float> & a, const std::vector<float> & b, std::size_t rows,
                                std::size_t cols, const HeadLayout & layout) {
    const std::size_t h = layout.num_heads;
    const std::size_t d = layout.head_dim;
    auto slab = [&](const std::vector<float> & m, std::size_t head) {
        std::vector<float> out;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t col = 0; col < cols; ++col) {
                const std::size_t along = layout.split_axis == SplitAxis::Rows ? r : col;
                if (along / d == head) {
                    out.push_back(m[r * cols + col]);
                }
            }
        }
        return out;
    };
    CostMatrix c(h);
    for (std::size_t i = 0; i < h; ++i) {
        const auto ha = slab(a, i);
        for (std::size_t j = 0; j < h; ++j) {
            const auto hb = slab(b, j);
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < ha.size(); ++k) {
                dot += static_cast<double>(ha[k]) * hb[k];
                na += static_cast<double>(ha[k]) * ha[k];
                nb += static_cast<double>(hb[k]) * hb[k];
            }
            double cost = 1.0;
            if (na > 0.0 && nb > 0.0) {
                cost = 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
            }
            c(i, j) = std::min(2.0, std::max(0.0, cost));
        }
    }
    return c;
}

namespace {

std::vector<std::size_t> sorted_by_magnitude(const std::vector<float> & d) {
    std::vector<std::pair<float, std::size_t>> keyed(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        keyed[i] = {std::fabs(d[i]), i};
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<std::size_t> out(d.size());
    for (std::size_t k = 0; k < d.size(); ++k) {
        out[k] = keyed[k].second;
    }
    return out;
}

std::vector<float> ref_della(const std::vector<float> & d, double density, double epsilon, const KeyedUniform & rng) {
    const std::size_t n = d.size();
    const auto order    = sorted_by_magnitude(d);
    std::vector<double> midrank(n);
    std::size_t k = 0;
    while (k < n) {
        std::size_t e = k;
        while (e + 1 < n && std::fabs(d[order[e + 1]]) == std::fabs(d[order[k]])) {
            ++e;
        }
        for (std::size_t q = k; q <= e; ++q) {
            midrank[order[q]] = 0.5 * static_cast<double>(k + e);
        }
        k = e + 1;
    }
    std::vector<float> out(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        double p = 1.0 - density;
        if (n > 1) {
            p = (1.0 - density) + epsilon * (1.0 - 2.0 * midrank[i] / static_cast<double>(n - 1));
        }
        const double keep = 1.0 - p;
        if (rng(i) < keep) {
            out[i] = static_cast<float>(d[i] / keep);
        }
    }
    return out;
}

std::vector<float> ref_breadcrumbs(const std::vector<float> & d, double density, double gamma) {
    const std::size_t n = d.size();
    std::size_t top     = static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n) - 1e-9));
    std::size_t keep    = static_cast<std::size_t>(std::floor(density * static_cast<double>(n) + 1e-9));
    keep                = std::min(keep, n - top);
    const auto order    = sorted_by_magnitude(d);
    std::vector<float> out = d;
    for (std::size_t k = 0; k < n; ++k) {
        const bool in_middle = k >= n - top - keep && k < n - top;
        if (!in_middle) {
            out[order[k]] = 0.0f;
        }
    }
    return out;
}

bool matches_attention(const std::string & name, const MergeRecipe & recipe, HeadLayout & layout) {
    for (const auto & rule : recipe.attention_patterns) {
        if (std::regex_search(name, std::regex(rule.pattern))) {
            layout = rule.layout;
            return true;
        }
    }
    return false;
}

} // namespace

Checkpoint reference_merge(MergeMethod method, const Checkpoint & base, const Checkpoint & a, const Checkpoint & b,
                           const MergeRecipe & recipe, std::optional<DType> output_dtype) {
    for (const auto * other : {&a, &b}) {
        if (other->tensors.size() != base.tensors.size()) {
            throw Error(ErrorKind::Compatibility, "reference_merge: tensor counts differ");
        }
        for (const auto & [name, t] : base.tensors) {
            auto it = other->tensors.find(name);
            if (it == other->tensors.end()) {
                throw Error(ErrorKind::Compatibility, "reference_merge: missing tensor " + name);
            }
            if (it->second.shape != t.shape) {
                throw Error(ErrorKind::Compatibility, "reference_merge: shape mismatch on " + name);
            }
        }
    }

    const double alpha = recipe.alpha;
    Checkpoint out;
    out.metadata = {{"merge_method", std::string(method_name(method))}};
    for (const auto & [name, bt] : base.tensors) {
        const auto vb       = decode_values(bt);
        const auto va       = decode_values(a.tensors.at(name));
        const auto vbb      = decode_values(b.tensors.at(name));
        const std::size_t n = vb.size();
        std::vector<float> da(n), db(n), merged(n);
        for (std::size_t i = 0; i < n; ++i) {
            da[i] = va[i] - vb[i];
            db[i] = vbb[i] - vb[i];
        }

        switch (method) {
            case MergeMethod::LinearAverage:
                for (std::size_t i = 0; i < n; ++i) {
                    merged[i] = static_cast<float>((1.0 - alpha) * va[i] + alpha * vbb[i]);
                }
                break;
            case MergeMethod::TaskArithmetic:
                for (std::size_t i = 0; i < n; ++i) {
                    merged[i] = static_cast<float>(vb[i] + alpha * da[i] + (1.0 - alpha) * db[i]);
                }
                break;
            case MergeMethod::DareTies: {
                const KeyedUniform ra(recipe.seed, name, 0), rb(recipe.seed, name, 1);
                for (std::size_t i = 0; i < n; ++i) {
                    double x = 0.0, y = 0.0;
                    if (recipe.density >= 1.0) {
                        x = da[i];
                        y = db[i];
                    } else {
                        x = ra(i) < recipe.density ? static_cast<float>(da[i] / recipe.density) : 0.0f;
                        y = rb(i) < recipe.density ? static_cast<float>(db[i] / recipe.density) : 0.0f;
                    }
                    const int sign = (x + y >= 0.0) ? 1 : -1;
                    double num = 0.0, den = 0.0;
                    if (x != 0.0 && (x > 0.0 ? 1 : -1) == sign) {
                        num += alpha * x;
                        den += alpha;
                    }
                    if (y != 0.0 && (y > 0.0 ? 1 : -1) == sign) {
                        num += (1.0 - alpha) * y;
                        den += (1.0 - alpha);
                    }
                    const float consensus = den > 0.0 ? static_cast<float>(num / den) : 0.0f;
                    merged[i]             = static_cast<float>(static_cast<double>(vb[i]) + consensus);
                }
                break;
            }
            case MergeMethod::Della: {
                const auto pa = ref_della(da, recipe.density, recipe.epsilon, KeyedUniform(recipe.seed, name, 0));
                const auto pb = ref_della(db, recipe.density, recipe.epsilon, KeyedUniform(recipe.seed, name, 1));
                for (std::size_t i = 0; i < n; ++i) {
                    merged[i] = static_cast<float>(vb[i] + alpha * pa[i] + (1.0 - alpha) * pb[i]);
                }
                break;
            }
            case MergeMethod::Breadcrumbs: {
                const auto pa = ref_breadcrumbs(da, recipe.density, recipe.gamma);
                const auto pb = ref_breadcrumbs(db, recipe.density, recipe.gamma);
                for (std::size_t i = 0; i < n; ++i) {
                    merged[i] = static_cast<float>(vb[i] + alpha * pa[i] + (1.0 - alpha) * pb[i]);
                }
                break;
            }
            case MergeMethod::Hierarchical: {
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    dot += static_cast<double>(da[i]) * db[i];
                    na += static_cast<double>(da[i]) * da[i];
                    nb += static_cast<double>(db[i]) * db[i];
                }
                double w = 0.0;
                if (na != 0.0 && nb != 0.0) {
                    w = std::min(1.0, std::max(0.0, dot / (std::sqrt(na) * std::sqrt(nb))));
                }
                std::vector<float> pb = vbb;
                HeadLayout layout;
                if (matches_attention(name, recipe, layout)) {
                    if (bt.shape.size() != 2) {
                        throw Error(ErrorKind::Layout, "reference_merge: attention tensor is not a matrix");
                    }
                    const std::size_t rows = bt.shape[0], cols = bt.shape[1];
                    const auto costs = reference_head_costs(va, vbb, rows, cols, layout);
                    const auto best  = brute_force_assignment(costs);
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t col = 0; col < cols; ++col) {
                            const bool by_rows       = layout.split_axis == SplitAxis::Rows;
                            const std::size_t along  = by_rows ? r : col;
                            const std::size_t slot   = along / layout.head_dim;
                            const std::size_t src    = best.permutation.mapping[slot] * layout.head_dim +
                                                    along % layout.head_dim;
                            pb[r * cols + col] = by_rows ? vbb[src * cols + col] : vbb[r * cols + src];
                        }
                    }
                }
                for (std::size_t i = 0; i < n; ++i) {
                    merged[i] = static_cast<float>((1.0 - w) * va[i] + w * pb[i]);
                }
                break;
            }
        }
        const DType dtype = output_dtype.value_or(a.tensors.at(name).dtype);
        out.tensors.emplace(name, encode_tensor(name, bt.shape, merged, dtype));
    }
    return out;
}

} // namespace hmerge::testkit
