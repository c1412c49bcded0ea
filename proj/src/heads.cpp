#include "hmerge/heads.hpp"

#include "hmerge/error.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace hmerge {

void check_layout(std::size_t rows, std::size_t cols, const HeadLayout & layout, const std::string & what) {
    if (layout.num_heads == 0 || layout.head_dim == 0) {
        throw Error(ErrorKind::Layout, fmt::format("{}: head count and head_dim must be positive", what));
    }
    const bool by_rows         = layout.split_axis == SplitAxis::Rows;
    const std::size_t extent   = by_rows ? rows : cols;
    const char * axis          = by_rows ? "rows" : "columns";
    if (extent % layout.head_dim != 0) {
        throw Error(ErrorKind::Layout, fmt::format("{}: {} {} not divisible by head_dim {}", what, extent, axis,
                                                   layout.head_dim));
    }
    if (extent != layout.num_heads * layout.head_dim) {
        throw Error(ErrorKind::Layout, fmt::format("{}: {} {} != {} heads x head_dim {}", what, extent, axis,
                                                   layout.num_heads, layout.head_dim));
    }
}

namespace {

void check_view(MatrixView p, const HeadLayout & layout) {
    if (p.values.size() != p.rows * p.cols) {
        throw Error(ErrorKind::Layout, fmt::format("matrix buffer of {} values is not {}x{}", p.values.size(),
                                                   p.rows, p.cols));
    }
    check_layout(p.rows, p.cols, layout);
}

// Flat index of element k of head h.
inline std::size_t head_index(const HeadLayout & layout, std::size_t cols, std::size_t h, std::size_t k) {
    if (layout.split_axis == SplitAxis::Rows) {
        return h * layout.head_dim * cols + k;
    }
    return (k / layout.head_dim) * cols + h * layout.head_dim + k % layout.head_dim;
}

inline double cosine_cost(double dot, double norm_a, double norm_b) {
    if (norm_a == 0.0 || norm_b == 0.0) {
        return 1.0;
    }
    return std::clamp(1.0 - dot / (norm_a * norm_b), 0.0, 2.0);
}

} // namespace

std::vector<std::vector<float>> split_heads(MatrixView p, const HeadLayout & layout) {
    check_view(p, layout);
    const std::size_t len = p.values.size() / layout.num_heads;
    std::vector<std::vector<float>> heads(layout.num_heads, std::vector<float>(len));
    for (std::size_t h = 0; h < layout.num_heads; ++h) {
        for (std::size_t k = 0; k < len; ++k) {
            heads[h][k] = p.values[head_index(layout, p.cols, h, k)];
        }
    }
    return heads;
}

std::vector<float> merge_heads(const std::vector<std::vector<float>> & heads, std::size_t rows, std::size_t cols,
                               const HeadLayout & layout) {
    check_layout(rows, cols, layout);
    if (heads.size() != layout.num_heads) {
        throw Error(ErrorKind::Layout, fmt::format("expected {} heads, got {}", layout.num_heads, heads.size()));
    }
    const std::size_t len = rows * cols / layout.num_heads;
    std::vector<float> out(rows * cols);
    for (std::size_t h = 0; h < heads.size(); ++h) {
        if (heads[h].size() != len) {
            throw Error(ErrorKind::Layout, fmt::format("head {} has {} values, expected {}", h, heads[h].size(), len));
        }
        for (std::size_t k = 0; k < len; ++k) {
            out[head_index(layout, cols, h, k)] = heads[h][k];
        }
    }
    return out;
}

void permute_heads(MatrixView p, const HeadLayout & layout, const HeadPermutation & perm, std::span<float> out) {
    check_view(p, layout);
    if (perm.size() != layout.num_heads || !is_bijection(perm.mapping)) {
        throw Error(ErrorKind::Layout, fmt::format("permutation is not a bijection on {} heads", layout.num_heads));
    }
    if (out.size() != p.values.size()) {
        throw Error(ErrorKind::Layout, "output buffer size differs from input matrix");
    }
    if (layout.split_axis == SplitAxis::Rows) {
        const std::size_t slab = layout.head_dim * p.cols;
        for (std::size_t i = 0; i < layout.num_heads; ++i) {
            std::memcpy(out.data() + i * slab, p.values.data() + perm.mapping[i] * slab, slab * sizeof(float));
        }
        return;
    }
    for (std::size_t r = 0; r < p.rows; ++r) {
        const float * src = p.values.data() + r * p.cols;
        float * dst       = out.data() + r * p.cols;
        for (std::size_t i = 0; i < layout.num_heads; ++i) {
            std::memcpy(dst + i * layout.head_dim, src + perm.mapping[i] * layout.head_dim,
                        layout.head_dim * sizeof(float));
        }
    }
}

std::vector<float> permute_heads(MatrixView p, const HeadLayout & layout, const HeadPermutation & perm) {
    std::vector<float> out(p.values.size());
    permute_heads(p, layout, perm, out);
    return out;
}

CostMatrix head_cost_matrix(const std::vector<std::vector<float>> & heads_a,
                            const std::vector<std::vector<float>> & heads_b) {
    const std::size_t h = heads_a.size();
    if (heads_b.size() != h) {
        throw Error(ErrorKind::Layout, fmt::format("head counts differ: {} vs {}", h, heads_b.size()));
    }
    std::vector<double> norm_a(h), norm_b(h);
    for (std::size_t i = 0; i < h; ++i) {
        if (heads_a[i].size() != heads_a[0].size() || heads_b[i].size() != heads_a[0].size()) {
            throw Error(ErrorKind::Layout, "heads differ in length");
        }
        double sa = 0.0, sb = 0.0;
        for (std::size_t k = 0; k < heads_a[i].size(); ++k) {
            sa += static_cast<double>(heads_a[i][k]) * heads_a[i][k];
            sb += static_cast<double>(heads_b[i][k]) * heads_b[i][k];
        }
        norm_a[i] = std::sqrt(sa);
        norm_b[i] = std::sqrt(sb);
    }
    CostMatrix c(h);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < h; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < heads_a[i].size(); ++k) {
                dot += static_cast<double>(heads_a[i][k]) * heads_b[j][k];
            }
            c(i, j) = cosine_cost(dot, norm_a[i], norm_b[j]);
        }
    }
    return c;
}

CostMatrix head_cost_matrix(MatrixView a, MatrixView b, const HeadLayout & layout) {
    check_view(a, layout);
    check_view(b, layout);
    if (a.rows != b.rows || a.cols != b.cols) {
        throw Error(ErrorKind::Layout, fmt::format("matrices differ in shape: {}x{} vs {}x{}", a.rows, a.cols,
                                                   b.rows, b.cols));
    }
    const std::size_t h   = layout.num_heads;
    const std::size_t len = a.values.size() / h;
    std::vector<double> norm_a(h), norm_b(h);
    for (std::size_t i = 0; i < h; ++i) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
            const std::size_t idx = head_index(layout, a.cols, i, k);
            sa += static_cast<double>(a.values[idx]) * a.values[idx];
            sb += static_cast<double>(b.values[idx]) * b.values[idx];
        }
        norm_a[i] = std::sqrt(sa);
        norm_b[i] = std::sqrt(sb);
    }
    CostMatrix c(h);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < h; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                dot += static_cast<double>(a.values[head_index(layout, a.cols, i, k)]) *
                       b.values[head_index(layout, a.cols, j, k)];
            }
            c(i, j) = cosine_cost(dot, norm_a[i], norm_b[j]);
        }
    }
    return c;
}

HeadAlignment align_heads(MatrixView a, MatrixView b, const HeadLayout & layout, std::span<float> out) {
    const CostMatrix cost = head_cost_matrix(a, b, layout);
    HeadAlignment result;
    result.permutation = linear_sum_assignment(cost);
    result.cost        = assignment_cost(cost, result.permutation);
    for (std::size_t i = 0; i < cost.size(); ++i) {
        result.identity_cost += cost(i, i);
    }
    permute_heads(b, layout, result.permutation, out);
    return result;
}

std::pair<std::vector<float>, HeadAlignment> align_heads(MatrixView a, MatrixView b, const HeadLayout & layout) {
    std::vector<float> out(b.values.size());
    HeadAlignment result = align_heads(a, b, layout, out);
    return {std::move(out), std::move(result)};
}

} // namespace hmerge
