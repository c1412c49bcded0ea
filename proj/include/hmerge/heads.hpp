#pragma once

#include "hmerge/assignment.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace hmerge {

enum class SplitAxis { Rows, Columns };

/// How a 2-D projection weight factors into attention heads.
///
/// Rows: head i owns output rows [i*head_dim, (i+1)*head_dim) (q/k/v_proj).
/// Columns: head i owns input columns of the same range (o_proj).
struct HeadLayout {
    std::size_t num_heads = 1;
    std::size_t head_dim  = 1;
    SplitAxis split_axis  = SplitAxis::Rows;

    bool operator==(const HeadLayout &) const = default;
};

/// Read-only row-major F32 matrix.
struct MatrixView {
    std::span<const float> values;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

/// Throws Error(Layout) unless the split extent equals num_heads * head_dim.
void check_layout(std::size_t rows, std::size_t cols, const HeadLayout & layout, const std::string & what = "matrix");

/// Head slabs flattened row-major, in head order.
std::vector<std::vector<float>> split_heads(MatrixView p, const HeadLayout & layout);

/// Inverse of split_heads.
std::vector<float> merge_heads(const std::vector<std::vector<float>> & heads, std::size_t rows, std::size_t cols,
                               const HeadLayout & layout);

/// out's slot i receives head perm.mapping[i] of p; everything else is copied through.
void permute_heads(MatrixView p, const HeadLayout & layout, const HeadPermutation & perm, std::span<float> out);
std::vector<float> permute_heads(MatrixView p, const HeadLayout & layout, const HeadPermutation & perm);

/// C[i][j] = 1 - cos(a_i, b_j); a zero-norm head has cosine 0. Entries are clamped to [0, 2].
CostMatrix head_cost_matrix(const std::vector<std::vector<float>> & heads_a,
                            const std::vector<std::vector<float>> & heads_b);

/// Same costs computed directly on the matrices without copying head slabs.
CostMatrix head_cost_matrix(MatrixView a, MatrixView b, const HeadLayout & layout);

struct HeadAlignment {
    HeadPermutation permutation;
    double cost          = 0.0;  // sum of C[i][pi(i)]
    double identity_cost = 0.0;  // sum of C[i][i]
};

/// Reorders b's heads to best match a's by minimum-cost assignment on the cosine cost.
/// Writes the aligned copy of b into `out` (same size as b; must not alias b).
HeadAlignment align_heads(MatrixView a, MatrixView b, const HeadLayout & layout, std::span<float> out);

std::pair<std::vector<float>, HeadAlignment> align_heads(MatrixView a, MatrixView b, const HeadLayout & layout);

} // namespace hmerge
