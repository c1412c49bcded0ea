#include "hmerge/assignment.hpp"

#include "hmerge/error.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <string>

namespace hmerge {

CostMatrix::CostMatrix(std::size_t n, std::vector<double> values) : n_(n), values_(std::move(values)) {
    if (values_.size() != n_ * n_) {
        throw Error(ErrorKind::Parameter, "cost matrix needs n*n values");
    }
}

CostMatrix::CostMatrix(std::initializer_list<std::initializer_list<double>> rows) : n_(rows.size()) {
    values_.reserve(n_ * n_);
    for (const auto & row : rows) {
        if (row.size() != n_) {
            throw Error(ErrorKind::Parameter, "cost matrix must be square");
        }
        values_.insert(values_.end(), row.begin(), row.end());
    }
}

bool HeadPermutation::is_identity() const noexcept {
    for (std::size_t i = 0; i < mapping.size(); ++i) {
        if (mapping[i] != i) {
            return false;
        }
    }
    return true;
}

bool is_bijection(const std::vector<std::size_t> & mapping) {
    std::vector<bool> seen(mapping.size(), false);
    for (auto j : mapping) {
        if (j >= mapping.size() || seen[j]) {
            return false;
        }
        seen[j] = true;
    }
    return true;
}

double assignment_cost(const CostMatrix & c, const HeadPermutation & p) {
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        total += c(i, p.mapping[i]);
    }
    return total;
}

HeadPermutation linear_sum_assignment(const CostMatrix & c) {
    const std::size_t n = c.size();
    double max_abs      = 0.0;
    for (double x : c.values()) {
        if (!std::isfinite(x)) {
            throw Error(ErrorKind::Parameter, "cost matrix has a non-finite entry");
        }
        max_abs = std::max(max_abs, std::abs(x));
    }
    if (n == 0) {
        return {};
    }

    // Shortest augmenting path Hungarian, 1-based with a virtual column 0.
    // Invariant: c(i,j) - u[i] - v[j] >= 0, with equality on matched edges.
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0]           = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, kInf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0]             = true;
            const std::size_t i0 = p[j0];
            double delta         = kInf;
            std::size_t j1       = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) {
                    continue;
                }
                const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j]  = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1    = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0]                = p[j1];
            j0                   = j1;
        } while (j0 != 0);
    }

    std::vector<std::size_t> row_to_col(n), col_to_row(n);
    for (std::size_t j = 1; j <= n; ++j) {
        row_to_col[p[j] - 1] = j - 1;
        col_to_row[j - 1]    = p[j] - 1;
    }

    const double tol = 1e-9 * (1.0 + max_abs);
    auto tight = [&](std::size_t i, std::size_t j) {
        return row_to_col[i] == j || c(i, j) - u[i + 1] - v[j + 1] <= tol;
    };

    // Lexicographic tie-break over the tight subgraph. Row i may move to
    // column j != row_to_col[i] iff an alternating cycle i -> j -> ... -> t
    // exists, where t is i's current column; next_row records that chain.
    constexpr long kUnseen = -2;
    constexpr long kTakesT = -1;
    std::vector<bool> fixed(n, false);
    std::vector<long> next_row(n);
    std::deque<std::size_t> queue;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = row_to_col[i];
        std::fill(next_row.begin(), next_row.end(), kUnseen);
        queue.clear();
        for (std::size_t r = 0; r < n; ++r) {
            if (!fixed[r] && r != i && tight(r, t)) {
                next_row[r] = kTakesT;
                queue.push_back(r);
            }
        }
        while (!queue.empty()) {
            const std::size_t r = queue.front();
            queue.pop_front();
            const std::size_t col = row_to_col[r];
            for (std::size_t r2 = 0; r2 < n; ++r2) {
                if (!fixed[r2] && r2 != i && next_row[r2] == kUnseen && tight(r2, col)) {
                    next_row[r2] = static_cast<long>(r);
                    queue.push_back(r2);
                }
            }
        }

        std::size_t best = t;
        for (std::size_t j = 0; j < t; ++j) {
            const std::size_t owner = col_to_row[j];
            if (!fixed[owner] && next_row[owner] != kUnseen && tight(i, j)) {
                best = j;
                break;
            }
        }
        if (best != t) {
            std::size_t r   = col_to_row[best];
            row_to_col[i]   = best;
            col_to_row[best] = i;
            for (;;) {
                const long nx          = next_row[r];
                const std::size_t newc = nx == kTakesT ? t : row_to_col[static_cast<std::size_t>(nx)];
                row_to_col[r]          = newc;
                col_to_row[newc]       = r;
                if (nx == kTakesT) {
                    break;
                }
                r = static_cast<std::size_t>(nx);
            }
        }
        fixed[i] = true;
    }

    return HeadPermutation{std::move(row_to_col)};
}

} // namespace hmerge
