#pragma once

#include <cstddef>
#include <vector>

namespace hmerge {

/// Dense square matrix of costs, row-major.
class CostMatrix {
public:
    CostMatrix() = default;
    explicit CostMatrix(std::size_t n, double fill = 0.0) : n_(n), values_(n * n, fill) {}
    CostMatrix(std::size_t n, std::vector<double> values);
    CostMatrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t size() const noexcept { return n_; }
    double & operator()(std::size_t i, std::size_t j) noexcept { return values_[i * n_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return values_[i * n_ + j]; }
    const std::vector<double> & values() const noexcept { return values_; }

private:
    std::size_t n_ = 0;
    std::vector<double> values_;
};

/// A bijection on [0,H). mapping[i] is the column (head of B) assigned to row i (slot i of A).
struct HeadPermutation {
    std::vector<std::size_t> mapping;

    std::size_t size() const noexcept { return mapping.size(); }
    bool is_identity() const noexcept;
    bool operator==(const HeadPermutation &) const = default;
};

bool is_bijection(const std::vector<std::size_t> & mapping);

double assignment_cost(const CostMatrix & c, const HeadPermutation & p);

/// Minimum-cost perfect assignment (Hungarian method with potentials, O(n^3)).
///
/// Among optimal assignments the lexicographically smallest mapping is
/// returned: the solver's dual potentials define the equality subgraph of
/// tight edges, and rows are fixed in order to the smallest column that
/// still lies on some perfect matching of that subgraph (found by one
/// alternating-path search per row). Edges count as tight within
/// 1e-9 * (1 + max|C|). Throws Error(Parameter) on non-finite entries.
HeadPermutation linear_sum_assignment(const CostMatrix & c);

} // namespace hmerge
