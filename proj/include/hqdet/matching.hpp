#pragma once

// Minimum-cost one-to-one assignment.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace hqdet {

struct Assignment {
    /// (row, column) pairs sorted by row; min(rows, cols) of them.
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    /// Sum of the assigned costs in row order.
    double cost = 0.0;
};

/// Hungarian algorithm on a row-major rows x cols matrix, O(n^2 m). Throws
/// UsageError when any entry is NaN or infinite.
Assignment hungarian_match(std::span<const double> cost, std::size_t rows, std::size_t cols);

}  // namespace hqdet
