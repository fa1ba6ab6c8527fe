#include "hqdet/matching.hpp"

#include "hqdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hqdet {

Assignment hungarian_match(std::span<const double> cost, std::size_t rows, std::size_t cols) {
    if (cost.size() != rows * cols) {
        throw DimensionError("hungarian: " + std::to_string(cost.size()) + " entries for a " + std::to_string(rows) +
                             "x" + std::to_string(cols) + " matrix");
    }
    for (std::size_t i = 0; i < cost.size(); ++i) {
        if (!std::isfinite(cost[i])) {
            throw UsageError("hungarian: non-finite cost at (" + std::to_string(i / std::max<std::size_t>(cols, 1)) +
                             ", " + std::to_string(i % std::max<std::size_t>(cols, 1)) + ")");
        }
    }
    Assignment out;
    if (rows == 0 || cols == 0) return out;

    // Potentials formulation needs n <= m; solve the transpose otherwise.
    const bool flip = rows > cols;
    const std::size_t n = flip ? cols : rows, m = flip ? rows : cols;
    auto a = [&](std::size_t i, std::size_t j) { return flip ? cost[j * cols + i] : cost[i * cols + j]; };

    const double inf = std::numeric_limits<double>::infinity();
    // 1-based: p[j] is the row matched to column j, column 0 is the virtual root.
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
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
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        out.pairs.emplace_back(flip ? j - 1 : p[j] - 1, flip ? p[j] - 1 : j - 1);
    }
    std::sort(out.pairs.begin(), out.pairs.end());
    for (const auto& [r, c] : out.pairs) out.cost += cost[r * cols + c];
    return out;
}

}  // namespace hqdet
