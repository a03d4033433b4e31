#include "maskfuse/logits.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace maskfuse {

double log_sum_exp(std::span<const double> row) noexcept {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : row) {
        m = std::max(m, v);
    }
    if (!std::isfinite(m)) {
        return m;
    }
    double s = 0.0;
    for (double v : row) {
        s += std::exp(v - m);
    }
    return m + std::log(s);
}

std::vector<double> softmax(std::span<const double> row) {
    std::vector<double> p(row.size(), 0.0);
    const double lse = log_sum_exp(row);
    for (std::size_t j = 0; j < row.size(); ++j) {
        p[j] = is_suppressed(row[j]) ? 0.0 : std::exp(row[j] - lse);
    }
    return p;
}

double cross_entropy(std::span<const double> row, std::size_t target) noexcept {
    return log_sum_exp(row) - row[target];
}

} // namespace maskfuse
