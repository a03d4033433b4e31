#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace maskfuse {

// Stand-in for -inf on suppressed ids; large enough that exp underflows to 0.
inline constexpr double kSuppressedLogit = -1e9;
inline constexpr double kSuppressedThreshold = -1e8;

inline bool is_suppressed(double logit) noexcept { return logit <= kSuppressedThreshold; }

// Row-major L x V matrix of per-position logits over the joint vocabulary.
class Logits {
public:
    Logits() = default;
    Logits(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    std::span<double> row(std::size_t i) noexcept { return {values_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept { return {values_.data() + i * cols_, cols_}; }

    double & at(std::size_t i, std::size_t j) noexcept { return values_[i * cols_ + j]; }
    double at(std::size_t i, std::size_t j) const noexcept { return values_[i * cols_ + j]; }

    std::vector<double> & values() noexcept { return values_; }
    const std::vector<double> & values() const noexcept { return values_; }

    bool operator==(const Logits &) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

double log_sum_exp(std::span<const double> row) noexcept;

// Normalized probabilities of a row. Suppressed entries come out exactly 0.
std::vector<double> softmax(std::span<const double> row);

// -log softmax(row)[target]
double cross_entropy(std::span<const double> row, std::size_t target) noexcept;

} // namespace maskfuse
