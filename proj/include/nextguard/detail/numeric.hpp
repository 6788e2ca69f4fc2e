#ifndef NEXTGUARD_DETAIL_NUMERIC_HPP
#define NEXTGUARD_DETAIL_NUMERIC_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace nextguard::detail {

// Pairwise (cascade) summation; error grows as O(log n) rather than O(n).
inline double pairwise_sum(std::span<const double> xs) noexcept
{
    constexpr std::size_t block = 16;
    if (xs.size() <= block) {
        double s = 0.0;
        for (double x : xs) {
            s += x;
        }
        return s;
    }
    const std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

// Population statistics (divide by n) over `values` plus `implicit_zeros`
// extra observations equal to zero.
inline MeanStd population_mean_std(std::span<const double> values, std::size_t implicit_zeros = 0)
{
    const std::size_t n = values.size() + implicit_zeros;
    if (n == 0) {
        return {};
    }
    const double mean = pairwise_sum(values) / static_cast<double>(n);
    std::vector<double> sq(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double dv = values[i] - mean;
        sq[i] = dv * dv;
    }
    const double ss = pairwise_sum(sq) + static_cast<double>(implicit_zeros) * mean * mean;
    return {mean, std::sqrt(ss / static_cast<double>(n))};
}

} // namespace nextguard::detail

#endif
