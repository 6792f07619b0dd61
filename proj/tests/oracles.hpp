#pragma once

// Independent reference computations used to check the library.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

/// Levenshtein distance straight from its recursive definition, memoised on suffix positions.
inline std::size_t levenshtein(const std::u32string& a, const std::u32string& b) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    std::function<std::size_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::size_t {
        if (i == a.size()) return b.size() - j;
        if (j == b.size()) return a.size() - i;
        if (auto it = memo.find({i, j}); it != memo.end()) return it->second;
        const std::size_t r = std::min({d(i + 1, j) + 1, d(i, j + 1) + 1, d(i + 1, j + 1) + (a[i] != b[j] ? 1 : 0)});
        memo[{i, j}] = r;
        return r;
    };
    return d(0, 0);
}

inline double similarity(const std::u32string& a, const std::u32string& b) {
    const auto m = std::max(a.size(), b.size());
    if (m == 0) return 1.0;
    return 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(m);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Direct scalar evaluation of the ACON-C formula.
inline double acon_c(double x, double p1, double p2, double beta) {
    const double d = p1 - p2;
    return d * x * logistic(beta * d * x) + p2 * x;
}

/// Bitwise comparison of double sequences.
inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace oracle
