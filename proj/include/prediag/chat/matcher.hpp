#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prediag/error.hpp"
#include "prediag/text/pipeline.hpp"
#include "prediag/utf8.hpp"

namespace prediag::chat {

using StatementId = std::uint64_t;

struct Statement {
    StatementId id = 0;
    std::string text;
    text::ProcessedText processed;
    std::optional<std::string> in_response_to;
    std::optional<std::string> tag;
    std::uint64_t occurrence_count = 1;

    bool operator==(const Statement&) const = default;
};

/// A similarity in [0, 1].
class SimilarityScore {
public:
    constexpr SimilarityScore() = default;
    explicit SimilarityScore(double value) : value_(value) {
        if (!(value >= 0.0 && value <= 1.0)) {
            throw InvalidArgument("similarity score out of [0, 1]: " + std::to_string(value));
        }
    }

    constexpr double value() const noexcept { return value_; }

    friend constexpr auto operator<=>(SimilarityScore, SimilarityScore) = default;

private:
    double value_ = 0.0;
};

inline constexpr double kDefaultSimilarityThreshold = 0.90;

struct MatchResult {
    const Statement* statement = nullptr;
    SimilarityScore score;
};

/// Edit distance (insert, delete, substitute; unit cost) over any two random-access sequences.
template <std::ranges::random_access_range A, std::ranges::random_access_range B>
std::size_t edit_distance(const A& a, const B& b) {
    const auto n = std::ranges::size(a);
    const auto m = std::ranges::size(b);
    if (n == 0) return m;
    if (m == 0) return n;

    // Single rolling row of the DP table.
    std::vector<std::size_t> row(m + 1);
    for (std::size_t j = 0; j <= m; ++j) row[j] = j;
    for (std::size_t i = 1; i <= n; ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t up = row[j];
            const std::size_t cost = a[i - 1] == b[j - 1] ? 0 : 1;
            row[j] = std::min({up + 1, row[j - 1] + 1, diag + cost});
            diag = up;
        }
    }
    return row[m];
}

/// Levenshtein distance between two UTF-8 strings, counted in code points.
inline std::size_t levenshtein_distance(std::string_view a, std::string_view b) {
    return edit_distance(utf8::decode(a), utf8::decode(b));
}

/// 1 - distance / max length; two empty strings are identical (1.0).
inline SimilarityScore similarity(std::string_view a, std::string_view b) {
    const auto ca = utf8::decode(a);
    const auto cb = utf8::decode(b);
    const auto max_len = std::max(ca.size(), cb.size());
    if (max_len == 0) return SimilarityScore(1.0);
    const auto dist = edit_distance(ca, cb);
    return SimilarityScore(1.0 - static_cast<double>(dist) / static_cast<double>(max_len));
}

/// Text form that similarity is computed on: ASCII-lowercased, outer whitespace trimmed.
inline std::string comparison_form(std::string_view raw) {
    const auto first = raw.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = raw.find_last_not_of(" \t\r\n");
    std::string out(raw.substr(first, last - first + 1));
    for (auto& c : out) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    return out;
}

/// Highest-similarity candidate at or above `threshold`; ties go to the lowest id.
inline std::optional<MatchResult> find_best_match(std::string_view query,
                                                  std::span<const Statement* const> candidates,
                                                  SimilarityScore threshold) {
    const auto q = comparison_form(query);
    std::optional<MatchResult> best;
    for (const Statement* s : candidates) {
        const auto score = similarity(q, comparison_form(s->text));
        const bool better = !best || score > best->score ||
                            (score == best->score && s->id < best->statement->id);
        if (better) best = MatchResult{s, score};
    }
    if (best && best->score < threshold) return std::nullopt;
    return best;
}

enum class SelectionPolicy { First, Random, MostFrequent };

inline SelectionPolicy parse_selection_policy(std::string_view name) {
    if (name == "first") return SelectionPolicy::First;
    if (name == "random") return SelectionPolicy::Random;
    if (name == "most-frequent") return SelectionPolicy::MostFrequent;
    throw InvalidArgument("unknown selection policy: " + std::string(name));
}

inline std::string_view to_string(SelectionPolicy p) {
    switch (p) {
        case SelectionPolicy::First: return "first";
        case SelectionPolicy::Random: return "random";
        case SelectionPolicy::MostFrequent: return "most-frequent";
    }
    return "first";
}

/// Picks one of the responses recorded for a match.
///
/// `First` takes the head of the list, `MostFrequent` the largest occurrence count (ties to the lowest
/// id), and `Random` draws uniformly from `rng`, which must be supplied for that policy.
inline const Statement& select_response([[maybe_unused]] const MatchResult& match,
                                        std::span<const Statement* const> responses,
                                        SelectionPolicy policy, std::mt19937_64* rng = nullptr) {
    if (responses.empty()) throw InvalidArgument("select_response: matched statement has no responses");

    auto by_id = [](const Statement* x, const Statement* y) { return x->id < y->id; };
    switch (policy) {
        case SelectionPolicy::First:
            return *responses.front();
        case SelectionPolicy::MostFrequent:
            return **std::ranges::min_element(responses, [](const Statement* x, const Statement* y) {
                if (x->occurrence_count != y->occurrence_count) return x->occurrence_count > y->occurrence_count;
                return x->id < y->id;
            });
        case SelectionPolicy::Random: {
            if (rng == nullptr) throw InvalidArgument("select_response: random policy needs a generator");
            std::vector<const Statement*> ordered(responses.begin(), responses.end());
            std::ranges::sort(ordered, by_id);
            std::uniform_int_distribution<std::size_t> pick(0, ordered.size() - 1);
            return *ordered[pick(*rng)];
        }
    }
    return *responses.front();
}

}  // namespace prediag::chat
