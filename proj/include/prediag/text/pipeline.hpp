#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "prediag/error.hpp"
#include "prediag/utf8.hpp"

namespace prediag::text {

/// A sentence after the four retrieval preprocessing stages.
struct ProcessedText {
    std::string original;
    std::vector<std::string> normalized_tokens;  // stage 1
    std::vector<std::string> content_tokens;     // stage 2, stopwords removed
    std::vector<std::string> content_stems;      // stage 3
    std::string bigram_pair_string;              // stage 4

    /// Space-separated items of bigram_pair_string. A single stem yields itself.
    std::vector<std::string> bigram_tokens() const {
        std::vector<std::string> out;
        std::size_t start = 0;
        while (start < bigram_pair_string.size()) {
            auto end = bigram_pair_string.find(' ', start);
            if (end == std::string::npos) end = bigram_pair_string.size();
            if (end > start) out.emplace_back(bigram_pair_string.substr(start, end - start));
            start = end + 1;
        }
        return out;
    }

    std::size_t bigram_count() const {
        return content_stems.size() < 2 ? 0 : content_stems.size() - 1;
    }

    bool operator==(const ProcessedText&) const = default;
};

inline std::string join(const std::vector<std::string>& parts, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

using StopwordList = std::set<std::string, std::less<>>;

inline const StopwordList& default_stopwords() {
    static const StopwordList words = {
        "a", "about", "above", "after", "again", "against", "all", "am", "an", "and",
        "any", "are", "as", "at", "be", "because", "been", "before", "being", "below",
        "between", "both", "but", "by", "can", "could", "did", "do", "does", "doing",
        "down", "during", "each", "few", "for", "from", "further", "had", "has", "have",
        "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how",
        "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most",
        "my", "myself", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
        "ourselves", "out", "over", "own", "same", "she", "should", "so", "some", "such",
        "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there",
        "these", "they", "this", "those", "through", "to", "too", "under", "until", "up",
        "very", "was", "we", "were", "what", "when", "where", "which", "while", "who",
        "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
        "yourselves",
    };
    return words;
}

/// Reads a stopword file: UTF-8, one word per line. Blank lines and `#` comments are skipped.
inline StopwordList load_stopwords(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open stopword file");
    }
    StopwordList words;
    std::string line;
    while (std::getline(in, line)) {
        if (!utf8::is_valid(line)) throw EncodingError(path.string() + ": malformed UTF-8");
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto last = line.find_last_not_of(" \t\r");
        std::string word = line.substr(first, last - first + 1);
        for (auto& c : word) {
            if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        }
        words.insert(std::move(word));
    }
    return words;
}

namespace detail {

inline bool is_ascii_alnum(char32_t c) {
    return (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || (c >= U'0' && c <= U'9');
}

inline bool is_space(char32_t c) {
    return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v';
}

// Non-ASCII code points are kept as word characters; normalization is ASCII-only.
inline bool is_word_char(char32_t c) { return is_ascii_alnum(c) || c >= 0x80; }

inline bool is_apostrophe(char32_t c) { return c == U'\'' || c == U'\u2019'; }

}  // namespace detail

/// Stage 1: lowercase, drop punctuation (internal apostrophes survive), split on whitespace.
inline std::vector<std::string> normalize(std::string_view raw) {
    const auto cps = utf8::decode(raw);
    std::vector<std::string> tokens;
    std::u32string current;
    auto flush = [&] {
        if (!current.empty()) tokens.push_back(utf8::encode(current));
        current.clear();
    };
    for (std::size_t i = 0; i < cps.size(); ++i) {
        const char32_t c = cps[i];
        if (detail::is_space(c)) {
            flush();
        } else if (detail::is_word_char(c)) {
            current.push_back(c >= U'A' && c <= U'Z' ? c - U'A' + U'a' : c);
        } else if (detail::is_apostrophe(c)) {
            const bool internal = i > 0 && i + 1 < cps.size() && detail::is_word_char(cps[i - 1]) &&
                                  detail::is_word_char(cps[i + 1]);
            if (internal) current.push_back(U'\'');
        }
    }
    flush();
    return tokens;
}

/// Strips the first and last character of tokens of three or more characters.
inline std::string stem_token(std::string_view token) {
    if (token.empty()) throw InvalidArgument("stem_token: empty token");
    const auto cps = utf8::decode(token);
    if (cps.size() < 3) return std::string(token);
    return utf8::encode(std::u32string_view(cps).substr(1, cps.size() - 2));
}

/// Stage 4: neighbouring stems concatenated, pairs joined by single spaces.
inline std::string bigram_pairs(const std::vector<std::string>& stems) {
    if (stems.size() == 1) return stems.front();
    std::string out;
    for (std::size_t i = 0; i + 1 < stems.size(); ++i) {
        if (i) out += ' ';
        out += stems[i];
        out += stems[i + 1];
    }
    return out;
}

inline ProcessedText preprocess(std::string_view raw, const StopwordList& stopwords) {
    ProcessedText out;
    out.original = std::string(raw);
    out.normalized_tokens = normalize(raw);
    for (const auto& tok : out.normalized_tokens) {
        if (!stopwords.contains(tok)) out.content_tokens.push_back(tok);
    }
    out.content_stems.reserve(out.content_tokens.size());
    for (const auto& tok : out.content_tokens) out.content_stems.push_back(stem_token(tok));
    out.bigram_pair_string = bigram_pairs(out.content_stems);
    return out;
}

inline ProcessedText preprocess(std::string_view raw) { return preprocess(raw, default_stopwords()); }

/// Preprocessing bound to a stopword list.
class TextPipeline {
public:
    TextPipeline() : stopwords_(default_stopwords()) {}
    explicit TextPipeline(StopwordList stopwords) : stopwords_(std::move(stopwords)) {}

    ProcessedText operator()(std::string_view raw) const { return preprocess(raw, stopwords_); }

    const StopwordList& stopwords() const noexcept { return stopwords_; }

    bool operator==(const TextPipeline&) const = default;

private:
    StopwordList stopwords_;
};

}  // namespace prediag::text
