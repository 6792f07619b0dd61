#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "prediag/error.hpp"

namespace prediag::utf8 {

namespace detail {

inline bool is_continuation(unsigned char c) { return (c & 0xC0U) == 0x80U; }

// Length of the sequence starting at s[i], or 0 when it is not well formed.
inline std::size_t sequence_length(std::string_view s, std::size_t i) {
    const auto lead = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t min = 0;
    if (lead < 0x80U) return 1;
    if ((lead & 0xE0U) == 0xC0U) { len = 2; min = 0x80; }
    else if ((lead & 0xF0U) == 0xE0U) { len = 3; min = 0x800; }
    else if ((lead & 0xF8U) == 0xF0U) { len = 4; min = 0x10000; }
    else return 0;
    if (i + len > s.size()) return 0;

    char32_t cp = lead & (0x7FU >> len);
    for (std::size_t k = 1; k < len; ++k) {
        const auto c = static_cast<unsigned char>(s[i + k]);
        if (!is_continuation(c)) return 0;
        cp = (cp << 6) | (c & 0x3FU);
    }
    if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
    return len;
}

}  // namespace detail

inline bool is_valid(std::string_view s) {
    for (std::size_t i = 0; i < s.size();) {
        const auto n = detail::sequence_length(s, i);
        if (n == 0) return false;
        i += n;
    }
    return true;
}

inline std::u32string decode(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size();) {
        const auto n = detail::sequence_length(s, i);
        if (n == 0) throw EncodingError("malformed UTF-8 at byte offset " + std::to_string(i));
        const auto lead = static_cast<unsigned char>(s[i]);
        char32_t cp = n == 1 ? lead : lead & (0x7FU >> n);
        for (std::size_t k = 1; k < n; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3FU);
        out.push_back(cp);
        i += n;
    }
    return out;
}

inline std::string encode(std::u32string_view cps) {
    std::string out;
    out.reserve(cps.size());
    for (char32_t cp : cps) {
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else if (cp < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
    }
    return out;
}

/// Number of code points; throws EncodingError on malformed input.
inline std::size_t length(std::string_view s) { return decode(s).size(); }

}  // namespace prediag::utf8
