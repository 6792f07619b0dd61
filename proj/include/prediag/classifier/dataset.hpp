#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prediag/error.hpp"

namespace prediag::classifier {

enum class Label { Benign, Malignant };
enum class Subtype { A, F, PT, TA, DC, LC, MC, PC };

inline constexpr std::array kMagnifications{40, 100, 200, 400};
inline constexpr std::array kSubtypes{Subtype::A,  Subtype::F,  Subtype::PT, Subtype::TA,
                                      Subtype::DC, Subtype::LC, Subtype::MC, Subtype::PC};

inline std::string_view to_string(Label l) { return l == Label::Benign ? "benign" : "malignant"; }

inline Label parse_label(std::string_view s) {
    if (s == "benign" || s == "B") return Label::Benign;
    if (s == "malignant" || s == "M") return Label::Malignant;
    throw InvalidArgument("unknown label: " + std::string(s));
}

inline std::string_view to_string(Subtype s) {
    static constexpr std::array<std::string_view, 8> names{"A", "F", "PT", "TA", "DC", "LC", "MC", "PC"};
    return names[static_cast<std::size_t>(s)];
}

inline Subtype parse_subtype(std::string_view s) {
    for (auto t : kSubtypes) {
        if (to_string(t) == s) return t;
    }
    throw InvalidArgument("unknown subtype: " + std::string(s));
}

/// Adenosis, fibroadenoma, phyllodes tumor and tubular adenoma are benign; the carcinomas malignant.
inline Label label_of(Subtype s) {
    return static_cast<int>(s) <= static_cast<int>(Subtype::TA) ? Label::Benign : Label::Malignant;
}

inline int parse_magnification(std::string_view s) {
    if (!s.empty() && (s.back() == 'X' || s.back() == 'x')) s.remove_suffix(1);
    for (int m : kMagnifications) {
        if (s == std::to_string(m)) return m;
    }
    throw InvalidArgument("unknown magnification: " + std::string(s));
}

struct BreakhisRecord {
    std::string id;
    int magnification = 40;
    Label label = Label::Benign;
    Subtype subtype = Subtype::A;

    void validate() const {
        if (id.empty()) throw InvalidArgument("record without identifier");
        if (std::ranges::find(kMagnifications, magnification) == kMagnifications.end()) {
            throw InvalidArgument(id + ": bad magnification " + std::to_string(magnification));
        }
        if (label_of(subtype) != label) {
            throw InvalidArgument(id + ": subtype " + std::string(to_string(subtype)) + " cannot be " +
                                  std::string(to_string(label)));
        }
    }

    bool operator==(const BreakhisRecord&) const = default;
};

using ClassCounts = std::map<std::pair<int, Label>, std::size_t>;

struct DatasetManifest {
    std::vector<BreakhisRecord> records;

    ClassCounts counts() const {
        ClassCounts c;
        for (const auto& r : records) ++c[{r.magnification, r.label}];
        return c;
    }

    std::size_t count(int magnification) const {
        return static_cast<std::size_t>(
            std::ranges::count_if(records, [&](const auto& r) { return r.magnification == magnification; }));
    }

    DatasetManifest at_magnification(int magnification) const {
        DatasetManifest out;
        for (const auto& r : records) {
            if (r.magnification == magnification) out.records.push_back(r);
        }
        return out;
    }

    bool operator==(const DatasetManifest&) const = default;
};

/// Manifest file: `identifier,magnification,label,subtype` per line. An optional header line
/// starting with `identifier`, blank lines and `#` comments are skipped.
inline DatasetManifest parse_manifest(std::istream& in, const std::string& origin = "<manifest>") {
    DatasetManifest m;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#' || line.rfind("identifier", 0) == 0) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 4) {
            throw InvalidArgument(origin + ":" + std::to_string(line_no) + ": expected 4 fields, got " +
                                  std::to_string(fields.size()));
        }
        try {
            BreakhisRecord r{fields[0], parse_magnification(fields[1]), parse_label(fields[2]),
                             parse_subtype(fields[3])};
            r.validate();
            m.records.push_back(std::move(r));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open manifest");
    }
    return parse_manifest(in, path.string());
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(path, "cannot write manifest");
    out << "identifier,magnification,label,subtype\n";
    for (const auto& r : m.records) {
        out << r.id << ',' << r.magnification << ',' << to_string(r.label) << ',' << to_string(r.subtype) << '\n';
    }
    if (!out) throw IoError(path, "write failure");
}

/// Published per-subtype image counts of BreaKHis at 40X, 100X, 200X, 400X (A, F, PT, TA, DC, LC, MC, PC).
inline const std::map<int, std::array<std::size_t, 8>>& breakhis_subtype_counts() {
    static const std::map<int, std::array<std::size_t, 8>> counts{
        {40, {114, 253, 149, 109, 864, 156, 205, 145}},
        {100, {113, 260, 150, 121, 903, 170, 222, 142}},
        {200, {111, 264, 140, 108, 896, 163, 196, 135}},
        {400, {106, 237, 130, 115, 788, 137, 169, 138}},
    };
    return counts;
}

/// A record list shaped like BreaKHis: 7909 records with the benign/malignant totals per
/// magnification. Identifiers are synthetic.
inline DatasetManifest canonical_breakhis_manifest() {
    DatasetManifest m;
    for (const auto& [mag, counts] : breakhis_subtype_counts()) {
        for (std::size_t s = 0; s < kSubtypes.size(); ++s) {
            const auto subtype = kSubtypes[s];
            const auto label = label_of(subtype);
            for (std::size_t i = 0; i < counts[s]; ++i) {
                std::ostringstream id;
                id << "SOB_" << (label == Label::Benign ? 'B' : 'M') << '_' << to_string(subtype) << '_' << mag << '_'
                   << i + 1;
                m.records.push_back({id.str(), mag, label, subtype});
            }
        }
    }
    return m;
}

/// Seeded shuffle and floor split, run separately inside each magnification.
inline std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                                 double train_fraction, std::uint64_t seed) {
    if (manifest.records.empty()) throw InvalidArgument("split_dataset: empty manifest");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw InvalidArgument("split_dataset: train_fraction must be in (0, 1)");
    }
    std::mt19937_64 rng(seed);
    DatasetManifest train, test;
    for (int mag : kMagnifications) {
        auto subset = manifest.at_magnification(mag).records;
        if (subset.empty()) continue;
        // Fisher-Yates with an explicit draw so the permutation depends only on the generator.
        for (std::size_t i = subset.size() - 1; i > 0; --i) {
            const auto j = static_cast<std::size_t>(rng() % (i + 1));
            std::swap(subset[i], subset[j]);
        }
        const auto n_train =
            static_cast<std::size_t>(std::floor(static_cast<double>(subset.size()) * train_fraction));
        train.records.insert(train.records.end(), subset.begin(), subset.begin() + static_cast<long>(n_train));
        test.records.insert(test.records.end(), subset.begin() + static_cast<long>(n_train), subset.end());
    }
    return {std::move(train), std::move(test)};
}

}  // namespace prediag::classifier
