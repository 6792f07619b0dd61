#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "prediag/classifier/dataset.hpp"
#include "prediag/error.hpp"
#include "prediag/nn/tensor.hpp"

namespace prediag::classifier {

using nn::Shape;
using nn::Tensor;

// ---------------------------------------------------------------------------
// Backbone descriptor
// ---------------------------------------------------------------------------

struct BackboneStage {
    int stage = 0;
    std::string op;
    std::size_t channels = 0;
    std::string activation;
    std::size_t layers = 0;

    bool operator==(const BackboneStage&) const = default;
};

struct BackboneDescriptor {
    std::vector<BackboneStage> stages;
};

/// EfficientNetV2-SA: the EfficientNetV2-S feature extractor (stages 0-6) and the trainable top.
inline BackboneDescriptor canonical_backbone_descriptor() {
    return {{
        {0, "Conv 3x3", 24, "SiLU", 1},
        {1, "Fused-MBConv1, k3x3", 24, "SiLU", 2},
        {2, "Fused-MBConv4, k3x3", 48, "SiLU", 4},
        {3, "Fused-MBConv4, k3x3", 64, "SiLU", 4},
        {4, "MBConv4, k3x3, SE0.25", 128, "SiLU/Sigmoid", 6},
        {5, "MBConv6, k3x3, SE0.25", 160, "SiLU/Sigmoid", 9},
        {6, "MBConv6, k3x3, SE0.25", 272, "SiLU/Sigmoid", 15},
        {7, "Conv 1x1, BN", 272, "ACON-C", 1},
        {8, "Pooling", 1792, "", 1},
        {9, "Dense", 1792, "", 1},
    }};
}

struct DescriptorMismatch {
    int stage = 0;
    std::string field;
    std::string expected;
    std::string actual;
};

/// Checks operators, channels and layer counts of stages 0-6 and the stage-7 activation against
/// the canonical descriptor. Every difference is reported; an empty result means valid.
inline std::vector<DescriptorMismatch> validate_backbone_descriptor(const BackboneDescriptor& desc) {
    const auto canon = canonical_backbone_descriptor();
    std::vector<DescriptorMismatch> out;
    auto find = [&](int stage) -> const BackboneStage* {
        for (const auto& s : desc.stages) {
            if (s.stage == stage) return &s;
        }
        return nullptr;
    };
    for (const auto& want : canon.stages) {
        if (want.stage > 7) break;
        const auto* got = find(want.stage);
        if (!got) {
            out.push_back({want.stage, "stage", "present", "missing"});
            continue;
        }
        if (want.stage == 7) {
            if (got->activation != want.activation) out.push_back({7, "activation", want.activation, got->activation});
            continue;
        }
        if (got->op != want.op) out.push_back({want.stage, "operator", want.op, got->op});
        if (got->channels != want.channels) {
            out.push_back({want.stage, "channels", std::to_string(want.channels), std::to_string(got->channels)});
        }
        if (got->layers != want.layers) {
            out.push_back({want.stage, "layers", std::to_string(want.layers), std::to_string(got->layers)});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature containers
//
// Binary, little-endian:
//   magic "PDFC" | u32 version (1) | u32 rank | u64 dims[rank] | u64 count |
//   count x ( u32 id_length | id bytes | f64 values[prod(dims)] )
// Every sample in a container shares one shape.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFeatureContainerVersion = 1;
inline constexpr char kFeatureMagic[4] = {'P', 'D', 'F', 'C'};

namespace detail {

template <class T>
void write_le(std::ostream& out, T v) {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
    unsigned char buf[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw IoError("feature container truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

inline void write_f64(std::ostream& out, double d) { write_le(out, std::bit_cast<std::uint64_t>(d)); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

}  // namespace detail

struct FeatureContainer {
    Shape shape;
    std::map<std::string, Tensor> samples;
};

inline void write_feature_container(std::ostream& out, const FeatureContainer& c) {
    if (c.shape.empty()) throw ShapeError("feature container needs a sample shape");
    out.write(kFeatureMagic, 4);
    detail::write_le<std::uint32_t>(out, kFeatureContainerVersion);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.shape.size()));
    for (auto d : c.shape) detail::write_le<std::uint64_t>(out, d);
    detail::write_le<std::uint64_t>(out, c.samples.size());
    for (const auto& [id, t] : c.samples) {
        if (t.shape() != c.shape) {
            throw ShapeError("sample " + id + " has shape " + nn::shape_string(t.shape()) + ", container " +
                             nn::shape_string(c.shape));
        }
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
        for (double v : t.data()) detail::write_f64(out, v);
    }
}

inline FeatureContainer read_feature_container(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kFeatureMagic, 4) != 0) {
        throw IoError("not a feature container (bad magic)");
    }
    const auto version = detail::read_le<std::uint32_t>(in);
    if (version != kFeatureContainerVersion) {
        throw SchemaVersionError("unsupported feature container version " + std::to_string(version));
    }
    const auto rank = detail::read_le<std::uint32_t>(in);
    if (rank == 0 || rank > 8) throw IoError("feature container: bad rank " + std::to_string(rank));
    constexpr std::uint64_t kMaxElements = 1ULL << 26;
    FeatureContainer c;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const auto d = detail::read_le<std::uint64_t>(in);
        if (d == 0 || d > kMaxElements || numel * d > kMaxElements) {
            throw IoError("feature container: bad or oversized dimension");
        }
        numel *= d;
        c.shape.push_back(static_cast<std::size_t>(d));
    }
    const auto count = detail::read_le<std::uint64_t>(in);
    for (std::uint64_t k = 0; k < count; ++k) {
        const auto len = detail::read_le<std::uint32_t>(in);
        if (len == 0 || len > 4096) throw IoError("feature container: bad identifier length");
        std::string id(len, '\0');
        if (!in.read(id.data(), len)) throw IoError("feature container truncated");
        std::vector<double> values(numel);
        for (auto& v : values) v = detail::read_f64(in);
        c.samples.insert_or_assign(std::move(id), Tensor(c.shape, std::move(values)));
    }
    return c;
}

inline FeatureContainer parse_feature_container(std::string_view bytes) {
    std::istringstream in{std::string(bytes)};
    return read_feature_container(in);
}

inline std::string serialize_feature_container(const FeatureContainer& c) {
    std::ostringstream out;
    write_feature_container(out, c);
    return out.str();
}

inline void save_feature_container(const FeatureContainer& c, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path, "cannot write feature container");
    write_feature_container(out, c);
    if (!out) throw IoError(path, "write failure");
}

inline FeatureContainer load_feature_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open feature container");
    }
    try {
        return read_feature_container(in);
    } catch (const SchemaVersionError&) {
        throw;
    } catch (const Error& e) {
        throw IoError(path, e.what());
    }
}

// ---------------------------------------------------------------------------
// Frozen backbone: anything that yields a feature map per record.
// ---------------------------------------------------------------------------

class FeatureSource {
public:
    virtual ~FeatureSource() = default;
    virtual Shape feature_shape() const = 0;
    virtual Tensor features(const BreakhisRecord& record) const = 0;
};

/// Precomputed features from every `*.pdfc` container in a directory (or a single file).
class FeatureFileSource : public FeatureSource {
public:
    explicit FeatureFileSource(const std::filesystem::path& location) {
        std::vector<std::filesystem::path> files;
        if (std::filesystem::is_directory(location)) {
            for (const auto& e : std::filesystem::directory_iterator(location)) {
                if (e.is_regular_file() && e.path().extension() == ".pdfc") files.push_back(e.path());
            }
            std::ranges::sort(files);
        } else if (std::filesystem::exists(location)) {
            files.push_back(location);
        } else {
            throw PathNotFound(location);
        }
        for (const auto& f : files) {
            auto c = load_feature_container(f);
            if (!shape_.empty() && c.shape != shape_) throw ShapeError(f.string() + ": inconsistent feature shape");
            shape_ = c.shape;
            for (auto& [id, t] : c.samples) samples_.insert_or_assign(id, std::move(t));
        }
        if (samples_.empty()) throw IoError(location, "no feature samples found");
    }

    Shape feature_shape() const override { return shape_; }

    Tensor features(const BreakhisRecord& record) const override {
        auto it = samples_.find(record.id);
        if (it == samples_.end()) throw NotFound("no features for record " + record.id);
        return it->second;
    }

    std::size_t size() const { return samples_.size(); }

private:
    Shape shape_;
    std::map<std::string, Tensor> samples_;
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace detail

/// Gaussian class-conditional feature maps. Class k has mean (separation / sqrt 2) e_(k mod C) at
/// every spatial position, so distinct class means lie `separation` apart per position; noise is
/// unit variance.
inline Tensor synthetic_feature_map(const Shape& shape, std::size_t class_index, double separation,
                                    std::mt19937_64& rng) {
    if (shape.empty()) throw ShapeError("synthetic features need a shape");
    if (!(separation >= 0.0)) throw InvalidArgument("separation must be non-negative");
    Tensor t(shape);
    const auto C = t.channels();
    const double offset = separation / std::sqrt(2.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = noise(rng) + ((i % C) == class_index % C ? offset : 0.0);
    }
    return t;
}

/// Synthetic stand-in for the frozen backbone, keyed by record so order does not matter.
class SyntheticFeatureSource : public FeatureSource {
public:
    enum class Target { Label, Subtype };

    SyntheticFeatureSource(Shape shape, double separation, std::uint64_t seed, Target target = Target::Label)
        : shape_(std::move(shape)), separation_(separation), seed_(seed), target_(target) {}

    Shape feature_shape() const override { return shape_; }

    Tensor features(const BreakhisRecord& record) const override {
        std::mt19937_64 rng(seed_ ^ detail::fnv1a(record.id));
        const auto cls = target_ == Target::Label ? static_cast<std::size_t>(record.label)
                                                  : static_cast<std::size_t>(record.subtype);
        return synthetic_feature_map(shape_, cls, separation_, rng);
    }

private:
    Shape shape_;
    double separation_;
    std::uint64_t seed_;
    Target target_;
};

/// Feature maps with class targets, ready for training or evaluation.
struct FeatureSet {
    Shape sample_shape;
    std::vector<Tensor> samples;
    std::vector<std::size_t> labels;
    std::vector<std::string> ids;
    std::vector<std::optional<Subtype>> subtypes;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }

    void push(std::string id, Tensor sample, std::size_t label, std::optional<Subtype> subtype = std::nullopt) {
        if (sample_shape.empty()) sample_shape = sample.shape();
        if (sample.shape() != sample_shape) {
            throw ShapeError("sample " + id + " has shape " + nn::shape_string(sample.shape()) + ", expected " +
                             nn::shape_string(sample_shape));
        }
        ids.push_back(std::move(id));
        samples.push_back(std::move(sample));
        labels.push_back(label);
        subtypes.push_back(subtype);
    }
};

enum class TargetKind { Label, Subtype };

inline std::string_view to_string(TargetKind t) { return t == TargetKind::Label ? "label" : "subtype"; }

inline TargetKind parse_target(std::string_view s) {
    if (s == "label") return TargetKind::Label;
    if (s == "subtype") return TargetKind::Subtype;
    throw InvalidArgument("unknown target kind: " + std::string(s));
}

inline std::vector<std::string> class_names(TargetKind t) {
    if (t == TargetKind::Label) return {"benign", "malignant"};
    std::vector<std::string> out;
    for (auto s : kSubtypes) out.emplace_back(to_string(s));
    return out;
}

/// Pulls features for every record of a manifest through a backbone.
inline FeatureSet extract_features(const DatasetManifest& manifest, const FeatureSource& backbone,
                                   TargetKind target = TargetKind::Label) {
    FeatureSet set;
    set.sample_shape = backbone.feature_shape();
    for (const auto& r : manifest.records) {
        const auto cls = target == TargetKind::Label ? static_cast<std::size_t>(r.label)
                                                     : static_cast<std::size_t>(r.subtype);
        set.push(r.id, backbone.features(r), cls, r.subtype);
    }
    return set;
}

/// `samples_per_class` synthetic samples for each of `class_count` classes, in class order.
inline FeatureSet generate_synthetic_features(std::size_t class_count, std::size_t samples_per_class,
                                              const Shape& shape, double separation, std::uint64_t seed) {
    if (class_count == 0) throw InvalidArgument("generate_synthetic_features: no classes");
    std::mt19937_64 rng(seed);
    FeatureSet set;
    set.sample_shape = shape;
    for (std::size_t k = 0; k < class_count; ++k) {
        for (std::size_t i = 0; i < samples_per_class; ++i) {
            set.push("synthetic_" + std::to_string(k) + "_" + std::to_string(i),
                     synthetic_feature_map(shape, k, separation, rng), k);
        }
    }
    return set;
}

}  // namespace prediag::classifier
