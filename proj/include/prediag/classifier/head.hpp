#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "prediag/classifier/backbone.hpp"
#include "prediag/error.hpp"
#include "prediag/nn/layers.hpp"
#include "prediag/nn/tensor.hpp"

namespace prediag::classifier {

using nn::Layer;
using nn::Mode;

/// The five trainable top-layer structures compared in the experiments.
enum class HeadKind { Vgg16Fc, Vgg16Gap, ResNet50, EfficientNetV2S, EfficientNetV2SA };

inline constexpr std::array kHeadKinds{HeadKind::Vgg16Fc, HeadKind::Vgg16Gap, HeadKind::ResNet50,
                                       HeadKind::EfficientNetV2S, HeadKind::EfficientNetV2SA};

inline std::string_view to_string(HeadKind k) {
    switch (k) {
        case HeadKind::Vgg16Fc: return "VGG-16FC";
        case HeadKind::Vgg16Gap: return "VGG-16GAP";
        case HeadKind::ResNet50: return "ResNet-50";
        case HeadKind::EfficientNetV2S: return "EfficientNetV2-S";
        case HeadKind::EfficientNetV2SA: return "EfficientNetV2-SA";
    }
    return "";
}

inline HeadKind parse_head_kind(std::string_view name) {
    for (auto k : kHeadKinds) {
        if (to_string(k) == name) return k;
    }
    throw InvalidArgument("unknown head configuration: " + std::string(name));
}

struct HeadConfig {
    HeadKind kind = HeadKind::EfficientNetV2SA;
    Shape input_shape;            // per sample, [H, W, C]
    std::size_t classes = 2;
    std::size_t conv_width = 0;   // Conv1x1 output channels; 0 keeps the input channel count
    std::size_t fc1_width = 1024;
    std::size_t fc2_width = 512;
    double dropout_rate = 0.3;

    std::string_view name() const { return to_string(kind); }

    std::size_t input_channels() const { return input_shape.empty() ? 0 : input_shape.back(); }
    std::size_t effective_conv_width() const { return conv_width ? conv_width : input_channels(); }

    void validate() const {
        if (input_shape.size() != 3) throw ShapeError("head input must be [H,W,C], got " + nn::shape_string(input_shape));
        for (auto d : input_shape) {
            if (d == 0) throw ShapeError("head input dimensions must be positive");
        }
        if (classes < 2) throw InvalidArgument("a classifier head needs at least two classes");
    }
};

inline HeadConfig head_config(std::string_view name, Shape input_shape, std::size_t classes = 2,
                              std::size_t conv_width = 0) {
    HeadConfig c;
    c.kind = parse_head_kind(name);
    c.input_shape = std::move(input_shape);
    c.classes = classes;
    c.conv_width = conv_width;
    c.validate();
    return c;
}

/// A named group of consecutive layers, one per row of the head structure table.
struct HeadStage {
    std::string name;
    std::size_t first = 0;
    std::size_t count = 0;
};

/// Trainable top layers over frozen backbone features. Input [N,H,W,C], output logits [N,classes].
class Head {
public:
    Head(HeadConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        std::mt19937_64 rng(seed);
        const auto C = config_.input_channels();
        auto stage = [&](std::string name, auto&&... layers) {
            HeadStage s{std::move(name), layers_.size(), sizeof...(layers)};
            (layers_.emplace_back(std::forward<decltype(layers)>(layers)), ...);
            stages_.push_back(std::move(s));
        };

        if (config_.kind == HeadKind::Vgg16Fc) {
            stage("Maxpooling", nn::GlobalMaxPool{});
            stage("FC-" + std::to_string(config_.fc1_width), nn::Linear("fc1", C, config_.fc1_width, rng), nn::ReLU{});
            stage("Dropout " + format_rate(config_.dropout_rate), nn::Dropout(config_.dropout_rate, rng()));
            stage("FC-" + std::to_string(config_.fc2_width),
                  nn::Linear("fc2", config_.fc1_width, config_.fc2_width, rng), nn::ReLU{});
            stage("softmax", nn::Linear("classifier", config_.fc2_width, config_.classes, rng));
        } else {
            const auto W = config_.effective_conv_width();
            stage("Conv1x1", nn::Linear("conv1x1", C, W, rng));
            if (config_.kind == HeadKind::EfficientNetV2SA) {
                stage("BN(ACON-C)", nn::BatchNorm("bn", W), nn::AconC("acon_c", W));
            } else {
                stage("BN(SiLU)", nn::BatchNorm("bn", W), nn::SiLU{});
            }
            stage("Averagepooling", nn::GlobalAvgPool{});
            stage("softmax", nn::Linear("classifier", W, config_.classes, rng));
        }
    }

    const HeadConfig& config() const noexcept { return config_; }
    const std::vector<HeadStage>& stages() const noexcept { return stages_; }
    std::vector<Layer>& layers() noexcept { return layers_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }

    Tensor forward(const Tensor& batch, Mode mode) {
        check_batch(batch);
        Tensor x = batch;
        for (auto& l : layers_) x = std::visit([&](auto& layer) { return layer.forward(x, mode); }, l);
        return x;
    }

    /// Inference without touching any cached state.
    Tensor infer(const Tensor& batch) const {
        check_batch(batch);
        Tensor x = batch;
        for (const auto& l : layers_) x = std::visit([&](const auto& layer) { return layer.infer(x); }, l);
        return x;
    }

    void backward(const Tensor& grad_logits) {
        Tensor g = grad_logits;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
            g = std::visit([&](auto& layer) { return layer.backward(g); }, *it);
        }
    }

    std::vector<nn::Param*> params() {
        std::vector<nn::Param*> out;
        for (auto& l : layers_) {
            for (auto* p : std::visit([](auto& layer) { return layer.params(); }, l)) out.push_back(p);
        }
        return out;
    }

    std::vector<nn::NamedBuffer> buffers() {
        std::vector<nn::NamedBuffer> out;
        for (auto& l : layers_) {
            for (auto& b : std::visit([](auto& layer) { return layer.buffers(); }, l)) out.push_back(b);
        }
        return out;
    }

    /// Every trainable tensor and statistics buffer, by name.
    std::vector<std::pair<std::string, Tensor*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (auto* p : params()) out.emplace_back(p->name, &p->value);
        for (auto& b : buffers()) out.push_back(b);
        return out;
    }

    std::size_t parameter_count() const {
        // params() only hands out pointers; nothing is modified here.
        std::size_t n = 0;
        for (auto* p : const_cast<Head*>(this)->params()) n += p->value.size();
        return n;
    }

    std::vector<double> predict_proba(const Tensor& sample) const {
        Shape batched{1};
        batched.insert(batched.end(), sample.shape().begin(), sample.shape().end());
        const Tensor logits = infer(sample.reshaped(batched));
        return nn::softmax(logits.data());
    }

private:
    static std::string format_rate(double r) {
        auto s = std::to_string(r);
        while (s.size() > 1 && s.back() == '0') s.pop_back();
        return s;
    }

    void check_batch(const Tensor& batch) const {
        if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != config_.input_shape) {
            throw ShapeError(std::string(config_.name()) + " head expects [N," +
                             nn::shape_string(config_.input_shape).substr(1) + ", got " +
                             nn::shape_string(batch.shape()));
        }
    }

    HeadConfig config_;
    std::vector<Layer> layers_;
    std::vector<HeadStage> stages_;
};

inline Head build_head(const HeadConfig& config, std::uint64_t seed) { return Head(config, seed); }

/// Stacks samples [H,W,C] into a batch [N,H,W,C].
inline Tensor stack_samples(const std::vector<const Tensor*>& samples) {
    if (samples.empty()) throw ShapeError("stack_samples: empty batch");
    const auto& shape = samples.front()->shape();
    Shape batched{samples.size()};
    batched.insert(batched.end(), shape.begin(), shape.end());
    std::vector<double> data;
    data.reserve(nn::shape_size(batched));
    for (const auto* s : samples) {
        if (s->shape() != shape) throw ShapeError("stack_samples: inconsistent sample shapes");
        data.insert(data.end(), s->data().begin(), s->data().end());
    }
    return Tensor(std::move(batched), std::move(data));
}

// ---------------------------------------------------------------------------
// Model snapshot: a JSON document holding the head configuration, training
// provenance and every named tensor (shape plus row-major values).
// ---------------------------------------------------------------------------

inline constexpr int kModelSchemaVersion = 1;
inline constexpr std::string_view kModelFormat = "prediag-model";

struct ModelInfo {
    std::string model_id;
    TargetKind target = TargetKind::Label;
    std::optional<int> magnification;
    std::uint64_t seed = 0;
    double train_fraction = 0.7;
};

struct TrainedModel {
    Head head;
    ModelInfo info;

    std::vector<std::string> class_names() const { return classifier::class_names(info.target); }
};

inline nlohmann::json model_to_json(TrainedModel& model) {
    using nlohmann::json;
    const auto& c = model.head.config();
    json j = {{"format", kModelFormat},
              {"schema_version", kModelSchemaVersion},
              {"model_id", model.info.model_id},
              {"head", c.name()},
              {"input_shape", c.input_shape},
              {"classes", c.classes},
              {"conv_width", c.conv_width},
              {"fc1_width", c.fc1_width},
              {"fc2_width", c.fc2_width},
              {"dropout_rate", c.dropout_rate},
              {"target", to_string(model.info.target)},
              {"magnification", model.info.magnification ? json(*model.info.magnification) : json(nullptr)},
              {"seed", model.info.seed},
              {"train_fraction", model.info.train_fraction},
              {"tensors", json::array()}};
    for (const auto& [name, t] : model.head.named_tensors()) {
        t->require_finite("model tensor " + name);
        j["tensors"].push_back({{"name", name}, {"shape", t->shape()}, {"values", t->values()}});
    }
    return j;
}

inline TrainedModel model_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != kModelFormat) throw IoError("not a model snapshot");
    if (j.value("schema_version", -1) != kModelSchemaVersion) {
        throw SchemaVersionError("unsupported model schema_version " + j.value("schema_version", nlohmann::json()).dump());
    }
    HeadConfig c;
    c.kind = parse_head_kind(j.at("head").get<std::string>());
    c.input_shape = j.at("input_shape").get<Shape>();
    c.classes = j.at("classes").get<std::size_t>();
    c.conv_width = j.value("conv_width", std::size_t{0});
    c.fc1_width = j.value("fc1_width", c.fc1_width);
    c.fc2_width = j.value("fc2_width", c.fc2_width);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);

    ModelInfo info;
    info.model_id = j.at("model_id").get<std::string>();
    info.target = parse_target(j.value("target", "label"));
    if (j.contains("magnification") && !j["magnification"].is_null()) info.magnification = j["magnification"].get<int>();
    info.seed = j.value("seed", std::uint64_t{0});
    info.train_fraction = j.value("train_fraction", 0.7);

    TrainedModel model{Head(c, info.seed), info};
    if (model.class_names().size() != c.classes) throw IoError("model class count does not match its target kind");

    std::map<std::string, const nlohmann::json*> stored;
    for (const auto& t : j.at("tensors")) stored[t.at("name").get<std::string>()] = &t;
    for (auto& [name, tensor] : model.head.named_tensors()) {
        auto it = stored.find(name);
        if (it == stored.end()) throw IoError("model snapshot is missing tensor " + name);
        Tensor loaded(it->second->at("shape").get<Shape>(), it->second->at("values").get<std::vector<double>>());
        if (loaded.shape() != tensor->shape()) throw ShapeError("tensor " + name + " has the wrong shape");
        *tensor = std::move(loaded);
    }
    return model;
}

inline void save_model(TrainedModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(path, "cannot write model");
    out << model_to_json(model).dump() << '\n';
    if (!out) throw IoError(path, "write failure");
}

inline TrainedModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open model");
    }
    try {
        return model_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path, std::string("bad model snapshot: ") + e.what());
    }
}

}  // namespace prediag::classifier
