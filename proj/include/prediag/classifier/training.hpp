#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "prediag/classifier/backbone.hpp"
#include "prediag/classifier/dataset.hpp"
#include "prediag/classifier/head.hpp"
#include "prediag/error.hpp"
#include "prediag/nn/adam.hpp"
#include "prediag/nn/layers.hpp"

namespace prediag::classifier {

struct TrainHyper {
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::size_t max_epochs = 200;
    std::size_t patience = 10;
};

/// Stops once the monitored loss has failed to improve for `patience` consecutive epochs.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Records the loss of `epoch` (1-based). Returns true when training should stop.
    bool observe(std::size_t epoch, double loss) {
        if (best_epoch_ == 0 || loss < best_loss_) {
            best_loss_ = loss;
            best_epoch_ = epoch;
            stale_ = 0;
            return false;
        }
        ++stale_;
        return stale_ >= patience_;
    }

    bool improved_at(std::size_t epoch) const { return best_epoch_ == epoch; }
    std::size_t best_epoch() const { return best_epoch_; }  // 0 before the first observation
    double best_loss() const { return best_loss_; }

private:
    std::size_t patience_;
    std::size_t stale_ = 0;
    std::size_t best_epoch_ = 0;
    double best_loss_ = 0.0;
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double validation_loss = 0.0;
    double validation_accuracy = 0.0;

    bool operator==(const EpochStats&) const = default;
};

using SubtypeAccuracy = std::map<Subtype, std::optional<double>>;

struct TrainReport {
    std::vector<EpochStats> history;
    std::size_t stopped_epoch = 0;
    std::size_t best_epoch = 0;
    std::optional<double> test_accuracy;
    SubtypeAccuracy per_class;

    bool operator==(const TrainReport&) const = default;
};

namespace detail {

inline Tensor gather_batch(const FeatureSet& set, std::span<const std::size_t> idx) {
    std::vector<const Tensor*> samples;
    samples.reserve(idx.size());
    for (auto i : idx) samples.push_back(&set.samples[i]);
    return stack_samples(samples);
}

inline std::vector<std::size_t> gather_labels(const FeatureSet& set, std::span<const std::size_t> idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(set.labels[i]);
    return out;
}

inline std::size_t argmax(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct LossAccuracy {
    double loss = 0.0;
    double accuracy = 0.0;
};

inline constexpr std::size_t kEvalChunk = 256;

inline LossAccuracy evaluate_loss(const Head& head, const FeatureSet& set) {
    double loss = 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < set.size(); start += kEvalChunk) {
        idx.clear();
        for (std::size_t i = start; i < std::min(set.size(), start + kEvalChunk); ++i) idx.push_back(i);
        const Tensor logits = head.infer(gather_batch(set, idx));
        const auto labels = gather_labels(set, idx);
        const auto r = nn::softmax_cross_entropy_batch(logits, labels);
        loss += r.loss * static_cast<double>(idx.size());
        const auto K = logits.dim(1);
        for (std::size_t n = 0; n < idx.size(); ++n) {
            if (argmax(logits.data().subspan(n * K, K)) == labels[n]) ++correct;
        }
    }
    const auto total = static_cast<double>(set.size());
    return {loss / total, static_cast<double>(correct) / total};
}

inline void check_set(const Head& head, const FeatureSet& set, const char* what) {
    if (!set.empty() && set.sample_shape != head.config().input_shape) {
        throw ShapeError(std::string(what) + " features " + nn::shape_string(set.sample_shape) +
                         " do not match head input " + nn::shape_string(head.config().input_shape));
    }
    for (auto l : set.labels) {
        if (l >= head.config().classes) throw InvalidArgument(std::string(what) + " label out of range");
    }
}

/// Contiguous batches of `size`; a trailing batch of one joins the previous batch, because
/// batch normalization cannot train on a single sample.
inline std::vector<std::span<const std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t size) {
    std::vector<std::span<const std::size_t>> out;
    for (std::size_t start = 0; start < order.size(); start += size) {
        out.push_back(order.subspan(start, std::min(size, order.size() - start)));
    }
    if (out.size() >= 2 && out.back().size() == 1) {
        const auto merged = out[out.size() - 2].size() + 1;
        out.pop_back();
        out.back() = order.subspan(order.size() - merged, merged);
    }
    return out;
}

}  // namespace detail

/// Mini-batch Adam over the head's parameters with early stopping on validation loss. The
/// parameters of the best epoch are restored before returning. With an empty validation set the
/// training loss is monitored instead.
inline TrainReport train_head(Head& head, const FeatureSet& train, const FeatureSet& validation,
                              const TrainHyper& hyper, std::uint64_t seed) {
    if (train.empty()) throw InvalidArgument("train_head: empty training set");
    if (hyper.batch_size == 0) throw InvalidArgument("train_head: batch size must be positive");
    detail::check_set(head, train, "training");
    detail::check_set(head, validation, "validation");

    TrainReport report;
    if (hyper.max_epochs == 0) return report;

    nn::Adam adam(head.params(), nn::AdamHyper{.lr = hyper.learning_rate});
    EarlyStopping stopping(hyper.patience);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto snapshot = [&] {
        std::vector<Tensor> out;
        for (const auto& [name, t] : head.named_tensors()) out.push_back(*t);
        return out;
    };
    std::vector<Tensor> best = snapshot();

    for (std::size_t epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            std::swap(order[i], order[static_cast<std::size_t>(rng() % (i + 1))]);
        }
        double epoch_loss = 0.0;
        try {
            for (auto batch : detail::make_batches(order, hyper.batch_size)) {
                adam.zero_grad();
                const Tensor logits = head.forward(detail::gather_batch(train, batch), nn::Mode::Train);
                const auto labels = detail::gather_labels(train, batch);
                const auto r = nn::softmax_cross_entropy_batch(logits, labels);
                if (!std::isfinite(r.loss)) throw NumericError("non-finite loss");
                epoch_loss += r.loss * static_cast<double>(batch.size());
                head.backward(r.grad);
                adam.step();
            }
        } catch (const NumericError& e) {
            throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = epoch_loss / static_cast<double>(train.size());
        stats.train_accuracy = detail::evaluate_loss(head, train).accuracy;
        if (!validation.empty()) {
            const auto v = detail::evaluate_loss(head, validation);
            stats.validation_loss = v.loss;
            stats.validation_accuracy = v.accuracy;
        } else {
            stats.validation_loss = stats.train_loss;
            stats.validation_accuracy = stats.train_accuracy;
        }
        if (!std::isfinite(stats.validation_loss)) {
            throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": non-finite validation loss");
        }
        report.history.push_back(stats);
        report.stopped_epoch = epoch;

        const bool stop = stopping.observe(epoch, stats.validation_loss);
        if (stopping.improved_at(epoch)) best = snapshot();
        if (stop) break;
    }

    report.best_epoch = stopping.best_epoch();
    auto tensors = head.named_tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i].second = best[i];
    return report;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;  // [true][predicted]

inline std::vector<std::size_t> predict(const Head& head, const FeatureSet& set) {
    detail::check_set(head, set, "evaluation");
    std::vector<std::size_t> out;
    out.reserve(set.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < set.size(); start += detail::kEvalChunk) {
        idx.clear();
        for (std::size_t i = start; i < std::min(set.size(), start + detail::kEvalChunk); ++i) idx.push_back(i);
        const Tensor logits = head.infer(detail::gather_batch(set, idx));
        const auto K = logits.dim(1);
        for (std::size_t n = 0; n < idx.size(); ++n) out.push_back(detail::argmax(logits.data().subspan(n * K, K)));
    }
    return out;
}

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                        std::size_t classes) {
    if (truth.size() != predicted.size()) throw InvalidArgument("confusion_matrix: length mismatch");
    ConfusionMatrix cm(classes, std::vector<std::size_t>(classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= classes || predicted[i] >= classes) throw InvalidArgument("confusion_matrix: class out of range");
        ++cm[truth[i]][predicted[i]];
    }
    return cm;
}

/// Sum of true positives over the sum of true positives and false negatives, across classes.
inline double accuracy_from_confusion(const ConfusionMatrix& cm) {
    std::size_t tp = 0, tp_fn = 0;
    for (std::size_t k = 0; k < cm.size(); ++k) {
        if (cm[k].size() != cm.size()) throw InvalidArgument("confusion matrix must be square");
        tp += cm[k][k];
        for (auto v : cm[k]) tp_fn += v;  // row k: every sample whose true class is k
    }
    if (tp_fn == 0) throw InvalidArgument("accuracy of an empty confusion matrix");
    return static_cast<double>(tp) / static_cast<double>(tp_fn);
}

inline double evaluate_accuracy(const Head& head, const FeatureSet& test) {
    if (test.empty()) throw InvalidArgument("evaluate_accuracy: empty test set");
    return accuracy_from_confusion(confusion_matrix(test.labels, predict(head, test), head.config().classes));
}

/// Accuracy within each subtype; subtypes with no samples stay undefined.
inline SubtypeAccuracy per_class_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                          std::span<const std::optional<Subtype>> subtypes) {
    if (truth.size() != predicted.size() || truth.size() != subtypes.size()) {
        throw InvalidArgument("per_class_accuracy: length mismatch");
    }
    std::map<Subtype, std::pair<std::size_t, std::size_t>> tally;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!subtypes[i]) continue;
        auto& [correct, total] = tally[*subtypes[i]];
        ++total;
        if (truth[i] == predicted[i]) ++correct;
    }
    SubtypeAccuracy out;
    for (auto s : kSubtypes) {
        auto it = tally.find(s);
        out[s] = it == tally.end() ? std::nullopt
                                   : std::optional<double>(static_cast<double>(it->second.first) /
                                                           static_cast<double>(it->second.second));
    }
    return out;
}

inline SubtypeAccuracy per_class_accuracy(const Head& head, const FeatureSet& test) {
    return per_class_accuracy(test.labels, predict(head, test), test.subtypes);
}

// ---------------------------------------------------------------------------
// Delimited reports: one accuracy row per head across magnifications, and one
// per-subtype row per (head, magnification).
// ---------------------------------------------------------------------------

inline std::string format_percent_cell(std::optional<double> fraction) {
    if (!fraction) return "NA";
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << *fraction * 100.0;
    return os.str();
}

struct AccuracyRow {
    std::string model;
    std::map<int, std::optional<double>> by_magnification;
};

inline std::string format_accuracy_table(const std::vector<AccuracyRow>& rows, char sep = ',') {
    std::ostringstream os;
    os << "model";
    for (int m : kMagnifications) os << sep << m << 'X';
    os << '\n';
    for (const auto& r : rows) {
        os << r.model;
        for (int m : kMagnifications) {
            auto it = r.by_magnification.find(m);
            os << sep << format_percent_cell(it == r.by_magnification.end() ? std::nullopt : it->second);
        }
        os << '\n';
    }
    return os.str();
}

struct SubtypeRow {
    std::string model;
    std::optional<int> magnification;
    SubtypeAccuracy cells;
};

inline std::string format_subtype_table(const std::vector<SubtypeRow>& rows, char sep = ',') {
    std::ostringstream os;
    os << "model" << sep << "magnification";
    for (auto s : kSubtypes) os << sep << to_string(s);
    os << '\n';
    for (const auto& r : rows) {
        os << r.model << sep << (r.magnification ? std::to_string(*r.magnification) + "X" : "all");
        for (auto s : kSubtypes) {
            auto it = r.cells.find(s);
            os << sep << format_percent_cell(it == r.cells.end() ? std::nullopt : it->second);
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace prediag::classifier
