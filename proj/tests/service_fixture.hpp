#pragma once

// Shared setup for service tests: the shipped chat data, a small trained model and a
// localhost server on an ephemeral port.

#include <filesystem>
#include <memory>
#include <thread>

#include <httplib.h>

#include "prediag/chat/dialogue.hpp"
#include "prediag/chat/knowledge_store.hpp"
#include "prediag/classifier/backbone.hpp"
#include "prediag/classifier/head.hpp"
#include "prediag/classifier/training.hpp"
#include "prediag/service/chat_service.hpp"
#include "prediag/service/http.hpp"

namespace fixture {

namespace fs = std::filesystem;
using namespace prediag;

inline const fs::path kData = PREDIAG_DATA_DIR;
inline const nn::Shape kFeatureShape{1, 1, 8};

inline std::shared_ptr<const chat::KnowledgeGraph> shipped_graph() {
    auto g = std::make_shared<chat::KnowledgeGraph>();
    chat::train_from_files(*g, chat::corpus_files(kData / "corpus"));
    return g;
}

inline std::shared_ptr<const chat::RuleSet> shipped_rules() {
    return std::make_shared<const chat::RuleSet>(chat::load_rules(kData / "rules.json"));
}

/// EfficientNetV2-SA head trained on well-separated synthetic benign/malignant features.
inline std::shared_ptr<const classifier::TrainedModel> small_model(const std::string& id = "sa-test") {
    auto head = classifier::build_head(classifier::head_config("EfficientNetV2-SA", kFeatureShape), 11);
    const auto train = classifier::generate_synthetic_features(2, 32, kFeatureShape, 10.0, 5);
    classifier::train_head(head, train, {}, classifier::TrainHyper{}, 11);
    return std::make_shared<const classifier::TrainedModel>(
        classifier::TrainedModel{std::move(head), {id, classifier::TargetKind::Label, 40, 11, 0.7}});
}

/// A single-sample feature container drawn from class `k`.
inline std::string sample_payload(std::size_t k, std::uint64_t seed, const nn::Shape& shape = kFeatureShape) {
    std::mt19937_64 rng(seed);
    classifier::FeatureContainer c;
    c.shape = shape;
    c.samples.emplace("probe", classifier::synthetic_feature_map(shape, k, 10.0, rng));
    return classifier::serialize_feature_container(c);
}

/// Runs register_routes on 127.0.0.1 with an OS-assigned port until destroyed.
class LocalServer {
public:
    explicit LocalServer(service::ChatService& svc) {
        service::register_routes(server_, svc);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LocalServer() {
        server_.stop();
        thread_.join();
    }
    LocalServer(const LocalServer&) = delete;
    LocalServer& operator=(const LocalServer&) = delete;

    int port() const { return port_; }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port_);
        c.set_read_timeout(10, 0);
        return c;
    }

private:
    httplib::Server server_;
    int port_ = -1;
    std::thread thread_;
};

}  // namespace fixture
