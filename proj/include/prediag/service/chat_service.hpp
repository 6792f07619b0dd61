#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prediag/chat/dialogue.hpp"
#include "prediag/chat/knowledge_store.hpp"
#include "prediag/classifier/backbone.hpp"
#include "prediag/classifier/head.hpp"
#include "prediag/error.hpp"

namespace prediag::service {

using nlohmann::json;

/// An error that maps onto an HTTP status.
class ApiError : public Error {
public:
    ApiError(int status, const std::string& what) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

struct BadRequest : ApiError {
    explicit BadRequest(const std::string& what) : ApiError(400, what) {}
};
struct ResourceNotFound : ApiError {
    explicit ResourceNotFound(const std::string& what) : ApiError(404, what) {}
};
struct InternalError : ApiError {
    explicit InternalError(const std::string& what) : ApiError(500, what) {}
};

struct ServiceConfig {
    double similarity_threshold = chat::kDefaultSimilarityThreshold;
    chat::SelectionPolicy policy = chat::SelectionPolicy::First;
    std::chrono::seconds session_idle_timeout{30 * 60};
    std::uint64_t seed = 0;
};

struct ChatRequest {
    std::optional<std::string> session_id;
    std::string text;

    static ChatRequest from_json(const json& j) {
        if (!j.is_object()) throw BadRequest("chat request must be a JSON object");
        ChatRequest r;
        if (j.contains("session_id") && !j["session_id"].is_null()) {
            if (!j["session_id"].is_string()) throw BadRequest("session_id must be a string");
            r.session_id = j["session_id"].get<std::string>();
        }
        if (!j.contains("text") || !j["text"].is_string()) throw BadRequest("text is required");
        r.text = j["text"].get<std::string>();
        return r;
    }
};

struct ChatResponse {
    std::string session_id;
    std::string reply;
    std::optional<double> matched_similarity;
    chat::GoalStatus goal_status = chat::GoalStatus::InProgress;
    chat::RiskLevel risk_level = chat::RiskLevel::Unknown;

    json to_json() const {
        return {{"session_id", session_id},
                {"reply", reply},
                {"matched_similarity", matched_similarity ? json(*matched_similarity) : json(nullptr)},
                {"goal_status", chat::to_string(goal_status)},
                {"risk_level", chat::to_string(risk_level)}};
    }
};

struct ClassifyResponse {
    std::string label;
    std::optional<std::string> subtype;
    std::vector<std::pair<std::string, double>> confidence;  // class name and probability, in class order
    std::string model_id;

    json to_json() const {
        json conf = json::object();
        for (const auto& [name, p] : confidence) conf[name] = p;
        return {{"label", label},
                {"subtype", subtype ? json(*subtype) : json(nullptr)},
                {"confidence", conf},
                {"model_id", model_id}};
    }
};

// ---------------------------------------------------------------------------
// Response schema checks. Each returns the list of violations, empty when the
// document is well formed.
// ---------------------------------------------------------------------------

inline std::vector<std::string> chat_response_violations(const json& j) {
    std::vector<std::string> v;
    if (!j.is_object()) return {"response is not an object"};
    if (!j.contains("session_id") || !j["session_id"].is_string() || j["session_id"].get<std::string>().empty()) {
        v.emplace_back("session_id must be a non-empty string");
    }
    if (!j.contains("reply") || !j["reply"].is_string() || j["reply"].get<std::string>().empty()) {
        v.emplace_back("reply must be a non-empty string");
    }
    if (!j.contains("matched_similarity")) {
        v.emplace_back("matched_similarity is missing");
    } else if (!j["matched_similarity"].is_null()) {
        if (!j["matched_similarity"].is_number()) {
            v.emplace_back("matched_similarity must be a number or null");
        } else {
            const double s = j["matched_similarity"].get<double>();
            if (!(s >= 0.0 && s <= 1.0)) v.emplace_back("matched_similarity outside [0,1]");
        }
    }
    auto one_of = [&](const char* key, std::initializer_list<std::string_view> allowed) {
        if (!j.contains(key) || !j[key].is_string() ||
            std::find(allowed.begin(), allowed.end(), j[key].get<std::string>()) == allowed.end()) {
            v.push_back(std::string(key) + " has an unexpected value");
        }
    };
    one_of("goal_status", {"InProgress", "Completed", "Failed"});
    one_of("risk_level", {"unknown", "low", "medium", "high"});
    return v;
}

inline std::vector<std::string> classify_response_violations(const json& j, double tolerance = 1e-9) {
    std::vector<std::string> v;
    if (!j.is_object()) return {"response is not an object"};
    if (!j.contains("label") || !j["label"].is_string() ||
        (j["label"] != "benign" && j["label"] != "malignant")) {
        v.emplace_back("label must be benign or malignant");
    }
    if (!j.contains("subtype") || !(j["subtype"].is_null() || j["subtype"].is_string())) {
        v.emplace_back("subtype must be a string or null");
    }
    if (!j.contains("model_id") || !j["model_id"].is_string()) v.emplace_back("model_id must be a string");
    if (!j.contains("confidence") || !j["confidence"].is_object() || j["confidence"].empty()) {
        v.emplace_back("confidence must be a non-empty object");
        return v;
    }
    double sum = 0.0, best = -1.0;
    std::string best_name;
    for (const auto& [name, p] : j["confidence"].items()) {
        if (!p.is_number() || p.get<double>() < 0.0) {
            v.push_back("confidence of " + name + " must be a non-negative number");
            continue;
        }
        sum += p.get<double>();
        if (p.get<double>() > best) {
            best = p.get<double>();
            best_name = name;
        }
    }
    if (std::abs(sum - 1.0) > tolerance) v.emplace_back("confidence does not sum to 1");
    if (v.empty()) {
        const auto predicted = j["subtype"].is_string() ? j["subtype"].get<std::string>() : j["label"].get<std::string>();
        if (predicted != best_name) v.emplace_back("prediction is not the most confident class");
    }
    return v;
}

// ---------------------------------------------------------------------------
// Goal completion harness
// ---------------------------------------------------------------------------

struct ScriptOutcome {
    std::string name;
    chat::GoalStatus expected = chat::GoalStatus::Completed;
    chat::GoalStatus actual = chat::GoalStatus::Failed;
    std::vector<chat::Turn> transcript;
};

struct GcrHarnessReport {
    chat::GcrReport gcr;
    std::vector<ScriptOutcome> dialogues;

    std::size_t mismatches() const {
        return static_cast<std::size_t>(
            std::ranges::count_if(dialogues, [](const auto& d) { return d.expected != d.actual; }));
    }
};

inline std::vector<std::filesystem::path> dialogue_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw PathNotFound(dir);
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".txt") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Replays every script in `dir` through a fresh session, ends the session and labels it.
inline GcrHarnessReport run_gcr_harness(const std::filesystem::path& dir, const chat::KnowledgeGraph& graph,
                                        const chat::RuleSet& rules, const chat::DialogueConfig& config = {},
                                        std::uint64_t seed = 0) {
    const auto files = dialogue_files(dir);
    if (files.empty()) throw IoError(dir, "no dialogue scripts");
    std::vector<chat::DialogueScript> scripts;
    for (const auto& f : files) scripts.push_back(chat::load_dialogue_script(f));

    GcrHarnessReport report;
    std::vector<chat::DialogueOutcome> outcomes;
    for (const auto& script : scripts) {
        chat::Session session(script.name, rules, seed);
        for (const auto& turn : script.turns) chat::handle_turn(session, turn, graph, rules, config);
        session.end();
        outcomes.push_back(chat::outcome_of(session));
        report.dialogues.push_back({script.name, script.expected,
                                    outcomes.back().completed ? chat::GoalStatus::Completed : chat::GoalStatus::Failed,
                                    session.history()});
    }
    report.gcr = chat::compute_gcr(outcomes);
    return report;
}

// ---------------------------------------------------------------------------
// The service: chat sessions plus a registry of trained classifier heads.
// ---------------------------------------------------------------------------

class ChatService {
public:
    using Clock = std::chrono::steady_clock;

    ChatService(std::shared_ptr<const chat::KnowledgeGraph> graph, std::shared_ptr<const chat::RuleSet> rules,
                ServiceConfig config = {})
        : graph_(std::move(graph)), rules_(std::move(rules)), config_(config), id_rng_(config.seed) {
        if (!graph_ || !rules_) throw InvalidArgument("chat service needs a knowledge graph and a rule set");
        dialogue_.threshold = chat::SimilarityScore(config_.similarity_threshold);
        dialogue_.policy = config_.policy;
    }

    const ServiceConfig& config() const noexcept { return config_; }

    ChatResponse handle_chat(const ChatRequest& request) {
        if (chat::trim(request.text).empty()) throw BadRequest("text must be non-empty");
        if (!utf8::is_valid(request.text)) throw BadRequest("text is not valid UTF-8");
        expire_idle();
        auto entry = resolve(request.session_id);

        std::lock_guard turn_lock(entry->mu);
        const chat::Session backup = entry->session;
        chat::TurnResult turn;
        try {
            turn = chat::handle_turn(entry->session, request.text, *graph_, *rules_, dialogue_);
        } catch (const std::exception& e) {
            entry->session = backup;
            throw InternalError(std::string("turn failed: ") + e.what());
        }
        ChatResponse r;
        r.session_id = entry->session.id();
        r.reply = std::move(turn.reply);
        if (turn.matched_similarity) r.matched_similarity = turn.matched_similarity->value();
        r.goal_status = entry->session.goal_status();
        r.risk_level = entry->session.risk_profile().risk_level;
        return r;
    }

    /// Transcript, goal status and risk profile of a live session.
    json session_json(const std::string& id) const {
        auto entry = find(id);
        std::lock_guard lock(entry->mu);
        const auto& s = entry->session;
        json turns = json::array();
        for (const auto& t : s.history()) turns.push_back({{"speaker", chat::to_string(t.speaker)}, {"text", t.text}});
        json slots = json::object();
        for (const auto& [name, value] : s.risk_profile().slots) {
            if (!value) {
                slots[name] = nullptr;
            } else if (const auto* b = std::get_if<bool>(&*value)) {
                slots[name] = *b;
            } else {
                slots[name] = std::get<double>(*value);
            }
        }
        return {{"session_id", s.id()},
                {"goal_status", chat::to_string(s.goal_status())},
                {"risk_level", chat::to_string(s.risk_profile().risk_level)},
                {"upload_prompted", s.upload_prompted()},
                {"history", turns},
                {"risk_profile", slots}};
    }

    /// Ends a session early; an unfinished consultation becomes Failed.
    json end_session(const std::string& id) {
        {
            auto entry = find(id);
            std::lock_guard lock(entry->mu);
            entry->session.end();
        }
        return session_json(id);
    }

    std::size_t session_count() const {
        std::lock_guard lock(sessions_mu_);
        return sessions_.size();
    }

    /// Drops sessions idle for longer than the configured timeout. Returns how many were dropped.
    std::size_t expire_idle(Clock::time_point now = Clock::now()) {
        std::lock_guard lock(sessions_mu_);
        return std::erase_if(sessions_, [&](const auto& kv) {
            return now - kv.second->last_touch > config_.session_idle_timeout;
        });
    }

    // -- models ---------------------------------------------------------------

    /// Adds or replaces a model. Requests already running keep the model they started with.
    void register_model(std::shared_ptr<const classifier::TrainedModel> model) {
        if (!model) throw InvalidArgument("register_model: null model");
        if (model->info.model_id.empty()) throw InvalidArgument("register_model: model without an identifier");
        std::unique_lock lock(models_mu_);
        models_[model->info.model_id] = std::move(model);
    }

    /// Loads every `*.json` model snapshot in `dir`. Returns the number loaded.
    std::size_t load_models(const std::filesystem::path& dir) {
        if (!std::filesystem::is_directory(dir)) throw PathNotFound(dir);
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            register_model(std::make_shared<const classifier::TrainedModel>(classifier::load_model(f)));
        }
        return files.size();
    }

    std::vector<std::string> model_ids() const {
        std::shared_lock lock(models_mu_);
        std::vector<std::string> out;
        for (const auto& [id, m] : models_) out.push_back(id);
        return out;
    }

    std::shared_ptr<const classifier::TrainedModel> model(const std::string& id) const {
        std::shared_lock lock(models_mu_);
        auto it = models_.find(id);
        if (it == models_.end()) throw ResourceNotFound("unknown model_id: " + id);
        return it->second;
    }

    /// Classifies the single sample carried by a feature container.
    ClassifyResponse handle_classify(std::string_view payload, const std::string& model_id) const {
        const auto m = model(model_id);
        classifier::FeatureContainer container;
        try {
            container = classifier::parse_feature_container(payload);
        } catch (const Error& e) {
            throw BadRequest(std::string("unparseable feature container: ") + e.what());
        }
        if (container.samples.size() != 1) {
            throw BadRequest("feature container must hold exactly one sample, got " +
                             std::to_string(container.samples.size()));
        }
        const auto& sample = container.samples.begin()->second;
        if (sample.shape() != m->head.config().input_shape) {
            throw BadRequest("feature shape " + nn::shape_string(sample.shape()) + " does not match model input " +
                             nn::shape_string(m->head.config().input_shape));
        }
        if (!sample.all_finite()) throw BadRequest("feature values must be finite");

        const auto proba = m->head.predict_proba(sample);
        const auto names = m->class_names();
        const auto best = static_cast<std::size_t>(std::max_element(proba.begin(), proba.end()) - proba.begin());

        ClassifyResponse r;
        r.model_id = m->info.model_id;
        for (std::size_t k = 0; k < proba.size(); ++k) r.confidence.emplace_back(names[k], proba[k]);
        if (m->info.target == classifier::TargetKind::Subtype) {
            const auto subtype = classifier::kSubtypes[best];
            r.subtype = std::string(classifier::to_string(subtype));
            r.label = std::string(classifier::to_string(classifier::label_of(subtype)));
        } else {
            r.label = names[best];
        }
        return r;
    }

private:
    struct Entry {
        Entry(std::string id, const chat::RuleSet& rules, std::uint64_t seed) : session(std::move(id), rules, seed) {}
        std::mutex mu;  // serializes the turns of one session
        chat::Session session;
        Clock::time_point last_touch = Clock::now();  // guarded by sessions_mu_
    };

    std::shared_ptr<Entry> resolve(const std::optional<std::string>& id) {
        std::lock_guard lock(sessions_mu_);
        if (id) {
            auto it = sessions_.find(*id);
            if (it == sessions_.end()) throw ResourceNotFound("unknown or expired session: " + *id);
            it->second->last_touch = Clock::now();
            return it->second;
        }
        std::string fresh;
        do {
            std::ostringstream os;
            os << std::hex << std::setfill('0') << std::setw(16) << id_rng_() << std::setw(16) << id_rng_();
            fresh = os.str();
        } while (sessions_.count(fresh));
        auto entry = std::make_shared<Entry>(fresh, *rules_, id_rng_());
        sessions_.emplace(fresh, entry);
        return entry;
    }

    std::shared_ptr<Entry> find(const std::string& id) const {
        std::lock_guard lock(sessions_mu_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw ResourceNotFound("unknown or expired session: " + id);
        return it->second;
    }

    std::shared_ptr<const chat::KnowledgeGraph> graph_;
    std::shared_ptr<const chat::RuleSet> rules_;
    ServiceConfig config_;
    chat::DialogueConfig dialogue_;

    mutable std::mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<Entry>> sessions_;
    std::mt19937_64 id_rng_;

    mutable std::shared_mutex models_mu_;
    std::map<std::string, std::shared_ptr<const classifier::TrainedModel>> models_;
};

}  // namespace prediag::service
