#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "prediag/chat/knowledge_store.hpp"
#include "prediag/chat/matcher.hpp"
#include "prediag/error.hpp"

namespace prediag::chat {

inline constexpr std::string_view kDefaultFallbackReply = "-I am sorry, but I do not understand";

enum class GoalStatus { InProgress, Completed, Failed };
enum class RiskLevel { Unknown, Low, Medium, High };
enum class Speaker { User, Bot };
enum class SlotKind { Number, YesNo };

inline std::string_view to_string(GoalStatus g) {
    switch (g) {
        case GoalStatus::InProgress: return "InProgress";
        case GoalStatus::Completed: return "Completed";
        case GoalStatus::Failed: return "Failed";
    }
    return "InProgress";
}

inline GoalStatus parse_goal_status(std::string_view s) {
    if (s == "InProgress") return GoalStatus::InProgress;
    if (s == "Completed") return GoalStatus::Completed;
    if (s == "Failed") return GoalStatus::Failed;
    throw InvalidArgument("unknown goal status: " + std::string(s));
}

inline std::string_view to_string(RiskLevel r) {
    switch (r) {
        case RiskLevel::Unknown: return "unknown";
        case RiskLevel::Low: return "low";
        case RiskLevel::Medium: return "medium";
        case RiskLevel::High: return "high";
    }
    return "unknown";
}

inline std::string_view to_string(Speaker s) { return s == Speaker::User ? "user" : "bot"; }

/// A number (age) or a yes/no answer.
using SlotValue = std::variant<double, bool>;

struct SlotRule {
    std::string name;
    SlotKind kind = SlotKind::YesNo;
    bool required = true;
    bool risk_indicator = false;  // yes/no slots counted by assess_risk
    std::string question;
    std::vector<std::regex> question_patterns;  // bot text that asks this slot
    std::vector<std::regex> value_patterns;     // number slots: group 1 is the value
    std::vector<std::regex> answer_patterns;    // number slots: bare answers to the question
    std::vector<std::regex> yes_patterns;
    std::vector<std::regex> no_patterns;
    double min_value = 0.0;
    double max_value = 150.0;
};

/// Slot schema, extraction patterns, risk thresholds and prompt texts of the consultation.
struct RuleSet {
    std::string fallback_reply{kDefaultFallbackReply};
    std::string acknowledgement = "Thank you.";
    std::string upload_instruction;
    std::map<RiskLevel, std::string> risk_messages;
    std::vector<std::regex> start_patterns;
    std::vector<std::regex> affirmations;
    std::vector<std::regex> negations;
    std::vector<SlotRule> slots;
    std::string age_slot = "age";
    double age_threshold = 50.0;

    const SlotRule* slot(std::string_view name) const {
        for (const auto& s : slots) {
            if (s.name == name) return &s;
        }
        return nullptr;
    }
};

namespace detail {

inline std::vector<std::regex> compile_patterns(const nlohmann::json& j, std::string_view key) {
    std::vector<std::regex> out;
    if (!j.contains(key)) return out;
    for (const auto& p : j.at(std::string(key))) {
        const auto src = p.get<std::string>();
        try {
            out.emplace_back(src, std::regex::ECMAScript | std::regex::icase | std::regex::optimize);
        } catch (const std::regex_error& e) {
            throw InvalidArgument("bad pattern in rules '" + src + "': " + e.what());
        }
    }
    return out;
}

inline bool any_match(const std::vector<std::regex>& patterns, const std::string& text) {
    for (const auto& re : patterns) {
        if (std::regex_search(text, re)) return true;
    }
    return false;
}

inline std::string lowercase(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    return out;
}

}  // namespace detail

inline RuleSet parse_rules(const nlohmann::json& j) {
    RuleSet rules;
    if (j.contains("schema_version") && j["schema_version"].get<int>() != 1) {
        throw SchemaVersionError("unsupported rules schema_version " + j["schema_version"].dump());
    }
    rules.fallback_reply = j.value("fallback_reply", std::string(kDefaultFallbackReply));
    rules.acknowledgement = j.value("acknowledgement", rules.acknowledgement);
    rules.upload_instruction = j.at("upload_instruction").get<std::string>();
    rules.age_slot = j.value("age_slot", rules.age_slot);
    rules.age_threshold = j.value("age_threshold", rules.age_threshold);
    if (j.contains("risk_messages")) {
        const auto& m = j["risk_messages"];
        rules.risk_messages[RiskLevel::Low] = m.value("low", "");
        rules.risk_messages[RiskLevel::Medium] = m.value("medium", "");
        rules.risk_messages[RiskLevel::High] = m.value("high", "");
    }
    rules.start_patterns = detail::compile_patterns(j, "start_patterns");
    rules.affirmations = detail::compile_patterns(j, "affirmations");
    rules.negations = detail::compile_patterns(j, "negations");

    for (const auto& js : j.at("slots")) {
        SlotRule s;
        s.name = js.at("name").get<std::string>();
        const auto kind = js.at("kind").get<std::string>();
        if (kind == "number") s.kind = SlotKind::Number;
        else if (kind == "yes_no") s.kind = SlotKind::YesNo;
        else throw InvalidArgument("slot " + s.name + ": unknown kind " + kind);
        s.required = js.value("required", true);
        s.risk_indicator = js.value("risk_indicator", s.kind == SlotKind::YesNo);
        s.question = js.at("question").get<std::string>();
        s.question_patterns = detail::compile_patterns(js, "question_patterns");
        s.value_patterns = detail::compile_patterns(js, "value_patterns");
        s.answer_patterns = detail::compile_patterns(js, "answer_patterns");
        s.yes_patterns = detail::compile_patterns(js, "yes_patterns");
        s.no_patterns = detail::compile_patterns(js, "no_patterns");
        s.min_value = js.value("min", s.min_value);
        s.max_value = js.value("max", s.max_value);
        if (rules.slot(s.name)) throw InvalidArgument("duplicate slot " + s.name);
        rules.slots.push_back(std::move(s));
    }
    if (rules.slots.empty()) throw InvalidArgument("rules define no slots");
    return rules;
}

inline RuleSet load_rules(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open rules file");
    }
    try {
        return parse_rules(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path, std::string("bad rules file: ") + e.what());
    }
}

struct RiskProfile {
    std::map<std::string, std::optional<SlotValue>> slots;
    RiskLevel risk_level = RiskLevel::Unknown;

    static RiskProfile empty_for(const RuleSet& rules) {
        RiskProfile p;
        for (const auto& s : rules.slots) p.slots.emplace(s.name, std::nullopt);
        return p;
    }

    bool filled(std::string_view name) const {
        auto it = slots.find(std::string(name));
        return it != slots.end() && it->second.has_value();
    }

    bool complete(const RuleSet& rules) const {
        for (const auto& s : rules.slots) {
            if (s.required && !filled(s.name)) return false;
        }
        return true;
    }

    bool operator==(const RiskProfile&) const = default;
};

namespace detail {

inline std::optional<double> parse_number(const std::smatch& m, const SlotRule& rule) {
    if (m.size() < 2 || !m[1].matched) return std::nullopt;
    double v = 0;
    try {
        v = std::stod(m[1].str());
    } catch (const std::exception&) {
        return std::nullopt;
    }
    if (v < rule.min_value || v > rule.max_value) return std::nullopt;
    return v;
}

inline std::optional<double> extract_number(const std::vector<std::regex>& patterns, const std::string& text,
                                            const SlotRule& rule) {
    for (const auto& re : patterns) {
        std::smatch m;
        if (std::regex_search(text, m, re)) {
            if (auto v = parse_number(m, rule)) return v;
        }
    }
    return std::nullopt;
}

}  // namespace detail

/// Fills empty slots from one user utterance. Filled slots are never overwritten.
///
/// When `pending_slot` names the slot the bot just asked about, bare answers ("yes", "no", "45")
/// go to that slot. Explicit statements ("I found a lump") fill any empty slot.
inline RiskProfile update_risk_profile(RiskProfile profile, std::string_view user_text, const RuleSet& rules,
                                       std::optional<std::string_view> pending_slot = std::nullopt) {
    const auto text = detail::lowercase(user_text);
    auto set_if_empty = [&](const std::string& name, SlotValue v) {
        auto& cell = profile.slots[name];
        if (!cell) cell = v;
    };

    if (pending_slot && !profile.filled(*pending_slot)) {
        if (const auto* rule = rules.slot(*pending_slot)) {
            if (rule->kind == SlotKind::YesNo) {
                if (detail::any_match(rules.negations, text)) set_if_empty(rule->name, false);
                else if (detail::any_match(rules.affirmations, text)) set_if_empty(rule->name, true);
            } else if (auto v = detail::extract_number(rule->answer_patterns, text, *rule)) {
                set_if_empty(rule->name, *v);
            }
        }
    }

    for (const auto& rule : rules.slots) {
        if (profile.filled(rule.name)) continue;
        if (rule.kind == SlotKind::Number) {
            if (auto v = detail::extract_number(rule.value_patterns, text, rule)) set_if_empty(rule.name, *v);
        } else if (detail::any_match(rule.no_patterns, text)) {
            set_if_empty(rule.name, false);
        } else if (detail::any_match(rule.yes_patterns, text)) {
            set_if_empty(rule.name, true);
        }
    }
    return profile;
}

/// Counts positive indicators, plus one for age at or above the threshold.
/// 0-1 is low, 2-3 medium, 4 or more high.
inline RiskLevel assess_risk(const RiskProfile& profile, const RuleSet& rules) {
    int score = 0;
    for (const auto& rule : rules.slots) {
        auto it = profile.slots.find(rule.name);
        if (it == profile.slots.end() || !it->second) {
            if (rule.required) throw InvalidArgument("assess_risk: required slot '" + rule.name + "' is empty");
            continue;
        }
        const auto& v = *it->second;
        if (rule.name == rules.age_slot && std::holds_alternative<double>(v)) {
            if (std::get<double>(v) >= rules.age_threshold) ++score;
        } else if (rule.risk_indicator && std::holds_alternative<bool>(v) && std::get<bool>(v)) {
            ++score;
        }
    }
    if (score <= 1) return RiskLevel::Low;
    if (score <= 3) return RiskLevel::Medium;
    return RiskLevel::High;
}

struct Turn {
    Speaker speaker;
    std::string text;
};

/// Per-patient consultation state. Turns within a session must be handled serially.
class Session {
public:
    using Clock = std::chrono::steady_clock;

    Session(std::string id, const RuleSet& rules, std::uint64_t seed = 0)
        : id_(std::move(id)), profile_(RiskProfile::empty_for(rules)), rng_(seed), last_active_(Clock::now()) {}

    const std::string& id() const noexcept { return id_; }
    const std::vector<Turn>& history() const noexcept { return history_; }
    const RiskProfile& risk_profile() const noexcept { return profile_; }
    GoalStatus goal_status() const noexcept { return goal_; }
    bool upload_prompted() const noexcept { return upload_prompted_; }
    bool inquiry_active() const noexcept { return inquiry_active_; }
    const std::optional<std::string>& pending_slot() const noexcept { return pending_slot_; }
    Clock::time_point last_active() const noexcept { return last_active_; }

    /// Ends the consultation; an unfinished one is labelled Failed.
    void end() {
        if (goal_ == GoalStatus::InProgress) goal_ = GoalStatus::Failed;
    }

private:
    friend struct TurnProcessor;

    std::string id_;
    std::vector<Turn> history_;
    RiskProfile profile_;
    GoalStatus goal_ = GoalStatus::InProgress;
    bool inquiry_active_ = false;
    bool upload_prompted_ = false;
    std::optional<std::string> pending_slot_;
    std::mt19937_64 rng_;
    Clock::time_point last_active_;
};

struct DialogueConfig {
    SimilarityScore threshold{kDefaultSimilarityThreshold};
    std::size_t candidate_limit = 100;
    SelectionPolicy policy = SelectionPolicy::First;
};

struct TurnResult {
    std::string reply;
    std::optional<SimilarityScore> matched_similarity;
};

struct TurnProcessor {
    static TurnResult run(Session& s, std::string_view user_text, const KnowledgeGraph& graph,
                          const RuleSet& rules, const DialogueConfig& config) {
        const std::string user(user_text);
        s.history_.push_back({Speaker::User, user});
        s.last_active_ = Session::Clock::now();

        TurnResult result;
        std::string reply;
        const auto processed = graph.pipeline()(user);
        const auto candidates = graph.search_candidates(processed, config.candidate_limit);
        if (auto match = find_best_match(user, candidates, config.threshold)) {
            const auto responses = graph.responses_to(match->statement->text);
            if (!responses.empty()) {
                reply = select_response(*match, responses, config.policy, &s.rng_).text;
                result.matched_similarity = match->score;
            }
        }

        if (s.goal_ == GoalStatus::InProgress) {
            const auto before = s.profile_;
            s.profile_ = update_risk_profile(s.profile_, user, rules,
                                             s.pending_slot_ ? std::optional<std::string_view>(*s.pending_slot_)
                                                             : std::nullopt);
            const bool filled_something = !(before == s.profile_);
            const auto lowered = detail::lowercase(user);
            if (filled_something || detail::any_match(rules.start_patterns, lowered)) s.inquiry_active_ = true;

            if (reply.empty() && filled_something) reply = rules.acknowledgement;

            if (s.profile_.complete(rules)) {
                s.profile_.risk_level = assess_risk(s.profile_, rules);
                append(reply, rules.risk_messages.count(s.profile_.risk_level)
                                  ? rules.risk_messages.at(s.profile_.risk_level)
                                  : std::string());
                append(reply, rules.upload_instruction);
                s.upload_prompted_ = true;
                s.pending_slot_.reset();
                s.goal_ = GoalStatus::Completed;
            } else if (s.inquiry_active_) {
                if (reply.empty()) reply = rules.fallback_reply;
                const SlotRule* next = next_open_slot(s.profile_, rules);
                // A corpus reply that already asks an open slot's question stands on its own.
                const SlotRule* asked = asked_slot(reply, s.profile_, rules);
                if (asked) {
                    s.pending_slot_ = asked->name;
                } else if (next) {
                    append(reply, next->question);
                    s.pending_slot_ = next->name;
                }
            }
        }

        if (reply.empty()) reply = rules.fallback_reply;
        s.history_.push_back({Speaker::Bot, reply});
        result.reply = std::move(reply);
        return result;
    }

private:
    static void append(std::string& reply, const std::string& extra) {
        if (extra.empty()) return;
        if (!reply.empty()) reply += ' ';
        reply += extra;
    }

    static const SlotRule* next_open_slot(const RiskProfile& p, const RuleSet& rules) {
        for (const auto& r : rules.slots) {
            if (r.required && !p.filled(r.name)) return &r;
        }
        return nullptr;
    }

    static const SlotRule* asked_slot(const std::string& reply, const RiskProfile& p, const RuleSet& rules) {
        const auto lowered = detail::lowercase(reply);
        for (const auto& r : rules.slots) {
            if (!p.filled(r.name) && detail::any_match(r.question_patterns, lowered)) return &r;
        }
        return nullptr;
    }
};

/// Routes one user utterance: retrieval match (or the fallback reply), slot extraction, then the
/// next inquiry question or, once every required slot is filled, the risk summary with the image
/// upload instruction. Always returns a non-empty reply.
inline TurnResult handle_turn(Session& session, std::string_view user_text, const KnowledgeGraph& graph,
                              const RuleSet& rules, const DialogueConfig& config = {}) {
    return TurnProcessor::run(session, user_text, graph, rules, config);
}

struct DialogueOutcome {
    std::string session_id;
    bool completed = false;
};

inline DialogueOutcome outcome_of(const Session& s) {
    return {s.id(), s.goal_status() == GoalStatus::Completed && s.upload_prompted()};
}

struct GcrReport {
    std::size_t completed = 0;
    std::size_t total = 0;
    double percentage = 0.0;  // rounded to two decimals
};

inline std::string format_percentage(double pct) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << pct << '%';
    return os.str();
}

/// Goal completion rate: 100 * completed / total, rounded to two decimals.
inline GcrReport compute_gcr(std::span<const DialogueOutcome> outcomes) {
    if (outcomes.empty()) throw InvalidArgument("compute_gcr: no dialogues");
    GcrReport r;
    r.total = outcomes.size();
    for (const auto& o : outcomes) r.completed += o.completed ? 1 : 0;
    r.percentage = std::round(10000.0 * static_cast<double>(r.completed) / static_cast<double>(r.total)) / 100.0;
    return r;
}

/// A replayable consultation: user turns plus the label the dialogue is expected to end with.
struct DialogueScript {
    std::string name;
    std::vector<std::string> turns;
    GoalStatus expected = GoalStatus::Completed;
};

/// Script format: `expect: Completed|Failed` once, then one user turn per line.
/// Blank lines and lines starting with `#` are ignored.
inline DialogueScript load_dialogue_script(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open dialogue script");
    }
    DialogueScript script;
    script.name = path.filename().string();
    bool has_label = false;
    std::string line;
    while (std::getline(in, line)) {
        if (!utf8::is_valid(line)) throw EncodingError(path.string() + ": malformed UTF-8");
        auto t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        if (t.rfind("expect:", 0) == 0) {
            script.expected = parse_goal_status(trim(std::string_view(t).substr(7)));
            has_label = true;
            continue;
        }
        if (t.rfind("user:", 0) == 0) t = trim(std::string_view(t).substr(5));
        script.turns.push_back(std::move(t));
    }
    if (!has_label) throw IoError(path, "missing 'expect:' label");
    if (script.expected == GoalStatus::InProgress) throw IoError(path, "expected label must be Completed or Failed");
    if (script.turns.empty()) throw IoError(path, "script has no user turns");
    return script;
}

}  // namespace prediag::chat
