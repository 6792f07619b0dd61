#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prediag/chat/matcher.hpp"
#include "prediag/error.hpp"
#include "prediag/text/pipeline.hpp"
#include "prediag/utf8.hpp"

namespace prediag::chat {

using BigramIndex = std::map<std::string, std::set<StatementId>, std::less<>>;
using ResponseEdges = std::map<std::string, std::set<StatementId>, std::less<>>;

inline constexpr int kStoreSchemaVersion = 1;
inline constexpr std::string_view kStoreFormat = "prediag-knowledge-store";

inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

/// Statements and their response edges, merged across every trained conversation.
///
/// A statement is keyed by (text, in_response_to). Edges are keyed by the prompting text, so a
/// statement text that occurs in several conversations collects the responses of all of them.
/// Readers may share a graph concurrently; mutation requires exclusive access.
class KnowledgeGraph {
public:
    KnowledgeGraph() = default;
    explicit KnowledgeGraph(text::TextPipeline pipeline) : pipeline_(std::move(pipeline)) {}

    StatementId insert_statement(std::string_view raw_text,
                                 std::optional<std::string_view> in_response_to = std::nullopt,
                                 std::optional<std::string_view> tag = std::nullopt) {
        std::string text = trim(raw_text);
        auto processed = pipeline_(text);
        if (processed.normalized_tokens.empty()) {
            throw InvalidArgument("statement is empty after normalization: \"" + std::string(raw_text) + "\"");
        }
        std::optional<std::string> prompt;
        if (in_response_to) prompt = trim(*in_response_to);

        Key key{text, prompt};
        if (auto it = keys_.find(key); it != keys_.end()) {
            ++statements_.at(it->second).occurrence_count;
            return it->second;
        }

        Statement s;
        s.id = next_id_++;
        s.text = std::move(text);
        s.processed = std::move(processed);
        s.in_response_to = std::move(prompt);
        if (tag) s.tag = std::string(*tag);
        s.occurrence_count = 1;
        const auto id = s.id;
        attach(std::move(s));
        return id;
    }

    /// Up to `limit` statements ranked by shared bigram tokens with `query` (ties to lower id),
    /// topped up with the lowest-id statements that share none.
    std::vector<const Statement*> search_candidates(const text::ProcessedText& query, std::size_t limit) const {
        if (limit == 0) throw InvalidArgument("search_candidates: limit must be positive");

        std::map<StatementId, std::size_t> shared;
        for (const auto& tok : unique_tokens(query)) {
            if (auto it = bigram_index_.find(tok); it != bigram_index_.end()) {
                for (auto id : it->second) ++shared[id];
            }
        }

        std::vector<const Statement*> out;
        std::vector<std::pair<StatementId, std::size_t>> ranked(shared.begin(), shared.end());
        std::ranges::stable_sort(ranked, [](const auto& a, const auto& b) { return a.second > b.second; });
        for (const auto& [id, count] : ranked) {
            if (out.size() == limit) break;
            out.push_back(&statements_.at(id));
        }
        // Remaining room goes to statements without shared bigrams, so a typo that breaks every
        // bigram can still reach its statement through the similarity check.
        for (const auto& [id, s] : statements_) {
            if (out.size() == limit) break;
            if (!shared.count(id)) out.push_back(&s);
        }
        return out;
    }

    /// Statements recorded in response to `prompt`, in id order.
    std::vector<const Statement*> responses_to(std::string_view prompt) const {
        std::vector<const Statement*> out;
        if (auto it = response_edges_.find(prompt); it != response_edges_.end()) {
            for (auto id : it->second) out.push_back(&statements_.at(id));
        }
        return out;
    }

    const Statement* find(StatementId id) const {
        auto it = statements_.find(id);
        return it == statements_.end() ? nullptr : &it->second;
    }

    std::size_t size() const noexcept { return statements_.size(); }
    bool empty() const noexcept { return statements_.empty(); }

    const std::map<StatementId, Statement>& statements() const noexcept { return statements_; }
    const ResponseEdges& response_edges() const noexcept { return response_edges_; }
    const BigramIndex& bigram_index() const noexcept { return bigram_index_; }
    const text::TextPipeline& pipeline() const noexcept { return pipeline_; }

    /// The index as it would be built from the current statements alone.
    BigramIndex rebuild_bigram_index() const {
        BigramIndex index;
        for (const auto& [id, s] : statements_) {
            for (const auto& tok : s.processed.bigram_tokens()) index[tok].insert(id);
        }
        return index;
    }

    /// Re-inserts a persisted statement with its id and counts intact.
    void restore(Statement s) {
        if (statements_.contains(s.id)) throw InvalidArgument("duplicate statement id " + std::to_string(s.id));
        if (s.occurrence_count == 0) throw InvalidArgument("occurrence_count must be positive");
        s.processed = pipeline_(s.text);
        if (s.processed.normalized_tokens.empty()) throw InvalidArgument("restored statement is empty");
        if (keys_.contains(Key{s.text, s.in_response_to})) {
            throw InvalidArgument("duplicate statement key for id " + std::to_string(s.id));
        }
        next_id_ = std::max(next_id_, s.id + 1);
        attach(std::move(s));
    }

    bool operator==(const KnowledgeGraph& other) const {
        return pipeline_ == other.pipeline_ && statements_ == other.statements_ &&
               response_edges_ == other.response_edges_ && bigram_index_ == other.bigram_index_;
    }

private:
    using Key = std::pair<std::string, std::optional<std::string>>;

    static std::set<std::string> unique_tokens(const text::ProcessedText& p) {
        auto toks = p.bigram_tokens();
        return {toks.begin(), toks.end()};
    }

    void attach(Statement s) {
        const auto id = s.id;
        keys_.emplace(Key{s.text, s.in_response_to}, id);
        if (s.in_response_to) response_edges_[*s.in_response_to].insert(id);
        for (const auto& tok : s.processed.bigram_tokens()) bigram_index_[tok].insert(id);
        statements_.emplace(id, std::move(s));
    }

    text::TextPipeline pipeline_;
    std::map<StatementId, Statement> statements_;
    std::map<Key, StatementId> keys_;
    ResponseEdges response_edges_;
    BigramIndex bigram_index_;
    StatementId next_id_ = 1;
};

/// Trains one conversation: line i is recorded in response to line i-1. Returns the insert count.
/// The graph is left untouched if any line is rejected.
inline std::size_t train_from_list(KnowledgeGraph& graph, std::span<const std::string> lines,
                                   std::optional<std::string_view> tag = std::nullopt) {
    if (lines.empty()) throw InvalidArgument("train_from_list: empty conversation");
    KnowledgeGraph staged = graph;
    const std::string* previous = nullptr;
    for (const auto& line : lines) {
        staged.insert_statement(line, previous ? std::optional<std::string_view>(*previous) : std::nullopt, tag);
        previous = &line;
    }
    graph = std::move(staged);
    return lines.size();
}

/// Splits a corpus file into conversations: one statement per line, blank lines separate
/// conversations.
inline std::vector<std::vector<std::string>> read_corpus_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open corpus file");
    }
    std::vector<std::vector<std::string>> conversations(1);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!utf8::is_valid(line)) {
            throw EncodingError(path.string() + ":" + std::to_string(line_no) + ": malformed UTF-8");
        }
        auto text = trim(line);
        if (text.empty()) {
            if (!conversations.back().empty()) conversations.emplace_back();
        } else {
            conversations.back().push_back(std::move(text));
        }
    }
    if (in.bad()) throw IoError(path, "read failure");
    if (conversations.back().empty()) conversations.pop_back();
    return conversations;
}

/// Trains every conversation of every file, tagged with the file name. All files are read
/// before anything is inserted; on any error the graph is unchanged.
inline std::size_t train_from_files(KnowledgeGraph& graph, std::span<const std::filesystem::path> paths) {
    std::vector<std::pair<std::string, std::vector<std::vector<std::string>>>> corpora;
    for (const auto& p : paths) corpora.emplace_back(p.filename().string(), read_corpus_file(p));

    KnowledgeGraph staged = graph;
    std::size_t inserted = 0;
    for (const auto& [tag, conversations] : corpora) {
        for (const auto& conv : conversations) inserted += train_from_list(staged, conv, tag);
    }
    graph = std::move(staged);
    return inserted;
}

/// Corpus files (*.txt) of a directory, sorted by name.
inline std::vector<std::filesystem::path> corpus_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw PathNotFound(dir);
    std::vector<std::filesystem::path> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txt") out.push_back(entry.path());
    }
    std::ranges::sort(out);
    return out;
}

// Store snapshot: JSON Lines. The first record is a header carrying the schema version and the
// stopword list; every following record is one statement. The bigram index and the response
// edges are derived data and are rebuilt on load.

inline void save_store(const KnowledgeGraph& graph, const std::filesystem::path& path) {
    using nlohmann::json;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path, "cannot open store file for writing");

    json header = {{"format", kStoreFormat},
                   {"schema_version", kStoreSchemaVersion},
                   {"statement_count", graph.size()},
                   {"stopwords", json::array()}};
    for (const auto& w : graph.pipeline().stopwords()) header["stopwords"].push_back(w);
    out << header.dump() << '\n';

    for (const auto& [id, s] : graph.statements()) {
        json rec = {{"id", s.id},
                    {"text", s.text},
                    {"in_response_to", s.in_response_to ? json(*s.in_response_to) : json(nullptr)},
                    {"tag", s.tag ? json(*s.tag) : json(nullptr)},
                    {"occurrence_count", s.occurrence_count}};
        out << rec.dump() << '\n';
    }
    out.flush();
    if (!out) throw IoError(path, "write failure");
}

inline KnowledgeGraph load_store(const std::filesystem::path& path) {
    using nlohmann::json;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        if (!std::filesystem::exists(path)) throw PathNotFound(path);
        throw IoError(path, "cannot open store file");
    }

    std::string line;
    if (!std::getline(in, line)) throw IoError(path, "empty store file");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw IoError(path, std::string("bad header: ") + e.what());
    }
    if (!header.is_object() || header.value("format", "") != kStoreFormat) {
        throw IoError(path, "not a knowledge store snapshot");
    }
    if (!header.contains("schema_version") || !header["schema_version"].is_number_integer() ||
        header["schema_version"].get<int>() != kStoreSchemaVersion) {
        throw SchemaVersionError(path.string() + ": unsupported store schema_version " +
                                 (header.contains("schema_version") ? header["schema_version"].dump() : "<missing>"));
    }

    text::StopwordList stopwords;
    for (const auto& w : header.at("stopwords")) stopwords.insert(w.get<std::string>());
    KnowledgeGraph graph{text::TextPipeline(std::move(stopwords))};

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            const auto rec = json::parse(line);
            Statement s;
            s.id = rec.at("id").get<StatementId>();
            s.text = rec.at("text").get<std::string>();
            if (!rec.at("in_response_to").is_null()) s.in_response_to = rec["in_response_to"].get<std::string>();
            if (!rec.at("tag").is_null()) s.tag = rec["tag"].get<std::string>();
            s.occurrence_count = rec.at("occurrence_count").get<std::uint64_t>();
            graph.restore(std::move(s));
        } catch (const json::exception& e) {
            throw IoError(path, "record " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (header.contains("statement_count") && header["statement_count"].get<std::size_t>() != graph.size()) {
        throw IoError(path, "statement count does not match header");
    }
    return graph;
}

}  // namespace prediag::chat
