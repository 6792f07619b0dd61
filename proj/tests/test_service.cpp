#include <catch_amalgamated.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <limits>
#include <thread>

#include "service_fixture.hpp"

using namespace prediag;
using namespace prediag::service;
using fixture::kData;
namespace fs = std::filesystem;

namespace {

ChatService make_service(ServiceConfig config = {}) {
    return ChatService(fixture::shipped_graph(), fixture::shipped_rules(), config);
}

ChatResponse say(ChatService& svc, const std::optional<std::string>& id, const std::string& text) {
    return svc.handle_chat({id, text});
}

std::vector<std::string> script_turns() {
    return chat::load_dialogue_script(kData / "dialogues" / "dialogue_01.txt").turns;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("prediag_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

// --- chat ---------------------------------------------------------------------

TEST_CASE("first turn opens a session and greetings match") {
    auto svc = make_service();
    const auto r = say(svc, std::nullopt, "Hello");
    CHECK_FALSE(r.session_id.empty());
    CHECK(r.reply.rfind("Hi there! I am M-Chatbot, your breast health assistant.", 0) == 0);
    REQUIRE(r.matched_similarity.has_value());
    CHECK(*r.matched_similarity >= 0.90);
    CHECK(r.goal_status == chat::GoalStatus::InProgress);
    CHECK(chat_response_violations(r.to_json()).empty());
    CHECK(svc.session_count() == 1);

    const auto again = say(svc, r.session_id, "hi");
    CHECK(again.session_id == r.session_id);
    CHECK(svc.session_count() == 1);
}

TEST_CASE("unmatched input falls back without a similarity") {
    auto svc = make_service();
    const auto r = say(svc, std::nullopt, "qzxv wplk trrb");
    CHECK(r.reply == "-I am sorry, but I do not understand");
    CHECK_FALSE(r.matched_similarity.has_value());
    const auto j = r.to_json();
    CHECK(j["matched_similarity"].is_null());
    CHECK(chat_response_violations(j).empty());
}

TEST_CASE("chat request validation") {
    auto svc = make_service();
    CHECK_THROWS_AS(say(svc, std::nullopt, ""), BadRequest);
    CHECK_THROWS_AS(say(svc, std::nullopt, "   "), BadRequest);
    CHECK_THROWS_AS(say(svc, std::nullopt, "bad \xff byte"), BadRequest);
    CHECK_THROWS_AS(say(svc, std::string("does-not-exist"), "hello"), ResourceNotFound);
    CHECK(svc.session_count() == 0);

    CHECK_THROWS_AS(ChatRequest::from_json(json::array()), BadRequest);
    CHECK_THROWS_AS(ChatRequest::from_json({{"session_id", 5}, {"text", "x"}}), BadRequest);
    CHECK_THROWS_AS(ChatRequest::from_json({{"session_id", nullptr}}), BadRequest);
    CHECK_FALSE(ChatRequest::from_json({{"session_id", nullptr}, {"text", "x"}}).session_id);
}

TEST_CASE("response schema checks catch malformed documents") {
    json good{{"session_id", "a"}, {"reply", "b"}, {"matched_similarity", 0.95}, {"goal_status", "Completed"},
              {"risk_level", "high"}};
    CHECK(chat_response_violations(good).empty());
    auto bad = good;
    bad["matched_similarity"] = 1.5;
    CHECK(chat_response_violations(bad).size() == 1);
    bad = good;
    bad["goal_status"] = "done";
    CHECK(chat_response_violations(bad).size() == 1);
    bad.erase("reply");
    CHECK(chat_response_violations(bad).size() == 2);
}

TEST_CASE("a full consultation completes and is visible in the session view") {
    auto svc = make_service();
    std::optional<std::string> id;
    ChatResponse last;
    for (const auto& t : script_turns()) {
        last = say(svc, id, t);
        id = last.session_id;
        CHECK(chat_response_violations(last.to_json()).empty());
    }
    CHECK(last.goal_status == chat::GoalStatus::Completed);
    const auto view = svc.session_json(*id);
    CHECK(view["goal_status"] == "Completed");
    CHECK(view["upload_prompted"] == true);
    CHECK(view["history"].size() == 2 * script_turns().size());
    CHECK(view["history"][0]["speaker"] == "user");
    CHECK(view["history"][1]["speaker"] == "bot");
    CHECK(view["risk_profile"]["age"] == 45.0);
    CHECK(view["risk_level"] == "low");
}

TEST_CASE("ending an unfinished session marks it failed") {
    auto svc = make_service();
    const auto r = say(svc, std::nullopt, "hello");
    CHECK(svc.end_session(r.session_id)["goal_status"] == "Failed");
    CHECK_THROWS_AS(svc.end_session("nope"), ResourceNotFound);
    CHECK_THROWS_AS(svc.session_json("nope"), ResourceNotFound);
}

TEST_CASE("idle sessions expire") {
    auto svc = make_service();
    const auto r = say(svc, std::nullopt, "hello");
    CHECK(svc.expire_idle(ChatService::Clock::now()) == 0);
    CHECK(svc.expire_idle(ChatService::Clock::now() + std::chrono::minutes(31)) == 1);
    CHECK(svc.session_count() == 0);
    CHECK_THROWS_AS(say(svc, r.session_id, "hello"), ResourceNotFound);
}

TEST_CASE("concurrent sessions do not interleave") {
    auto svc = make_service();
    const auto turns = script_turns();

    // Reference transcript from a single sequential run.
    auto reference = make_service();
    std::vector<std::string> expected;
    std::optional<std::string> rid;
    for (const auto& t : turns) {
        auto r = say(reference, rid, t);
        rid = r.session_id;
        expected.push_back(r.reply);
    }

    constexpr int kThreads = 8;
    std::vector<std::vector<std::string>> replies(kThreads);
    std::vector<std::string> ids(kThreads);
    std::atomic<int> failures{0};
    std::vector<std::thread> pool;
    for (int k = 0; k < kThreads; ++k) {
        pool.emplace_back([&, k] {
            try {
                std::optional<std::string> id;
                for (const auto& t : turns) {
                    auto r = say(svc, id, t);
                    id = r.session_id;
                    replies[k].push_back(r.reply);
                }
                ids[k] = *id;
            } catch (...) {
                ++failures;
            }
        });
    }
    for (auto& t : pool) t.join();
    REQUIRE(failures == 0);
    CHECK(svc.session_count() == kThreads);
    for (int k = 0; k < kThreads; ++k) {
        CHECK(replies[k] == expected);
        const auto view = svc.session_json(ids[k]);
        CHECK(view["history"].size() == 2 * turns.size());
        CHECK(view["goal_status"] == "Completed");
        for (std::size_t i = 0; i < turns.size(); ++i) CHECK(view["history"][2 * i]["text"] == turns[i]);
    }
}

// --- classify -----------------------------------------------------------------

TEST_CASE("classification returns a normalized distribution") {
    auto svc = make_service();
    svc.register_model(fixture::small_model());
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (std::size_t k = 0; k < 2; ++k) {
            const auto r = svc.handle_classify(fixture::sample_payload(k, seed), "sa-test");
            const auto j = r.to_json();
            CHECK(classify_response_violations(j, 1e-9).empty());
            double sum = 0.0;
            for (const auto& [name, p] : r.confidence) sum += p;
            CHECK(std::abs(sum - 1.0) <= 1e-9);
            CHECK(j["subtype"].is_null());
            CHECK(j["model_id"] == "sa-test");
        }
    }
    const auto benign = svc.handle_classify(fixture::sample_payload(0, 99), "sa-test");
    CHECK(benign.label == "benign");
    CHECK(benign.confidence[0].first == "benign");
    CHECK(benign.confidence[0].second > 0.5);
    CHECK(svc.handle_classify(fixture::sample_payload(1, 99), "sa-test").label == "malignant");
}

TEST_CASE("classification request errors") {
    auto svc = make_service();
    svc.register_model(fixture::small_model());
    const auto good = fixture::sample_payload(0, 1);
    CHECK_THROWS_AS(svc.handle_classify(good, "unknown"), ResourceNotFound);
    CHECK_THROWS_AS(svc.handle_classify("garbage", "sa-test"), BadRequest);
    CHECK_THROWS_AS(svc.handle_classify(fixture::sample_payload(0, 1, {1, 1, 4}), "sa-test"), BadRequest);

    classifier::FeatureContainer two;
    two.shape = fixture::kFeatureShape;
    two.samples.emplace("a", nn::Tensor(fixture::kFeatureShape));
    two.samples.emplace("b", nn::Tensor(fixture::kFeatureShape));
    CHECK_THROWS_AS(svc.handle_classify(classifier::serialize_feature_container(two), "sa-test"), BadRequest);

    classifier::FeatureContainer nan;
    nan.shape = fixture::kFeatureShape;
    nan.samples.emplace("a", nn::Tensor(fixture::kFeatureShape, std::numeric_limits<double>::quiet_NaN()));
    CHECK_THROWS_AS(svc.handle_classify(classifier::serialize_feature_container(nan), "sa-test"), BadRequest);
}

TEST_CASE("subtype models report the implied label") {
    const nn::Shape shape{1, 1, 8};
    auto head = classifier::build_head(classifier::head_config("EfficientNetV2-SA", shape, 8), 2);
    const auto train = classifier::generate_synthetic_features(8, 12, shape, 10.0, 3);
    classifier::train_head(head, train, {}, classifier::TrainHyper{}, 2);
    auto svc = make_service();
    svc.register_model(std::make_shared<const classifier::TrainedModel>(
        classifier::TrainedModel{std::move(head), {"sub", classifier::TargetKind::Subtype, 40, 2, 0.7}}));
    const auto r = svc.handle_classify(fixture::sample_payload(5, 4), "sub");
    REQUIRE(r.subtype.has_value());
    CHECK(*r.subtype == "LC");
    CHECK(r.label == "malignant");
    CHECK(r.confidence.size() == 8);
    CHECK(classify_response_violations(r.to_json()).empty());
}

TEST_CASE("restart from saved state gives identical answers") {
    const auto dir = temp_dir("restart");
    auto graph = fixture::shipped_graph();
    chat::save_store(*graph, dir / "store.jsonl");
    const auto model = fixture::small_model();
    fs::create_directories(dir / "models");
    auto copy = *model;
    classifier::save_model(copy, dir / "models" / "sa-test.json");

    ChatService before(graph, fixture::shipped_rules());
    before.register_model(model);
    ChatService after(std::make_shared<const chat::KnowledgeGraph>(chat::load_store(dir / "store.jsonl")),
                      fixture::shipped_rules());
    CHECK(after.load_models(dir / "models") == 1);

    std::optional<std::string> a, b;
    for (const auto& t : script_turns()) {
        const auto ra = say(before, a, t);
        const auto rb = say(after, b, t);
        a = ra.session_id;
        b = rb.session_id;
        CHECK(ra.reply == rb.reply);
        CHECK(ra.matched_similarity == rb.matched_similarity);
        CHECK(ra.goal_status == rb.goal_status);
    }
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = fixture::sample_payload(seed % 2, seed);
        CHECK(before.handle_classify(p, "sa-test").to_json() == after.handle_classify(p, "sa-test").to_json());
    }
    fs::remove_all(dir);
}

// --- HTTP ---------------------------------------------------------------------

TEST_CASE("HTTP routes round trip on localhost") {
    auto svc = make_service();
    svc.register_model(fixture::small_model());
    fixture::LocalServer server(svc);
    REQUIRE(server.port() > 0);
    auto cli = server.client();

    auto health = cli.Get("/api/v1/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body)["models"] == json::array({"sa-test"}));

    auto chat = cli.Post("/api/v1/chat", json{{"text", "hello"}}.dump(), "application/json");
    REQUIRE(chat);
    CHECK(chat->status == 200);
    const auto body = json::parse(chat->body);
    CHECK(chat_response_violations(body).empty());
    const auto id = body["session_id"].get<std::string>();

    auto second = cli.Post("/api/v1/chat", json{{"session_id", id}, {"text", "I want to check my breast health"}}.dump(),
                           "application/json");
    REQUIRE(second);
    CHECK(json::parse(second->body)["session_id"] == id);

    auto view = cli.Get("/api/v1/session/" + id);
    REQUIRE(view);
    CHECK(view->status == 200);
    CHECK(json::parse(view->body)["history"].size() == 4);

    auto end = cli.Post("/api/v1/session/" + id + "/end");
    REQUIRE(end);
    CHECK(json::parse(end->body)["goal_status"] == "Failed");

    auto raw = cli.Post("/api/v1/classify?model_id=sa-test", fixture::sample_payload(0, 3), "application/octet-stream");
    REQUIRE(raw);
    CHECK(raw->status == 200);
    CHECK(classify_response_violations(json::parse(raw->body), 1e-9).empty());

    httplib::MultipartFormDataItems items{{"file", fixture::sample_payload(1, 3), "x.pdfc", "application/octet-stream"}};
    auto multi = cli.Post("/api/v1/classify?model_id=sa-test", items);
    REQUIRE(multi);
    CHECK(multi->status == 200);
    CHECK(json::parse(multi->body)["label"] == "malignant");

    auto status_of = [](const httplib::Result& r) { return r ? r->status : -1; };
    CHECK(status_of(cli.Post("/api/v1/chat", "{not json", "application/json")) == 400);
    CHECK(status_of(cli.Post("/api/v1/chat", json{{"text", ""}}.dump(), "application/json")) == 400);
    CHECK(status_of(cli.Post("/api/v1/chat", json{{"session_id", "zzz"}, {"text", "hi"}}.dump(),
                             "application/json")) == 404);
    CHECK(status_of(cli.Get("/api/v1/session/zzz")) == 404);
    CHECK(status_of(cli.Post("/api/v1/classify", fixture::sample_payload(0, 3), "application/octet-stream")) == 400);
    CHECK(status_of(cli.Post("/api/v1/classify?model_id=nope", fixture::sample_payload(0, 3),
                             "application/octet-stream")) == 404);
    CHECK(status_of(cli.Post("/api/v1/classify?model_id=sa-test", "junk", "application/octet-stream")) == 400);
    const auto err = cli.Get("/api/v1/session/zzz");
    CHECK(json::parse(err->body).contains("error"));
}

// --- goal completion ------------------------------------------------------------

TEST_CASE("scripted dialogues reproduce their labels") {
    const auto report = run_gcr_harness(kData / "dialogues", *fixture::shipped_graph(), *fixture::shipped_rules());
    REQUIRE(report.dialogues.size() == 30);
    for (const auto& d : report.dialogues) {
        INFO(d.name);
        CHECK(d.actual == d.expected);
    }
    CHECK(report.gcr.completed == 19);
    CHECK(report.gcr.total == 30);
    CHECK(chat::format_percentage(report.gcr.percentage) == "63.33%");
    CHECK_THROWS_AS(run_gcr_harness(kData / "nowhere", *fixture::shipped_graph(), *fixture::shipped_rules()),
                    PathNotFound);
}
