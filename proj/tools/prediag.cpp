// Command-line front end: corpus training, classifier training and evaluation, the
// goal-completion harness and the HTTP service.

#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prediag/prediag.hpp"
#include "prediag/service/http.hpp"

namespace fs = std::filesystem;
using namespace prediag;
using nlohmann::json;

namespace {

struct Settings {
    double similarity_threshold = chat::kDefaultSimilarityThreshold;
    std::string stopwords;
    std::string rules;
    std::string model_dir;
    std::string listen = "127.0.0.1:8080";
    std::uint64_t seed = 0;
};

void apply_config_file(Settings& s, const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw PathNotFound(path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw IoError(path, std::string("bad config: ") + e.what());
    }
    s.similarity_threshold = j.value("similarity_threshold", s.similarity_threshold);
    s.stopwords = j.value("stopwords", s.stopwords);
    s.rules = j.value("rules", s.rules);
    s.model_dir = j.value("model_dir", s.model_dir);
    s.listen = j.value("listen", s.listen);
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
}

text::TextPipeline make_pipeline(const Settings& s) {
    return s.stopwords.empty() ? text::TextPipeline() : text::TextPipeline(text::load_stopwords(s.stopwords));
}

classifier::Shape parse_shape(const std::string& text) {
    classifier::Shape shape;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            shape.push_back(static_cast<std::size_t>(std::stoull(part)));
        } catch (const std::exception&) {
            throw InvalidArgument("bad shape: " + text);
        }
    }
    if (shape.size() != 3) throw InvalidArgument("feature shape must be H,W,C: " + text);
    return shape;
}

std::string shape_flag(const classifier::Shape& s) {
    return std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]);
}

/// Where features come from: a directory or file of containers, or the seeded synthetic generator.
struct FeatureOptions {
    std::string features;
    std::string synthetic_shape = "1,1,8";
    double separation = 10.0;

    std::unique_ptr<classifier::FeatureSource> source(classifier::TargetKind target, std::uint64_t seed) const {
        if (!features.empty()) return std::make_unique<classifier::FeatureFileSource>(features);
        return std::make_unique<classifier::SyntheticFeatureSource>(
            parse_shape(synthetic_shape), separation, seed,
            target == classifier::TargetKind::Label ? classifier::SyntheticFeatureSource::Target::Label
                                                    : classifier::SyntheticFeatureSource::Target::Subtype);
    }

    void add_to(CLI::App* cmd) {
        cmd->add_option("--features", features, "Feature container file or directory (omit for synthetic features)");
        cmd->add_option("--synthetic-shape", synthetic_shape, "Synthetic feature shape H,W,C");
        cmd->add_option("--separation", separation, "Synthetic class-mean separation");
    }
};

classifier::DatasetManifest manifest_or_canonical(const std::string& path) {
    return path.empty() ? classifier::canonical_breakhis_manifest() : classifier::load_manifest(path);
}

std::optional<int> magnification_flag(const std::string& m) {
    if (m.empty() || m == "all") return std::nullopt;
    return classifier::parse_magnification(m);
}

// ---------------------------------------------------------------------------

int train_chat(const Settings& s, const std::string& corpus_dir, const std::string& out) {
    chat::KnowledgeGraph graph(make_pipeline(s));
    const auto files = chat::corpus_files(corpus_dir);
    if (files.empty()) throw IoError(corpus_dir, "no *.txt corpus files");
    const auto inserted = chat::train_from_files(graph, files);
    chat::save_store(graph, out);
    std::cout << "trained " << inserted << " statements from " << files.size() << " files into " << out << " ("
              << graph.size() << " unique)\n";
    return 0;
}

struct TrainClassifierArgs {
    std::string manifest;
    FeatureOptions features;
    std::string head = "EfficientNetV2-SA";
    std::string magnification = "40";
    std::string target = "label";
    std::string out;
    std::string model_id;
    double train_fraction = 0.7;
    double validation_fraction = 0.1;
    std::size_t conv_width = 0;
    classifier::TrainHyper hyper;
};

int train_classifier(const Settings& s, const TrainClassifierArgs& a) {
    const auto target = classifier::parse_target(a.target);
    const auto mag = magnification_flag(a.magnification);
    auto manifest = manifest_or_canonical(a.manifest);
    if (mag) manifest = manifest.at_magnification(*mag);
    if (manifest.records.empty()) throw InvalidArgument("no records at the requested magnification");

    auto [train_m, test_m] = classifier::split_dataset(manifest, a.train_fraction, s.seed);
    auto [fit_m, val_m] = classifier::split_dataset(train_m, 1.0 - a.validation_fraction, s.seed + 1);

    const auto backbone = a.features.source(target, s.seed);
    const auto fit = classifier::extract_features(fit_m, *backbone, target);
    const auto val = classifier::extract_features(val_m, *backbone, target);
    const auto test = classifier::extract_features(test_m, *backbone, target);

    auto config = classifier::head_config(a.head, backbone->feature_shape(), classifier::class_names(target).size(),
                                          a.conv_width);
    classifier::ModelInfo info;
    info.model_id = a.model_id.empty() ? a.head + "-" + (mag ? std::to_string(*mag) + "X" : std::string("all")) +
                                             "-" + std::string(classifier::to_string(target))
                                       : a.model_id;
    info.target = target;
    info.magnification = mag;
    info.seed = s.seed;
    info.train_fraction = a.train_fraction;
    classifier::TrainedModel model{classifier::build_head(config, s.seed), info};

    auto report = classifier::train_head(model.head, fit, val, a.hyper, s.seed);
    report.test_accuracy = classifier::evaluate_accuracy(model.head, test);
    report.per_class = classifier::per_class_accuracy(model.head, test);

    const fs::path out = a.out.empty() ? fs::path(info.model_id + ".json") : fs::path(a.out);
    classifier::save_model(model, out);

    std::cout << "epoch,train_loss,train_accuracy,validation_loss,validation_accuracy\n";
    for (const auto& e : report.history) {
        std::cout << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.validation_loss << ','
                  << e.validation_accuracy << '\n';
    }
    std::cout << "stopped_epoch=" << report.stopped_epoch << " best_epoch=" << report.best_epoch
              << " test_accuracy=" << classifier::format_percent_cell(report.test_accuracy)
              << "% records(train/validation/test)=" << fit.size() << '/' << val.size() << '/' << test.size()
              << "\nsaved " << info.model_id << " to " << out << '\n';
    return 0;
}

struct EvalClassifierArgs {
    std::vector<std::string> models;
    std::string manifest;
    FeatureOptions features;
    bool all_records = false;
};

int eval_classifier(const EvalClassifierArgs& a) {
    const auto full = manifest_or_canonical(a.manifest);
    std::map<std::string, classifier::AccuracyRow> accuracy_rows;
    std::vector<std::string> row_order;
    std::vector<classifier::SubtypeRow> subtype_rows;

    for (const auto& path : a.models) {
        auto model = classifier::load_model(path);
        auto manifest = model.info.magnification ? full.at_magnification(*model.info.magnification) : full;
        // Recreate the held-out split the model was trained against.
        if (!a.all_records) manifest = classifier::split_dataset(manifest, model.info.train_fraction, model.info.seed).second;
        const auto backbone = a.features.source(model.info.target, model.info.seed);
        const auto test = classifier::extract_features(manifest, *backbone, model.info.target);
        const double acc = classifier::evaluate_accuracy(model.head, test);

        const std::string name(model.head.config().name());
        if (!accuracy_rows.count(name)) {
            accuracy_rows[name].model = name;
            row_order.push_back(name);
        }
        if (model.info.magnification) accuracy_rows[name].by_magnification[*model.info.magnification] = acc;
        subtype_rows.push_back({name, model.info.magnification, classifier::per_class_accuracy(model.head, test)});
    }

    std::vector<classifier::AccuracyRow> rows;
    for (const auto& n : row_order) rows.push_back(accuracy_rows[n]);
    std::cout << "# accuracy (%) by magnification\n"
              << classifier::format_accuracy_table(rows) << "\n# accuracy (%) by subtype\n"
              << classifier::format_subtype_table(subtype_rows);
    return 0;
}

int eval_gcr(const Settings& s, const std::string& dialogues, const std::string& store, const std::string& rules_path) {
    const auto graph = chat::load_store(store);
    const auto rules = chat::load_rules(rules_path);
    chat::DialogueConfig config;
    config.threshold = chat::SimilarityScore(s.similarity_threshold);
    const auto report = service::run_gcr_harness(dialogues, graph, rules, config, s.seed);
    std::cout << "dialogue,expected,actual\n";
    for (const auto& d : report.dialogues) {
        std::cout << d.name << ',' << chat::to_string(d.expected) << ',' << chat::to_string(d.actual) << '\n';
    }
    std::cout << "completed=" << report.gcr.completed << " total=" << report.gcr.total
              << " gcr=" << chat::format_percentage(report.gcr.percentage) << " mismatches=" << report.mismatches()
              << '\n';
    return 0;
}

httplib::Server* g_server = nullptr;

int serve(const Settings& s, const std::string& store, const std::string& static_dir) {
    if (s.rules.empty()) throw InvalidArgument("serve needs --rules (or the 'rules' config key)");
    auto graph = std::make_shared<const chat::KnowledgeGraph>(chat::load_store(store));
    auto rules = std::make_shared<const chat::RuleSet>(chat::load_rules(s.rules));
    service::ServiceConfig config;
    config.similarity_threshold = s.similarity_threshold;
    config.seed = s.seed;
    service::ChatService svc(graph, rules, config);
    if (!s.model_dir.empty()) std::cerr << "loaded " << svc.load_models(s.model_dir) << " models\n";

    const auto colon = s.listen.rfind(':');
    if (colon == std::string::npos) throw InvalidArgument("listen address must be host:port");
    const auto host = s.listen.substr(0, colon);
    const int port = std::stoi(s.listen.substr(colon + 1));

    httplib::Server server;
    service::register_routes(server, svc);
    if (!static_dir.empty()) service::mount_static(server, static_dir);
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
    });
    std::cerr << "listening on " << host << ':' << port << '\n';
    if (!server.listen(host, port)) throw IoError(s.listen, "cannot listen");
    return 0;
}

int make_features(const std::string& manifest_path, const std::string& out, const FeatureOptions& f,
                  const std::string& target, std::uint64_t seed) {
    const auto manifest = manifest_or_canonical(manifest_path);
    const auto backbone = f.source(classifier::parse_target(target), seed);
    classifier::FeatureContainer c;
    c.shape = backbone->feature_shape();
    for (const auto& r : manifest.records) c.samples.emplace(r.id, backbone->features(r));
    classifier::save_feature_container(c, out);
    std::cout << "wrote " << c.samples.size() << " samples of shape " << shape_flag(c.shape) << " to " << out << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Breast-cancer pre-diagnosis: consultation chatbot and histopathology classifier"};
    app.require_subcommand(1);
    app.fallthrough();

    Settings settings;
    std::string config_path;
    std::optional<double> threshold_flag;
    std::optional<std::string> stopwords_flag, rules_flag, model_dir_flag, listen_flag;
    std::optional<std::uint64_t> seed_flag;
    app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed_flag, "Random seed");
    app.add_option("--similarity-threshold", threshold_flag, "Match threshold in [0,1]");
    app.add_option("--stopwords", stopwords_flag, "Stopword list, one word per line");

    auto* tc = app.add_subcommand("train-chat", "Train the knowledge graph from a corpus directory");
    std::string corpus_dir, store_out;
    tc->add_option("--corpus-dir", corpus_dir)->required()->check(CLI::ExistingDirectory);
    tc->add_option("--out", store_out)->required();

    auto* tcl = app.add_subcommand("train-classifier", "Train a classifier head over frozen features");
    TrainClassifierArgs tca;
    tcl->add_option("--manifest", tca.manifest, "Manifest CSV (omit for the canonical BreaKHis layout)");
    tca.features.add_to(tcl);
    tcl->add_option("--head", tca.head)->check(CLI::IsMember(std::vector<std::string>{
        "VGG-16FC", "VGG-16GAP", "ResNet-50", "EfficientNetV2-S", "EfficientNetV2-SA"}));
    tcl->add_option("--magnification", tca.magnification, "40, 100, 200, 400 or all");
    tcl->add_option("--target", tca.target, "label or subtype");
    tcl->add_option("--out", tca.out, "Model snapshot path");
    tcl->add_option("--model-id", tca.model_id);
    tcl->add_option("--train-fraction", tca.train_fraction);
    tcl->add_option("--validation-fraction", tca.validation_fraction, "Share of the training split held out");
    tcl->add_option("--conv-width", tca.conv_width, "Conv1x1 output channels (0 keeps the input width)");
    tcl->add_option("--lr", tca.hyper.learning_rate);
    tcl->add_option("--batch-size", tca.hyper.batch_size);
    tcl->add_option("--epochs", tca.hyper.max_epochs);
    tcl->add_option("--patience", tca.hyper.patience);

    auto* ecl = app.add_subcommand("eval-classifier", "Evaluate trained heads on their held-out split");
    EvalClassifierArgs eca;
    ecl->add_option("--model", eca.models)->required()->check(CLI::ExistingFile);
    ecl->add_option("--manifest", eca.manifest);
    eca.features.add_to(ecl);
    ecl->add_flag("--all-records", eca.all_records, "Evaluate every record instead of the held-out split");

    auto* eg = app.add_subcommand("eval-gcr", "Replay scripted dialogues and report the goal completion rate");
    std::string dialogues, gcr_store;
    eg->add_option("--dialogues", dialogues)->required()->check(CLI::ExistingDirectory);
    eg->add_option("--store", gcr_store)->required()->check(CLI::ExistingFile);
    eg->add_option("--rules", rules_flag)->check(CLI::ExistingFile);

    auto* sv = app.add_subcommand("serve", "Run the HTTP service");
    std::string serve_store, static_dir;
    sv->add_option("--store", serve_store)->required()->check(CLI::ExistingFile);
    sv->add_option("--rules", rules_flag)->check(CLI::ExistingFile);
    sv->add_option("--model-dir", model_dir_flag);
    sv->add_option("--listen", listen_flag, "host:port");
    sv->add_option("--static", static_dir, "Directory of static client assets");

    auto* mf = app.add_subcommand("make-features", "Write synthetic features for a manifest to a container");
    std::string mf_manifest, mf_out, mf_target = "label";
    FeatureOptions mf_features;
    mf->add_option("--manifest", mf_manifest);
    mf->add_option("--out", mf_out)->required();
    mf->add_option("--synthetic-shape", mf_features.synthetic_shape);
    mf->add_option("--separation", mf_features.separation);
    mf->add_option("--target", mf_target);

    auto* cm = app.add_subcommand("canonical-manifest", "Write a manifest with the BreaKHis class layout");
    std::string cm_out;
    cm->add_option("--out", cm_out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (!config_path.empty()) apply_config_file(settings, config_path);
        if (threshold_flag) settings.similarity_threshold = *threshold_flag;
        if (stopwords_flag) settings.stopwords = *stopwords_flag;
        if (rules_flag) settings.rules = *rules_flag;
        if (model_dir_flag) settings.model_dir = *model_dir_flag;
        if (listen_flag) settings.listen = *listen_flag;
        if (seed_flag) settings.seed = *seed_flag;

        if (*tc) return train_chat(settings, corpus_dir, store_out);
        if (*tcl) return train_classifier(settings, tca);
        if (*ecl) return eval_classifier(eca);
        if (*eg) {
            if (settings.rules.empty()) throw InvalidArgument("eval-gcr needs --rules (or the 'rules' config key)");
            return eval_gcr(settings, dialogues, gcr_store, settings.rules);
        }
        if (*sv) return serve(settings, serve_store, static_dir);
        if (*mf) return make_features(mf_manifest, mf_out, mf_features, mf_target, settings.seed);
        if (*cm) {
            classifier::save_manifest(classifier::canonical_breakhis_manifest(), cm_out);
            std::cout << "wrote " << cm_out << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
