#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ftleak/harness.hpp"

using namespace ftleak;

namespace {

struct GlobalOpts {
    std::string config;
    std::string out_dir = "out";
    std::uint64_t seed = 0;  // 0 = keep the config's master seed
    bool seed_set = false;
    int workers = 1;
};

ExperimentConfig load_for(const GlobalOpts& g) {
    if (g.config.empty()) throw std::runtime_error("--config is required for this command");
    ExperimentConfig cfg = load_config(g.config);
    if (g.seed_set) cfg.master_seed = g.seed;
    return cfg;
}

int run_stage(const GlobalOpts& g, Stage stop_after, const char* tag) {
    try {
        auto report = run_experiment(load_for(g), g.out_dir, stop_after);
        for (const auto& [name, path] : report.artifacts.items())
            std::cout << name << ": " << g.out_dir << "/" << path.get<std::string>() << '\n';
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "[" << tag << "] error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unlearning-poisoned fine-tuning leakage lab"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config, "experiment (or suite) config JSON");
    app.add_option("--out-dir", g.out_dir, "artifact/cache directory");
    auto* seed_opt = app.add_option("--seed", g.seed, "override the master seed");
    app.add_option("--workers", g.workers, "parallel runs for `suite`");

    // synth-corpus
    auto* synth = app.add_subcommand("synth-corpus", "generate a synthetic text corpus file");
    int synth_n = 2000;
    std::string synth_family = "news_like";
    std::string synth_out = "corpus.txt";
    synth->add_option("--n", synth_n, "number of sequences");
    synth->add_option("--family", synth_family, "news_like | pii_like");
    synth->add_option("--out", synth_out, "output path");

    auto* pretrain = app.add_subcommand("pretrain", "build corpus splits and pretrain the model");
    auto* poison = app.add_subcommand("poison", "run the poisoning stage (and its prerequisites)");
    auto* finetune = app.add_subcommand("finetune", "fine-tune on the victim split");
    auto* attack = app.add_subcommand("attack", "run membership-inference / extraction attacks");
    auto* run = app.add_subcommand("run", "full pipeline through metrics");

    auto* report = app.add_subcommand("report", "render a table from report JSON files");
    std::vector<std::string> report_paths;
    report->add_option("paths", report_paths, "report JSON files")->required();

    auto* suite = app.add_subcommand("suite", "run a suite of configs and write a combined CSV");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    if (synth->parsed()) {
        try {
            TemplateFamily fam;
            if (synth_family == "news_like") fam = TemplateFamily::news_like;
            else if (synth_family == "pii_like") fam = TemplateFamily::pii_like;
            else throw std::runtime_error("unknown family: " + synth_family);
            save_corpus_file(synth_out, synth_texts(synth_n, g.seed_set ? g.seed : 1, fam));
            std::cout << "wrote " << synth_n << " sequences to " << synth_out << '\n';
            return 0;
        } catch (const std::exception& e) {
            std::cerr << "[synth-corpus] error: " << e.what() << '\n';
            return 1;
        }
    }
    if (pretrain->parsed()) return run_stage(g, Stage::pretrain, "pretrain");
    if (poison->parsed()) return run_stage(g, Stage::poison, "poison");
    if (finetune->parsed()) return run_stage(g, Stage::finetune, "finetune");
    if (attack->parsed()) return run_stage(g, Stage::attack, "attack");
    if (run->parsed()) {
        try {
            auto rep = run_experiment(load_for(g), g.out_dir);
            std::cout << render_report({rep});
            return 0;
        } catch (const std::exception& e) {
            std::cerr << "[run] error: " << e.what() << '\n';
            return 1;
        }
    }
    if (report->parsed()) {
        try {
            std::vector<RunReport> reports;
            for (const auto& p : report_paths) reports.push_back(load_report(p));
            std::cout << render_report(reports);
            return 0;
        } catch (const std::exception& e) {
            std::cerr << "[report] error: " << e.what() << '\n';
            return 1;
        }
    }
    if (suite->parsed()) {
        try {
            if (g.config.empty()) throw std::runtime_error("--config is required");
            auto res = run_suite(g.config, g.out_dir, g.workers);
            std::cout << render_report(res.reports);
            std::cout << "csv: " << res.csv_path << '\n';
            for (const auto& [label, err] : res.failures)
                std::cerr << "[suite] " << label << " failed: " << err << '\n';
            return res.failures.empty() ? 0 : 1;
        } catch (const std::exception& e) {
            std::cerr << "[suite] error: " << e.what() << '\n';
            return 1;
        }
    }
    return 0;
}
