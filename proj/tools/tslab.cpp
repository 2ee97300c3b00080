#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "tslab/diagnostics.hpp"
#include "tslab/error.hpp"
#include "tslab/harness.hpp"

namespace {

using namespace tslab;
using nlohmann::json;

void print_run(const harness::RunResult& r, const std::filesystem::path& path) {
    std::printf("%s  variant=%s  status=%s\n", r.dataset.c_str(), r.variant.c_str(), r.status.c_str());
    for (const auto& e : r.evaluations) {
        std::printf("  %s  lr=%g  params=%lld/%lld", e.setting.dump().c_str(), e.learning_rate,
                    static_cast<long long>(e.trainable_parameters),
                    static_cast<long long>(e.total_parameters));
        const auto& m = e.metrics;
        if (m.mse) std::printf("  mse=%.3f  mae=%.3f", *m.mse, *m.mae);
        if (m.f1) std::printf("  precision=%.3f  recall=%.3f  f1=%.3f", *m.precision, *m.recall, *m.f1);
        if (m.accuracy) std::printf("  accuracy=%.3f", *m.accuracy);
        if (e.diagnostics) std::printf("  dw=%.3f", e.diagnostics->dw);
        std::printf("\n");
    }
    std::printf("wrote %s\n", path.string().c_str());
}

std::vector<std::string> csv_header(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> names;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) names.push_back(cell);
    if (names.size() >= 2 && names[0] == "source" && names[1] == "token_id") {
        names.erase(names.begin(), names.begin() + 2);
    }
    return names;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Time series backbone ablation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    auto* run = app.add_subcommand("run", "Train and evaluate one configuration");
    run->add_option("config", config_path, "Experiment config JSON")->required()->check(CLI::ExistingFile);

    std::string compare_config;
    std::vector<std::string> variant_tags{"llm", "random", "linear", "att", "trans", "nollm"};
    auto* compare = app.add_subcommand("compare", "Run several variants on one configuration");
    compare->add_option("config", compare_config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
    compare->add_option("--variants", variant_tags, "Comma-separated variant kinds")->delimiter(',');

    std::string residuals_path;
    Eigen::Index max_lag = 40;
    auto* diagnose = app.add_subcommand("diagnose", "Durbin-Watson and ACF of residual columns");
    diagnose->add_option("--residuals", residuals_path, "CSV with a header and one residual series per column")
        ->required()
        ->check(CLI::ExistingFile);
    diagnose->add_option("--max-lag", max_lag, "Largest ACF lag");

    std::string pre_path, post_path, text_path, alt_path;
    Eigen::Index k = 10;
    std::uint64_t align_seed = 0;
    auto* align = app.add_subcommand("align", "Pseudo-alignment metrics for token clouds");
    align->add_option("--pre", pre_path, "Tokens entering the backbone")->required()->check(CLI::ExistingFile);
    align->add_option("--post", post_path, "Tokens leaving the backbone")->required()->check(CLI::ExistingFile);
    align->add_option("--text", text_path, "Text token embeddings")->required()->check(CLI::ExistingFile);
    align->add_option("--alt", alt_path, "Same tokens through another backbone")->check(CLI::ExistingFile);
    align->add_option("-k", k, "Neighbourhood size");
    align->add_option("--seed", align_seed, "Projection seed");

    std::string tally_source;
    auto* tally = app.add_subcommand("tally", "Win counts over a results directory or dataset,variant,mse,mae CSV");
    tally->add_option("results", tally_source, "Directory of run results or CSV file")->required()->check(CLI::ExistingPath);

    harness::PretrainOptions pre_opts;
    std::string pretrain_out;
    auto* pretrain = app.add_subcommand("pretrain", "Train a tiny language-model checkpoint");
    pretrain->add_option("--out", pretrain_out, "Checkpoint directory")->required();
    pretrain->add_option("--vocab", pre_opts.vocab);
    pretrain->add_option("--width", pre_opts.width);
    pretrain->add_option("--depth", pre_opts.depth);
    pretrain->add_option("--heads", pre_opts.heads);
    pretrain->add_option("--seq-len", pre_opts.seq_len);
    pretrain->add_option("--steps", pre_opts.steps);
    pretrain->add_option("--lr", pre_opts.learning_rate);
    pretrain->add_option("--seed", pre_opts.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            const auto config = harness::load_config(config_path);
            const auto result = harness::run_experiment(config);
            print_run(result, harness::write_result(result, config.output_dir));
        } else if (compare->parsed()) {
            const auto config = harness::load_config(compare_config);
            std::vector<zoo::VariantKind> kinds;
            for (const auto& tag : variant_tags) kinds.push_back(zoo::parse_variant_kind(tag));
            const auto c = harness::compare_variants(config, kinds);
            for (const auto& r : c.runs) harness::write_result(r, config.output_dir);
            std::cout << c.text;
        } else if (diagnose->parsed()) {
            const Eigen::MatrixXd residuals = diag::read_matrix_csv(residuals_path);
            const auto names = csv_header(residuals_path);
            json columns = json::array();
            std::vector<Eigen::VectorXd> series;
            for (Eigen::Index c = 0; c < residuals.cols(); ++c) {
                series.push_back(residuals.col(c));
                json j = harness::to_json(diag::residual_acf(residuals.col(c), max_lag));
                j["column"] = names[static_cast<std::size_t>(c)];
                columns.push_back(j);
            }
            const auto agg = diag::aggregate_dw(series);
            std::cout << json{{"columns", columns}, {"dw_mean", agg.mean}, {"sequences", agg.count}}.dump(2)
                      << '\n';
        } else if (align->parsed()) {
            std::optional<Eigen::MatrixXd> alt;
            if (!alt_path.empty()) alt = diag::read_matrix_csv(alt_path);
            diag::AlignmentOptions opt;
            opt.k = k;
            opt.seed = align_seed;
            const auto report = diag::alignment_report(diag::read_matrix_csv(pre_path),
                                                       diag::read_matrix_csv(post_path),
                                                       diag::read_matrix_csv(text_path), alt, opt);
            std::cout << harness::to_json(report).dump(2) << '\n';
        } else if (tally->parsed()) {
            const auto table = std::filesystem::is_directory(tally_source)
                                   ? harness::collect_results(tally_source)
                                   : harness::read_tally_csv(tally_source);
            std::cout << harness::format_tally(harness::tally_wins(table));
        } else if (pretrain->parsed()) {
            const auto report = harness::pretrain_backbone(pre_opts);
            zoo::write_checkpoint(report.checkpoint, pretrain_out);
            std::printf("loss %.4f -> %.4f, wrote %s\n", report.initial_loss, report.final_loss,
                        pretrain_out.c_str());
        }
    } catch (const IngestionError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
