#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "tslab/error.hpp"
#include "tslab/harness.hpp"

namespace tslab::harness {

using nlohmann::json;

WinTally tally_wins(const TallyTable& table) {
    WinTally t;
    t.variants = table.variants;
    t.mse_wins.assign(table.variants.size(), 0);
    t.mae_wins.assign(table.variants.size(), 0);
    for (const auto& row : table.rows) {
        const auto found = table.cells.find(row);
        std::vector<std::pair<double, double>> cells;
        for (const auto& variant : table.variants) {
            if (found == table.cells.end() || !found->second.count(variant)) {
                throw ConfigError("missing cell: row '" + row + "', variant '" + variant + "'");
            }
            cells.push_back(found->second.at(variant));
        }
        double best_mse = cells.front().first, best_mae = cells.front().second;
        for (const auto& [mse, mae] : cells) {
            best_mse = std::min(best_mse, mse);
            best_mae = std::min(best_mae, mae);
        }
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (cells[i].first == best_mse) ++t.mse_wins[i];
            if (cells[i].second == best_mae) ++t.mae_wins[i];
        }
    }
    return t;
}

namespace {

double parse_number(const std::string& s, std::size_t line) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw IngestionError("bad number '" + s + "' on line " + std::to_string(line), line,
                             IngestionError::npos);
    }
    return v;
}

void add_cell(TallyTable& table, const std::string& row, const std::string& variant, double mse,
              double mae) {
    if (std::find(table.rows.begin(), table.rows.end(), row) == table.rows.end()) {
        table.rows.push_back(row);
    }
    if (std::find(table.variants.begin(), table.variants.end(), variant) == table.variants.end()) {
        table.variants.push_back(variant);
    }
    if (!table.cells[row].emplace(variant, std::make_pair(mse, mae)).second) {
        throw ConfigError("duplicate cell: row '" + row + "', variant '" + variant + "'");
    }
}

}  // namespace

TallyTable read_tally_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "dataset,variant,mse,mae") {
        throw IngestionError("tally CSV header must be dataset,variant,mse,mae", 1, IngestionError::npos);
    }
    TallyTable table;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 4) {
            throw IngestionError("expected 4 cells on line " + std::to_string(line_no), line_no,
                                 IngestionError::npos);
        }
        add_cell(table, cells[0], cells[1], parse_number(cells[2], line_no),
                 parse_number(cells[3], line_no));
    }
    return table;
}

TallyTable collect_results(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    TallyTable table;
    for (const auto& file : files) {
        std::ifstream in(file);
        json j;
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError(file.string() + ": " + e.what());
        }
        if (!j.contains("evaluations") || !j.contains("variant") || !j.contains("dataset")) continue;
        double mse = 0.0, mae = 0.0;
        std::size_t n = 0;
        std::string task = "forecast";
        for (const auto& e : j.at("evaluations")) {
            const auto& m = e.at("metrics");
            task = m.at("task").get<std::string>();
            if (m.at("mse").is_null() || m.at("mae").is_null()) continue;
            mse += m.at("mse").get<double>();
            mae += m.at("mae").get<double>();
            ++n;
        }
        if (n == 0) continue;
        std::string row = j.at("dataset").get<std::string>();
        if (task != "forecast") row += "/" + task;
        add_cell(table, row, j.at("variant").get<std::string>(), mse / static_cast<double>(n),
                 mae / static_cast<double>(n));
    }
    if (table.rows.empty()) throw ConfigError("no regression results in " + dir.string());
    return table;
}

std::string format_tally(const WinTally& tally) {
    std::ostringstream out;
    out << "variant    mse_wins  mae_wins\n";
    for (std::size_t i = 0; i < tally.variants.size(); ++i) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%-10s %8lld  %8lld\n", tally.variants[i].c_str(),
                      static_cast<long long>(tally.mse_wins[i]),
                      static_cast<long long>(tally.mae_wins[i]));
        out << buf;
    }
    return out.str();
}

Comparison compare_variants(const ExperimentConfig& base,
                            const std::vector<zoo::VariantKind>& variants) {
    if (variants.empty()) throw ConfigError("no variants to compare");
    Comparison c;
    std::ostringstream text;
    text << "variant    mse     mae     dw      trainable/total  lr\n";
    for (const auto kind : variants) {
        ExperimentConfig cfg = base;
        cfg.variant.kind = kind;
        const bool flat = kind == zoo::VariantKind::linear || kind == zoo::VariantKind::nollm;
        if (flat) {
            cfg.variant.depth = 0;
            cfg.variant.heads = 0;
        }
        const bool gpt = kind == zoo::VariantKind::llm || kind == zoo::VariantKind::random;
        if (!gpt && kind != base.variant.kind) cfg.variant.freeze_policy.reset();
        if (kind != zoo::VariantKind::llm) cfg.variant.checkpoint.reset();
        RunResult r = run_experiment(cfg);

        double mse = 0.0, mae = 0.0, dw = 0.0;
        std::size_t n = 0, n_dw = 0;
        for (const auto& e : r.evaluations) {
            if (e.metrics.mse && e.metrics.mae) {
                mse += *e.metrics.mse;
                mae += *e.metrics.mae;
                ++n;
            }
            if (e.diagnostics) {
                dw += e.diagnostics->dw;
                ++n_dw;
            }
        }
        const auto& first = r.evaluations.front();
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-10s %.3f   %.3f   %-7s %lld/%lld  %g\n", r.variant.c_str(),
                      n ? mse / static_cast<double>(n) : 0.0, n ? mae / static_cast<double>(n) : 0.0,
                      n_dw ? std::to_string(dw / static_cast<double>(n_dw)).substr(0, 5).c_str() : "-",
                      static_cast<long long>(first.trainable_parameters),
                      static_cast<long long>(first.total_parameters), first.learning_rate);
        text << buf;
        if (n) add_cell(c.table, r.dataset, r.variant, mse / static_cast<double>(n), mae / static_cast<double>(n));
        c.runs.push_back(std::move(r));
    }
    if (!c.table.rows.empty()) {
        c.tally = tally_wins(c.table);
        text << '\n' << format_tally(c.tally);
    }
    c.text = text.str();
    return c;
}

}  // namespace tslab::harness
