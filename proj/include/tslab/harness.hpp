#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tslab/backbone_zoo.hpp"
#include "tslab/diagnostics.hpp"
#include "tslab/task_heads.hpp"
#include "tslab/timeseries_core.hpp"

namespace tslab::harness {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using heads::TaskKind;

struct DatasetConfig {
    std::filesystem::path path;
    core::DatasetSchema schema = core::DatasetSchema::generic;
    std::optional<std::filesystem::path> labels_path;  ///< anomaly point labels
};

struct TaskSettings {
    TaskKind task = TaskKind::forecast;
    std::vector<Index> horizons;       ///< forecast: one training run per horizon
    std::vector<double> mask_ratios;   ///< impute: one training run per ratio
    std::optional<double> anomaly_ratio;
    bool point_adjust = true;
    std::optional<Index> num_classes;
};

struct OptimizerConfig {
    std::vector<double> learning_rates{1e-2, 1e-3, 1e-4};
    Index max_epochs = 10;
    Index patience = 3;
    Index batch_size = 32;
    std::optional<Index> max_steps_per_epoch;
    std::optional<Index> max_eval_windows;  ///< caps validation/test windows (evenly spaced)
};

struct ExperimentConfig {
    DatasetConfig dataset;
    TaskSettings task;
    zoo::VariantSpec variant;
    Index lookback = 96;
    Index patch_len = 16;
    Index stride = 8;
    Index d_model = 32;
    Index window_stride = 1;  ///< step between training windows
    OptimizerConfig optimizer;
    std::optional<core::SplitFractions> split;  ///< unset: ETT borders for ETT schemas, else 0.7/0.1/0.2
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "results";
    Index prototype_bank_size = 100;
    Index max_lag = 40;
    bool alignment = false;
    bool export_embeddings = false;

    /// Throws ConfigError on inconsistent settings or missing paths.
    void validate() const;
    /// One TaskConfig per training run.
    std::vector<heads::TaskConfig> task_configs() const;
};

ExperimentConfig parse_config(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& config);
/// Reads the file, applies `TSLAB_SEED` and validates.
ExperimentConfig load_config(const std::filesystem::path& path);
void apply_env_overrides(ExperimentConfig& config);

/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string config_digest(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Model assembly

/// Patch embedding -> optional decomposition -> optional prototypes ->
/// optional mixer -> backbone -> task head.
class TaskModel {
public:
    TaskModel(const ExperimentConfig& config, const heads::TaskConfig& task, Index channels);

    struct Batch {
        Matrix features;                     ///< (B*V*S') x (P+2)
        std::vector<core::PatchStats> stats;  ///< B*V window statistics
        Index samples = 0;
    };

    struct Output {
        ad::Var result;  ///< (B*V) x out for regression, B x C for classification
        std::optional<Matrix> pre, post;
    };

    /// Turns L_in x V windows into patch features; `masks` fills missing
    /// cells with the observed channel mean before patching.
    Batch prepare(const std::vector<const Matrix*>& windows,
                  const std::vector<const core::MaskMatrix*>& masks = {}) const;
    Output forward(const Batch& batch, bool capture = false) const;

    nn::ParameterList parameters();
    Index sequence_length() const { return backbone_seq_; }
    Index patches() const { return patches_; }
    const zoo::Backbone& backbone() const { return *built_.backbone; }
    const std::optional<zoo::PrototypeBank>& bank() const { return bank_; }

private:
    ExperimentConfig config_;
    heads::TaskConfig task_;
    Index channels_;
    Index patches_;      ///< S per component
    Index token_seq_;    ///< S' = S or 3S with decomposition
    Index backbone_seq_;
    nn::Linear embed_;
    std::optional<zoo::PrototypeBank> bank_;
    std::unique_ptr<zoo::Mixer> mixer_;
    zoo::BuiltVariant built_;
    std::optional<heads::ProjectionHead> projection_;
    std::optional<heads::ClassifyHead> classifier_;
};

// ---------------------------------------------------------------------------
// Runs

struct LearningRateTrial {
    double learning_rate = 0.0;
    double initial_validation_loss = 0.0;
    double validation_loss = 0.0;  ///< best epoch
    Index epochs = 0;
    Index best_epoch = 0;
    std::string status = "ok";
};

struct Evaluation {
    nlohmann::json setting;
    heads::MetricRecord metrics;
    std::optional<diag::ResidualDiagnostics> diagnostics;
    std::optional<diag::AlignmentReport> alignment;
    std::vector<LearningRateTrial> trials;
    double learning_rate = 0.0;
    std::string status = "ok";
    Index total_parameters = 0;
    Index trainable_parameters = 0;
};

struct RunResult {
    std::string config_digest;
    nlohmann::json config;
    std::string dataset;
    std::string variant;
    std::uint64_t seed = 0;
    std::vector<Evaluation> evaluations;
    std::string status = "ok";
    std::string normalization;
    double wall_clock_seconds = 0.0;
};

nlohmann::json to_json(const RunResult& result, bool include_wall_clock = true);
nlohmann::json to_json(const diag::ResidualDiagnostics& d);
nlohmann::json to_json(const diag::AlignmentReport& r);

/// Trains, selects the learning rate on validation loss, evaluates on the
/// test split and computes residual diagnostics.
RunResult run_experiment(const ExperimentConfig& config);

/// Writes `<output_dir>/<dataset>_<variant>_<digest>.json` via a temporary file.
std::filesystem::path write_result(const RunResult& result, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Win tallies

struct TallyTable {
    std::vector<std::string> rows;
    std::vector<std::string> variants;
    /// cells[row][variant] = (mse, mae); absent entries are missing cells.
    std::map<std::string, std::map<std::string, std::pair<double, double>>> cells;
};

struct WinTally {
    std::vector<std::string> variants;
    std::vector<Index> mse_wins;
    std::vector<Index> mae_wins;
};

/// Lowest MSE and lowest MAE per row each earn a win; ties credit every tied
/// variant. Throws ConfigError naming the first missing row/variant cell.
WinTally tally_wins(const TallyTable& table);

/// Reads `dataset,variant,mse,mae` rows.
TallyTable read_tally_csv(const std::filesystem::path& path);
/// One row per dataset/task, metrics averaged over the run's evaluations.
TallyTable collect_results(const std::filesystem::path& dir);

std::string format_tally(const WinTally& tally);

struct Comparison {
    std::vector<RunResult> runs;
    TallyTable table;
    WinTally tally;
    std::string text;
};

/// Runs each variant on the shared data/task config with the same seed.
Comparison compare_variants(const ExperimentConfig& base, const std::vector<zoo::VariantKind>& variants);

// ---------------------------------------------------------------------------
// Tiny pretrained checkpoint

struct PretrainOptions {
    Index vocab = 64;
    Index width = 32;
    Index depth = 2;
    Index heads = 4;
    Index seq_len = 64;
    Index steps = 300;
    Index batch_size = 8;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
};

struct PretrainReport {
    zoo::Checkpoint checkpoint;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Next-token language model on sequences from a seeded sparse Markov chain;
/// the token table doubles as the output projection and is saved as `wte`.
PretrainReport pretrain_backbone(const PretrainOptions& options);

}  // namespace tslab::harness
