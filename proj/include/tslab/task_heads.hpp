#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tslab/nn.hpp"
#include "tslab/timeseries_core.hpp"

namespace tslab::heads {

using nn::Index;
using nn::Matrix;
using nn::Var;
using core::PatchStats;

enum class TaskKind { forecast, impute, anomaly, classify };

TaskKind parse_task(std::string_view tag);
std::string_view task_name(TaskKind task);

struct TaskConfig {
    TaskKind task = TaskKind::forecast;
    std::optional<Index> horizon;         ///< forecast
    std::optional<double> mask_ratio;     ///< impute
    std::optional<double> anomaly_ratio;  ///< anomaly, percent
    std::optional<Index> num_classes;     ///< classify
    bool point_adjust = true;             ///< anomaly

    /// Requires exactly the selected task's field; throws ConfigError otherwise.
    void validate() const;
};

struct MetricRecord {
    std::string task;
    std::optional<double> mse, mae;
    std::optional<double> precision, recall, f1;
    std::optional<double> accuracy;
    std::optional<Index> horizon;
};

void to_json(nlohmann::json& j, const MetricRecord& m);
void from_json(const nlohmann::json& j, MetricRecord& m);

// ---------------------------------------------------------------------------
// Heads

/// Flattens each sequence's tokens and maps them linearly to `out_len`
/// values in instance-normalized units.
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(const std::string& name, Index seq_len, Index width, Index out_len,
                   std::mt19937_64& rng);

    /// (B*seq) x D -> B x out_len, normalized units.
    Var forward(const Var& tokens) const;

    /// Per-channel S x D embeddings -> out_len x V, denormalized with one
    /// stats entry per channel.
    Matrix predict(std::span<const Matrix> channels, std::span<const PatchStats> stats) const;

    nn::Linear& proj() { return proj_; }
    const nn::Linear& proj() const { return proj_; }
    void collect(nn::ParameterList& out) { proj_.collect(out); }
    Index seq_len() const { return seq_len_; }
    Index out_len() const { return proj_.d_out(); }

private:
    nn::Linear proj_;
    Index seq_len_ = 0;
};

/// Outputs N future steps per channel.
class ForecastHead : public ProjectionHead {
public:
    ForecastHead() = default;
    ForecastHead(Index seq_len, Index width, Index horizon, std::mt19937_64& rng)
        : ProjectionHead("head.forecast", seq_len, width, horizon, rng) {}
};

/// Outputs the L_in input steps per channel.
class ReconstructHead : public ProjectionHead {
public:
    ReconstructHead() = default;
    ReconstructHead(Index seq_len, Index width, Index lookback, std::mt19937_64& rng)
        : ProjectionHead("head.reconstruct", seq_len, width, lookback, rng) {}
};

/// pred * std + mean row by row (mean only for guarded stats); one stats entry per row.
Var denormalize_rows(const Var& pred, std::span<const PatchStats> stats);

/// Mean-pools tokens per channel, concatenates the channels and maps to C scores.
class ClassifyHead {
public:
    ClassifyHead() = default;
    ClassifyHead(Index seq_len, Index channels, Index width, Index classes, std::mt19937_64& rng);

    /// (B*V*seq) x D -> B x C.
    Var forward(const Var& tokens) const;
    /// Per-channel S x D embeddings -> length-C scores.
    Eigen::VectorXd scores(std::span<const Matrix> channels) const;

    nn::Linear& proj() { return proj_; }
    void collect(nn::ParameterList& out) { proj_.collect(out); }
    Index classes() const { return proj_.d_out(); }

private:
    nn::Linear proj_;
    Index seq_len_ = 0;
    Index channels_ = 0;
};

/// Index of the maximum score; the lowest index wins ties.
Index predicted_class(const Eigen::Ref<const Eigen::VectorXd>& scores);

/// Squared error on missing cells (mask == 0) only.
Var imputation_loss(const Var& pred, const Matrix& target, const core::MaskMatrix& mask);

// ---------------------------------------------------------------------------
// Anomaly scoring

/// Percentile with linear interpolation between order statistics, q in [0, 100].
double percentile(std::vector<double> values, double q);

/// Per-step energy: squared error averaged over variates.
Eigen::VectorXd step_energy(const Matrix& pred, const Matrix& target);

/// (100 - r)-th percentile of the combined train and test energies.
double anomaly_threshold(std::span<const double> train_errors, std::span<const double> test_errors,
                         double ratio_percent);

/// 1 where energy > tau.
std::vector<int> flag_anomalies(std::span<const double> energies, double tau);

/// Marks a whole true anomalous segment as detected when any of its points is flagged.
std::vector<int> point_adjust(std::span<const int> flags, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Evaluation

MetricRecord evaluate(const Matrix& pred, const Matrix& target, TaskKind task);
/// MSE/MAE over cells where mask == 0.
MetricRecord evaluate_masked(const Matrix& pred, const Matrix& target, const core::MaskMatrix& mask);
MetricRecord evaluate_detection(std::span<const int> flags, std::span<const int> labels,
                                bool adjust);
MetricRecord evaluate_classification(std::span<const Index> predicted, std::span<const int> labels);

}  // namespace tslab::heads
