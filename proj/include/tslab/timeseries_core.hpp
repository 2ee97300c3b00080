#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tslab/error.hpp"

namespace tslab::core {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Patches whose population std falls below this are normalized to zero.
inline constexpr double kStdGuard = 1e-5;

enum class DatasetSchema {
    generic,          ///< header + optional `date` column + numeric variates, fractional split
    ett_hour,         ///< ETTh-style file, fixed 12/4/4-month borders
    ett_minute,       ///< ETTm-style file, fixed 12/4/4-month borders at 15-minute resolution
    classification,   ///< manifest CSV `path,label`
    anomaly,          ///< data CSV plus 0/1 label CSV
};

DatasetSchema parse_schema(std::string_view tag);
std::string_view schema_name(DatasetSchema schema);

struct SeriesTensor {
    Matrix values;  ///< L x V
    std::vector<std::string> columns;
    std::optional<std::vector<std::string>> timestamps;
    std::optional<std::vector<int>> point_labels;
    std::optional<int> class_label;

    Index length() const { return values.rows(); }
    Index variates() const { return values.cols(); }
};

/// Reads a header-first CSV. A leading `date` column becomes the timestamps;
/// every other column must parse as a finite number.
SeriesTensor load_dataset(const std::filesystem::path& path,
                          DatasetSchema schema = DatasetSchema::generic);

/// Data CSV plus a label CSV holding one 0/1 value per step (last column is read).
SeriesTensor load_anomaly_dataset(const std::filesystem::path& data_path,
                                  const std::filesystem::path& label_path);

/// Manifest CSV with header `path,label`; relative paths resolve against the manifest.
std::vector<SeriesTensor> load_classification_dataset(const std::filesystem::path& manifest);

// ---------------------------------------------------------------------------
// Windowing

/// Half-open row range [begin, end) of the parent series.
struct RowRange {
    Index begin = 0;
    Index end = 0;
    Index size() const { return end - begin; }
};

struct SplitPlan {
    std::array<RowRange, 3> ranges;  ///< train, validation, test
    RowRange statistics_rows;        ///< rows used for dataset-level standardization
};

struct SplitFractions {
    double train = 0.7;
    double validation = 0.1;
    double test = 0.2;
};

/// Chronological, disjoint split by fractions of the series length.
SplitPlan fractional_split(Index length, const SplitFractions& fractions);

/// Fixed month borders of the ETT benchmark convention. Validation and test
/// ranges start `lookback` rows early so their first target follows the
/// previous split directly.
SplitPlan ett_split(Index length, DatasetSchema schema, Index lookback);

struct WindowSet {
    std::vector<Matrix> inputs;   ///< each L_in x V
    std::vector<Matrix> targets;  ///< N x V, or L_in x V when horizon == 0
    std::vector<Index> origins;   ///< start row of each input in the parent series
    Index lookback = 0;
    Index horizon = 0;

    std::size_t size() const { return inputs.size(); }
};

struct SplitWindows {
    WindowSet train;
    WindowSet validation;
    WindowSet test;
};

/// Number of windows of `lookback + horizon` rows with the given stride that fit in `rows`.
Index window_count(Index rows, Index lookback, Index horizon, Index stride);

/// `horizon == 0` produces reconstruction windows (target = input).
WindowSet make_windows(const Matrix& values, RowRange range, Index lookback, Index horizon,
                       Index stride);

SplitWindows make_windows(const SeriesTensor& series, Index lookback, Index horizon,
                          Index stride, const SplitPlan& plan);

SplitWindows make_windows(const SeriesTensor& series, Index lookback, Index horizon,
                          Index stride, const SplitFractions& fractions = {});

/// Per-variate mean/std over `rows`, used to standardize the whole series.
struct Standardizer {
    RowVector mean;
    RowVector scale;

    static Standardizer fit(const Matrix& values, RowRange rows);
    Matrix transform(const Matrix& values) const;
    Matrix inverse(const Matrix& values) const;
};

// ---------------------------------------------------------------------------
// Patching

struct PatchStats {
    double mean = 0.0;
    double std = 1.0;
    bool guarded = false;
};

template <typename Scalar>
struct NormalizedVector {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> values;
    PatchStats stats;
};

/// Population-convention standardization of one patch.
template <typename Derived>
NormalizedVector<typename Derived::Scalar> instance_normalize(const Eigen::MatrixBase<Derived>& x,
                                                              double eps = kStdGuard) {
    using Scalar = typename Derived::Scalar;
    NormalizedVector<Scalar> out;
    const auto n = x.size();
    if (n == 0) {
        out.values.resize(0);
        out.stats = {0.0, 0.0, true};
        return out;
    }
    const Scalar mean = x.mean();
    const Scalar var = (x.array() - mean).square().sum() / static_cast<Scalar>(n);
    const Scalar sd = std::sqrt(var);
    out.stats.mean = static_cast<double>(mean);
    out.stats.std = static_cast<double>(sd);
    if (sd < eps) {
        out.stats.guarded = true;
        out.values = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(n);
    } else {
        out.values = ((x.array() - mean) / sd).matrix().reshaped();
    }
    return out;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> denormalize(
    const Eigen::MatrixBase<Derived>& normalized, const PatchStats& stats) {
    using Scalar = typename Derived::Scalar;
    if (stats.guarded) {
        return Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Constant(normalized.size(),
                                                                  Scalar(stats.mean));
    }
    return (normalized.array().reshaped() * Scalar(stats.std) + Scalar(stats.mean)).matrix();
}

/// S = floor((L_in - P) / stride) + 1; throws when P > L_in or stride < 1.
Index patch_count(Index lookback, Index patch_len, Index stride);

/// Width of a patch feature row: the normalized patch plus its mean and std.
inline Index patch_feature_width(Index patch_len) { return patch_len + 2; }

/// Embedding input for one channel: row s holds the instance-normalized patch
/// covering steps [s*stride, s*stride + P) followed by that patch's mean and std.
struct PatchFeatures {
    Matrix features;  ///< S x (P + 2)
    std::vector<PatchStats> stats;
};

PatchFeatures patch_features(const Eigen::Ref<const Vector>& channel, Index patch_len,
                             Index stride);

/// Linear patch embedding: tokens = features * weight^T + bias.
struct PatchEmbedding {
    Matrix weight;  ///< D x (P + 2)
    Vector bias;    ///< D

    static PatchEmbedding random(Index patch_len, Index width, std::uint64_t seed);
    Index width() const { return weight.rows(); }
};

struct PatchTokens {
    Matrix tokens;      ///< S x D
    Matrix normalized;  ///< S x P
    Index patch_len = 0;
    Index stride = 0;
    std::vector<PatchStats> denorm_stats;
    Index channel_id = 0;
};

/// One PatchTokens per channel of an L_in x V window.
std::vector<PatchTokens> patchify(const Matrix& window, Index patch_len, Index stride,
                                  const PatchEmbedding& embed);

// ---------------------------------------------------------------------------
// Decomposition

struct DecompositionTriple {
    Matrix trend;
    Matrix seasonal;
    Matrix residual;
};

/// Trend: centered moving average with edge replication. Seasonal: per-phase
/// mean of the detrended series, re-centered so the phase means sum to zero.
/// Residual: whatever remains.
DecompositionTriple decompose_additive(const Matrix& window, Index period, Index kernel);

// ---------------------------------------------------------------------------
// Imputation masks

struct ImputationMask {
    MaskMatrix mask;  ///< 1 = observed, 0 = missing
    double ratio = 0.0;

    Index missing() const { return mask.size() - mask.cast<Index>().sum(); }
};

ImputationMask make_imputation_mask(Index rows, Index cols, double ratio, std::mt19937_64& rng);

}  // namespace tslab::core
