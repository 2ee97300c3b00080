#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tslab/error.hpp"

namespace tslab::diag {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Ratio of summed squared successive differences to summed squares.
/// Roughly 2 for uncorrelated residuals, below 2 for positive and above 2
/// for negative lag-1 correlation.
template <typename Derived>
typename Derived::Scalar durbin_watson(const Eigen::MatrixBase<Derived>& e) {
    using Scalar = typename Derived::Scalar;
    const Index n = e.size();
    if (n < 2) throw ConfigError("Durbin-Watson needs at least two residuals");
    const auto flat = e.derived().reshaped();
    const Scalar denom = flat.squaredNorm();
    if (denom == Scalar(0)) {
        throw StatisticError("Durbin-Watson statistic undefined for all-zero residuals");
    }
    const Scalar num = (flat.tail(n - 1) - flat.head(n - 1)).squaredNorm();
    return num / denom;
}

struct DwAggregate {
    double mean = 0.0;
    std::size_t count = 0;
};

/// Arithmetic mean of per-sequence statistics.
DwAggregate aggregate_dw(std::span<const Vector> sequences);

struct ResidualDiagnostics {
    double dw = 0.0;
    Vector acf;  ///< rho_1 .. rho_max_lag
    double band = 0.0;
    Index n = 0;
    std::string aggregation = "single";
};

/// rho_k for k = 0..max_lag around the sample mean. Throws StatisticError
/// on zero variance.
template <typename Derived>
Vector autocorrelation(const Eigen::MatrixBase<Derived>& e, Index max_lag) {
    const Index n = e.size();
    if (max_lag < 0 || max_lag >= n) {
        throw ConfigError("max lag " + std::to_string(max_lag) + " must be below residual count " +
                          std::to_string(n));
    }
    const Vector centered = e.derived().reshaped().template cast<double>().array() -
                            static_cast<double>(e.mean());
    const double denom = centered.squaredNorm();
    if (denom == 0.0) throw StatisticError("autocorrelation undefined for constant residuals");
    Vector rho(max_lag + 1);
    for (Index k = 0; k <= max_lag; ++k) {
        rho(k) = centered.tail(n - k).dot(centered.head(n - k)) / denom;
    }
    return rho;
}

/// ACF for lags 1..max_lag with the +-1.96/sqrt(n) band, plus the DW statistic.
ResidualDiagnostics residual_acf(const Eigen::Ref<const Vector>& e, Index max_lag = 40);

/// Exact one-dimensional W1 between equal-size empirical measures.
template <typename DerivedX, typename DerivedY>
double wasserstein1_1d(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedY>& y) {
    if (x.size() != y.size()) {
        throw ConfigError("wasserstein1_1d needs equal sample counts (" + std::to_string(x.size()) +
                          " vs " + std::to_string(y.size()) + ")");
    }
    if (x.size() == 0) throw ConfigError("wasserstein1_1d needs at least one sample");
    std::vector<double> a(x.derived().reshaped().begin(), x.derived().reshaped().end());
    std::vector<double> b(y.derived().reshaped().begin(), y.derived().reshaped().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(a[i] - b[i]);
    return total / static_cast<double>(a.size());
}

/// `count` seeded directions drawn uniformly on the unit sphere (rows).
Matrix random_directions(Index count, Index dim, std::uint64_t seed);

/// Mean over random unit directions of the 1-D W1 of the projections.
double sliced_wasserstein(const Matrix& x, const Matrix& y, Index projections = 128,
                          std::uint64_t seed = 0);

/// Exact W1 (Euclidean ground cost) between equal-size point clouds via an
/// optimal assignment.
double wasserstein1_exact(const Matrix& x, const Matrix& y);

/// Optimal assignment for a square cost matrix; returns column per row.
std::vector<Index> solve_assignment(const Matrix& cost);

// ---------------------------------------------------------------------------
// Lipschitz analysis

struct ChainLayer {
    enum class Kind { linear, relu, tanh, identity, opaque };

    Kind kind = Kind::identity;
    std::string name;
    Matrix weight;  ///< out x in (linear only)
    Vector bias;    ///< out (linear only, may be empty)

    static ChainLayer linear(std::string name, Matrix w, Vector b = {});
    static ChainLayer activation(Kind kind, std::string name);
};

/// A feed-forward composition applied to row samples.
struct LayerChain {
    std::vector<ChainLayer> layers;

    Matrix evaluate(const Matrix& samples) const;
};

/// Largest singular value by power iteration on W^T W (at most 100 iterations,
/// stopping once the relative change drops below 1e-8).
double spectral_norm(const Matrix& w, int max_iterations = 100, double tolerance = 1e-8);

/// Product of per-layer Lipschitz constants; throws ConfigError naming the
/// first layer that is not linear or a 1-Lipschitz activation.
double lipschitz_upper(const LayerChain& f);

struct BoundCheck {
    double lhs = 0.0;  ///< |E f(S) - E f(T)|
    double rhs = 0.0;  ///< K * W1(S, T)
    double lipschitz = 0.0;
    double w1 = 0.0;
    bool holds = false;
};

/// Vector-valued chains are reduced by a fixed seeded unit-norm probe.
BoundCheck check_reprogram_bound(const LayerChain& f, const Matrix& source, const Matrix& target,
                                 std::uint64_t probe_seed = 0);

// ---------------------------------------------------------------------------
// Pseudo-alignment

struct VarianceProfile {
    Vector pre_std;
    Vector post_std;
    Vector text_std;
    Vector post_over_pre;  ///< per-dimension std ratio
};

struct AlignmentReport {
    double centroid_shift_before = 0.0;
    double centroid_shift_after = 0.0;
    VarianceProfile variance_profile;
    std::optional<double> knn_jaccard;
    double w1_sliced = 0.0;
    double lipschitz_K = 1.0;
    bool bound_holds = false;
    double bound_lhs = 0.0;
    double bound_rhs = 0.0;
    Index k = 10;
    Index bound_samples = 0;
};

/// Mean over points of the Jaccard overlap between their k-nearest-neighbour
/// index sets in `a` and in `b` (same points, two embeddings).
double knn_jaccard(const Matrix& a, const Matrix& b, Index k);

struct AlignmentOptions {
    Index k = 10;
    Index projections = 128;
    std::uint64_t seed = 0;
    Index max_bound_samples = 256;
};

AlignmentReport alignment_report(const Matrix& ts_pre, const Matrix& ts_post, const Matrix& text,
                                 const std::optional<Matrix>& alt_post,
                                 const AlignmentOptions& options = {});

// ---------------------------------------------------------------------------
// Embedding export: `source,token_id,dim_0..dim_{D-1}`, 9 significant digits.

struct EmbeddingSet {
    std::string source;
    Matrix tokens;
};

void export_embeddings(std::span<const EmbeddingSet> sets, const std::filesystem::path& path);
std::vector<EmbeddingSet> read_embeddings(const std::filesystem::path& path);

/// Numeric CSV with a header row; a leading `source,token_id` pair is skipped.
Matrix read_matrix_csv(const std::filesystem::path& path);

}  // namespace tslab::diag
