#include "tslab/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace tslab::diag {

DwAggregate aggregate_dw(std::span<const Vector> sequences) {
    if (sequences.empty()) throw ConfigError("aggregate_dw needs at least one sequence");
    double total = 0.0;
    for (const auto& s : sequences) total += durbin_watson(s);
    return {total / static_cast<double>(sequences.size()), sequences.size()};
}

ResidualDiagnostics residual_acf(const Eigen::Ref<const Vector>& e, Index max_lag) {
    ResidualDiagnostics d;
    const Vector rho = autocorrelation(e, max_lag);
    d.acf = rho.tail(max_lag);
    d.n = e.size();
    d.band = 1.96 / std::sqrt(static_cast<double>(d.n));
    d.dw = durbin_watson(e);
    return d;
}

// ---------------------------------------------------------------------------

Matrix random_directions(Index count, Index dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix dirs(count, dim);
    for (Index i = 0; i < count; ++i) {
        double norm = 0.0;
        do {
            for (Index j = 0; j < dim; ++j) dirs(i, j) = normal(rng);
            norm = dirs.row(i).norm();
        } while (norm == 0.0);
        dirs.row(i) /= norm;
    }
    return dirs;
}

double sliced_wasserstein(const Matrix& x, const Matrix& y, Index projections, std::uint64_t seed) {
    if (x.cols() != y.cols()) {
        throw ConfigError("sliced_wasserstein dimension mismatch (" + std::to_string(x.cols()) +
                          " vs " + std::to_string(y.cols()) + ")");
    }
    if (x.rows() != y.rows()) throw ConfigError("sliced_wasserstein needs equal sample counts");
    if (projections < 1) throw ConfigError("sliced_wasserstein needs at least one projection");
    const Matrix dirs = random_directions(projections, x.cols(), seed);
    const Matrix px = x * dirs.transpose();
    const Matrix py = y * dirs.transpose();
    double total = 0.0;
    for (Index p = 0; p < projections; ++p) total += wasserstein1_1d(px.col(p), py.col(p));
    return total / static_cast<double>(projections);
}

std::vector<Index> solve_assignment(const Matrix& cost) {
    // Shortest augmenting path with potentials (Kuhn-Munkres), O(n^3).
    const Index n = cost.rows();
    if (cost.cols() != n) throw ConfigError("assignment cost matrix must be square");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<Index> match(n + 1, 0), way(n + 1, 0);
    for (Index i = 1; i <= n; ++i) {
        match[0] = i;
        Index j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const Index i0 = match[j0];
            double delta = inf;
            Index j1 = 0;
            for (Index j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (Index j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const Index j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<Index> assignment(n);
    for (Index j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
    return assignment;
}

double wasserstein1_exact(const Matrix& x, const Matrix& y) {
    if (x.cols() != y.cols()) throw ConfigError("wasserstein1_exact dimension mismatch");
    if (x.rows() != y.rows()) throw ConfigError("wasserstein1_exact needs equal sample counts");
    if (x.rows() == 0) throw ConfigError("wasserstein1_exact needs at least one sample");
    if (x.cols() == 1) return wasserstein1_1d(x.col(0), y.col(0));
    const Index n = x.rows();
    Matrix cost(n, n);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) cost(i, j) = (x.row(i) - y.row(j)).norm();
    }
    const auto assignment = solve_assignment(cost);
    double total = 0.0;
    for (Index i = 0; i < n; ++i) total += cost(i, assignment[i]);
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

ChainLayer ChainLayer::linear(std::string name, Matrix w, Vector b) {
    ChainLayer l;
    l.kind = Kind::linear;
    l.name = std::move(name);
    l.weight = std::move(w);
    l.bias = std::move(b);
    return l;
}

ChainLayer ChainLayer::activation(Kind kind, std::string name) {
    ChainLayer l;
    l.kind = kind;
    l.name = std::move(name);
    return l;
}

Matrix LayerChain::evaluate(const Matrix& samples) const {
    Matrix x = samples;
    for (const auto& layer : layers) {
        switch (layer.kind) {
            case ChainLayer::Kind::linear:
                if (layer.weight.cols() != x.cols()) {
                    throw ConfigError("layer '" + layer.name + "' expects width " +
                                      std::to_string(layer.weight.cols()));
                }
                x = x * layer.weight.transpose();
                if (layer.bias.size() > 0) x.rowwise() += layer.bias.transpose();
                break;
            case ChainLayer::Kind::relu: x = x.cwiseMax(0.0); break;
            case ChainLayer::Kind::tanh: x = x.array().tanh().matrix(); break;
            case ChainLayer::Kind::identity: break;
            case ChainLayer::Kind::opaque:
                throw ConfigError("layer '" + layer.name + "' cannot be evaluated");
        }
    }
    return x;
}

double spectral_norm(const Matrix& w, int max_iterations, double tolerance) {
    if (w.size() == 0) return 0.0;
    std::mt19937_64 rng(0x5eedULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v = Vector::NullaryExpr(w.cols(), [&] { return normal(rng); });
    v.normalize();
    double sigma = (w * v).norm();
    for (int it = 0; it < max_iterations; ++it) {
        Vector next = w.transpose() * (w * v);
        const double norm = next.norm();
        if (norm == 0.0) return 0.0;
        v = next / norm;
        const double updated = (w * v).norm();
        const double change = std::abs(updated - sigma) / std::max(updated, 1e-300);
        sigma = updated;
        if (change < tolerance) break;
    }
    return sigma;
}

double lipschitz_upper(const LayerChain& f) {
    double k = 1.0;
    for (const auto& layer : f.layers) {
        switch (layer.kind) {
            case ChainLayer::Kind::linear: k *= spectral_norm(layer.weight); break;
            case ChainLayer::Kind::relu:
            case ChainLayer::Kind::tanh:
            case ChainLayer::Kind::identity: break;
            case ChainLayer::Kind::opaque:
                throw ConfigError("layer '" + layer.name + "' is not analyzable");
        }
    }
    return k;
}

BoundCheck check_reprogram_bound(const LayerChain& f, const Matrix& source, const Matrix& target,
                                 std::uint64_t probe_seed) {
    if (source.rows() != target.rows()) {
        throw ConfigError("bound check needs equal sample counts");
    }
    if (source.cols() != target.cols()) throw ConfigError("bound check dimension mismatch");
    BoundCheck b;
    b.lipschitz = lipschitz_upper(f);
    Matrix fs = f.evaluate(source);
    Matrix ft = f.evaluate(target);
    if (fs.cols() > 1) {
        const Vector probe = random_directions(1, fs.cols(), probe_seed).row(0).transpose();
        fs = fs * probe;
        ft = ft * probe;
    }
    // Mean of sorted paired differences: equal to the difference of means, and
    // summed in the same order as the 1-D W1 so |lhs| <= W1 survives rounding.
    std::vector<double> a(fs.data(), fs.data() + fs.size()), c(ft.data(), ft.data() + ft.size());
    std::sort(a.begin(), a.end());
    std::sort(c.begin(), c.end());
    double gap = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) gap += a[i] - c[i];
    b.lhs = std::abs(gap / static_cast<double>(a.size()));
    b.w1 = wasserstein1_exact(source, target);
    b.rhs = b.lipschitz * b.w1;
    b.holds = b.lhs <= b.rhs + 1e-9;
    return b;
}

// ---------------------------------------------------------------------------

namespace {

Vector column_std(const Matrix& x) {
    const Eigen::RowVectorXd mean = x.colwise().mean();
    return ((x.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(x.rows()))
        .sqrt()
        .transpose();
}

std::vector<Index> nearest(const Matrix& x, Index i, Index k) {
    std::vector<std::pair<double, Index>> d;
    d.reserve(static_cast<std::size_t>(x.rows() - 1));
    for (Index j = 0; j < x.rows(); ++j) {
        if (j != i) d.emplace_back((x.row(i) - x.row(j)).squaredNorm(), j);
    }
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    std::vector<Index> out(static_cast<std::size_t>(k));
    for (Index j = 0; j < k; ++j) out[static_cast<std::size_t>(j)] = d[static_cast<std::size_t>(j)].second;
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

double knn_jaccard(const Matrix& a, const Matrix& b, Index k) {
    if (a.rows() != b.rows()) throw ConfigError("knn_jaccard needs the same points in both sets");
    if (k < 1 || k >= a.rows()) {
        throw ConfigError("k=" + std::to_string(k) + " must lie in [1, " +
                          std::to_string(a.rows() - 1) + "]");
    }
    double total = 0.0;
    for (Index i = 0; i < a.rows(); ++i) {
        const auto na = nearest(a, i, k);
        const auto nb = nearest(b, i, k);
        std::vector<Index> both;
        std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(both));
        const auto inter = static_cast<double>(both.size());
        total += inter / (2.0 * static_cast<double>(k) - inter);
    }
    return total / static_cast<double>(a.rows());
}

AlignmentReport alignment_report(const Matrix& ts_pre, const Matrix& ts_post, const Matrix& text,
                                 const std::optional<Matrix>& alt_post,
                                 const AlignmentOptions& options) {
    const Index d = ts_pre.cols();
    if (ts_post.cols() != d || text.cols() != d || (alt_post && alt_post->cols() != d)) {
        throw ConfigError("alignment inputs must share one embedding width");
    }
    if (ts_post.rows() != ts_pre.rows()) {
        throw ConfigError("pre and post token sets must hold the same tokens");
    }
    if (options.k >= ts_pre.rows()) {
        throw ConfigError("k=" + std::to_string(options.k) + " must be below the token count " +
                          std::to_string(ts_pre.rows()));
    }
    AlignmentReport r;
    r.k = options.k;
    const Eigen::RowVectorXd text_centroid = text.colwise().mean();
    r.centroid_shift_before = (ts_pre.colwise().mean() - text_centroid).norm();
    r.centroid_shift_after = (ts_post.colwise().mean() - text_centroid).norm();
    r.variance_profile.pre_std = column_std(ts_pre);
    r.variance_profile.post_std = column_std(ts_post);
    r.variance_profile.text_std = column_std(text);
    r.variance_profile.post_over_pre =
        r.variance_profile.post_std.array() / r.variance_profile.pre_std.array().max(1e-300);
    if (alt_post) {
        if (alt_post->rows() != ts_post.rows()) {
            throw ConfigError("alternative post-backbone set must hold the same tokens");
        }
        r.knn_jaccard = knn_jaccard(ts_post, *alt_post, options.k);
    }

    const Index n = std::min({ts_post.rows(), text.rows(), options.max_bound_samples});
    r.bound_samples = n;
    const Matrix source = ts_post.topRows(n);
    const Matrix target = text.topRows(n);
    r.w1_sliced = sliced_wasserstein(source, target, options.projections, options.seed);
    LayerChain probe;
    probe.layers.push_back(ChainLayer::linear(
        "probe", random_directions(1, d, options.seed ^ 0x9e3779b97f4a7c15ULL)));
    const BoundCheck bound = check_reprogram_bound(probe, source, target, options.seed);
    r.lipschitz_K = bound.lipschitz;
    r.bound_holds = bound.holds;
    r.bound_lhs = bound.lhs;
    r.bound_rhs = bound.rhs;
    return r;
}

// ---------------------------------------------------------------------------

void export_embeddings(std::span<const EmbeddingSet> sets, const std::filesystem::path& path) {
    if (sets.empty()) throw ConfigError("nothing to export");
    const Index d = sets.front().tokens.cols();
    for (const auto& s : sets) {
        if (s.tokens.cols() != d) throw ConfigError("embedding sets differ in width");
        if (s.source.find(',') != std::string::npos) {
            throw ConfigError("source label may not contain commas");
        }
    }
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << "source,token_id";
        for (Index j = 0; j < d; ++j) out << ",dim_" << j;
        out << '\n';
        char buf[32];
        for (const auto& s : sets) {
            for (Index i = 0; i < s.tokens.rows(); ++i) {
                out << s.source << ',' << i;
                for (Index j = 0; j < d; ++j) {
                    std::snprintf(buf, sizeof buf, "%.9g", s.tokens(i, j));
                    out << ',' << buf;
                }
                out << '\n';
            }
        }
        if (!out) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        if (!cell.empty() && cell.back() == '\r') cell.pop_back();
        cells.push_back(cell);
    }
    return cells;
}

double to_double(const std::string& s, std::size_t line_no) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw IngestionError("bad numeric cell '" + s + "' on line " + std::to_string(line_no),
                             line_no, IngestionError::npos);
    }
    return v;
}

}  // namespace

std::vector<EmbeddingSet> read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    const auto header = split(line);
    if (header.size() < 3 || header[0] != "source" || header[1] != "token_id") {
        throw IngestionError("embedding file header must start with source,token_id", 1,
                             IngestionError::npos);
    }
    const std::size_t d = header.size() - 2;
    std::vector<EmbeddingSet> sets;
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    auto flush = [&] {
        if (sets.empty()) return;
        auto& m = sets.back().tokens;
        m.resize(static_cast<Index>(rows.size()), static_cast<Index>(d));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
        }
        rows.clear();
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split(line);
        if (cells.size() != header.size()) {
            throw IngestionError("malformed embedding row " + std::to_string(line_no), line_no,
                                 IngestionError::npos);
        }
        if (sets.empty() || sets.back().source != cells[0]) {
            flush();
            sets.push_back({cells[0], {}});
        }
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) row[j] = to_double(cells[j + 2], line_no);
        rows.push_back(std::move(row));
    }
    flush();
    return sets;
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    const auto header = split(line);
    const std::size_t skip =
        header.size() >= 2 && header[0] == "source" && header[1] == "token_id" ? 2 : 0;
    if (header.size() <= skip) {
        throw IngestionError("no numeric columns in " + path.string(), 1, IngestionError::npos);
    }
    const std::size_t d = header.size() - skip;
    std::vector<double> flat;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split(line);
        if (cells.size() != header.size()) {
            throw IngestionError("malformed row " + std::to_string(line_no), line_no,
                                 IngestionError::npos);
        }
        for (std::size_t j = skip; j < cells.size(); ++j) flat.push_back(to_double(cells[j], line_no));
    }
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        flat.data(), static_cast<Index>(flat.size() / d), static_cast<Index>(d));
}

}  // namespace tslab::diag
