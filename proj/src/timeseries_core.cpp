#include "tslab/timeseries_core.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>

namespace tslab::core {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

double parse_cell(const std::string& raw, std::size_t line_no, std::size_t col) {
    const std::string cell = trim(raw);
    if (cell.empty()) {
        throw IngestionError("blank cell at row " + std::to_string(line_no) + ", column " +
                                 std::to_string(col),
                             line_no, col);
    }
    double value = 0.0;
    const auto* begin = cell.data();
    const auto* end = cell.data() + cell.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) {
        throw IngestionError("non-numeric cell '" + cell + "' at row " + std::to_string(line_no) +
                                 ", column " + std::to_string(col),
                             line_no, col);
    }
    if (!std::isfinite(value)) {
        throw IngestionError("non-finite value at row " + std::to_string(line_no) +
                                 ", column " + std::to_string(col),
                             line_no, col);
    }
    return value;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IngestionError("cannot open dataset file " + path.string(), 0, IngestionError::npos);
    }
    return in;
}

}  // namespace

DatasetSchema parse_schema(std::string_view tag) {
    const std::string t = lower(std::string(tag));
    if (t == "generic" || t == "csv") return DatasetSchema::generic;
    if (t == "ett_hour" || t == "etth") return DatasetSchema::ett_hour;
    if (t == "ett_minute" || t == "ettm") return DatasetSchema::ett_minute;
    if (t == "classification") return DatasetSchema::classification;
    if (t == "anomaly") return DatasetSchema::anomaly;
    throw ConfigError("unknown dataset schema '" + std::string(tag) + "'");
}

std::string_view schema_name(DatasetSchema schema) {
    switch (schema) {
        case DatasetSchema::generic: return "generic";
        case DatasetSchema::ett_hour: return "ett_hour";
        case DatasetSchema::ett_minute: return "ett_minute";
        case DatasetSchema::classification: return "classification";
        case DatasetSchema::anomaly: return "anomaly";
    }
    return "generic";
}

SeriesTensor load_dataset(const std::filesystem::path& path, DatasetSchema schema) {
    if (schema == DatasetSchema::classification) {
        throw ConfigError("classification datasets load through load_classification_dataset");
    }
    auto in = open_or_throw(path);
    std::string line;
    if (!std::getline(in, line)) {
        throw IngestionError("empty dataset file " + path.string(), 1, IngestionError::npos);
    }
    auto header = split_csv_line(line);
    for (auto& h : header) h = trim(h);
    const bool has_date = !header.empty() && lower(header.front()) == "date";
    const std::size_t first_numeric = has_date ? 1 : 0;
    if (header.size() <= first_numeric) {
        throw IngestionError("no numeric columns in " + path.string(), 1, IngestionError::npos);
    }

    SeriesTensor series;
    series.columns.assign(header.begin() + static_cast<std::ptrdiff_t>(first_numeric), header.end());
    const std::size_t width = series.columns.size();

    std::vector<double> flat;
    std::vector<std::string> stamps;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw IngestionError("malformed row " + std::to_string(line_no) + ": expected " +
                                     std::to_string(header.size()) + " cells, found " +
                                     std::to_string(cells.size()),
                                 line_no, IngestionError::npos);
        }
        if (has_date) {
            stamps.push_back(trim(cells.front()));
        }
        for (std::size_t c = first_numeric; c < cells.size(); ++c) {
            flat.push_back(parse_cell(cells[c], line_no, c));
        }
    }
    const std::size_t rows = flat.size() / width;
    if (rows == 0) {
        throw IngestionError("dataset " + path.string() + " has no data rows", line_no,
                             IngestionError::npos);
    }
    series.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                   Eigen::RowMajor>>(
        flat.data(), static_cast<Index>(rows), static_cast<Index>(width));
    if (has_date) {
        // ISO-8601 stamps order lexicographically.
        for (std::size_t i = 1; i < stamps.size(); ++i) {
            if (!(stamps[i - 1] < stamps[i])) {
                throw IngestionError("timestamps not strictly increasing at data row " +
                                         std::to_string(i + 1),
                                     i + 2, 0);
            }
        }
        series.timestamps = std::move(stamps);
    }
    return series;
}

SeriesTensor load_anomaly_dataset(const std::filesystem::path& data_path,
                                  const std::filesystem::path& label_path) {
    SeriesTensor series = load_dataset(data_path, DatasetSchema::generic);
    const SeriesTensor labels = load_dataset(label_path, DatasetSchema::generic);
    if (labels.length() != series.length()) {
        throw IngestionError("label file has " + std::to_string(labels.length()) +
                                 " rows but data has " + std::to_string(series.length()),
                             IngestionError::npos, IngestionError::npos);
    }
    std::vector<int> point(static_cast<std::size_t>(series.length()));
    const Index last = labels.variates() - 1;
    for (Index t = 0; t < labels.length(); ++t) {
        const double v = labels.values(t, last);
        if (v != 0.0 && v != 1.0) {
            throw IngestionError("anomaly label must be 0 or 1 at row " + std::to_string(t + 2),
                                 static_cast<std::size_t>(t + 2), static_cast<std::size_t>(last));
        }
        point[static_cast<std::size_t>(t)] = static_cast<int>(v);
    }
    series.point_labels = std::move(point);
    return series;
}

std::vector<SeriesTensor> load_classification_dataset(const std::filesystem::path& manifest) {
    auto in = open_or_throw(manifest);
    std::string line;
    std::getline(in, line);
    std::vector<SeriesTensor> samples;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 2) {
            throw IngestionError("malformed manifest row " + std::to_string(line_no), line_no,
                                 IngestionError::npos);
        }
        std::filesystem::path sample_path = trim(cells[0]);
        if (sample_path.is_relative()) {
            sample_path = manifest.parent_path() / sample_path;
        }
        const double label = parse_cell(cells[1], line_no, 1);
        if (label < 0 || label != std::floor(label)) {
            throw IngestionError("class label must be a non-negative integer at row " +
                                     std::to_string(line_no),
                                 line_no, 1);
        }
        SeriesTensor sample = load_dataset(sample_path, DatasetSchema::generic);
        sample.class_label = static_cast<int>(label);
        samples.push_back(std::move(sample));
    }
    if (samples.empty()) {
        throw IngestionError("manifest lists no samples", line_no, IngestionError::npos);
    }
    return samples;
}

// ---------------------------------------------------------------------------

SplitPlan fractional_split(Index length, const SplitFractions& f) {
    if (f.train <= 0 || f.validation < 0 || f.test < 0 ||
        std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) {
        throw ConfigError("split fractions must be non-negative and sum to 1");
    }
    const auto n_train = static_cast<Index>(std::floor(static_cast<double>(length) * f.train));
    const auto n_val = static_cast<Index>(std::floor(static_cast<double>(length) * f.validation));
    SplitPlan plan;
    plan.ranges[0] = {0, n_train};
    plan.ranges[1] = {n_train, n_train + n_val};
    plan.ranges[2] = {n_train + n_val, length};
    plan.statistics_rows = plan.ranges[0];
    return plan;
}

SplitPlan ett_split(Index length, DatasetSchema schema, Index lookback) {
    Index month = 30 * 24;
    if (schema == DatasetSchema::ett_minute) {
        month *= 4;
    } else if (schema != DatasetSchema::ett_hour) {
        throw ConfigError("ett_split requires an ETT schema");
    }
    const Index train_end = 12 * month;
    const Index val_end = 16 * month;
    const Index test_end = 20 * month;
    if (length < test_end) {
        throw ConfigError("ETT split needs at least " + std::to_string(test_end) + " rows, got " +
                          std::to_string(length));
    }
    SplitPlan plan;
    plan.ranges[0] = {0, train_end};
    plan.ranges[1] = {train_end - lookback, val_end};
    plan.ranges[2] = {val_end - lookback, test_end};
    plan.statistics_rows = plan.ranges[0];
    return plan;
}

Index window_count(Index rows, Index lookback, Index horizon, Index stride) {
    if (stride < 1) throw ConfigError("window stride must be >= 1");
    const Index span = lookback + horizon;
    if (rows < span) return 0;
    return (rows - span) / stride + 1;
}

WindowSet make_windows(const Matrix& values, RowRange range, Index lookback, Index horizon,
                       Index stride) {
    if (lookback < 1 || horizon < 0) {
        throw ConfigError("lookback must be >= 1 and horizon >= 0");
    }
    WindowSet set;
    set.lookback = lookback;
    set.horizon = horizon;
    const Index count = window_count(range.size(), lookback, horizon, stride);
    set.inputs.reserve(static_cast<std::size_t>(count));
    set.targets.reserve(static_cast<std::size_t>(count));
    for (Index w = 0; w < count; ++w) {
        const Index start = range.begin + w * stride;
        set.origins.push_back(start);
        set.inputs.push_back(values.middleRows(start, lookback));
        if (horizon == 0) {
            set.targets.push_back(set.inputs.back());
        } else {
            set.targets.push_back(values.middleRows(start + lookback, horizon));
        }
    }
    return set;
}

SplitWindows make_windows(const SeriesTensor& series, Index lookback, Index horizon,
                          Index stride, const SplitPlan& plan) {
    if (lookback + horizon > series.length()) {
        throw ConfigError("lookback + horizon (" + std::to_string(lookback + horizon) +
                          ") exceeds series length " + std::to_string(series.length()));
    }
    for (const auto& r : plan.ranges) {
        if (r.begin < 0 || r.end > series.length() || r.begin > r.end) {
            throw ConfigError("split range outside the series");
        }
    }
    return {make_windows(series.values, plan.ranges[0], lookback, horizon, stride),
            make_windows(series.values, plan.ranges[1], lookback, horizon, stride),
            make_windows(series.values, plan.ranges[2], lookback, horizon, stride)};
}

SplitWindows make_windows(const SeriesTensor& series, Index lookback, Index horizon,
                          Index stride, const SplitFractions& fractions) {
    if (lookback + horizon > series.length()) {
        throw ConfigError("lookback + horizon (" + std::to_string(lookback + horizon) +
                          ") exceeds series length " + std::to_string(series.length()));
    }
    return make_windows(series, lookback, horizon, stride,
                        fractional_split(series.length(), fractions));
}

Standardizer Standardizer::fit(const Matrix& values, RowRange rows) {
    if (rows.size() < 1) throw ConfigError("standardizer needs at least one row");
    const auto block = values.middleRows(rows.begin, rows.size());
    Standardizer s;
    s.mean = block.colwise().mean();
    s.scale = ((block.rowwise() - s.mean).array().square().colwise().sum() /
               static_cast<double>(rows.size()))
                  .sqrt();
    for (Index c = 0; c < s.scale.size(); ++c) {
        if (s.scale(c) < kStdGuard) s.scale(c) = 1.0;
    }
    return s;
}

Matrix Standardizer::transform(const Matrix& values) const {
    return ((values.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

Matrix Standardizer::inverse(const Matrix& values) const {
    return ((values.array().rowwise() * scale.array()).rowwise() + mean.array()).matrix();
}

// ---------------------------------------------------------------------------

Index patch_count(Index lookback, Index patch_len, Index stride) {
    if (patch_len < 1) throw ConfigError("patch length must be >= 1");
    if (stride < 1) throw ConfigError("patch stride must be >= 1");
    if (patch_len > lookback) {
        throw ConfigError("patch length " + std::to_string(patch_len) + " exceeds lookback " +
                          std::to_string(lookback));
    }
    return (lookback - patch_len) / stride + 1;
}

PatchFeatures patch_features(const Eigen::Ref<const Vector>& channel, Index patch_len,
                             Index stride) {
    const Index count = patch_count(channel.size(), patch_len, stride);
    PatchFeatures out;
    out.features.resize(count, patch_feature_width(patch_len));
    out.stats.reserve(static_cast<std::size_t>(count));
    for (Index s = 0; s < count; ++s) {
        const auto norm = instance_normalize(channel.segment(s * stride, patch_len));
        out.features.row(s).head(patch_len) = norm.values.transpose();
        out.features(s, patch_len) = norm.stats.mean;
        out.features(s, patch_len + 1) = norm.stats.std;
        out.stats.push_back(norm.stats);
    }
    return out;
}

PatchEmbedding PatchEmbedding::random(Index patch_len, Index width, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Index fan_in = patch_feature_width(patch_len);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    PatchEmbedding e;
    e.weight = Matrix::NullaryExpr(width, fan_in, [&] { return normal(rng); });
    e.bias = Vector::Zero(width);
    return e;
}

std::vector<PatchTokens> patchify(const Matrix& window, Index patch_len, Index stride,
                                  const PatchEmbedding& embed) {
    if (embed.weight.cols() != patch_feature_width(patch_len)) {
        throw ConfigError("patch embedding expects " + std::to_string(embed.weight.cols() - 2) +
                          "-step patches");
    }
    std::vector<PatchTokens> out;
    out.reserve(static_cast<std::size_t>(window.cols()));
    for (Index v = 0; v < window.cols(); ++v) {
        PatchFeatures pf = patch_features(window.col(v), patch_len, stride);
        PatchTokens pt;
        pt.tokens = (pf.features * embed.weight.transpose()).rowwise() + embed.bias.transpose();
        pt.normalized = pf.features.leftCols(patch_len);
        pt.patch_len = patch_len;
        pt.stride = stride;
        pt.denorm_stats = std::move(pf.stats);
        pt.channel_id = v;
        out.push_back(std::move(pt));
    }
    return out;
}

// ---------------------------------------------------------------------------

DecompositionTriple decompose_additive(const Matrix& window, Index period, Index kernel) {
    const Index length = window.rows();
    if (period < 1) throw ConfigError("decomposition period must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("moving-average kernel must be odd");
    if (kernel > length) {
        throw ConfigError("moving-average kernel " + std::to_string(kernel) +
                          " exceeds window length " + std::to_string(length));
    }
    const Index half = kernel / 2;
    DecompositionTriple out;
    out.trend.resize(length, window.cols());
    out.seasonal.resize(length, window.cols());
    for (Index v = 0; v < window.cols(); ++v) {
        const auto x = window.col(v);
        for (Index t = 0; t < length; ++t) {
            double acc = 0.0;
            for (Index j = -half; j <= half; ++j) {
                acc += x(std::clamp<Index>(t + j, 0, length - 1));
            }
            out.trend(t, v) = acc / static_cast<double>(kernel);
        }
        const Vector detrended = x - out.trend.col(v);
        const Index phases = std::min(period, length);
        Vector phase_mean = Vector::Zero(phases);
        Vector phase_n = Vector::Zero(phases);
        for (Index t = 0; t < length; ++t) {
            phase_mean(t % phases) += detrended(t);
            phase_n(t % phases) += 1.0;
        }
        phase_mean = phase_mean.cwiseQuotient(phase_n);
        phase_mean.array() -= phase_mean.mean();
        for (Index t = 0; t < length; ++t) {
            out.seasonal(t, v) = phase_mean(t % phases);
        }
    }
    out.residual = window - out.trend - out.seasonal;
    return out;
}

// ---------------------------------------------------------------------------

ImputationMask make_imputation_mask(Index rows, Index cols, double ratio, std::mt19937_64& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ConfigError("mask ratio must lie in (0, 1)");
    }
    if (rows < 1 || cols < 1) throw ConfigError("mask shape must be non-empty");
    const Index cells = rows * cols;
    const auto missing = static_cast<Index>(std::llround(ratio * static_cast<double>(cells)));
    std::vector<Index> order(static_cast<std::size_t>(cells));
    std::iota(order.begin(), order.end(), Index{0});
    // Partial Fisher-Yates: the first `missing` slots become a uniform sample.
    for (Index i = 0; i < missing; ++i) {
        std::uniform_int_distribution<Index> pick(i, cells - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    ImputationMask m;
    m.ratio = ratio;
    m.mask = MaskMatrix::Ones(rows, cols);
    for (Index i = 0; i < missing; ++i) {
        m.mask(order[static_cast<std::size_t>(i)] % rows, order[static_cast<std::size_t>(i)] / rows) = 0;
    }
    return m;
}

}  // namespace tslab::core
