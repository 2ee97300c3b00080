#include "tslab/task_heads.hpp"

#include <algorithm>
#include <cmath>

#include "tslab/error.hpp"

namespace tslab::heads {

TaskKind parse_task(std::string_view tag) {
    if (tag == "forecast") return TaskKind::forecast;
    if (tag == "impute") return TaskKind::impute;
    if (tag == "anomaly") return TaskKind::anomaly;
    if (tag == "classify") return TaskKind::classify;
    throw ConfigError("unknown task '" + std::string(tag) + "'");
}

std::string_view task_name(TaskKind task) {
    switch (task) {
        case TaskKind::forecast: return "forecast";
        case TaskKind::impute: return "impute";
        case TaskKind::anomaly: return "anomaly";
        case TaskKind::classify: return "classify";
    }
    return "?";
}

void TaskConfig::validate() const {
    const std::string name(task_name(task));
    auto require = [&](bool present, const char* field) {
        if (!present) throw ConfigError(name + " task requires " + field);
    };
    auto forbid = [&](bool present, const char* field) {
        if (present) throw ConfigError(name + " task does not accept " + field);
    };
    require(task != TaskKind::forecast || horizon.has_value(), "horizon");
    require(task != TaskKind::impute || mask_ratio.has_value(), "mask_ratio");
    require(task != TaskKind::anomaly || anomaly_ratio.has_value(), "anomaly_ratio");
    require(task != TaskKind::classify || num_classes.has_value(), "num_classes");
    forbid(task != TaskKind::forecast && horizon.has_value(), "horizon");
    forbid(task != TaskKind::impute && mask_ratio.has_value(), "mask_ratio");
    forbid(task != TaskKind::anomaly && anomaly_ratio.has_value(), "anomaly_ratio");
    forbid(task != TaskKind::classify && num_classes.has_value(), "num_classes");

    if (horizon && *horizon < 1) throw ConfigError("horizon must be >= 1");
    if (mask_ratio && !(*mask_ratio >= 0.0 && *mask_ratio < 1.0)) {
        throw ConfigError("mask_ratio must lie in [0, 1)");
    }
    if (anomaly_ratio && !(*anomaly_ratio > 0.0 && *anomaly_ratio < 100.0)) {
        throw ConfigError("anomaly_ratio must lie in (0, 100)");
    }
    if (num_classes && *num_classes < 2) throw ConfigError("classification needs at least 2 classes");
}

namespace {

template <typename T>
nlohmann::json opt(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

}  // namespace

void to_json(nlohmann::json& j, const MetricRecord& m) {
    j = nlohmann::json{{"task", m.task},
                       {"mse", opt(m.mse)},
                       {"mae", opt(m.mae)},
                       {"precision", opt(m.precision)},
                       {"recall", opt(m.recall)},
                       {"f1", opt(m.f1)},
                       {"accuracy", opt(m.accuracy)},
                       {"horizon", opt(m.horizon)}};
}

void from_json(const nlohmann::json& j, MetricRecord& m) {
    m.task = j.at("task").get<std::string>();
    read_opt(j, "mse", m.mse);
    read_opt(j, "mae", m.mae);
    read_opt(j, "precision", m.precision);
    read_opt(j, "recall", m.recall);
    read_opt(j, "f1", m.f1);
    read_opt(j, "accuracy", m.accuracy);
    read_opt(j, "horizon", m.horizon);
}

// ---------------------------------------------------------------------------

namespace {

Matrix stack_channels(std::span<const Matrix> channels, Index seq_len, Index width) {
    Matrix stacked(static_cast<Index>(channels.size()) * seq_len, width);
    for (std::size_t v = 0; v < channels.size(); ++v) {
        if (channels[v].rows() != seq_len || channels[v].cols() != width) {
            throw ConfigError("channel " + std::to_string(v) + " embedding is " +
                              std::to_string(channels[v].rows()) + "x" +
                              std::to_string(channels[v].cols()) + ", head expects " +
                              std::to_string(seq_len) + "x" + std::to_string(width));
        }
        stacked.middleRows(static_cast<Index>(v) * seq_len, seq_len) = channels[v];
    }
    return stacked;
}

}  // namespace

ProjectionHead::ProjectionHead(const std::string& name, Index seq_len, Index width, Index out_len,
                               std::mt19937_64& rng)
    : proj_(name, nn::Group::head, seq_len * width, out_len, rng), seq_len_(seq_len) {
    if (seq_len < 1 || width < 1 || out_len < 1) {
        throw ConfigError("head dimensions must be positive");
    }
}

Var ProjectionHead::forward(const Var& tokens) const {
    return proj_.forward(ad::flatten_blocks(tokens, seq_len_));
}

Matrix ProjectionHead::predict(std::span<const Matrix> channels,
                               std::span<const PatchStats> stats) const {
    if (stats.size() != channels.size()) {
        throw ConfigError("denormalization stats missing: " + std::to_string(stats.size()) +
                          " entries for " + std::to_string(channels.size()) + " channels");
    }
    const Index width = proj_.d_in() / seq_len_;
    const Var out = denormalize_rows(forward(ad::constant(stack_channels(channels, seq_len_, width))),
                                     stats);
    return out->value.transpose();
}

Var denormalize_rows(const Var& pred, std::span<const PatchStats> stats) {
    if (static_cast<Index>(stats.size()) != pred->rows()) {
        throw ConfigError("denormalization stats missing for " +
                          std::to_string(pred->rows() - static_cast<Index>(stats.size())) +
                          " rows");
    }
    Matrix scale(pred->rows(), pred->cols());
    Matrix shift(pred->rows(), pred->cols());
    for (Index r = 0; r < pred->rows(); ++r) {
        const auto& st = stats[static_cast<std::size_t>(r)];
        scale.row(r).setConstant(st.guarded ? 0.0 : st.std);
        shift.row(r).setConstant(st.mean);
    }
    return ad::add(ad::hadamard(pred, ad::constant(std::move(scale))), ad::constant(std::move(shift)));
}

ClassifyHead::ClassifyHead(Index seq_len, Index channels, Index width, Index classes,
                           std::mt19937_64& rng)
    : seq_len_(seq_len), channels_(channels) {
    if (classes < 2) throw ConfigError("classification needs at least 2 classes");
    if (seq_len < 1 || channels < 1 || width < 1) {
        throw ConfigError("head dimensions must be positive");
    }
    proj_ = nn::Linear("head.classify", nn::Group::head, channels * width, classes, rng);
}

Var ClassifyHead::forward(const Var& tokens) const {
    return proj_.forward(ad::flatten_blocks(ad::block_mean(tokens, seq_len_), channels_));
}

Eigen::VectorXd ClassifyHead::scores(std::span<const Matrix> channels) const {
    if (static_cast<Index>(channels.size()) != channels_) {
        throw ConfigError("classifier expects " + std::to_string(channels_) + " channels");
    }
    const Index width = proj_.d_in() / channels_;
    return forward(ad::constant(stack_channels(channels, seq_len_, width)))->value.row(0).transpose();
}

Index predicted_class(const Eigen::Ref<const Eigen::VectorXd>& scores) {
    if (scores.size() == 0) throw ConfigError("empty score vector");
    Index best = 0;
    for (Index c = 1; c < scores.size(); ++c) {
        if (scores(c) > scores(best)) best = c;
    }
    return best;
}

Var imputation_loss(const Var& pred, const Matrix& target, const core::MaskMatrix& mask) {
    if (mask.rows() != target.rows() || mask.cols() != target.cols()) {
        throw ConfigError("mask shape does not match target");
    }
    const Matrix weights = (1 - mask.cast<int>().array()).cast<double>().matrix();
    return ad::weighted_mse(pred, ad::constant(target), weights);
}

// ---------------------------------------------------------------------------

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ConfigError("percentile of an empty sequence");
    if (!(q >= 0.0 && q <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

Eigen::VectorXd step_energy(const Matrix& pred, const Matrix& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw ConfigError("prediction and target shapes differ");
    }
    return (pred - target).array().square().rowwise().mean();
}

double anomaly_threshold(std::span<const double> train_errors, std::span<const double> test_errors,
                         double ratio_percent) {
    if (!(ratio_percent > 0.0 && ratio_percent < 100.0)) {
        throw ConfigError("anomaly ratio must lie in (0, 100)");
    }
    if (train_errors.empty() && test_errors.empty()) {
        throw ConfigError("anomaly threshold needs at least one error value");
    }
    std::vector<double> combined(train_errors.begin(), train_errors.end());
    combined.insert(combined.end(), test_errors.begin(), test_errors.end());
    return percentile(std::move(combined), 100.0 - ratio_percent);
}

std::vector<int> flag_anomalies(std::span<const double> energies, double tau) {
    std::vector<int> flags(energies.size());
    std::transform(energies.begin(), energies.end(), flags.begin(),
                   [tau](double e) { return e > tau ? 1 : 0; });
    return flags;
}

std::vector<int> point_adjust(std::span<const int> flags, std::span<const int> labels) {
    if (flags.size() != labels.size()) throw ConfigError("flags and labels differ in length");
    std::vector<int> out(flags.begin(), flags.end());
    std::size_t t = 0;
    while (t < labels.size()) {
        if (labels[t] != 1) {
            ++t;
            continue;
        }
        std::size_t end = t;
        bool hit = false;
        while (end < labels.size() && labels[end] == 1) hit |= flags[end++] == 1;
        if (hit) std::fill(out.begin() + static_cast<std::ptrdiff_t>(t),
                           out.begin() + static_cast<std::ptrdiff_t>(end), 1);
        t = end;
    }
    return out;
}

// ---------------------------------------------------------------------------

MetricRecord evaluate(const Matrix& pred, const Matrix& target, TaskKind task) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw ConfigError("prediction is " + std::to_string(pred.rows()) + "x" +
                          std::to_string(pred.cols()) + " but target is " +
                          std::to_string(target.rows()) + "x" + std::to_string(target.cols()));
    }
    if (pred.size() == 0) throw ConfigError("nothing to evaluate");
    MetricRecord m;
    m.task = std::string(task_name(task));
    const auto diff = (pred - target).array();
    m.mse = diff.square().mean();
    m.mae = diff.abs().mean();
    return m;
}

MetricRecord evaluate_masked(const Matrix& pred, const Matrix& target, const core::MaskMatrix& mask) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols() ||
        mask.rows() != target.rows() || mask.cols() != target.cols()) {
        throw ConfigError("prediction, target and mask shapes differ");
    }
    MetricRecord m;
    m.task = "impute";
    double se = 0.0, ae = 0.0;
    Index n = 0;
    for (Index j = 0; j < pred.cols(); ++j) {
        for (Index i = 0; i < pred.rows(); ++i) {
            if (mask(i, j) != 0) continue;
            const double d = pred(i, j) - target(i, j);
            se += d * d;
            ae += std::abs(d);
            ++n;
        }
    }
    m.mse = n > 0 ? se / static_cast<double>(n) : 0.0;
    m.mae = n > 0 ? ae / static_cast<double>(n) : 0.0;
    return m;
}

MetricRecord evaluate_detection(std::span<const int> flags, std::span<const int> labels,
                                bool adjust) {
    if (flags.size() != labels.size()) {
        throw ConfigError("flags (" + std::to_string(flags.size()) + ") and labels (" +
                          std::to_string(labels.size()) + ") differ in length");
    }
    const std::vector<int> used =
        adjust ? point_adjust(flags, labels) : std::vector<int>(flags.begin(), flags.end());
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t t = 0; t < used.size(); ++t) {
        if (used[t] == 1 && labels[t] == 1) ++tp;
        if (used[t] == 1 && labels[t] != 1) ++fp;
        if (used[t] != 1 && labels[t] == 1) ++fn;
    }
    MetricRecord m;
    m.task = "anomaly";
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    m.precision = p;
    m.recall = r;
    m.f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    return m;
}

MetricRecord evaluate_classification(std::span<const Index> predicted, std::span<const int> labels) {
    if (predicted.size() != labels.size()) throw ConfigError("predictions and labels differ in length");
    if (predicted.empty()) throw ConfigError("nothing to evaluate");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == labels[i];
    MetricRecord m;
    m.task = "classify";
    m.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());
    return m;
}

}  // namespace tslab::heads
