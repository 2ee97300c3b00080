#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "tslab/error.hpp"
#include "tslab/harness.hpp"

namespace tslab::harness {

using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleSalt = 0x5bd1e995ULL;
constexpr std::uint64_t kEvalMaskSalt = 0xe7a1ULL;
constexpr std::uint64_t kBankSalt = 0x7e47b4a1ULL;
constexpr Index kEvalChunk = 64;
constexpr const char* kNormalization =
    "dataset-level standardization fit on the training rows; metrics on the standardized scale";

std::vector<std::size_t> spaced(std::size_t n, std::optional<Index> cap) {
    std::vector<std::size_t> idx;
    if (!cap || static_cast<std::size_t>(*cap) >= n) {
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }
    const auto m = static_cast<std::size_t>(*cap);
    for (std::size_t i = 0; i < m; ++i) idx.push_back(m == 1 ? 0 : i * (n - 1) / (m - 1));
    return idx;
}

/// Rows (b*V + v) hold column v of window b, transposed.
Matrix channel_rows(const std::vector<const Matrix*>& windows) {
    const Index len = windows.front()->rows();
    const Index v_count = windows.front()->cols();
    Matrix out(static_cast<Index>(windows.size()) * v_count, len);
    for (std::size_t b = 0; b < windows.size(); ++b) {
        for (Index v = 0; v < v_count; ++v) {
            out.row(static_cast<Index>(b) * v_count + v) = windows[b]->col(v).transpose();
        }
    }
    return out;
}

core::MaskMatrix mask_rows(const std::vector<const core::MaskMatrix*>& masks) {
    const Index len = masks.front()->rows();
    const Index v_count = masks.front()->cols();
    core::MaskMatrix out(static_cast<Index>(masks.size()) * v_count, len);
    for (std::size_t b = 0; b < masks.size(); ++b) {
        for (Index v = 0; v < v_count; ++v) {
            out.row(static_cast<Index>(b) * v_count + v) = masks[b]->col(v).transpose();
        }
    }
    return out;
}

core::MaskMatrix random_mask(Index rows, Index cols, double ratio, std::mt19937_64& rng) {
    if (ratio <= 0.0) return core::MaskMatrix::Ones(rows, cols);
    return core::make_imputation_mask(rows, cols, ratio, rng).mask;
}

/// One residual sequence per (test window, variate) along the predicted
/// span. DW is the mean over sequences; the ACF is the mean over sequences
/// with nonzero variance, and the band uses the sequence length.
std::optional<diag::ResidualDiagnostics> residual_diagnostics(const std::vector<Eigen::VectorXd>& seqs,
                                                              Index max_lag, const std::string& what) {
    if (seqs.empty() || seqs.front().size() < 3) return std::nullopt;
    const Index len = seqs.front().size();
    const Index lag = std::min(max_lag, len - 1);
    diag::ResidualDiagnostics d;
    d.acf = Eigen::VectorXd::Zero(lag);
    std::size_t used = 0;
    for (const auto& s : seqs) {
        try {
            d.acf += diag::autocorrelation(s, lag).tail(lag);
            ++used;
        } catch (const StatisticError&) {
        }
    }
    if (used == 0) return std::nullopt;
    d.acf /= static_cast<double>(used);
    try {
        const auto agg = diag::aggregate_dw(seqs);
        d.dw = agg.mean;
    } catch (const StatisticError&) {
        return std::nullopt;
    }
    d.n = len;
    d.band = 1.96 / std::sqrt(static_cast<double>(len));
    d.aggregation = "mean over " + std::to_string(seqs.size()) + " (window, variate) sequences of " + what;
    return d;
}

struct TestOutcome {
    heads::MetricRecord metrics;
    std::optional<diag::ResidualDiagnostics> diagnostics;
};

/// Task-specific data handling behind a common training loop.
class TaskData {
public:
    virtual ~TaskData() = default;
    virtual Index channels() const = 0;
    virtual std::size_t train_size() const = 0;
    virtual ad::Var train_loss(const TaskModel& model, std::span<const std::size_t> idx,
                               std::mt19937_64& rng) const = 0;
    virtual double validation_loss(const TaskModel& model) const = 0;
    virtual TestOutcome test(const TaskModel& model) const = 0;
    virtual std::vector<const Matrix*> probe_windows(std::size_t n) const = 0;
};

template <typename F>
void for_chunks(std::size_t n, F&& f) {
    for (std::size_t start = 0; start < n; start += kEvalChunk) {
        f(start, std::min(n, start + static_cast<std::size_t>(kEvalChunk)));
    }
}

struct SplitSeries {
    Matrix values;  ///< standardized
    core::SplitPlan plan;
    std::vector<std::string> columns;
};

SplitSeries split_series(const core::SeriesTensor& series, const ExperimentConfig& config,
                         bool reach_back) {
    SplitSeries s;
    const Index length = series.values.rows();
    const bool ett = config.dataset.schema == core::DatasetSchema::ett_hour ||
                     config.dataset.schema == core::DatasetSchema::ett_minute;
    if (config.split || !ett) {
        s.plan = core::fractional_split(length, config.split.value_or(core::SplitFractions{}));
        // Forecast inputs may reach back into the previous split; targets
        // stay inside their own range.
        for (std::size_t i = 1; i < 3 && reach_back; ++i) {
            s.plan.ranges[i].begin = std::max<Index>(0, s.plan.ranges[i].begin - config.lookback);
        }
    } else {
        s.plan = core::ett_split(length, config.dataset.schema, config.lookback);
    }
    const auto scaler = core::Standardizer::fit(series.values, s.plan.statistics_rows);
    s.values = scaler.transform(series.values);
    s.columns = series.columns;
    return s;
}

void require_windows(const core::WindowSet& w, const char* split, Index need) {
    if (w.size() == 0) {
        throw ConfigError(std::string(split) + " split is shorter than lookback + horizon (" +
                          std::to_string(need) + " rows)");
    }
}

// ---------------------------------------------------------------------------

class ForecastData final : public TaskData {
public:
    ForecastData(const core::SeriesTensor& series, const ExperimentConfig& config, Index horizon)
        : horizon_(horizon), max_lag_(config.max_lag) {
        SplitSeries s = split_series(series, config, true);
        const auto& r = s.plan.ranges;
        train_ = core::make_windows(s.values, r[0], config.lookback, horizon, config.window_stride);
        val_ = core::make_windows(s.values, r[1], config.lookback, horizon, 1);
        test_ = core::make_windows(s.values, r[2], config.lookback, horizon, 1);
        const Index need = config.lookback + horizon;
        require_windows(train_, "train", need);
        require_windows(val_, "validation", need);
        require_windows(test_, "test", need);
        val_idx_ = spaced(val_.size(), config.optimizer.max_eval_windows);
        test_idx_ = spaced(test_.size(), config.optimizer.max_eval_windows);
    }

    Index channels() const override { return train_.inputs.front().cols(); }
    std::size_t train_size() const override { return train_.size(); }

    ad::Var train_loss(const TaskModel& model, std::span<const std::size_t> idx,
                       std::mt19937_64&) const override {
        std::vector<const Matrix*> in, out;
        for (auto i : idx) {
            in.push_back(&train_.inputs[i]);
            out.push_back(&train_.targets[i]);
        }
        const auto pred = model.forward(model.prepare(in)).result;
        return ad::mse(pred, ad::constant(channel_rows(out)));
    }

    double validation_loss(const TaskModel& model) const override {
        double se = 0.0;
        double n = 0.0;
        for_chunks(val_idx_.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in, out;
            for (std::size_t k = a; k < b; ++k) {
                in.push_back(&val_.inputs[val_idx_[k]]);
                out.push_back(&val_.targets[val_idx_[k]]);
            }
            const Matrix pred = model.forward(model.prepare(in)).result->value;
            se += (pred - channel_rows(out)).squaredNorm();
            n += static_cast<double>(pred.size());
        });
        return se / n;
    }

    TestOutcome test(const TaskModel& model) const override {
        double se = 0.0, ae = 0.0, n = 0.0;
        std::vector<Eigen::VectorXd> residuals;
        for_chunks(test_idx_.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in, out;
            for (std::size_t k = a; k < b; ++k) {
                in.push_back(&test_.inputs[test_idx_[k]]);
                out.push_back(&test_.targets[test_idx_[k]]);
            }
            const Matrix diff = model.forward(model.prepare(in)).result->value - channel_rows(out);
            se += diff.squaredNorm();
            ae += diff.cwiseAbs().sum();
            n += static_cast<double>(diff.size());
            for (Index r = 0; r < diff.rows(); ++r) residuals.push_back(diff.row(r).transpose());
        });
        TestOutcome t;
        t.metrics.task = "forecast";
        t.metrics.mse = se / n;
        t.metrics.mae = ae / n;
        t.metrics.horizon = horizon_;
        t.diagnostics = residual_diagnostics(residuals, max_lag_, "test forecast residuals");
        return t;
    }

    std::vector<const Matrix*> probe_windows(std::size_t n) const override {
        std::vector<const Matrix*> out;
        for (auto i : spaced(test_.size(), static_cast<Index>(n))) out.push_back(&test_.inputs[i]);
        return out;
    }

private:
    Index horizon_;
    Index max_lag_;
    core::WindowSet train_, val_, test_;
    std::vector<std::size_t> val_idx_, test_idx_;
};

// ---------------------------------------------------------------------------

class ImputeData final : public TaskData {
public:
    ImputeData(const core::SeriesTensor& series, const ExperimentConfig& config, double ratio)
        : ratio_(ratio), max_lag_(config.max_lag) {
        SplitSeries s = split_series(series, config, false);
        const auto& r = s.plan.ranges;
        train_ = core::make_windows(s.values, r[0], config.lookback, 0, config.window_stride);
        val_ = core::make_windows(s.values, r[1], config.lookback, 0, config.lookback);
        test_ = core::make_windows(s.values, r[2], config.lookback, 0, config.lookback);
        require_windows(train_, "train", config.lookback);
        require_windows(val_, "validation", config.lookback);
        require_windows(test_, "test", config.lookback);
        val_idx_ = spaced(val_.size(), config.optimizer.max_eval_windows);
        test_idx_ = spaced(test_.size(), config.optimizer.max_eval_windows);
        std::mt19937_64 rng(config.seed ^ kEvalMaskSalt);
        const Index l = config.lookback;
        const Index v = channels();
        for (std::size_t i = 0; i < val_.size(); ++i) val_masks_.push_back(random_mask(l, v, ratio, rng));
        for (std::size_t i = 0; i < test_.size(); ++i) test_masks_.push_back(random_mask(l, v, ratio, rng));
    }

    Index channels() const override { return train_.inputs.front().cols(); }
    std::size_t train_size() const override { return train_.size(); }

    ad::Var train_loss(const TaskModel& model, std::span<const std::size_t> idx,
                       std::mt19937_64& rng) const override {
        std::vector<core::MaskMatrix> masks;
        masks.reserve(idx.size());
        std::vector<const Matrix*> in;
        std::vector<const core::MaskMatrix*> mp;
        for (auto i : idx) {
            in.push_back(&train_.inputs[i]);
            masks.push_back(random_mask(train_.inputs[i].rows(), channels(), ratio_, rng));
        }
        for (const auto& m : masks) mp.push_back(&m);
        const auto pred = model.forward(model.prepare(in, mp)).result;
        return heads::imputation_loss(pred, channel_rows(in), mask_rows(mp));
    }

    double validation_loss(const TaskModel& model) const override {
        double se = 0.0, n = 0.0;
        for_chunks(val_idx_.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in;
            std::vector<const core::MaskMatrix*> mp;
            for (std::size_t k = a; k < b; ++k) {
                in.push_back(&val_.inputs[val_idx_[k]]);
                mp.push_back(&val_masks_[val_idx_[k]]);
            }
            const Matrix pred = model.forward(model.prepare(in, mp)).result->value;
            const Matrix missing = (1 - mask_rows(mp).cast<int>().array()).cast<double>().matrix();
            se += ((pred - channel_rows(in)).array().square() * missing.array()).sum();
            n += missing.sum();
        });
        return n > 0 ? se / n : 0.0;
    }

    TestOutcome test(const TaskModel& model) const override {
        double se = 0.0, ae = 0.0, n = 0.0;
        std::vector<Eigen::VectorXd> residuals;
        for_chunks(test_idx_.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in;
            std::vector<const core::MaskMatrix*> mp;
            for (std::size_t k = a; k < b; ++k) {
                in.push_back(&test_.inputs[test_idx_[k]]);
                mp.push_back(&test_masks_[test_idx_[k]]);
            }
            const Matrix diff = model.forward(model.prepare(in, mp)).result->value - channel_rows(in);
            const core::MaskMatrix m = mask_rows(mp);
            for (Index r = 0; r < diff.rows(); ++r) {
                for (Index c = 0; c < diff.cols(); ++c) {
                    if (m(r, c) != 0) continue;
                    se += diff(r, c) * diff(r, c);
                    ae += std::abs(diff(r, c));
                    n += 1.0;
                }
                residuals.push_back(diff.row(r).transpose());
            }
        });
        TestOutcome t;
        t.metrics.task = "impute";
        t.metrics.mse = n > 0 ? se / n : 0.0;
        t.metrics.mae = n > 0 ? ae / n : 0.0;
        t.diagnostics = residual_diagnostics(residuals, max_lag_, "test reconstruction residuals");
        return t;
    }

    std::vector<const Matrix*> probe_windows(std::size_t n) const override {
        std::vector<const Matrix*> out;
        for (auto i : spaced(test_.size(), static_cast<Index>(n))) out.push_back(&test_.inputs[i]);
        return out;
    }

private:
    double ratio_;
    Index max_lag_;
    core::WindowSet train_, val_, test_;
    std::vector<core::MaskMatrix> val_masks_, test_masks_;
    std::vector<std::size_t> val_idx_, test_idx_;
};

// ---------------------------------------------------------------------------

class AnomalyData final : public TaskData {
public:
    AnomalyData(const core::SeriesTensor& series, const ExperimentConfig& config,
                const heads::TaskConfig& task)
        : ratio_(*task.anomaly_ratio), adjust_(task.point_adjust), max_lag_(config.max_lag) {
        if (!series.point_labels) throw ConfigError("anomaly task needs point labels");
        SplitSeries s = split_series(series, config, false);
        const auto& r = s.plan.ranges;
        const Index l = config.lookback;
        train_ = core::make_windows(s.values, r[0], l, 0, config.window_stride);
        train_blocks_ = core::make_windows(s.values, r[0], l, 0, l);
        val_ = core::make_windows(s.values, r[1], l, 0, l);
        test_ = core::make_windows(s.values, r[2], l, 0, l);
        require_windows(train_, "train", l);
        require_windows(val_, "validation", l);
        require_windows(test_, "test", l);
        for (Index origin : test_.origins) {
            for (Index t = 0; t < l; ++t) {
                test_labels_.push_back((*series.point_labels)[static_cast<std::size_t>(origin + t)]);
            }
        }
    }

    Index channels() const override { return train_.inputs.front().cols(); }
    std::size_t train_size() const override { return train_.size(); }

    ad::Var train_loss(const TaskModel& model, std::span<const std::size_t> idx,
                       std::mt19937_64&) const override {
        std::vector<const Matrix*> in;
        for (auto i : idx) in.push_back(&train_.inputs[i]);
        return ad::mse(model.forward(model.prepare(in)).result, ad::constant(channel_rows(in)));
    }

    double validation_loss(const TaskModel& model) const override {
        double se = 0.0, n = 0.0;
        for_chunks(val_.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in;
            for (std::size_t k = a; k < b; ++k) in.push_back(&val_.inputs[k]);
            const Matrix pred = model.forward(model.prepare(in)).result->value;
            se += (pred - channel_rows(in)).squaredNorm();
            n += static_cast<double>(pred.size());
        });
        return se / n;
    }

    /// Per-step energies of non-overlapping windows plus per-(window, variate) residuals.
    std::vector<double> energies(const TaskModel& model, const core::WindowSet& set,
                                 std::vector<Eigen::VectorXd>* residuals) const {
        const Index v_count = channels();
        std::vector<double> out;
        for_chunks(set.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in;
            for (std::size_t k = a; k < b; ++k) in.push_back(&set.inputs[k]);
            const Matrix rows = model.forward(model.prepare(in)).result->value;
            for (std::size_t k = a; k < b; ++k) {
                const Index base = static_cast<Index>(k - a) * v_count;
                const Matrix pred = rows.middleRows(base, v_count).transpose();
                const Eigen::VectorXd e = heads::step_energy(pred, set.inputs[k]);
                out.insert(out.end(), e.begin(), e.end());
                if (residuals) {
                    for (Index v = 0; v < v_count; ++v) residuals->push_back(pred.col(v) - set.inputs[k].col(v));
                }
            }
        });
        return out;
    }

    TestOutcome test(const TaskModel& model) const override {
        std::vector<Eigen::VectorXd> residuals;
        const auto train_e = energies(model, train_blocks_, nullptr);
        const auto test_e = energies(model, test_, &residuals);
        const double tau = heads::anomaly_threshold(train_e, test_e, ratio_);
        const auto flags = heads::flag_anomalies(test_e, tau);
        TestOutcome t;
        t.metrics = heads::evaluate_detection(flags, test_labels_, adjust_);
        t.diagnostics = residual_diagnostics(residuals, max_lag_, "test reconstruction residuals");
        return t;
    }

    std::vector<const Matrix*> probe_windows(std::size_t n) const override {
        std::vector<const Matrix*> out;
        for (auto i : spaced(test_.size(), static_cast<Index>(n))) out.push_back(&test_.inputs[i]);
        return out;
    }

private:
    double ratio_;
    bool adjust_;
    Index max_lag_;
    core::WindowSet train_, train_blocks_, val_, test_;
    std::vector<int> test_labels_;
};

// ---------------------------------------------------------------------------

class ClassifyData final : public TaskData {
public:
    ClassifyData(std::vector<core::SeriesTensor> samples, const ExperimentConfig& config,
                 Index classes) {
        if (samples.size() < 3) throw ConfigError("classification needs at least 3 samples");
        const Index l = config.lookback;
        const Index v = samples.front().values.cols();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            if (s.values.rows() < l) {
                throw ConfigError("sample " + std::to_string(i) + " has " +
                                  std::to_string(s.values.rows()) + " rows, lookback is " +
                                  std::to_string(l));
            }
            if (s.values.cols() != v) throw ConfigError("samples differ in variate count");
            if (!s.class_label || *s.class_label < 0 || *s.class_label >= classes) {
                throw ConfigError("sample " + std::to_string(i) + " label outside [0, " +
                                  std::to_string(classes) + ")");
            }
        }
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(config.seed);
        std::shuffle(order.begin(), order.end(), rng);
        const auto f = config.split.value_or(core::SplitFractions{});
        const auto n = static_cast<double>(samples.size());
        const auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(n * f.train)));
        const auto n_val = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(n * (f.train + f.validation))) - n_train);
        if (n_train + n_val >= samples.size()) throw ConfigError("classification split leaves no test samples");

        Matrix pooled(static_cast<Index>(n_train) * l, v);
        for (std::size_t i = 0; i < n_train; ++i) {
            pooled.middleRows(static_cast<Index>(i) * l, l) = samples[order[i]].values.topRows(l);
        }
        const auto scaler = core::Standardizer::fit(pooled, {0, pooled.rows()});
        auto put = [&](std::size_t from, std::size_t to, std::vector<Matrix>& x, std::vector<int>& y) {
            for (std::size_t i = from; i < to; ++i) {
                x.push_back(scaler.transform(samples[order[i]].values.topRows(l)));
                y.push_back(*samples[order[i]].class_label);
            }
        };
        put(0, n_train, train_x_, train_y_);
        put(n_train, n_train + n_val, val_x_, val_y_);
        put(n_train + n_val, samples.size(), test_x_, test_y_);
    }

    Index channels() const override { return train_x_.front().cols(); }
    std::size_t train_size() const override { return train_x_.size(); }

    ad::Var train_loss(const TaskModel& model, std::span<const std::size_t> idx,
                       std::mt19937_64&) const override {
        std::vector<const Matrix*> in;
        std::vector<int> labels;
        for (auto i : idx) {
            in.push_back(&train_x_[i]);
            labels.push_back(train_y_[i]);
        }
        return ad::cross_entropy(model.forward(model.prepare(in)).result, labels);
    }

    double validation_loss(const TaskModel& model) const override {
        double total = 0.0;
        for_chunks(val_x_.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in;
            std::vector<int> labels(val_y_.begin() + static_cast<std::ptrdiff_t>(a),
                                    val_y_.begin() + static_cast<std::ptrdiff_t>(b));
            for (std::size_t k = a; k < b; ++k) in.push_back(&val_x_[k]);
            total += ad::cross_entropy(model.forward(model.prepare(in)).result, labels)->value(0, 0) *
                     static_cast<double>(b - a);
        });
        return total / static_cast<double>(val_x_.size());
    }

    TestOutcome test(const TaskModel& model) const override {
        std::vector<Index> predicted;
        for_chunks(test_x_.size(), [&](std::size_t a, std::size_t b) {
            std::vector<const Matrix*> in;
            for (std::size_t k = a; k < b; ++k) in.push_back(&test_x_[k]);
            const Matrix scores = model.forward(model.prepare(in)).result->value;
            for (Index r = 0; r < scores.rows(); ++r) {
                predicted.push_back(heads::predicted_class(scores.row(r).transpose()));
            }
        });
        TestOutcome t;
        t.metrics = heads::evaluate_classification(predicted, test_y_);
        return t;
    }

    std::vector<const Matrix*> probe_windows(std::size_t n) const override {
        std::vector<const Matrix*> out;
        for (auto i : spaced(test_x_.size(), static_cast<Index>(n))) out.push_back(&test_x_[i]);
        return out;
    }

private:
    std::vector<Matrix> train_x_, val_x_, test_x_;
    std::vector<int> train_y_, val_y_, test_y_;
};

// ---------------------------------------------------------------------------

std::vector<Matrix> snapshot(const nn::ParameterList& params) {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (const auto* p : params) out.push_back(p->var->value);
    return out;
}

void restore(const nn::ParameterList& params, const std::vector<Matrix>& state) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->var->value = state[i];
}

struct Trained {
    std::unique_ptr<TaskModel> model;
    LearningRateTrial trial;
};

Trained train_one(const ExperimentConfig& config, const heads::TaskConfig& task,
                  const TaskData& data, double lr) {
    Trained out;
    out.model = std::make_unique<TaskModel>(config, task, data.channels());
    auto params = out.model->parameters();
    nn::Adam adam(params, {lr});
    std::mt19937_64 rng(config.seed ^ kShuffleSalt);
    LearningRateTrial& trial = out.trial;
    trial.learning_rate = lr;
    trial.initial_validation_loss = data.validation_loss(*out.model);
    double best = trial.initial_validation_loss;
    auto best_state = snapshot(params);
    if (!std::isfinite(best)) {
        trial.status = "diverged";
        trial.validation_loss = best;
        return out;
    }
    std::vector<std::size_t> order(data.train_size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto batch = static_cast<std::size_t>(config.optimizer.batch_size);
    std::size_t steps = (order.size() + batch - 1) / batch;
    if (config.optimizer.max_steps_per_epoch) {
        steps = std::min(steps, static_cast<std::size_t>(*config.optimizer.max_steps_per_epoch));
    }
    Index stale = 0;
    for (Index epoch = 1; epoch <= config.optimizer.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        trial.epochs = epoch;
        bool diverged = false;
        for (std::size_t s = 0; s < steps && !diverged; ++s) {
            const std::size_t a = s * batch;
            const std::size_t b = std::min(order.size(), a + batch);
            adam.zero_grad();
            const ad::Var loss = data.train_loss(
                *out.model, std::span<const std::size_t>(order.data() + a, b - a), rng);
            if (!std::isfinite(loss->value(0, 0))) {
                diverged = true;
                break;
            }
            ad::backward(loss);
            adam.step();
        }
        const double val = diverged ? std::numeric_limits<double>::quiet_NaN()
                                    : data.validation_loss(*out.model);
        if (!std::isfinite(val)) {
            trial.status = "diverged";
            break;
        }
        if (val < best) {
            best = val;
            trial.best_epoch = epoch;
            best_state = snapshot(params);
            stale = 0;
        } else if (++stale >= config.optimizer.patience) {
            break;
        }
    }
    restore(params, best_state);
    trial.validation_loss = best;
    return out;
}

Evaluation run_setting(const ExperimentConfig& config, const heads::TaskConfig& task,
                       const TaskData& data) {
    Evaluation ev;
    std::unique_ptr<TaskModel> chosen;
    bool chosen_ok = false;
    double chosen_loss = std::numeric_limits<double>::infinity();
    for (double lr : config.optimizer.learning_rates) {
        Trained t = train_one(config, task, data, lr);
        ev.trials.push_back(t.trial);
        const bool ok = t.trial.status == "ok";
        const bool better = !chosen || (ok && !chosen_ok) ||
                            (ok == chosen_ok && t.trial.validation_loss < chosen_loss);
        if (better) {
            chosen = std::move(t.model);
            chosen_ok = ok;
            chosen_loss = t.trial.validation_loss;
            ev.learning_rate = lr;
        }
    }
    ev.status = chosen_ok ? "ok" : "diverged";
    const auto params = chosen->parameters();
    ev.total_parameters = nn::count(params);
    ev.trainable_parameters = nn::count_trainable(params);

    TestOutcome outcome = data.test(*chosen);
    ev.metrics = outcome.metrics;
    ev.diagnostics = outcome.diagnostics;

    if (config.alignment || config.export_embeddings) {
        const auto windows = data.probe_windows(16);
        const auto out = chosen->forward(chosen->prepare(windows), true);
        const Matrix text = chosen->bank()
                                ? chosen->bank()->vectors
                                : zoo::random_prototype_bank(config.prototype_bank_size,
                                                             config.d_model, config.seed ^ kBankSalt)
                                      .vectors;
        if (config.alignment) {
            diag::AlignmentOptions opt;
            opt.k = std::min<Index>(10, out.pre->rows() - 1);
            opt.seed = config.seed;
            ev.alignment = diag::alignment_report(*out.pre, *out.post, text, std::nullopt, opt);
        }
        if (config.export_embeddings) {
            std::filesystem::create_directories(config.output_dir);
            const std::vector<diag::EmbeddingSet> sets{
                {"ts_pre", *out.pre}, {"ts_post", *out.post}, {"text", text}};
            std::string stem = config.dataset.path.stem().string() + "_" +
                               std::string(zoo::variant_name(config.variant.kind)) + "_" +
                               config_digest(config);
            if (task.horizon) stem += "_h" + std::to_string(*task.horizon);
            if (task.mask_ratio) stem += "_r" + std::to_string(static_cast<int>(std::lround(*task.mask_ratio * 1000)));
            diag::export_embeddings(sets, config.output_dir / (stem + "_embeddings.csv"));
        }
    }
    return ev;
}

std::unique_ptr<TaskData> make_data(const ExperimentConfig& config, const heads::TaskConfig& task) {
    switch (task.task) {
        case TaskKind::forecast:
            return std::make_unique<ForecastData>(core::load_dataset(config.dataset.path, config.dataset.schema),
                                                  config, *task.horizon);
        case TaskKind::impute:
            return std::make_unique<ImputeData>(core::load_dataset(config.dataset.path, config.dataset.schema),
                                                config, *task.mask_ratio);
        case TaskKind::anomaly:
            return std::make_unique<AnomalyData>(
                core::load_anomaly_dataset(config.dataset.path, *config.dataset.labels_path), config, task);
        case TaskKind::classify:
            return std::make_unique<ClassifyData>(core::load_classification_dataset(config.dataset.path),
                                                  config, *task.num_classes);
    }
    throw ConfigError("unknown task");
}

json setting_json(const heads::TaskConfig& task) {
    json s = json::object();
    if (task.horizon) s["horizon"] = *task.horizon;
    if (task.mask_ratio) s["mask_ratio"] = *task.mask_ratio;
    if (task.anomaly_ratio) {
        s["anomaly_ratio"] = *task.anomaly_ratio;
        s["point_adjust"] = task.point_adjust;
    }
    if (task.num_classes) s["num_classes"] = *task.num_classes;
    return s;
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.begin(), v.end()); }

}  // namespace

json to_json(const diag::ResidualDiagnostics& d) {
    return {{"dw", d.dw}, {"acf", vector_json(d.acf)}, {"band", d.band}, {"n", d.n},
            {"aggregation", d.aggregation}};
}

json to_json(const diag::AlignmentReport& r) {
    return {{"centroid_shift_before", r.centroid_shift_before},
            {"centroid_shift_after", r.centroid_shift_after},
            {"variance_profile",
             {{"pre_std", vector_json(r.variance_profile.pre_std)},
              {"post_std", vector_json(r.variance_profile.post_std)},
              {"text_std", vector_json(r.variance_profile.text_std)},
              {"post_over_pre", vector_json(r.variance_profile.post_over_pre)}}},
            {"knn_jaccard", r.knn_jaccard ? json(*r.knn_jaccard) : json(nullptr)},
            {"k", r.k},
            {"w1_sliced", r.w1_sliced},
            {"lipschitz_K", r.lipschitz_K},
            {"bound_holds", r.bound_holds},
            {"bound_lhs", r.bound_lhs},
            {"bound_rhs", r.bound_rhs},
            {"bound_samples", r.bound_samples}};
}

json to_json(const RunResult& r, bool include_wall_clock) {
    json evaluations = json::array();
    for (const auto& e : r.evaluations) {
        json trials = json::array();
        for (const auto& t : e.trials) {
            trials.push_back({{"learning_rate", t.learning_rate},
                              {"initial_validation_loss", t.initial_validation_loss},
                              {"validation_loss", t.validation_loss},
                              {"epochs", t.epochs},
                              {"best_epoch", t.best_epoch},
                              {"status", t.status}});
        }
        evaluations.push_back({{"setting", e.setting},
                               {"metrics", e.metrics},
                               {"diagnostics", e.diagnostics ? to_json(*e.diagnostics) : json(nullptr)},
                               {"alignment", e.alignment ? to_json(*e.alignment) : json(nullptr)},
                               {"learning_rate", e.learning_rate},
                               {"lr_search", trials},
                               {"status", e.status},
                               {"parameters",
                                {{"total", e.total_parameters}, {"trainable", e.trainable_parameters}}}});
    }
    json j{{"config_digest", r.config_digest},
           {"config", r.config},
           {"dataset", r.dataset},
           {"variant", r.variant},
           {"seed", r.seed},
           {"evaluations", evaluations},
           {"status", r.status},
           {"normalization", r.normalization}};
    if (include_wall_clock) j["wall_clock_seconds"] = r.wall_clock_seconds;
    return j;
}

RunResult run_experiment(const ExperimentConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    config.validate();
    RunResult result;
    result.config_digest = config_digest(config);
    result.config = to_json(config);
    result.dataset = config.dataset.path.stem().string();
    result.variant = std::string(zoo::variant_name(config.variant.kind));
    result.seed = config.seed;
    result.normalization = kNormalization;
    for (const auto& task : config.task_configs()) {
        const auto data = make_data(config, task);
        Evaluation ev = run_setting(config, task, *data);
        ev.setting = setting_json(task);
        if (ev.status != "ok") result.status = ev.status;
        result.evaluations.push_back(std::move(ev));
    }
    result.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

std::filesystem::path write_result(const RunResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto path = dir / (result.dataset + "_" + result.variant + "_" + result.config_digest + ".json");
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << to_json(result).dump(2) << '\n';
        if (!out) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
    return path;
}

}  // namespace tslab::harness
