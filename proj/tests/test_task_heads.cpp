#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "tslab/error.hpp"
#include "tslab/task_heads.hpp"

using namespace tslab;
using namespace tslab::heads;
using Eigen::MatrixXd;

TEST_CASE("task config validation") {
    TaskConfig f;
    f.horizon = 96;
    CHECK_NOTHROW(f.validate());
    f.mask_ratio = 0.25;
    CHECK_THROWS_AS(f.validate(), ConfigError);

    TaskConfig none;
    CHECK_THROWS_AS(none.validate(), ConfigError);

    TaskConfig c;
    c.task = TaskKind::classify;
    c.num_classes = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.num_classes = 2;
    CHECK_NOTHROW(c.validate());

    TaskConfig a;
    a.task = TaskKind::anomaly;
    a.anomaly_ratio = 100.0;
    CHECK_THROWS_AS(a.validate(), ConfigError);
    a.anomaly_ratio = 1.0;
    CHECK_NOTHROW(a.validate());

    CHECK(parse_task("impute") == TaskKind::impute);
    CHECK_THROWS_AS(parse_task("segment"), ConfigError);
}

TEST_CASE("forecast head with zero weights returns the denormalized bias") {
    std::mt19937_64 rng(1);
    ForecastHead head(11, 8, 96, rng);
    head.proj().weight().var->value.setZero();
    Eigen::VectorXd b = testing::gaussian(96, 1, rng);
    head.proj().bias()->var->value = b.transpose();
    const std::vector<MatrixXd> channels(7, MatrixXd::Zero(11, 8));
    std::vector<PatchStats> stats;
    for (int v = 0; v < 7; ++v) stats.push_back({0.5 * v, 1.0 + v, false});
    const MatrixXd pred = head.predict(channels, stats);
    REQUIRE(pred.rows() == 96);
    REQUIRE(pred.cols() == 7);
    for (int v = 0; v < 7; ++v) {
        CHECK((pred.col(v) - (b * (1.0 + v)).array().matrix() - Eigen::VectorXd::Constant(96, 0.5 * v)).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK_THROWS(head.predict(channels, std::span<const PatchStats>(stats).first(6)));

    PatchStats guarded{3.0, 0.0, true};
    const MatrixXd flat = head.predict(std::span<const MatrixXd>(channels).first(1), std::span<const PatchStats>(&guarded, 1));
    CHECK((flat.array() - 3.0).abs().maxCoeff() == 0.0);
}

TEST_CASE("reconstruct head shape") {
    std::mt19937_64 rng(2);
    ReconstructHead head(5, 4, 48, rng);
    const std::vector<MatrixXd> channels(3, MatrixXd::Ones(5, 4));
    const std::vector<PatchStats> stats(3);
    const MatrixXd out = head.predict(channels, stats);
    CHECK(out.rows() == 48);
    CHECK(out.cols() == 3);
}

TEST_CASE("denormalization scales squared error by the variance") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const MatrixXd p = testing::gaussian(1, 24, rng), t = testing::gaussian(1, 24, rng);
        const PatchStats s{2.0 * trial - 7.0, 0.1 + trial, false};
        const MatrixXd dp = denormalize_rows(ad::constant(p), std::span<const PatchStats>(&s, 1))->value;
        const MatrixXd dt = denormalize_rows(ad::constant(t), std::span<const PatchStats>(&s, 1))->value;
        const double normalized = *evaluate(p, t, TaskKind::forecast).mse;
        const double raw = *evaluate(dp, dt, TaskKind::forecast).mse;
        CHECK(raw == doctest::Approx(s.std * s.std * normalized).epsilon(1e-10));
    }
}

TEST_CASE("classify head") {
    std::mt19937_64 rng(4);
    for (Index c : {2, 3, 7}) {
        ClassifyHead head(6, 2, 4, c, rng);
        const std::vector<MatrixXd> channels{testing::gaussian(6, 4, rng), testing::gaussian(6, 4, rng)};
        CHECK(head.scores(channels).size() == c);
        head.proj().weight().var->value.setZero();
        head.proj().bias()->var->value.setZero();
        const Eigen::VectorXd s = head.scores(channels);
        CHECK(s.isZero(0.0));
        CHECK(predicted_class(s) == 0);
    }
    CHECK_THROWS_AS(ClassifyHead(6, 2, 4, 1, rng), ConfigError);

    // Pooling is a mean over tokens followed by channel concatenation.
    ClassifyHead head(3, 2, 2, 2, rng);
    const std::vector<MatrixXd> channels{testing::gaussian(3, 2, rng), testing::gaussian(3, 2, rng)};
    Eigen::VectorXd pooled(4);
    pooled << channels[0].colwise().mean().transpose(), channels[1].colwise().mean().transpose();
    const MatrixXd w = head.proj().weight().var->value;
    const Eigen::VectorXd expected = w * pooled + head.proj().bias()->var->value.transpose();
    CHECK((head.scores(channels) - expected).cwiseAbs().maxCoeff() < 1e-12);

    Eigen::VectorXd tie(4);
    tie << 0.1, 0.9, 0.9, -1;
    CHECK(predicted_class(tie) == 1);
}

TEST_CASE("imputation loss ignores observed cells") {
    std::mt19937_64 rng(5);
    const ad::Var pred = ad::leaf(testing::gaussian(4, 10, rng));
    const MatrixXd target = testing::gaussian(4, 10, rng);
    const auto mask = core::make_imputation_mask(4, 10, 0.25, rng).mask;
    const ad::Var loss = imputation_loss(pred, target, mask);
    ad::backward(loss);
    double se = 0.0;
    for (Index r = 0; r < 4; ++r) {
        for (Index c = 0; c < 10; ++c) {
            if (mask(r, c)) {
                CHECK(pred->grad(r, c) == 0.0);
            } else {
                CHECK(pred->grad(r, c) != 0.0);
                se += std::pow(pred->value(r, c) - target(r, c), 2);
            }
        }
    }
    CHECK(loss->value(0, 0) == doctest::Approx(se / 10.0));

    const ad::Var p2 = ad::leaf(testing::gaussian(2, 3, rng));
    const ad::Var none = imputation_loss(p2, MatrixXd::Zero(2, 3), core::MaskMatrix::Ones(2, 3));
    ad::backward(none);
    CHECK(none->value(0, 0) == 0.0);
    CHECK((p2->grad.size() == 0 || p2->grad.isZero(0.0)));

    const auto m = evaluate_masked(pred->value, target, mask);
    CHECK(*m.mse == doctest::Approx(se / 10.0));
}

TEST_CASE("percentile and threshold") {
    std::vector<double> errors;
    for (int i = 1; i <= 100; ++i) errors.push_back(i);
    // Linear interpolation oracle: rank 0.99 * 99 = 98.01 sits between 99 and 100.
    const double expected = 99.0 + 0.01 * (100.0 - 99.0);
    const double tau = anomaly_threshold({}, errors, 1.0);
    CHECK(tau == doctest::Approx(expected));
    const auto flags = flag_anomalies(errors, tau);
    CHECK(std::accumulate(flags.begin(), flags.end(), 0) == 1);
    CHECK(flags.back() == 1);

    const std::vector<double> first(errors.begin(), errors.begin() + 30), rest(errors.begin() + 30, errors.end());
    CHECK(anomaly_threshold(first, rest, 1.0) == tau);

    const std::vector<double> zeros(50, 0.0);
    const double zero_tau = anomaly_threshold(zeros, zeros, 5.0);
    CHECK(zero_tau == 0.0);
    const auto none = flag_anomalies(zeros, zero_tau);
    CHECK(std::accumulate(none.begin(), none.end(), 0) == 0);

    CHECK_THROWS_AS(anomaly_threshold({}, {}, 1.0), ConfigError);
    CHECK_THROWS_AS(anomaly_threshold(zeros, zeros, 0.0), ConfigError);
    CHECK(percentile({3, 1, 2}, 50) == 2.0);
    CHECK(percentile({1, 2}, 25) == 1.25);
}

TEST_CASE("step energy") {
    MatrixXd p(2, 2), t(2, 2);
    p << 1, 2, 3, 4;
    t << 1, 0, 0, 4;
    const Eigen::VectorXd e = step_energy(p, t);
    CHECK(e(0) == 2.0);
    CHECK(e(1) == 4.5);
}

TEST_CASE("detection metrics") {
    const std::vector<int> labels{0, 1, 1, 0};
    const std::vector<int> flags{0, 1, 0, 0};
    const auto plain = evaluate_detection(flags, labels, false);
    CHECK(*plain.precision == 1.0);
    CHECK(*plain.recall == 0.5);
    CHECK(*plain.f1 == doctest::Approx(2.0 / 3.0));
    const auto adjusted = evaluate_detection(flags, labels, true);
    CHECK(*adjusted.recall == 1.0);
    CHECK(*adjusted.f1 == 1.0);
    CHECK(point_adjust(flags, labels) == std::vector<int>{0, 1, 1, 0});

    const auto empty = evaluate_detection(std::vector<int>{0, 0, 0, 0}, labels, true);
    CHECK(*empty.precision == 0.0);
    CHECK(*empty.f1 == 0.0);

    std::mt19937_64 rng(6);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> l(40), f(40);
        for (int i = 0; i < 40; ++i) {
            l[static_cast<std::size_t>(i)] = coin(rng);
            f[static_cast<std::size_t>(i)] = coin(rng);
        }
        for (bool adjust : {false, true}) {
            const auto m = evaluate_detection(f, l, adjust);
            if (*m.precision + *m.recall > 0) {
                CHECK(std::abs(*m.f1 - 2 * *m.precision * *m.recall / (*m.precision + *m.recall)) <= 1e-9);
            }
        }
    }
    CHECK_THROWS_AS(evaluate_detection(flags, std::vector<int>{0, 1}, false), ConfigError);
}

TEST_CASE("regression and classification metrics") {
    std::mt19937_64 rng(7);
    const MatrixXd x = testing::gaussian(5, 3, rng);
    const auto same = evaluate(x, x, TaskKind::forecast);
    CHECK(*same.mse == 0.0);
    CHECK(*same.mae == 0.0);
    MatrixXd y = x;
    y(0, 0) += 2.0;
    const auto off = evaluate(x, y, TaskKind::forecast);
    CHECK(*off.mse == doctest::Approx(4.0 / 15.0));
    CHECK(*off.mae == doctest::Approx(2.0 / 15.0));
    CHECK_THROWS_AS(evaluate(x, MatrixXd::Zero(3, 5), TaskKind::forecast), ConfigError);

    const std::vector<Index> predicted{0, 1, 1, 2};
    const std::vector<int> labels{0, 1, 2, 2};
    CHECK(*evaluate_classification(predicted, labels).accuracy == 0.75);
}

TEST_CASE("metric record json") {
    MetricRecord m;
    m.task = "forecast";
    m.mse = 0.25;
    m.mae = 0.5;
    m.horizon = 96;
    nlohmann::json j = m;
    CHECK(j.at("f1").is_null());
    CHECK(j.at("horizon") == 96);
    const auto back = j.get<MetricRecord>();
    CHECK(back.mse == m.mse);
    CHECK(back.horizon == m.horizon);
    CHECK_FALSE(back.accuracy);
}
