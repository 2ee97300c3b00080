#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <numbers>
#include <set>

#include "support.hpp"
#include "tslab/timeseries_core.hpp"

using namespace tslab;
using namespace tslab::core;
using testing::TempDir;
using testing::write_text;

TEST_CASE("load_dataset reads a dated CSV") {
    TempDir dir("core");
    write_text(dir / "s.csv", "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n"
                              "2020-01-01 02:00:00,5,6.5\n");
    const auto s = load_dataset(dir / "s.csv");
    CHECK(s.length() == 3);
    CHECK(s.variates() == 2);
    CHECK(s.columns == std::vector<std::string>{"a", "b"});
    REQUIRE(s.timestamps);
    CHECK(s.timestamps->at(2) == "2020-01-01 02:00:00");
    CHECK(s.values(2, 1) == 6.5);
    CHECK(s.values(1, 0) == 3.0);
}

TEST_CASE("load_dataset reports the offending cell") {
    TempDir dir("core");
    SUBCASE("blank cell") {
        write_text(dir / "s.csv", "date,a,b\n2020-01-01,1,2\n2020-01-02,,4\n2020-01-03,5,6\n");
        try {
            load_dataset(dir / "s.csv");
            FAIL("expected an ingestion error");
        } catch (const IngestionError& e) {
            CHECK(e.row() == 3);
            CHECK(e.col() == 1);
        }
    }
    SUBCASE("non-finite value") {
        write_text(dir / "s.csv", "a,b\n1,2\n3,inf\n");
        try {
            load_dataset(dir / "s.csv");
            FAIL("expected an ingestion error");
        } catch (const IngestionError& e) {
            CHECK(e.row() == 3);
            CHECK(e.col() == 1);
        }
    }
    SUBCASE("ragged row") {
        write_text(dir / "s.csv", "a,b\n1,2\n3\n");
        try {
            load_dataset(dir / "s.csv");
            FAIL("expected an ingestion error");
        } catch (const IngestionError& e) {
            CHECK(e.row() == 3);
        }
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_dataset(dir / "absent.csv"), IngestionError);
    }
}

TEST_CASE("anomaly and classification loaders") {
    TempDir dir("core");
    write_text(dir / "d.csv", "x\n1\n2\n3\n");
    write_text(dir / "l.csv", "label\n0\n1\n0\n");
    const auto a = load_anomaly_dataset(dir / "d.csv", dir / "l.csv");
    REQUIRE(a.point_labels);
    CHECK(*a.point_labels == std::vector<int>{0, 1, 0});

    write_text(dir / "bad.csv", "label\n0\n2\n0\n");
    CHECK_THROWS_AS(load_anomaly_dataset(dir / "d.csv", dir / "bad.csv"), IngestionError);

    write_text(dir / "m.csv", "path,label\nd.csv,1\nd.csv,0\n");
    const auto samples = load_classification_dataset(dir / "m.csv");
    REQUIRE(samples.size() == 2);
    CHECK(samples[0].class_label == 1);
    CHECK(samples[1].length() == 3);
}

TEST_CASE("window counts") {
    const Matrix values = Matrix::Random(10, 2);
    const auto w = make_windows(values, RowRange{0, 10}, 4, 2, 1);
    CHECK(w.size() == 5);
    CHECK(w.inputs[4].isApprox(values.middleRows(4, 4)));
    CHECK(w.targets[4].isApprox(values.middleRows(8, 2)));

    SeriesTensor s;
    s.values = values;
    CHECK_THROWS_AS(make_windows(s, 10, 1, 1), ConfigError);

    // Enumeration oracle: count start offsets whose span fits.
    for (Index rows = 0; rows <= 40; ++rows) {
        for (Index l = 1; l <= 12; ++l) {
            for (Index n = 0; n <= 5; ++n) {
                for (Index stride = 1; stride <= 4; ++stride) {
                    Index expected = 0;
                    for (Index start = 0; start + l + n <= rows; start += stride) ++expected;
                    CHECK_EQ(window_count(rows, l, n, stride), expected);
                }
            }
        }
    }
}

TEST_CASE("splits are chronological and disjoint") {
    const auto plan = fractional_split(1000, {});
    CHECK(plan.ranges[0].begin == 0);
    CHECK(plan.ranges[0].end == 700);
    CHECK(plan.ranges[1].end == 800);
    CHECK(plan.ranges[2].end == 1000);
    SeriesTensor s;
    s.values = Matrix::Random(1000, 1);
    const auto w = make_windows(s, 24, 12, 1);
    CHECK(w.train.origins.back() + 24 + 12 <= w.validation.origins.front());
    CHECK(w.validation.origins.back() + 24 + 12 <= w.test.origins.front());
    CHECK(w.test.origins.back() + 36 <= 1000);

    const auto ett = ett_split(17420, DatasetSchema::ett_hour, 336);
    CHECK(ett.ranges[0].end == 8640);
    CHECK(ett.ranges[1].begin == 8640 - 336);
    CHECK(ett.ranges[2].begin == 11520 - 336);
    CHECK(ett.ranges[2].end == 14400);
    CHECK_THROWS_AS(ett_split(1000, DatasetSchema::ett_hour, 96), ConfigError);
}

TEST_CASE("patch count") {
    CHECK(patch_count(96, 16, 8) == 11);
    CHECK(patch_count(20, 20, 7) == 1);
    CHECK(patch_count(10, 4, 2) == 4);
    CHECK_THROWS_AS(patch_count(10, 11, 1), ConfigError);
    CHECK_THROWS_AS(patch_count(10, 4, 0), ConfigError);
    for (Index l = 1; l <= 64; ++l) {
        for (Index p = 1; p <= l; ++p) {
            for (Index stride = 1; stride <= l; ++stride) {
                Index expected = 0;
                for (Index start = 0; start + p <= l; start += stride) ++expected;
                REQUIRE(patch_count(l, p, stride) == expected);
            }
        }
    }
}

TEST_CASE("patch features cover the expected steps") {
    Vector x(10);
    for (Index i = 0; i < 10; ++i) x(i) = static_cast<double>(i * i);
    const auto pf = patch_features(x, 4, 2);
    REQUIRE(pf.features.rows() == 4);
    CHECK(pf.features.cols() == 6);
    for (Index t = 0; t < 4; ++t) {
        const Vector seg = x.segment(2 * t, 4);
        CHECK(pf.features(t, 4) == doctest::Approx(seg.mean()));
        const Vector restored = denormalize(pf.features.row(t).head(4).transpose(), pf.stats[static_cast<std::size_t>(t)]);
        CHECK((restored - seg).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("patchify is channel independent") {
    std::mt19937_64 rng(3);
    Matrix w = testing::gaussian(32, 3, rng);
    const auto embed = PatchEmbedding::random(8, 5, 11);
    const auto before = patchify(w, 8, 4, embed);
    w.col(2).setRandom();
    const auto after = patchify(w, 8, 4, embed);
    REQUIRE(before.size() == 3);
    CHECK(before[0].tokens == after[0].tokens);
    CHECK(before[1].tokens == after[1].tokens);
    CHECK(before[2].tokens != after[2].tokens);
    CHECK(before[1].tokens.rows() == 7);
    CHECK(before[1].tokens.cols() == 5);
    CHECK(before[1].channel_id == 1);
}

TEST_CASE("instance normalization") {
    Vector x(3);
    x << 1, 2, 3;
    const auto n = instance_normalize(x);
    CHECK(n.stats.mean == 2.0);
    CHECK(n.stats.std == doctest::Approx(std::sqrt(2.0 / 3.0)));
    CHECK(std::abs(n.values.mean()) < 1e-15);
    CHECK(std::sqrt(n.values.squaredNorm() / 3.0) == doctest::Approx(1.0));
    CHECK_FALSE(n.stats.guarded);

    const Vector flat = Vector::Constant(3, 5.0);
    const auto g = instance_normalize(flat);
    CHECK(g.stats.guarded);
    CHECK(g.values.isZero());
    CHECK(denormalize(g.values, g.stats) == flat);

    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const Vector v = testing::gaussian(16, 1, rng, 10.0);
        const auto r = instance_normalize(v);
        CHECK((denormalize(r.values, r.stats) - v).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("additive decomposition") {
    const Matrix c = Matrix::Constant(48, 2, 3.5);
    const auto d = decompose_additive(c, 12, 5);
    CHECK((d.trend.array() - 3.5).abs().maxCoeff() < 1e-12);
    CHECK(d.seasonal.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(d.residual.cwiseAbs().maxCoeff() < 1e-12);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix x = testing::gaussian(64, 3, rng, 4.0);
        const auto t = decompose_additive(x, 7, 9);
        const Matrix sum = t.trend + t.seasonal + t.residual;
        CHECK((sum - x).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, x.cwiseAbs().maxCoeff()));
    }

    // Period 24 sinusoid, kernel 25: variance split computed directly.
    Matrix s(240, 1);
    for (Index t = 0; t < 240; ++t) s(t, 0) = std::sin(2 * std::numbers::pi * static_cast<double>(t) / 24.0);
    const auto sd = decompose_additive(s, 24, 25);
    const double total = (s.array() - s.mean()).square().sum();
    const double seasonal = (sd.seasonal.array() - sd.seasonal.mean()).square().sum();
    CHECK(seasonal / total >= 0.9);

    CHECK_THROWS_AS(decompose_additive(c, 12, 4), ConfigError);
    CHECK_THROWS_AS(decompose_additive(c, 12, 49), ConfigError);
    CHECK_THROWS_AS(decompose_additive(c, 0, 5), ConfigError);
}

TEST_CASE("imputation masks") {
    std::mt19937_64 rng(1);
    CHECK(make_imputation_mask(8, 1, 0.25, rng).missing() == 2);
    CHECK(make_imputation_mask(1000, 7, 0.375, rng).missing() == 2625);
    for (double r : {0.125, 0.25, 0.375, 0.5}) {
        const auto m = make_imputation_mask(96, 7, r, rng);
        CHECK(m.missing() == std::llround(r * 96 * 7));
    }
    std::mt19937_64 a(99), b(99);
    CHECK(make_imputation_mask(50, 4, 0.5, a).mask == make_imputation_mask(50, 4, 0.5, b).mask);
    CHECK_THROWS_AS(make_imputation_mask(8, 1, 0.0, rng), ConfigError);
    CHECK_THROWS_AS(make_imputation_mask(8, 1, 1.0, rng), ConfigError);
}

TEST_CASE("standardizer uses only the fitted rows") {
    Matrix v(6, 1);
    v << 1, 3, 1, 3, 100, -100;
    const auto s = Standardizer::fit(v, {0, 4});
    CHECK(s.mean(0) == 2.0);
    CHECK(s.scale(0) == 1.0);
    CHECK(s.inverse(s.transform(v)).isApprox(v));
}
