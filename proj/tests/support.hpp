#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>

#include "tslab/autodiff.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("tslab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes a header `a0,a1,...` and the rows of `values`, 17 significant digits.
inline void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& values,
                             const std::string& prefix = "c") {
    std::ofstream out(path);
    out.precision(17);
    for (Eigen::Index c = 0; c < values.cols(); ++c) out << (c ? "," : "") << prefix << c;
    out << '\n';
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        for (Eigen::Index c = 0; c < values.cols(); ++c) out << (c ? "," : "") << values(r, c);
        out << '\n';
    }
}

inline Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                                double stddev = 1.0) {
    std::normal_distribution<double> n(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

/// Worst relative error between the tape gradient of `loss` with respect to
/// `x` and central differences with h = 1e-5 * max(1, |x|).
inline double gradient_error(const tslab::ad::Var& x, const std::function<tslab::ad::Var()>& loss) {
    x->grad.resize(0, 0);
    tslab::ad::backward(loss());
    const Eigen::MatrixXd analytic =
        x->grad.size() ? x->grad : Eigen::MatrixXd::Zero(x->value.rows(), x->value.cols());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x->value.size(); ++i) {
        double& v = x->value.data()[i];
        const double saved = v;
        const double h = 1e-5 * std::max(1.0, std::abs(saved));
        v = saved + h;
        const double up = loss()->value(0, 0);
        v = saved - h;
        const double down = loss()->value(0, 0);
        v = saved;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic.data()[i];
        const double err = std::abs(a - numeric) / std::max({1e-6, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace testing
