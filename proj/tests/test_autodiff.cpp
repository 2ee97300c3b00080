#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "tslab/autodiff.hpp"

using namespace tslab;
using ad::Var;
using Eigen::MatrixXd;

namespace {

std::mt19937_64 rng(2024);

Var rand_leaf(Eigen::Index r, Eigen::Index c) { return ad::leaf(testing::gaussian(r, c, rng)); }

/// Scalar read-out with fixed random weights so every output entry matters.
Var readout(const Var& y) {
    std::mt19937_64 w_rng(7);
    const MatrixXd w = testing::gaussian(y->rows(), y->cols(), w_rng);
    return ad::sum(ad::hadamard(y, ad::constant(w)));
}

void check_grad(const Var& x, const std::function<Var()>& f) {
    CHECK(testing::gradient_error(x, f) < 1e-6);
}

}  // namespace

TEST_CASE("algebra gradients") {
    const Var a = rand_leaf(3, 4), b = rand_leaf(4, 2), c = rand_leaf(3, 4), bt = rand_leaf(5, 4);
    check_grad(a, [&] { return readout(ad::matmul(a, b)); });
    check_grad(b, [&] { return readout(ad::matmul(a, b)); });
    check_grad(a, [&] { return readout(ad::matmul_nt(a, bt)); });
    check_grad(bt, [&] { return readout(ad::matmul_nt(a, bt)); });
    check_grad(a, [&] { return readout(ad::add(a, c)); });
    check_grad(c, [&] { return readout(ad::sub(a, c)); });
    check_grad(a, [&] { return readout(ad::hadamard(a, c)); });
    check_grad(a, [&] { return readout(ad::scale(a, -2.5)); });
    const Var bias = rand_leaf(1, 4);
    check_grad(bias, [&] { return readout(ad::add_row_bias(a, bias)); });
    check_grad(a, [&] { return readout(ad::add_row_bias(a, bias)); });
}

TEST_CASE("shared inputs accumulate") {
    const Var a = rand_leaf(2, 2);
    check_grad(a, [&] { return readout(ad::hadamard(a, ad::add(a, a))); });
}

TEST_CASE("activation and normalization gradients") {
    const Var x = rand_leaf(4, 6);
    check_grad(x, [&] { return readout(ad::gelu(x)); });
    check_grad(x, [&] { return readout(ad::relu(x)); });
    const Var g = rand_leaf(1, 6), b = rand_leaf(1, 6);
    check_grad(x, [&] { return readout(ad::layer_norm(x, g, b)); });
    check_grad(g, [&] { return readout(ad::layer_norm(x, g, b)); });
    check_grad(b, [&] { return readout(ad::layer_norm(x, g, b)); });
}

TEST_CASE("attention gradients") {
    const Var q = rand_leaf(6, 4), k = rand_leaf(6, 4), v = rand_leaf(6, 4);
    for (bool causal : {false, true}) {
        check_grad(q, [&] { return readout(ad::attention(q, k, v, 3, 2, causal)); });
        check_grad(k, [&] { return readout(ad::attention(q, k, v, 3, 2, causal)); });
        check_grad(v, [&] { return readout(ad::attention(q, k, v, 3, 2, causal)); });
    }
}

TEST_CASE("attention treats blocks independently") {
    const MatrixXd q = testing::gaussian(6, 4, rng), k = testing::gaussian(6, 4, rng),
                   v = testing::gaussian(6, 4, rng);
    const MatrixXd full = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), 3, 1, false)->value;
    const MatrixXd first = ad::attention(ad::constant(q.topRows(3)), ad::constant(k.topRows(3)),
                                         ad::constant(v.topRows(3)), 3, 1, false)
                               ->value;
    CHECK((full.topRows(3) - first).cwiseAbs().maxCoeff() < 1e-14);
    // Causal: row 0 attends only to itself.
    const MatrixXd causal = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), 3, 1, true)->value;
    CHECK((causal.row(0) - v.row(0)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("block reshaping") {
    const Var x = rand_leaf(6, 2);
    const Var flat = ad::flatten_blocks(x, 3);
    REQUIRE(flat->rows() == 2);
    REQUIRE(flat->cols() == 6);
    CHECK(flat->value(1, 2) == x->value(4, 0));
    check_grad(x, [&] { return readout(ad::flatten_blocks(x, 3)); });

    const Var mean = ad::block_mean(x, 3);
    CHECK(mean->value(1, 1) == doctest::Approx(x->value.block(3, 1, 3, 1).mean()));
    check_grad(x, [&] { return readout(ad::block_mean(x, 3)); });

    const Var y = rand_leaf(4, 2);
    const Var cat = ad::concat_blocks(x, 3, y, 2);
    REQUIRE(cat->rows() == 10);
    CHECK(cat->value.row(5) == x->value.row(3));
    CHECK(cat->value.row(3) == y->value.row(0));
    check_grad(x, [&] { return readout(ad::concat_blocks(x, 3, y, 2)); });
    check_grad(y, [&] { return readout(ad::concat_blocks(x, 3, y, 2)); });

    const Var w = rand_leaf(2, 3), c = rand_leaf(2, 1);
    check_grad(w, [&] { return readout(ad::block_left_affine(w, c, x, 3)); });
    check_grad(c, [&] { return readout(ad::block_left_affine(w, c, x, 3)); });
    check_grad(x, [&] { return readout(ad::block_left_affine(w, c, x, 3)); });

    const Var table = rand_leaf(5, 2);
    check_grad(table, [&] { return readout(ad::add_positional(x, table, 3)); });
    check_grad(table, [&] { return readout(ad::gather_rows(table, {4, 0, 4})); });
}

TEST_CASE("loss gradients") {
    const Var p = rand_leaf(3, 5);
    const MatrixXd t = testing::gaussian(3, 5, rng);
    check_grad(p, [&] { return ad::mse(p, ad::constant(t)); });

    MatrixXd w = MatrixXd::Zero(3, 5);
    w(0, 1) = 1;
    w(2, 4) = 1;
    check_grad(p, [&] { return ad::weighted_mse(p, ad::constant(t), w); });
    const Var zero = ad::weighted_mse(p, ad::constant(t), MatrixXd::Zero(3, 5));
    CHECK(zero->value(0, 0) == 0.0);

    const std::vector<int> labels{4, 0, 2};
    check_grad(p, [&] { return ad::cross_entropy(p, labels); });
    const Var uniform = ad::cross_entropy(ad::constant(MatrixXd::Zero(2, 4)), {0, 3});
    CHECK(uniform->value(0, 0) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("constants receive no gradient") {
    const Var c = ad::constant(MatrixXd::Ones(2, 2));
    const Var l = rand_leaf(2, 2);
    ad::backward(ad::sum(ad::hadamard(c, l)));
    CHECK(c->grad.size() == 0);
    CHECK(l->grad.isApprox(MatrixXd::Ones(2, 2)));
}
