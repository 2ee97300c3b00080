#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices. Every node
// owns its value; gradients flow through closures captured at construction.
// Batched token tensors use a "stacked blocks" layout: a (B*S) x D matrix
// whose rows b*S .. b*S+S-1 are the S tokens of sample b.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace tslab::ad {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Matrix value;
    Matrix grad;  ///< empty until something flows in
    bool requires_grad = false;
    std::vector<Var> inputs;
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
    Index rows() const { return value.rows(); }
    Index cols() const { return value.cols(); }
};

/// Graph input that never receives gradients.
Var constant(Matrix value);
/// Leaf that collects gradients (parameters).
Var leaf(Matrix value);

/// Runs the reverse sweep from a 1x1 root.
void backward(const Var& root);

// Algebra
Var matmul(const Var& a, const Var& b);
/// a * b^T, the natural form for weights stored as (out x in).
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// x + 1 * bias, bias is 1 x cols.
Var add_row_bias(const Var& x, const Var& bias);

// Activations
Var gelu(const Var& x);
Var relu(const Var& x);

/// Row-wise LayerNorm with learnable gain/bias (each 1 x D).
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Multi-head scaled dot-product attention applied independently to every
/// block of `seq_len` rows. q, k, v are (B*S) x D.
Var attention(const Var& q, const Var& k, const Var& v, Index seq_len, Index heads, bool causal);

// Block reshaping
/// (B*S) x D -> B x (S*D); row b is the concatenation of its S token rows.
Var flatten_blocks(const Var& x, Index block);
/// (B*S) x D -> B x D, mean over each block's rows.
Var block_mean(const Var& x, Index block);
/// Interleaves blocks: per sample, a's block rows followed by b's block rows.
Var concat_blocks(const Var& a, Index a_block, const Var& b, Index b_block);
/// Per block: W * X_b + c * 1^T. W is m x n, c is m x 1, X is (B*n) x D.
Var block_left_affine(const Var& w, const Var& c, const Var& x, Index block);
/// x + table[0:S] tiled over blocks; table has at least `block` rows.
Var add_positional(const Var& x, const Var& table, Index block);
/// Rows of `table` selected by index.
Var gather_rows(const Var& table, const std::vector<Index>& rows);

// Losses (1x1 outputs)
Var mse(const Var& pred, const Var& target);
/// sum(w * (p - t)^2) / sum(w); zero with zero gradient when sum(w) == 0.
Var weighted_mse(const Var& pred, const Var& target, const Matrix& weights);
/// Mean softmax cross-entropy of B x C logits against integer labels.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);
/// Sum of all entries.
Var sum(const Var& x);

}  // namespace tslab::ad
