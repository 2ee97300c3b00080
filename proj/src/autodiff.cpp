#include "tslab/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace tslab::ad {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

Var make(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    for (const auto& in : inputs) {
        node->requires_grad = node->requires_grad || in->requires_grad;
    }
    if (node->requires_grad) {
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return node;
}

}  // namespace

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Var constant(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return node;
}

Var leaf(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return node;
}

void backward(const Var& root) {
    require(root->value.size() == 1, "backward() needs a scalar root");
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && node->grad.size() != 0) {
            node->backward(*node);
            if (!node->inputs.empty()) {
                // interior node: its gradient is no longer needed
                node->grad.resize(0, 0);
            }
        }
    }
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    require(a->cols() == b->rows(), "matmul shape mismatch");
    return make(a->value * b->value, {a, b}, [](Node& self) {
        const auto& a = self.inputs[0];
        const auto& b = self.inputs[1];
        if (a->requires_grad) a->accumulate(self.grad * b->value.transpose());
        if (b->requires_grad) b->accumulate(a->value.transpose() * self.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    require(a->cols() == b->cols(), "matmul_nt shape mismatch");
    return make(a->value * b->value.transpose(), {a, b}, [](Node& self) {
        const auto& a = self.inputs[0];
        const auto& b = self.inputs[1];
        if (a->requires_grad) a->accumulate(self.grad * b->value);
        if (b->requires_grad) b->accumulate(self.grad.transpose() * a->value);
    });
}

Var add(const Var& a, const Var& b) {
    require(a->rows() == b->rows() && a->cols() == b->cols(), "add shape mismatch");
    return make(a->value + b->value, {a, b}, [](Node& self) {
        for (const auto& in : self.inputs) {
            if (in->requires_grad) in->accumulate(self.grad);
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require(a->rows() == b->rows() && a->cols() == b->cols(), "sub shape mismatch");
    return make(a->value - b->value, {a, b}, [](Node& self) {
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(-self.grad);
    });
}

Var hadamard(const Var& a, const Var& b) {
    require(a->rows() == b->rows() && a->cols() == b->cols(), "hadamard shape mismatch");
    return make(a->value.cwiseProduct(b->value), {a, b}, [](Node& self) {
        const auto& a = self.inputs[0];
        const auto& b = self.inputs[1];
        if (a->requires_grad) a->accumulate(self.grad.cwiseProduct(b->value));
        if (b->requires_grad) b->accumulate(self.grad.cwiseProduct(a->value));
    });
}

Var scale(const Var& a, double s) {
    return make(a->value * s, {a}, [s](Node& self) { self.inputs[0]->accumulate(self.grad * s); });
}

Var add_row_bias(const Var& x, const Var& bias) {
    require(bias->rows() == 1 && bias->cols() == x->cols(), "bias shape mismatch");
    Matrix out = x->value.rowwise() + bias->value.row(0);
    return make(std::move(out), {x, bias}, [](Node& self) {
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
        if (self.inputs[1]->requires_grad) {
            self.inputs[1]->accumulate(self.grad.colwise().sum());
        }
    });
}

Var gelu(const Var& x) {
    Matrix out = x->value.unaryExpr(
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
    return make(std::move(out), {x}, [](Node& self) {
        const auto& x = self.inputs[0];
        Matrix d = x->value.unaryExpr([](double v) {
            return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
        });
        x->accumulate(self.grad.cwiseProduct(d));
    });
}

Var relu(const Var& x) {
    return make(x->value.cwiseMax(0.0), {x}, [](Node& self) {
        const auto& x = self.inputs[0];
        x->accumulate((x->value.array() > 0.0).select(self.grad, 0.0));
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Index n = x->rows();
    const Index d = x->cols();
    require(gamma->rows() == 1 && gamma->cols() == d && beta->rows() == 1 && beta->cols() == d,
            "layer_norm parameter shape mismatch");
    Eigen::VectorXd inv_std(n);
    Matrix xhat(n, d);
    for (Index r = 0; r < n; ++r) {
        const double mu = x->value.row(r).mean();
        const double var = (x->value.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x->value.row(r).array() - mu) * inv_std(r);
    }
    Matrix out = (xhat.array().rowwise() * gamma->value.row(0).array()).rowwise() +
                 beta->value.row(0).array();
    return make(std::move(out), {x, gamma, beta},
                [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                    const auto& x = self.inputs[0];
                    const auto& gamma = self.inputs[1];
                    const auto& beta = self.inputs[2];
                    if (gamma->requires_grad) {
                        gamma->accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
                    }
                    if (beta->requires_grad) beta->accumulate(self.grad.colwise().sum());
                    if (x->requires_grad) {
                        const Matrix dxhat =
                            self.grad.array().rowwise() * gamma->value.row(0).array();
                        const Eigen::VectorXd m1 = dxhat.rowwise().mean();
                        const Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                        Matrix dx = dxhat;
                        dx.colwise() -= m1;
                        dx -= (xhat.array().colwise() * m2.array()).matrix();
                        dx.array().colwise() *= inv_std.array();
                        x->accumulate(dx);
                    }
                });
}

Var attention(const Var& q, const Var& k, const Var& v, Index seq_len, Index heads, bool causal) {
    const Index rows = q->rows();
    const Index width = q->cols();
    require(k->rows() == rows && v->rows() == rows && k->cols() == width && v->cols() == width,
            "attention q/k/v shape mismatch");
    require(seq_len > 0 && rows % seq_len == 0, "attention rows not a multiple of seq_len");
    require(heads > 0 && width % heads == 0, "attention width not divisible by heads");
    const Index dh = width / heads;
    const Index blocks = rows / seq_len;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Matrix> probs(static_cast<std::size_t>(blocks * heads));
    Matrix out(rows, width);
    for (Index b = 0; b < blocks; ++b) {
        for (Index h = 0; h < heads; ++h) {
            const auto qh = q->value.block(b * seq_len, h * dh, seq_len, dh);
            const auto kh = k->value.block(b * seq_len, h * dh, seq_len, dh);
            const auto vh = v->value.block(b * seq_len, h * dh, seq_len, dh);
            Matrix scores = (qh * kh.transpose()) * scale;
            for (Index i = 0; i < seq_len; ++i) {
                const Index visible = causal ? i + 1 : seq_len;
                const double mx = scores.row(i).head(visible).maxCoeff();
                double total = 0.0;
                for (Index j = 0; j < seq_len; ++j) {
                    const double e = j < visible ? std::exp(scores(i, j) - mx) : 0.0;
                    scores(i, j) = e;
                    total += e;
                }
                scores.row(i) /= total;
            }
            out.block(b * seq_len, h * dh, seq_len, dh) = scores * vh;
            probs[static_cast<std::size_t>(b * heads + h)] = std::move(scores);
        }
    }
    return make(std::move(out), {q, k, v},
                [probs = std::move(probs), seq_len, heads, dh, blocks, scale](Node& self) {
                    const auto& q = self.inputs[0];
                    const auto& k = self.inputs[1];
                    const auto& v = self.inputs[2];
                    Matrix dq = Matrix::Zero(q->rows(), q->cols());
                    Matrix dk = Matrix::Zero(k->rows(), k->cols());
                    Matrix dv = Matrix::Zero(v->rows(), v->cols());
                    for (Index b = 0; b < blocks; ++b) {
                        for (Index h = 0; h < heads; ++h) {
                            const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
                            const auto go = self.grad.block(b * seq_len, h * dh, seq_len, dh);
                            const auto qh = q->value.block(b * seq_len, h * dh, seq_len, dh);
                            const auto kh = k->value.block(b * seq_len, h * dh, seq_len, dh);
                            const auto vh = v->value.block(b * seq_len, h * dh, seq_len, dh);
                            dv.block(b * seq_len, h * dh, seq_len, dh) = p.transpose() * go;
                            const Matrix dp = go * vh.transpose();
                            const Eigen::VectorXd row_dot = dp.cwiseProduct(p).rowwise().sum();
                            const Matrix ds =
                                (p.array() * (dp.array().colwise() - row_dot.array())).matrix() *
                                scale;
                            dq.block(b * seq_len, h * dh, seq_len, dh) = ds * kh;
                            dk.block(b * seq_len, h * dh, seq_len, dh) = ds.transpose() * qh;
                        }
                    }
                    if (q->requires_grad) q->accumulate(dq);
                    if (k->requires_grad) k->accumulate(dk);
                    if (v->requires_grad) v->accumulate(dv);
                });
}

Var flatten_blocks(const Var& x, Index block) {
    require(block > 0 && x->rows() % block == 0, "flatten_blocks: rows not a multiple of block");
    const Index blocks = x->rows() / block;
    const Index d = x->cols();
    Matrix out(blocks, block * d);
    for (Index b = 0; b < blocks; ++b) {
        for (Index s = 0; s < block; ++s) {
            out.block(b, s * d, 1, d) = x->value.row(b * block + s);
        }
    }
    return make(std::move(out), {x}, [block, d, blocks](Node& self) {
        Matrix g(blocks * block, d);
        for (Index b = 0; b < blocks; ++b) {
            for (Index s = 0; s < block; ++s) {
                g.row(b * block + s) = self.grad.block(b, s * d, 1, d);
            }
        }
        self.inputs[0]->accumulate(g);
    });
}

Var block_mean(const Var& x, Index block) {
    require(block > 0 && x->rows() % block == 0, "block_mean: rows not a multiple of block");
    const Index blocks = x->rows() / block;
    Matrix out(blocks, x->cols());
    for (Index b = 0; b < blocks; ++b) {
        out.row(b) = x->value.middleRows(b * block, block).colwise().mean();
    }
    return make(std::move(out), {x}, [block, blocks](Node& self) {
        Matrix g(blocks * block, self.grad.cols());
        for (Index b = 0; b < blocks; ++b) {
            g.middleRows(b * block, block).rowwise() =
                self.grad.row(b) / static_cast<double>(block);
        }
        self.inputs[0]->accumulate(g);
    });
}

Var concat_blocks(const Var& a, Index a_block, const Var& b, Index b_block) {
    require(a->cols() == b->cols(), "concat_blocks width mismatch");
    require(a_block > 0 && b_block > 0 && a->rows() % a_block == 0 && b->rows() % b_block == 0,
            "concat_blocks: rows not a multiple of block");
    const Index blocks = a->rows() / a_block;
    require(b->rows() / b_block == blocks, "concat_blocks block count mismatch");
    const Index step = a_block + b_block;
    Matrix out(blocks * step, a->cols());
    for (Index i = 0; i < blocks; ++i) {
        out.middleRows(i * step, a_block) = a->value.middleRows(i * a_block, a_block);
        out.middleRows(i * step + a_block, b_block) = b->value.middleRows(i * b_block, b_block);
    }
    return make(std::move(out), {a, b}, [a_block, b_block, blocks, step](Node& self) {
        const auto& a = self.inputs[0];
        const auto& b = self.inputs[1];
        if (a->requires_grad) {
            Matrix g(blocks * a_block, self.grad.cols());
            for (Index i = 0; i < blocks; ++i) {
                g.middleRows(i * a_block, a_block) = self.grad.middleRows(i * step, a_block);
            }
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Matrix g(blocks * b_block, self.grad.cols());
            for (Index i = 0; i < blocks; ++i) {
                g.middleRows(i * b_block, b_block) =
                    self.grad.middleRows(i * step + a_block, b_block);
            }
            b->accumulate(g);
        }
    });
}

Var block_left_affine(const Var& w, const Var& c, const Var& x, Index block) {
    require(w->cols() == block, "block_left_affine: W columns must equal block size");
    require(c->rows() == w->rows() && c->cols() == 1, "block_left_affine: bias must be m x 1");
    require(x->rows() % block == 0, "block_left_affine: rows not a multiple of block");
    const Index blocks = x->rows() / block;
    const Index m = w->rows();
    Matrix out(blocks * m, x->cols());
    for (Index b = 0; b < blocks; ++b) {
        out.middleRows(b * m, m) = w->value * x->value.middleRows(b * block, block);
        out.middleRows(b * m, m).colwise() += c->value.col(0);
    }
    return make(std::move(out), {w, c, x}, [block, blocks, m](Node& self) {
        const auto& w = self.inputs[0];
        const auto& c = self.inputs[1];
        const auto& x = self.inputs[2];
        Matrix dw = Matrix::Zero(w->rows(), w->cols());
        Matrix dc = Matrix::Zero(m, 1);
        Matrix dx(x->rows(), x->cols());
        for (Index b = 0; b < blocks; ++b) {
            const auto g = self.grad.middleRows(b * m, m);
            if (w->requires_grad) dw.noalias() += g * x->value.middleRows(b * block, block).transpose();
            if (c->requires_grad) dc += g.rowwise().sum();
            if (x->requires_grad) dx.middleRows(b * block, block).noalias() = w->value.transpose() * g;
        }
        if (w->requires_grad) w->accumulate(dw);
        if (c->requires_grad) c->accumulate(dc);
        if (x->requires_grad) x->accumulate(dx);
    });
}

Var add_positional(const Var& x, const Var& table, Index block) {
    require(table->cols() == x->cols(), "positional table width mismatch");
    require(table->rows() >= block, "positional table shorter than the sequence");
    require(x->rows() % block == 0, "add_positional: rows not a multiple of block");
    const Index blocks = x->rows() / block;
    Matrix out = x->value;
    for (Index b = 0; b < blocks; ++b) {
        out.middleRows(b * block, block) += table->value.topRows(block);
    }
    return make(std::move(out), {x, table}, [block, blocks](Node& self) {
        const auto& x = self.inputs[0];
        const auto& table = self.inputs[1];
        if (x->requires_grad) x->accumulate(self.grad);
        if (table->requires_grad) {
            Matrix g = Matrix::Zero(table->rows(), table->cols());
            for (Index b = 0; b < blocks; ++b) {
                g.topRows(block) += self.grad.middleRows(b * block, block);
            }
            table->accumulate(g);
        }
    });
}

Var gather_rows(const Var& table, const std::vector<Index>& rows) {
    Matrix out(static_cast<Index>(rows.size()), table->cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < table->rows(), "gather_rows index out of range");
        out.row(static_cast<Index>(i)) = table->value.row(rows[i]);
    }
    return make(std::move(out), {table}, [rows](Node& self) {
        const auto& table = self.inputs[0];
        Matrix g = Matrix::Zero(table->rows(), table->cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            g.row(rows[i]) += self.grad.row(static_cast<Index>(i));
        }
        table->accumulate(g);
    });
}

// ---------------------------------------------------------------------------

Var mse(const Var& pred, const Var& target) {
    require(pred->rows() == target->rows() && pred->cols() == target->cols(), "mse shape mismatch");
    const Matrix diff = pred->value - target->value;
    const double n = static_cast<double>(diff.size());
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm() / n;
    return make(std::move(out), {pred, target}, [diff, n](Node& self) {
        const double g = self.grad(0, 0);
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(diff * (2.0 * g / n));
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(diff * (-2.0 * g / n));
    });
}

Var weighted_mse(const Var& pred, const Var& target, const Matrix& weights) {
    require(pred->rows() == target->rows() && pred->cols() == target->cols() &&
                weights.rows() == pred->rows() && weights.cols() == pred->cols(),
            "weighted_mse shape mismatch");
    const Matrix diff = pred->value - target->value;
    const double total = weights.sum();
    Matrix out(1, 1);
    out(0, 0) = total > 0.0 ? weights.cwiseProduct(diff.cwiseAbs2()).sum() / total : 0.0;
    return make(std::move(out), {pred, target}, [diff, weights, total](Node& self) {
        Matrix g = Matrix::Zero(diff.rows(), diff.cols());
        if (total > 0.0) {
            g = weights.cwiseProduct(diff) * (2.0 * self.grad(0, 0) / total);
        }
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(g);
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(-g);
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Index n = logits->rows();
    const Index classes = logits->cols();
    require(static_cast<Index>(labels.size()) == n, "cross_entropy label count mismatch");
    Matrix probs(n, classes);
    double loss = 0.0;
    for (Index r = 0; r < n; ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        require(y >= 0 && y < classes, "cross_entropy label out of range");
        const double mx = logits->value.row(r).maxCoeff();
        const Eigen::RowVectorXd e = (logits->value.row(r).array() - mx).exp();
        const double z = e.sum();
        probs.row(r) = e / z;
        loss -= logits->value(r, y) - mx - std::log(z);
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(n);
    return make(std::move(out), {logits}, [probs, labels, n](Node& self) {
        Matrix g = probs;
        for (Index r = 0; r < n; ++r) g(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
        self.inputs[0]->accumulate(g * (self.grad(0, 0) / static_cast<double>(n)));
    });
}

Var sum(const Var& x) {
    Matrix out(1, 1);
    out(0, 0) = x->value.sum();
    return make(std::move(out), {x}, [](Node& self) {
        const auto& x = self.inputs[0];
        x->accumulate(Matrix::Constant(x->rows(), x->cols(), self.grad(0, 0)));
    });
}

}  // namespace tslab::ad
