#include "tslab/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "tslab/error.hpp"

namespace tslab::nn {

const char* group_name(Group g) {
    switch (g) {
        case Group::embedding: return "embedding";
        case Group::positional: return "positional";
        case Group::layernorm: return "layernorm";
        case Group::attention: return "attention";
        case Group::feedforward: return "feedforward";
        case Group::linear: return "linear";
        case Group::lora: return "lora";
        case Group::mixer: return "mixer";
        case Group::head: return "head";
    }
    return "?";
}

Parameter make_parameter(std::string name, Group group, Matrix init) {
    return Parameter{std::move(name), group, ad::leaf(std::move(init)), true};
}

Matrix uniform_init(Index rows, Index cols, Index fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
    std::uniform_real_distribution<double> u(-bound, bound);
    return Matrix::NullaryExpr(rows, cols, [&] { return u(rng); });
}

Matrix normal_init(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, stddev);
    return Matrix::NullaryExpr(rows, cols, [&] { return n(rng); });
}

// ---------------------------------------------------------------------------

Linear::Linear(std::string name, Group group, Index d_in, Index d_out, std::mt19937_64& rng,
               bool bias)
    : weight_(make_parameter(name + ".weight", group, uniform_init(d_out, d_in, d_in, rng))) {
    if (bias) {
        bias_ = make_parameter(name + ".bias", group, Matrix::Zero(1, d_out));
    }
}

Var Linear::forward(const Var& x) const {
    Var y = ad::matmul_nt(x, weight_.var);
    if (lora_) {
        const Var down = ad::matmul_nt(x, lora_->a.var);
        const Var up = ad::matmul_nt(down, lora_->b.var);
        y = ad::add(y, ad::scale(up, lora_->scaling()));
    }
    if (bias_) {
        y = ad::add_row_bias(y, bias_->var);
    }
    return y;
}

void Linear::attach_lora(Index rank, double alpha, std::mt19937_64& rng) {
    const Index limit = std::min(d_in(), d_out());
    if (rank < 1 || rank > limit) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " outside [1, " +
                          std::to_string(limit) + "] for " + weight_.name);
    }
    const std::string stem = weight_.name.substr(0, weight_.name.rfind('.'));
    LoraFactors f;
    f.rank = rank;
    f.alpha = alpha;
    f.a = make_parameter(stem + ".lora_a", Group::lora, uniform_init(rank, d_in(), d_in(), rng));
    f.b = make_parameter(stem + ".lora_b", Group::lora, Matrix::Zero(d_out(), rank));
    lora_ = std::move(f);
}

Matrix Linear::effective_weight() const {
    if (!lora_) return weight_.var->value;
    return weight_.var->value + lora_->scaling() * lora_->b.var->value * lora_->a.var->value;
}

void Linear::collect(ParameterList& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
    if (lora_) {
        out.push_back(&lora_->a);
        out.push_back(&lora_->b);
    }
}

LayerNorm::LayerNorm(std::string name, Index width)
    : gain_(make_parameter(name + ".weight", Group::layernorm, Matrix::Ones(1, width))),
      shift_(make_parameter(name + ".bias", Group::layernorm, Matrix::Zero(1, width))) {}

Var LayerNorm::forward(const Var& x) const { return ad::layer_norm(x, gain_.var, shift_.var); }

void LayerNorm::collect(ParameterList& out) {
    out.push_back(&gain_);
    out.push_back(&shift_);
}

MultiHeadAttention::MultiHeadAttention(const std::string& prefix, Index width, Index heads,
                                       bool causal, std::mt19937_64& rng)
    : q_(prefix + ".q", Group::attention, width, width, rng),
      k_(prefix + ".k", Group::attention, width, width, rng),
      v_(prefix + ".v", Group::attention, width, width, rng),
      o_(prefix + ".o", Group::attention, width, width, rng),
      heads_(heads),
      causal_(causal) {
    if (heads < 1 || width % heads != 0) {
        throw ConfigError("attention width " + std::to_string(width) +
                          " not divisible by head count " + std::to_string(heads));
    }
}

Var MultiHeadAttention::forward(const Var& x, Index seq_len) const {
    const Var mixed =
        ad::attention(q_.forward(x), k_.forward(x), v_.forward(x), seq_len, heads_, causal_);
    return o_.forward(mixed);
}

void MultiHeadAttention::collect(ParameterList& out) {
    q_.collect(out);
    k_.collect(out);
    v_.collect(out);
    o_.collect(out);
}

FeedForward::FeedForward(const std::string& prefix, Index width, Index hidden,
                         std::mt19937_64& rng)
    : fc_(prefix + ".fc", Group::feedforward, width, hidden, rng),
      proj_(prefix + ".proj", Group::feedforward, hidden, width, rng) {}

Var FeedForward::forward(const Var& x) const { return proj_.forward(ad::gelu(fc_.forward(x))); }

void FeedForward::collect(ParameterList& out) {
    fc_.collect(out);
    proj_.collect(out);
}

EncoderBlock::EncoderBlock(const std::string& prefix, Index width, Index heads, bool causal,
                           std::mt19937_64& rng)
    : ln1_(prefix + ".ln_1", width),
      ln2_(prefix + ".ln_2", width),
      attn_(prefix + ".attn", width, heads, causal, rng),
      mlp_(prefix + ".mlp", width, 4 * width, rng) {}

Var EncoderBlock::forward(const Var& x, Index seq_len) const {
    const Var h = ad::add(x, attn_.forward(ln1_.forward(x), seq_len));
    return ad::add(h, mlp_.forward(ln2_.forward(h)));
}

void EncoderBlock::collect(ParameterList& out) {
    ln1_.collect(out);
    attn_.collect(out);
    ln2_.collect(out);
    mlp_.collect(out);
}

// ---------------------------------------------------------------------------

Adam::Adam(ParameterList params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto* p : params_) {
        m_.push_back(Matrix::Zero(p->var->rows(), p->var->cols()));
        v_.push_back(Matrix::Zero(p->var->rows(), p->var->cols()));
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->var->grad.resize(0, 0);
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        if (!p.trainable || p.var->grad.size() == 0) continue;
        const Matrix& g = p.var->grad;
        m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
        v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseAbs2();
        p.var->value.array() -= options_.learning_rate * (m_[i].array() / c1) /
                                ((v_[i].array() / c2).sqrt() + options_.epsilon);
    }
}

Index count(const ParameterList& params) {
    Index n = 0;
    for (const auto* p : params) n += p->size();
    return n;
}

Index count_trainable(const ParameterList& params) {
    Index n = 0;
    for (const auto* p : params) {
        if (p->trainable) n += p->size();
    }
    return n;
}

}  // namespace tslab::nn
