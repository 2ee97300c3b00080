#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tslab/autodiff.hpp"

namespace tslab::nn {

using ad::Index;
using ad::Matrix;
using ad::Var;

/// Coarse role of a tensor; freeze policies select by group.
enum class Group { embedding, positional, layernorm, attention, feedforward, linear, lora, mixer, head };

const char* group_name(Group g);

struct Parameter {
    std::string name;
    Group group = Group::linear;
    Var var;
    bool trainable = true;

    Index size() const { return var->value.size(); }
};

using ParameterList = std::vector<Parameter*>;

Parameter make_parameter(std::string name, Group group, Matrix init);

/// Frozen parameters also stop requesting gradients from the tape.
inline void set_trainable(Parameter& p, bool trainable) {
    p.trainable = trainable;
    p.var->requires_grad = trainable;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual dense-layer default.
Matrix uniform_init(Index rows, Index cols, Index fan_in, std::mt19937_64& rng);
Matrix normal_init(Index rows, Index cols, double stddev, std::mt19937_64& rng);

/// Low-rank adapter factors for a (d_out x d_in) weight: delta = (alpha/r) * B * A.
struct LoraFactors {
    Parameter a;  ///< r x d_in, seeded random
    Parameter b;  ///< d_out x r, zero
    double alpha = 16.0;
    Index rank = 8;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

/// y = x W^T + b, with W stored (d_out x d_in), plus an optional LoRA delta.
class Linear {
public:
    Linear() = default;
    Linear(std::string name, Group group, Index d_in, Index d_out, std::mt19937_64& rng,
           bool bias = true);

    Var forward(const Var& x) const;

    void attach_lora(Index rank, double alpha, std::mt19937_64& rng);
    bool has_lora() const { return lora_.has_value(); }
    const std::optional<LoraFactors>& lora() const { return lora_; }
    /// W + (alpha/r) B A, or W when no adapter is attached.
    Matrix effective_weight() const;

    Parameter& weight() { return weight_; }
    const Parameter& weight() const { return weight_; }
    std::optional<Parameter>& bias() { return bias_; }
    Index d_in() const { return weight_.var->value.cols(); }
    Index d_out() const { return weight_.var->value.rows(); }

    void collect(ParameterList& out);

private:
    Parameter weight_;
    std::optional<Parameter> bias_;
    std::optional<LoraFactors> lora_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(std::string name, Index width);

    Var forward(const Var& x) const;
    void collect(ParameterList& out);

    Parameter& gain() { return gain_; }
    Parameter& shift() { return shift_; }

private:
    Parameter gain_;
    Parameter shift_;
};

class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(const std::string& prefix, Index width, Index heads, bool causal,
                       std::mt19937_64& rng);

    Var forward(const Var& x, Index seq_len) const;
    void collect(ParameterList& out);

    std::vector<Linear*> projections() { return {&q_, &k_, &v_, &o_}; }
    Index heads() const { return heads_; }

private:
    Linear q_, k_, v_, o_;
    Index heads_ = 1;
    bool causal_ = false;
};

class FeedForward {
public:
    FeedForward() = default;
    FeedForward(const std::string& prefix, Index width, Index hidden, std::mt19937_64& rng);

    Var forward(const Var& x) const;
    void collect(ParameterList& out);

    Linear& fc() { return fc_; }
    Linear& proj() { return proj_; }

private:
    Linear fc_, proj_;
};

/// Pre-LayerNorm transformer block: x + Attn(LN(x)), then + FFN(LN(x)).
class EncoderBlock {
public:
    EncoderBlock() = default;
    EncoderBlock(const std::string& prefix, Index width, Index heads, bool causal,
                 std::mt19937_64& rng);

    Var forward(const Var& x, Index seq_len) const;
    void collect(ParameterList& out);

    MultiHeadAttention& attention() { return attn_; }

private:
    LayerNorm ln1_, ln2_;
    MultiHeadAttention attn_;
    FeedForward mlp_;
};

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adaptive-moment optimizer. Parameters whose `trainable` flag is false are
/// never written.
class Adam {
public:
    Adam(ParameterList params, AdamOptions options);

    void zero_grad();
    void step();
    long steps() const { return t_; }

private:
    ParameterList params_;
    AdamOptions options_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    long t_ = 0;
};

Index count(const ParameterList& params);
Index count_trainable(const ParameterList& params);

}  // namespace tslab::nn
