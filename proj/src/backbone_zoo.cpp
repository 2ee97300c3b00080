#include "tslab/backbone_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tslab/error.hpp"

namespace tslab::zoo {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

/// Passes the patch embedding straight to the output head.
class IdentityBackbone final : public Backbone {
public:
    explicit IdentityBackbone(Index width) : width_(width) {}

    VariantKind kind() const override { return VariantKind::nollm; }
    Index width() const override { return width_; }
    Var forward(const Var& tokens, Index) const override { return tokens; }
    void collect(nn::ParameterList&) override {}

private:
    Index width_;
};

/// LayerNorm(x W^T + b).
class LinearBackbone final : public Backbone {
public:
    LinearBackbone(Index width, std::mt19937_64& rng)
        : width_(width), linear_("linear", nn::Group::linear, width, width, rng), ln_("ln", width) {}

    VariantKind kind() const override { return VariantKind::linear; }
    Index width() const override { return width_; }
    Var forward(const Var& tokens, Index) const override {
        return ln_.forward(linear_.forward(tokens));
    }
    void collect(nn::ParameterList& out) override {
        linear_.collect(out);
        ln_.collect(out);
    }

    nn::Linear& linear() { return linear_; }

private:
    Index width_;
    nn::Linear linear_;
    nn::LayerNorm ln_;
};

/// Stacked multi-head attention layers without feed-forward sublayers.
class AttentionBackbone final : public Backbone {
public:
    AttentionBackbone(Index width, Index depth, Index heads, std::mt19937_64& rng) : width_(width) {
        for (Index i = 0; i < depth; ++i) {
            const std::string prefix = "h." + std::to_string(i);
            norms_.emplace_back(prefix + ".ln_1", width);
            layers_.emplace_back(prefix + ".attn", width, heads, false, rng);
        }
        final_ = nn::LayerNorm("ln_f", width);
    }

    VariantKind kind() const override { return VariantKind::att; }
    Index width() const override { return width_; }
    Var forward(const Var& tokens, Index seq_len) const override {
        Var x = tokens;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            x = ad::add(x, layers_[i].forward(norms_[i].forward(x), seq_len));
        }
        return final_.forward(x);
    }
    void collect(nn::ParameterList& out) override {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            norms_[i].collect(out);
            layers_[i].collect(out);
        }
        final_.collect(out);
    }
    std::vector<nn::Linear*> lora_targets() override {
        std::vector<nn::Linear*> out;
        for (auto& layer : layers_) {
            for (auto* p : layer.projections()) out.push_back(p);
        }
        return out;
    }

private:
    Index width_;
    std::vector<nn::LayerNorm> norms_;
    std::vector<nn::MultiHeadAttention> layers_;
    nn::LayerNorm final_;
};

/// GPT-style stack (positional table, causal pre-LN blocks, final LayerNorm)
/// for LLM/Random, or bare encoder blocks for Trans.
class TransformerBackbone final : public Backbone {
public:
    TransformerBackbone(VariantKind kind, Index width, Index depth, Index heads, Index seq_len,
                        std::mt19937_64& rng)
        : kind_(kind), width_(width) {
        const bool gpt_style = kind != VariantKind::trans;
        if (gpt_style) {
            positional_ = nn::make_parameter("wpe", nn::Group::positional,
                                             nn::normal_init(seq_len, width, 0.02, rng));
        }
        blocks_.reserve(static_cast<std::size_t>(depth));
        for (Index i = 0; i < depth; ++i) {
            blocks_.emplace_back("h." + std::to_string(i), width, heads, gpt_style, rng);
        }
        if (gpt_style) {
            final_ = nn::LayerNorm("ln_f", width);
        }
    }

    VariantKind kind() const override { return kind_; }
    Index width() const override { return width_; }
    Var forward(const Var& tokens, Index seq_len) const override {
        Var x = tokens;
        if (positional_) x = ad::add_positional(x, positional_->var, seq_len);
        for (const auto& block : blocks_) x = block.forward(x, seq_len);
        if (final_) x = final_->forward(x);
        return x;
    }
    void collect(nn::ParameterList& out) override {
        if (positional_) out.push_back(&*positional_);
        for (auto& block : blocks_) block.collect(out);
        if (final_) final_->collect(out);
    }
    std::vector<nn::Linear*> lora_targets() override {
        std::vector<nn::Linear*> out;
        for (auto& block : blocks_) {
            for (auto* p : block.attention().projections()) out.push_back(p);
        }
        return out;
    }

private:
    VariantKind kind_;
    Index width_;
    std::optional<nn::Parameter> positional_;
    std::vector<nn::EncoderBlock> blocks_;
    std::optional<nn::LayerNorm> final_;
};

}  // namespace

VariantKind parse_variant_kind(std::string_view tag) {
    const std::string t = lower(tag);
    if (t == "llm") return VariantKind::llm;
    if (t == "random") return VariantKind::random;
    if (t == "linear" || t == "ln") return VariantKind::linear;
    if (t == "att") return VariantKind::att;
    if (t == "trans") return VariantKind::trans;
    if (t == "nollm") return VariantKind::nollm;
    throw ConfigError("unknown variant kind '" + std::string(tag) + "'");
}

std::string_view variant_name(VariantKind kind) {
    switch (kind) {
        case VariantKind::llm: return "llm";
        case VariantKind::random: return "random";
        case VariantKind::linear: return "linear";
        case VariantKind::att: return "att";
        case VariantKind::trans: return "trans";
        case VariantKind::nollm: return "nollm";
    }
    return "?";
}

FreezePolicy parse_freeze_policy(std::string_view tag) {
    const std::string t = lower(tag);
    FreezePolicy p;
    if (t == "none") p.kind = FreezeKind::none;
    else if (t == "layernorm_only") p.kind = FreezeKind::layernorm_only;
    else if (t == "lora") p.kind = FreezeKind::lora;
    else if (t == "full_freeze") p.kind = FreezeKind::full_freeze;
    else throw ConfigError("unknown freeze policy '" + std::string(tag) + "'");
    return p;
}

std::string_view freeze_name(FreezeKind kind) {
    switch (kind) {
        case FreezeKind::none: return "none";
        case FreezeKind::layernorm_only: return "layernorm_only";
        case FreezeKind::lora: return "lora";
        case FreezeKind::full_freeze: return "full_freeze";
    }
    return "?";
}

void VariantSpec::validate() const {
    if (width < 1) throw ConfigError("variant width must be >= 1");
    const bool flat = kind == VariantKind::linear || kind == VariantKind::nollm;
    if (flat && (depth != 0 || heads != 0)) {
        throw ConfigError(std::string(variant_name(kind)) + " variant takes no depth/heads");
    }
    if (kind == VariantKind::llm && !checkpoint) {
        throw ConfigError("llm variant requires a checkpoint");
    }
    if (depth < 0 || heads < 0) throw ConfigError("depth and heads must be non-negative");
    if (!flat && width % resolved_heads() != 0) {
        throw ConfigError("width " + std::to_string(width) + " not divisible by " +
                          std::to_string(resolved_heads()) + " heads");
    }
    const FreezePolicy p = resolved_policy();
    if (p.kind == FreezeKind::lora && p.lora_rank < 1) {
        throw ConfigError("lora rank must be >= 1");
    }
    if (mechanisms.prototypes && *mechanisms.prototypes < 1) {
        throw ConfigError("prototype count K must be >= 1");
    }
    if (mechanisms.mixer) {
        if (mechanisms.mixer->m < 1) throw ConfigError("mixer output count m must be >= 1");
        if (mechanisms.mixer->activation != "gelu") {
            throw ConfigError("mixer activation must be gelu");
        }
    }
}

Index VariantSpec::resolved_depth() const {
    if (depth > 0) return depth;
    switch (kind) {
        case VariantKind::llm:
        case VariantKind::random: return 2;
        case VariantKind::att:
        case VariantKind::trans: return 1;
        default: return 0;
    }
}

Index VariantSpec::resolved_heads() const { return heads > 0 ? heads : 4; }

FreezePolicy VariantSpec::resolved_policy() const {
    if (freeze_policy) return *freeze_policy;
    FreezePolicy p;
    p.kind = (kind == VariantKind::llm || kind == VariantKind::random) ? FreezeKind::layernorm_only
                                                                        : FreezeKind::none;
    return p;
}

// ---------------------------------------------------------------------------

nn::ParameterList Backbone::parameters() {
    nn::ParameterList out;
    collect(out);
    return out;
}

nn::Parameter* Backbone::find(std::string_view name) {
    for (auto* p : parameters()) {
        if (p->name == name) return p;
    }
    return nullptr;
}

TrainableMask Backbone::mask() {
    TrainableMask m;
    for (const auto* p : parameters()) {
        m.entries.push_back({p->name, p->group, p->size(), p->trainable});
        m.total += p->size();
        if (p->trainable) m.trainable += p->size();
    }
    return m;
}

TrainableMask apply_freeze_policy(Backbone& backbone, const FreezePolicy& policy,
                                  std::uint64_t seed) {
    auto params = backbone.parameters();
    auto has_group = [&](nn::Group g) {
        return std::any_of(params.begin(), params.end(), [g](auto* p) { return p->group == g; });
    };
    switch (policy.kind) {
        case FreezeKind::none:
            for (auto* p : params) nn::set_trainable(*p, true);
            break;
        case FreezeKind::full_freeze:
            for (auto* p : params) nn::set_trainable(*p, false);
            break;
        case FreezeKind::layernorm_only:
            if (!has_group(nn::Group::layernorm)) {
                throw ConfigError("layernorm_only policy: " +
                                  std::string(variant_name(backbone.kind())) +
                                  " backbone has no LayerNorm parameters");
            }
            for (auto* p : params) {
                nn::set_trainable(*p, p->group == nn::Group::layernorm ||
                                          p->group == nn::Group::positional);
            }
            break;
        case FreezeKind::lora: {
            auto targets = backbone.lora_targets();
            if (targets.empty()) {
                throw ConfigError("lora policy: " + std::string(variant_name(backbone.kind())) +
                                  " backbone has no attention projections");
            }
            std::mt19937_64 rng(seed ^ 0x10a4a5ULL);
            for (auto* t : targets) {
                if (!t->has_lora()) t->attach_lora(policy.lora_rank, policy.lora_alpha, rng);
            }
            for (auto* p : backbone.parameters()) {
                nn::set_trainable(*p, p->group == nn::Group::lora);
            }
            break;
        }
    }
    return backbone.mask();
}

BuiltVariant build_variant(const VariantSpec& spec, Index width, Index seq_len) {
    if (spec.width != width) {
        throw ConfigError("variant width " + std::to_string(spec.width) +
                          " does not match token width " + std::to_string(width));
    }
    spec.validate();
    if (seq_len < 1) throw ConfigError("sequence length must be >= 1");
    std::mt19937_64 rng(spec.seed);
    std::unique_ptr<Backbone> backbone;
    switch (spec.kind) {
        case VariantKind::nollm:
            backbone = std::make_unique<IdentityBackbone>(width);
            break;
        case VariantKind::linear:
            backbone = std::make_unique<LinearBackbone>(width, rng);
            break;
        case VariantKind::att:
            backbone = std::make_unique<AttentionBackbone>(width, spec.resolved_depth(),
                                                           spec.resolved_heads(), rng);
            break;
        case VariantKind::trans:
        case VariantKind::random:
        case VariantKind::llm:
            backbone = std::make_unique<TransformerBackbone>(
                spec.kind, width, spec.resolved_depth(), spec.resolved_heads(), seq_len, rng);
            break;
    }
    if (spec.kind == VariantKind::llm) {
        load_checkpoint(*backbone, read_checkpoint(*spec.checkpoint));
    }
    const FreezePolicy policy = spec.resolved_policy();
    BuiltVariant built;
    built.mask = apply_freeze_policy(*backbone, policy, spec.seed);
    built.backbone = std::move(backbone);
    return built;
}

nn::Linear lora_wrap(const Matrix& weight, Index rank, double alpha, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    nn::Linear layer("lora_wrap", nn::Group::linear, weight.cols(), weight.rows(), rng, false);
    layer.weight().var->value = weight;
    layer.attach_lora(rank, alpha, rng);
    nn::set_trainable(layer.weight(), false);
    return layer;
}

ForwardResult forward(const Backbone& backbone, const Matrix& tokens, bool capture) {
    if (tokens.cols() != backbone.width()) {
        throw ConfigError("token width " + std::to_string(tokens.cols()) +
                          " does not match backbone width " + std::to_string(backbone.width()));
    }
    ForwardResult r;
    r.output = backbone.forward(ad::constant(tokens), tokens.rows())->value;
    if (capture) {
        r.pre = tokens;
        r.post = r.output;
    }
    return r;
}

// ---------------------------------------------------------------------------

PrototypeBank random_prototype_bank(Index rows, Index width, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    PrototypeBank bank;
    bank.vectors = Matrix::NullaryExpr(rows, width, [&] { return normal(rng); });
    bank.vectors.rowwise().normalize();
    bank.source = "random:" + std::to_string(seed);
    return bank;
}

PrototypeBank prototype_bank_from_checkpoint(const Checkpoint& checkpoint) {
    const auto it = checkpoint.tensors.find("wte");
    if (it == checkpoint.tensors.end()) {
        throw LoadError("checkpoint has no 'wte' token-embedding table");
    }
    if (!it->second.allFinite()) throw LoadError("checkpoint 'wte' has non-finite entries");
    return {it->second, "checkpoint:wte"};
}

PrototypeSelection select_prototypes(const Matrix& tokens, const PrototypeBank& bank, Index k) {
    const Index rows = bank.vectors.rows();
    if (k < 1 || k > rows) {
        throw ConfigError("cannot select " + std::to_string(k) + " prototypes from a bank of " +
                          std::to_string(rows));
    }
    if (tokens.cols() != bank.vectors.cols()) {
        throw ConfigError("prototype bank width does not match token width");
    }
    PrototypeSelection sel;
    const double scale = 1.0 / std::sqrt(static_cast<double>(tokens.cols()));
    sel.scores = (bank.vectors * tokens.colwise().mean().transpose()) * scale;
    std::vector<Index> order(static_cast<std::size_t>(rows));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return sel.scores(a) > sel.scores(b); });
    sel.indices.assign(order.begin(), order.begin() + k);
    sel.prototypes.resize(k, bank.vectors.cols());
    for (Index i = 0; i < k; ++i) {
        sel.prototypes.row(i) = bank.vectors.row(sel.indices[static_cast<std::size_t>(i)]);
    }
    return sel;
}

// ---------------------------------------------------------------------------

Mixer::Mixer(const MixerSpec& spec, Index sequence, Index width, std::uint64_t seed)
    : spec_(spec), sequence_(sequence) {
    if (spec.m < 1 || spec.m > sequence) {
        throw ConfigError("mixer output count m=" + std::to_string(spec.m) + " must lie in [1, " +
                          std::to_string(sequence) + "]");
    }
    if (spec.token_hidden < 1) throw ConfigError("mixer token hidden width must be >= 1");
    if (spec.activation != "gelu") throw ConfigError("mixer activation must be gelu");
    std::mt19937_64 rng(seed);
    const Index th = spec.token_hidden;
    const Index fh = spec.feature_hidden > 0 ? spec.feature_hidden : 2 * width;
    token_w1_ = nn::make_parameter("mixer.token.fc1.weight", nn::Group::mixer,
                                   nn::uniform_init(th, sequence, sequence, rng));
    token_b1_ = nn::make_parameter("mixer.token.fc1.bias", nn::Group::mixer, Matrix::Zero(th, 1));
    token_w2_ = nn::make_parameter("mixer.token.fc2.weight", nn::Group::mixer,
                                   nn::uniform_init(spec.m, th, th, rng));
    token_b2_ =
        nn::make_parameter("mixer.token.fc2.bias", nn::Group::mixer, Matrix::Zero(spec.m, 1));
    feature_fc1_ = nn::Linear("mixer.feature.fc1", nn::Group::mixer, width, fh, rng);
    feature_fc2_ = nn::Linear("mixer.feature.fc2", nn::Group::mixer, fh, width, rng);
}

Var Mixer::forward(const Var& concatenated) const {
    Var t = ad::block_left_affine(token_w1_.var, token_b1_.var, concatenated, sequence_);
    t = ad::gelu(t);
    t = ad::block_left_affine(token_w2_.var, token_b2_.var, t, token_w1_.var->rows());
    Var f = ad::gelu(feature_fc1_.forward(t));
    return feature_fc2_.forward(f);
}

void Mixer::collect(nn::ParameterList& out) {
    out.push_back(&token_w1_);
    out.push_back(&token_b1_);
    out.push_back(&token_w2_);
    out.push_back(&token_b2_);
    feature_fc1_.collect(out);
    feature_fc2_.collect(out);
}

nn::ParameterList Mixer::parameters() {
    nn::ParameterList out;
    collect(out);
    return out;
}

Matrix mixer_fuse(const Matrix& prototypes, const Matrix& tokens, const Mixer& mixer) {
    if (prototypes.cols() != tokens.cols()) {
        throw ConfigError("prototype width " + std::to_string(prototypes.cols()) +
                          " does not match token width " + std::to_string(tokens.cols()));
    }
    if (prototypes.rows() + tokens.rows() != mixer.sequence()) {
        throw ConfigError("mixer built for " + std::to_string(mixer.sequence()) +
                          " tokens, got " + std::to_string(prototypes.rows() + tokens.rows()));
    }
    Matrix stacked(prototypes.rows() + tokens.rows(), tokens.cols());
    stacked << prototypes, tokens;
    return mixer.forward(ad::constant(stacked))->value;
}

}  // namespace tslab::zoo
