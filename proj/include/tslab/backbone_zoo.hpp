#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tslab/nn.hpp"

namespace tslab::zoo {

using nn::Index;
using nn::Matrix;
using nn::Var;

enum class VariantKind { llm, random, linear, att, trans, nollm };

VariantKind parse_variant_kind(std::string_view tag);
std::string_view variant_name(VariantKind kind);

enum class FreezeKind { none, layernorm_only, lora, full_freeze };

struct FreezePolicy {
    FreezeKind kind = FreezeKind::none;
    Index lora_rank = 8;
    double lora_alpha = 16.0;
};

FreezePolicy parse_freeze_policy(std::string_view tag);
std::string_view freeze_name(FreezeKind kind);

/// Two mixing networks over the concatenated [prototypes; tokens] sequence.
struct MixerSpec {
    Index m = 16;              ///< output token count
    Index token_hidden = 32;   ///< hidden width of the token-mixing network
    Index feature_hidden = 0;  ///< hidden width of the feature-mixing network (0 -> 2*D)
    std::string activation = "gelu";
};

struct DecompositionSpec {
    Index period = 24;
    Index kernel = 25;
};

struct Mechanisms {
    std::optional<Index> prototypes;  ///< top-K text prototypes prepended to the tokens
    std::optional<DecompositionSpec> decomposition;
    std::optional<MixerSpec> mixer;
};

struct VariantSpec {
    VariantKind kind = VariantKind::linear;
    Index depth = 0;  ///< 0 selects the kind's default
    Index width = 32;
    Index heads = 0;  ///< 0 selects the kind's default
    std::optional<FreezePolicy> freeze_policy;  ///< defaults per kind when unset
    Mechanisms mechanisms;
    std::optional<std::filesystem::path> checkpoint;
    std::uint64_t seed = 0;

    /// Throws ConfigError on an invariant violation.
    void validate() const;
    Index resolved_depth() const;
    Index resolved_heads() const;
    FreezePolicy resolved_policy() const;
};

struct TrainableEntry {
    std::string name;
    nn::Group group;
    Index size = 0;
    bool trainable = false;
};

struct TrainableMask {
    std::vector<TrainableEntry> entries;
    Index total = 0;
    Index trainable = 0;
};

/// Maps S x D token sequences (stacked in blocks of `seq_len` rows) to S x D.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual VariantKind kind() const = 0;
    virtual Index width() const = 0;
    virtual Var forward(const Var& tokens, Index seq_len) const = 0;
    virtual void collect(nn::ParameterList& out) = 0;
    /// Attention projections eligible for LoRA, empty when the kind has none.
    virtual std::vector<nn::Linear*> lora_targets() { return {}; }

    nn::ParameterList parameters();
    nn::Parameter* find(std::string_view name);
    TrainableMask mask();
};

struct BuiltVariant {
    std::unique_ptr<Backbone> backbone;
    TrainableMask mask;
};

/// Constructs the backbone for `spec` over tokens of width D and sequence
/// length S, loads the checkpoint for kind=LLM and applies the freeze policy.
BuiltVariant build_variant(const VariantSpec& spec, Index width, Index seq_len);

TrainableMask apply_freeze_policy(Backbone& backbone, const FreezePolicy& policy,
                                  std::uint64_t seed = 0);

/// Returns a linear operator whose base weight (d_out x d_in) is frozen and
/// whose rank-r adapter factors are the only trainable tensors.
nn::Linear lora_wrap(const Matrix& weight, Index rank, double alpha, std::uint64_t seed);

struct ForwardResult {
    Matrix output;
    std::optional<Matrix> pre;
    std::optional<Matrix> post;
};

/// Single-sequence evaluation of an S x D token matrix.
ForwardResult forward(const Backbone& backbone, const Matrix& tokens, bool capture = false);

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding `manifest.txt` (`name,RxC,f64` per line)
// and `tensors.bin` (row-major little-endian doubles in manifest order).

struct Checkpoint {
    std::map<std::string, Matrix> tensors;
};

Checkpoint read_checkpoint(const std::filesystem::path& dir);
void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);

/// Every backbone parameter except LoRA adapters, keyed by canonical name.
Checkpoint checkpoint_of(Backbone& backbone);

/// Copies matching tensors into the backbone. A positional table may be
/// longer than the backbone's; only its leading rows are used.
void load_checkpoint(Backbone& backbone, const Checkpoint& checkpoint);

// ---------------------------------------------------------------------------
// Text prototypes

struct PrototypeBank {
    Matrix vectors;  ///< M x D
    std::string source;
};

/// Seeded N(0,1) rows rescaled to unit norm.
PrototypeBank random_prototype_bank(Index rows, Index width, std::uint64_t seed);
/// Uses the checkpoint's `wte` token-embedding table.
PrototypeBank prototype_bank_from_checkpoint(const Checkpoint& checkpoint);

struct PrototypeSelection {
    Matrix prototypes;           ///< K x D
    std::vector<Index> indices;  ///< bank rows, best first
    Eigen::VectorXd scores;      ///< score of every bank row
};

/// Scores each bank row by the mean scaled dot product with the tokens and
/// returns the K best; equal scores prefer the lower row.
PrototypeSelection select_prototypes(const Matrix& tokens, const PrototypeBank& bank, Index k);

// ---------------------------------------------------------------------------
// Mixer

class Mixer {
public:
    /// `sequence` is the concatenated length K + S.
    Mixer(const MixerSpec& spec, Index sequence, Index width, std::uint64_t seed);

    /// (B*(K+S)) x D -> (B*m) x D.
    Var forward(const Var& concatenated) const;
    void collect(nn::ParameterList& out);
    nn::ParameterList parameters();

    Index sequence() const { return sequence_; }
    Index output_tokens() const { return spec_.m; }

private:
    MixerSpec spec_;
    Index sequence_;
    nn::Parameter token_w1_, token_b1_, token_w2_, token_b2_;
    nn::Linear feature_fc1_, feature_fc2_;
};

/// Concatenates prototypes above tokens and fuses them to m x D.
Matrix mixer_fuse(const Matrix& prototypes, const Matrix& tokens, const Mixer& mixer);

}  // namespace tslab::zoo
