#include "tslab/error.hpp"
#include "tslab/harness.hpp"

namespace tslab::harness {

namespace {

constexpr std::uint64_t kBankSalt = 0x7e47b4a1ULL;
constexpr std::uint64_t kMixerSalt = 0x313e5ULL;

zoo::VariantSpec resolved_spec(const ExperimentConfig& config) {
    zoo::VariantSpec spec = config.variant;
    spec.width = config.d_model;
    spec.seed = config.seed;
    return spec;
}

}  // namespace

TaskModel::TaskModel(const ExperimentConfig& config, const heads::TaskConfig& task, Index channels)
    : config_(config), task_(task), channels_(channels) {
    task.validate();
    if (channels < 1) throw ConfigError("model needs at least one channel");
    const Index d = config.d_model;
    std::mt19937_64 rng(config.seed);
    patches_ = core::patch_count(config.lookback, config.patch_len, config.stride);
    token_seq_ = config.variant.mechanisms.decomposition ? 3 * patches_ : patches_;
    embed_ = nn::Linear("patch_embed", nn::Group::embedding, core::patch_feature_width(config.patch_len),
                        d, rng);

    Index seq = token_seq_;
    if (const auto k = config.variant.mechanisms.prototypes) {
        std::optional<zoo::PrototypeBank> from_checkpoint;
        if (config.variant.kind == zoo::VariantKind::llm && config.variant.checkpoint) {
            const auto ck = zoo::read_checkpoint(*config.variant.checkpoint);
            if (ck.tensors.count("wte") && ck.tensors.at("wte").cols() == d) {
                from_checkpoint = zoo::prototype_bank_from_checkpoint(ck);
            }
        }
        bank_ = from_checkpoint ? *from_checkpoint
                                : zoo::random_prototype_bank(config.prototype_bank_size, d,
                                                             config.seed ^ kBankSalt);
        if (*k > bank_->vectors.rows()) {
            throw ConfigError("cannot select " + std::to_string(*k) + " prototypes from a bank of " +
                              std::to_string(bank_->vectors.rows()));
        }
        seq += *k;
    }
    if (const auto& mixer = config.variant.mechanisms.mixer) {
        mixer_ = std::make_unique<zoo::Mixer>(*mixer, seq, d, config.seed ^ kMixerSalt);
        seq = mixer->m;
    }
    backbone_seq_ = seq;
    built_ = zoo::build_variant(resolved_spec(config), d, backbone_seq_);

    switch (task.task) {
        case TaskKind::forecast:
            projection_.emplace("head.forecast", backbone_seq_, d, *task.horizon, rng);
            break;
        case TaskKind::impute:
        case TaskKind::anomaly:
            projection_.emplace("head.reconstruct", backbone_seq_, d, config.lookback, rng);
            break;
        case TaskKind::classify:
            classifier_.emplace(backbone_seq_, channels, d, *task.num_classes, rng);
            break;
    }
}

TaskModel::Batch TaskModel::prepare(const std::vector<const Matrix*>& windows,
                                    const std::vector<const core::MaskMatrix*>& masks) const {
    if (!masks.empty() && masks.size() != windows.size()) {
        throw ConfigError("one mask per window required");
    }
    const Index p = config_.patch_len;
    Batch batch;
    batch.samples = static_cast<Index>(windows.size());
    batch.features.resize(batch.samples * channels_ * token_seq_, core::patch_feature_width(p));
    batch.stats.reserve(static_cast<std::size_t>(batch.samples * channels_));
    Index row = 0;
    for (std::size_t b = 0; b < windows.size(); ++b) {
        const Matrix& raw = *windows[b];
        if (raw.rows() != config_.lookback || raw.cols() != channels_) {
            throw ConfigError("window is " + std::to_string(raw.rows()) + "x" +
                              std::to_string(raw.cols()) + ", model expects " +
                              std::to_string(config_.lookback) + "x" + std::to_string(channels_));
        }
        Matrix window = raw;
        for (Index v = 0; v < channels_; ++v) {
            if (masks.empty()) {
                batch.stats.push_back(core::instance_normalize(window.col(v)).stats);
                continue;
            }
            const core::MaskMatrix& mask = *masks[b];
            std::vector<double> observed;
            for (Index t = 0; t < window.rows(); ++t) {
                if (mask(t, v) != 0) observed.push_back(window(t, v));
            }
            const auto stats =
                core::instance_normalize(Eigen::Map<const Eigen::VectorXd>(
                                             observed.data(), static_cast<Index>(observed.size())))
                    .stats;
            for (Index t = 0; t < window.rows(); ++t) {
                if (mask(t, v) == 0) window(t, v) = stats.mean;
            }
            batch.stats.push_back(stats);
        }
        if (const auto& dec = config_.variant.mechanisms.decomposition) {
            const auto parts = core::decompose_additive(window, dec->period, dec->kernel);
            for (Index v = 0; v < channels_; ++v) {
                for (const Matrix* part : {&parts.trend, &parts.seasonal, &parts.residual}) {
                    const auto pf = core::patch_features(part->col(v), p, config_.stride);
                    batch.features.middleRows(row, patches_) = pf.features;
                    row += patches_;
                }
            }
        } else {
            for (Index v = 0; v < channels_; ++v) {
                const auto pf = core::patch_features(window.col(v), p, config_.stride);
                batch.features.middleRows(row, patches_) = pf.features;
                row += patches_;
            }
        }
    }
    return batch;
}

TaskModel::Output TaskModel::forward(const Batch& batch, bool capture) const {
    Output out;
    ad::Var x = embed_.forward(ad::constant(batch.features));
    if (const auto k = config_.variant.mechanisms.prototypes) {
        const Index sequences = x->rows() / token_seq_;
        Matrix protos(sequences * *k, x->cols());
        for (Index i = 0; i < sequences; ++i) {
            protos.middleRows(i * *k, *k) =
                zoo::select_prototypes(x->value.middleRows(i * token_seq_, token_seq_), *bank_, *k)
                    .prototypes;
        }
        x = ad::concat_blocks(ad::constant(std::move(protos)), *k, x, token_seq_);
    }
    if (mixer_) x = mixer_->forward(x);
    if (capture) out.pre = x->value;
    ad::Var y = built_.backbone->forward(x, backbone_seq_);
    if (capture) out.post = y->value;
    if (projection_) {
        out.result = heads::denormalize_rows(projection_->forward(y), batch.stats);
    } else {
        out.result = classifier_->forward(y);
    }
    return out;
}

nn::ParameterList TaskModel::parameters() {
    nn::ParameterList out;
    embed_.collect(out);
    if (mixer_) mixer_->collect(out);
    built_.backbone->collect(out);
    if (projection_) projection_->collect(out);
    if (classifier_) classifier_->collect(out);
    return out;
}

}  // namespace tslab::harness
