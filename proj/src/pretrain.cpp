#include <cmath>
#include <random>

#include "tslab/error.hpp"
#include "tslab/harness.hpp"

namespace tslab::harness {

namespace {

/// Each token has three successors with probabilities 0.6 / 0.3 / 0.1.
struct MarkovChain {
    std::vector<std::array<int, 3>> next;

    MarkovChain(Index vocab, std::mt19937_64& rng) {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab) - 1);
        next.resize(static_cast<std::size_t>(vocab));
        for (auto& n : next) n = {pick(rng), pick(rng), pick(rng)};
    }

    std::vector<int> sample(Index length, std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::uniform_int_distribution<int> start(0, static_cast<int>(next.size()) - 1);
        std::vector<int> out{start(rng)};
        while (static_cast<Index>(out.size()) < length) {
            const double r = u(rng);
            const auto& n = next[static_cast<std::size_t>(out.back())];
            out.push_back(r < 0.6 ? n[0] : r < 0.9 ? n[1] : n[2]);
        }
        return out;
    }
};

}  // namespace

PretrainReport pretrain_backbone(const PretrainOptions& o) {
    if (o.vocab < 2 || o.seq_len < 2 || o.steps < 1 || o.batch_size < 1) {
        throw ConfigError("pretraining needs vocab >= 2, seq_len >= 2, steps >= 1, batch >= 1");
    }
    std::mt19937_64 rng(o.seed);
    const MarkovChain chain(o.vocab, rng);

    zoo::VariantSpec spec;
    spec.kind = zoo::VariantKind::random;
    spec.width = o.width;
    spec.depth = o.depth;
    spec.heads = o.heads;
    spec.freeze_policy = zoo::FreezePolicy{zoo::FreezeKind::none};
    spec.seed = o.seed;
    auto built = zoo::build_variant(spec, o.width, o.seq_len);

    nn::Parameter wte =
        nn::make_parameter("wte", nn::Group::embedding, nn::normal_init(o.vocab, o.width, 0.1, rng));
    auto params = built.backbone->parameters();
    params.push_back(&wte);
    nn::Adam adam(params, {o.learning_rate});

    PretrainReport report;
    double tail = 0.0;
    Index tail_n = 0;
    for (Index step = 0; step < o.steps; ++step) {
        std::vector<Index> inputs;
        std::vector<int> labels;
        for (Index b = 0; b < o.batch_size; ++b) {
            const auto seq = chain.sample(o.seq_len + 1, rng);
            for (Index t = 0; t < o.seq_len; ++t) {
                inputs.push_back(seq[static_cast<std::size_t>(t)]);
                labels.push_back(seq[static_cast<std::size_t>(t + 1)]);
            }
        }
        adam.zero_grad();
        const ad::Var x = ad::gather_rows(wte.var, inputs);
        const ad::Var h = built.backbone->forward(x, o.seq_len);
        const ad::Var loss = ad::cross_entropy(ad::matmul_nt(h, wte.var), labels);
        const double value = loss->value(0, 0);
        if (!std::isfinite(value)) throw std::runtime_error("pretraining diverged at step " + std::to_string(step));
        if (step == 0) report.initial_loss = value;
        if (step >= o.steps - std::min<Index>(10, o.steps)) {
            tail += value;
            ++tail_n;
        }
        ad::backward(loss);
        adam.step();
    }
    report.final_loss = tail / static_cast<double>(tail_n);
    report.checkpoint = zoo::checkpoint_of(*built.backbone);
    report.checkpoint.tensors["wte"] = wte.var->value;
    return report;
}

}  // namespace tslab::harness
