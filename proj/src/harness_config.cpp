#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include "tslab/error.hpp"
#include "tslab/harness.hpp"

namespace tslab::harness {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <typename T>
void maybe(const json& j, const char* key, const std::string& where, T& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = field<T>(j, key, where);
}

template <typename T>
void maybe(const json& j, const char* key, const std::string& where, std::optional<T>& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = field<T>(j, key, where);
}

zoo::VariantSpec parse_variant(const json& j) {
    check_keys(j, "variant",
               {"kind", "depth", "heads", "freeze_policy", "lora_rank", "lora_alpha", "mechanisms",
                "checkpoint"});
    zoo::VariantSpec spec;
    spec.kind = zoo::parse_variant_kind(field<std::string>(j, "kind", "variant"));
    maybe(j, "depth", "variant", spec.depth);
    maybe(j, "heads", "variant", spec.heads);
    if (j.contains("freeze_policy") && !j.at("freeze_policy").is_null()) {
        spec.freeze_policy = zoo::parse_freeze_policy(field<std::string>(j, "freeze_policy", "variant"));
    }
    if (j.contains("lora_rank") || j.contains("lora_alpha")) {
        zoo::FreezePolicy p = spec.freeze_policy.value_or(zoo::FreezePolicy{});
        maybe(j, "lora_rank", "variant", p.lora_rank);
        maybe(j, "lora_alpha", "variant", p.lora_alpha);
        if (spec.freeze_policy) spec.freeze_policy = p;
        else if (p.lora_rank != 8 || p.lora_alpha != 16.0) {
            throw ConfigError("variant.lora_rank/lora_alpha need freeze_policy \"lora\"");
        }
    }
    if (j.contains("checkpoint") && !j.at("checkpoint").is_null()) {
        spec.checkpoint = field<std::string>(j, "checkpoint", "variant");
    }
    if (j.contains("mechanisms")) {
        const json& m = j.at("mechanisms");
        check_keys(m, "variant.mechanisms", {"prototypes", "decomposition", "mixer"});
        maybe(m, "prototypes", "variant.mechanisms", spec.mechanisms.prototypes);
        if (m.contains("decomposition") && !m.at("decomposition").is_null()) {
            const json& d = m.at("decomposition");
            check_keys(d, "variant.mechanisms.decomposition", {"period", "kernel"});
            zoo::DecompositionSpec ds;
            maybe(d, "period", "decomposition", ds.period);
            maybe(d, "kernel", "decomposition", ds.kernel);
            spec.mechanisms.decomposition = ds;
        }
        if (m.contains("mixer") && !m.at("mixer").is_null()) {
            const json& x = m.at("mixer");
            check_keys(x, "variant.mechanisms.mixer", {"m", "token_hidden", "feature_hidden", "activation"});
            zoo::MixerSpec ms;
            maybe(x, "m", "mixer", ms.m);
            maybe(x, "token_hidden", "mixer", ms.token_hidden);
            maybe(x, "feature_hidden", "mixer", ms.feature_hidden);
            maybe(x, "activation", "mixer", ms.activation);
            spec.mechanisms.mixer = ms;
        }
    }
    return spec;
}

json variant_json(const zoo::VariantSpec& spec) {
    json j{{"kind", std::string(zoo::variant_name(spec.kind))},
           {"depth", spec.depth},
           {"heads", spec.heads}};
    if (spec.freeze_policy) {
        j["freeze_policy"] = std::string(zoo::freeze_name(spec.freeze_policy->kind));
        if (spec.freeze_policy->kind == zoo::FreezeKind::lora) {
            j["lora_rank"] = spec.freeze_policy->lora_rank;
            j["lora_alpha"] = spec.freeze_policy->lora_alpha;
        }
    }
    if (spec.checkpoint) j["checkpoint"] = spec.checkpoint->string();
    json m = json::object();
    if (spec.mechanisms.prototypes) m["prototypes"] = *spec.mechanisms.prototypes;
    if (spec.mechanisms.decomposition) {
        m["decomposition"] = {{"period", spec.mechanisms.decomposition->period},
                              {"kernel", spec.mechanisms.decomposition->kernel}};
    }
    if (spec.mechanisms.mixer) {
        const auto& x = *spec.mechanisms.mixer;
        m["mixer"] = {{"m", x.m},
                      {"token_hidden", x.token_hidden},
                      {"feature_hidden", x.feature_hidden},
                      {"activation", x.activation}};
    }
    j["mechanisms"] = m;
    return j;
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
    check_keys(j, "config",
               {"dataset", "task", "variant", "lookback", "patch_len", "stride", "d_model",
                "window_stride", "optimizer", "split", "seed", "output_dir", "prototype_bank_size",
                "max_lag", "alignment", "export_embeddings"});
    ExperimentConfig c;

    const json& d = j.at("dataset");
    check_keys(d, "dataset", {"path", "schema", "labels_path"});
    c.dataset.path = field<std::string>(d, "path", "dataset");
    if (d.contains("schema")) c.dataset.schema = core::parse_schema(field<std::string>(d, "schema", "dataset"));
    if (d.contains("labels_path") && !d.at("labels_path").is_null()) {
        c.dataset.labels_path = field<std::string>(d, "labels_path", "dataset");
    }

    const json& t = j.at("task");
    check_keys(t, "task",
               {"task", "horizon", "horizons", "mask_ratio", "mask_ratios", "anomaly_ratio",
                "point_adjust", "num_classes"});
    c.task.task = heads::parse_task(field<std::string>(t, "task", "task"));
    if (t.contains("horizon")) c.task.horizons.push_back(field<Index>(t, "horizon", "task"));
    if (t.contains("horizons")) {
        for (Index h : field<std::vector<Index>>(t, "horizons", "task")) c.task.horizons.push_back(h);
    }
    if (t.contains("mask_ratio")) c.task.mask_ratios.push_back(field<double>(t, "mask_ratio", "task"));
    if (t.contains("mask_ratios")) {
        for (double r : field<std::vector<double>>(t, "mask_ratios", "task")) c.task.mask_ratios.push_back(r);
    }
    maybe(t, "anomaly_ratio", "task", c.task.anomaly_ratio);
    maybe(t, "point_adjust", "task", c.task.point_adjust);
    maybe(t, "num_classes", "task", c.task.num_classes);

    c.variant = parse_variant(j.at("variant"));
    maybe(j, "lookback", "config", c.lookback);
    maybe(j, "patch_len", "config", c.patch_len);
    maybe(j, "stride", "config", c.stride);
    maybe(j, "d_model", "config", c.d_model);
    maybe(j, "window_stride", "config", c.window_stride);
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        check_keys(o, "optimizer",
                   {"learning_rates", "max_epochs", "patience", "batch_size", "max_steps_per_epoch",
                    "max_eval_windows"});
        maybe(o, "learning_rates", "optimizer", c.optimizer.learning_rates);
        maybe(o, "max_epochs", "optimizer", c.optimizer.max_epochs);
        maybe(o, "patience", "optimizer", c.optimizer.patience);
        maybe(o, "batch_size", "optimizer", c.optimizer.batch_size);
        maybe(o, "max_steps_per_epoch", "optimizer", c.optimizer.max_steps_per_epoch);
        maybe(o, "max_eval_windows", "optimizer", c.optimizer.max_eval_windows);
    }
    if (j.contains("split") && !j.at("split").is_null()) {
        const json& s = j.at("split");
        check_keys(s, "split", {"train", "validation", "test"});
        core::SplitFractions f;
        maybe(s, "train", "split", f.train);
        maybe(s, "validation", "split", f.validation);
        maybe(s, "test", "split", f.test);
        c.split = f;
    }
    maybe(j, "seed", "config", c.seed);
    if (j.contains("output_dir")) c.output_dir = field<std::string>(j, "output_dir", "config");
    maybe(j, "prototype_bank_size", "config", c.prototype_bank_size);
    maybe(j, "max_lag", "config", c.max_lag);
    maybe(j, "alignment", "config", c.alignment);
    maybe(j, "export_embeddings", "config", c.export_embeddings);
    c.variant.width = c.d_model;
    c.variant.seed = c.seed;
    return c;
}

json to_json(const ExperimentConfig& c) {
    json dataset{{"path", c.dataset.path.string()},
                 {"schema", std::string(core::schema_name(c.dataset.schema))}};
    if (c.dataset.labels_path) dataset["labels_path"] = c.dataset.labels_path->string();

    json task{{"task", std::string(heads::task_name(c.task.task))}};
    if (!c.task.horizons.empty()) task["horizons"] = c.task.horizons;
    if (!c.task.mask_ratios.empty()) task["mask_ratios"] = c.task.mask_ratios;
    if (c.task.anomaly_ratio) {
        task["anomaly_ratio"] = *c.task.anomaly_ratio;
        task["point_adjust"] = c.task.point_adjust;
    }
    if (c.task.num_classes) task["num_classes"] = *c.task.num_classes;

    json optimizer{{"learning_rates", c.optimizer.learning_rates},
                   {"max_epochs", c.optimizer.max_epochs},
                   {"patience", c.optimizer.patience},
                   {"batch_size", c.optimizer.batch_size}};
    if (c.optimizer.max_steps_per_epoch) optimizer["max_steps_per_epoch"] = *c.optimizer.max_steps_per_epoch;
    if (c.optimizer.max_eval_windows) optimizer["max_eval_windows"] = *c.optimizer.max_eval_windows;

    json j{{"dataset", dataset},
           {"task", task},
           {"variant", variant_json(c.variant)},
           {"lookback", c.lookback},
           {"patch_len", c.patch_len},
           {"stride", c.stride},
           {"d_model", c.d_model},
           {"window_stride", c.window_stride},
           {"optimizer", optimizer},
           {"seed", c.seed},
           {"output_dir", c.output_dir.string()},
           {"prototype_bank_size", c.prototype_bank_size},
           {"max_lag", c.max_lag},
           {"alignment", c.alignment},
           {"export_embeddings", c.export_embeddings}};
    if (c.split) {
        j["split"] = {{"train", c.split->train},
                      {"validation", c.split->validation},
                      {"test", c.split->test}};
    }
    return j;
}

void apply_env_overrides(ExperimentConfig& config) {
    const char* env = std::getenv("TSLAB_SEED");
    if (!env || !*env) return;
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ConfigError(std::string("TSLAB_SEED is not an integer: ") + env);
    config.seed = seed;
    config.variant.seed = seed;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    ExperimentConfig c = parse_config(j);
    // Relative paths are taken relative to the config file.
    const auto base = path.parent_path();
    auto resolve = [&](std::filesystem::path& p) {
        if (p.is_relative() && !base.empty()) p = base / p;
    };
    resolve(c.dataset.path);
    if (c.dataset.labels_path) resolve(*c.dataset.labels_path);
    if (c.variant.checkpoint) resolve(*c.variant.checkpoint);
    resolve(c.output_dir);
    apply_env_overrides(c);
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    if (!std::filesystem::exists(dataset.path)) {
        throw ConfigError("dataset path does not exist: " + dataset.path.string());
    }
    if (task.task == TaskKind::anomaly && !dataset.labels_path) {
        throw ConfigError("anomaly task needs dataset.labels_path");
    }
    if (dataset.labels_path && !std::filesystem::exists(*dataset.labels_path)) {
        throw ConfigError("labels path does not exist: " + dataset.labels_path->string());
    }
    if (variant.checkpoint && !std::filesystem::exists(*variant.checkpoint)) {
        throw ConfigError("checkpoint does not exist: " + variant.checkpoint->string());
    }
    if (lookback < 1) throw ConfigError("lookback must be >= 1");
    if (patch_len < 1 || patch_len > lookback) {
        throw ConfigError("patch_len must lie in [1, lookback]");
    }
    if (stride < 1) throw ConfigError("stride must be >= 1");
    if (window_stride < 1) throw ConfigError("window_stride must be >= 1");
    if (d_model < 1) throw ConfigError("d_model must be >= 1");
    if (variant.width != d_model) throw ConfigError("variant width must equal d_model");
    variant.validate();
    if (optimizer.learning_rates.empty()) throw ConfigError("learning_rates must not be empty");
    for (double lr : optimizer.learning_rates) {
        if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
    }
    if (optimizer.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (optimizer.patience < 1) throw ConfigError("patience must be >= 1");
    if (optimizer.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (optimizer.max_steps_per_epoch && *optimizer.max_steps_per_epoch < 1) {
        throw ConfigError("max_steps_per_epoch must be >= 1");
    }
    if (optimizer.max_eval_windows && *optimizer.max_eval_windows < 1) {
        throw ConfigError("max_eval_windows must be >= 1");
    }
    if (prototype_bank_size < 1) throw ConfigError("prototype_bank_size must be >= 1");
    if (max_lag < 1) throw ConfigError("max_lag must be >= 1");
    for (const auto& t : task_configs()) t.validate();
}

std::vector<heads::TaskConfig> ExperimentConfig::task_configs() const {
    std::vector<heads::TaskConfig> out;
    auto base = [&] {
        heads::TaskConfig t;
        t.task = task.task;
        t.point_adjust = task.point_adjust;
        return t;
    };
    auto forbid = [&](bool present, const char* what) {
        if (present) {
            throw ConfigError(std::string(heads::task_name(task.task)) + " task does not accept " + what);
        }
    };
    forbid(task.task != TaskKind::forecast && !task.horizons.empty(), "horizons");
    forbid(task.task != TaskKind::impute && !task.mask_ratios.empty(), "mask_ratios");
    switch (task.task) {
        case TaskKind::forecast:
            if (task.horizons.empty()) throw ConfigError("forecast task requires horizons");
            for (Index h : task.horizons) {
                auto t = base();
                t.horizon = h;
                out.push_back(t);
            }
            break;
        case TaskKind::impute:
            if (task.mask_ratios.empty()) throw ConfigError("impute task requires mask_ratios");
            for (double r : task.mask_ratios) {
                auto t = base();
                t.mask_ratio = r;
                out.push_back(t);
            }
            break;
        case TaskKind::anomaly: {
            auto t = base();
            t.anomaly_ratio = task.anomaly_ratio;
            t.num_classes = task.num_classes;
            out.push_back(t);
            break;
        }
        case TaskKind::classify: {
            auto t = base();
            t.num_classes = task.num_classes;
            t.anomaly_ratio = task.anomaly_ratio;
            out.push_back(t);
            break;
        }
    }
    return out;
}

std::string config_digest(const ExperimentConfig& config) {
    const std::string text = to_json(config).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace tslab::harness
