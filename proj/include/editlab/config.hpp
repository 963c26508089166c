#pragma once
// Experiment configuration: one JSON document covering every pipeline stage,
// with strict unknown-key rejection and documented defaults.

#include "editlab/common.hpp"
#include "editlab/corpus.hpp"
#include "editlab/editor.hpp"
#include "editlab/interventions.hpp"
#include "editlab/lens.hpp"
#include "editlab/maskforge.hpp"
#include "editlab/model.hpp"

#include <algorithm>
#include <initializer_list>
#include <string>
#include <vector>

namespace editlab {

namespace detail {

template <class T>
constexpr const char* json_type_name() {
    if constexpr (std::is_same_v<T, bool>) {
        return "boolean";
    } else if constexpr (std::is_same_v<T, std::string>) {
        return "string";
    } else if constexpr (std::is_integral_v<T>) {
        return "integer";
    } else if constexpr (std::is_floating_point_v<T>) {
        return "number";
    } else {
        return "array";
    }
}

inline void check_keys(const json& j, const std::string& scope,
                       std::initializer_list<const char*> allowed) {
    require(j.is_object(), "config section '" + scope + "' must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* key : allowed) {
            known = known || it.key() == key;
        }
        if (!known) {
            fail("unknown config key '", scope.empty() ? it.key() : scope + "." + it.key(), "'");
        }
    }
}

template <class T>
void read_key(const json& j, const char* key, const std::string& scope, T& out) {
    if (!j.contains(key)) {
        return;  // keep the default
    }
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        fail("config key '", scope.empty() ? key : scope + "." + key, "': expected ",
             json_type_name<T>());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-stage sections not already covered by module config structs
// ---------------------------------------------------------------------------

struct EditConfig {
    std::string method = "rome";  // rome | memit
    int layer = 1;                // rome target layer
    int first_layer = 1;          // memit range
    int last_layer = 2;
    std::string ridge_mode = "relative-mean-diag";  // absolute | relative-mean-diag
    double ridge_value = 0.1;
    int covariance_tokens = 10000;  // leading slice of the neutral training text
    SolveConfig solve;

    RidgeSpec ridge() const {
        return ridge_mode == "absolute" ? RidgeSpec::absolute(ridge_value)
                                        : RidgeSpec::relative(ridge_value);
    }

    void validate() const {
        require(method == "rome" || method == "memit",
                "edit.method must be 'rome' or 'memit'");
        require(ridge_mode == "absolute" || ridge_mode == "relative-mean-diag",
                "edit.ridge_mode must be 'absolute' or 'relative-mean-diag'");
        require(ridge_value > 0.0, "edit.ridge_value must be positive");
        require(covariance_tokens >= 2, "edit.covariance_tokens must be >= 2");
        require(first_layer <= last_layer, "edit.first_layer must be <= edit.last_layer");
        require(solve.max_steps >= 0 && solve.lr > 0.0 && solve.weight_decay >= 0.0 &&
                    solve.target_p > 0.0 && solve.target_p < 1.0,
                "edit.solve settings out of range");
    }
};

struct SplitConfig {
    std::string mode = "stratified-by-relation";  // or relation-disjoint
    int n_train = 20;
    int n_test = 10;

    SplitMode split_mode() const {
        return mode == "relation-disjoint" ? SplitMode::RelationDisjoint
                                           : SplitMode::StratifiedByRelation;
    }

    void validate() const {
        require(mode == "stratified-by-relation" || mode == "relation-disjoint",
                "split.mode must be 'stratified-by-relation' or 'relation-disjoint'");
        require(n_train >= 1 && n_test >= 0, "split sizes out of range");
    }
};

struct EvaluateConfig {
    double kl_temperature = 1.0;
    int histogram_bins = 10;

    void validate() const {
        require(kl_temperature > 0.0, "evaluate.kl_temperature must be positive");
        require(histogram_bins >= 1, "evaluate.histogram_bins must be >= 1");
    }
};

struct AnalysisConfig {
    std::string convention = "raw-additive";
    int top_k_dims = 5;

    void validate() const {
        parse_convention(convention);
        require(top_k_dims >= 1, "analysis.top_k_dims must be >= 1");
    }
};

struct PruneSweepConfig {
    std::vector<std::string> criteria = {"unstructured-delta-w", "unstructured-w-hat",
                                         "structured-column-norm", "structured-activation"};
    std::vector<double> pcts = {0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
    std::vector<std::string> modes = {"zero", "original"};

    void validate() const {
        require(!criteria.empty() && !pcts.empty() && !modes.empty(),
                "prune sweep lists must be non-empty");
        for (const auto& c : criteria) {
            parse_criterion(c);
        }
        for (const auto& m : modes) {
            parse_mode(m);
        }
        require(std::is_sorted(pcts.begin(), pcts.end()),
                "prune.pcts must be sorted ascending");
        for (double p : pcts) {
            require(p >= 0.0 && p <= 1.0, "prune pct must lie in [0,1]");
        }
    }
};

// ---------------------------------------------------------------------------
// LabConfig
// ---------------------------------------------------------------------------

// The only seed in the schema is the top-level one; every stage derives its
// own stream from it, so a (config, seed) pair pins the whole pipeline.
struct LabConfig {
    int schema_version = 1;
    std::uint64_t seed = 7;
    CorpusSpec corpus;
    ModelConfig model;
    PretrainConfig pretrain;
    EditConfig edit;
    SplitConfig split;
    MaskTrainerConfig mask;
    EvaluateConfig evaluate;
    AnalysisConfig analysis;
    PruneSweepConfig prune;

    void validate() const {
        require(schema_version == 1, "config schema_version must be 1");
        corpus.validate();
        // vocab_size is resolved from the corpus at run time; keep the rest honest.
        require(model.n_layers > 0 && model.d_model > 0 && model.n_heads > 0 &&
                    model.d_mlp >= model.d_model && model.max_seq_len > 1 && model.ln_eps > 0,
                "model settings out of range");
        require(model.d_model % model.n_heads == 0, "model.d_model must be divisible by n_heads");
        require(pretrain.steps >= 0 && pretrain.batch_size >= 1 && pretrain.lr > 0.0 &&
                    pretrain.fact_fraction >= 0.0 && pretrain.fact_fraction <= 1.0 &&
                    pretrain.log_every >= 1,
                "pretrain settings out of range");
        edit.validate();
        require(edit.layer >= 0 && edit.layer < model.n_layers, "edit.layer out of range");
        if (edit.method == "memit") {
            require(edit.first_layer >= 0 && edit.last_layer < model.n_layers,
                    "edit layer range out of range");
        }
        split.validate();
        mask.validate();
        evaluate.validate();
        analysis.validate();
        prune.validate();
    }

    json to_json() const {
        json j;
        j["schema_version"] = schema_version;
        j["seed"] = seed;
        j["corpus"] = json{{"n_subjects", corpus.n_subjects},
                           {"n_relations", corpus.n_relations},
                           {"n_objects", corpus.n_objects},
                           {"facts_per_relation", corpus.facts_per_relation},
                           {"n_special", corpus.n_special},
                           {"n_subject_tokens", corpus.n_subject_tokens},
                           {"n_relation_tokens", corpus.n_relation_tokens},
                           {"n_object_tokens", corpus.n_object_tokens},
                           {"n_filler_tokens", corpus.n_filler_tokens},
                           {"templates_per_relation", corpus.templates_per_relation},
                           {"two_token_subject_fraction", corpus.two_token_subject_fraction},
                           {"neutral_train_tokens", corpus.neutral_train_tokens},
                           {"neutral_eval_tokens", corpus.neutral_eval_tokens},
                           {"build_edit_pool", corpus.build_edit_pool}};
        j["model"] = json{{"n_layers", model.n_layers}, {"d_model", model.d_model},
                          {"n_heads", model.n_heads},   {"d_mlp", model.d_mlp},
                          {"max_seq_len", model.max_seq_len}, {"ln_eps", model.ln_eps}};
        j["pretrain"] = json{{"steps", pretrain.steps},
                             {"batch_size", pretrain.batch_size},
                             {"lr", pretrain.lr},
                             {"fact_fraction", pretrain.fact_fraction},
                             {"log_every", pretrain.log_every}};
        j["edit"] = json{{"method", edit.method},
                         {"layer", edit.layer},
                         {"first_layer", edit.first_layer},
                         {"last_layer", edit.last_layer},
                         {"ridge_mode", edit.ridge_mode},
                         {"ridge_value", edit.ridge_value},
                         {"covariance_tokens", edit.covariance_tokens},
                         {"solve_max_steps", edit.solve.max_steps},
                         {"solve_lr", edit.solve.lr},
                         {"solve_weight_decay", edit.solve.weight_decay},
                         {"solve_target_p", edit.solve.target_p}};
        j["split"] = json{{"mode", split.mode}, {"n_train", split.n_train},
                          {"n_test", split.n_test}};
        json m = mask.to_json();
        m.erase("seed");
        j["mask"] = std::move(m);
        j["evaluate"] = json{{"kl_temperature", evaluate.kl_temperature},
                             {"histogram_bins", evaluate.histogram_bins}};
        j["analysis"] = json{{"convention", analysis.convention},
                             {"top_k_dims", analysis.top_k_dims}};
        j["prune"] = json{{"criteria", prune.criteria}, {"pcts", prune.pcts},
                          {"modes", prune.modes}};
        return j;
    }

    static LabConfig from_json(const json& j) {
        using detail::check_keys;
        using detail::read_key;
        LabConfig c;
        check_keys(j, "", {"schema_version", "seed", "corpus", "model", "pretrain", "edit",
                           "split", "mask", "evaluate", "analysis", "prune"});
        read_key(j, "schema_version", "", c.schema_version);
        read_key(j, "seed", "", c.seed);

        if (j.contains("corpus")) {
            const json& s = j.at("corpus");
            check_keys(s, "corpus",
                       {"n_subjects", "n_relations", "n_objects", "facts_per_relation",
                        "n_special", "n_subject_tokens", "n_relation_tokens", "n_object_tokens",
                        "n_filler_tokens", "templates_per_relation", "two_token_subject_fraction",
                        "neutral_train_tokens", "neutral_eval_tokens", "build_edit_pool"});
            read_key(s, "n_subjects", "corpus", c.corpus.n_subjects);
            read_key(s, "n_relations", "corpus", c.corpus.n_relations);
            read_key(s, "n_objects", "corpus", c.corpus.n_objects);
            read_key(s, "facts_per_relation", "corpus", c.corpus.facts_per_relation);
            read_key(s, "n_special", "corpus", c.corpus.n_special);
            read_key(s, "n_subject_tokens", "corpus", c.corpus.n_subject_tokens);
            read_key(s, "n_relation_tokens", "corpus", c.corpus.n_relation_tokens);
            read_key(s, "n_object_tokens", "corpus", c.corpus.n_object_tokens);
            read_key(s, "n_filler_tokens", "corpus", c.corpus.n_filler_tokens);
            read_key(s, "templates_per_relation", "corpus", c.corpus.templates_per_relation);
            read_key(s, "two_token_subject_fraction", "corpus",
                     c.corpus.two_token_subject_fraction);
            read_key(s, "neutral_train_tokens", "corpus", c.corpus.neutral_train_tokens);
            read_key(s, "neutral_eval_tokens", "corpus", c.corpus.neutral_eval_tokens);
            read_key(s, "build_edit_pool", "corpus", c.corpus.build_edit_pool);
        }
        if (j.contains("model")) {
            const json& s = j.at("model");
            check_keys(s, "model",
                       {"n_layers", "d_model", "n_heads", "d_mlp", "max_seq_len", "ln_eps"});
            read_key(s, "n_layers", "model", c.model.n_layers);
            read_key(s, "d_model", "model", c.model.d_model);
            read_key(s, "n_heads", "model", c.model.n_heads);
            read_key(s, "d_mlp", "model", c.model.d_mlp);
            read_key(s, "max_seq_len", "model", c.model.max_seq_len);
            read_key(s, "ln_eps", "model", c.model.ln_eps);
        }
        if (j.contains("pretrain")) {
            const json& s = j.at("pretrain");
            check_keys(s, "pretrain",
                       {"steps", "batch_size", "lr", "fact_fraction", "log_every"});
            read_key(s, "steps", "pretrain", c.pretrain.steps);
            read_key(s, "batch_size", "pretrain", c.pretrain.batch_size);
            read_key(s, "lr", "pretrain", c.pretrain.lr);
            read_key(s, "fact_fraction", "pretrain", c.pretrain.fact_fraction);
            read_key(s, "log_every", "pretrain", c.pretrain.log_every);
        }
        if (j.contains("edit")) {
            const json& s = j.at("edit");
            check_keys(s, "edit",
                       {"method", "layer", "first_layer", "last_layer", "ridge_mode",
                        "ridge_value", "covariance_tokens", "solve_max_steps", "solve_lr",
                        "solve_weight_decay", "solve_target_p"});
            read_key(s, "method", "edit", c.edit.method);
            read_key(s, "layer", "edit", c.edit.layer);
            read_key(s, "first_layer", "edit", c.edit.first_layer);
            read_key(s, "last_layer", "edit", c.edit.last_layer);
            read_key(s, "ridge_mode", "edit", c.edit.ridge_mode);
            read_key(s, "ridge_value", "edit", c.edit.ridge_value);
            read_key(s, "covariance_tokens", "edit", c.edit.covariance_tokens);
            read_key(s, "solve_max_steps", "edit", c.edit.solve.max_steps);
            read_key(s, "solve_lr", "edit", c.edit.solve.lr);
            read_key(s, "solve_weight_decay", "edit", c.edit.solve.weight_decay);
            read_key(s, "solve_target_p", "edit", c.edit.solve.target_p);
        }
        if (j.contains("split")) {
            const json& s = j.at("split");
            check_keys(s, "split", {"mode", "n_train", "n_test"});
            read_key(s, "mode", "split", c.split.mode);
            read_key(s, "n_train", "split", c.split.n_train);
            read_key(s, "n_test", "split", c.split.n_test);
        }
        if (j.contains("mask")) {
            const json& s = j.at("mask");
            check_keys(s, "mask",
                       {"delta", "s_max", "beta_kl", "t_start", "t_max", "tau_start", "tau_decay",
                        "lr", "adam_beta1", "adam_beta2", "weight_decay", "epochs", "batch_size",
                        "theta_init_mean", "theta_init_std", "gamma"});
            read_key(s, "delta", "mask", c.mask.delta);
            read_key(s, "s_max", "mask", c.mask.s_max);
            read_key(s, "beta_kl", "mask", c.mask.beta_kl);
            read_key(s, "t_start", "mask", c.mask.t_start);
            read_key(s, "t_max", "mask", c.mask.t_max);
            read_key(s, "tau_start", "mask", c.mask.tau_start);
            read_key(s, "tau_decay", "mask", c.mask.tau_decay);
            read_key(s, "lr", "mask", c.mask.lr);
            read_key(s, "adam_beta1", "mask", c.mask.adam_beta1);
            read_key(s, "adam_beta2", "mask", c.mask.adam_beta2);
            read_key(s, "weight_decay", "mask", c.mask.weight_decay);
            read_key(s, "epochs", "mask", c.mask.epochs);
            read_key(s, "batch_size", "mask", c.mask.batch_size);
            read_key(s, "theta_init_mean", "mask", c.mask.theta_init_mean);
            read_key(s, "theta_init_std", "mask", c.mask.theta_init_std);
            read_key(s, "gamma", "mask", c.mask.gamma);
        }
        if (j.contains("evaluate")) {
            const json& s = j.at("evaluate");
            check_keys(s, "evaluate", {"kl_temperature", "histogram_bins"});
            read_key(s, "kl_temperature", "evaluate", c.evaluate.kl_temperature);
            read_key(s, "histogram_bins", "evaluate", c.evaluate.histogram_bins);
        }
        if (j.contains("analysis")) {
            const json& s = j.at("analysis");
            check_keys(s, "analysis", {"convention", "top_k_dims"});
            read_key(s, "convention", "analysis", c.analysis.convention);
            read_key(s, "top_k_dims", "analysis", c.analysis.top_k_dims);
        }
        if (j.contains("prune")) {
            const json& s = j.at("prune");
            check_keys(s, "prune", {"criteria", "pcts", "modes"});
            read_key(s, "criteria", "prune", c.prune.criteria);
            read_key(s, "pcts", "prune", c.prune.pcts);
            read_key(s, "modes", "prune", c.prune.modes);
        }
        c.validate();
        return c;
    }
};

inline LabConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        fail("config file ", path.string(), " is not valid JSON: ", e.what());
    }
    return LabConfig::from_json(j);
}

}  // namespace editlab
