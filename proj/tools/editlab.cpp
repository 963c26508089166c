// Command-line driver: wires the experiment stages to subcommands and owns
// exit-code policy (0 success, 1 usage error, 2 runtime error).

#include "editlab/config.hpp"
#include "editlab/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

namespace {

bool parse_seed_env(const char* text, std::uint64_t& out) {
    if (text == nullptr || *text == '\0') {
        return false;
    }
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(text, &end, 10);
    if (errno != 0 || end == nullptr || *end != '\0') {
        editlab::fail("EDITLAB_SEED is not a valid unsigned integer: '", text, "'");
    }
    out = static_cast<std::uint64_t>(v);
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"editlab: rank-one knowledge edits, shared reversal masks and analyses"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    bool quiet = false;
    std::uint64_t seed = 0;

    app.add_option("--config", config_path, "JSON config file (documented defaults when omitted)");
    auto* seed_opt =
        app.add_option("--seed", seed, "master seed (overrides EDITLAB_SEED and the config)");
    app.add_option("--out", out_dir, "run directory; all outputs stay inside it")
        ->capture_default_str();
    app.add_flag("--quiet", quiet, "suppress progress output");

    std::string edit_method;
    std::string analyze_kind;
    auto* c_gen = app.add_subcommand("gen-corpus", "generate the fact corpus and edit splits");
    auto* c_pre = app.add_subcommand("pretrain", "train the tiny transformer on the corpus");
    auto* c_edit = app.add_subcommand("edit", "apply knowledge edits");
    c_edit->add_option("method", edit_method, "rome | memit")
        ->check(CLI::IsMember({"rome", "memit"}));
    auto* c_mask = app.add_subcommand("train-mask", "train the shared reversal mask");
    auto* c_eval = app.add_subcommand("evaluate", "reversal, perplexity and KL metrics");
    auto* c_ana = app.add_subcommand("analyze", "residual decomposition and mask analyses");
    c_ana->add_option("kind", analyze_kind, "decompose | mask | trajectories")
        ->required()
        ->check(CLI::IsMember({"decompose", "mask", "trajectories"}));
    auto* c_sweep = app.add_subcommand("prune-sweep", "pruning-baseline RSR curves");
    auto* c_block = app.add_subcommand("block-edit", "edit with the mask active");
    auto* c_repro = app.add_subcommand("reproduce", "full desk-scale pipeline");
    for (CLI::App* sub : {c_gen, c_pre, c_edit, c_mask, c_eval, c_ana, c_sweep, c_block, c_repro}) {
        sub->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        editlab::LabConfig cfg;
        if (!config_path.empty()) {
            cfg = editlab::load_config(config_path);
        }
        std::uint64_t env_seed = 0;
        if (seed_opt->count() > 0) {
            cfg.seed = seed;
        } else if (parse_seed_env(std::getenv("EDITLAB_SEED"), env_seed)) {
            cfg.seed = env_seed;
        }
        if (!edit_method.empty()) {
            cfg.edit.method = edit_method;
        }
        cfg.validate();

        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "gen-corpus") {
            editlab::run_gen_corpus(cfg, out_dir, quiet);
        } else if (name == "pretrain") {
            editlab::run_pretrain(cfg, out_dir, quiet);
        } else if (name == "edit") {
            editlab::run_edit(cfg, out_dir, quiet);
        } else if (name == "train-mask") {
            editlab::run_train_mask(cfg, out_dir, quiet);
        } else if (name == "evaluate") {
            editlab::run_evaluate(cfg, out_dir, quiet);
        } else if (name == "analyze") {
            editlab::run_analyze(cfg, out_dir, quiet, analyze_kind);
        } else if (name == "prune-sweep") {
            editlab::run_prune_sweep(cfg, out_dir, quiet);
        } else if (name == "block-edit") {
            editlab::run_block_edit(cfg, out_dir, quiet);
        } else if (name == "reproduce") {
            editlab::run_reproduce(cfg, out_dir, quiet);
        } else {
            std::cerr << "unknown subcommand: " << name << "\n";
            return 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
