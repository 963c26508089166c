#pragma once
// End-to-end experiment stages behind the CLI: corpus generation, pretraining,
// editing, mask training, evaluation, analyses, pruning sweeps, edit blocking
// and the full `reproduce` recipe. Every stage reads and writes only inside
// its run directory and records a manifest.

#include "editlab/config.hpp"
#include "editlab/corpus.hpp"
#include "editlab/editor.hpp"
#include "editlab/evaluator.hpp"
#include "editlab/interventions.hpp"
#include "editlab/lens.hpp"
#include "editlab/manifest.hpp"
#include "editlab/maskforge.hpp"
#include "editlab/model.hpp"

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

namespace editlab {

// Per-stage seed streams derived from the single master seed.
struct SeedPlan {
    std::uint64_t master = 7;
    std::uint64_t corpus = 0, model = 0, pretrain = 0, split = 0, mask = 0;

    static SeedPlan from(std::uint64_t m) {
        SeedPlan p;
        p.master = m;
        p.corpus = derive_seed(m, 0xC0);
        p.model = derive_seed(m, 0x3D);
        p.pretrain = derive_seed(m, 0x9E);
        p.split = derive_seed(m, 0x5A);
        p.mask = derive_seed(m, 0x33);
        return p;
    }

    json to_json() const {
        return json{{"master", master}, {"corpus", corpus},   {"model", model},
                    {"pretrain", pretrain}, {"split", split}, {"mask", mask}};
    }
};

namespace stages {

// ---------------------------------------------------------------------------
// Shared loaders (each records its inputs in the manifest)
// ---------------------------------------------------------------------------

inline Corpus load_corpus_stage(RunDir& rd) {
    const auto dir = rd.root() / "corpus";
    require(std::filesystem::exists(dir / "corpus.json"),
            "missing " + (dir / "corpus.json").string() + "; run gen-corpus first");
    for (const char* name :
         {"corpus.json", "train_sentences.txt", "neutral_train.txt", "neutral_eval.txt"}) {
        rd.note_input(dir / name);
    }
    return load_corpus(dir);
}

inline EditSplit load_splits_stage(RunDir& rd, const Corpus& corpus) {
    const auto path = rd.root() / "corpus" / "splits.json";
    require(std::filesystem::exists(path),
            "missing " + path.string() + "; run gen-corpus first");
    rd.note_input(path);
    return load_splits(corpus, path);
}

inline TransformerModel load_model_stage(RunDir& rd) {
    const auto path = rd.root() / "checkpoints" / "model.bin";
    require(std::filesystem::exists(path), "missing " + path.string() + "; run pretrain first");
    rd.note_input(path);
    return load_model(path);
}

inline std::vector<EditedLayerWeights> load_edits_stage(RunDir& rd,
                                                        const std::vector<EditRequest>& requests,
                                                        const std::string& prefix) {
    std::vector<EditedLayerWeights> out;
    for (const auto& req : requests) {
        const auto path =
            rd.root() / "edits" / (prefix + "_edit_" + std::to_string(req.edit_id) + ".bin");
        require(std::filesystem::exists(path), "missing " + path.string() + "; run edit first");
        rd.note_input(path);
        out.push_back(load_edit(path));
    }
    return out;
}

inline MaskState load_mask_stage(RunDir& rd, MaskTrainerConfig* cfg_out = nullptr) {
    const auto tensors = rd.root() / "masks" / "mask.bin";
    const auto meta = rd.root() / "masks" / "mask.json";
    require(std::filesystem::exists(tensors) && std::filesystem::exists(meta),
            "missing mask under " + (rd.root() / "masks").string() + "; run train-mask first");
    rd.note_input(tensors);
    rd.note_input(meta);
    return load_mask(tensors, meta, cfg_out);
}

inline std::vector<int> covariance_slice(const Corpus& corpus, const LabConfig& cfg) {
    require(static_cast<int>(corpus.neutral_train.size()) >= cfg.edit.covariance_tokens,
            "neutral training text is shorter than edit.covariance_tokens");
    return std::vector<int>(corpus.neutral_train.begin(),
                            corpus.neutral_train.begin() + cfg.edit.covariance_tokens);
}

inline std::string mask_checksum(const Matrix& m) {
    return to_hex(fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double)));
}

inline json success_to_json(const SuccessReport& report) {
    json records = json::array();
    for (const auto& r : report.records) {
        records.push_back(json{{"edit_id", r.edit_id},
                               {"p_new", r.p_new},
                               {"p_old", r.p_old},
                               {"success", r.success}});
    }
    return json{{"fraction", report.fraction}, {"records", std::move(records)}};
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

inline void do_gen_corpus(RunDir& rd, const LabConfig& cfg, const SeedPlan& plan) {
    CorpusSpec spec = cfg.corpus;
    spec.seed = plan.corpus;
    const Corpus corpus = generate_corpus(spec);

    const auto dir = rd.sub("corpus");
    save_corpus(corpus, dir);
    for (const char* name :
         {"corpus.json", "train_sentences.txt", "neutral_train.txt", "neutral_eval.txt"}) {
        rd.note_artifact(dir / name);
    }

    const EditSplit split = split_edits(corpus, cfg.split.n_train, cfg.split.n_test,
                                        cfg.split.split_mode(), plan.split);
    save_splits(corpus, split, dir / "splits.json");
    rd.note_artifact(dir / "splits.json");

    auto stats_json = [](const StatsRecord& s) {
        return json{{"facts", s.facts},
                    {"relations", s.relations},
                    {"unique_objects", s.unique_objects},
                    {"unique_subjects", s.unique_subjects},
                    {"unique_mappings", s.unique_mappings}};
    };
    json stats;
    stats["train"] = stats_json(corpus_stats(split.train));
    stats["test"] = split.test.empty() ? json(nullptr) : stats_json(corpus_stats(split.test));
    rd.write_artifact(rd.sub("metrics") / "corpus_stats.json", stats.dump(2) + "\n");

    std::ostringstream msg;
    msg << "gen-corpus: " << corpus.facts.size() << " facts, vocab " << corpus.vocab.size()
        << ", " << split.train.size() << " train / " << split.test.size() << " test edits";
    rd.log(msg.str());
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

inline void do_pretrain(RunDir& rd, const LabConfig& cfg, const SeedPlan& plan) {
    const Corpus corpus = load_corpus_stage(rd);

    ModelConfig mc = cfg.model;
    mc.vocab_size = corpus.vocab.size();
    mc.seed = plan.model;
    TransformerModel model = init_model(mc);

    PretrainConfig pc = cfg.pretrain;
    pc.seed = plan.pretrain;
    const PretrainReport report = pretrain(model, corpus, pc);

    const auto ckpt = rd.sub("checkpoints") / "model.bin";
    save_model(model, ckpt);
    rd.note_artifact(ckpt);

    const double ppl = perplexity(model, corpus.neutral_eval);
    json metrics{{"steps", pc.steps},
                 {"final_loss", report.loss_curve.empty() ? 0.0 : report.loss_curve.back().second},
                 {"facts_total", report.facts_total},
                 {"facts_correct", report.facts_correct},
                 {"recall", report.recall},
                 {"ppl_neutral_eval", ppl}};
    rd.write_artifact(rd.sub("metrics") / "pretrain.json", metrics.dump(2) + "\n");

    std::ostringstream curve;
    curve << "step,loss\n";
    curve.precision(12);
    for (const auto& [step, loss] : report.loss_curve) {
        curve << step << ',' << loss << '\n';
    }
    rd.write_artifact(rd.sub("metrics") / "pretrain_loss.csv", curve.str());

    std::ostringstream msg;
    msg << "pretrain: recall " << report.facts_correct << "/" << report.facts_total
        << ", neutral ppl " << ppl;
    rd.log(msg.str());
}

// ---------------------------------------------------------------------------
// edit
// ---------------------------------------------------------------------------

inline void do_edit(RunDir& rd, const LabConfig& cfg, const SeedPlan&) {
    const Corpus corpus = load_corpus_stage(rd);
    const TransformerModel model = load_model_stage(rd);
    const EditSplit split = load_splits_stage(rd, corpus);
    const std::vector<int> text = covariance_slice(corpus, cfg);
    const auto edits_dir = rd.sub("edits");

    json metrics;
    metrics["method"] = cfg.edit.method;

    if (cfg.edit.method == "rome") {
        const KeyCovariance cov =
            estimate_key_covariance(model, cfg.edit.layer, text, cfg.edit.ridge());
        RomeConfig rc;
        rc.layer = cfg.edit.layer;
        rc.solve = cfg.edit.solve;

        auto run_split = [&](const std::vector<EditRequest>& requests, const std::string& prefix) {
            SuccessReport report;
            int wins = 0;
            for (const auto& req : requests) {
                const RomeResult rome = rome_edit(model, corpus, req, cov, rc);
                const auto base_name = prefix + "_edit_" + std::to_string(req.edit_id);
                save_edit(rome.weights, edits_dir / (base_name + ".bin"));
                rd.note_artifact(edits_dir / (base_name + ".bin"));
                rd.write_artifact(edits_dir / (base_name + ".json"),
                                  edit_sidecar(corpus, req, rc.layer, rome.achieved_p).dump(2) +
                                      "\n");
                const SuccessReport one = edit_success(rome.model, corpus, {req});
                report.records.push_back(one.records.front());
                wins += one.records.front().success ? 1 : 0;
            }
            report.fraction =
                requests.empty() ? 0.0 : static_cast<double>(wins) / requests.size();
            return report;
        };

        const SuccessReport train = run_split(split.train, "train");
        metrics["layer"] = cfg.edit.layer;
        metrics["train"] = success_to_json(train);
        if (!split.test.empty()) {
            metrics["test"] = success_to_json(run_split(split.test, "test"));
        } else {
            metrics["test"] = nullptr;
        }

        std::ostringstream msg;
        msg << "edit[rome]: train success " << train.fraction * 100.0 << "%";
        rd.log(msg.str());
    } else {
        std::vector<KeyCovariance> covs;
        for (int l = cfg.edit.first_layer; l <= cfg.edit.last_layer; ++l) {
            covs.push_back(estimate_key_covariance(model, l, text, cfg.edit.ridge()));
        }
        MemitConfig mc;
        mc.first_layer = cfg.edit.first_layer;
        mc.last_layer = cfg.edit.last_layer;
        mc.solve = cfg.edit.solve;
        const MemitResult result = memit_edit(model, corpus, split.train, covs, mc);
        for (const auto& w : result.weights) {
            const auto path = edits_dir / ("memit_layer_" + std::to_string(w.layer) + ".bin");
            save_edit(w, path);
            rd.note_artifact(path);
        }
        const SuccessReport report = edit_success(result.model, corpus, split.train);
        metrics["layers"] = json{cfg.edit.first_layer, cfg.edit.last_layer};
        metrics["train"] = success_to_json(report);
        metrics["achieved_p"] = result.achieved_p;

        std::ostringstream msg;
        msg << "edit[memit]: train success " << report.fraction * 100.0 << "%";
        rd.log(msg.str());
    }

    rd.write_artifact(rd.sub("metrics") / "edit_success.json", metrics.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// train-mask
// ---------------------------------------------------------------------------

inline void do_train_mask(RunDir& rd, const LabConfig& cfg, const SeedPlan& plan) {
    require(cfg.edit.method == "rome", "train-mask requires rome edits (one shared layer)");
    const Corpus corpus = load_corpus_stage(rd);
    const TransformerModel model = load_model_stage(rd);
    const EditSplit split = load_splits_stage(rd, corpus);
    const std::vector<EditedLayerWeights> edits = load_edits_stage(rd, split.train, "train");

    MaskTrainerConfig mcfg = cfg.mask;
    mcfg.seed = plan.mask;
    const MaskTrainResult result = train_shared_mask(model, corpus, edits, split.train, mcfg);

    const auto masks = rd.sub("masks");
    save_mask(result.state, mcfg, masks / "mask.bin", masks / "mask.json");
    rd.note_artifact(masks / "mask.bin");
    rd.note_artifact(masks / "mask.json");
    rd.write_artifact(masks / "train_log.csv", mask_log_csv(result.log));

    const BinaryMask bin = binarize(result.state);
    json summary{{"layer", result.state.layer},
                 {"gamma", result.state.gamma},
                 {"tau_final", result.state.tau},
                 {"epochs", mcfg.epochs},
                 {"pruned_fraction", bin.pruned_fraction},
                 {"mask_checksum", mask_checksum(bin.m)}};
    if (!result.log.empty()) {
        const EpochLog& last = result.log.back();
        summary["final_losses"] = json{{"l_kl", last.l_kl},
                                       {"l_sparsity", last.l_sparsity},
                                       {"l_restoration", last.l_restoration},
                                       {"total", last.total}};
    }
    rd.write_artifact(rd.sub("metrics") / "mask_summary.json", summary.dump(2) + "\n");

    std::ostringstream msg;
    msg << "train-mask: pruned fraction " << bin.pruned_fraction << " after " << mcfg.epochs
        << " epochs";
    rd.log(msg.str());
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

inline void do_evaluate(RunDir& rd, const LabConfig& cfg, const SeedPlan&) {
    require(cfg.edit.method == "rome", "evaluate requires rome edits (one shared layer)");
    const Corpus corpus = load_corpus_stage(rd);
    const TransformerModel model = load_model_stage(rd);
    const EditSplit split = load_splits_stage(rd, corpus);
    const std::vector<EditedLayerWeights> train_edits = load_edits_stage(rd, split.train, "train");
    const MaskState state = load_mask_stage(rd);
    const BinaryMask bin = binarize(state);

    json metrics;
    metrics["mask_checksum"] = mask_checksum(bin.m);
    metrics["pruned_fraction"] = bin.pruned_fraction;

    const auto records_train =
        build_reversal_records(model, corpus, train_edits, split.train, bin.m);
    rd.write_artifact(rd.sub("metrics") / "reversal_train.csv",
                      reversal_records_csv(records_train));
    metrics["rsr_train"] = rsr(records_train);
    metrics["n_train"] = records_train.size();
    metrics["top1_train"] = top1_overlap(records_train);

    if (!split.test.empty()) {
        const std::vector<EditedLayerWeights> test_edits =
            load_edits_stage(rd, split.test, "test");
        const auto records_test =
            build_reversal_records(model, corpus, test_edits, split.test, bin.m);
        rd.write_artifact(rd.sub("metrics") / "reversal_test.csv",
                          reversal_records_csv(records_test));
        metrics["rsr_test"] = rsr(records_test);
        metrics["n_test"] = records_test.size();
        metrics["top1_test"] = top1_overlap(records_test);
        if (split.test.size() >= 2) {
            std::vector<double> da, db;
            for (const auto& r : records_train) {
                da.push_back(r.delta_r);
            }
            for (const auto& r : records_test) {
                db.push_back(r.delta_r);
            }
            try {
                metrics["signal_delta_r_train_vs_test"] = signal_stats_json(signal_stats(da, db));
            } catch (const Error& e) {
                metrics["signal_delta_r_train_vs_test"] = json{{"error", e.what()}};
            }
        } else {
            metrics["signal_delta_r_train_vs_test"] = nullptr;
        }
    } else {
        metrics["rsr_test"] = nullptr;
        metrics["n_test"] = 0;
        metrics["top1_test"] = nullptr;
        metrics["signal_delta_r_train_vs_test"] = nullptr;
    }

    // Perplexity triple; edited/pruned are means over per-edit models.
    const double ppl_m = perplexity(model, corpus.neutral_eval);
    std::vector<double> ppl_me, ppl_mp;
    std::vector<KlPair> pairs;
    std::vector<double> kl_me_samples, kl_mp_samples;
    double top1_neutral_acc = 0.0;
    auto windows = chunk_stream(corpus.neutral_eval, model.config.max_seq_len);
    if (windows.size() > 32) {
        windows.resize(32);
    }
    for (std::size_t i = 0; i < train_edits.size(); ++i) {
        const auto& elw = train_edits[i];
        const TransformerModel me = with_layer_wproj(model, elw.layer, elw.w_hat);
        const TransformerModel mp =
            with_layer_wproj(model, elw.layer, elw.w_hat.cwiseProduct(bin.m));
        ppl_me.push_back(perplexity(me, corpus.neutral_eval));
        ppl_mp.push_back(perplexity(mp, corpus.neutral_eval));
        const RenderedPrompt prompt = corpus.render_canonical(split.train[i].fact);
        const KlPair pair =
            kl_pairs(model, me, mp, {prompt.tokens}, cfg.evaluate.kl_temperature).front();
        pairs.push_back(pair);
        kl_me_samples.push_back(pair.kl_me);
        kl_mp_samples.push_back(pair.kl_mp);
        top1_neutral_acc += top1_overlap(model, mp, windows);
    }
    const double n_edits = static_cast<double>(train_edits.size());
    auto mean = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) {
            acc += x;
        }
        return acc / static_cast<double>(v.size());
    };
    metrics["ppl"] = json{{"m", ppl_m},
                          {"me_mean", mean(ppl_me)},
                          {"mp_mean", mean(ppl_mp)},
                          {"me_per_edit", ppl_me},
                          {"mp_per_edit", ppl_mp}};
    metrics["top1_neutral_mean"] = top1_neutral_acc / n_edits;
    metrics["kl"] = kl_summary_json(summarize_kl(pairs, cfg.evaluate.histogram_bins));
    try {
        metrics["signal_kl_me_vs_mp"] =
            signal_stats_json(signal_stats(kl_me_samples, kl_mp_samples));
    } catch (const Error& e) {
        metrics["signal_kl_me_vs_mp"] = json{{"error", e.what()}};
    }

    rd.write_artifact(rd.sub("metrics") / "evaluation.json", metrics.dump(2) + "\n");

    std::ostringstream msg;
    msg << "evaluate: RSR train " << metrics["rsr_train"].get<double>();
    if (!split.test.empty()) {
        msg << ", test " << metrics["rsr_test"].get<double>();
    }
    msg << "; ppl m/me/mp " << ppl_m << "/" << mean(ppl_me) << "/" << mean(ppl_mp);
    rd.log(msg.str());
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

inline void do_analyze(RunDir& rd, const LabConfig& cfg, const SeedPlan&,
                       const std::string& kind) {
    require(kind == "decompose" || kind == "mask" || kind == "trajectories",
            "analyze kind must be decompose, mask or trajectories");
    require(cfg.edit.method == "rome", "analyze requires rome edits (one shared layer)");
    const Corpus corpus = load_corpus_stage(rd);
    const TransformerModel model = load_model_stage(rd);
    const EditSplit split = load_splits_stage(rd, corpus);
    const std::vector<EditedLayerWeights> edits = load_edits_stage(rd, split.train, "train");
    const MaskState state = load_mask_stage(rd);
    const BinaryMask bin = binarize(state);
    const LensConvention conv = parse_convention(cfg.analysis.convention);
    const int layer = state.layer;
    const auto analysis = rd.sub("analysis");

    if (kind == "decompose") {
        // Six aggregate curves; each edit is decomposed under its own
        // edited/pruned weights and its own canonical prompt.
        std::vector<DecompositionTrace> traces[3][2];
        std::vector<std::vector<int>> prompt_set;
        for (std::size_t i = 0; i < edits.size(); ++i) {
            const RenderedPrompt prompt = corpus.render_canonical(split.train[i].fact);
            prompt_set.push_back(prompt.tokens);
            const TransformerModel me = with_layer_wproj(model, layer, edits[i].w_hat);
            const TransformerModel mp =
                with_layer_wproj(model, layer, edits[i].w_hat.cwiseProduct(bin.m));
            const TransformerModel* models[3] = {&model, &me, &mp};
            const int targets[2] = {split.train[i].fact.object, split.train[i].new_object};
            for (int mi = 0; mi < 3; ++mi) {
                for (int ti = 0; ti < 2; ++ti) {
                    traces[mi][ti].push_back(
                        decompose(*models[mi], prompt.tokens, targets[ti], conv));
                }
            }
        }
        TraceComparison cmp;
        cmp.convention = conv;
        cmp.n_layers = model.config.n_layers;
        const char* names[3] = {"m", "m_e", "m_p"};
        const char* tnames[2] = {"o", "o_star"};
        for (int mi = 0; mi < 3; ++mi) {
            for (int ti = 0; ti < 2; ++ti) {
                cmp.curves.push_back(
                    TraceCurve{names[mi], tnames[ti], aggregate_traces(traces[mi][ti])});
            }
        }
        rd.write_artifact(analysis / "traces.csv", trace_comparison_csv(cmp));

        const AmplificationReport amp =
            edited_layer_amplification(traces[0][1], traces[1][1], layer);
        json amp_json{{"layer", amp.layer},
                      {"n", amp.n},
                      {"baseline_mean_abs", amp.baseline_mean_abs},
                      {"edited_mean_abs", amp.edited_mean_abs},
                      {"ratio", amp.infinite ? json(nullptr) : json(amp.ratio)},
                      {"infinite", amp.infinite}};
        // Mean attention contribution to o* at layers downstream of the edit.
        if (layer + 1 < model.config.n_layers) {
            auto downstream = [&](int mi) {
                const TraceStats s = aggregate_traces(traces[mi][1]);
                double acc = 0.0;
                for (int l = layer + 1; l < model.config.n_layers; ++l) {
                    acc += s.attn_mean[static_cast<std::size_t>(l)];
                }
                return acc / (model.config.n_layers - layer - 1);
            };
            const double dm = downstream(0), dme = downstream(1), dmp = downstream(2);
            amp_json["downstream_attn_o_star"] =
                json{{"m", dm},
                     {"m_e", dme},
                     {"m_p", dmp},
                     {"gap_edited", std::abs(dme - dm)},
                     {"gap_pruned", std::abs(dmp - dm)}};
        } else {
            amp_json["downstream_attn_o_star"] = nullptr;
        }
        rd.write_artifact(analysis / "amplification.json", amp_json.dump(2) + "\n");

        // Heatmaps for the first edit's prompt under all three models.
        const RenderedPrompt p0 = corpus.render_canonical(split.train.front().fact);
        const TransformerModel me0 = with_layer_wproj(model, layer, edits.front().w_hat);
        const TransformerModel mp0 =
            with_layer_wproj(model, layer, edits.front().w_hat.cwiseProduct(bin.m));
        rd.write_artifact(analysis / "heatmap_m.csv", heatmap_csv(activation_heatmap(model, p0.tokens)));
        rd.write_artifact(analysis / "heatmap_me.csv", heatmap_csv(activation_heatmap(me0, p0.tokens)));
        rd.write_artifact(analysis / "heatmap_mp.csv", heatmap_csv(activation_heatmap(mp0, p0.tokens)));

        json meta{{"convention", to_string(conv)},
                  {"n_edits", edits.size()},
                  {"prompt_set_checksum", to_hex(prompt_set_checksum(prompt_set))},
                  {"base_model_checksum", to_hex(model_checksum(model))},
                  {"mask_checksum", mask_checksum(bin.m)}};
        rd.write_artifact(analysis / "decompose_meta.json", meta.dump(2) + "\n");
        rd.log("analyze[decompose]: wrote traces, amplification, heatmaps");
        return;
    }

    if (kind == "mask") {
        const MaskStructure ms = mask_structure(bin, cfg.analysis.top_k_dims);
        rd.write_artifact(analysis / "mask_structure.csv", mask_structure_csv(ms));
        json top = json::array();
        for (int d : ms.top_dims) {
            top.push_back(
                json{{"dim", d}, {"pruned_pct", ms.pruned_pct[static_cast<std::size_t>(d)]}});
        }
        json stats{{"total_pruned", ms.total_pruned},
                   {"pruned_fraction", bin.pruned_fraction},
                   {"top_dims", std::move(top)}};

        json per_edit = json::array();
        double overall = 0.0, masked = 0.0, overlap = 0.0;
        int masked_n = 0;
        for (std::size_t i = 0; i < edits.size(); ++i) {
            const DeltaMagnitudeStats d = delta_magnitude_stats(edits[i], bin);
            per_edit.push_back(json{
                {"edit_ids", edits[i].edit_ids},
                {"mean_abs_delta_overall", d.mean_abs_delta_overall},
                {"mean_abs_delta_masked",
                 d.mean_abs_delta_masked ? json(*d.mean_abs_delta_masked) : json(nullptr)},
                {"overlap_with_top_delta", d.overlap_with_top_delta},
                {"pruned_count", d.pruned_count}});
            overall += d.mean_abs_delta_overall;
            if (d.mean_abs_delta_masked) {
                masked += *d.mean_abs_delta_masked;
                overlap += d.overlap_with_top_delta;
                ++masked_n;
            }
        }
        stats["delta"] = json{
            {"mean_abs_delta_overall", overall / static_cast<double>(edits.size())},
            {"mean_abs_delta_masked",
             masked_n > 0 ? json(masked / masked_n) : json(nullptr)},
            {"mean_overlap_with_top_delta",
             masked_n > 0 ? json(overlap / masked_n) : json(nullptr)},
            {"per_edit", std::move(per_edit)}};
        rd.write_artifact(analysis / "mask_structure.json", stats.dump(2) + "\n");
        rd.log("analyze[mask]: wrote mask structure and delta statistics");
        return;
    }

    // trajectories
    const MaskStructure ms = mask_structure(bin, cfg.analysis.top_k_dims);
    const TransformerModel me0 = with_layer_wproj(model, layer, edits.front().w_hat);
    const TransformerModel mp0 =
        with_layer_wproj(model, layer, edits.front().w_hat.cwiseProduct(bin.m));
    std::vector<std::vector<int>> prompts;
    for (const auto& req : split.train) {
        prompts.push_back(corpus.render_canonical(req.fact).tokens);
    }
    const auto curves = dimension_trajectories(model, me0, mp0, ms.top_dims, prompts);
    rd.write_artifact(analysis / "trajectories.csv", trajectories_csv(curves));
    json meta{{"dims", ms.top_dims},
              {"edit_ids", edits.front().edit_ids},
              {"n_prompts", prompts.size()}};
    rd.write_artifact(analysis / "trajectories_meta.json", meta.dump(2) + "\n");
    rd.log("analyze[trajectories]: wrote per-dimension activation curves");
}

// ---------------------------------------------------------------------------
// prune-sweep
// ---------------------------------------------------------------------------

inline void do_prune_sweep(RunDir& rd, const LabConfig& cfg, const SeedPlan&) {
    require(cfg.edit.method == "rome", "prune-sweep requires rome edits (one shared layer)");
    const Corpus corpus = load_corpus_stage(rd);
    const TransformerModel model = load_model_stage(rd);
    const EditSplit split = load_splits_stage(rd, corpus);
    const std::vector<EditedLayerWeights> edits = load_edits_stage(rd, split.train, "train");

    std::vector<PruneCriterion> criteria;
    for (const auto& c : cfg.prune.criteria) {
        criteria.push_back(parse_criterion(c));
    }
    std::vector<PruneMode> modes;
    for (const auto& m : cfg.prune.modes) {
        modes.push_back(parse_mode(m));
    }
    const Vector stats =
        activation_stats(model, cfg.edit.layer, covariance_slice(corpus, cfg));
    const auto points =
        prune_sweep(model, corpus, edits, split.train, criteria, cfg.prune.pcts, modes, &stats);
    rd.write_artifact(rd.sub("analysis") / "prune_sweep.csv", sweep_csv(points));
    json meta{{"criteria", cfg.prune.criteria},
              {"modes", cfg.prune.modes},
              {"pcts", cfg.prune.pcts},
              {"n_edits", edits.size()}};
    rd.write_artifact(rd.sub("analysis") / "prune_sweep_meta.json", meta.dump(2) + "\n");
    rd.log("prune-sweep: " + std::to_string(points.size()) + " points");
}

// ---------------------------------------------------------------------------
// block-edit
// ---------------------------------------------------------------------------

inline void do_block_edit(RunDir& rd, const LabConfig& cfg, const SeedPlan&) {
    require(cfg.edit.method == "rome", "block-edit requires rome edits");
    const Corpus corpus = load_corpus_stage(rd);
    const TransformerModel model = load_model_stage(rd);
    const EditSplit split = load_splits_stage(rd, corpus);
    const MaskState state = load_mask_stage(rd);
    const BinaryMask bin = binarize(state);

    const KeyCovariance cov = estimate_key_covariance(model, cfg.edit.layer,
                                                      covariance_slice(corpus, cfg),
                                                      cfg.edit.ridge());
    RomeConfig rc;
    rc.layer = cfg.edit.layer;
    rc.solve = cfg.edit.solve;
    const BlockingReport report = blocking_report(model, corpus, split.train, bin.m, cov, rc);

    rd.write_artifact(rd.sub("analysis") / "blocking.csv", blocking_csv(report));
    json buckets = json::array();
    for (const auto& b : report.buckets) {
        buckets.push_back(json{{"relation", b.relation},
                               {"n", b.n},
                               {"standard_success", b.standard_success},
                               {"blocked_success", b.blocked_success}});
    }
    json metrics{{"n", report.n_total},
                 {"standard_rate", report.standard_rate()},
                 {"blocked_rate", report.blocked_rate()},
                 {"drop_pp", 100.0 * (report.standard_rate() - report.blocked_rate())},
                 {"per_relation", std::move(buckets)}};
    rd.write_artifact(rd.sub("metrics") / "blocking.json", metrics.dump(2) + "\n");

    std::ostringstream msg;
    msg << "block-edit: standard " << report.standard_rate() * 100.0 << "% -> blocked "
        << report.blocked_rate() * 100.0 << "%";
    rd.log(msg.str());
}

}  // namespace stages

// ---------------------------------------------------------------------------
// Public entry points (one manifest per command)
// ---------------------------------------------------------------------------

inline void run_gen_corpus(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_gen_corpus(rd, cfg, plan);
    rd.finish("gen-corpus", cfg.to_json(), plan.to_json());
}

inline void run_pretrain(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_pretrain(rd, cfg, plan);
    rd.finish("pretrain", cfg.to_json(), plan.to_json());
}

inline void run_edit(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_edit(rd, cfg, plan);
    rd.finish("edit " + cfg.edit.method, cfg.to_json(), plan.to_json());
}

inline void run_train_mask(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_train_mask(rd, cfg, plan);
    rd.finish("train-mask", cfg.to_json(), plan.to_json());
}

inline void run_evaluate(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_evaluate(rd, cfg, plan);
    rd.finish("evaluate", cfg.to_json(), plan.to_json());
}

inline void run_analyze(const LabConfig& cfg, const std::filesystem::path& out, bool quiet,
                        const std::string& kind) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_analyze(rd, cfg, plan, kind);
    rd.finish("analyze " + kind, cfg.to_json(), plan.to_json());
}

inline void run_prune_sweep(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_prune_sweep(rd, cfg, plan);
    rd.finish("prune-sweep", cfg.to_json(), plan.to_json());
}

inline void run_block_edit(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_block_edit(rd, cfg, plan);
    rd.finish("block-edit", cfg.to_json(), plan.to_json());
}

// Full desk-scale pipeline in one run directory, one manifest.
inline void run_reproduce(const LabConfig& cfg, const std::filesystem::path& out, bool quiet) {
    RunDir rd(out, quiet);
    const SeedPlan plan = SeedPlan::from(cfg.seed);
    stages::do_gen_corpus(rd, cfg, plan);
    stages::do_pretrain(rd, cfg, plan);
    stages::do_edit(rd, cfg, plan);
    stages::do_train_mask(rd, cfg, plan);
    stages::do_evaluate(rd, cfg, plan);
    stages::do_analyze(rd, cfg, plan, "decompose");
    stages::do_analyze(rd, cfg, plan, "mask");
    stages::do_analyze(rd, cfg, plan, "trajectories");
    stages::do_prune_sweep(rd, cfg, plan);
    stages::do_block_edit(rd, cfg, plan);
    rd.finish("reproduce", cfg.to_json(), plan.to_json());
}

}  // namespace editlab
