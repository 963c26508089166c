#include <editlab/evaluator.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace editlab;

namespace {

CorpusSpec small_spec() {
    CorpusSpec spec;
    spec.n_subjects = 10;
    spec.n_relations = 3;
    spec.n_objects = 8;
    spec.facts_per_relation = 6;
    spec.templates_per_relation = 2;
    spec.n_filler_tokens = 16;
    spec.neutral_train_tokens = 2000;
    spec.neutral_eval_tokens = 600;
    spec.seed = 5;
    return spec;
}

struct EvalFixture {
    Corpus corpus;
    TransformerModel model;
    std::vector<EditedLayerWeights> edits;
    std::vector<EditRequest> requests;

    EvalFixture() {
        corpus = generate_corpus(small_spec());
        ModelConfig c;
        c.n_layers = 2;
        c.d_model = 16;
        c.n_heads = 2;
        c.d_mlp = 32;
        c.vocab_size = corpus.vocab.size();
        c.max_seq_len = 16;
        c.seed = 71;
        model = init_model(c);
        const EditSplit split = split_edits(corpus, 3, 1, SplitMode::StratifiedByRelation, 9);
        requests = split.train;
        Rng rng(13);
        for (const auto& req : requests) {
            EditedLayerWeights elw;
            elw.layer = 1;
            elw.w = model.params.layers[1].w_proj;
            elw.w_hat = elw.w;
            for (Eigen::Index i = 0; i < elw.w_hat.rows(); ++i) {
                for (Eigen::Index j = 0; j < elw.w_hat.cols(); ++j) {
                    elw.w_hat(i, j) += 0.1 * rng.normal();
                }
            }
            elw.edit_ids = {req.edit_id};
            edits.push_back(std::move(elw));
        }
    }
};

ReversalRecord make_record(double delta) {
    ReversalRecord r;
    r.p_original = 0.4;
    r.p_new = 0.4 - delta;
    r.delta_r = delta;
    return r;
}

}  // namespace

TEST_CASE("rsr counts strictly positive probability gaps", "[evaluator]") {
    const std::vector<ReversalRecord> records{make_record(0.2), make_record(0.0),
                                              make_record(-0.1)};
    CHECK(rsr(records) == Catch::Approx(1.0 / 3.0).margin(1e-12));

    long not_reversed = 0;
    for (const auto& r : records) {
        not_reversed += r.delta_r <= 0.0 ? 1 : 0;
    }
    CHECK(rsr(records) + static_cast<double>(not_reversed) / 3.0 == 1.0);

    CHECK(rsr({make_record(1e-12)}) == 1.0);
    CHECK(rsr({make_record(0.0)}) == 0.0);
    CHECK_THROWS_AS(rsr({}), Error);
}

TEST_CASE("reversal records are internally consistent", "[evaluator]") {
    const EvalFixture fx;
    const Matrix ones = Matrix::Ones(16, 32);
    const auto records =
        build_reversal_records(fx.model, fx.corpus, fx.edits, fx.requests, ones);
    REQUIRE(records.size() == fx.edits.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        CHECK(r.edit_id == fx.requests[i].edit_id);
        CHECK(r.p_original > 0.0);
        CHECK(r.p_original < 1.0);
        CHECK(r.p_new > 0.0);
        CHECK(r.p_new < 1.0);
        CHECK(r.delta_r == r.p_original - r.p_new);
        // The all-ones mask makes M_p identical to M_e.
        CHECK(r.top1_mp == r.top1_me);
    }

    // Probabilities agree with a direct query of the masked (== edited) model.
    const TransformerModel me = apply_mask(fx.model, 1, ones);
    TransformerModel edited = fx.model;
    edited.params.layers[1].w_proj = fx.edits[0].w_hat;
    const RenderedPrompt prompt = fx.corpus.render_canonical(fx.requests[0].fact);
    CHECK(records[0].p_original ==
          Catch::Approx(object_prob(edited, prompt.tokens, fx.requests[0].fact.object))
              .margin(1e-12));
    CHECK(records[0].p_new ==
          Catch::Approx(object_prob(edited, prompt.tokens, fx.requests[0].new_object))
              .margin(1e-12));

    CHECK_THROWS_AS(
        build_reversal_records(fx.model, fx.corpus, fx.edits, fx.requests, Matrix::Ones(2, 2)),
        Error);
    CHECK_THROWS_AS(build_reversal_records(fx.model, fx.corpus, {}, {}, ones), Error);
}

TEST_CASE("top-1 overlap of a model with itself is one", "[evaluator]") {
    const EvalFixture fx;
    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < 5; ++i) {
        prompts.push_back(fx.corpus.render_canonical(fx.corpus.facts[static_cast<std::size_t>(i)]).tokens);
    }
    CHECK(top1_overlap(fx.model, fx.model, prompts) == 1.0);

    std::vector<ReversalRecord> records(4);
    records[0].top1_m = 1;
    records[0].top1_mp = 1;
    records[1].top1_m = 2;
    records[1].top1_mp = 3;
    records[2].top1_m = 0;
    records[2].top1_mp = 0;
    records[3].top1_m = 5;
    records[3].top1_mp = 4;
    CHECK(top1_overlap(records) == 0.5);
    CHECK_THROWS_AS(top1_overlap(fx.model, fx.model, {}), Error);
    CHECK_THROWS_AS(top1_overlap(std::vector<ReversalRecord>{}), Error);
}

TEST_CASE("perplexity triple shares one slice across models", "[evaluator]") {
    const EvalFixture fx;
    TransformerModel edited = fx.model;
    edited.params.layers[1].w_proj = fx.edits[0].w_hat;
    const TransformerModel pruned = apply_mask(edited, 1, Matrix::Ones(16, 32));

    const PerplexityTriple t =
        perplexity_triple(fx.model, edited, pruned, fx.corpus.neutral_eval);
    CHECK(t.ppl_m == perplexity(fx.model, fx.corpus.neutral_eval));
    CHECK(t.ppl_me == perplexity(edited, fx.corpus.neutral_eval));
    // All-ones mask: M_p is bit-identical to M_e, so the values agree exactly.
    CHECK(t.ppl_mp == t.ppl_me);

    const PerplexityTriple self =
        perplexity_triple(fx.model, fx.model, fx.model, fx.corpus.neutral_eval);
    CHECK(self.ppl_m == self.ppl_me);
    CHECK(self.ppl_me == self.ppl_mp);
}

TEST_CASE("kl pairs vanish for identical models and stay non-negative", "[evaluator]") {
    const EvalFixture fx;
    TransformerModel edited = fx.model;
    edited.params.layers[1].w_proj = fx.edits[0].w_hat;

    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < 6; ++i) {
        prompts.push_back(fx.corpus.render_canonical(fx.corpus.facts[static_cast<std::size_t>(i)]).tokens);
    }
    const auto pairs = kl_pairs(fx.model, edited, fx.model, prompts, 1.0);
    REQUIRE(pairs.size() == prompts.size());
    for (const auto& p : pairs) {
        CHECK(p.kl_me >= 0.0);
        CHECK(p.kl_mp >= 0.0);
        CHECK(p.kl_mp <= 1e-12);  // M_p == M here
    }
    CHECK_THROWS_AS(kl_pairs(fx.model, edited, fx.model, {}, 1.0), Error);
}

TEST_CASE("kl summary matches a dyadic hand fixture", "[evaluator]") {
    std::vector<KlPair> pairs(4);
    pairs[0].kl_me = 0.0;
    pairs[1].kl_me = 1.0;
    pairs[2].kl_me = 0.25;
    pairs[3].kl_me = 0.75;
    for (auto& p : pairs) {
        p.kl_mp = 0.5;
    }
    const KlSummary s = summarize_kl(pairs, 4);
    CHECK(s.mean_me == 0.5);
    CHECK(s.mean_mp == 0.5);
    CHECK(s.median_me == 0.5);
    CHECK(s.median_mp == 0.5);
    REQUIRE(s.bin_edges.size() == 5);
    CHECK(s.bin_edges.front() == 0.0);
    CHECK(s.bin_edges.back() == 1.0);
    CHECK(s.hist_me == std::vector<long>{1, 1, 0, 2});  // 1.0 clamps into the last bin
    CHECK(s.hist_mp == std::vector<long>{0, 0, 4, 0});
    CHECK_THROWS_AS(summarize_kl({}, 4), Error);

    const json j = kl_summary_json(s);
    CHECK(j.at("mean_kl_m_me").get<double>() == 0.5);
    CHECK(j.at("hist_kl_m_mp").get<std::vector<long>>() == std::vector<long>{0, 0, 4, 0});
}

TEST_CASE("signal stats reproduce hand-computed Welch and Cohen values", "[evaluator]") {
    // Sample 1: equal sizes and variances make every quantity closed-form:
    // means 0.2 and 0.5, both sample variances 1/160, pooled var 1/160,
    // d = 0.3*sqrt(160) = 1.2*sqrt(10), t = 6, Welch df = 8.
    const std::vector<double> a{0.1, 0.2, 0.15, 0.25, 0.3};
    const std::vector<double> b{0.5, 0.45, 0.6, 0.55, 0.4};
    const SignalStats s = signal_stats(a, b);
    CHECK(s.n_a == 5);
    CHECK(s.n_b == 5);
    CHECK(s.mean_a == Catch::Approx(0.2).margin(1e-12));
    CHECK(s.mean_b == Catch::Approx(0.5).margin(1e-12));
    CHECK(s.std_a == Catch::Approx(std::sqrt(1.0 / 160.0)).margin(1e-12));
    CHECK(s.std_b == Catch::Approx(std::sqrt(1.0 / 160.0)).margin(1e-12));
    CHECK(s.cohens_d == Catch::Approx(1.2 * std::sqrt(10.0)).margin(1e-9));
    CHECK(s.t == Catch::Approx(6.0).margin(1e-9));
    CHECK(s.df == Catch::Approx(8.0).margin(1e-9));
    CHECK(s.p == Catch::Approx(0.000323393221885149).margin(1e-9));

    // Sample 2: unequal sizes and variances exercise the fractional
    // Welch-Satterthwaite df.
    const std::vector<double> a2{1.0, 2.0, 3.0, 4.0, 10.0};
    const std::vector<double> b2{1.1, 1.9, 3.2, 3.8, 9.5, 2.5, 4.5};
    const SignalStats s2 = signal_stats(a2, b2);
    CHECK(s2.mean_a == Catch::Approx(4.0).margin(1e-12));
    CHECK(s2.std_a == Catch::Approx(3.5355339059327378).margin(1e-9));
    CHECK(s2.std_b == Catch::Approx(2.766724038418343).margin(1e-9));
    CHECK(s2.cohens_d == Catch::Approx(-0.06918616058511182).margin(1e-9));
    CHECK(s2.t == Catch::Approx(-0.1130399960209922).margin(1e-9));
    CHECK(s2.df == Catch::Approx(7.329709239824132).margin(1e-9));
    CHECK(s2.p == Catch::Approx(0.9130329309713536).margin(1e-9));

    const json j = signal_stats_json(s2);
    CHECK(j.at("welch_df").get<double>() == s2.df);
    CHECK(j.at("test").get<std::string>() == "welch-unequal-variance");
}

TEST_CASE("signal stats degenerate cases", "[evaluator]") {
    // Identical samples: no effect, p = 1.
    const std::vector<double> same{1.0, 2.0, 3.0, 4.0};
    const SignalStats null_case = signal_stats(same, same);
    CHECK(null_case.cohens_d == 0.0);
    CHECK(null_case.t == 0.0);
    CHECK(null_case.p == Catch::Approx(1.0).margin(1e-12));

    // Perfect separation with tiny jitter: huge effect, tiny p.
    const std::vector<double> zeros{0.0, 0.0, 0.0, 0.0};
    const std::vector<double> ones{1.0, 1.0, 1.0, 1.000001};
    const SignalStats sep = signal_stats(zeros, ones);
    CHECK(std::abs(sep.cohens_d) > 10.0);
    CHECK(sep.p < 0.01);

    CHECK_THROWS_AS(signal_stats({1.0, 1.0, 1.0}, {2.0, 2.0, 2.0}), Error);
    CHECK_THROWS_AS(signal_stats({1.0}, {2.0, 3.0}), Error);

    // df=1 is the Cauchy distribution: two-sided p at t=1 is exactly 1/2.
    CHECK(student_t_two_sided_p(1.0, 1.0) == Catch::Approx(0.5).margin(1e-12));
    CHECK(student_t_two_sided_p(0.0, 5.0) == Catch::Approx(1.0).margin(1e-12));
    CHECK_THROWS_AS(student_t_two_sided_p(1.0, 0.0), Error);
}

TEST_CASE("reversal csv lists one row per record", "[evaluator]") {
    std::vector<ReversalRecord> records{make_record(0.1), make_record(-0.2)};
    records[0].edit_id = 7;
    records[1].edit_id = 9;
    const std::string csv = reversal_records_csv(records);
    CHECK(csv.rfind("edit_id,p_original,p_new,delta_r,top1_m,top1_me,top1_mp\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find("\n7,") != std::string::npos);
    CHECK(csv.find("\n9,") != std::string::npos);
}
