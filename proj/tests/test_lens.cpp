#include <editlab/lens.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace editlab;

namespace {

TransformerModel lens_model(int n_layers = 2, std::uint64_t seed = 91) {
    ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.vocab_size = 30;
    c.max_seq_len = 12;
    c.seed = seed;
    return init_model(c);
}

std::vector<std::vector<int>> lens_prompts(const TransformerModel& model, int n, int len = 6) {
    Rng rng(derive_seed(model.config.seed, 0x11));
    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < n; ++i) {
        std::vector<int> p;
        for (int j = 0; j < len; ++j) {
            p.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(model.config.vocab_size))));
        }
        prompts.push_back(std::move(p));
    }
    return prompts;
}

DecompositionTrace trace_with_mlp(std::vector<double> mlp) {
    DecompositionTrace t;
    t.attn.assign(mlp.size(), 0.0);
    t.mlp = std::move(mlp);
    return t;
}

}  // namespace

TEST_CASE("raw decomposition telescopes to the target residual component", "[lens]") {
    const TransformerModel model = lens_model();
    for (const auto& prompt : lens_prompts(model, 12)) {
        const DecompositionTrace t = decompose(model, prompt, 3, LensConvention::RawAdditive);
        REQUIRE(t.attn.size() == 2);
        REQUIRE(t.mlp.size() == 2);
        REQUIRE(t.cumulative.size() == 5);
        double sum = t.embedding;
        for (std::size_t l = 0; l < t.attn.size(); ++l) {
            sum += t.attn[l] + t.mlp[l];
        }
        CHECK(sum == Catch::Approx(t.total).margin(1e-10));
        CHECK(t.cumulative.back() == Catch::Approx(t.total).margin(1e-10));

        // Independent embedding oracle straight from the parameter tensors.
        const Eigen::Index pos = static_cast<Eigen::Index>(prompt.size()) - 1;
        const Vector x0 = model.params.tok_emb.col(prompt[static_cast<std::size_t>(pos)]) +
                          model.params.pos_emb.col(pos);
        CHECK(t.embedding ==
              Catch::Approx(model.params.w_u.row(3).dot(x0.transpose())).margin(1e-12));
    }
    CHECK_THROWS_AS(decompose(model, {1, 2}, 30, LensConvention::RawAdditive), Error);
    CHECK_THROWS_AS(decompose(model, {1, 2}, -1, LensConvention::RawAdditive), Error);
}

TEST_CASE("frozen-ln decomposition telescopes to the logit minus bias", "[lens]") {
    const TransformerModel model = lens_model();
    for (const auto& prompt : lens_prompts(model, 12)) {
        const int target = 7;
        const DecompositionTrace t = decompose(model, prompt, target, LensConvention::FrozenLN);
        double sum = t.embedding;
        for (std::size_t l = 0; l < t.attn.size(); ++l) {
            sum += t.attn[l] + t.mlp[l];
        }
        CHECK(sum == Catch::Approx(t.total).margin(1e-9));

        const Matrix logits = forward(model, prompt);
        const double bias = model.params.w_u.row(target).dot(model.params.lnf_b.col(0).transpose());
        CHECK(t.total ==
              Catch::Approx(logits(target, logits.cols() - 1) - bias).margin(1e-12));
    }
}

TEST_CASE("doubling the last down-projection doubles exactly its mlp term", "[lens]") {
    const TransformerModel model = lens_model();
    const int last = model.config.n_layers - 1;
    const TransformerModel doubled = with_layer_wproj(
        model, last, Matrix(2.0 * model.params.layers[static_cast<std::size_t>(last)].w_proj));
    const auto prompts = lens_prompts(model, 6);
    std::vector<DecompositionTrace> base_traces, doubled_traces;
    for (const auto& p : prompts) {
        base_traces.push_back(decompose(model, p, 5, LensConvention::RawAdditive));
        doubled_traces.push_back(decompose(doubled, p, 5, LensConvention::RawAdditive));
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        // The last-layer mlp input is untouched, so its contribution scales by 2
        // and everything upstream is bit-identical.
        CHECK(doubled_traces[i].mlp.back() ==
              Catch::Approx(2.0 * base_traces[i].mlp.back()).margin(1e-12));
        CHECK(doubled_traces[i].embedding == base_traces[i].embedding);
        CHECK(doubled_traces[i].attn.back() == base_traces[i].attn.back());
        CHECK(doubled_traces[i].mlp.front() == base_traces[i].mlp.front());
    }

    const AmplificationReport r = edited_layer_amplification(base_traces, doubled_traces, last);
    CHECK(r.layer == last);
    CHECK(r.n == static_cast<int>(prompts.size()));
    CHECK_FALSE(r.infinite);
    CHECK(r.ratio == Catch::Approx(2.0).margin(1e-12));

    CHECK_THROWS_AS(edited_layer_amplification(base_traces, doubled_traces, 2), Error);
    CHECK_THROWS_AS(edited_layer_amplification({}, {}, 0), Error);

    const TransformerModel zeroed = with_layer_wproj(model, last, Matrix(Matrix::Zero(16, 32)));
    std::vector<DecompositionTrace> zero_traces;
    for (const auto& p : prompts) {
        zero_traces.push_back(decompose(zeroed, p, 5, LensConvention::RawAdditive));
    }
    const AmplificationReport inf_r = edited_layer_amplification(zero_traces, base_traces, last);
    CHECK(inf_r.infinite);
    CHECK(std::isinf(inf_r.ratio));
}

TEST_CASE("amplification ratio on reference magnitudes", "[lens]") {
    const std::vector<DecompositionTrace> before{trace_with_mlp({0.13})};
    const std::vector<DecompositionTrace> after{trace_with_mlp({4.55})};
    const AmplificationReport r = edited_layer_amplification(before, after, 0);
    CHECK(r.baseline_mean_abs == Catch::Approx(0.13).margin(1e-12));
    CHECK(r.edited_mean_abs == Catch::Approx(4.55).margin(1e-12));
    CHECK(r.ratio == Catch::Approx(35.0).margin(1e-9));
}

TEST_CASE("trace aggregation computes mean and standard error by hand", "[lens]") {
    DecompositionTrace t1, t2;
    t1.embedding = 1.0;
    t1.attn = {1.0, 3.0};
    t1.mlp = {0.0, 2.0};
    t2.embedding = 3.0;
    t2.attn = {3.0, 7.0};
    t2.mlp = {0.0, 6.0};
    const TraceStats s = aggregate_traces({t1, t2});
    CHECK(s.n == 2);
    CHECK(s.embedding_mean == 2.0);
    CHECK(s.embedding_se == 1.0);  // sd sqrt(2) over sqrt(2)
    CHECK(s.attn_mean == std::vector<double>{2.0, 5.0});
    CHECK(s.attn_se == std::vector<double>{1.0, 2.0});
    CHECK(s.mlp_mean == std::vector<double>{0.0, 4.0});
    CHECK(s.mlp_se == std::vector<double>{0.0, 2.0});

    const TraceStats single = aggregate_traces({t1});
    CHECK(single.embedding_mean == 1.0);
    CHECK(std::isnan(single.embedding_se));
    CHECK(std::isnan(single.attn_se[0]));

    DecompositionTrace short_trace;
    short_trace.attn = {1.0};
    short_trace.mlp = {1.0};
    CHECK_THROWS_AS(aggregate_traces({t1, short_trace}), Error);
    CHECK_THROWS_AS(aggregate_traces({}), Error);
}

TEST_CASE("trace comparison covers all six model-target conditions", "[lens]") {
    const TransformerModel model = lens_model();
    std::vector<LensPrompt> prompts;
    for (const auto& tokens : lens_prompts(model, 3)) {
        LensPrompt p;
        p.tokens = tokens;
        p.target_o = 4;
        p.target_o_star = 9;
        prompts.push_back(std::move(p));
    }
    const TraceComparison cmp = compare_traces(model, model, model, prompts);
    REQUIRE(cmp.curves.size() == 6);
    CHECK(cmp.n_layers == 2);
    CHECK(cmp.curves[0].model == "m");
    CHECK(cmp.curves[0].target == "o");
    CHECK(cmp.curves[1].target == "o_star");
    CHECK(cmp.curves[2].model == "m_e");
    CHECK(cmp.curves[4].model == "m_p");
    // Identical models must produce identical curves per target.
    CHECK(cmp.curves[0].stats.mlp_mean == cmp.curves[2].stats.mlp_mean);
    CHECK(cmp.curves[1].stats.attn_mean == cmp.curves[5].stats.attn_mean);
    CHECK(cmp.curves[0].stats.mlp_mean != cmp.curves[1].stats.mlp_mean);
    CHECK_THROWS_AS(compare_traces(model, model, model, {}), Error);

    const std::string csv = trace_comparison_csv(cmp);
    CHECK(csv.rfind("model,target,component,layer,mean,se\n", 0) == 0);
    CHECK(csv.find("m_p,o_star,mlp,1,") != std::string::npos);
}

TEST_CASE("heatmap rows replay the post-block residuals", "[lens]") {
    const TransformerModel model = lens_model();
    const std::vector<int> prompt{2, 5, 1, 7};
    const Matrix grid = activation_heatmap(model, prompt);
    REQUIRE(grid.rows() == 2);
    REQUIRE(grid.cols() == 16);

    ForwardCache cache;
    forward(model, prompt, {}, &cache);
    const ResidualTrace rt = residual_trace(cache);
    const Eigen::Index pos = 3;
    Vector x = rt.embedding.col(pos);
    for (int l = 0; l < 2; ++l) {
        x += rt.attn_inc[static_cast<std::size_t>(l)].col(pos) +
             rt.mlp_inc[static_cast<std::size_t>(l)].col(pos);
        CHECK((grid.row(l).transpose() - x).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK((grid.row(1).transpose() - rt.final_residual.col(pos)).cwiseAbs().maxCoeff() < 1e-12);

    const std::string csv = heatmap_csv(grid);
    CHECK(csv.rfind("layer,dim0,dim1", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("dimension trajectories track the heatmap per model and dim", "[lens]") {
    const TransformerModel model = lens_model();
    const auto prompts = lens_prompts(model, 1, 5);
    const auto curves = dimension_trajectories(model, model, model, {0, 3}, prompts);
    REQUIRE(curves.size() == 6);
    const Matrix grid = activation_heatmap(model, prompts[0]);
    for (const auto& c : curves) {
        REQUIRE(c.mean.size() == 2);
        for (int l = 0; l < 2; ++l) {
            CHECK(c.mean[static_cast<std::size_t>(l)] == grid(l, c.dim));
            CHECK(std::isnan(c.se[static_cast<std::size_t>(l)]));
        }
    }
    CHECK(curves[0].model == "m");
    CHECK(curves[1].model == "m_e");
    CHECK(curves[2].model == "m_p");
    CHECK(curves[0].dim == 0);
    CHECK(curves[3].dim == 3);

    // Duplicated prompt: zero sampling error.
    const auto dup = dimension_trajectories(model, model, model, {1},
                                            {prompts[0], prompts[0]});
    CHECK(dup[0].se[0] == 0.0);
    CHECK(dup[0].se[1] == 0.0);

    CHECK_THROWS_AS(dimension_trajectories(model, model, model, {16}, prompts), Error);
    CHECK_THROWS_AS(dimension_trajectories(model, model, model, {0}, {}), Error);

    const std::string csv = trajectories_csv(dup);
    CHECK(csv.rfind("dim,model,layer,mean,se\n", 0) == 0);
}

TEST_CASE("mask structure ranks output dimensions by pruned share", "[lens]") {
    BinaryMask mask;
    mask.m = Matrix(3, 4);
    mask.m.row(0) << 1, 1, 1, 1;
    mask.m.row(1) << 0, 1, 0, 1;
    mask.m.row(2) << 0, 0, 0, 1;
    const MaskStructure s = mask_structure(mask, 2);
    CHECK(s.pruned_pct == std::vector<double>{0.0, 50.0, 75.0});
    CHECK(s.total_pruned == 5);
    REQUIRE(s.sorted.size() == 3);
    CHECK(s.sorted[0] == std::pair<int, double>{2, 75.0});
    CHECK(s.sorted[1] == std::pair<int, double>{1, 50.0});
    CHECK(s.sorted[2] == std::pair<int, double>{0, 0.0});
    CHECK(s.top_dims == std::vector<int>{2, 1});

    // Equal percentages keep ascending dimension order (stable sort).
    BinaryMask tie;
    tie.m = Matrix(2, 2);
    tie.m << 0, 1, 1, 0;
    const MaskStructure ts = mask_structure(tie, 5);
    CHECK(ts.sorted[0].first == 0);
    CHECK(ts.sorted[1].first == 1);
    CHECK(ts.top_dims == std::vector<int>{0, 1});

    CHECK_THROWS_AS(mask_structure(BinaryMask{}, 2), Error);
    CHECK_THROWS_AS(mask_structure(tie, -1), Error);

    const std::string csv = mask_structure_csv(s);
    CHECK(csv.rfind("rank,dim,pruned_pct\n", 0) == 0);
    CHECK(csv.find("0,2,75") != std::string::npos);
}

TEST_CASE("delta magnitude stats compare pruning against the largest deltas", "[lens]") {
    EditedLayerWeights edit;
    edit.layer = 0;
    edit.w = Matrix::Zero(2, 2);
    edit.w_hat = Matrix(2, 2);
    edit.w_hat << 1.0, -2.0, 3.0, 0.5;

    BinaryMask off_target;
    off_target.m = Matrix(2, 2);
    off_target.m << 0, 1, 1, 0;  // prunes |1.0| and |0.5|
    const DeltaMagnitudeStats s = delta_magnitude_stats(edit, off_target);
    CHECK(s.mean_abs_delta_overall == Catch::Approx(1.625).margin(1e-12));
    REQUIRE(s.mean_abs_delta_masked.has_value());
    CHECK(*s.mean_abs_delta_masked == Catch::Approx(0.75).margin(1e-12));
    CHECK(s.pruned_count == 2);
    CHECK(s.overlap_with_top_delta == 0.0);  // top-2 by |delta| are 3.0 and -2.0

    BinaryMask on_target;
    on_target.m = Matrix(2, 2);
    on_target.m << 1, 0, 0, 1;  // prunes |3.0| and |-2.0|
    const DeltaMagnitudeStats s2 = delta_magnitude_stats(edit, on_target);
    CHECK(*s2.mean_abs_delta_masked == Catch::Approx(2.5).margin(1e-12));
    CHECK(s2.overlap_with_top_delta == 1.0);

    BinaryMask keep_all;
    keep_all.m = Matrix::Ones(2, 2);
    const DeltaMagnitudeStats s3 = delta_magnitude_stats(edit, keep_all);
    CHECK(s3.pruned_count == 0);
    CHECK_FALSE(s3.mean_abs_delta_masked.has_value());

    BinaryMask wrong;
    wrong.m = Matrix::Ones(3, 2);
    CHECK_THROWS_AS(delta_magnitude_stats(edit, wrong), Error);
}

TEST_CASE("decomposition csv and convention tags round-trip", "[lens]") {
    const TransformerModel model = lens_model(1);
    const DecompositionTrace t = decompose(model, {1, 2, 3}, 2, LensConvention::RawAdditive);
    const std::string csv = decomposition_csv(t);
    CHECK(csv.rfind("component,layer,contribution,cumulative\n", 0) == 0);
    CHECK(csv.find("embedding,-1,") != std::string::npos);
    CHECK(csv.find("attn,0,") != std::string::npos);
    CHECK(csv.find("mlp,0,") != std::string::npos);
    CHECK(csv.find("total,-1,") != std::string::npos);

    CHECK(to_string(LensConvention::RawAdditive) == "raw-additive");
    CHECK(to_string(LensConvention::FrozenLN) == "frozen-ln");
    CHECK(parse_convention("raw-additive") == LensConvention::RawAdditive);
    CHECK(parse_convention("frozen-ln") == LensConvention::FrozenLN);
    CHECK_THROWS_AS(parse_convention("other"), Error);
}

TEST_CASE("lens metadata checksums distinguish inputs", "[lens]") {
    const TransformerModel model = lens_model();
    TransformerModel other = model;
    other.params.layers[0].w_proj(0, 0) += 1.0;
    const std::vector<std::vector<int>> prompts{{1, 2, 3}, {4, 5, 6}};
    const json meta = lens_metadata(LensConvention::FrozenLN, prompts, model, other, model);
    CHECK(meta.at("convention") == "frozen-ln");
    CHECK(meta.at("n_prompts").get<std::size_t>() == 2);
    const auto sums = meta.at("model_checksums");
    CHECK(sums.at("m").get<std::string>() == sums.at("m_p").get<std::string>());
    CHECK(sums.at("m").get<std::string>() != sums.at("m_e").get<std::string>());

    const std::vector<std::vector<int>> swapped{{4, 5, 6}, {1, 2, 3}};
    CHECK(prompt_set_checksum(prompts) != prompt_set_checksum(swapped));
    CHECK(model_checksum(model) == model_checksum(model));
}
