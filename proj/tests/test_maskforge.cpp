#include <editlab/maskforge.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

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

ModelConfig mask_model_config(int vocab) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.vocab_size = vocab;
    c.max_seq_len = 16;
    c.seed = 61;
    return c;
}

struct MaskFixture {
    Corpus corpus;
    TransformerModel model;
    std::vector<EditedLayerWeights> edits;
    std::vector<EditRequest> requests;

    MaskFixture() {
        corpus = generate_corpus(small_spec());
        model = init_model(mask_model_config(corpus.vocab.size()));
        const EditSplit split = split_edits(corpus, 2, 1, SplitMode::StratifiedByRelation, 7);
        requests = split.train;
        Rng rng(17);
        for (const auto& req : requests) {
            EditedLayerWeights elw;
            elw.layer = 1;
            elw.w = model.params.layers[1].w_proj;
            elw.w_hat = elw.w;
            for (Eigen::Index i = 0; i < elw.w_hat.rows(); ++i) {
                for (Eigen::Index j = 0; j < elw.w_hat.cols(); ++j) {
                    elw.w_hat(i, j) += 0.05 * rng.normal();
                }
            }
            elw.edit_ids = {req.edit_id};
            edits.push_back(std::move(elw));
        }
    }
};

}  // namespace

TEST_CASE("soft mask is a tempered sigmoid", "[maskforge]") {
    Matrix theta(2, 2);
    theta << 0.0, 1e6, 0.8, -0.8;
    const Matrix k1 = soft_mask(theta, 1.0);
    CHECK(k1(0, 0) == 0.5);
    CHECK(std::abs(k1(0, 1) - 1.0) <= 1e-12);
    CHECK(k1(1, 0) > 0.5);
    CHECK(k1(1, 1) < 0.5);
    // Lower temperature pushes entries away from 0.5.
    const Matrix k6 = soft_mask(theta, 6.0);
    const Matrix k15 = soft_mask(theta, 1.5);
    CHECK(k15(1, 0) > k6(1, 0));
    CHECK(k15(1, 1) < k6(1, 1));
    for (Eigen::Index i = 0; i < 4; ++i) {
        CHECK(k6.data()[i] > 0.0);
        CHECK(k6.data()[i] <= 1.0);
    }
    // The huge logit saturates to exactly 1.0 in double; moderate ones stay interior.
    CHECK(k6(0, 0) < 1.0);
    CHECK(k6(1, 0) < 1.0);
    CHECK(k6(1, 1) < 1.0);
    CHECK_THROWS_AS(soft_mask(theta, 0.0), Error);
}

TEST_CASE("restoration loss is the negative log-probability gap", "[maskforge]") {
    CHECK(restoration_loss(0.3, 0.3) == 0.0);
    const double e = std::exp(1.0);
    CHECK(restoration_loss(0.1 * e, 0.1) == Catch::Approx(-1.0).margin(1e-12));
    CHECK(restoration_loss(0.04 * e * e * e, 0.04) == Catch::Approx(-3.0).margin(1e-12));
    // -3 exactly meets the default margin: the hinge sits at its boundary.
    MaskTrainerConfig cfg;
    CHECK(std::max(0.0, restoration_loss(0.04 * e * e * e, 0.04) + cfg.delta) <= 1e-12);
    CHECK_THROWS_AS(restoration_loss(0.0, 0.5), Error);
    CHECK_THROWS_AS(restoration_loss(0.5, 0.0), Error);
}

TEST_CASE("sparsity loss is the pruned fraction", "[maskforge]") {
    CHECK(sparsity_loss(Matrix::Ones(3, 4)) == 0.0);
    CHECK(sparsity_loss(Matrix::Zero(3, 4)) == 1.0);
    Matrix half = Matrix::Ones(2, 4);
    half(0, 0) = half(0, 1) = half(1, 0) = half(1, 1) = 0.0;
    CHECK(sparsity_loss(half) == 0.5);
    Matrix bad = Matrix::Ones(2, 2);
    bad(0, 0) = 1.2;
    CHECK_THROWS_AS(sparsity_loss(bad), Error);
    CHECK_THROWS_AS(sparsity_loss(Matrix(0, 0)), Error);
}

TEST_CASE("kl loss matches hand arithmetic", "[maskforge]") {
    Matrix ref(3, 2), sub(3, 2);
    ref << 0.2, 1.0,
           -0.1, -0.5,
           0.4, 0.3;
    sub << -0.3, 0.8,
           0.5, -0.2,
           0.0, 0.1;

    for (const double T : {1.0, 2.5}) {
        double hand = 0.0;
        for (int j = 0; j < 2; ++j) {
            double zp = 0.0, zq = 0.0;
            for (int i = 0; i < 3; ++i) {
                zp += std::exp(ref(i, j) / T);
                zq += std::exp(sub(i, j) / T);
            }
            for (int i = 0; i < 3; ++i) {
                const double p = std::exp(ref(i, j) / T) / zp;
                const double q = std::exp(sub(i, j) / T) / zq;
                hand += p * std::log(p / q);
            }
        }
        hand /= 2.0;
        CHECK(kl_loss(ref, sub, T) == Catch::Approx(hand).margin(1e-9));
    }

    CHECK(kl_loss(ref, ref, 1.0) <= 1e-12);
    // Additive constants shift nothing.
    Matrix shifted = ref;
    shifted.array() += 5.0;
    CHECK(kl_loss(ref, shifted, 1.0) <= 1e-12);

    Rng rng(8);
    for (int trial = 0; trial < 1000; ++trial) {
        Matrix a(5, 1), b(5, 1);
        for (int i = 0; i < 5; ++i) {
            a(i, 0) = rng.normal(0.0, 2.0);
            b(i, 0) = rng.normal(0.0, 2.0);
        }
        CHECK(kl_loss(a, b, 1.0) >= 0.0);
    }

    CHECK_THROWS_AS(kl_loss(ref, Matrix::Zero(2, 2), 1.0), Error);
    CHECK_THROWS_AS(kl_loss(ref, sub, 0.0), Error);
}

TEST_CASE("combined loss applies the penalty hinges", "[maskforge]") {
    MaskTrainerConfig cfg;  // beta 3.26, S_max 0.10, delta 3.0
    CHECK(combined_loss(0.2, 0.05, -5.0, cfg) == Catch::Approx(3.26 * 0.2).margin(1e-12));
    CHECK(combined_loss(0.0, 0.05, -3.0, cfg) == 0.0);
    CHECK(combined_loss(0.0, 0.12, -5.0, cfg) == Catch::Approx(0.02).margin(1e-12));
    CHECK(combined_loss(0.1, 0.12, -2.0, cfg) ==
          Catch::Approx(3.26 * 0.1 + 0.02 + 1.0).margin(1e-12));
    CHECK_THROWS_AS(combined_loss(std::nan(""), 0.0, 0.0, cfg), Error);
}

TEST_CASE("mask gradients match finite differences", "[maskforge]") {
    const MaskFixture fx;
    MaskTrainerConfig cfg;
    cfg.delta = 5.0;    // keep the restoration hinge active at random edits
    cfg.s_max = 0.001;  // keep the sparsity hinge active
    cfg.seed = 3;
    const MaskWorkspace ws =
        prepare_mask_workspace(fx.model, fx.corpus, fx.edits, fx.requests, cfg.seed);

    Matrix theta(fx.edits[0].w_hat.rows(), fx.edits[0].w_hat.cols());
    Rng rng(5);
    for (Eigen::Index i = 0; i < theta.rows(); ++i) {
        for (Eigen::Index j = 0; j < theta.cols(); ++j) {
            theta(i, j) = rng.normal(0.85, 0.3);
        }
    }
    const double tau = 2.0, temperature = 2.5;
    const std::vector<int> batch{0, 1};

    Matrix dtheta;
    const MaskLossTerms terms =
        mask_loss_and_grad(ws, batch, theta, tau, temperature, cfg, &dtheta);
    REQUIRE(terms.l_restoration + cfg.delta > 0.01);
    REQUIRE(terms.l_sparsity - cfg.s_max > 0.01);
    CHECK(terms.total ==
          Catch::Approx(combined_loss(terms.l_kl, terms.l_sparsity, terms.l_restoration, cfg))
              .margin(1e-12));

    const double h = 1e-4;
    double worst = 0.0;
    for (int trial = 0; trial < 60; ++trial) {
        const Eigen::Index i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(theta.rows())));
        const Eigen::Index j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(theta.cols())));
        const double saved = theta(i, j);
        theta(i, j) = saved + h;
        const double up = mask_loss_and_grad(ws, batch, theta, tau, temperature, cfg, nullptr).total;
        theta(i, j) = saved - h;
        const double dn = mask_loss_and_grad(ws, batch, theta, tau, temperature, cfg, nullptr).total;
        theta(i, j) = saved;
        const double fd = (up - dn) / (2.0 * h);
        const double an = dtheta(i, j);
        worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
    CHECK(worst <= 1e-4);

    // Toggling only the sparsity hinge shifts the gradient by exactly the
    // hinge's own term, -sigma'(theta/tau)/|K|.
    MaskTrainerConfig loose = cfg;
    loose.s_max = 0.999;
    Matrix dtheta_loose;
    mask_loss_and_grad(ws, batch, theta, tau, temperature, loose, &dtheta_loose);
    const Matrix mask = soft_mask(theta, tau);
    const Matrix hinge_term =
        (mask.array() * (1.0 - mask.array()) / tau).matrix() / static_cast<double>(mask.size());
    CHECK((dtheta - (dtheta_loose - hinge_term)).cwiseAbs().maxCoeff() <= 1e-12);

    CHECK_THROWS_AS(mask_loss_and_grad(ws, {}, theta, tau, temperature, cfg, nullptr), Error);
}

TEST_CASE("zero-epoch training returns the theta initialization", "[maskforge]") {
    const MaskFixture fx;
    MaskTrainerConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 23;
    const MaskTrainResult res =
        train_shared_mask(fx.model, fx.corpus, fx.edits, fx.requests, cfg);
    CHECK(res.log.empty());
    CHECK(res.state.layer == 1);
    CHECK(res.state.gamma == cfg.gamma);
    CHECK(res.state.tau == cfg.tau_start);

    Rng rng(derive_seed(cfg.seed, 0x7b));
    Matrix expect(fx.edits[0].w_hat.rows(), fx.edits[0].w_hat.cols());
    for (Eigen::Index i = 0; i < expect.rows(); ++i) {
        for (Eigen::Index j = 0; j < expect.cols(); ++j) {
            expect(i, j) = rng.normal(cfg.theta_init_mean, cfg.theta_init_std);
        }
    }
    CHECK((res.state.theta - expect).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training leaves the base model and edits frozen", "[maskforge]") {
    const MaskFixture fx;
    const Matrix w_before = fx.model.params.layers[1].w_proj;
    const Matrix what0 = fx.edits[0].w_hat;
    const Matrix what1 = fx.edits[1].w_hat;

    MaskTrainerConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 11;
    const MaskTrainResult res =
        train_shared_mask(fx.model, fx.corpus, fx.edits, fx.requests, cfg);

    CHECK((fx.model.params.layers[1].w_proj - w_before).cwiseAbs().maxCoeff() == 0.0);
    CHECK((fx.edits[0].w_hat - what0).cwiseAbs().maxCoeff() == 0.0);
    CHECK((fx.edits[1].w_hat - what1).cwiseAbs().maxCoeff() == 0.0);

    REQUIRE(res.log.size() == 3);
    for (int e = 0; e < 3; ++e) {
        const EpochLog& log = res.log[static_cast<std::size_t>(e)];
        CHECK(log.epoch == e);
        CHECK(log.tau == cfg.tau_at(e));
        CHECK(log.temperature == cfg.temperature_at(e));
        CHECK(log.total ==
              Catch::Approx(combined_loss(log.l_kl, log.l_sparsity, log.l_restoration, cfg))
                  .margin(1e-9));
    }
    CHECK(cfg.tau_at(0) == 6.0);
    CHECK(cfg.tau_at(cfg.epochs - 1) == Catch::Approx(6.0 / 4.0).margin(1e-12));
    CHECK(res.state.tau == cfg.tau_at(2));

    // Same seed reproduces theta bit-exactly.
    const MaskTrainResult res2 =
        train_shared_mask(fx.model, fx.corpus, fx.edits, fx.requests, cfg);
    CHECK((res.state.theta - res2.state.theta).cwiseAbs().maxCoeff() == 0.0);

    // Shape mismatch across edits is rejected.
    auto bad_edits = fx.edits;
    bad_edits[1].w_hat = Matrix::Zero(4, 4);
    CHECK_THROWS_WITH(train_shared_mask(fx.model, fx.corpus, bad_edits, fx.requests, cfg),
                      Catch::Matchers::ContainsSubstring("different layer/shape"));
}

TEST_CASE("binarize thresholds at gamma and reports sparsity", "[maskforge]") {
    Matrix soft(2, 3);
    soft << 0.71, 0.70, 0.69,
            0.05, 0.95, 0.50;
    const BinaryMask bin = binarize(soft, 0.7);
    CHECK(bin.m(0, 0) == 1.0);
    CHECK(bin.m(0, 1) == 1.0);  // k >= gamma keeps the weight
    CHECK(bin.m(0, 2) == 0.0);
    CHECK(bin.m(1, 0) == 0.0);
    CHECK(bin.m(1, 1) == 1.0);
    CHECK(bin.m(1, 2) == 0.0);
    CHECK(bin.pruned_fraction == Catch::Approx(0.5).margin(1e-12));
    CHECK(bin.pruned_fraction == sparsity_loss(bin.m));

    // gamma -> 1 prunes everything strictly below 1.
    CHECK(binarize(soft, 0.999999).pruned_fraction == 1.0);
    CHECK_THROWS_AS(binarize(soft, 0.0), Error);
    CHECK_THROWS_AS(binarize(soft, 1.0), Error);

    MaskState state;
    state.theta = Matrix::Zero(2, 2);
    state.theta(0, 0) = 10.0;
    state.tau = 1.0;
    state.gamma = 0.7;
    const BinaryMask from_state = binarize(state);
    CHECK(from_state.m(0, 0) == 1.0);
    CHECK(from_state.m(1, 1) == 0.0);  // sigma(0) = 0.5 < 0.7
}

TEST_CASE("apply_mask replaces exactly one tensor", "[maskforge]") {
    const MaskFixture fx;
    TransformerModel edited = fx.model;
    edited.params.layers[1].w_proj = fx.edits[0].w_hat;

    const TransformerModel same = apply_mask(edited, 1, Matrix::Ones(16, 32));
    for (const auto& [name, tensor] : tensor_list(edited.params)) {
        const auto other = tensor_list(same.params);
        for (const auto& [oname, otensor] : other) {
            if (oname == name) {
                CHECK((*tensor - *otensor).cwiseAbs().maxCoeff() == 0.0);
            }
        }
    }

    const TransformerModel zeroed = apply_mask(edited, 1, Matrix::Zero(16, 32));
    CHECK(zeroed.params.layers[1].w_proj.cwiseAbs().maxCoeff() == 0.0);
    CHECK((zeroed.params.layers[0].w_proj - edited.params.layers[0].w_proj)
              .cwiseAbs().maxCoeff() == 0.0);

    Matrix mask = Matrix::Ones(16, 32);
    mask(3, 5) = 0.0;
    const TransformerModel partial = apply_mask(edited, 1, mask);
    CHECK(partial.params.layers[1].w_proj(3, 5) == 0.0);
    CHECK((partial.params.layers[1].w_proj - edited.params.layers[1].w_proj.cwiseProduct(mask))
              .cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(apply_mask(edited, 1, Matrix::Ones(4, 4)), Error);
    CHECK_THROWS_AS(apply_mask(edited, 9, Matrix::Ones(16, 32)), Error);
}

TEST_CASE("gamma sweep trades sparsity against reversal", "[maskforge]") {
    const MaskFixture fx;
    MaskTrainerConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 31;
    const MaskTrainResult res =
        train_shared_mask(fx.model, fx.corpus, fx.edits, fx.requests, cfg);

    const std::vector<double> gammas{0.3, 0.7, 0.9};
    const auto points = gamma_sweep(fx.model, fx.corpus, fx.edits, fx.requests, res.state, gammas);
    REQUIRE(points.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(points[i].gamma == gammas[i]);
        CHECK(points[i].pruned_fraction >= 0.0);
        CHECK(points[i].pruned_fraction <= 1.0);
        CHECK(points[i].train_rsr >= 0.0);
        CHECK(points[i].train_rsr <= 1.0);
    }
    CHECK(points[0].pruned_fraction <= points[1].pruned_fraction);
    CHECK(points[1].pruned_fraction <= points[2].pruned_fraction);
}

TEST_CASE("mask state round-trips through disk", "[maskforge]") {
    const MaskFixture fx;
    MaskTrainerConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.lr = 2e-3;
    cfg.seed = 47;
    const MaskTrainResult res =
        train_shared_mask(fx.model, fx.corpus, fx.edits, fx.requests, cfg);

    const auto dir = std::filesystem::temp_directory_path() / "editlab_mask_test";
    std::filesystem::create_directories(dir);
    save_mask(res.state, cfg, dir / "mask.edt", dir / "mask.json");

    MaskTrainerConfig cfg_back;
    const MaskState loaded = load_mask(dir / "mask.edt", dir / "mask.json", &cfg_back);
    CHECK(loaded.layer == res.state.layer);
    CHECK(loaded.tau == res.state.tau);
    CHECK(loaded.gamma == res.state.gamma);
    CHECK((loaded.theta - res.state.theta).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(cfg_back.lr == cfg.lr);
    CHECK(cfg_back.epochs == cfg.epochs);
    CHECK(cfg_back.seed == cfg.seed);

    const std::string csv = mask_log_csv(res.log);
    CHECK(csv.rfind("epoch,l_kl,l_sparsity,l_restoration,total,tau,T\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 epochs

    std::filesystem::remove_all(dir);
}
