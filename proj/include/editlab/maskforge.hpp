#pragma once
// Shared binary mask over an edited weight matrix: soft sigmoid mask with
// temperature annealing, penalty-method training across many edits, and
// binarization/application utilities.

#include "editlab/checkpoint.hpp"
#include "editlab/common.hpp"
#include "editlab/corpus.hpp"
#include "editlab/editor.hpp"
#include "editlab/model.hpp"

#include <optional>
#include <vector>

namespace editlab {

struct MaskTrainerConfig {
    double delta = 3.0;   // restoration margin
    double s_max = 0.10;  // max pruned fraction
    double beta_kl = 3.26;
    double t_start = 1.64;  // KL temperature, annealed linearly
    double t_max = 4.30;
    double tau_start = 6.0;  // sigmoid temperature tau(t) = tau0 / (1 + rate * t / (epochs-1))
    double tau_decay = 3.0;
    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double weight_decay = 0.0;
    int epochs = 300;
    int batch_size = 8;
    double theta_init_mean = 0.85;
    double theta_init_std = 0.1;
    double gamma = 0.7;  // binarization threshold
    std::uint64_t seed = 0;

    void validate() const {
        require(s_max > 0.0 && s_max < 1.0, "S_max must lie in (0,1)");
        require(delta >= 0.0, "restoration margin must be >= 0");
        require(beta_kl >= 0.0, "KL weight must be >= 0");
        require(t_start > 0.0 && t_start <= t_max, "temperature schedule requires 0 < T_start <= T_max");
        require(tau_start > 0.0 && tau_decay >= 0.0, "tau schedule requires tau_start > 0, decay >= 0");
        require(lr > 0.0 && epochs >= 0 && batch_size >= 1, "bad optimizer settings");
        require(theta_init_std >= 0.0, "theta init std must be >= 0");
        require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0,1)");
    }

    double tau_at(int epoch) const {
        const double frac = epochs > 1 ? static_cast<double>(epoch) / (epochs - 1) : 0.0;
        return tau_start / (1.0 + tau_decay * frac);
    }

    double temperature_at(int epoch) const {
        const double frac = epochs > 1 ? static_cast<double>(epoch) / (epochs - 1) : 0.0;
        return t_start + (t_max - t_start) * frac;
    }

    json to_json() const {
        return json{{"delta", delta},
                    {"s_max", s_max},
                    {"beta_kl", beta_kl},
                    {"t_start", t_start},
                    {"t_max", t_max},
                    {"tau_start", tau_start},
                    {"tau_decay", tau_decay},
                    {"lr", lr},
                    {"adam_beta1", adam_beta1},
                    {"adam_beta2", adam_beta2},
                    {"weight_decay", weight_decay},
                    {"epochs", epochs},
                    {"batch_size", batch_size},
                    {"theta_init_mean", theta_init_mean},
                    {"theta_init_std", theta_init_std},
                    {"gamma", gamma},
                    {"seed", seed}};
    }

    static MaskTrainerConfig from_json(const json& j) {
        MaskTrainerConfig c;
        c.delta = j.at("delta").get<double>();
        c.s_max = j.at("s_max").get<double>();
        c.beta_kl = j.at("beta_kl").get<double>();
        c.t_start = j.at("t_start").get<double>();
        c.t_max = j.at("t_max").get<double>();
        c.tau_start = j.at("tau_start").get<double>();
        c.tau_decay = j.at("tau_decay").get<double>();
        c.lr = j.at("lr").get<double>();
        c.adam_beta1 = j.at("adam_beta1").get<double>();
        c.adam_beta2 = j.at("adam_beta2").get<double>();
        c.weight_decay = j.at("weight_decay").get<double>();
        c.epochs = j.at("epochs").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.theta_init_mean = j.at("theta_init_mean").get<double>();
        c.theta_init_std = j.at("theta_init_std").get<double>();
        c.gamma = j.at("gamma").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.validate();
        return c;
    }
};

struct MaskState {
    Matrix theta;
    double tau = 1.0;    // temperature the mask was left at
    double gamma = 0.7;  // binarization threshold
    int layer = -1;
};

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

inline Matrix soft_mask(const Matrix& theta, double tau) {
    require(tau > 0.0, "soft_mask: tau must be positive");
    return theta.unaryExpr([tau](double t) { return 1.0 / (1.0 + std::exp(-t / tau)); });
}

// -[log P(o|x) - log P(o*|x)] under the pruned model; negative when the
// original object is preferred.
inline double restoration_loss(double p_original, double p_new) {
    if (!(p_original > 0.0) || !(p_new > 0.0)) {
        fail("restoration_loss: zero probability (p_o=", p_original, ", p_o*=", p_new, ")");
    }
    return -(std::log(p_original) - std::log(p_new));
}

// Fraction of (softly) pruned weights.
inline double sparsity_loss(const Matrix& mask) {
    require(mask.size() > 0, "sparsity_loss: empty mask");
    require(mask.minCoeff() >= 0.0 && mask.maxCoeff() <= 1.0, "sparsity_loss: entries outside [0,1]");
    return (1.0 - mask.array()).mean();
}

// Mean over columns of KL(softmax(reference/T) || softmax(subject/T)).
inline double kl_loss(const Matrix& reference_logits, const Matrix& subject_logits, double T) {
    require(T > 0.0, "kl_loss: temperature must be positive");
    require(reference_logits.rows() == subject_logits.rows() &&
                reference_logits.cols() == subject_logits.cols(),
            "kl_loss: logit shapes differ");
    require(reference_logits.cols() > 0, "kl_loss: no positions");
    double total = 0.0;
    for (Eigen::Index j = 0; j < reference_logits.cols(); ++j) {
        const Vector logp = log_softmax(reference_logits.col(j) / T);
        const Vector logq = log_softmax(subject_logits.col(j) / T);
        total += (logp.array().exp() * (logp - logq).array()).sum();
    }
    return total / static_cast<double>(reference_logits.cols());
}

// beta * L_KL + hinge(L_sparsity - S_max) + hinge(L_restoration + delta).
inline double combined_loss(double l_kl, double l_sparsity, double l_restoration,
                            const MaskTrainerConfig& cfg) {
    require(std::isfinite(l_kl) && std::isfinite(l_sparsity) && std::isfinite(l_restoration),
            "combined_loss: non-finite component");
    return cfg.beta_kl * l_kl + std::max(0.0, l_sparsity - cfg.s_max) +
           std::max(0.0, l_restoration + cfg.delta);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace detail {

struct MaskSample {
    const Matrix* w_hat = nullptr;
    std::vector<int> prompt;  // canonical edit prompt
    int object = -1;
    int new_object = -1;
    std::vector<int> neutral;     // one neutral window per sample
    Vector base_prompt_logits;    // original model, final position
    Matrix base_neutral_logits;   // original model, every window position
};

}  // namespace detail

// Frozen inputs for mask training: per-edit prompts and weights plus an
// equal-sized neutral slice, with the original model's logits precomputed.
struct MaskWorkspace {
    const TransformerModel* base = nullptr;
    int layer = -1;
    std::vector<detail::MaskSample> samples;
};

inline MaskWorkspace prepare_mask_workspace(const TransformerModel& base, const Corpus& corpus,
                                            const std::vector<EditedLayerWeights>& edits,
                                            const std::vector<EditRequest>& requests,
                                            std::uint64_t seed) {
    require(!edits.empty(), "mask training needs at least one edit");
    require(edits.size() == requests.size(), "edits and requests must align");
    const int layer = edits.front().layer;
    const Eigen::Index rows = edits.front().w_hat.rows();
    const Eigen::Index cols = edits.front().w_hat.cols();
    for (std::size_t i = 0; i < edits.size(); ++i) {
        if (edits[i].layer != layer || edits[i].w_hat.rows() != rows ||
            edits[i].w_hat.cols() != cols) {
            fail("edit ", requests[i].edit_id, " targets a different layer/shape than the first edit");
        }
    }

    auto neutral_windows = chunk_stream(corpus.neutral_train, base.config.max_seq_len);
    require(!neutral_windows.empty(), "corpus has no neutral text for the KL prompt set");
    Rng rng(derive_seed(seed, 0x77));

    MaskWorkspace ws;
    ws.base = &base;
    ws.layer = layer;
    for (std::size_t i = 0; i < edits.size(); ++i) {
        detail::MaskSample s;
        s.w_hat = &edits[i].w_hat;
        const RenderedPrompt rendered = corpus.render_canonical(requests[i].fact);
        s.prompt = rendered.tokens;
        s.object = requests[i].fact.object;
        s.new_object = requests[i].new_object;
        s.neutral = neutral_windows[static_cast<std::size_t>(rng.below(neutral_windows.size()))];
        Matrix logits = forward(base, s.prompt);
        s.base_prompt_logits = logits.col(logits.cols() - 1);
        s.base_neutral_logits = forward(base, s.neutral);
        ws.samples.push_back(std::move(s));
    }
    return ws;
}

struct MaskLossTerms {
    double l_kl = 0.0;          // mean over samples
    double l_restoration = 0.0; // mean over samples
    double l_sparsity = 0.0;
    double total = 0.0;
};

// Loss (and optionally the combined-loss gradient w.r.t. theta) of the
// penalty objective over a sample subset. Per sample the forward pass swaps
// the edit layer's matrix for W_hat_i (elementwise-)masked by sigma(theta/tau);
// gradients reach theta only through that product.
inline MaskLossTerms mask_loss_and_grad(const MaskWorkspace& ws, const std::vector<int>& indices,
                                        const Matrix& theta, double tau, double temperature,
                                        const MaskTrainerConfig& cfg, Matrix* dtheta) {
    require(!indices.empty(), "mask_loss_and_grad: empty batch");
    const TransformerModel& base = *ws.base;
    const Matrix mask = soft_mask(theta, tau);
    const double n = static_cast<double>(indices.size());

    struct PassRecord {
        ForwardCache cache;
        Matrix w_eff;
        Matrix dlogits_rest;  // final-position restoration gradient
        Matrix dlogits_kl;
        double kl = 0.0;
    };

    MaskLossTerms terms;
    terms.l_sparsity = sparsity_loss(mask);
    // Reserved up front: forward caches keep pointers into their PassRecord's
    // w_eff, so records must never relocate.
    std::vector<PassRecord> passes;
    passes.reserve(indices.size() * 2);

    for (int idx : indices) {
        const detail::MaskSample& s = ws.samples[static_cast<std::size_t>(idx)];
        for (int which = 0; which < 2; ++which) {
            const bool is_prompt = which == 0;  // edit prompt first, then neutral window
            const std::vector<int>& tokens = is_prompt ? s.prompt : s.neutral;

            PassRecord* pr = nullptr;
            Matrix local_w_eff;
            const Matrix* w_eff = nullptr;
            if (dtheta) {
                passes.emplace_back();
                pr = &passes.back();
                pr->w_eff = s.w_hat->cwiseProduct(mask);
                w_eff = &pr->w_eff;
            } else {
                local_w_eff = s.w_hat->cwiseProduct(mask);
                w_eff = &local_w_eff;
            }
            ForwardOptions opts;
            opts.wproj_override = w_eff;
            opts.override_layer = ws.layer;
            const Matrix logits = forward(base, tokens, opts, pr ? &pr->cache : nullptr);
            const Eigen::Index last = logits.cols() - 1;

            // The prompt pass anchors only the completion position (the one the
            // restoration term rewrites); the neutral pass anchors every
            // position of the window, the same set perplexity later scores.
            double kl = 0.0;
            if (is_prompt) {
                const Vector logp = log_softmax(logits.col(last));
                terms.l_restoration += -(logp(s.object) - logp(s.new_object)) / n;
                kl = kl_loss(s.base_prompt_logits, logits.col(last), temperature);
            } else {
                kl = kl_loss(s.base_neutral_logits, logits, temperature);
            }
            terms.l_kl += kl / (2.0 * n);

            if (pr) {
                pr->kl = kl;
                pr->dlogits_rest = Matrix::Zero(logits.rows(), logits.cols());
                pr->dlogits_kl = Matrix::Zero(logits.rows(), logits.cols());
                if (is_prompt) {
                    pr->dlogits_rest(s.new_object, last) = 1.0 / n;
                    pr->dlogits_rest(s.object, last) = -1.0 / n;
                    const Vector p = softmax(s.base_prompt_logits / temperature);
                    const Vector q = softmax(logits.col(last) / temperature);
                    pr->dlogits_kl.col(last) = (q - p) / temperature * (cfg.beta_kl / (2.0 * n));
                } else {
                    const double cols = static_cast<double>(logits.cols());
                    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
                        const Vector p = softmax(s.base_neutral_logits.col(j) / temperature);
                        const Vector q = softmax(logits.col(j) / temperature);
                        pr->dlogits_kl.col(j) =
                            (q - p) / temperature * (cfg.beta_kl / (2.0 * n * cols));
                    }
                }
            }
        }
    }

    terms.total = combined_loss(terms.l_kl, terms.l_sparsity, terms.l_restoration, cfg);
    if (!std::isfinite(terms.total)) {
        fail("mask loss non-finite (l_kl=", terms.l_kl, ", l_sp=", terms.l_sparsity,
             ", l_rest=", terms.l_restoration, ")");
    }
    if (!dtheta) {
        return terms;
    }

    const bool rest_active = terms.l_restoration + cfg.delta > 0.0;
    const bool sp_active = terms.l_sparsity - cfg.s_max > 0.0;
    const Matrix sigma_grad = (mask.array() * (1.0 - mask.array()) / tau).matrix();

    *dtheta = Matrix::Zero(theta.rows(), theta.cols());
    if (sp_active) {
        *dtheta -= sigma_grad / static_cast<double>(mask.size());
    }
    Params grads = zero_params(base.config);
    std::size_t pass_i = 0;
    for (int idx : indices) {
        const detail::MaskSample& s = ws.samples[static_cast<std::size_t>(idx)];
        for (int which = 0; which < 2; ++which, ++pass_i) {
            PassRecord& pr = passes[pass_i];
            Matrix dlogits = pr.dlogits_kl;
            if (rest_active) {
                dlogits += pr.dlogits_rest;
            }
            if (dlogits.cwiseAbs().maxCoeff() == 0.0) {
                continue;
            }
            Matrix& w_grad = grads.layers[static_cast<std::size_t>(ws.layer)].w_proj;
            w_grad.setZero();
            backward(base, pr.cache, dlogits, grads);
            dtheta->array() += w_grad.array() * s.w_hat->array() * sigma_grad.array();
        }
    }
    return terms;
}

struct EpochLog {
    int epoch = 0;
    double l_kl = 0.0;
    double l_sparsity = 0.0;
    double l_restoration = 0.0;
    double total = 0.0;
    double tau = 0.0;
    double temperature = 0.0;
};

struct MaskTrainResult {
    MaskState state;
    std::vector<EpochLog> log;
};

inline MaskTrainResult train_shared_mask(const TransformerModel& base, const Corpus& corpus,
                                         const std::vector<EditedLayerWeights>& edits,
                                         const std::vector<EditRequest>& requests,
                                         const MaskTrainerConfig& cfg) {
    cfg.validate();
    MaskWorkspace ws = prepare_mask_workspace(base, corpus, edits, requests, cfg.seed);

    Rng rng(derive_seed(cfg.seed, 0x7b));
    MaskTrainResult result;
    MaskState& state = result.state;
    state.layer = ws.layer;
    state.gamma = cfg.gamma;
    state.tau = cfg.tau_at(std::max(0, cfg.epochs - 1));
    state.theta.resize(edits.front().w_hat.rows(), edits.front().w_hat.cols());
    for (Eigen::Index i = 0; i < state.theta.rows(); ++i) {
        for (Eigen::Index j = 0; j < state.theta.cols(); ++j) {
            state.theta(i, j) = rng.normal(cfg.theta_init_mean, cfg.theta_init_std);
        }
    }
    if (cfg.epochs == 0) {
        state.tau = cfg.tau_start;
        return result;
    }

    MatrixAdam opt;
    AdamConfig adam;
    adam.lr = cfg.lr;
    adam.beta1 = cfg.adam_beta1;
    adam.beta2 = cfg.adam_beta2;
    adam.weight_decay = cfg.weight_decay;

    std::vector<int> order(ws.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = static_cast<int>(i);
    }

    Matrix dtheta;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double tau = cfg.tau_at(epoch);
        const double temperature = cfg.temperature_at(epoch);
        rng.shuffle(order);

        double kl_sum = 0.0, rest_sum = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<int> batch(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(end));
            const MaskLossTerms terms =
                mask_loss_and_grad(ws, batch, state.theta, tau, temperature, cfg, &dtheta);
            kl_sum += terms.l_kl * static_cast<double>(batch.size());
            rest_sum += terms.l_restoration * static_cast<double>(batch.size());
            adam_step(state.theta, dtheta, opt, adam);
        }

        EpochLog log;
        log.epoch = epoch;
        log.tau = tau;
        log.temperature = temperature;
        log.l_kl = kl_sum / static_cast<double>(ws.samples.size());
        log.l_restoration = rest_sum / static_cast<double>(ws.samples.size());
        log.l_sparsity = sparsity_loss(soft_mask(state.theta, tau));
        log.total = combined_loss(log.l_kl, log.l_sparsity, log.l_restoration, cfg);
        result.log.push_back(log);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Binarization and application
// ---------------------------------------------------------------------------

struct BinaryMask {
    Matrix m;  // entries exactly 0 or 1
    double pruned_fraction = 0.0;
};

inline BinaryMask binarize(const Matrix& soft, double gamma) {
    require(gamma > 0.0 && gamma < 1.0, "binarize: gamma must lie in (0,1)");
    BinaryMask out;
    out.m = soft.unaryExpr([gamma](double k) { return k >= gamma ? 1.0 : 0.0; });
    out.pruned_fraction = (1.0 - out.m.array()).mean();
    return out;
}

inline BinaryMask binarize(const MaskState& state) {
    return binarize(soft_mask(state.theta, state.tau), state.gamma);
}

// M_p: identical to the edited model except the edit layer's down-projection
// is replaced by its elementwise product with the mask.
inline TransformerModel apply_mask(const TransformerModel& edited, int layer, const Matrix& mask) {
    require(layer >= 0 && layer < edited.config.n_layers, "apply_mask: layer out of range");
    const Matrix& w = edited.params.layers[static_cast<std::size_t>(layer)].w_proj;
    require(mask.rows() == w.rows() && mask.cols() == w.cols(), "apply_mask: shape mismatch");
    TransformerModel pruned = edited;
    pruned.params.layers[static_cast<std::size_t>(layer)].w_proj = w.cwiseProduct(mask);
    return pruned;
}

// ---------------------------------------------------------------------------
// Gamma sweep: sparsity / train-RSR trade-off
// ---------------------------------------------------------------------------

struct GammaPoint {
    double gamma = 0.0;
    double pruned_fraction = 0.0;
    double train_rsr = 0.0;
};

inline std::vector<GammaPoint> gamma_sweep(const TransformerModel& base, const Corpus& corpus,
                                           const std::vector<EditedLayerWeights>& edits,
                                           const std::vector<EditRequest>& requests,
                                           const MaskState& state,
                                           const std::vector<double>& gammas) {
    require(edits.size() == requests.size(), "gamma_sweep: edits and requests must align");
    const Matrix soft = soft_mask(state.theta, state.tau);
    std::vector<GammaPoint> out;
    for (double gamma : gammas) {
        const BinaryMask bin = binarize(soft, gamma);
        int reversed = 0;
        for (std::size_t i = 0; i < edits.size(); ++i) {
            const Matrix w_eff = edits[i].w_hat.cwiseProduct(bin.m);
            ForwardOptions opts;
            opts.wproj_override = &w_eff;
            opts.override_layer = state.layer;
            const RenderedPrompt prompt = corpus.render_canonical(requests[i].fact);
            const Matrix logits = forward(base, prompt.tokens, opts);
            const Vector probs = softmax(logits.col(logits.cols() - 1));
            if (probs(requests[i].fact.object) > probs(requests[i].new_object)) {
                ++reversed;
            }
        }
        GammaPoint p;
        p.gamma = gamma;
        p.pruned_fraction = bin.pruned_fraction;
        p.train_rsr = static_cast<double>(reversed) / static_cast<double>(edits.size());
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::string mask_log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream os;
    os << "epoch,l_kl,l_sparsity,l_restoration,total,tau,T\n";
    os.setf(std::ios::scientific);
    os.precision(12);
    for (const auto& e : log) {
        os << e.epoch << ',' << e.l_kl << ',' << e.l_sparsity << ',' << e.l_restoration << ','
           << e.total << ',' << e.tau << ',' << e.temperature << '\n';
    }
    return os.str();
}

inline void save_mask(const MaskState& state, const MaskTrainerConfig& cfg,
                      const std::filesystem::path& tensor_path,
                      const std::filesystem::path& json_path) {
    TensorStore store;
    store.meta["layer"] = state.layer;
    store.put("theta", state.theta);
    save_tensors(store, tensor_path);

    json j;
    j["tau"] = state.tau;
    j["gamma"] = state.gamma;
    j["layer"] = state.layer;
    j["schedules"] = json{{"tau_form", "tau0 / (1 + rate * epoch / (epochs - 1))"},
                          {"tau_start", cfg.tau_start},
                          {"tau_decay", cfg.tau_decay},
                          {"t_form", "linear"},
                          {"t_start", cfg.t_start},
                          {"t_max", cfg.t_max}};
    j["config"] = cfg.to_json();
    j["seed"] = cfg.seed;
    write_file_bytes(json_path, j.dump(2) + "\n");
}

inline MaskState load_mask(const std::filesystem::path& tensor_path,
                           const std::filesystem::path& json_path,
                           MaskTrainerConfig* cfg_out = nullptr) {
    const TensorStore store = load_tensors(tensor_path);
    const json j = json::parse(read_file_bytes(json_path));
    MaskState state;
    state.theta = store.get("theta");
    state.layer = j.at("layer").get<int>();
    state.tau = j.at("tau").get<double>();
    state.gamma = j.at("gamma").get<double>();
    if (cfg_out) {
        *cfg_out = MaskTrainerConfig::from_json(j.at("config"));
    }
    return state;
}

}  // namespace editlab
