#pragma once
// Locate-and-edit engine: key/value extraction, key covariance, single-layer
// rank-one edits and multi-layer batched edits on the MLP down-projection.

#include "editlab/checkpoint.hpp"
#include "editlab/common.hpp"
#include "editlab/corpus.hpp"
#include "editlab/model.hpp"

#include <Eigen/Cholesky>

#include <optional>
#include <vector>

namespace editlab {

// ---------------------------------------------------------------------------
// Key covariance
// ---------------------------------------------------------------------------

struct RidgeSpec {
    enum class Mode { Absolute, RelativeMeanDiag };
    Mode mode = Mode::RelativeMeanDiag;
    double value = 0.1;

    static RidgeSpec absolute(double v) { return {Mode::Absolute, v}; }
    static RidgeSpec relative(double v) { return {Mode::RelativeMeanDiag, v}; }
};

struct KeyCovariance {
    int layer = -1;
    Matrix c;              // d_mlp x d_mlp, symmetric positive definite
    double lambda = 0.0;   // ridge actually added to the diagonal
    long n_tokens = 0;

    // Solves C x = b through a cached Cholesky factor.
    Vector solve(const Vector& b) const {
        Eigen::LLT<Matrix> llt(c);
        if (llt.info() != Eigen::Success) {
            fail("key covariance is not positive definite");
        }
        return llt.solve(b);
    }
};

// Second moment of the down-projection's input keys (post-GELU activations)
// over every position of the text, plus a ridge term.
inline KeyCovariance estimate_key_covariance(const TransformerModel& model, int layer,
                                             const std::vector<int>& text, RidgeSpec ridge) {
    require(!text.empty(), "covariance text must hold at least 1 token");
    require(layer >= 0 && layer < model.config.n_layers, "covariance layer out of range");
    const int W = model.config.max_seq_len;
    const int d = model.config.d_mlp;

    Matrix sum = Matrix::Zero(d, d);
    long n = 0;
    for (std::size_t start = 0; start < text.size(); start += static_cast<std::size_t>(W)) {
        const std::size_t end = std::min(text.size(), start + static_cast<std::size_t>(W));
        const std::vector<int> window(text.begin() + static_cast<long>(start),
                                      text.begin() + static_cast<long>(end));
        ForwardCache cache;
        forward(model, window, {}, &cache);
        const Matrix& act = cache.layers[static_cast<std::size_t>(layer)].act;
        sum.noalias() += act * act.transpose();
        n += static_cast<long>(window.size());
    }

    KeyCovariance cov;
    cov.layer = layer;
    cov.n_tokens = n;
    cov.c = sum / static_cast<double>(n);
    const double mean_diag = cov.c.trace() / static_cast<double>(d);
    cov.lambda = ridge.mode == RidgeSpec::Mode::Absolute ? ridge.value : ridge.value * mean_diag;
    cov.c.diagonal().array() += cov.lambda;
    cov.c = 0.5 * (cov.c + cov.c.transpose());  // enforce exact symmetry

    Eigen::LLT<Matrix> llt(cov.c);
    if (llt.info() != Eigen::Success) {
        fail("key covariance singular: rank-deficient sample and insufficient ridge");
    }
    return cov;
}

// ---------------------------------------------------------------------------
// Key and value extraction
// ---------------------------------------------------------------------------

// k*: the down-projection input at the subject's last token, averaged over
// the relation's paraphrase templates.
inline Vector compute_key(const TransformerModel& model, int layer, const Corpus& corpus,
                          const FactTriple& fact, const ForwardOptions& opts = {}) {
    require(layer >= 0 && layer < model.config.n_layers, "key layer out of range");
    const auto rendered = corpus.render_all_templates(fact);
    require(!rendered.empty(), "fact renders through no template");
    Vector key = Vector::Zero(model.config.d_mlp);
    for (const auto& r : rendered) {
        require(r.subject_last >= 0, "subject not found in rendered prompt");
        ForwardCache cache;
        forward(model, r.tokens, opts, &cache);
        key += cache.layers[static_cast<std::size_t>(layer)].act.col(r.subject_last);
    }
    return key / static_cast<double>(rendered.size());
}

struct SolveConfig {
    int max_steps = 200;
    double lr = 0.5;
    double weight_decay = 1e-3;  // pull toward the original value vector
    double target_p = 0.9;
};

struct ValueResult {
    Vector v_star;
    double achieved_p = 0.0;  // P(o*|canonical prompt) with v* substituted
    int steps_used = 0;
};

// Gradient ascent on mean log P(o*|x) over all paraphrase renderings, with
// the layer's MLP output at the subject-last position replaced by the
// candidate vector. Plain (non-adaptive) updates keep the solve deterministic.
inline ValueResult solve_value(const TransformerModel& model, int layer, const Corpus& corpus,
                               const FactTriple& fact, int new_object, const SolveConfig& cfg = {},
                               const ForwardOptions& base_opts = {}) {
    require(new_object >= 0 && new_object < model.config.vocab_size, "o* out of vocab");
    require(cfg.max_steps >= 0 && cfg.lr > 0, "bad solve config");
    const auto rendered = corpus.render_all_templates(fact);
    const RenderedPrompt canonical = corpus.render_canonical(fact);

    // Original MLP outputs at the key positions; their mean anchors the decay.
    Vector v0 = Vector::Zero(model.config.d_model);
    for (const auto& r : rendered) {
        ForwardCache cache;
        forward(model, r.tokens, base_opts, &cache);
        v0 += cache.layers[static_cast<std::size_t>(layer)].mlp_out.col(r.subject_last);
    }
    v0 /= static_cast<double>(rendered.size());

    Vector v = v0;
    auto eval_prob = [&](const RenderedPrompt& r) {
        ForwardOptions opts = base_opts;
        opts.inject = &v;
        opts.inject_layer = layer;
        opts.inject_pos = r.subject_last;
        const Matrix logits = forward(model, r.tokens, opts);
        return softmax(logits.col(logits.cols() - 1))(new_object);
    };

    ValueResult result;
    const double scale = 1.0 / static_cast<double>(rendered.size());
    Params scratch = zero_params(model.config);
    for (int step = 0; step <= cfg.max_steps; ++step) {
        bool all_hit = true;
        for (const auto& r : rendered) {
            if (eval_prob(r) < cfg.target_p) {
                all_hit = false;
                break;
            }
        }
        if (all_hit || step == cfg.max_steps) {
            result.steps_used = step;
            break;
        }
        Vector grad = Vector::Zero(model.config.d_model);
        for (const auto& r : rendered) {
            ForwardOptions opts = base_opts;
            opts.inject = &v;
            opts.inject_layer = layer;
            opts.inject_pos = r.subject_last;
            ForwardCache cache;
            const Matrix logits = forward(model, r.tokens, opts, &cache);
            Matrix dlogits = Matrix::Zero(logits.rows(), logits.cols());
            Vector probs = softmax(logits.col(logits.cols() - 1));
            probs(new_object) -= 1.0;  // d(-log p)/dlogits
            dlogits.col(logits.cols() - 1) = probs * scale;
            backward(model, cache, dlogits, scratch, &grad);
        }
        if (!grad.allFinite()) {
            fail("solve_value: non-finite gradient at step ", step);
        }
        v -= cfg.lr * (grad + cfg.weight_decay * (v - v0));
    }
    result.v_star = v;
    result.achieved_p = eval_prob(canonical);
    return result;
}

// ---------------------------------------------------------------------------
// Weight updates
// ---------------------------------------------------------------------------

struct EditedLayerWeights {
    int layer = -1;
    Matrix w;      // original down-projection
    Matrix w_hat;  // edited down-projection
    std::vector<int> edit_ids;

    Matrix delta() const { return w_hat - w; }
};

// Exact-interpolation batched update: given keys K (columns) and desired
// output increments R (columns), returns dW with (W + dW) k_i = W k_i + r_i.
// A single column reduces to the rank-one form dW = r (C^-1 k)^T / (k^T C^-1 k).
inline Matrix exact_update(const KeyCovariance& cov, const Matrix& keys, const Matrix& increments) {
    require(keys.cols() == increments.cols() && keys.cols() >= 1, "key/increment count mismatch");
    Matrix cinv_k(keys.rows(), keys.cols());
    for (Eigen::Index j = 0; j < keys.cols(); ++j) {
        cinv_k.col(j) = cov.solve(keys.col(j));
    }
    const Matrix gram = keys.transpose() * cinv_k;  // n x n
    if (keys.cols() == 1) {
        const double denom = gram(0, 0);
        if (std::abs(denom) < 1e-8) {
            fail("degenerate key: (C^-1 k)^T k = ", denom);
        }
        return (increments.col(0) / denom) * cinv_k.col(0).transpose();
    }
    Eigen::FullPivLU<Matrix> lu(gram);
    if (!lu.isInvertible()) {
        fail("rank-deficient key matrix: batched update needs linearly independent keys");
    }
    return increments * lu.solve(cinv_k.transpose());
}

struct RomeConfig {
    int layer = 1;
    SolveConfig solve;
};

struct RomeResult {
    TransformerModel model;
    EditedLayerWeights weights;
    Vector k_star;
    Vector v_star;
    double achieved_p = 0.0;
};

inline RomeResult rome_edit(const TransformerModel& model, const Corpus& corpus,
                            const EditRequest& req, const KeyCovariance& cov,
                            const RomeConfig& cfg = {}) {
    require(cov.layer == cfg.layer, "covariance estimated for a different layer");
    RomeResult result;
    result.k_star = compute_key(model, cfg.layer, corpus, req.fact);
    ValueResult value = solve_value(model, cfg.layer, corpus, req.fact, req.new_object, cfg.solve);
    result.v_star = value.v_star;
    result.achieved_p = value.achieved_p;

    const Matrix& w = model.params.layers[static_cast<std::size_t>(cfg.layer)].w_proj;
    Matrix increments(model.config.d_model, 1);
    increments.col(0) = result.v_star - w * result.k_star;
    Matrix keys(model.config.d_mlp, 1);
    keys.col(0) = result.k_star;
    const Matrix delta = exact_update(cov, keys, increments);

    result.weights.layer = cfg.layer;
    result.weights.w = w;
    result.weights.w_hat = w + delta;
    result.weights.edit_ids = {req.edit_id};
    result.model = model;
    result.model.params.layers[static_cast<std::size_t>(cfg.layer)].w_proj = result.weights.w_hat;
    return result;
}

struct MemitConfig {
    int first_layer = 1;
    int last_layer = 2;
    SolveConfig solve;
};

struct MemitResult {
    TransformerModel model;
    std::vector<EditedLayerWeights> weights;  // one per layer, shallow to deep
    std::vector<double> achieved_p;           // per request
};

// Spreads each request's residual (v* - W k*, measured at the deepest edited
// layer) equally across the layer range; layers are updated shallow to deep
// with keys recomputed on the partially updated model.
inline MemitResult memit_edit(const TransformerModel& model, const Corpus& corpus,
                              const std::vector<EditRequest>& requests,
                              const std::vector<KeyCovariance>& covariances,
                              const MemitConfig& cfg = {}) {
    require(!requests.empty(), "memit_edit: no requests");
    require(cfg.first_layer >= 0 && cfg.last_layer < model.config.n_layers &&
                cfg.first_layer <= cfg.last_layer,
            "memit_edit: bad layer range");
    const int n_layers = cfg.last_layer - cfg.first_layer + 1;
    require(static_cast<int>(covariances.size()) == n_layers,
            "memit_edit: one covariance per edited layer required");
    const int n = static_cast<int>(requests.size());

    MemitResult result;
    result.model = model;
    result.achieved_p.resize(static_cast<std::size_t>(n));

    // Residuals at the deepest layer of the original model.
    Matrix residual(model.config.d_model, n);
    for (int i = 0; i < n; ++i) {
        const auto& req = requests[static_cast<std::size_t>(i)];
        ValueResult value =
            solve_value(model, cfg.last_layer, corpus, req.fact, req.new_object, cfg.solve);
        result.achieved_p[static_cast<std::size_t>(i)] = value.achieved_p;
        const Vector k = compute_key(model, cfg.last_layer, corpus, req.fact);
        residual.col(i) =
            value.v_star -
            model.params.layers[static_cast<std::size_t>(cfg.last_layer)].w_proj * k;
    }
    residual /= static_cast<double>(n_layers);

    for (int l = cfg.first_layer; l <= cfg.last_layer; ++l) {
        const KeyCovariance& cov = covariances[static_cast<std::size_t>(l - cfg.first_layer)];
        require(cov.layer == l, "memit_edit: covariance/layer order mismatch");
        Matrix keys(model.config.d_mlp, n);
        for (int i = 0; i < n; ++i) {
            keys.col(i) = compute_key(result.model, l, corpus, requests[static_cast<std::size_t>(i)].fact);
        }
        const Matrix& w = result.model.params.layers[static_cast<std::size_t>(l)].w_proj;
        const Matrix delta = exact_update(cov, keys, residual);

        EditedLayerWeights elw;
        elw.layer = l;
        elw.w = w;
        elw.w_hat = w + delta;
        for (const auto& req : requests) {
            elw.edit_ids.push_back(req.edit_id);
        }
        result.model.params.layers[static_cast<std::size_t>(l)].w_proj = elw.w_hat;
        result.weights.push_back(std::move(elw));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Edit success
// ---------------------------------------------------------------------------

struct SuccessRecord {
    int edit_id = -1;
    double p_new = 0.0;  // P(o*|x)
    double p_old = 0.0;  // P(o|x)
    bool success = false;
};

struct SuccessReport {
    double fraction = 0.0;
    std::vector<SuccessRecord> records;
};

inline SuccessReport edit_success(const TransformerModel& model, const Corpus& corpus,
                                  const std::vector<EditRequest>& requests,
                                  const ForwardOptions& opts = {}) {
    require(!requests.empty(), "edit_success: no requests");
    SuccessReport report;
    int wins = 0;
    for (const auto& req : requests) {
        const RenderedPrompt prompt = corpus.render_canonical(req.fact);
        const Matrix logits = forward(model, prompt.tokens, opts);
        const Vector probs = softmax(logits.col(logits.cols() - 1));
        SuccessRecord rec;
        rec.edit_id = req.edit_id;
        rec.p_new = probs(req.new_object);
        rec.p_old = probs(req.fact.object);
        rec.success = rec.p_new > rec.p_old;
        wins += rec.success ? 1 : 0;
        report.records.push_back(rec);
    }
    report.fraction = static_cast<double>(wins) / static_cast<double>(requests.size());
    return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline void save_edit(const EditedLayerWeights& elw, const std::filesystem::path& path) {
    TensorStore store;
    store.meta["layer"] = elw.layer;
    store.meta["edit_ids"] = elw.edit_ids;
    store.put("w", elw.w);
    store.put("w_hat", elw.w_hat);
    save_tensors(store, path);
}

inline EditedLayerWeights load_edit(const std::filesystem::path& path) {
    const TensorStore store = load_tensors(path);
    EditedLayerWeights elw;
    elw.layer = store.meta.at("layer").get<int>();
    elw.edit_ids = store.meta.at("edit_ids").get<std::vector<int>>();
    elw.w = store.get("w");
    elw.w_hat = store.get("w_hat");
    require(elw.w.rows() == elw.w_hat.rows() && elw.w.cols() == elw.w_hat.cols(),
            "edit tensors have mismatched shapes");
    return elw;
}

inline json edit_sidecar(const Corpus& corpus, const EditRequest& req, int layer,
                         double achieved_p) {
    return json{{"edit_id", req.edit_id},
                {"layer", layer},
                {"fact", detail::fact_to_json(corpus, req.fact)},
                {"o", corpus.vocab.text(req.fact.object)},
                {"o_star", corpus.vocab.text(req.new_object)},
                {"achieved_p", achieved_p}};
}

}  // namespace editlab
