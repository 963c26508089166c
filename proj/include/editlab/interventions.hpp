#pragma once
// Classical pruning baselines over edited layers and the mask-injection
// edit-blocking experiment.

#include "editlab/common.hpp"
#include "editlab/corpus.hpp"
#include "editlab/editor.hpp"
#include "editlab/maskforge.hpp"
#include "editlab/model.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <vector>

namespace editlab {

// ---------------------------------------------------------------------------
// Prune specification
// ---------------------------------------------------------------------------

enum class PruneCriterion {
    UnstructuredDeltaW,    // top entries by |w_hat - w|
    UnstructuredWHat,      // top entries by |w_hat|
    StructuredColumnNorm,  // whole output dimensions by delta column norm
    StructuredActivation,  // whole hidden dimensions by mean |activation|
};

inline std::string to_string(PruneCriterion c) {
    switch (c) {
        case PruneCriterion::UnstructuredDeltaW: return "unstructured-delta-w";
        case PruneCriterion::UnstructuredWHat: return "unstructured-w-hat";
        case PruneCriterion::StructuredColumnNorm: return "structured-column-norm";
        case PruneCriterion::StructuredActivation: return "structured-activation";
    }
    fail("unreachable prune criterion");
}

inline PruneCriterion parse_criterion(const std::string& tag) {
    if (tag == "unstructured-delta-w") {
        return PruneCriterion::UnstructuredDeltaW;
    }
    if (tag == "unstructured-w-hat") {
        return PruneCriterion::UnstructuredWHat;
    }
    if (tag == "structured-column-norm") {
        return PruneCriterion::StructuredColumnNorm;
    }
    if (tag == "structured-activation") {
        return PruneCriterion::StructuredActivation;
    }
    fail("unknown prune criterion '" + tag + "'");
}

enum class PruneMode { Zero, Original };

inline std::string to_string(PruneMode m) {
    return m == PruneMode::Zero ? "zero" : "original";
}

inline PruneMode parse_mode(const std::string& tag) {
    if (tag == "zero") {
        return PruneMode::Zero;
    }
    if (tag == "original") {
        return PruneMode::Original;
    }
    fail("unknown prune mode '" + tag + "'");
}

struct PruneSpec {
    PruneCriterion criterion = PruneCriterion::UnstructuredDeltaW;
    double pct = 0.0;  // fraction of entries (or dimensions) to prune
    PruneMode mode = PruneMode::Zero;

    void validate() const { require(pct >= 0.0 && pct <= 1.0, "prune pct must lie in [0,1]"); }
};

// ---------------------------------------------------------------------------
// Activation statistics (for the structured-activation criterion)
// ---------------------------------------------------------------------------

// Mean absolute post-activation value per hidden dimension of `layer`,
// accumulated over non-overlapping windows of the text stream.
inline Vector activation_stats(const TransformerModel& model, int layer,
                               const std::vector<int>& text) {
    require(layer >= 0 && layer < model.config.n_layers, "activation_stats: layer out of range");
    Vector sums = Vector::Zero(model.config.d_mlp);
    long positions = 0;
    for (const auto& window : chunk_stream(text, model.config.max_seq_len)) {
        ForwardCache cache;
        forward(model, window, {}, &cache);
        const Matrix& act = cache.layers[static_cast<std::size_t>(layer)].act;
        sums += act.array().abs().matrix().rowwise().sum();
        positions += static_cast<long>(act.cols());
    }
    require(positions > 0, "activation_stats: text shorter than two tokens");
    return sums / static_cast<double>(positions);
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

struct PruneResult {
    Matrix matrix;     // pruned down-projection
    Matrix selection;  // same shape, 1 at pruned positions
    long n_selected = 0;
};

namespace detail {

// Descending order of `scores`, ties broken by lower index.
inline std::vector<Eigen::Index> rank_desc(const std::vector<double>& scores) {
    std::vector<Eigen::Index> order(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        order[i] = static_cast<Eigen::Index>(i);
    }
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    return order;
}

}  // namespace detail

// Selection matrix only: 1 marks the entries the spec prunes. Unstructured
// criteria rank flat entries (storage order index tie-break); structured
// criteria rank whole dimensions (output rows by delta norm, hidden columns
// by activation magnitude).
inline Matrix prune_selection(const EditedLayerWeights& edit, const PruneSpec& spec,
                              const Vector* act_stats = nullptr) {
    spec.validate();
    const Eigen::Index rows = edit.w_hat.rows();
    const Eigen::Index cols = edit.w_hat.cols();
    Matrix sel = Matrix::Zero(rows, cols);

    if (spec.criterion == PruneCriterion::UnstructuredDeltaW ||
        spec.criterion == PruneCriterion::UnstructuredWHat) {
        const Matrix basis =
            spec.criterion == PruneCriterion::UnstructuredDeltaW ? edit.delta() : edit.w_hat;
        std::vector<double> scores(static_cast<std::size_t>(basis.size()));
        for (Eigen::Index i = 0; i < basis.size(); ++i) {
            scores[static_cast<std::size_t>(i)] = std::abs(basis(i));
        }
        const long k = std::llround(spec.pct * static_cast<double>(basis.size()));
        const auto order = detail::rank_desc(scores);
        for (long i = 0; i < k; ++i) {
            sel(order[static_cast<std::size_t>(i)]) = 1.0;
        }
        return sel;
    }

    if (spec.criterion == PruneCriterion::StructuredColumnNorm) {
        const Matrix delta = edit.delta();
        std::vector<double> scores(static_cast<std::size_t>(rows));
        for (Eigen::Index r = 0; r < rows; ++r) {
            scores[static_cast<std::size_t>(r)] = delta.row(r).norm();
        }
        const long k = std::llround(spec.pct * static_cast<double>(rows));
        const auto order = detail::rank_desc(scores);
        for (long i = 0; i < k; ++i) {
            sel.row(order[static_cast<std::size_t>(i)]).setOnes();
        }
        return sel;
    }

    require(act_stats != nullptr,
            "structured-activation pruning requires activation statistics");
    require(act_stats->size() == cols, "activation statistics length mismatch");
    std::vector<double> scores(static_cast<std::size_t>(cols));
    for (Eigen::Index c = 0; c < cols; ++c) {
        scores[static_cast<std::size_t>(c)] = (*act_stats)(c);
    }
    const long k = std::llround(spec.pct * static_cast<double>(cols));
    const auto order = detail::rank_desc(scores);
    for (long i = 0; i < k; ++i) {
        sel.col(order[static_cast<std::size_t>(i)]).setOnes();
    }
    return sel;
}

// Overwrites the selected positions of `w_hat` per the mode. Re-applying the
// same selection to the result is a bit-exact no-op (the idempotence
// contract: the selection is fixed by the original edit, not re-ranked).
inline Matrix apply_selection(const EditedLayerWeights& edit, const Matrix& selection,
                              PruneMode mode) {
    require(selection.rows() == edit.w_hat.rows() && selection.cols() == edit.w_hat.cols(),
            "apply_selection: shape mismatch");
    Matrix out = edit.w_hat;
    for (Eigen::Index i = 0; i < selection.size(); ++i) {
        if (selection(i) != 0.0) {
            out(i) = mode == PruneMode::Zero ? 0.0 : edit.w(i);
        }
    }
    return out;
}

inline PruneResult prune(const EditedLayerWeights& edit, const PruneSpec& spec,
                         const Vector* act_stats = nullptr) {
    PruneResult r;
    r.selection = prune_selection(edit, spec, act_stats);
    r.n_selected = static_cast<long>(std::llround(r.selection.sum()));
    r.matrix = apply_selection(edit, r.selection, spec.mode);
    return r;
}

// ---------------------------------------------------------------------------
// Sweep: RSR as a function of pruning percentage
// ---------------------------------------------------------------------------

struct SweepPoint {
    PruneCriterion criterion;
    PruneMode mode;
    double pct = 0.0;
    double rsr = 0.0;
};

namespace detail {

// RSR over edits when each edit's layer matrix is replaced by `pruned[i]`.
inline double rsr_with_matrices(const TransformerModel& base, const Corpus& corpus,
                                const std::vector<EditedLayerWeights>& edits,
                                const std::vector<EditRequest>& requests,
                                const std::vector<Matrix>& pruned) {
    long wins = 0;
    for (std::size_t i = 0; i < edits.size(); ++i) {
        ForwardOptions opts;
        opts.wproj_override = &pruned[i];
        opts.override_layer = edits[i].layer;
        const RenderedPrompt prompt = corpus.render_canonical(requests[i].fact);
        const Matrix logits = forward(base, prompt.tokens, opts);
        const Vector probs = softmax(logits.col(logits.cols() - 1));
        wins += probs(requests[i].fact.object) > probs(requests[i].new_object) ? 1 : 0;
    }
    return static_cast<double>(wins) / static_cast<double>(edits.size());
}

}  // namespace detail

inline std::vector<SweepPoint> prune_sweep(const TransformerModel& base, const Corpus& corpus,
                                           const std::vector<EditedLayerWeights>& edits,
                                           const std::vector<EditRequest>& requests,
                                           const std::vector<PruneCriterion>& criteria,
                                           const std::vector<double>& pct_grid,
                                           const std::vector<PruneMode>& modes,
                                           const Vector* act_stats = nullptr) {
    require(!edits.empty() && edits.size() == requests.size(),
            "prune_sweep: edits and requests must align");
    require(std::is_sorted(pct_grid.begin(), pct_grid.end()),
            "prune_sweep: pct grid must be sorted ascending");
    std::vector<SweepPoint> out;
    for (PruneCriterion criterion : criteria) {
        for (PruneMode mode : modes) {
            for (double pct : pct_grid) {
                const PruneSpec spec{criterion, pct, mode};
                std::vector<Matrix> pruned;
                for (const auto& e : edits) {
                    pruned.push_back(prune(e, spec, act_stats).matrix);
                }
                out.push_back(SweepPoint{
                    criterion, mode, pct,
                    detail::rsr_with_matrices(base, corpus, edits, requests, pruned)});
            }
        }
    }
    return out;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& points) {
    std::ostringstream os;
    os.precision(12);
    os << "criterion,mode,pct,rsr\n";
    for (const auto& p : points) {
        os << to_string(p.criterion) << ',' << to_string(p.mode) << ',' << p.pct << ',' << p.rsr
           << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Edit blocking
// ---------------------------------------------------------------------------

struct BlockedEditResult {
    bool success = false;
    double achieved_p = 0.0;          // P(o*|x) under the masked edited model
    TransformerModel model;           // runtime model (mask still active)
    EditedLayerWeights weights;       // pre-mask closed-form update on the masked base
};

// Runs the rank-one edit with the mask active for both the value optimization
// and the final model: the edit layer computes with W (.) K throughout, so the
// part of the update falling on pruned positions never takes effect.
inline BlockedEditResult blocked_edit(const TransformerModel& base, const Corpus& corpus,
                                      const EditRequest& req, const Matrix& mask,
                                      const KeyCovariance& cov, const RomeConfig& cfg = {}) {
    const auto& w = base.params.layers[static_cast<std::size_t>(cfg.layer)].w_proj;
    require(mask.rows() == w.rows() && mask.cols() == w.cols(),
            "blocked_edit: mask shape mismatch");
    const TransformerModel masked_base = apply_mask(base, cfg.layer, mask);
    RomeResult rome = rome_edit(masked_base, corpus, req, cov, cfg);

    BlockedEditResult out;
    out.weights = rome.weights;
    out.model = rome.model;
    auto& runtime_w =
        out.model.params.layers[static_cast<std::size_t>(cfg.layer)].w_proj;
    runtime_w = rome.weights.w_hat.cwiseProduct(mask);

    const RenderedPrompt prompt = corpus.render_canonical(req.fact);
    const Matrix logits = forward(out.model, prompt.tokens);
    const Vector probs = softmax(logits.col(logits.cols() - 1));
    out.achieved_p = probs(req.new_object);
    out.success = probs(req.new_object) > probs(req.fact.object);
    return out;
}

// ---------------------------------------------------------------------------
// Blocking report
// ---------------------------------------------------------------------------

struct BlockingBucket {
    int relation = -1;
    int n = 0;
    int standard_success = 0;
    int blocked_success = 0;
};

struct BlockingReport {
    std::vector<BlockingBucket> buckets;  // ascending relation index
    int n_total = 0;
    int standard_total = 0;
    int blocked_total = 0;

    double standard_rate() const { return static_cast<double>(standard_total) / n_total; }
    double blocked_rate() const { return static_cast<double>(blocked_total) / n_total; }
};

inline BlockingReport blocking_report(const TransformerModel& base, const Corpus& corpus,
                                      const std::vector<EditRequest>& requests, const Matrix& mask,
                                      const KeyCovariance& cov, const RomeConfig& cfg = {}) {
    require(!requests.empty(), "blocking_report: no requests");
    std::map<int, BlockingBucket> by_relation;
    BlockingReport report;
    for (const auto& req : requests) {
        const RomeResult standard = rome_edit(base, corpus, req, cov, cfg);
        const SuccessReport std_ok = edit_success(standard.model, corpus, {req});
        const BlockedEditResult blocked = blocked_edit(base, corpus, req, mask, cov, cfg);

        auto& bucket = by_relation[req.fact.relation_index];
        bucket.relation = req.fact.relation_index;
        bucket.n += 1;
        bucket.standard_success += std_ok.records.front().success ? 1 : 0;
        bucket.blocked_success += blocked.success ? 1 : 0;
        report.n_total += 1;
        report.standard_total += std_ok.records.front().success ? 1 : 0;
        report.blocked_total += blocked.success ? 1 : 0;
    }
    for (auto& [rel, bucket] : by_relation) {
        report.buckets.push_back(bucket);
    }
    return report;
}

inline std::string blocking_csv(const BlockingReport& report) {
    std::ostringstream os;
    os.precision(12);
    os << "relation,n,standard_success,blocked_success,standard_rate,blocked_rate\n";
    for (const auto& b : report.buckets) {
        os << b.relation << ',' << b.n << ',' << b.standard_success << ',' << b.blocked_success
           << ',' << static_cast<double>(b.standard_success) / b.n << ','
           << static_cast<double>(b.blocked_success) / b.n << '\n';
    }
    os << "total," << report.n_total << ',' << report.standard_total << ','
       << report.blocked_total << ',' << report.standard_rate() << ',' << report.blocked_rate()
       << '\n';
    return os.str();
}

}  // namespace editlab
