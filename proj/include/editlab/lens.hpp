#pragma once
// Residual-stream decomposition (logit-lens style) plus mask/weight structure
// analyses: per-layer contribution traces, activation heatmaps, per-dimension
// pruning statistics and activation trajectories.

#include "editlab/common.hpp"
#include "editlab/maskforge.hpp"
#include "editlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace editlab {

// ---------------------------------------------------------------------------
// Decomposition
// ---------------------------------------------------------------------------

enum class LensConvention { RawAdditive, FrozenLN };

inline std::string to_string(LensConvention c) {
    return c == LensConvention::RawAdditive ? "raw-additive" : "frozen-ln";
}

inline LensConvention parse_convention(const std::string& tag) {
    if (tag == "raw-additive") {
        return LensConvention::RawAdditive;
    }
    if (tag == "frozen-ln") {
        return LensConvention::FrozenLN;
    }
    fail("unknown decomposition convention '" + tag + "' (expected raw-additive or frozen-ln)");
}

// Per-sublayer contribution of the residual increments to one target token's
// logit, measured at the final prompt position.
struct DecompositionTrace {
    LensConvention convention = LensConvention::RawAdditive;
    int target = -1;
    double embedding = 0.0;
    std::vector<double> attn;        // one per layer
    std::vector<double> mlp;         // one per layer
    std::vector<double> cumulative;  // prefix sums: embedding, then attn/mlp per layer
    double total = 0.0;              // directly computed target component
};

// raw-additive: contribution_c = u_tgt . dh_c, summing exactly to u_tgt . h_final.
// frozen-ln:    each increment is centered and scaled by the final layer norm's
//               gain and inverse std (computed once from the full final
//               residual), summing to logit_tgt - u_tgt . b_lnf.
inline DecompositionTrace decompose(const TransformerModel& model, const std::vector<int>& prompt,
                                    int target, LensConvention convention,
                                    const ForwardOptions& opts = {}) {
    require(target >= 0 && target < model.config.vocab_size, "decompose: target out of vocabulary");
    ForwardCache cache;
    forward(model, prompt, opts, &cache);
    const ResidualTrace rt = residual_trace(cache);
    const Eigen::Index pos = static_cast<Eigen::Index>(prompt.size()) - 1;
    const Eigen::RowVectorXd u = model.params.w_u.row(target);

    DecompositionTrace out;
    out.convention = convention;
    out.target = target;

    auto project = [&](const Vector& inc) {
        if (convention == LensConvention::RawAdditive) {
            return static_cast<double>(u * inc);
        }
        const double mu = inc.mean();
        const double inv_std = cache.lnf_inv_std(pos);
        const Vector scaled =
            model.params.lnf_g.col(0).cwiseProduct((inc.array() - mu).matrix()) * inv_std;
        return static_cast<double>(u * scaled);
    };

    out.embedding = project(rt.embedding.col(pos));
    out.cumulative.push_back(out.embedding);
    for (std::size_t l = 0; l < rt.attn_inc.size(); ++l) {
        out.attn.push_back(project(rt.attn_inc[l].col(pos)));
        out.cumulative.push_back(out.cumulative.back() + out.attn.back());
        out.mlp.push_back(project(rt.mlp_inc[l].col(pos)));
        out.cumulative.push_back(out.cumulative.back() + out.mlp.back());
    }
    if (convention == LensConvention::RawAdditive) {
        out.total = u * rt.final_residual.col(pos);
    } else {
        out.total = cache.logits(target, pos) - u * model.params.lnf_b.col(0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trace aggregation and model comparison
// ---------------------------------------------------------------------------

// Mean and standard error of the per-layer contributions over a set of traces.
// With a single trace the s.e. is undefined and reported as NaN (emitted as
// null, never as 0).
struct TraceStats {
    int n = 0;
    double embedding_mean = 0.0;
    double embedding_se = 0.0;
    std::vector<double> attn_mean, attn_se;
    std::vector<double> mlp_mean, mlp_se;
};

inline TraceStats aggregate_traces(const std::vector<DecompositionTrace>& traces) {
    require(!traces.empty(), "aggregate_traces: no traces");
    const std::size_t L = traces.front().attn.size();
    for (const auto& t : traces) {
        require(t.attn.size() == L && t.mlp.size() == L, "aggregate_traces: layer count mismatch");
    }
    const double n = static_cast<double>(traces.size());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto stats = [&](auto&& pick) {
        double mean = 0.0;
        for (const auto& t : traces) {
            mean += pick(t);
        }
        mean /= n;
        if (traces.size() < 2) {
            return std::pair<double, double>{mean, nan};
        }
        double acc = 0.0;
        for (const auto& t : traces) {
            const double d = pick(t) - mean;
            acc += d * d;
        }
        return std::pair<double, double>{mean, std::sqrt(acc / (n - 1.0)) / std::sqrt(n)};
    };

    TraceStats s;
    s.n = static_cast<int>(traces.size());
    std::tie(s.embedding_mean, s.embedding_se) =
        stats([](const DecompositionTrace& t) { return t.embedding; });
    for (std::size_t l = 0; l < L; ++l) {
        auto [am, ase] = stats([l](const DecompositionTrace& t) { return t.attn[l]; });
        auto [mm, mse] = stats([l](const DecompositionTrace& t) { return t.mlp[l]; });
        s.attn_mean.push_back(am);
        s.attn_se.push_back(ase);
        s.mlp_mean.push_back(mm);
        s.mlp_se.push_back(mse);
    }
    return s;
}

// A prompt plus the two tokens whose logit trajectories are compared.
struct LensPrompt {
    std::vector<int> tokens;
    int target_o = -1;
    int target_o_star = -1;
};

struct TraceCurve {
    std::string model;   // "m" | "m_e" | "m_p"
    std::string target;  // "o" | "o_star"
    TraceStats stats;
};

struct TraceComparison {
    LensConvention convention = LensConvention::RawAdditive;
    int n_layers = 0;
    std::vector<TraceCurve> curves;  // 6 conditions: {m, m_e, m_p} x {o, o_star}
};

inline TraceComparison compare_traces(const TransformerModel& m, const TransformerModel& m_e,
                                      const TransformerModel& m_p,
                                      const std::vector<LensPrompt>& prompts,
                                      LensConvention convention = LensConvention::RawAdditive) {
    require(!prompts.empty(), "compare_traces: no prompts");
    TraceComparison cmp;
    cmp.convention = convention;
    cmp.n_layers = m.config.n_layers;
    const std::pair<std::string, const TransformerModel*> models[] = {
        {"m", &m}, {"m_e", &m_e}, {"m_p", &m_p}};
    for (const auto& [name, model] : models) {
        for (const std::string target : {"o", "o_star"}) {
            std::vector<DecompositionTrace> traces;
            for (const auto& p : prompts) {
                const int tok = target == "o" ? p.target_o : p.target_o_star;
                traces.push_back(decompose(*model, p.tokens, tok, convention));
            }
            cmp.curves.push_back(TraceCurve{name, target, aggregate_traces(traces)});
        }
    }
    return cmp;
}

// Copy of `base` with one layer's down-projection replaced; used to
// materialize edited/pruned models for trace comparisons.
inline TransformerModel with_layer_wproj(const TransformerModel& base, int layer, const Matrix& w) {
    require(layer >= 0 && layer < base.config.n_layers, "with_layer_wproj: layer out of range");
    const auto& cur = base.params.layers[static_cast<std::size_t>(layer)].w_proj;
    require(w.rows() == cur.rows() && w.cols() == cur.cols(), "with_layer_wproj: shape mismatch");
    TransformerModel out = base;
    out.params.layers[static_cast<std::size_t>(layer)].w_proj = w;
    return out;
}

// ---------------------------------------------------------------------------
// Edited-layer amplification
// ---------------------------------------------------------------------------

struct AmplificationReport {
    int layer = -1;
    int n = 0;
    double baseline_mean_abs = 0.0;  // mean |mlp contribution| in the original model
    double edited_mean_abs = 0.0;    // same in the edited model
    double ratio = 0.0;
    bool infinite = false;  // zero baseline
};

inline AmplificationReport edited_layer_amplification(
    const std::vector<DecompositionTrace>& original, const std::vector<DecompositionTrace>& edited,
    int edit_layer) {
    require(!original.empty() && original.size() == edited.size(),
            "edited_layer_amplification: traces must be non-empty and matched");
    require(edit_layer >= 0 && edit_layer < static_cast<int>(original.front().mlp.size()),
            "edited_layer_amplification: layer out of range");
    AmplificationReport r;
    r.layer = edit_layer;
    r.n = static_cast<int>(original.size());
    for (std::size_t i = 0; i < original.size(); ++i) {
        r.baseline_mean_abs += std::abs(original[i].mlp[static_cast<std::size_t>(edit_layer)]);
        r.edited_mean_abs += std::abs(edited[i].mlp[static_cast<std::size_t>(edit_layer)]);
    }
    r.baseline_mean_abs /= r.n;
    r.edited_mean_abs /= r.n;
    if (r.baseline_mean_abs == 0.0) {
        r.infinite = true;
        r.ratio = std::numeric_limits<double>::infinity();
    } else {
        r.ratio = r.edited_mean_abs / r.baseline_mean_abs;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Activation heatmap and dimension trajectories
// ---------------------------------------------------------------------------

// Row l = post-block residual at the final prompt position after layer l.
inline Matrix activation_heatmap(const TransformerModel& model, const std::vector<int>& prompt,
                                 const ForwardOptions& opts = {}) {
    ForwardCache cache;
    forward(model, prompt, opts, &cache);
    const Eigen::Index pos = static_cast<Eigen::Index>(prompt.size()) - 1;
    Matrix grid(model.config.n_layers, model.config.d_model);
    Vector x = cache.x0.col(pos);
    for (int l = 0; l < model.config.n_layers; ++l) {
        const auto& lc = cache.layers[static_cast<std::size_t>(l)];
        x += lc.attn_out.col(pos) + lc.mlp_out.col(pos);
        grid.row(l) = x.transpose();
    }
    return grid;
}

struct TrajectoryCurve {
    std::string model;  // "m" | "m_e" | "m_p"
    int dim = -1;
    std::vector<double> mean;  // per layer
    std::vector<double> se;    // NaN when n == 1
};

inline std::vector<TrajectoryCurve> dimension_trajectories(
    const TransformerModel& m, const TransformerModel& m_e, const TransformerModel& m_p,
    const std::vector<int>& dims, const std::vector<std::vector<int>>& prompts) {
    require(!prompts.empty(), "dimension_trajectories: no prompts");
    for (int d : dims) {
        require(d >= 0 && d < m.config.d_model, "dimension_trajectories: dim out of range");
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<TrajectoryCurve> out;
    const std::pair<std::string, const TransformerModel*> models[] = {
        {"m", &m}, {"m_e", &m_e}, {"m_p", &m_p}};
    for (int dim : dims) {
        for (const auto& [name, model] : models) {
            std::vector<Matrix> grids;
            for (const auto& p : prompts) {
                grids.push_back(activation_heatmap(*model, p));
            }
            TrajectoryCurve curve;
            curve.model = name;
            curve.dim = dim;
            const double n = static_cast<double>(grids.size());
            for (int l = 0; l < model->config.n_layers; ++l) {
                double mean = 0.0;
                for (const auto& g : grids) {
                    mean += g(l, dim);
                }
                mean /= n;
                curve.mean.push_back(mean);
                if (grids.size() < 2) {
                    curve.se.push_back(nan);
                } else {
                    double acc = 0.0;
                    for (const auto& g : grids) {
                        acc += (g(l, dim) - mean) * (g(l, dim) - mean);
                    }
                    curve.se.push_back(std::sqrt(acc / (n - 1.0)) / std::sqrt(n));
                }
            }
            out.push_back(std::move(curve));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mask and delta structure
// ---------------------------------------------------------------------------

// Pruned fraction per output dimension (rows of the down-projection feed the
// residual stream, one row per output dimension).
struct MaskStructure {
    std::vector<double> pruned_pct;                // by output dimension index
    std::vector<std::pair<int, double>> sorted;    // descending pct, ties by index
    std::vector<int> top_dims;                     // first `top_k` of `sorted`
    long total_pruned = 0;
};

inline MaskStructure mask_structure(const BinaryMask& mask, int top_k = 5) {
    require(mask.m.size() > 0, "mask_structure: empty mask");
    require(top_k >= 0, "mask_structure: top_k must be >= 0");
    MaskStructure s;
    const Eigen::Index dims = mask.m.rows();
    const double per_dim = static_cast<double>(mask.m.cols());
    for (Eigen::Index d = 0; d < dims; ++d) {
        const double pruned = per_dim - mask.m.row(d).sum();
        s.pruned_pct.push_back(100.0 * pruned / per_dim);
        s.total_pruned += static_cast<long>(std::llround(pruned));
    }
    for (int d = 0; d < static_cast<int>(dims); ++d) {
        s.sorted.emplace_back(d, s.pruned_pct[static_cast<std::size_t>(d)]);
    }
    std::stable_sort(s.sorted.begin(), s.sorted.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    for (int i = 0; i < std::min<int>(top_k, static_cast<int>(dims)); ++i) {
        s.top_dims.push_back(s.sorted[static_cast<std::size_t>(i)].first);
    }
    return s;
}

struct DeltaMagnitudeStats {
    double mean_abs_delta_overall = 0.0;
    std::optional<double> mean_abs_delta_masked;  // null when nothing is pruned
    double overlap_with_top_delta = 0.0;  // pruned positions inside the top-|delta| set
    long pruned_count = 0;
};

inline DeltaMagnitudeStats delta_magnitude_stats(const EditedLayerWeights& edit,
                                                 const BinaryMask& mask) {
    require(edit.w_hat.rows() == mask.m.rows() && edit.w_hat.cols() == mask.m.cols(),
            "delta_magnitude_stats: shape mismatch");
    const Matrix delta = edit.delta();
    DeltaMagnitudeStats s;
    s.mean_abs_delta_overall = delta.array().abs().mean();

    const Eigen::Index n = delta.size();
    std::vector<Eigen::Index> pruned;
    double masked_sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (mask.m(i) == 0.0) {
            pruned.push_back(i);
            masked_sum += std::abs(delta(i));
        }
    }
    s.pruned_count = static_cast<long>(pruned.size());
    if (pruned.empty()) {
        return s;
    }
    s.mean_abs_delta_masked = masked_sum / static_cast<double>(pruned.size());

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        return std::abs(delta(a)) > std::abs(delta(b));
    });
    std::vector<char> in_top(static_cast<std::size_t>(n), 0);
    for (std::size_t i = 0; i < pruned.size(); ++i) {
        in_top[static_cast<std::size_t>(order[i])] = 1;
    }
    long hits = 0;
    for (Eigen::Index i : pruned) {
        hits += in_top[static_cast<std::size_t>(i)];
    }
    s.overlap_with_top_delta = static_cast<double>(hits) / static_cast<double>(pruned.size());
    return s;
}

// ---------------------------------------------------------------------------
// CSV / JSON emission
// ---------------------------------------------------------------------------

namespace detail {

inline void csv_number(std::ostringstream& os, double v) {
    if (std::isnan(v)) {
        os << "null";
    } else {
        os << v;
    }
}

}  // namespace detail

inline std::string decomposition_csv(const DecompositionTrace& t) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(12);
    os << "component,layer,contribution,cumulative\n";
    os << "embedding,-1," << t.embedding << ',' << t.cumulative[0] << '\n';
    for (std::size_t l = 0; l < t.attn.size(); ++l) {
        os << "attn," << l << ',' << t.attn[l] << ',' << t.cumulative[2 * l + 1] << '\n';
        os << "mlp," << l << ',' << t.mlp[l] << ',' << t.cumulative[2 * l + 2] << '\n';
    }
    os << "total,-1," << t.total << ',' << t.total << '\n';
    return os.str();
}

inline std::string trace_comparison_csv(const TraceComparison& cmp) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(12);
    os << "model,target,component,layer,mean,se\n";
    for (const auto& c : cmp.curves) {
        os << c.model << ',' << c.target << ",embedding,-1," << c.stats.embedding_mean << ',';
        detail::csv_number(os, c.stats.embedding_se);
        os << '\n';
        for (std::size_t l = 0; l < c.stats.attn_mean.size(); ++l) {
            os << c.model << ',' << c.target << ",attn," << l << ',' << c.stats.attn_mean[l] << ',';
            detail::csv_number(os, c.stats.attn_se[l]);
            os << '\n';
            os << c.model << ',' << c.target << ",mlp," << l << ',' << c.stats.mlp_mean[l] << ',';
            detail::csv_number(os, c.stats.mlp_se[l]);
            os << '\n';
        }
    }
    return os.str();
}

inline std::string heatmap_csv(const Matrix& grid) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(12);
    os << "layer";
    for (Eigen::Index d = 0; d < grid.cols(); ++d) {
        os << ",dim" << d;
    }
    os << '\n';
    for (Eigen::Index l = 0; l < grid.rows(); ++l) {
        os << l;
        for (Eigen::Index d = 0; d < grid.cols(); ++d) {
            os << ',' << grid(l, d);
        }
        os << '\n';
    }
    return os.str();
}

inline std::string mask_structure_csv(const MaskStructure& s) {
    std::ostringstream os;
    os.precision(12);
    os << "rank,dim,pruned_pct\n";
    for (std::size_t i = 0; i < s.sorted.size(); ++i) {
        os << i << ',' << s.sorted[i].first << ',' << s.sorted[i].second << '\n';
    }
    return os.str();
}

inline std::string trajectories_csv(const std::vector<TrajectoryCurve>& curves) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(12);
    os << "dim,model,layer,mean,se\n";
    for (const auto& c : curves) {
        for (std::size_t l = 0; l < c.mean.size(); ++l) {
            os << c.dim << ',' << c.model << ',' << l << ',' << c.mean[l] << ',';
            detail::csv_number(os, c.se[l]);
            os << '\n';
        }
    }
    return os.str();
}

inline std::uint64_t model_checksum(const TransformerModel& model) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, mat] : tensor_list(model.params)) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(mat->data(), static_cast<std::size_t>(mat->size()) * sizeof(double), h);
    }
    return h;
}

inline std::uint64_t prompt_set_checksum(const std::vector<std::vector<int>>& prompts) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : prompts) {
        const std::uint64_t n = p.size();
        h = fnv1a(&n, sizeof(n), h);
        h = fnv1a(p.data(), p.size() * sizeof(int), h);
    }
    return h;
}

inline json lens_metadata(LensConvention convention, const std::vector<std::vector<int>>& prompts,
                          const TransformerModel& m, const TransformerModel& m_e,
                          const TransformerModel& m_p) {
    return json{{"convention", to_string(convention)},
                {"n_prompts", prompts.size()},
                {"prompt_set_checksum", to_hex(prompt_set_checksum(prompts))},
                {"model_checksums",
                 {{"m", to_hex(model_checksum(m))},
                  {"m_e", to_hex(model_checksum(m_e))},
                  {"m_p", to_hex(model_checksum(m_p))}}}};
}

}  // namespace editlab
