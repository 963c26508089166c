#pragma once
// Reversal and edit metrics: reversal success rate, top-1 overlap,
// perplexity triples, KL pair distributions and two-sample signal statistics.

#include "editlab/common.hpp"
#include "editlab/corpus.hpp"
#include "editlab/editor.hpp"
#include "editlab/maskforge.hpp"
#include "editlab/model.hpp"

#include <algorithm>
#include <optional>
#include <vector>

namespace editlab {

// ---------------------------------------------------------------------------
// Reversal records and RSR
// ---------------------------------------------------------------------------

struct ReversalRecord {
    int edit_id = -1;
    double p_original = 0.0;  // P_{M_p}(o|x)
    double p_new = 0.0;       // P_{M_p}(o*|x)
    double delta_r = 0.0;     // p_original - p_new
    int top1_m = -1;
    int top1_me = -1;
    int top1_mp = -1;
};

// One record per edit: the pruned model is W_hat_i masked at the edit layer.
inline std::vector<ReversalRecord> build_reversal_records(
    const TransformerModel& base, const Corpus& corpus,
    const std::vector<EditedLayerWeights>& edits, const std::vector<EditRequest>& requests,
    const Matrix& mask) {
    require(edits.size() == requests.size(), "edits and requests must align");
    require(!edits.empty(), "no edits to evaluate");
    std::vector<ReversalRecord> records;
    for (std::size_t i = 0; i < edits.size(); ++i) {
        const auto& elw = edits[i];
        const auto& req = requests[i];
        require(mask.rows() == elw.w_hat.rows() && mask.cols() == elw.w_hat.cols(),
                "mask/edit shape mismatch");
        const RenderedPrompt prompt = corpus.render_canonical(req.fact);
        const Matrix w_masked = elw.w_hat.cwiseProduct(mask);

        auto last_col = [&](const Matrix* override_w) {
            ForwardOptions opts;
            if (override_w) {
                opts.wproj_override = override_w;
                opts.override_layer = elw.layer;
            }
            const Matrix logits = forward(base, prompt.tokens, opts);
            return Vector(logits.col(logits.cols() - 1));
        };
        const Vector logits_m = last_col(nullptr);
        const Vector logits_me = last_col(&elw.w_hat);
        const Vector logits_mp = last_col(&w_masked);
        const Vector probs_mp = softmax(logits_mp);

        ReversalRecord rec;
        rec.edit_id = req.edit_id;
        rec.p_original = probs_mp(req.fact.object);
        rec.p_new = probs_mp(req.new_object);
        rec.delta_r = rec.p_original - rec.p_new;
        rec.top1_m = argmax_lowest(logits_m);
        rec.top1_me = argmax_lowest(logits_me);
        rec.top1_mp = argmax_lowest(logits_mp);
        records.push_back(rec);
    }
    return records;
}

// Fraction with delta_r strictly positive; ties count as not reversed.
inline double rsr(const std::vector<ReversalRecord>& records) {
    require(!records.empty(), "rsr: no records");
    long wins = 0;
    for (const auto& r : records) {
        wins += r.delta_r > 0.0 ? 1 : 0;
    }
    return static_cast<double>(wins) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Top-1 overlap
// ---------------------------------------------------------------------------

inline double top1_overlap(const TransformerModel& a, const TransformerModel& b,
                           const std::vector<std::vector<int>>& prompts) {
    require(!prompts.empty(), "top1_overlap: no prompts");
    long matches = 0;
    for (const auto& prompt : prompts) {
        const Matrix la = forward(a, prompt);
        const Matrix lb = forward(b, prompt);
        matches += argmax_lowest(la.col(la.cols() - 1)) == argmax_lowest(lb.col(lb.cols() - 1)) ? 1 : 0;
    }
    return static_cast<double>(matches) / static_cast<double>(prompts.size());
}

// Overlap between the original and pruned models' argmax over the per-edit
// prompts already evaluated into reversal records.
inline double top1_overlap(const std::vector<ReversalRecord>& records) {
    require(!records.empty(), "top1_overlap: no records");
    long matches = 0;
    for (const auto& r : records) {
        matches += r.top1_m == r.top1_mp ? 1 : 0;
    }
    return static_cast<double>(matches) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Perplexity triple
// ---------------------------------------------------------------------------

struct PerplexityTriple {
    double ppl_m = 0.0;
    double ppl_me = 0.0;
    double ppl_mp = 0.0;
};

inline PerplexityTriple perplexity_triple(const TransformerModel& m, const TransformerModel& m_e,
                                          const TransformerModel& m_p,
                                          const std::vector<int>& neutral_text) {
    PerplexityTriple t;
    t.ppl_m = perplexity(m, neutral_text);
    t.ppl_me = perplexity(m_e, neutral_text);
    t.ppl_mp = perplexity(m_p, neutral_text);
    return t;
}

// ---------------------------------------------------------------------------
// KL pairs
// ---------------------------------------------------------------------------

struct KlPair {
    double kl_me = 0.0;  // KL(M || M_e)
    double kl_mp = 0.0;  // KL(M || M_p)
};

inline std::vector<KlPair> kl_pairs(const TransformerModel& m, const TransformerModel& m_e,
                                    const TransformerModel& m_p,
                                    const std::vector<std::vector<int>>& prompts, double T = 1.0) {
    require(!prompts.empty(), "kl_pairs: no prompts");
    std::vector<KlPair> out;
    for (const auto& prompt : prompts) {
        const Matrix lm = forward(m, prompt);
        const Matrix lme = forward(m_e, prompt);
        const Matrix lmp = forward(m_p, prompt);
        const Eigen::Index last = lm.cols() - 1;
        KlPair pair;
        pair.kl_me = kl_loss(lm.col(last), lme.col(last), T);
        pair.kl_mp = kl_loss(lm.col(last), lmp.col(last), T);
        out.push_back(pair);
    }
    return out;
}

struct KlSummary {
    double mean_me = 0.0, mean_mp = 0.0;
    double median_me = 0.0, median_mp = 0.0;
    std::vector<double> bin_edges;  // shared histogram bins over both series
    std::vector<long> hist_me, hist_mp;
};

inline KlSummary summarize_kl(const std::vector<KlPair>& pairs, int bins = 10) {
    require(!pairs.empty(), "summarize_kl: no pairs");
    require(bins >= 1, "summarize_kl: bins must be >= 1");
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    std::vector<double> me, mp;
    KlSummary s;
    for (const auto& p : pairs) {
        me.push_back(p.kl_me);
        mp.push_back(p.kl_mp);
        s.mean_me += p.kl_me;
        s.mean_mp += p.kl_mp;
    }
    s.mean_me /= static_cast<double>(pairs.size());
    s.mean_mp /= static_cast<double>(pairs.size());
    s.median_me = median(me);
    s.median_mp = median(mp);

    const double lo = std::min(*std::min_element(me.begin(), me.end()),
                               *std::min_element(mp.begin(), mp.end()));
    double hi = std::max(*std::max_element(me.begin(), me.end()),
                         *std::max_element(mp.begin(), mp.end()));
    if (hi <= lo) {
        hi = lo + 1e-12;
    }
    s.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i) {
        s.bin_edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
    }
    s.hist_me.assign(static_cast<std::size_t>(bins), 0);
    s.hist_mp.assign(static_cast<std::size_t>(bins), 0);
    auto bucket = [&](double v) {
        int b = static_cast<int>(static_cast<double>(bins) * (v - lo) / (hi - lo));
        return std::min(std::max(b, 0), bins - 1);
    };
    for (double v : me) {
        ++s.hist_me[static_cast<std::size_t>(bucket(v))];
    }
    for (double v : mp) {
        ++s.hist_mp[static_cast<std::size_t>(bucket(v))];
    }
    return s;
}

// ---------------------------------------------------------------------------
// Signal statistics (Welch t + Cohen's d)
// ---------------------------------------------------------------------------

namespace detail {

// Continued-fraction evaluation of the regularized incomplete beta function
// (modified Lentz), accurate to ~1e-14 for the arguments used here.
inline double incbeta_cf(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-15;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) {
        d = tiny;
    }
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 400; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) {
            c = tiny;
        }
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) {
            break;
        }
    }
    return h;
}

inline double regularized_incomplete_beta(double a, double b, double x) {
    require(a > 0.0 && b > 0.0, "incomplete beta: a,b must be positive");
    if (x <= 0.0) {
        return 0.0;
    }
    if (x >= 1.0) {
        return 1.0;
    }
    const double ln_front = a * std::log(x) + b * std::log(1.0 - x) -
                            (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return std::exp(ln_front) * incbeta_cf(a, b, x) / a;
    }
    return 1.0 - std::exp(b * std::log(1.0 - x) + a * std::log(x) -
                          (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b))) *
                     incbeta_cf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// Two-sided p-value of a t statistic with (possibly fractional) df.
inline double student_t_two_sided_p(double t, double df) {
    require(df > 0.0, "t-test: df must be positive");
    const double x = df / (df + t * t);
    return detail::regularized_incomplete_beta(df / 2.0, 0.5, x);
}

struct SignalStats {
    int n_a = 0, n_b = 0;
    double mean_a = 0.0, mean_b = 0.0;
    double std_a = 0.0, std_b = 0.0;  // sample standard deviations (n-1)
    double cohens_d = 0.0;            // (mean_b - mean_a) / pooled std
    double t = 0.0;                   // Welch statistic
    double df = 0.0;                  // Welch-Satterthwaite degrees of freedom
    double p = 1.0;                   // two-sided
};

inline SignalStats signal_stats(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() >= 2 && b.size() >= 2, "signal_stats: both samples need >= 2 values");
    SignalStats s;
    s.n_a = static_cast<int>(a.size());
    s.n_b = static_cast<int>(b.size());
    auto mean = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) {
            m += x;
        }
        return m / static_cast<double>(v.size());
    };
    auto var = [](const std::vector<double>& v, double m) {
        double acc = 0.0;
        for (double x : v) {
            acc += (x - m) * (x - m);
        }
        return acc / static_cast<double>(v.size() - 1);
    };
    s.mean_a = mean(a);
    s.mean_b = mean(b);
    const double va = var(a, s.mean_a);
    const double vb = var(b, s.mean_b);
    s.std_a = std::sqrt(va);
    s.std_b = std::sqrt(vb);

    const double pooled_var =
        ((s.n_a - 1) * va + (s.n_b - 1) * vb) / static_cast<double>(s.n_a + s.n_b - 2);
    if (pooled_var <= 0.0) {
        fail("signal_stats: zero variance in both samples, Cohen's d undefined");
    }
    s.cohens_d = (s.mean_b - s.mean_a) / std::sqrt(pooled_var);

    const double se2 = va / s.n_a + vb / s.n_b;
    if (se2 <= 0.0) {
        fail("signal_stats: zero variance in both samples, Welch t undefined");
    }
    s.t = (s.mean_b - s.mean_a) / std::sqrt(se2);
    const double num = se2 * se2;
    const double den = (va / s.n_a) * (va / s.n_a) / (s.n_a - 1) +
                       (vb / s.n_b) * (vb / s.n_b) / (s.n_b - 1);
    s.df = num / den;
    s.p = student_t_two_sided_p(s.t, s.df);
    return s;
}

// ---------------------------------------------------------------------------
// CSV / JSON emission
// ---------------------------------------------------------------------------

inline std::string reversal_records_csv(const std::vector<ReversalRecord>& records) {
    std::ostringstream os;
    os << "edit_id,p_original,p_new,delta_r,top1_m,top1_me,top1_mp\n";
    os.setf(std::ios::scientific);
    os.precision(12);
    for (const auto& r : records) {
        os << r.edit_id << ',' << r.p_original << ',' << r.p_new << ',' << r.delta_r << ','
           << r.top1_m << ',' << r.top1_me << ',' << r.top1_mp << '\n';
    }
    return os.str();
}

inline json kl_summary_json(const KlSummary& s) {
    return json{{"mean_kl_m_me", s.mean_me},     {"mean_kl_m_mp", s.mean_mp},
                {"median_kl_m_me", s.median_me}, {"median_kl_m_mp", s.median_mp},
                {"bin_edges", s.bin_edges},      {"hist_kl_m_me", s.hist_me},
                {"hist_kl_m_mp", s.hist_mp}};
}

inline json signal_stats_json(const SignalStats& s) {
    return json{{"n_a", s.n_a},         {"n_b", s.n_b},   {"mean_a", s.mean_a},
                {"mean_b", s.mean_b},   {"std_a", s.std_a}, {"std_b", s.std_b},
                {"cohens_d", s.cohens_d}, {"welch_t", s.t}, {"welch_df", s.df},
                {"p_two_sided", s.p},   {"test", "welch-unequal-variance"}};
}

}  // namespace editlab
