#pragma once
// Tiny pre-norm decoder-only transformer with explicit forward/backward,
// Adam training on the fact corpus, probability/perplexity queries and
// residual-stream capture. Column-vector convention throughout: activations
// are d x S matrices (one column per position) and layers compute y = W x.

#include "editlab/checkpoint.hpp"
#include "editlab/common.hpp"
#include "editlab/corpus.hpp"

#include <cmath>
#include <type_traits>
#include <utility>
#include <vector>

namespace editlab {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_mlp = 256;
    int vocab_size = 0;
    int max_seq_len = 16;
    double ln_eps = 1e-5;
    std::uint64_t seed = 0;

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        require(n_layers > 0 && d_model > 0 && n_heads > 0 && d_mlp > 0 && vocab_size > 0 &&
                    max_seq_len > 1,
                "model config counts must be positive");
        require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        require(d_mlp >= d_model, "d_mlp must be >= d_model");
        require(ln_eps > 0, "layer-norm epsilon must be positive");
    }

    json to_json() const {
        return json{{"n_layers", n_layers},   {"d_model", d_model},
                    {"n_heads", n_heads},     {"d_mlp", d_mlp},
                    {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
                    {"ln_eps", ln_eps},       {"seed", seed}};
    }

    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.n_layers = j.at("n_layers").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_mlp = j.at("d_mlp").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.ln_eps = j.at("ln_eps").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.validate();
        return c;
    }
};

// Layer-norm gains/biases are kept as d x 1 matrices so every parameter
// tensor has the same type; that keeps optimizers and checkpointing generic.
struct LayerParams {
    Matrix ln1_g, ln1_b;
    Matrix w_q, w_k, w_v, w_o;
    Matrix ln2_g, ln2_b;
    Matrix w_fc, w_proj;
};

struct Params {
    Matrix tok_emb, pos_emb;  // d x vocab, d x max_seq_len
    std::vector<LayerParams> layers;
    Matrix lnf_g, lnf_b;
    Matrix w_u;  // vocab x d
};

template <class ParamsLike>
auto tensor_list(ParamsLike& p) {
    using MatPtr = std::conditional_t<std::is_const_v<ParamsLike>, const Matrix*, Matrix*>;
    std::vector<std::pair<std::string, MatPtr>> out;
    out.emplace_back("tok_emb", &p.tok_emb);
    out.emplace_back("pos_emb", &p.pos_emb);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        auto& lp = p.layers[l];
        out.emplace_back(pre + "ln1_g", &lp.ln1_g);
        out.emplace_back(pre + "ln1_b", &lp.ln1_b);
        out.emplace_back(pre + "w_q", &lp.w_q);
        out.emplace_back(pre + "w_k", &lp.w_k);
        out.emplace_back(pre + "w_v", &lp.w_v);
        out.emplace_back(pre + "w_o", &lp.w_o);
        out.emplace_back(pre + "ln2_g", &lp.ln2_g);
        out.emplace_back(pre + "ln2_b", &lp.ln2_b);
        out.emplace_back(pre + "w_fc", &lp.w_fc);
        out.emplace_back(pre + "w_proj", &lp.w_proj);
    }
    out.emplace_back("lnf_g", &p.lnf_g);
    out.emplace_back("lnf_b", &p.lnf_b);
    out.emplace_back("w_u", &p.w_u);
    return out;
}

inline Params zero_params(const ModelConfig& c) {
    Params p;
    p.tok_emb = Matrix::Zero(c.d_model, c.vocab_size);
    p.pos_emb = Matrix::Zero(c.d_model, c.max_seq_len);
    p.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& lp : p.layers) {
        lp.ln1_g = Matrix::Zero(c.d_model, 1);
        lp.ln1_b = Matrix::Zero(c.d_model, 1);
        lp.w_q = Matrix::Zero(c.d_model, c.d_model);
        lp.w_k = Matrix::Zero(c.d_model, c.d_model);
        lp.w_v = Matrix::Zero(c.d_model, c.d_model);
        lp.w_o = Matrix::Zero(c.d_model, c.d_model);
        lp.ln2_g = Matrix::Zero(c.d_model, 1);
        lp.ln2_b = Matrix::Zero(c.d_model, 1);
        lp.w_fc = Matrix::Zero(c.d_mlp, c.d_model);
        lp.w_proj = Matrix::Zero(c.d_model, c.d_mlp);
    }
    p.lnf_g = Matrix::Zero(c.d_model, 1);
    p.lnf_b = Matrix::Zero(c.d_model, 1);
    p.w_u = Matrix::Zero(c.vocab_size, c.d_model);
    return p;
}

struct TransformerModel {
    ModelConfig config;
    Params params;
};

inline TransformerModel init_model(const ModelConfig& c) {
    c.validate();
    TransformerModel m;
    m.config = c;
    m.params = zero_params(c);
    Rng rng(derive_seed(c.seed, 0x33));
    const double resid_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
    auto fill = [&](Matrix& t, double std) {
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                t(i, j) = rng.normal(0.0, std);
            }
        }
    };
    for (auto& [name, tensor] : tensor_list(m.params)) {
        const bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0;
        const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0 &&
                             name.find("ln") != std::string::npos;
        if (is_gain) {
            tensor->setOnes();
        } else if (is_bias) {
            tensor->setZero();
        } else if (name == "tok_emb" || name == "pos_emb") {
            fill(*tensor, 0.05);
        } else {
            double std = 1.0 / std::sqrt(static_cast<double>(tensor->cols()));
            if (name.find("w_o") != std::string::npos || name.find("w_proj") != std::string::npos) {
                std *= resid_scale;
            }
            fill(*tensor, std);
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Activation functions
// ---------------------------------------------------------------------------

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Hooks into the forward pass used by editing and mask training:
//  - wproj_override replaces the down-projection matrix at one layer;
//  - inject replaces that layer's MLP output column at one position.
struct ForwardOptions {
    const Matrix* wproj_override = nullptr;
    int override_layer = -1;
    const Vector* inject = nullptr;
    int inject_layer = -1;
    int inject_pos = -1;
};

struct LayerCache {
    Matrix x_in;        // residual entering the block
    Matrix ln1_xhat;    // normalized attention input
    Vector ln1_inv_std;
    Matrix q, k, v;
    std::vector<Matrix> att;  // per head, S x S row-stochastic (causal)
    Matrix att_concat;        // d x S head-concatenated values
    Matrix attn_out;          // residual increment from attention
    Matrix x_mid;             // residual after attention
    Matrix ln2_xhat;
    Vector ln2_inv_std;
    Matrix fc;       // pre-activation, d_mlp x S
    Matrix act;      // post-activation keys, d_mlp x S
    Matrix mlp_out;  // residual increment from the MLP
};

struct ForwardCache {
    std::vector<int> tokens;
    ForwardOptions opts;
    Matrix x0;  // embedding sum
    std::vector<LayerCache> layers;
    Matrix x_final;  // residual before the final layer norm
    Matrix lnf_xhat;
    Vector lnf_inv_std;
    Matrix logits;
};

namespace detail {

inline void layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, double eps, Matrix& y,
                       Matrix& xhat, Vector& inv_std) {
    const Eigen::Index d = x.rows(), s = x.cols();
    y.resize(d, s);
    xhat.resize(d, s);
    inv_std.resize(s);
    for (Eigen::Index j = 0; j < s; ++j) {
        const double mean = x.col(j).mean();
        const double var = (x.col(j).array() - mean).square().mean();
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std(j) = is;
        xhat.col(j) = (x.col(j).array() - mean) * is;
        y.col(j) = g.col(0).array() * xhat.col(j).array() + b.col(0).array();
    }
}

inline void layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& inv_std,
                                const Matrix& g, Matrix& dx, Matrix& dg, Matrix& db) {
    const Eigen::Index d = xhat.rows(), s = xhat.cols();
    dx.resize(d, s);
    for (Eigen::Index j = 0; j < s; ++j) {
        dg.col(0).array() += dy.col(j).array() * xhat.col(j).array();
        db.col(0) += dy.col(j);
        const Vector dxhat = (dy.col(j).array() * g.col(0).array()).matrix();
        const double mean_dxhat = dxhat.mean();
        const double mean_dxhat_xhat = (dxhat.array() * xhat.col(j).array()).mean();
        dx.col(j) = inv_std(j) *
                    (dxhat.array() - mean_dxhat - xhat.col(j).array() * mean_dxhat_xhat).matrix();
    }
}

}  // namespace detail

inline Matrix forward(const TransformerModel& model, const std::vector<int>& tokens,
                      const ForwardOptions& opts = {}, ForwardCache* cache = nullptr) {
    const ModelConfig& c = model.config;
    const Params& p = model.params;
    const int S = static_cast<int>(tokens.size());
    require(S >= 1, "empty token sequence");
    require(S <= c.max_seq_len, "sequence longer than max_seq_len");
    for (int i = 0; i < S; ++i) {
        if (tokens[static_cast<std::size_t>(i)] < 0 || tokens[static_cast<std::size_t>(i)] >= c.vocab_size) {
            fail("token ", tokens[static_cast<std::size_t>(i)], " out of vocabulary at position ", i);
        }
    }
    if (opts.inject) {
        require(opts.inject_layer >= 0 && opts.inject_layer < c.n_layers, "inject layer out of range");
        require(opts.inject_pos >= 0 && opts.inject_pos < S, "inject position out of range");
    }
    if (opts.wproj_override) {
        require(opts.override_layer >= 0 && opts.override_layer < c.n_layers,
                "override layer out of range");
        require(opts.wproj_override->rows() == c.d_model && opts.wproj_override->cols() == c.d_mlp,
                "override matrix shape mismatch");
    }

    const int H = c.n_heads, dh = c.d_head();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x(c.d_model, S);
    for (int i = 0; i < S; ++i) {
        x.col(i) = p.tok_emb.col(tokens[static_cast<std::size_t>(i)]) + p.pos_emb.col(i);
    }
    if (cache) {
        cache->tokens = tokens;
        cache->opts = opts;
        cache->x0 = x;
        cache->layers.assign(static_cast<std::size_t>(c.n_layers), LayerCache{});
    }

    Matrix ln_y, ln_xhat;
    Vector ln_inv_std;
    for (int l = 0; l < c.n_layers; ++l) {
        const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
        LayerCache* lc = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
        if (lc) {
            lc->x_in = x;
        }

        detail::layer_norm(x, lp.ln1_g, lp.ln1_b, c.ln_eps, ln_y, ln_xhat, ln_inv_std);
        if (lc) {
            lc->ln1_xhat = ln_xhat;
            lc->ln1_inv_std = ln_inv_std;
        }
        const Matrix q = lp.w_q * ln_y;
        const Matrix k = lp.w_k * ln_y;
        const Matrix v = lp.w_v * ln_y;
        Matrix concat(c.d_model, S);
        std::vector<Matrix> att_store;
        for (int h = 0; h < H; ++h) {
            const auto qh = q.middleRows(h * dh, dh);
            const auto kh = k.middleRows(h * dh, dh);
            const auto vh = v.middleRows(h * dh, dh);
            Matrix att(S, S);
            att.setZero();
            for (int i = 0; i < S; ++i) {
                Vector scores(i + 1);
                for (int j = 0; j <= i; ++j) {
                    scores(j) = qh.col(i).dot(kh.col(j)) * att_scale;
                }
                const Vector w = softmax(scores);
                for (int j = 0; j <= i; ++j) {
                    att(i, j) = w(j);
                }
            }
            concat.middleRows(h * dh, dh) = vh * att.transpose();
            if (lc) {
                att_store.push_back(std::move(att));
            }
        }
        const Matrix attn_out = lp.w_o * concat;
        if (lc) {
            lc->q = q;
            lc->k = k;
            lc->v = v;
            lc->att = std::move(att_store);
            lc->att_concat = concat;
            lc->attn_out = attn_out;
        }
        x += attn_out;
        if (lc) {
            lc->x_mid = x;
        }

        detail::layer_norm(x, lp.ln2_g, lp.ln2_b, c.ln_eps, ln_y, ln_xhat, ln_inv_std);
        if (lc) {
            lc->ln2_xhat = ln_xhat;
            lc->ln2_inv_std = ln_inv_std;
        }
        const Matrix fc = lp.w_fc * ln_y;
        Matrix act = fc.unaryExpr([](double t) { return gelu(t); });
        const Matrix& wproj =
            (opts.wproj_override && opts.override_layer == l) ? *opts.wproj_override : lp.w_proj;
        Matrix mlp_out = wproj * act;
        if (opts.inject && opts.inject_layer == l) {
            mlp_out.col(opts.inject_pos) = *opts.inject;
        }
        if (lc) {
            lc->fc = fc;
            lc->act = std::move(act);
            lc->mlp_out = mlp_out;
        }
        x += mlp_out;
    }

    detail::layer_norm(x, p.lnf_g, p.lnf_b, c.ln_eps, ln_y, ln_xhat, ln_inv_std);
    Matrix logits = p.w_u * ln_y;
    if (cache) {
        cache->x_final = x;
        cache->lnf_xhat = ln_xhat;
        cache->lnf_inv_std = ln_inv_std;
        cache->logits = logits;
    }
    return logits;
}

// ---------------------------------------------------------------------------
// Residual trace (telescoping view of the forward cache)
// ---------------------------------------------------------------------------

struct ResidualTrace {
    Matrix embedding;              // d x S
    std::vector<Matrix> attn_inc;  // per layer, d x S
    std::vector<Matrix> mlp_inc;   // per layer, d x S
    Matrix final_residual;         // d x S, pre final layer norm
};

inline ResidualTrace residual_trace(const ForwardCache& cache) {
    ResidualTrace t;
    t.embedding = cache.x0;
    for (const auto& lc : cache.layers) {
        t.attn_inc.push_back(lc.attn_out);
        t.mlp_inc.push_back(lc.mlp_out);
    }
    t.final_residual = cache.x_final;
    return t;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Accumulates parameter gradients for dLoss/dlogits into `grads` (which must
// be zero_params-shaped). When the forward pass injected a value vector, its
// gradient lands in *d_inject and the severed W_proj path gets none. When a
// W_proj override was active, grads.layers[l].w_proj holds the gradient of
// the effective (overriding) matrix.
inline void backward(const TransformerModel& model, const ForwardCache& cache,
                     const Matrix& dlogits, Params& grads, Vector* d_inject = nullptr) {
    const ModelConfig& c = model.config;
    const Params& p = model.params;
    const ForwardOptions& opts = cache.opts;
    const int S = static_cast<int>(cache.tokens.size());
    const int H = c.n_heads, dh = c.d_head();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    require(dlogits.rows() == c.vocab_size && dlogits.cols() == S, "dlogits shape mismatch");

    // Unembedding and final layer norm.
    grads.w_u += dlogits * (p.lnf_g.col(0).asDiagonal() * cache.lnf_xhat +
                            p.lnf_b.col(0) * Matrix::Ones(1, S))
                              .transpose();
    Matrix d_lny = p.w_u.transpose() * dlogits;
    Matrix dx;
    detail::layer_norm_backward(d_lny, cache.lnf_xhat, cache.lnf_inv_std, p.lnf_g, dx, grads.lnf_g,
                                grads.lnf_b);

    for (int l = c.n_layers - 1; l >= 0; --l) {
        const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
        LayerParams& lg = grads.layers[static_cast<std::size_t>(l)];
        const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
        const Matrix& wproj =
            (opts.wproj_override && opts.override_layer == l) ? *opts.wproj_override : lp.w_proj;

        // MLP sublayer: x_out = x_mid + mlp_out.
        Matrix d_mlp = dx;  // gradient of the residual increment
        if (opts.inject && opts.inject_layer == l) {
            if (d_inject) {
                *d_inject += d_mlp.col(opts.inject_pos);
            }
            d_mlp.col(opts.inject_pos).setZero();
        }
        lg.w_proj += d_mlp * lc.act.transpose();
        Matrix d_act = wproj.transpose() * d_mlp;
        Matrix d_fc =
            (d_act.array() * lc.fc.unaryExpr([](double t) { return gelu_grad(t); }).array())
                .matrix();
        lg.w_fc += d_fc * (lp.ln2_g.col(0).asDiagonal() * lc.ln2_xhat +
                           lp.ln2_b.col(0) * Matrix::Ones(1, S))
                              .transpose();
        Matrix d_ln2y = lp.w_fc.transpose() * d_fc;
        Matrix d_xmid;
        detail::layer_norm_backward(d_ln2y, lc.ln2_xhat, lc.ln2_inv_std, lp.ln2_g, d_xmid, lg.ln2_g,
                                    lg.ln2_b);
        d_xmid += dx;  // residual skip

        // Attention sublayer: x_mid = x_in + attn_out.
        const Matrix& d_attn = d_xmid;
        const Matrix ln1_y = lp.ln1_g.col(0).asDiagonal() * lc.ln1_xhat +
                             lp.ln1_b.col(0) * Matrix::Ones(1, S);
        lg.w_o += d_attn * lc.att_concat.transpose();
        Matrix d_concat = lp.w_o.transpose() * d_attn;
        Matrix d_q = Matrix::Zero(c.d_model, S);
        Matrix d_k = Matrix::Zero(c.d_model, S);
        Matrix d_v = Matrix::Zero(c.d_model, S);
        for (int h = 0; h < H; ++h) {
            const auto qh = lc.q.middleRows(h * dh, dh);
            const auto kh = lc.k.middleRows(h * dh, dh);
            const auto vh = lc.v.middleRows(h * dh, dh);
            const auto d_oh = d_concat.middleRows(h * dh, dh);
            const Matrix& att = lc.att[static_cast<std::size_t>(h)];
            d_v.middleRows(h * dh, dh) = d_oh * att;
            Matrix d_att = d_oh.transpose() * vh;  // S x S, (i,j) like att
            Matrix d_scores = Matrix::Zero(S, S);
            for (int i = 0; i < S; ++i) {
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    dot += att(i, j) * d_att(i, j);
                }
                for (int j = 0; j <= i; ++j) {
                    d_scores(i, j) = att(i, j) * (d_att(i, j) - dot);
                }
            }
            d_q.middleRows(h * dh, dh) = kh * d_scores.transpose() * att_scale;
            d_k.middleRows(h * dh, dh) = qh * d_scores * att_scale;
        }
        lg.w_q += d_q * ln1_y.transpose();
        lg.w_k += d_k * ln1_y.transpose();
        lg.w_v += d_v * ln1_y.transpose();
        Matrix d_ln1y = lp.w_q.transpose() * d_q + lp.w_k.transpose() * d_k +
                        lp.w_v.transpose() * d_v;
        Matrix d_xin;
        detail::layer_norm_backward(d_ln1y, lc.ln1_xhat, lc.ln1_inv_std, lp.ln1_g, d_xin, lg.ln1_g,
                                    lg.ln1_b);
        dx = d_xin + d_xmid;
    }

    for (int i = 0; i < S; ++i) {
        grads.tok_emb.col(cache.tokens[static_cast<std::size_t>(i)]) += dx.col(i);
        grads.pos_emb.col(i) += dx.col(i);
    }
}

// ---------------------------------------------------------------------------
// Language-model loss
// ---------------------------------------------------------------------------

struct SeqNll {
    double nll_sum = 0.0;
    int count = 0;
};

// Sum of next-token negative log-likelihoods (positions 0..S-2 predict 1..S-1).
inline SeqNll lm_nll(const Matrix& logits, const std::vector<int>& tokens) {
    const int S = static_cast<int>(tokens.size());
    require(S >= 2, "need at least 2 tokens for a prediction");
    SeqNll out;
    for (int i = 0; i + 1 < S; ++i) {
        const Vector logp = log_softmax(logits.col(i));
        out.nll_sum -= logp(tokens[static_cast<std::size_t>(i + 1)]);
        out.count += 1;
    }
    return out;
}

// dLoss/dlogits for `scale * sum-NLL`; the last position carries no target.
inline Matrix lm_dlogits(const Matrix& logits, const std::vector<int>& tokens, double scale) {
    const int S = static_cast<int>(tokens.size());
    Matrix d = Matrix::Zero(logits.rows(), logits.cols());
    for (int i = 0; i + 1 < S; ++i) {
        Vector probs = softmax(logits.col(i));
        probs(tokens[static_cast<std::size_t>(i + 1)]) -= 1.0;
        d.col(i) = probs * scale;
    }
    return d;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW) when nonzero
};

struct MatrixAdam {
    Matrix m, v;
    long t = 0;
};

inline void adam_step(Matrix& param, const Matrix& grad, MatrixAdam& st, const AdamConfig& c) {
    if (st.t == 0) {
        st.m = Matrix::Zero(param.rows(), param.cols());
        st.v = Matrix::Zero(param.rows(), param.cols());
    }
    st.t += 1;
    st.m = c.beta1 * st.m + (1.0 - c.beta1) * grad;
    st.v = (c.beta2 * st.v.array() + (1.0 - c.beta2) * grad.array().square()).matrix();
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
    if (c.weight_decay != 0.0) {
        param -= c.lr * c.weight_decay * param;
    }
    param.array() -= c.lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + c.eps);
}

struct ParamsAdam {
    Params m, v;
    long t = 0;
};

inline void adam_step(Params& params, const Params& grads, ParamsAdam& st, const ModelConfig& cfg,
                      const AdamConfig& c) {
    if (st.t == 0) {
        st.m = zero_params(cfg);
        st.v = zero_params(cfg);
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
    auto ps = tensor_list(params);
    auto gs = tensor_list(const_cast<Params&>(grads));
    auto ms = tensor_list(st.m);
    auto vs = tensor_list(st.v);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Matrix& p = *ps[i].second;
        const Matrix& g = *gs[i].second;
        Matrix& m = *ms[i].second;
        Matrix& v = *vs[i].second;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = (c.beta2 * v.array() + (1.0 - c.beta2) * g.array().square()).matrix();
        if (c.weight_decay != 0.0) {
            p -= c.lr * c.weight_decay * p;
        }
        p.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 16;
    double lr = 3e-3;
    double fact_fraction = 0.5;  // share of batch rows drawn from fact sentences
    std::uint64_t seed = 0;
    int log_every = 50;
};

struct PretrainReport {
    std::vector<std::pair<int, double>> loss_curve;  // (step, batch loss)
    int facts_total = 0;
    int facts_correct = 0;  // argmax correct under every paraphrase template
    double recall = 0.0;
};

inline std::vector<std::vector<int>> chunk_stream(const std::vector<int>& stream, int window) {
    std::vector<std::vector<int>> out;
    for (std::size_t start = 0; start + 1 < stream.size();
         start += static_cast<std::size_t>(window)) {
        const std::size_t end = std::min(stream.size(), start + static_cast<std::size_t>(window));
        if (end - start >= 2) {
            out.emplace_back(stream.begin() + static_cast<long>(start),
                             stream.begin() + static_cast<long>(end));
        }
    }
    return out;
}

inline double fact_recall(const TransformerModel& model, const Corpus& corpus,
                          int* correct_out = nullptr) {
    int correct = 0;
    for (const auto& fact : corpus.facts) {
        bool ok = true;
        for (const auto& rendered : corpus.render_all_templates(fact)) {
            const Matrix logits = forward(model, rendered.tokens);
            if (argmax_lowest(logits.col(logits.cols() - 1)) != fact.object) {
                ok = false;
                break;
            }
        }
        correct += ok ? 1 : 0;
    }
    if (correct_out) {
        *correct_out = correct;
    }
    return corpus.facts.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(corpus.facts.size());
}

inline PretrainReport pretrain(TransformerModel& model, const Corpus& corpus,
                               const PretrainConfig& cfg) {
    require(!corpus.train_sentences.empty(), "pretrain: corpus has no training sentences");
    require(cfg.steps >= 0 && cfg.batch_size > 0, "pretrain: bad steps/batch_size");
    const auto neutral_chunks = chunk_stream(corpus.neutral_train, model.config.max_seq_len);
    Rng rng(derive_seed(cfg.seed, 0x9a));
    ParamsAdam opt;
    AdamConfig adam;
    adam.lr = cfg.lr;
    PretrainReport report;

    Params grads = zero_params(model.config);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const std::vector<int>*> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const bool pick_fact = neutral_chunks.empty() || rng.uniform() < cfg.fact_fraction;
            if (pick_fact) {
                batch.push_back(&corpus.train_sentences[static_cast<std::size_t>(
                    rng.below(corpus.train_sentences.size()))]);
            } else {
                batch.push_back(
                    &neutral_chunks[static_cast<std::size_t>(rng.below(neutral_chunks.size()))]);
            }
        }
        int total_preds = 0;
        for (const auto* seq : batch) {
            total_preds += static_cast<int>(seq->size()) - 1;
        }
        const double scale = 1.0 / static_cast<double>(total_preds);

        for (auto& [name, g] : tensor_list(grads)) {
            (void)name;
            g->setZero();
        }
        double loss = 0.0;
        for (const auto* seq : batch) {
            ForwardCache cache;
            const Matrix logits = forward(model, *seq, {}, &cache);
            loss += lm_nll(logits, *seq).nll_sum * scale;
            backward(model, cache, lm_dlogits(logits, *seq, scale), grads);
        }
        if (!std::isfinite(loss)) {
            fail("pretraining diverged at step ", step);
        }
        adam_step(model.params, grads, opt, model.config, adam);
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            report.loss_curve.emplace_back(step, loss);
        }
    }

    report.facts_total = static_cast<int>(corpus.facts.size());
    report.recall = fact_recall(model, corpus, &report.facts_correct);
    return report;
}

// ---------------------------------------------------------------------------
// Queries
// ---------------------------------------------------------------------------

inline Vector next_distribution(const TransformerModel& model, const std::vector<int>& prompt,
                                const ForwardOptions& opts = {}) {
    const Matrix logits = forward(model, prompt, opts);
    return softmax(logits.col(logits.cols() - 1));
}

inline double object_prob(const TransformerModel& model, const std::vector<int>& prompt,
                          int token) {
    require(token >= 0 && token < model.config.vocab_size, "object_prob: token out of vocab");
    return next_distribution(model, prompt)(token);
}

// Teacher-forced perplexity over consecutive non-overlapping windows of
// max_seq_len tokens (stride = window size); the first token of each window
// is context only. A trailing single token is dropped.
inline double perplexity(const TransformerModel& model, const std::vector<int>& stream) {
    require(stream.size() >= 2, "perplexity: stream must hold at least 2 tokens");
    double nll = 0.0;
    long count = 0;
    for (const auto& window : chunk_stream(stream, model.config.max_seq_len)) {
        const Matrix logits = forward(model, window);
        const SeqNll part = lm_nll(logits, window);
        nll += part.nll_sum;
        count += part.count;
    }
    require(count > 0, "perplexity: no predictable positions");
    return std::exp(nll / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline void save_model(const TransformerModel& model, const std::filesystem::path& path) {
    TensorStore store;
    store.meta = model.config.to_json();
    for (const auto& [name, tensor] : tensor_list(model.params)) {
        store.put(name, *tensor);
    }
    save_tensors(store, path);
}

inline TransformerModel load_model(const std::filesystem::path& path) {
    const TensorStore store = load_tensors(path);
    TransformerModel model;
    model.config = ModelConfig::from_json(store.meta);
    model.params = zero_params(model.config);
    for (auto& [name, tensor] : tensor_list(model.params)) {
        const Matrix& loaded = store.get(name);
        require(loaded.rows() == tensor->rows() && loaded.cols() == tensor->cols(),
                "checkpoint tensor shape mismatch");
        *tensor = loaded;
    }
    return model;
}

}  // namespace editlab
