#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "attention.hpp"
#include "error.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "ssm.hpp"
#include "token.hpp"

namespace mcl {

enum class Family { transformer, linear_tf, performer, mamba };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::transformer: return "transformer";
        case Family::linear_tf: return "linear_tf";
        case Family::performer: return "performer";
        case Family::mamba: return "mamba";
    }
    return "?";
}

inline Family parse_family(const std::string& s) {
    if (s == "transformer") return Family::transformer;
    if (s == "linear_tf") return Family::linear_tf;
    if (s == "performer") return Family::performer;
    if (s == "mamba") return Family::mamba;
    throw config_error("unknown family '" + s +
                       "' (expected transformer, linear_tf, performer, or mamba)");
}

struct MoeConfig {
    std::size_t num_experts = 0;   // 0 disables the mixture sublayer
    std::size_t expert_hidden = 0; // 0 -> hidden_dim
};

struct ModelConfig {
    Family family = Family::mamba;
    std::size_t num_layers = 4;
    std::size_t hidden_dim = 512;      // M
    std::size_t head_dim = 64;         // C for the attention families
    std::size_t ssm_state_size = 128;  // C for the SSM family
    std::size_t conv_width = 4;
    std::size_t vocab_size = 200;      // V
    std::size_t num_performer_features = 64;
    std::size_t input_dim = 16;        // raw embedding width fed to the input projector
    std::size_t target_dim = 0;        // 0 -> vocab_size (classification head)
    std::size_t ffn_hidden = 0;        // 0 -> 4 * hidden_dim
    std::size_t max_positions = 4096;  // learned absolute positions (transformer only)
    Discretization discretization = Discretization::zoh;
    MoeConfig moe;
    bool record_associations = false;

    std::size_t resolved_target_dim() const { return target_dim ? target_dim : vocab_size; }
    std::size_t resolved_ffn_hidden() const { return ffn_hidden ? ffn_hidden : 4 * hidden_dim; }
    std::size_t resolved_expert_hidden() const {
        return moe.expert_hidden ? moe.expert_hidden : hidden_dim;
    }
    // feature width of the query/key side: head_dim, performer features, or SSM state size
    std::size_t assoc_width() const {
        if (family == Family::mamba) return ssm_state_size;
        if (family == Family::performer) return num_performer_features;
        return head_dim;
    }

    void validate() const {
        if (num_layers < 1) throw config_error("num_layers must be at least 1");
        if (hidden_dim < 1) throw config_error("hidden_dim must be at least 1");
        if (vocab_size < 2) throw config_error("vocab_size must be at least 2");
        if (head_dim < 1) throw config_error("head_dim must be at least 1");
        if (ssm_state_size < 1) throw config_error("ssm_state_size must be at least 1");
        if (conv_width < 1) throw config_error("conv_width must be at least 1");
        if (input_dim < 1) throw config_error("input_dim must be at least 1");
        if (max_positions < 1) throw config_error("max_positions must be at least 1");
        if (family == Family::performer && num_performer_features < 1)
            throw config_error("num_performer_features must be at least 1");
    }
};

inline std::map<std::string, std::string> config_to_map(const ModelConfig& c) {
    std::map<std::string, std::string> m;
    m["family"] = family_name(c.family);
    m["num_layers"] = std::to_string(c.num_layers);
    m["hidden_dim"] = std::to_string(c.hidden_dim);
    m["head_dim"] = std::to_string(c.head_dim);
    m["ssm_state_size"] = std::to_string(c.ssm_state_size);
    m["conv_width"] = std::to_string(c.conv_width);
    m["vocab_size"] = std::to_string(c.vocab_size);
    m["num_performer_features"] = std::to_string(c.num_performer_features);
    m["input_dim"] = std::to_string(c.input_dim);
    m["target_dim"] = std::to_string(c.target_dim);
    m["ffn_hidden"] = std::to_string(c.ffn_hidden);
    m["max_positions"] = std::to_string(c.max_positions);
    m["discretization"] = discretization_name(c.discretization);
    m["moe_experts"] = std::to_string(c.moe.num_experts);
    m["moe_expert_hidden"] = std::to_string(c.moe.expert_hidden);
    m["record_associations"] = c.record_associations ? "1" : "0";
    return m;
}

// Reads the known model keys from a key=value map; unrelated keys (training
// progress, run metadata) are left alone.
inline ModelConfig config_from_map(const std::map<std::string, std::string>& m) {
    ModelConfig c;
    auto geti = [&](const char* key, std::size_t& out) {
        auto it = m.find(key);
        if (it == m.end()) return;
        try {
            out = static_cast<std::size_t>(std::stoull(it->second));
        } catch (const std::exception&) {
            throw config_error(std::string("bad integer for ") + key + ": '" + it->second + "'");
        }
    };
    if (auto it = m.find("family"); it != m.end()) c.family = parse_family(it->second);
    geti("num_layers", c.num_layers);
    geti("hidden_dim", c.hidden_dim);
    geti("head_dim", c.head_dim);
    geti("ssm_state_size", c.ssm_state_size);
    geti("conv_width", c.conv_width);
    geti("vocab_size", c.vocab_size);
    geti("num_performer_features", c.num_performer_features);
    geti("input_dim", c.input_dim);
    geti("target_dim", c.target_dim);
    geti("ffn_hidden", c.ffn_hidden);
    geti("max_positions", c.max_positions);
    if (auto it = m.find("discretization"); it != m.end())
        c.discretization = parse_discretization(it->second);
    geti("moe_experts", c.moe.num_experts);
    geti("moe_expert_hidden", c.moe.expert_hidden);
    if (auto it = m.find("record_associations"); it != m.end())
        c.record_associations = it->second == "1" || it->second == "true";
    return c;
}

struct ExpertParams {
    Tensor W1, b1, W2, b2;
};

struct MoeParams {
    Tensor ln_g, ln_b;
    Tensor router_W, router_b;
    std::vector<ExpertParams> experts;
};

struct LayerParams {
    // shared pre-norms: ln1 in front of the mixer (attention or ssm), ln2 in
    // front of the feed-forward (attention families only)
    Tensor ln1_g, ln1_b;
    Tensor ln2_g, ln2_b;
    // attention families
    Tensor Wq, Wk, Wv;
    Tensor Wp; // performer feature rows, frozen
    Tensor ffn_W1, ffn_b1, ffn_W2, ffn_b2;
    // ssm family
    Tensor W_in;           // M x 2M, splits into main | gate
    Tensor conv_w, conv_b; // M x width, 1 x M
    Tensor w_dt, b_dt;     // M x 1, 1 x 1 timescale projection
    Tensor W_B, W_C;       // M x C token-dependent projections
    Tensor a_log;          // 1 x C, A' = -exp(a_log)
    Tensor D;              // 1 x M skip scale
    Tensor W_out;          // M x M
    MoeParams moe;
};

struct Model {
    ModelConfig cfg;
    std::vector<std::pair<std::string, Tensor>> params; // named, creation order
    Tensor embed_W;    // input_dim x M
    Tensor code_table; // V x M
    Tensor pos_table;  // max_positions x M (transformer only)
    std::vector<LayerParams> layers;
    Tensor final_ln_g, final_ln_b;
    Tensor head_W, head_b; // M x target_dim, 1 x target_dim

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        out.reserve(params.size());
        for (const auto& [name, t] : params)
            if (t.requires_grad()) out.push_back(t);
        return out;
    }
    const Tensor* find_param(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return &t;
        return nullptr;
    }
    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }
};

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed);
    auto reg = [&m](const std::string& name, Tensor t, bool trainable = true) {
        t.set_requires_grad(trainable);
        m.params.emplace_back(name, t);
        return t;
    };
    auto gauss = [&rng](std::vector<std::size_t> shape, std::size_t fan_in) {
        return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    };
    std::size_t M = cfg.hidden_dim, V = cfg.vocab_size, In = cfg.input_dim;
    std::size_t out_dim = cfg.resolved_target_dim();

    m.embed_W = reg("embed.W", gauss({In, M}, In));
    m.code_table = reg("codes.table", gauss({V, M}, M));
    if (cfg.family == Family::transformer)
        m.pos_table = reg("pos.table", gauss({cfg.max_positions, M}, M));

    m.layers.resize(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        LayerParams& lp = m.layers[l];
        std::string p = "L" + std::to_string(l) + ".";
        lp.ln1_g = reg(p + "ln1.g", Tensor::ones({1, M}));
        lp.ln1_b = reg(p + "ln1.b", Tensor::zeros({1, M}));
        if (cfg.family == Family::mamba) {
            std::size_t C = cfg.ssm_state_size, W = cfg.conv_width;
            lp.W_in = reg(p + "ssm.W_in", gauss({M, 2 * M}, M));
            lp.conv_w = reg(p + "ssm.conv_w", gauss({M, W}, W));
            lp.conv_b = reg(p + "ssm.conv_b", Tensor::zeros({1, M}));
            lp.w_dt = reg(p + "ssm.w_dt", gauss({M, 1}, M));
            // softplus(b_dt) == 0.05 at init, a slow default timescale
            lp.b_dt = reg(p + "ssm.b_dt",
                          Tensor::full({1, 1}, std::log(std::expm1(0.05))));
            lp.W_B = reg(p + "ssm.W_B", gauss({M, C}, M));
            lp.W_C = reg(p + "ssm.W_C", gauss({M, C}, M));
            Tensor alog = Tensor::zeros({1, C});
            for (std::size_t i = 0; i < C; ++i)
                alog.data()[i] = std::log(rng.uniform(0.5, 1.5));
            lp.a_log = reg(p + "ssm.a_log", alog);
            lp.D = reg(p + "ssm.D", Tensor::ones({1, M}));
            lp.W_out = reg(p + "ssm.W_out", gauss({M, M}, M));
        } else {
            std::size_t C = cfg.head_dim, F = cfg.resolved_ffn_hidden();
            lp.Wq = reg(p + "attn.Wq", gauss({M, C}, M));
            lp.Wk = reg(p + "attn.Wk", gauss({M, C}, M));
            lp.Wv = reg(p + "attn.Wv", gauss({M, M}, M));
            if (cfg.family == Family::performer) {
                lp.Wp = reg(p + "attn.Wp",
                            make_orthogonal_features(cfg.num_performer_features, C, rng),
                            /*trainable=*/false);
            }
            lp.ln2_g = reg(p + "ln2.g", Tensor::ones({1, M}));
            lp.ln2_b = reg(p + "ln2.b", Tensor::zeros({1, M}));
            lp.ffn_W1 = reg(p + "ffn.W1", gauss({M, F}, M));
            lp.ffn_b1 = reg(p + "ffn.b1", Tensor::zeros({1, F}));
            lp.ffn_W2 = reg(p + "ffn.W2", gauss({F, M}, F));
            lp.ffn_b2 = reg(p + "ffn.b2", Tensor::zeros({1, M}));
        }
        if (cfg.moe.num_experts > 0) {
            std::size_t E = cfg.moe.num_experts, H = cfg.resolved_expert_hidden();
            lp.moe.ln_g = reg(p + "moe.ln.g", Tensor::ones({1, M}));
            lp.moe.ln_b = reg(p + "moe.ln.b", Tensor::zeros({1, M}));
            lp.moe.router_W = reg(p + "moe.router.W", gauss({M, E}, M));
            lp.moe.router_b = reg(p + "moe.router.b", Tensor::zeros({1, E}));
            lp.moe.experts.resize(E);
            for (std::size_t e = 0; e < E; ++e) {
                std::string ep = p + "moe.e" + std::to_string(e) + ".";
                lp.moe.experts[e].W1 = reg(ep + "W1", gauss({M, H}, M));
                lp.moe.experts[e].b1 = reg(ep + "b1", Tensor::zeros({1, H}));
                lp.moe.experts[e].W2 = reg(ep + "W2", gauss({H, M}, H));
                lp.moe.experts[e].b2 = reg(ep + "b2", Tensor::zeros({1, M}));
            }
        }
    }
    m.final_ln_g = reg("final_ln.g", Tensor::ones({1, M}));
    m.final_ln_b = reg("final_ln.b", Tensor::zeros({1, M}));
    m.head_W = reg("head.W", gauss({M, out_dim}, M));
    m.head_b = reg("head.b", Tensor::zeros({1, out_dim}));
    return m;
}

// Per-layer association features logged during a recorded forward pass. For
// every query row t and history row j, the model's association score is
// q_feats[t] . k_feats[j]: raw Q/K for the transformer, feature-mapped Q/K
// for linear_tf and performer, readout C_t and discrete input B_j for the
// ssm family.
struct AssocLog {
    std::vector<Tensor> q_feats;
    std::vector<Tensor> k_feats;
};

// Embeds a token sequence: input tokens go through the input projector
// (shorter payloads are zero-padded to input_dim), code tokens index the
// vocabulary table.
inline Tensor embed_tokens(const Model& m, const std::vector<Token>& tokens) {
    std::size_t n = tokens.size();
    std::size_t in_dim = m.cfg.input_dim, M = m.cfg.hidden_dim, V = m.cfg.vocab_size;
    auto raw = std::make_shared<std::vector<double>>(n * in_dim, 0.0);
    auto codes = std::make_shared<std::vector<std::ptrdiff_t>>(n, -1);
    for (std::size_t t = 0; t < n; ++t) {
        const Token& tok = tokens[t];
        if (tok.kind == TokenKind::input) {
            if (tok.vec.size() > in_dim)
                throw dim_error("embed_tokens: token " + std::to_string(t) + " payload of " +
                                std::to_string(tok.vec.size()) + " exceeds input_dim " +
                                std::to_string(in_dim));
            for (std::size_t i = 0; i < tok.vec.size(); ++i)
                (*raw)[t * in_dim + i] = tok.vec[i];
        } else {
            if (tok.code < 0 || static_cast<std::size_t>(tok.code) >= V)
                throw contract_error("embed_tokens: code " + std::to_string(tok.code) +
                                     " outside vocabulary of " + std::to_string(V));
            (*codes)[t] = tok.code;
        }
    }
    Tensor W = m.embed_W;
    Tensor table = m.code_table;
    Tensor out = detail::make_op({n, M}, {W, table},
        [W, table, raw, codes, n, in_dim, M](const TensorNode& o, GradStore& gs) {
            const auto& g = detail::out_grad(o, gs);
            std::vector<double>* dW = W.requires_grad() ? &gs.of(W.node()) : nullptr;
            std::vector<double>* dT = table.requires_grad() ? &gs.of(table.node()) : nullptr;
            for (std::size_t t = 0; t < n; ++t) {
                std::ptrdiff_t code = (*codes)[t];
                if (code >= 0) {
                    if (dT)
                        for (std::size_t j = 0; j < M; ++j)
                            (*dT)[static_cast<std::size_t>(code) * M + j] += g[t * M + j];
                } else if (dW) {
                    for (std::size_t k = 0; k < in_dim; ++k) {
                        double xk = (*raw)[t * in_dim + k];
                        if (xk == 0.0) continue;
                        for (std::size_t j = 0; j < M; ++j)
                            (*dW)[k * M + j] += xk * g[t * M + j];
                    }
                }
            }
        });
    const auto& wv = W.data();
    const auto& tv = table.data();
    auto& ov = out.data();
    for (std::size_t t = 0; t < n; ++t) {
        std::ptrdiff_t code = (*codes)[t];
        if (code >= 0) {
            for (std::size_t j = 0; j < M; ++j)
                ov[t * M + j] = tv[static_cast<std::size_t>(code) * M + j];
        } else {
            for (std::size_t k = 0; k < in_dim; ++k) {
                double xk = (*raw)[t * in_dim + k];
                if (xk == 0.0) continue;
                for (std::size_t j = 0; j < M; ++j) ov[t * M + j] += xk * wv[k * M + j];
            }
        }
    }
    return out;
}

// Dense mixture of experts for one token row (1 x M) or a whole sequence
// (N x M): every expert is a 2-layer MLP, the router softmax supplies convex
// combination weights per token.
inline Tensor moe_layer_forward(const Tensor& X, const MoeParams& moe) {
    if (moe.experts.empty())
        throw config_error("moe_layer_forward: mixture configured with zero experts");
    Tensor weights = softmax_rows(add_row_vector(matmul(X, moe.router_W), moe.router_b));
    Tensor out;
    for (std::size_t e = 0; e < moe.experts.size(); ++e) {
        const ExpertParams& ex = moe.experts[e];
        Tensor h = silu(add_row_vector(matmul(X, ex.W1), ex.b1));
        Tensor y = add_row_vector(matmul(h, ex.W2), ex.b2);
        Tensor contrib = mul_rows_by_col(y, col_slice(weights, e, e + 1));
        out = e == 0 ? contrib : add(out, contrib);
    }
    return out;
}

namespace detail_model {

// attention mixer + feed-forward, both pre-normed residual sublayers
inline Tensor attention_block(const ModelConfig& cfg, const LayerParams& lp, const Tensor& X,
                              AssocLog* assoc) {
    Tensor Xn = layer_norm_rows(X, lp.ln1_g, lp.ln1_b);
    Tensor Q = matmul(Xn, lp.Wq);
    Tensor K = matmul(Xn, lp.Wk);
    Tensor V = matmul(Xn, lp.Wv);
    Tensor mixed;
    if (cfg.family == Family::transformer) {
        mixed = softmax_attention(Q, K, V, /*causal=*/true);
        if (assoc) {
            assoc->q_feats.push_back(Q);
            assoc->k_feats.push_back(K);
        }
    } else {
        Tensor phiQ = cfg.family == Family::performer ? favor_features(Q, lp.Wp)
                                                      : elu_plus_one(Q);
        Tensor phiK = cfg.family == Family::performer ? favor_features(K, lp.Wp)
                                                      : elu_plus_one(K);
        mixed = linear_attention_full(phiQ, phiK, V);
        if (assoc) {
            assoc->q_feats.push_back(phiQ);
            assoc->k_feats.push_back(phiK);
        }
    }
    Tensor X1 = add(X, mixed);
    Tensor X1n = layer_norm_rows(X1, lp.ln2_g, lp.ln2_b);
    Tensor h = silu(add_row_vector(matmul(X1n, lp.ffn_W1), lp.ffn_b1));
    Tensor f = add_row_vector(matmul(h, lp.ffn_W2), lp.ffn_b2);
    return add(X1, f);
}

} // namespace detail_model

// One pre-normed residual Mamba block over a full sequence: input projection
// into main and gate branches, causal depthwise conv, per-token timescale and
// B/C projections, discretized selective scan, gated output projection.
inline Tensor mamba_block_forward(const ModelConfig& cfg, const LayerParams& lp, const Tensor& Z,
                                  AssocLog* assoc = nullptr) {
    std::size_t M = cfg.hidden_dim;
    Tensor Xn = layer_norm_rows(Z, lp.ln1_g, lp.ln1_b);
    Tensor P = matmul(Xn, lp.W_in); // N x 2M
    Tensor Xmain = col_slice(P, 0, M);
    Tensor Gate = col_slice(P, M, 2 * M);
    Tensor Xc = silu(conv1d_depthwise_causal(Xmain, lp.conv_w, lp.conv_b));
    Tensor delta = softplus(add_row_vector(matmul(Xc, lp.w_dt), lp.b_dt)); // N x 1
    Tensor Bp = matmul(Xc, lp.W_B); // N x C
    Tensor Cm = matmul(Xc, lp.W_C); // N x C
    Tensor Aprime = neg(exp(lp.a_log));
    auto [A, B] = discretize_rows(Aprime, Bp, delta, cfg.discretization);
    Tensor S = ssm_scan(A, B, Cm, Xc);
    Tensor U = add(S, mul_row_vector(Xc, lp.D));
    U = mul(U, silu(Gate));
    U = matmul(U, lp.W_out);
    if (assoc) {
        assoc->q_feats.push_back(Cm);
        assoc->k_feats.push_back(B);
    }
    return add(Z, U);
}

// Causal end-to-end forward over an embedded token sequence; returns one
// logits row per position. When `assoc` is non-null the per-layer
// association features are logged for selectivity scoring.
inline Tensor model_forward(const Model& m, const std::vector<Token>& tokens,
                            AssocLog* assoc = nullptr) {
    if (tokens.empty()) throw contract_error("model_forward: empty token sequence");
    const ModelConfig& cfg = m.cfg;
    std::size_t n = tokens.size();
    Tensor X = embed_tokens(m, tokens);
    if (cfg.family == Family::transformer) {
        if (n > cfg.max_positions)
            throw contract_error("model_forward: sequence of " + std::to_string(n) +
                                 " tokens exceeds max_positions " +
                                 std::to_string(cfg.max_positions));
        X = add(X, row_slice(m.pos_table, 0, n));
    }
    for (const LayerParams& lp : m.layers) {
        if (cfg.family == Family::mamba)
            X = mamba_block_forward(cfg, lp, X, assoc);
        else
            X = detail_model::attention_block(cfg, lp, X, assoc);
        if (cfg.moe.num_experts > 0) {
            Tensor Xm = layer_norm_rows(X, lp.moe.ln_g, lp.moe.ln_b);
            X = add(X, moe_layer_forward(Xm, lp.moe));
        }
    }
    X = layer_norm_rows(X, m.final_ln_g, m.final_ln_b);
    return add_row_vector(matmul(X, m.head_W), m.head_b);
}

} // namespace mcl
