#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

#include "error.hpp"
#include "model.hpp"

namespace mcl {

// Recurrent state for one layer. Which buffers are live depends on the
// family: growing key/value caches (transformer), the (S, G) pair
// (linear_tf / performer), or the SSM state plus conv ring buffer (mamba).
struct LayerStream {
    std::vector<double> k_cache, v_cache;
    std::vector<double> S, G;
    std::vector<double> H;
    std::vector<double> conv_ring;
};

struct StreamingState {
    std::vector<LayerStream> layers;
    std::uint64_t token_count = 0;
};

inline StreamingState make_streaming_state(const Model& m) {
    const ModelConfig& cfg = m.cfg;
    StreamingState st;
    st.layers.resize(cfg.num_layers);
    std::size_t M = cfg.hidden_dim;
    for (auto& ls : st.layers) {
        switch (cfg.family) {
            case Family::transformer:
                break; // caches start empty and grow
            case Family::linear_tf:
                ls.S.assign(cfg.head_dim * M, 0.0);
                ls.G.assign(cfg.head_dim, 0.0);
                break;
            case Family::performer:
                ls.S.assign(cfg.num_performer_features * M, 0.0);
                ls.G.assign(cfg.num_performer_features, 0.0);
                break;
            case Family::mamba:
                ls.H.assign(cfg.ssm_state_size * M, 0.0);
                ls.conv_ring.assign(cfg.conv_width * M, 0.0);
                break;
        }
    }
    return st;
}

namespace detail_stream {

inline std::vector<double> ln_vec(const std::vector<double>& x, const Tensor& gain,
                                  const Tensor& bias, double eps = 1e-5) {
    std::size_t m = x.size();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    double inv_m = 1.0 / static_cast<double>(m);
    double mean = 0.0;
    for (std::size_t c = 0; c < m; ++c) mean += x[c];
    mean *= inv_m;
    double var = 0.0;
    for (std::size_t c = 0; c < m; ++c) var += (x[c] - mean) * (x[c] - mean);
    var *= inv_m;
    double inv_std = 1.0 / std::sqrt(var + eps);
    std::vector<double> out(m);
    for (std::size_t c = 0; c < m; ++c) out[c] = (x[c] - mean) * inv_std * gv[c] + bv[c];
    return out;
}

// x (len in) times W (in x out), accumulating in the same order as the tape
// matmul so the two routes agree to rounding error.
inline std::vector<double> matvec(const std::vector<double>& x, const Tensor& W) {
    std::size_t in = W.dim(0), out_dim = W.dim(1);
    if (x.size() != in)
        throw dim_error("matvec: input length " + std::to_string(x.size()) + " vs weight " +
                        detail::shape_string(W.shape()));
    const auto& wv = W.data();
    std::vector<double> out(out_dim, 0.0);
    for (std::size_t k = 0; k < in; ++k) {
        double xk = x[k];
        if (xk == 0.0) continue;
        for (std::size_t j = 0; j < out_dim; ++j) out[j] += xk * wv[k * out_dim + j];
    }
    return out;
}

inline void add_bias(std::vector<double>& x, const Tensor& b) {
    const auto& bv = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += bv[i];
}

inline void silu_inplace(std::vector<double>& x) {
    for (auto& v : x) v = v * detail::sigmoid_val(v);
}

inline std::vector<double> softmax_vec(const std::vector<double>& s, double scale) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : s) mx = std::max(mx, v * scale);
    std::vector<double> p(s.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        p[i] = std::exp(s[i] * scale - mx);
        denom += p[i];
    }
    for (auto& v : p) v /= denom;
    return p;
}

inline std::vector<double> embed_one(const Model& m, const Token& tok) {
    std::size_t in_dim = m.cfg.input_dim, M = m.cfg.hidden_dim;
    if (tok.kind == TokenKind::code) {
        if (tok.code < 0 || static_cast<std::size_t>(tok.code) >= m.cfg.vocab_size)
            throw contract_error("stream_token: code " + std::to_string(tok.code) +
                                 " outside vocabulary of " + std::to_string(m.cfg.vocab_size));
        const auto& tv = m.code_table.data();
        return std::vector<double>(tv.begin() + tok.code * M, tv.begin() + (tok.code + 1) * M);
    }
    if (tok.vec.size() > in_dim)
        throw dim_error("stream_token: payload of " + std::to_string(tok.vec.size()) +
                        " exceeds input_dim " + std::to_string(in_dim));
    std::vector<double> x(in_dim, 0.0);
    for (std::size_t i = 0; i < tok.vec.size(); ++i) x[i] = tok.vec[i];
    return matvec(x, m.embed_W);
}

inline void attention_step(const Model& m, const LayerParams& lp, LayerStream& ls,
                           std::vector<double>& e) {
    const ModelConfig& cfg = m.cfg;
    std::size_t M = cfg.hidden_dim;
    std::vector<double> xn = ln_vec(e, lp.ln1_g, lp.ln1_b);
    std::vector<double> q = matvec(xn, lp.Wq);
    std::vector<double> k = matvec(xn, lp.Wk);
    std::vector<double> v = matvec(xn, lp.Wv);
    std::vector<double> u;
    if (cfg.family == Family::transformer) {
        std::size_t C = cfg.head_dim;
        ls.k_cache.insert(ls.k_cache.end(), k.begin(), k.end());
        ls.v_cache.insert(ls.v_cache.end(), v.begin(), v.end());
        std::size_t rows = ls.k_cache.size() / C;
        std::vector<double> scores(rows, 0.0);
        for (std::size_t j = 0; j < rows; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += q[c] * ls.k_cache[j * C + c];
            scores[j] = acc;
        }
        std::vector<double> p =
            softmax_vec(scores, 1.0 / std::sqrt(static_cast<double>(C)));
        u.assign(M, 0.0);
        for (std::size_t j = 0; j < rows; ++j) {
            double pj = p[j];
            if (pj == 0.0) continue;
            for (std::size_t i = 0; i < M; ++i) u[i] += pj * ls.v_cache[j * M + i];
        }
    } else {
        std::vector<double> phi_q, phi_k;
        if (cfg.family == Family::performer) {
            phi_q = feature_map_favor(q, lp.Wp);
            phi_k = feature_map_favor(k, lp.Wp);
        } else {
            phi_q = feature_map_elu(q);
            phi_k = feature_map_elu(k);
        }
        u = linear_attention_step(ls.S, ls.G, phi_q, phi_k, v);
    }
    for (std::size_t i = 0; i < M; ++i) e[i] += u[i];
    std::vector<double> x2 = ln_vec(e, lp.ln2_g, lp.ln2_b);
    std::vector<double> h = matvec(x2, lp.ffn_W1);
    add_bias(h, lp.ffn_b1);
    silu_inplace(h);
    std::vector<double> f = matvec(h, lp.ffn_W2);
    add_bias(f, lp.ffn_b2);
    for (std::size_t i = 0; i < M; ++i) e[i] += f[i];
}

inline void mamba_step(const Model& m, const LayerParams& lp, LayerStream& ls,
                       std::uint64_t t, std::vector<double>& e) {
    const ModelConfig& cfg = m.cfg;
    std::size_t M = cfg.hidden_dim, width = cfg.conv_width;
    std::vector<double> xn = ln_vec(e, lp.ln1_g, lp.ln1_b);
    std::vector<double> p = matvec(xn, lp.W_in);
    std::vector<double> xmain(p.begin(), p.begin() + M);
    std::vector<double> gate(p.begin() + M, p.end());
    std::size_t slot = static_cast<std::size_t>(t % width);
    std::copy(xmain.begin(), xmain.end(), ls.conv_ring.begin() + slot * M);
    const auto& wv = lp.conv_w.data();
    const auto& bv = lp.conv_b.data();
    std::vector<double> xc(M);
    for (std::size_t c = 0; c < M; ++c) {
        double acc = bv[c];
        for (std::size_t k = 0; k < width; ++k) {
            std::int64_t s = static_cast<std::int64_t>(t) -
                             static_cast<std::int64_t>(width - 1 - k);
            if (s < 0) continue;
            acc += wv[c * width + k] *
                   ls.conv_ring[static_cast<std::size_t>(s % static_cast<std::int64_t>(width)) * M + c];
        }
        xc[c] = acc;
    }
    silu_inplace(xc);
    std::vector<double> dt_raw = matvec(xc, lp.w_dt);
    double delta = detail::softplus_val(dt_raw[0] + lp.b_dt.data()[0]);
    std::vector<double> Bp = matvec(xc, lp.W_B);
    std::vector<double> Cv = matvec(xc, lp.W_C);
    std::size_t C = Cv.size();
    std::vector<double> Ap(C);
    const auto& alog = lp.a_log.data();
    for (std::size_t i = 0; i < C; ++i) Ap[i] = -std::exp(alog[i]);
    std::vector<double> A, Bd;
    discretize(Ap, Bp, delta, cfg.discretization, A, Bd);
    std::vector<double> u;
    selective_ssm_step(ls.H, A, Bd, Cv, lp.D.data(), xc, u);
    for (std::size_t i = 0; i < M; ++i) u[i] *= gate[i] * detail::sigmoid_val(gate[i]);
    std::vector<double> out = matvec(u, lp.W_out);
    for (std::size_t i = 0; i < M; ++i) e[i] += out[i];
}

inline void moe_step(const LayerParams& lp, std::vector<double>& e) {
    const MoeParams& moe = lp.moe;
    if (moe.experts.empty())
        throw config_error("moe_step: mixture configured with zero experts");
    std::vector<double> xm = ln_vec(e, moe.ln_g, moe.ln_b);
    std::vector<double> logits = matvec(xm, moe.router_W);
    add_bias(logits, moe.router_b);
    std::vector<double> wts = softmax_vec(logits, 1.0);
    std::vector<double> acc(e.size(), 0.0);
    for (std::size_t ex = 0; ex < moe.experts.size(); ++ex) {
        const ExpertParams& ep = moe.experts[ex];
        std::vector<double> h = matvec(xm, ep.W1);
        add_bias(h, ep.b1);
        silu_inplace(h);
        std::vector<double> y = matvec(h, ep.W2);
        add_bias(y, ep.b2);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += y[i] * wts[ex];
    }
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += acc[i];
}

} // namespace detail_stream

// Feeds one token through the model, updating the recurrent state, and
// returns the logits row for this position.
inline std::vector<double> stream_token(const Model& m, StreamingState& st, const Token& tok) {
    const ModelConfig& cfg = m.cfg;
    if (st.layers.size() != cfg.num_layers)
        throw contract_error("stream_token: state holds " + std::to_string(st.layers.size()) +
                             " layers, model has " + std::to_string(cfg.num_layers));
    std::uint64_t t = st.token_count;
    std::vector<double> e = detail_stream::embed_one(m, tok);
    if (cfg.family == Family::transformer) {
        if (t >= cfg.max_positions)
            throw contract_error("stream_token: position " + std::to_string(t) +
                                 " exceeds max_positions " + std::to_string(cfg.max_positions));
        const auto& pv = m.pos_table.data();
        for (std::size_t i = 0; i < e.size(); ++i) e[i] += pv[t * cfg.hidden_dim + i];
    }
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerParams& lp = m.layers[l];
        if (cfg.family == Family::mamba)
            detail_stream::mamba_step(m, lp, st.layers[l], t, e);
        else
            detail_stream::attention_step(m, lp, st.layers[l], e);
        if (cfg.moe.num_experts > 0) detail_stream::moe_step(lp, e);
    }
    std::vector<double> xf = detail_stream::ln_vec(e, m.final_ln_g, m.final_ln_b);
    std::vector<double> logits = detail_stream::matvec(xf, m.head_W);
    detail_stream::add_bias(logits, m.head_b);
    st.token_count = t + 1;
    return logits;
}

namespace detail_stream {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f64s(std::vector<std::uint8_t>& out, const std::vector<double>& vs) {
    for (double d : vs) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(d));
        std::memcpy(&bits, &d, sizeof(bits));
        put_u64(out, bits);
    }
}

} // namespace detail_stream

// Exact byte image of the recurrent state. Constant-size for the
// attention-free families; grows with the key/value caches for the
// transformer.
inline std::vector<std::uint8_t> serialize_streaming_state(const StreamingState& st) {
    std::vector<std::uint8_t> out;
    detail_stream::put_u64(out, st.token_count);
    detail_stream::put_u64(out, st.layers.size());
    for (const LayerStream& ls : st.layers) {
        detail_stream::put_u64(out, ls.k_cache.size());
        detail_stream::put_f64s(out, ls.k_cache);
        detail_stream::put_u64(out, ls.v_cache.size());
        detail_stream::put_f64s(out, ls.v_cache);
        detail_stream::put_u64(out, ls.S.size());
        detail_stream::put_f64s(out, ls.S);
        detail_stream::put_u64(out, ls.G.size());
        detail_stream::put_f64s(out, ls.G);
        detail_stream::put_u64(out, ls.H.size());
        detail_stream::put_f64s(out, ls.H);
        detail_stream::put_u64(out, ls.conv_ring.size());
        detail_stream::put_f64s(out, ls.conv_ring);
    }
    return out;
}

} // namespace mcl
