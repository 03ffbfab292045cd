#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "error.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace mcl {

// Full-sequence softmax attention. Q, K share a column width; K and V share a
// row count. With `causal` set, position t only attends to j <= t (requires
// equal Q/K row counts). Scores are scaled by 1/sqrt(head width).
inline Tensor softmax_attention(const Tensor& Q, const Tensor& K, const Tensor& V, bool causal) {
    detail::check_matrix(Q, "softmax_attention");
    detail::check_matrix(K, "softmax_attention");
    detail::check_matrix(V, "softmax_attention");
    if (Q.dim(1) != K.dim(1))
        throw dim_error("softmax_attention: Q " + detail::shape_string(Q.shape()) +
                        " vs K " + detail::shape_string(K.shape()));
    if (K.dim(0) != V.dim(0))
        throw dim_error("softmax_attention: K " + detail::shape_string(K.shape()) +
                        " vs V " + detail::shape_string(V.shape()));
    if (causal && Q.dim(0) != K.dim(0))
        throw dim_error("softmax_attention: causal masking needs equal Q/K row counts");
    if (Q.dim(0) == 0) return Tensor::zeros({0, V.dim(1)});
    double scale = 1.0 / std::sqrt(static_cast<double>(Q.dim(1)));
    Tensor scores = matmul(Q, transpose(K));
    Tensor probs = softmax_rows(scores, scale, causal);
    return matmul(probs, V);
}

// phi(x) = elu(x) + 1, strictly positive.
inline std::vector<double> feature_map_elu(const std::vector<double>& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = x[i] > 0.0 ? x[i] + 1.0 : std::exp(x[i]);
    return out;
}

// FAVOR feature map: phi(x)_r = exp(x . w_r - |x|^2 / 2) for each feature row
// w_r of Wp (m x C). Positive by construction.
inline std::vector<double> feature_map_favor(const std::vector<double>& x,
                                             const std::vector<double>& wp,
                                             std::size_t m) {
    if (m == 0 || wp.size() % m != 0)
        throw dim_error("feature_map_favor: feature matrix of " + std::to_string(wp.size()) +
                        " entries does not split into " + std::to_string(m) + " rows");
    std::size_t c = wp.size() / m;
    if (x.size() != c)
        throw dim_error("feature_map_favor: input length " + std::to_string(x.size()) +
                        " vs feature width " + std::to_string(c));
    double half_sq = 0.0;
    for (std::size_t i = 0; i < c; ++i) half_sq += x[i] * x[i];
    half_sq *= 0.5;
    std::vector<double> out(m);
    for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < c; ++i) dot += x[i] * wp[r * c + i];
        out[r] = std::exp(dot - half_sq);
    }
    return out;
}

inline std::vector<double> feature_map_favor(const std::vector<double>& x, const Tensor& Wp) {
    detail::check_matrix(Wp, "feature_map_favor");
    return feature_map_favor(x, Wp.data(), Wp.dim(0));
}

// Tape version of the FAVOR map for a whole sequence: rows of X are mapped
// independently, exp(X Wp^T - |row|^2 / 2).
inline Tensor favor_features(const Tensor& X, const Tensor& Wp) {
    detail::check_matrix(X, "favor_features");
    detail::check_matrix(Wp, "favor_features");
    if (X.dim(1) != Wp.dim(1))
        throw dim_error("favor_features: X " + detail::shape_string(X.shape()) + " vs Wp " +
                        detail::shape_string(Wp.shape()));
    Tensor proj = matmul(X, transpose(Wp));
    Tensor half_sq = scalar_mul(row_sums(square(X)), 0.5);
    return exp(sub(proj, tile_cols(half_sq, Wp.dim(0))));
}

// One step of the causal linear-attention recurrence. q and k must already be
// feature-mapped (positive). S (F x M, flattened row-major) and G (F) are
// updated in place to S' = S + k^T v and G' = G + k^T; returns
// u = (q S') / (q G').
inline std::vector<double> linear_attention_step(std::vector<double>& S, std::vector<double>& G,
                                                 const std::vector<double>& q,
                                                 const std::vector<double>& k,
                                                 const std::vector<double>& v) {
    std::size_t f = G.size(), m = v.size();
    if (q.size() != f || k.size() != f)
        throw dim_error("linear_attention_step: q/k length " + std::to_string(q.size()) + "/" +
                        std::to_string(k.size()) + " vs state width " + std::to_string(f));
    if (S.size() != f * m)
        throw dim_error("linear_attention_step: S holds " + std::to_string(S.size()) +
                        " entries, expected " + std::to_string(f * m));
    for (std::size_t r = 0; r < f; ++r)
        for (std::size_t j = 0; j < m; ++j) S[r * m + j] += k[r] * v[j];
    for (std::size_t r = 0; r < f; ++r) G[r] += k[r];
    double denom = 0.0;
    for (std::size_t r = 0; r < f; ++r) denom += q[r] * G[r];
    if (std::abs(denom) < 1e-12)
        throw numeric_error("linear_attention_step: normalizer " + std::to_string(denom) +
                            " is numerically zero");
    std::vector<double> u(m, 0.0);
    for (std::size_t r = 0; r < f; ++r) {
        double qr = q[r];
        if (qr == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) u[j] += qr * S[r * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) u[j] /= denom;
    return u;
}

// Full-sequence causal linear attention over feature-mapped phiQ/phiK
// (entrywise positive): u_t = (phiQ_t sum_{j<=t} phiK_j^T V_j) /
// (phiQ_t sum_{j<=t} phiK_j^T), written as masked quadratic forms.
inline Tensor linear_attention_full(const Tensor& phiQ, const Tensor& phiK, const Tensor& V) {
    Tensor weights = tril(matmul(phiQ, transpose(phiK)));
    Tensor numer = matmul(weights, V);
    Tensor denom = row_sums(weights);
    return div_rows_by_col(numer, denom);
}

// Frozen Performer feature rows: Gaussian draws orthogonalized blockwise
// (blocks of at most C rows), then each row rescaled to the norm of a fresh
// Gaussian vector so the softmax-kernel estimate stays unbiased.
inline Tensor make_orthogonal_features(std::size_t m, std::size_t c, Rng& rng) {
    if (m == 0 || c == 0) throw config_error("make_orthogonal_features: zero dimension");
    std::vector<double> rows(m * c);
    std::size_t done = 0;
    while (done < m) {
        std::size_t block = std::min(c, m - done);
        std::vector<double> q(block * c);
        for (auto& x : q) x = rng.gaussian();
        // two Gram-Schmidt passes for orthogonality well below 1e-10
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t r = 0; r < block; ++r) {
                for (std::size_t p = 0; p < r; ++p) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < c; ++i) dot += q[r * c + i] * q[p * c + i];
                    for (std::size_t i = 0; i < c; ++i) q[r * c + i] -= dot * q[p * c + i];
                }
                double norm = 0.0;
                for (std::size_t i = 0; i < c; ++i) norm += q[r * c + i] * q[r * c + i];
                norm = std::sqrt(norm);
                if (norm < 1e-8) throw numeric_error("make_orthogonal_features: degenerate draw");
                for (std::size_t i = 0; i < c; ++i) q[r * c + i] /= norm;
            }
        }
        for (std::size_t r = 0; r < block; ++r) {
            double sq = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
                double g = rng.gaussian();
                sq += g * g;
            }
            double target = std::sqrt(sq);
            for (std::size_t i = 0; i < c; ++i) rows[(done + r) * c + i] = q[r * c + i] * target;
        }
        done += block;
    }
    Tensor out = Tensor::from(rows, {m, c});
    out.set_requires_grad(false);
    return out;
}

} // namespace mcl
