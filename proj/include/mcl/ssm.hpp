#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "error.hpp"
#include "ops.hpp"

namespace mcl {

// How continuous (A', B') become discrete (A, B) for a timescale delta.
// A = exp(delta A') in every scheme; they differ only in B:
//   zoh           B = (A')^-1 (A - I) B'        (exact zero-order hold)
//   paper_literal B = A^-1 (A - I) delta B'
//   euler         B = delta B'
enum class Discretization { zoh, paper_literal, euler };

inline const char* discretization_name(Discretization d) {
    switch (d) {
        case Discretization::zoh: return "zoh";
        case Discretization::paper_literal: return "paper_literal";
        case Discretization::euler: return "euler";
    }
    return "?";
}

inline Discretization parse_discretization(const std::string& s) {
    if (s == "zoh") return Discretization::zoh;
    if (s == "paper_literal") return Discretization::paper_literal;
    if (s == "euler") return Discretization::euler;
    throw config_error("unknown discretization '" + s +
                       "' (expected zoh, paper_literal, or euler)");
}

// Scalar-per-entry discretization of a diagonal A' and matching B'.
inline void discretize(const std::vector<double>& Aprime, const std::vector<double>& Bprime,
                       double delta, Discretization scheme,
                       std::vector<double>& A, std::vector<double>& B) {
    if (!(delta > 0.0))
        throw contract_error("discretize: delta must be positive, got " + std::to_string(delta));
    if (Aprime.size() != Bprime.size())
        throw dim_error("discretize: A' has " + std::to_string(Aprime.size()) +
                        " entries vs B' " + std::to_string(Bprime.size()));
    std::size_t c = Aprime.size();
    A.resize(c);
    B.resize(c);
    for (std::size_t i = 0; i < c; ++i) {
        double arg = delta * Aprime[i];
        A[i] = std::exp(arg);
        switch (scheme) {
            case Discretization::zoh:
                // (A-I)/A' = expm1(delta A')/A', finite as A' -> 0
                B[i] = std::expm1(arg) / Aprime[i] * Bprime[i];
                break;
            case Discretization::paper_literal:
                // A^-1 (A-I) = 1 - exp(-delta A') = -expm1(-delta A')
                B[i] = -std::expm1(-arg) * delta * Bprime[i];
                break;
            case Discretization::euler:
                B[i] = delta * Bprime[i];
                break;
        }
    }
}

// Tape discretization for a whole sequence. Aprime is 1 x C (strictly
// negative), Bprime is N x C, delta is N x 1 (strictly positive). Returns
// (A, B), both N x C, differentiable through every input.
inline std::pair<Tensor, Tensor> discretize_rows(const Tensor& Aprime, const Tensor& Bprime,
                                                 const Tensor& delta, Discretization scheme) {
    if (Aprime.rank() != 2 || Aprime.dim(0) != 1)
        throw dim_error("discretize_rows: A' must be 1 x C, got " +
                        detail::shape_string(Aprime.shape()));
    detail::check_matrix(Bprime, "discretize_rows");
    if (delta.rank() != 2 || delta.dim(1) != 1 || delta.dim(0) != Bprime.dim(0))
        throw dim_error("discretize_rows: delta must be N x 1 matching B'");
    std::size_t c = Aprime.dim(1);
    if (Bprime.dim(1) != c)
        throw dim_error("discretize_rows: B' " + detail::shape_string(Bprime.shape()) +
                        " vs A' " + detail::shape_string(Aprime.shape()));
    for (double v : delta.data())
        if (!(v > 0.0)) throw contract_error("discretize_rows: delta must be positive");
    Tensor arg = matmul(delta, Aprime);  // N x C, entry = delta_t * A'_i
    Tensor A = exp(arg);
    Tensor B;
    switch (scheme) {
        case Discretization::zoh: {
            Tensor inv_ap = div(Tensor::ones({1, c}), Aprime);
            B = mul(mul_row_vector(expm1(arg), inv_ap), Bprime);
            break;
        }
        case Discretization::paper_literal: {
            Tensor gate = neg(expm1(neg(arg)));
            B = mul(mul(gate, tile_cols(delta, c)), Bprime);
            break;
        }
        case Discretization::euler:
            B = mul(tile_cols(delta, c), Bprime);
            break;
    }
    return {A, B};
}

// One step of the selective state-space recurrence. H is C x M row-major
// (state row c, channel column i). At is either a shared C-vector or a full
// C x M matrix of per-channel diagonals; Bt and Ct are C-vectors, D and z are
// M-vectors. Updates H in place and writes u = Ct H' + D .* z.
inline void selective_ssm_step(std::vector<double>& H, const std::vector<double>& At,
                               const std::vector<double>& Bt, const std::vector<double>& Ct,
                               const std::vector<double>& D, const std::vector<double>& z,
                               std::vector<double>& u) {
    std::size_t m = z.size(), c = Ct.size();
    if (H.size() != c * m)
        throw dim_error("selective_ssm_step: H holds " + std::to_string(H.size()) +
                        " entries, expected " + std::to_string(c * m));
    if (Bt.size() != c)
        throw dim_error("selective_ssm_step: Bt length " + std::to_string(Bt.size()) +
                        " vs state size " + std::to_string(c));
    if (D.size() != m)
        throw dim_error("selective_ssm_step: D length " + std::to_string(D.size()) +
                        " vs channel count " + std::to_string(m));
    bool per_channel = At.size() == c * m;
    if (!per_channel && At.size() != c)
        throw dim_error("selective_ssm_step: At length " + std::to_string(At.size()) +
                        " is neither shared (" + std::to_string(c) + ") nor per-channel (" +
                        std::to_string(c * m) + ")");
    for (std::size_t r = 0; r < c; ++r) {
        double b = Bt[r];
        for (std::size_t i = 0; i < m; ++i) {
            double a = per_channel ? At[r * m + i] : At[r];
            H[r * m + i] = a * H[r * m + i] + b * z[i];
        }
    }
    u.assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < c; ++r) acc += Ct[r] * H[r * m + i];
        u[i] = acc + D[i] * z[i];
    }
}

// Fused differentiable scan over a whole sequence: given per-token shared
// diagonals A (N x C), inputs B (N x C), readouts Cm (N x C) and the channel
// stream X (N x M), produces U (N x M) with
//   H_t[c,i] = A[t,c] H_{t-1}[c,i] + B[t,c] X[t,i],   U[t,i] = sum_c Cm[t,c] H_t[c,i].
// The D-skip and gating live outside this op. Backward is a hand-rolled
// reverse scan over the stored state trajectory.
inline Tensor ssm_scan(const Tensor& A, const Tensor& B, const Tensor& Cm, const Tensor& X) {
    detail::check_matrix(A, "ssm_scan");
    detail::check_same_shape(A, B, "ssm_scan");
    detail::check_same_shape(A, Cm, "ssm_scan");
    detail::check_matrix(X, "ssm_scan");
    std::size_t n = A.dim(0), c = A.dim(1), m = X.dim(1);
    if (X.dim(0) != n)
        throw dim_error("ssm_scan: X " + detail::shape_string(X.shape()) + " vs A " +
                        detail::shape_string(A.shape()));
    // trajectory of H after each step, kept only when a backward pass can happen
    bool rec = grad_enabled() && (A.requires_grad() || B.requires_grad() ||
                                  Cm.requires_grad() || X.requires_grad());
    auto hs = std::make_shared<std::vector<double>>(rec ? n * c * m : 0, 0.0);
    Tensor out = detail::make_op({n, m}, {A, B, Cm, X},
        [A, B, Cm, X, hs, n, c, m](const TensorNode& o, GradStore& gs) {
            const auto& g = detail::out_grad(o, gs);
            const auto& av = A.data();
            const auto& bv = B.data();
            const auto& cv = Cm.data();
            const auto& xv = X.data();
            std::vector<double>* dA = A.requires_grad() ? &gs.of(A.node()) : nullptr;
            std::vector<double>* dB = B.requires_grad() ? &gs.of(B.node()) : nullptr;
            std::vector<double>* dC = Cm.requires_grad() ? &gs.of(Cm.node()) : nullptr;
            std::vector<double>* dX = X.requires_grad() ? &gs.of(X.node()) : nullptr;
            std::vector<double> dH(c * m, 0.0);
            for (std::size_t t = n; t-- > 0;) {
                const double* ht = hs->data() + t * c * m;
                const double* hprev = t > 0 ? hs->data() + (t - 1) * c * m : nullptr;
                for (std::size_t r = 0; r < c; ++r) {
                    double dc_acc = 0.0;
                    double cr = cv[t * c + r];
                    for (std::size_t i = 0; i < m; ++i) {
                        double gi = g[t * m + i];
                        dH[r * m + i] += cr * gi;
                        dc_acc += ht[r * m + i] * gi;
                    }
                    if (dC) (*dC)[t * c + r] += dc_acc;
                }
                for (std::size_t r = 0; r < c; ++r) {
                    double da_acc = 0.0, db_acc = 0.0;
                    double ar = av[t * c + r], br = bv[t * c + r];
                    for (std::size_t i = 0; i < m; ++i) {
                        double d = dH[r * m + i];
                        if (hprev) da_acc += d * hprev[r * m + i];
                        db_acc += d * xv[t * m + i];
                        if (dX) (*dX)[t * m + i] += d * br;
                        dH[r * m + i] = d * ar;
                    }
                    if (dA) (*dA)[t * c + r] += da_acc;
                    if (dB) (*dB)[t * c + r] += db_acc;
                }
            }
        });
    const auto& av = A.data();
    const auto& bv = B.data();
    const auto& cv = Cm.data();
    const auto& xv = X.data();
    auto& ov = out.data();
    std::vector<double> H(c * m, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t r = 0; r < c; ++r) {
            double a = av[t * c + r], b = bv[t * c + r];
            for (std::size_t i = 0; i < m; ++i)
                H[r * m + i] = a * H[r * m + i] + b * xv[t * m + i];
        }
        if (rec) std::copy(H.begin(), H.end(), hs->begin() + t * c * m);
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t r = 0; r < c; ++r) acc += cv[t * c + r] * H[r * m + i];
            ov[t * m + i] = acc;
        }
    }
    return out;
}

} // namespace mcl
