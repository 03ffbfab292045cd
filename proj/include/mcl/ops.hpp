#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "mcl/tensor.hpp"

namespace mcl {

namespace detail {

inline Tensor make_op(std::vector<std::size_t> shape, std::vector<Tensor> parents,
                      std::function<void(const TensorNode&, GradStore&)> backfn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data.assign(shape_product(node->shape), 0.0);
    bool rg = false;
    if (grad_enabled()) {
        for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    if (rg) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backfn);
    }
    return Tensor(node);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw dim_error(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                        " vs " + shape_string(b.shape()));
    }
}

inline void check_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        throw dim_error(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
    }
}

inline const std::vector<double>& out_grad(const TensorNode& out, GradStore& gs) {
    const std::vector<double>* g = gs.find(&out);
    if (g == nullptr) {
        throw contract_error("backward: missing output gradient buffer");
    }
    return *g;
}

inline double sigmoid_val(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus_val(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape).

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = detail::make_op(a.shape(), {a, b}, [a, b](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& db = gs.of(b.node());
            for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = detail::make_op(a.shape(), {a, b}, [a, b](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& db = gs.of(b.node());
            for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = detail::make_op(a.shape(), {a, b}, [a, b](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        const auto& av = a.data();
        const auto& bv = b.data();
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
        }
        if (b.requires_grad()) {
            auto& db = gs.of(b.node());
            for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    Tensor out = detail::make_op(a.shape(), {a, b}, [a, b](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        const auto& av = a.data();
        const auto& bv = b.data();
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / bv[i];
        }
        if (b.requires_grad()) {
            auto& db = gs.of(b.node());
            for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
    return out;
}

// ---------------------------------------------------------------------------
// Scalar-constant and scalar-tensor ops.

inline Tensor scalar_mul(const Tensor& a, double c) {
    Tensor out = detail::make_op(a.shape(), {a}, [a, c](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    return out;
}

inline Tensor scalar_add(const Tensor& a, double c) {
    Tensor out = detail::make_op(a.shape(), {a}, [a](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
    return out;
}

inline Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

// out = a * s where s is a one-element tensor (broadcast scalar).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) {
        throw dim_error("scale_by: scale must be one element, got " +
                        detail::shape_string(s.shape()));
    }
    Tensor out = detail::make_op(a.shape(), {a, s}, [a, s](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        const auto& av = a.data();
        double sv = s.data()[0];
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * sv;
        }
        if (s.requires_grad()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
            gs.of(s.node())[0] += acc;
        }
    });
    const auto& av = a.data();
    double sv = s.data()[0];
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * sv;
    return out;
}

// out = a + s where s is a one-element tensor (broadcast scalar).
inline Tensor shift_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) {
        throw dim_error("shift_by: shift must be one element, got " +
                        detail::shape_string(s.shape()));
    }
    Tensor out = detail::make_op(a.shape(), {a, s}, [a, s](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (s.requires_grad()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
            gs.of(s.node())[0] += acc;
        }
    });
    const auto& av = a.data();
    double sv = s.data()[0];
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + sv;
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "matmul");
    detail::check_matrix(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw dim_error("matmul: inner dimensions disagree, " +
                        detail::shape_string(a.shape()) + " vs " +
                        detail::shape_string(b.shape()));
    }
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = detail::make_op({m, n}, {a, b}, [a, b, m, k, n](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        const auto& av = a.data();
        const auto& bv = b.data();
        if (a.requires_grad()) {
            // dA = G * B^T
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    double gij = g[i * n + j];
                    if (gij == 0.0) continue;
                    const double* brow = &bv[j];
                    for (std::size_t p = 0; p < k; ++p) da[i * k + p] += gij * brow[p * n];
                }
            }
        }
        if (b.requires_grad()) {
            // dB = A^T * G
            auto& db = gs.of(b.node());
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double aip = av[i * k + p];
                    if (aip == 0.0) continue;
                    const double* grow = &g[i * n];
                    double* dbrow = &db[p * n];
                    for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
                }
            }
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &bv[p * n];
            double* orow = &ov[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::check_matrix(a, "transpose");
    std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_op({n, m}, {a}, [a, m, n](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) da[j * n + i] += g[i * m + j];
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    return out;
}

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (detail::shape_product(shape) != a.size()) {
        throw dim_error("reshape: cannot view " + detail::shape_string(a.shape()) + " as " +
                        detail::shape_string(shape));
    }
    Tensor out = detail::make_op(std::move(shape), {a}, [a](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
    });
    out.data() = a.data();
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_local) {
    Tensor out = detail::make_op(a.shape(), {a},
        [a, bwd_local](const TensorNode& o, GradStore& gs) {
            const auto& g = detail::out_grad(o, gs);
            if (!a.requires_grad()) return;
            auto& da = gs.of(a.node());
            const auto& av = a.data();
            const auto& ov = o.data;
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bwd_local(av[i], ov[i]);
        });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
    return out;
}

} // namespace detail

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::exp(x); },
                            [](double, double y) { return y; });
}

inline Tensor expm1(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::expm1(x); },
                            [](double, double y) { return y + 1.0; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw numeric_error("log: non-positive input " + std::to_string(v));
    }
    return detail::unary_op(a, [](double x) { return std::log(x); },
                            [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0) throw numeric_error("sqrt: negative input " + std::to_string(v));
    }
    return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                            [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return x * x; },
                            [](double x, double) { return 2.0 * x; });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::tanh(x); },
                            [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return detail::sigmoid_val(x); },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return x * detail::sigmoid_val(x); },
                            [](double x, double) {
                                double s = detail::sigmoid_val(x);
                                return s * (1.0 + x * (1.0 - s));
                            });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return detail::softplus_val(x); },
                            [](double x, double) { return detail::sigmoid_val(x); });
}

// elu(x) + 1: positive-valued feature map, smooth at 0.
inline Tensor elu_plus_one(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return x > 0.0 ? x + 1.0 : std::exp(x); },
                            [](double x, double y) { return x > 0.0 ? 1.0 : y; });
}

// ---------------------------------------------------------------------------
// Reductions, slicing, assembly.

inline Tensor sum_all(const Tensor& a) {
    Tensor out = detail::make_op({1}, {a}, [a](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
        }
    });
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    if (a.size() == 0) throw dim_error("mean_all: empty tensor");
    return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor row_sums(const Tensor& a) {
    detail::check_matrix(a, "row_sums");
    std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op({n, 1}, {a}, [a, n, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) da[r * m + c] += g[r];
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < m; ++c) acc += av[r * m + c];
        ov[r] = acc;
    }
    return out;
}

inline Tensor row(const Tensor& a, std::size_t r) {
    detail::check_matrix(a, "row");
    if (r >= a.dim(0)) {
        throw dim_error("row: index " + std::to_string(r) + " out of range for " +
                        detail::shape_string(a.shape()));
    }
    std::size_t m = a.dim(1);
    Tensor out = detail::make_op({1, m}, {a}, [a, r, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t c = 0; c < m; ++c) da[r * m + c] += g[c];
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t c = 0; c < m; ++c) ov[c] = av[r * m + c];
    return out;
}

inline Tensor row_slice(const Tensor& a, std::size_t r0, std::size_t r1) {
    detail::check_matrix(a, "row_slice");
    if (r0 > r1 || r1 > a.dim(0)) {
        throw dim_error("row_slice: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                        ") invalid for " + detail::shape_string(a.shape()));
    }
    std::size_t m = a.dim(1), rows = r1 - r0;
    Tensor out = detail::make_op({rows, m}, {a}, [a, r0, rows, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < m; ++c) da[(r0 + r) * m + c] += g[r * m + c];
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = av[(r0 + r) * m + c];
    return out;
}

inline Tensor col_slice(const Tensor& a, std::size_t c0, std::size_t c1) {
    detail::check_matrix(a, "col_slice");
    if (c0 > c1 || c1 > a.dim(1)) {
        throw dim_error("col_slice: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                        ") invalid for " + detail::shape_string(a.shape()));
    }
    std::size_t n = a.dim(0), m = a.dim(1), cols = c1 - c0;
    Tensor out = detail::make_op({n, cols}, {a}, [a, c0, n, m, cols](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < cols; ++c) da[r * m + c0 + c] += g[r * cols + c];
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = av[r * m + c0 + c];
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw dim_error("concat_rows: no parts");
    std::size_t m = parts[0].dim(1), n = 0;
    for (const auto& p : parts) {
        detail::check_matrix(p, "concat_rows");
        if (p.dim(1) != m) {
            throw dim_error("concat_rows: column mismatch " + detail::shape_string(parts[0].shape()) +
                            " vs " + detail::shape_string(p.shape()));
        }
        n += p.dim(0);
    }
    Tensor out = detail::make_op({n, m}, parts, [parts, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        std::size_t offset = 0;
        for (const auto& p : parts) {
            std::size_t count = p.dim(0) * m;
            if (p.requires_grad()) {
                auto& dp = gs.of(p.node());
                for (std::size_t i = 0; i < count; ++i) dp[i] += g[offset + i];
            }
            offset += count;
        }
    });
    auto& ov = out.data();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto& pv = p.data();
        std::copy(pv.begin(), pv.end(), ov.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += pv.size();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Broadcast helpers over matrix rows/columns.

inline Tensor add_row_vector(const Tensor& a, const Tensor& v) {
    detail::check_matrix(a, "add_row_vector");
    if (v.rank() != 2 || v.dim(0) != 1 || v.dim(1) != a.dim(1)) {
        throw dim_error("add_row_vector: vector " + detail::shape_string(v.shape()) +
                        " does not match " + detail::shape_string(a.shape()));
    }
    std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op(a.shape(), {a, v}, [a, v, n, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (v.requires_grad()) {
            auto& dv = gs.of(v.node());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) dv[c] += g[r * m + c];
        }
    });
    const auto& av = a.data();
    const auto& vv = v.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = av[r * m + c] + vv[c];
    return out;
}

inline Tensor mul_row_vector(const Tensor& a, const Tensor& v) {
    detail::check_matrix(a, "mul_row_vector");
    if (v.rank() != 2 || v.dim(0) != 1 || v.dim(1) != a.dim(1)) {
        throw dim_error("mul_row_vector: vector " + detail::shape_string(v.shape()) +
                        " does not match " + detail::shape_string(a.shape()));
    }
    std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op(a.shape(), {a, v}, [a, v, n, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        const auto& av = a.data();
        const auto& vv = v.data();
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) da[r * m + c] += g[r * m + c] * vv[c];
        }
        if (v.requires_grad()) {
            auto& dv = gs.of(v.node());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) dv[c] += g[r * m + c] * av[r * m + c];
        }
    });
    const auto& av = a.data();
    const auto& vv = v.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = av[r * m + c] * vv[c];
    return out;
}

inline Tensor mul_rows_by_col(const Tensor& a, const Tensor& col) {
    detail::check_matrix(a, "mul_rows_by_col");
    if (col.rank() != 2 || col.dim(1) != 1 || col.dim(0) != a.dim(0)) {
        throw dim_error("mul_rows_by_col: column " + detail::shape_string(col.shape()) +
                        " does not match " + detail::shape_string(a.shape()));
    }
    std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op(a.shape(), {a, col}, [a, col, n, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        const auto& av = a.data();
        const auto& cv = col.data();
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) da[r * m + c] += g[r * m + c] * cv[r];
        }
        if (col.requires_grad()) {
            auto& dc = gs.of(col.node());
            for (std::size_t r = 0; r < n; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < m; ++c) acc += g[r * m + c] * av[r * m + c];
                dc[r] += acc;
            }
        }
    });
    const auto& av = a.data();
    const auto& cv = col.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = av[r * m + c] * cv[r];
    return out;
}

inline Tensor div_rows_by_col(const Tensor& a, const Tensor& col) {
    detail::check_matrix(a, "div_rows_by_col");
    if (col.rank() != 2 || col.dim(1) != 1 || col.dim(0) != a.dim(0)) {
        throw dim_error("div_rows_by_col: column " + detail::shape_string(col.shape()) +
                        " does not match " + detail::shape_string(a.shape()));
    }
    for (double v : col.data()) {
        if (std::abs(v) < 1e-12) {
            throw numeric_error("div_rows_by_col: denominator magnitude below 1e-12");
        }
    }
    std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op(a.shape(), {a, col}, [a, col, n, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        const auto& av = a.data();
        const auto& cv = col.data();
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) da[r * m + c] += g[r * m + c] / cv[r];
        }
        if (col.requires_grad()) {
            auto& dc = gs.of(col.node());
            for (std::size_t r = 0; r < n; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < m; ++c) acc += g[r * m + c] * av[r * m + c];
                dc[r] -= acc / (cv[r] * cv[r]);
            }
        }
    });
    const auto& av = a.data();
    const auto& cv = col.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = av[r * m + c] / cv[r];
    return out;
}

// Repeat a column vector across m columns.
inline Tensor tile_cols(const Tensor& col, std::size_t m) {
    if (col.rank() != 2 || col.dim(1) != 1) {
        throw dim_error("tile_cols: expected a column vector, got " +
                        detail::shape_string(col.shape()));
    }
    std::size_t n = col.dim(0);
    Tensor out = detail::make_op({n, m}, {col}, [col, n, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (col.requires_grad()) {
            auto& dc = gs.of(col.node());
            for (std::size_t r = 0; r < n; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < m; ++c) acc += g[r * m + c];
                dc[r] += acc;
            }
        }
    });
    const auto& cv = col.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = cv[r];
    return out;
}

// Zero the strict upper triangle (keeps j <= i).
inline Tensor tril(const Tensor& a) {
    detail::check_matrix(a, "tril");
    std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op(a.shape(), {a}, [a, n, m](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (a.requires_grad()) {
            auto& da = gs.of(a.node());
            for (std::size_t r = 0; r < n; ++r) {
                std::size_t hi = std::min(r + 1, m);
                for (std::size_t c = 0; c < hi; ++c) da[r * m + c] += g[r * m + c];
            }
        }
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t hi = std::min(r + 1, m);
        for (std::size_t c = 0; c < hi; ++c) ov[r * m + c] = av[r * m + c];
    }
    return out;
}

// Embedding lookup: one output row per index.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
    detail::check_matrix(table, "gather_rows");
    std::size_t m = table.dim(1);
    for (std::size_t idx : indices) {
        if (idx >= table.dim(0)) {
            throw dim_error("gather_rows: index " + std::to_string(idx) + " out of range for " +
                            detail::shape_string(table.shape()));
        }
    }
    std::size_t n = indices.size();
    Tensor out = detail::make_op({n, m}, {table},
        [table, indices, n, m](const TensorNode& o, GradStore& gs) {
            const auto& g = detail::out_grad(o, gs);
            if (table.requires_grad()) {
                auto& dt = gs.of(table.node());
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < m; ++c) dt[indices[r] * m + c] += g[r * m + c];
            }
        });
    const auto& tv = table.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = tv[indices[r] * m + c];
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family.

// Row-wise softmax of scale*x. With causal=true, row r only sees columns
// j <= r; masked cells are exactly zero in the output and get no gradient.
inline Tensor softmax_rows(const Tensor& a, double scale = 1.0, bool causal = false) {
    detail::check_matrix(a, "softmax_rows");
    if (!(scale > 0.0)) throw contract_error("softmax_rows: scale must be positive");
    std::size_t n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op(a.shape(), {a},
        [a, scale, causal, n, m](const TensorNode& o, GradStore& gs) {
            const auto& g = detail::out_grad(o, gs);
            if (!a.requires_grad()) return;
            auto& da = gs.of(a.node());
            const auto& p = o.data;
            for (std::size_t r = 0; r < n; ++r) {
                std::size_t hi = causal ? std::min(r + 1, m) : m;
                double dot = 0.0;
                for (std::size_t c = 0; c < hi; ++c) dot += p[r * m + c] * g[r * m + c];
                for (std::size_t c = 0; c < hi; ++c)
                    da[r * m + c] += scale * p[r * m + c] * (g[r * m + c] - dot);
            }
        });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t hi = causal ? std::min(r + 1, m) : m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < hi; ++c) mx = std::max(mx, av[r * m + c] * scale);
        double denom = 0.0;
        for (std::size_t c = 0; c < hi; ++c) {
            double e = std::exp(av[r * m + c] * scale - mx);
            ov[r * m + c] = e;
            denom += e;
        }
        for (std::size_t c = 0; c < hi; ++c) ov[r * m + c] /= denom;
    }
    return out;
}

// log softmax over a flat vector (any shape, treated flat).
inline Tensor log_softmax(const Tensor& a) {
    std::size_t n = a.size();
    if (n == 0) throw dim_error("log_softmax: empty input");
    Tensor out = detail::make_op(a.shape(), {a}, [a, n](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (!a.requires_grad()) return;
        auto& da = gs.of(a.node());
        double gsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) gsum += g[i];
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] - std::exp(o.data[i]) * gsum;
    });
    const auto& av = a.data();
    auto& ov = out.data();
    double mx = *std::max_element(av.begin(), av.end());
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(av[i] - mx);
    double lse = mx + std::log(denom);
    for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - lse;
    return out;
}

// Negative log likelihood of `target` under softmax(logits). Scalar output.
inline Tensor cross_entropy(const Tensor& logits, std::size_t target) {
    std::size_t n = logits.size();
    if (target >= n) {
        throw contract_error("cross_entropy: target " + std::to_string(target) +
                             " out of range for " + std::to_string(n) + " logits");
    }
    Tensor out = detail::make_op({1}, {logits}, [logits, target, n](const TensorNode& o, GradStore& gs) {
        const auto& g = detail::out_grad(o, gs);
        if (!logits.requires_grad()) return;
        auto& dl = gs.of(logits.node());
        const auto& lv = logits.data();
        double mx = *std::max_element(lv.begin(), lv.end());
        double denom = 0.0;
        for (std::size_t i = 0; i < n; ++i) denom += std::exp(lv[i] - mx);
        for (std::size_t i = 0; i < n; ++i) {
            double p = std::exp(lv[i] - mx) / denom;
            dl[i] += g[0] * (p - (i == target ? 1.0 : 0.0));
        }
    });
    const auto& lv = logits.data();
    double mx = *std::max_element(lv.begin(), lv.end());
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(lv[i] - mx);
    out.data()[0] = mx + std::log(denom) - lv[target];
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over each row (per-token scale/shift).

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-5) {
    detail::check_matrix(x, "layer_norm_rows");
    std::size_t n = x.dim(0), m = x.dim(1);
    if (gain.rank() != 2 || gain.dim(0) != 1 || gain.dim(1) != m ||
        bias.rank() != 2 || bias.dim(0) != 1 || bias.dim(1) != m) {
        throw dim_error("layer_norm_rows: gain/bias " + detail::shape_string(gain.shape()) + "/" +
                        detail::shape_string(bias.shape()) + " do not match " +
                        detail::shape_string(x.shape()));
    }
    Tensor out = detail::make_op(x.shape(), {x, gain, bias},
        [x, gain, bias, eps, n, m](const TensorNode& o, GradStore& gs) {
            const auto& g = detail::out_grad(o, gs);
            const auto& xv = x.data();
            const auto& gv = gain.data();
            std::vector<double>* dx = x.requires_grad() ? &gs.of(x.node()) : nullptr;
            std::vector<double>* dg = gain.requires_grad() ? &gs.of(gain.node()) : nullptr;
            std::vector<double>* db = bias.requires_grad() ? &gs.of(bias.node()) : nullptr;
            double inv_m = 1.0 / static_cast<double>(m);
            for (std::size_t r = 0; r < n; ++r) {
                const double* xr = &xv[r * m];
                const double* gr = &g[r * m];
                double mean = 0.0;
                for (std::size_t c = 0; c < m; ++c) mean += xr[c];
                mean *= inv_m;
                double var = 0.0;
                for (std::size_t c = 0; c < m; ++c) var += (xr[c] - mean) * (xr[c] - mean);
                var *= inv_m;
                double inv_std = 1.0 / std::sqrt(var + eps);
                if (dg != nullptr || db != nullptr) {
                    for (std::size_t c = 0; c < m; ++c) {
                        double xhat = (xr[c] - mean) * inv_std;
                        if (dg) (*dg)[c] += gr[c] * xhat;
                        if (db) (*db)[c] += gr[c];
                    }
                }
                if (dx != nullptr) {
                    // dL/dxhat_c = g_c * gain_c; fold mean/var chain terms.
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t c = 0; c < m; ++c) {
                        double xhat = (xr[c] - mean) * inv_std;
                        double dxhat = gr[c] * gv[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for (std::size_t c = 0; c < m; ++c) {
                        double xhat = (xr[c] - mean) * inv_std;
                        double dxhat = gr[c] * gv[c];
                        (*dx)[r * m + c] +=
                            inv_std * (dxhat - inv_m * sum_dxhat - inv_m * xhat * sum_dxhat_xhat);
                    }
                }
            }
        });
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = &xv[r * m];
        double mean = 0.0;
        for (std::size_t c = 0; c < m; ++c) mean += xr[c];
        mean *= inv_m;
        double var = 0.0;
        for (std::size_t c = 0; c < m; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var *= inv_m;
        double inv_std = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < m; ++c) ov[r * m + c] = (xr[c] - mean) * inv_std * gv[c] + bv[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Depthwise causal 1-D convolution over the token axis.
// x: N x E (tokens by channels), w: E x width, b: 1 x E. Left zero padding.

inline Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::check_matrix(x, "conv1d_depthwise_causal");
    detail::check_matrix(w, "conv1d_depthwise_causal");
    std::size_t n = x.dim(0), e = x.dim(1), width = w.dim(1);
    if (w.dim(0) != e || b.rank() != 2 || b.dim(0) != 1 || b.dim(1) != e) {
        throw dim_error("conv1d_depthwise_causal: weights " + detail::shape_string(w.shape()) +
                        ", bias " + detail::shape_string(b.shape()) + " do not match input " +
                        detail::shape_string(x.shape()));
    }
    Tensor out = detail::make_op(x.shape(), {x, w, b},
        [x, w, b, n, e, width](const TensorNode& o, GradStore& gs) {
            const auto& g = detail::out_grad(o, gs);
            const auto& xv = x.data();
            const auto& wv = w.data();
            std::vector<double>* dx = x.requires_grad() ? &gs.of(x.node()) : nullptr;
            std::vector<double>* dw = w.requires_grad() ? &gs.of(w.node()) : nullptr;
            std::vector<double>* db = b.requires_grad() ? &gs.of(b.node()) : nullptr;
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t c = 0; c < e; ++c) {
                    double gtc = g[t * e + c];
                    if (gtc == 0.0) continue;
                    if (db) (*db)[c] += gtc;
                    for (std::size_t k = 0; k < width; ++k) {
                        std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) -
                                           static_cast<std::ptrdiff_t>(width - 1 - k);
                        if (s < 0) continue;
                        double xs = xv[static_cast<std::size_t>(s) * e + c];
                        if (dw) (*dw)[c * width + k] += gtc * xs;
                        if (dx) (*dx)[static_cast<std::size_t>(s) * e + c] += gtc * wv[c * width + k];
                    }
                }
            }
        });
    const auto& xv = x.data();
    const auto& wv = w.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t c = 0; c < e; ++c) {
            double acc = bv[c];
            for (std::size_t k = 0; k < width; ++k) {
                std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) -
                                   static_cast<std::ptrdiff_t>(width - 1 - k);
                if (s < 0) continue;
                acc += wv[c * width + k] * xv[static_cast<std::size_t>(s) * e + c];
            }
            ov[t * e + c] = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plain numeric (non-recorded) helpers.

// Probability vector from exp(scale * v) with max subtraction.
inline std::vector<double> softmax(const std::vector<double>& v, double temperature_scale = 1.0) {
    if (v.empty()) throw dim_error("softmax: empty input");
    if (!(temperature_scale > 0.0)) throw contract_error("softmax: temperature_scale must be positive");
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x * temperature_scale);
    std::vector<double> p(v.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        p[i] = std::exp(v[i] * temperature_scale - mx);
        denom += p[i];
    }
    for (double& x : p) x /= denom;
    return p;
}

// KL(p || q) in nats with q floored at eps_q. Zero p entries contribute zero.
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q,
                            double eps_q = 1e-9) {
    if (p.size() != q.size()) {
        throw dim_error("kl_divergence: length mismatch " + std::to_string(p.size()) + " vs " +
                        std::to_string(q.size()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(q[i]) || q[i] < 0.0) {
            throw numeric_error("kl_divergence: invalid q entry " + std::to_string(q[i]));
        }
        if (!std::isfinite(p[i]) || p[i] < 0.0) {
            throw numeric_error("kl_divergence: invalid p entry " + std::to_string(p[i]));
        }
        if (p[i] == 0.0) continue;
        acc += p[i] * (std::log(p[i]) - std::log(std::max(q[i], eps_q)));
    }
    return acc;
}

} // namespace mcl
