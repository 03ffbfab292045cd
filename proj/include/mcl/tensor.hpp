#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mcl/error.hpp"
#include "mcl/rng.hpp"

namespace mcl {

class Tensor;
struct TensorNode;

// Gradient buffers for one backward pass, keyed by node identity. Keeping
// per-pass gradients outside the nodes lets a training step accumulate
// episode gradients in a fixed order regardless of worker count.
struct GradStore {
    std::unordered_map<const TensorNode*, std::vector<double>> buffers;

    std::vector<double>& of(const TensorNode* node);
    const std::vector<double>* find(const TensorNode* node) const {
        auto it = buffers.find(node);
        return it == buffers.end() ? nullptr : &it->second;
    }
};

// One recorded value in the computation graph. Ops build fresh nodes whose
// backward_fn scatters the output gradient onto the parents.
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;   // populated by backward(); empty until then
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const TensorNode&, GradStore&)> backward_fn;

    std::size_t size() const { return data.size(); }
};

inline std::vector<double>& GradStore::of(const TensorNode* node) {
    auto it = buffers.find(node);
    if (it == buffers.end()) {
        it = buffers.emplace(node, std::vector<double>(node->size(), 0.0)).first;
    }
    return it->second;
}

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}
inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}
} // namespace detail

// Disables graph recording in scope; forward math is unchanged.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Dense row-major float64 tensor with reverse-mode autodiff. Copying a
// Tensor copies a handle; the underlying node is shared.
class Tensor {
public:
    Tensor() : node_(nullptr) {}

    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<std::size_t> shape) { return full(std::move(shape), 0.0); }
    static Tensor ones(std::vector<std::size_t> shape) { return full(std::move(shape), 1.0); }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->data.assign(detail::shape_product(node->shape), value);
        return Tensor(node);
    }

    static Tensor scalar(double value) { return full({1}, value); }

    static Tensor from(std::vector<double> values, std::vector<std::size_t> shape) {
        if (detail::shape_product(shape) != values.size()) {
            throw dim_error("from: " + std::to_string(values.size()) +
                            " values do not fill shape " + detail::shape_string(shape));
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->data = std::move(values);
        return Tensor(node);
    }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double std = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.node_->data) v = rng.gaussian(0.0, std);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t size() const { return node_->data.size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    double item() const {
        if (size() != 1) {
            throw contract_error("item: tensor has " + std::to_string(size()) + " elements, expected 1");
        }
        return node_->data[0];
    }

    double at(std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape[1] + c]; }
    double& at(std::size_t i) { return node_->data[i]; }
    double& at(std::size_t r, std::size_t c) { return node_->data[r * node_->shape[1] + c]; }

    Tensor& set_requires_grad(bool v = true) {
        node_->requires_grad = v;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& grad() const {
        if (node_->grad.empty()) {
            throw contract_error("grad: no gradient populated; run backward first");
        }
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    // Value copy with no graph history.
    Tensor detach() const {
        auto node = std::make_shared<TensorNode>();
        node->shape = node_->shape;
        node->data = node_->data;
        return Tensor(node);
    }

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

// Post-order over the subgraph reachable from loss through grad-requiring nodes.
inline std::vector<const TensorNode*> topo_order(const TensorNode* loss) {
    std::vector<const TensorNode*> order;
    std::unordered_set<const TensorNode*> seen;
    struct Frame {
        const TensorNode* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    if (!loss->requires_grad) return order;
    stack.push_back({loss, 0});
    seen.insert(loss);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            const TensorNode* p = f.node->parents[f.next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace detail

// Reverse-mode sweep from a scalar loss; gradients land in the store only.
inline void backward_into(const Tensor& loss, GradStore& store) {
    if (loss.size() != 1) {
        throw contract_error("backward: called on non-scalar of shape " +
                             detail::shape_string(loss.shape()));
    }
    if (!loss.node()->requires_grad) return;
    auto order = detail::topo_order(loss.node());
    store.of(loss.node())[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const TensorNode* node = *it;
        if (node->backward_fn) node->backward_fn(*node, store);
    }
}

// Public backward: additionally accumulates into node.grad of every
// grad-requiring node reached, so leaves expose .grad() afterwards.
inline void backward(const Tensor& loss) {
    GradStore store;
    backward_into(loss, store);
    for (const auto& [node, buf] : store.buffers) {
        auto* mutable_node = const_cast<TensorNode*>(node);
        if (mutable_node->grad.empty()) mutable_node->grad.assign(node->size(), 0.0);
        for (std::size_t i = 0; i < buf.size(); ++i) mutable_node->grad[i] += buf[i];
    }
}

} // namespace mcl
