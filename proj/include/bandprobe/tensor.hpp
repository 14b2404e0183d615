#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace bandprobe {

// Thread-local switch for graph recording. Inference paths wrap themselves in
// a NoGradGuard so forward passes allocate no tape.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool flag = true;
    return flag;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }
inline NoGradGuard::NoGradGuard() : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
}
inline NoGradGuard::~NoGradGuard() { detail::grad_mode_flag() = prev_; }

inline std::string shape_to_string(std::span<const int> shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense n-d array of T with optional gradient and a reverse-mode tape.
// Shared-node value semantics: copying a Tensor aliases the same storage,
// clone() makes an independent one. T is float in normal operation and
// double for gradient checks.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(count_elems(t.node_->shape), value);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_vector(std::vector<int> shape, std::vector<T> values,
                              bool requires_grad = false) {
        if (count_elems(shape) != static_cast<std::int64_t>(values.size())) {
            throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                        " values do not fill shape " + shape_to_string(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_vector({1}, {value}, requires_grad);
    }

    bool valid() const { return node_ != nullptr; }

    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }

    T item() const {
        if (numel() != 1) {
            throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) +
                                        " elements, expected 1");
        }
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }

    std::span<const T> grad() const {
        if (node_->grad.empty()) {
            throw std::runtime_error("Tensor::grad: no gradient accumulated yet");
        }
        return node_->grad;
    }

    // Mutable view of the gradient buffer, zero-allocated on first use.
    std::span<T> grad_buffer() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    }

    void clear_grad() { node_->grad.clear(); }

    bool all_finite() const {
        for (T v : node_->data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    // Independent copy of the values; no tape, no gradient.
    Tensor clone() const {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // --- graph construction (used by the op layer) ---

    using BackFn = std::function<void(Tensor& out)>;

    // Wraps freshly computed values as an op output. Records parents and the
    // backward closure only while grad mode is on and a parent wants grads.
    static Tensor make_op(std::vector<int> shape, std::vector<T> values,
                          std::vector<Tensor> parents, BackFn backprop) {
        Tensor out = from_vector(std::move(shape), std::move(values));
        bool needs_tape = grad_enabled();
        if (needs_tape) {
            bool any = false;
            for (const auto& p : parents) any = any || p.requires_grad();
            needs_tape = any;
        }
        if (needs_tape) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(parents.size());
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backprop = std::move(backprop);
        }
        return out;
    }

    template <typename U>
    friend void backward(Tensor<U> loss);

private:
    struct Node {
        std::vector<int> shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until first accumulation
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        // Reads the output gradient, accumulates into the parents'. The
        // closure captures parent Tensors only, never its own node.
        std::function<void(Tensor&)> backprop;
    };

    static std::int64_t count_elems(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension in shape");
            n *= d;
        }
        return n;
    }

    static Tensor wrap(std::shared_ptr<Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    std::shared_ptr<Node> node_;
};

// Reverse-mode accumulation from a scalar loss. Seeds d(loss)/d(loss) = 1 and
// walks the recorded graph children-before-parents. Gradients accumulate:
// calling backward twice without zeroing doubles them.
template <typename T>
void backward(Tensor<T> loss) {
    if (!loss.valid() || loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    }
    using Node = typename Tensor<T>::Node;

    // Iterative post-order DFS over parent edges; `order` ends up with every
    // parent before any of its consumers, so the reverse walk visits a node
    // only after all of its consumers have deposited their contributions.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node_.get(), 0);
    seen.insert(loss.node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backprop || n->grad.empty()) continue;
        // Re-wrap without copying: the node stays alive through `loss`'s graph.
        Tensor<T> view = Tensor<T>::wrap(std::shared_ptr<Node>(n, [](Node*) {}));
        n->backprop(view);
    }
}

// --- elementwise utilities (tests and the trainer use these) ---

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::int64_t i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] += b.data()[i];
    Tensor<T> a_t = a, b_t = b;
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a_t, b_t](Tensor<T>& o) mutable {
        auto g = o.grad();
        if (a_t.requires_grad()) {
            auto ga = a_t.grad_buffer();
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (b_t.requires_grad()) {
            auto gb = b_t.grad_buffer();
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
    }
    std::vector<T> out(static_cast<size_t>(a.numel()));
    for (std::int64_t i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] = a.data()[i] * b.data()[i];
    Tensor<T> a_t = a, b_t = b;
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a_t, b_t](Tensor<T>& o) mutable {
        auto g = o.grad();
        if (a_t.requires_grad()) {
            auto ga = a_t.grad_buffer();
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b_t.data()[i];
        }
        if (b_t.requires_grad()) {
            auto gb = b_t.grad_buffer();
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a_t.data()[i];
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = T(0);
    for (T v : a.data()) total += v;
    Tensor<T> a_t = a;
    return Tensor<T>::make_op({1}, {total}, {a}, [a_t](Tensor<T>& o) mutable {
        if (!a_t.requires_grad()) return;
        const T g = o.grad()[0];
        auto ga = a_t.grad_buffer();
        for (auto& v : ga) v += g;
    });
}

}  // namespace bandprobe
