#pragma once

// Dense row-major tensors with reverse-mode autodiff. Nodes form a tape:
// each op returns a tensor whose backward_fn scatters the output gradient
// into its parents. float is the training precision, double the
// verification precision used by the gradient-check suites.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "mednvc/errors.hpp"
#include "mednvc/rng.hpp"

namespace mednvc {

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Global toggle for the per-op non-finite scan. On by default; NaN/Inf in
// any forward output is an error.
bool finite_checks_enabled();
void set_finite_checks(bool on);

template <typename T>
class Tensor;

template <typename T>
using Ptr = std::shared_ptr<Tensor<T>>;

template <typename T>
class Tensor : public std::enable_shared_from_this<Tensor<T>> {
public:
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily, same length as data
    bool requires_grad = false;

    std::vector<Ptr<T>> parents;
    std::function<void()> backward_fn;

    Tensor(std::vector<int> s, std::vector<T> d, bool rg)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (shape_numel(shape) != data.size()) {
            throw dim_error("tensor: shape " + shape_str(shape) + " does not match data length " +
                            std::to_string(data.size()));
        }
    }

    Tensor(const Tensor&) = delete;
    Tensor& operator=(const Tensor&) = delete;

    std::size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void zero_grad() {
        if (!grad.empty()) grad.assign(grad.size(), T(0));
    }

    // Reverse-mode pass from a scalar output. Seeds d(out)/d(out) = 1 and
    // walks the tape in reverse topological order.
    void backward() {
        if (numel() != 1) {
            throw dim_error("backward: output must be scalar, got " + shape_str(shape));
        }
        ensure_grad();
        grad[0] = T(1);

        std::vector<Tensor<T>*> order;
        std::unordered_set<Tensor<T>*> visited;
        std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
        stack.emplace_back(this, 0);
        visited.insert(this);
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Tensor<T>* p = node->parents[idx].get();
                ++idx;
                if (visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn();
        }
    }
};

template <typename T>
Ptr<T> make_tensor(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    return std::make_shared<Tensor<T>>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Ptr<T> zeros(std::vector<int> shape, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), T(0));
    return make_tensor<T>(std::move(shape), std::move(d), requires_grad);
}

template <typename T>
Ptr<T> full(std::vector<int> shape, T value, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), value);
    return make_tensor<T>(std::move(shape), std::move(d), requires_grad);
}

template <typename T>
Ptr<T> randn(std::vector<int> shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.normal()) * stddev;
    return make_tensor<T>(std::move(shape), std::move(d), requires_grad);
}

template <typename T>
void trunc_normal_fill(Tensor<T>& t, Rng& rng, double stddev) {
    for (auto& v : t.data) v = static_cast<T>(rng.trunc_normal(stddev));
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!finite_checks_enabled()) return;
    for (const T& v : t.data) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw train_error(std::string(op) + ": non-finite value in output of shape " +
                              shape_str(t.shape));
        }
    }
}

/// Node factory used by every op: result requires grad iff any parent does,
// and only then is the closure attached to the tape.
template <typename T>
Ptr<T> make_op_result(std::vector<int> shape, std::vector<T> data, std::vector<Ptr<T>> parents,
                      const char* op_name, std::function<void(Tensor<T>&)> make_backward) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto out = make_tensor<T>(std::move(shape), std::move(data), rg);
    check_finite(*out, op_name);
    if (rg) {
        out->parents = std::move(parents);
        make_backward(*out);
    }
    return out;
}

template <typename T>
void accumulate_grad(const Ptr<T>& t, const std::vector<T>& delta) {
    if (!t->requires_grad) return;
    t->ensure_grad();
    for (std::size_t i = 0; i < delta.size(); ++i) t->grad[i] += delta[i];
}

}  // namespace mednvc
