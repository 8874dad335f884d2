#pragma once

// Differentiable primitive ops. Every function builds a tape node whose
// backward closure accumulates into the parents' grad buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "mednvc/gemm.hpp"
#include "mednvc/tensor.hpp"

namespace mednvc {

namespace detail {

// Unit-normal cdf/pdf pair for GELU. The double path is used by the
// verification suites; the float path evaluates erf in single precision.
inline void gelu_cdf_pdf(double x, double& cdf, double& pdf) {
    cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
    pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
}

inline void gelu_cdf_pdf(float x, float& cdf, float& pdf) {
    cdf = 0.5f * (1.0f + std::erf(x * 0.70710678f));
    pdf = 0.39894228f * std::exp(-0.5f * x * x);
}

inline void require_same_shape(const std::vector<int>& a, const std::vector<int>& b,
                               const char* op) {
    if (a != b) {
        throw dim_error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                        shape_str(b));
    }
}

}  // namespace detail

template <typename T>
Ptr<T> add(const Ptr<T>& a, const Ptr<T>& b) {
    detail::require_same_shape(a->shape, b->shape, "add");
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
    return make_op_result<T>(
        a->shape, std::move(out), {a, b}, "add", [a, b](Tensor<T>& node) {
            node.backward_fn = [&node, a, b] {
                accumulate_grad(a, node.grad);
                accumulate_grad(b, node.grad);
            };
        });
}

template <typename T>
Ptr<T> sub(const Ptr<T>& a, const Ptr<T>& b) {
    detail::require_same_shape(a->shape, b->shape, "sub");
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] - b->data[i];
    return make_op_result<T>(
        a->shape, std::move(out), {a, b}, "sub", [a, b](Tensor<T>& node) {
            node.backward_fn = [&node, a, b] {
                if (a->requires_grad) {
                    a->ensure_grad();
                    for (std::size_t i = 0; i < node.grad.size(); ++i) a->grad[i] += node.grad[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    for (std::size_t i = 0; i < node.grad.size(); ++i) b->grad[i] -= node.grad[i];
                }
            };
        });
}

template <typename T>
Ptr<T> mul(const Ptr<T>& a, const Ptr<T>& b) {
    detail::require_same_shape(a->shape, b->shape, "mul");
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
    return make_op_result<T>(
        a->shape, std::move(out), {a, b}, "mul", [a, b](Tensor<T>& node) {
            node.backward_fn = [&node, a, b] {
                if (a->requires_grad) {
                    a->ensure_grad();
                    for (std::size_t i = 0; i < node.grad.size(); ++i)
                        a->grad[i] += node.grad[i] * b->data[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    for (std::size_t i = 0; i < node.grad.size(); ++i)
                        b->grad[i] += node.grad[i] * a->data[i];
                }
            };
        });
}

template <typename T>
Ptr<T> scale(const Ptr<T>& a, T c) {
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * c;
    return make_op_result<T>(
        a->shape, std::move(out), {a}, "scale", [a, c](Tensor<T>& node) {
            node.backward_fn = [&node, a, c] {
                a->ensure_grad();
                for (std::size_t i = 0; i < node.grad.size(); ++i) a->grad[i] += node.grad[i] * c;
            };
        });
}

// Elementwise multiply by a constant 0/1 (or arbitrary) buffer that is not a
// graph node. Used for masking; masked positions receive no gradient.
template <typename T>
Ptr<T> mul_const(const Ptr<T>& a, std::vector<T> weights, const char* name = "mul_const") {
    if (weights.size() != a->numel()) {
        throw dim_error(std::string(name) + ": weight buffer length " +
                        std::to_string(weights.size()) + " vs tensor " + shape_str(a->shape));
    }
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * weights[i];
    return make_op_result<T>(
        a->shape, std::move(out), {a}, name, [a, w = std::move(weights)](Tensor<T>& node) {
            node.backward_fn = [&node, a, w] {
                a->ensure_grad();
                for (std::size_t i = 0; i < node.grad.size(); ++i) a->grad[i] += node.grad[i] * w[i];
            };
        });
}

template <typename T>
Ptr<T> matmul(const Ptr<T>& a, const Ptr<T>& b) {
    if (a->ndim() != 2 || b->ndim() != 2) {
        throw dim_error("matmul: expects 2-D operands, got " + shape_str(a->shape) + " and " +
                        shape_str(b->shape));
    }
    const std::size_t M = static_cast<std::size_t>(a->dim(0));
    const std::size_t K = static_cast<std::size_t>(a->dim(1));
    const std::size_t N = static_cast<std::size_t>(b->dim(1));
    if (b->dim(0) != a->dim(1)) {
        throw dim_error("matmul: inner dimensions differ, a " + shape_str(a->shape) + " vs b " +
                        shape_str(b->shape));
    }
    std::vector<T> out(M * N);
    gemm_nn(M, N, K, a->data.data(), b->data.data(), out.data());
    return make_op_result<T>(
        {static_cast<int>(M), static_cast<int>(N)}, std::move(out), {a, b}, "matmul",
        [a, b, M, N, K](Tensor<T>& node) {
            node.backward_fn = [&node, a, b, M, N, K] {
                if (a->requires_grad) {
                    a->ensure_grad();
                    auto bt = transposed(K, N, b->data.data());
                    gemm_nn(M, K, N, node.grad.data(), bt.data(), a->grad.data(), true);
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    auto at = transposed(M, K, a->data.data());
                    gemm_nn(K, N, M, at.data(), node.grad.data(), b->grad.data(), true);
                }
            };
        });
}

template <typename T>
Ptr<T> transpose(const Ptr<T>& a) {
    if (a->ndim() != 2) throw dim_error("transpose: expects 2-D, got " + shape_str(a->shape));
    const std::size_t M = static_cast<std::size_t>(a->dim(0));
    const std::size_t N = static_cast<std::size_t>(a->dim(1));
    std::vector<T> out(M * N);
    pack_transpose(M, N, a->data.data(), out.data());
    return make_op_result<T>(
        {static_cast<int>(N), static_cast<int>(M)}, std::move(out), {a}, "transpose",
        [a, M, N](Tensor<T>& node) {
            node.backward_fn = [&node, a, M, N] {
                a->ensure_grad();
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < N; ++j) a->grad[i * N + j] += node.grad[j * M + i];
            };
        });
}

template <typename T>
Ptr<T> reshape(const Ptr<T>& a, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != a->numel()) {
        throw dim_error("reshape: cannot view " + shape_str(a->shape) + " as " +
                        shape_str(new_shape));
    }
    std::vector<T> out = a->data;
    return make_op_result<T>(
        std::move(new_shape), std::move(out), {a}, "reshape", [a](Tensor<T>& node) {
            node.backward_fn = [&node, a] { accumulate_grad(a, node.grad); };
        });
}

template <typename T>
Ptr<T> sum_all(const Ptr<T>& a) {
    T s = T(0);
    for (const T& v : a->data) s += v;
    return make_op_result<T>(
        {1}, {s}, {a}, "sum_all", [a](Tensor<T>& node) {
            node.backward_fn = [&node, a] {
                a->ensure_grad();
                const T g = node.grad[0];
                for (auto& v : a->grad) v += g;
            };
        });
}

template <typename T>
Ptr<T> mean_all(const Ptr<T>& a) {
    const T inv = T(1) / static_cast<T>(a->numel());
    T s = T(0);
    for (const T& v : a->data) s += v;
    s *= inv;
    return make_op_result<T>(
        {1}, {s}, {a}, "mean_all", [a, inv](Tensor<T>& node) {
            node.backward_fn = [&node, a, inv] {
                a->ensure_grad();
                const T g = node.grad[0] * inv;
                for (auto& v : a->grad) v += g;
            };
        });
}

// y = x * W + b where x is (..., K) and W is stored (K, O) row-major.
template <typename T>
Ptr<T> linear(const Ptr<T>& x, const Ptr<T>& w, const Ptr<T>& b) {
    if (w->ndim() != 2) throw dim_error("linear: weight must be 2-D, got " + shape_str(w->shape));
    const std::size_t K = static_cast<std::size_t>(w->dim(0));
    const std::size_t O = static_cast<std::size_t>(w->dim(1));
    if (x->ndim() < 1 || static_cast<std::size_t>(x->shape.back()) != K) {
        throw dim_error("linear: input last axis " + shape_str(x->shape) +
                        " does not match weight in-dim " + std::to_string(K));
    }
    if (b && b->numel() != O) {
        throw dim_error("linear: bias length " + std::to_string(b->numel()) + " vs out-dim " +
                        std::to_string(O));
    }
    const std::size_t M = x->numel() / K;
    std::vector<T> out(M * O);
    gemm_nn(M, O, K, x->data.data(), w->data.data(), out.data());
    if (b) {
        for (std::size_t i = 0; i < M; ++i) {
            T* row = out.data() + i * O;
            for (std::size_t j = 0; j < O; ++j) row[j] += b->data[j];
        }
    }
    std::vector<int> out_shape = x->shape;
    out_shape.back() = static_cast<int>(O);
    std::vector<Ptr<T>> parents = b ? std::vector<Ptr<T>>{x, w, b} : std::vector<Ptr<T>>{x, w};
    return make_op_result<T>(
        std::move(out_shape), std::move(out), std::move(parents), "linear",
        [x, w, b, M, K, O](Tensor<T>& node) {
            node.backward_fn = [&node, x, w, b, M, K, O] {
                if (x->requires_grad) {
                    x->ensure_grad();
                    auto wt = transposed(K, O, w->data.data());
                    gemm_nn(M, K, O, node.grad.data(), wt.data(), x->grad.data(), true);
                }
                if (w->requires_grad) {
                    w->ensure_grad();
                    auto xt = transposed(M, K, x->data.data());
                    gemm_nn(K, O, M, xt.data(), node.grad.data(), w->grad.data(), true);
                }
                if (b && b->requires_grad) {
                    b->ensure_grad();
                    for (std::size_t i = 0; i < M; ++i) {
                        const T* g = node.grad.data() + i * O;
                        for (std::size_t j = 0; j < O; ++j) b->grad[j] += g[j];
                    }
                }
            };
        });
}

// x * Phi(x), exact-erf form. cdf/pdf are cached for the backward pass.
template <typename T>
Ptr<T> gelu(const Ptr<T>& x) {
    const std::size_t n = x->numel();
    std::vector<T> out(n);
    auto cdf = std::make_shared<std::vector<T>>(n);
    auto pdf = std::make_shared<std::vector<T>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        T c, p;
        detail::gelu_cdf_pdf(x->data[i], c, p);
        (*cdf)[i] = c;
        (*pdf)[i] = p;
        out[i] = x->data[i] * c;
    }
    return make_op_result<T>(
        x->shape, std::move(out), {x}, "gelu", [x, cdf, pdf](Tensor<T>& node) {
            node.backward_fn = [&node, x, cdf, pdf] {
                x->ensure_grad();
                for (std::size_t i = 0; i < node.grad.size(); ++i) {
                    x->grad[i] += node.grad[i] * ((*cdf)[i] + x->data[i] * (*pdf)[i]);
                }
            };
        });
}

// Max-subtracted softmax along an arbitrary axis.
template <typename T>
Ptr<T> softmax(const Ptr<T>& x, int axis) {
    if (axis < 0) axis += x->ndim();
    if (axis < 0 || axis >= x->ndim()) {
        throw dim_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                        shape_str(x->shape));
    }
    const std::size_t n = static_cast<std::size_t>(x->dim(axis));
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x->dim(i));
    for (int i = axis + 1; i < x->ndim(); ++i) inner *= static_cast<std::size_t>(x->dim(i));

    std::vector<T> out(x->numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = x->data[base];
            for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x->data[base + k * inner]);
            T denom = T(0);
            for (std::size_t k = 0; k < n; ++k) {
                const T e = std::exp(x->data[base + k * inner] - mx);
                out[base + k * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::size_t k = 0; k < n; ++k) out[base + k * inner] *= inv;
        }
    }
    return make_op_result<T>(
        x->shape, std::move(out), {x}, "softmax", [x, outer, inner, n](Tensor<T>& node) {
            node.backward_fn = [&node, x, outer, inner, n] {
                x->ensure_grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t in = 0; in < inner; ++in) {
                        const std::size_t base = o * n * inner + in;
                        T dot = T(0);
                        for (std::size_t k = 0; k < n; ++k) {
                            const std::size_t idx = base + k * inner;
                            dot += node.grad[idx] * node.data[idx];
                        }
                        for (std::size_t k = 0; k < n; ++k) {
                            const std::size_t idx = base + k * inner;
                            x->grad[idx] += node.data[idx] * (node.grad[idx] - dot);
                        }
                    }
                }
            };
        });
}

namespace detail {

// Shared layer-norm row kernel: `blocks` batches of `rows` rows, each row C
// elements spaced `stride` apart (stride 1 = channels-last, stride HW = NCHW).
template <typename T>
Ptr<T> layer_norm_rows(const Ptr<T>& x, const Ptr<T>& gamma, const Ptr<T>& beta, T eps,
                       std::size_t rows, std::size_t C, std::size_t stride, std::size_t blocks,
                       const char* name) {
    if (gamma->numel() != C || beta->numel() != C) {
        throw dim_error(std::string(name) + ": gamma/beta length " +
                        std::to_string(gamma->numel()) + " vs channel axis " + std::to_string(C));
    }
    const std::size_t n = x->numel();
    std::vector<T> out(n);
    auto inv_std = std::make_shared<std::vector<T>>(rows * blocks);
    auto xhat = std::make_shared<std::vector<T>>(n);
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t start =
                stride == 1 ? (blk * rows + r) * C : blk * C * stride + r;
            T mean = T(0);
            for (std::size_t c = 0; c < C; ++c) mean += x->data[start + c * stride];
            mean /= static_cast<T>(C);
            T var = T(0);
            for (std::size_t c = 0; c < C; ++c) {
                const T d = x->data[start + c * stride] - mean;
                var += d * d;
            }
            var /= static_cast<T>(C);
            const T is = T(1) / std::sqrt(var + eps);
            (*inv_std)[blk * rows + r] = is;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t idx = start + c * stride;
                const T xh = (x->data[idx] - mean) * is;
                (*xhat)[idx] = xh;
                out[idx] = xh * gamma->data[c] + beta->data[c];
            }
        }
    }
    return make_op_result<T>(
        x->shape, std::move(out), {x, gamma, beta}, name,
        [x, gamma, beta, rows, C, stride, blocks, inv_std, xhat](Tensor<T>& node) {
            node.backward_fn = [&node, x, gamma, beta, rows, C, stride, blocks, inv_std, xhat] {
                const bool gx = x->requires_grad;
                if (gx) x->ensure_grad();
                if (gamma->requires_grad) gamma->ensure_grad();
                if (beta->requires_grad) beta->ensure_grad();
                for (std::size_t blk = 0; blk < blocks; ++blk) {
                    for (std::size_t r = 0; r < rows; ++r) {
                        const std::size_t start =
                            stride == 1 ? (blk * rows + r) * C : blk * C * stride + r;
                        const T is = (*inv_std)[blk * rows + r];
                        T sum_g = T(0), sum_gx = T(0);
                        for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t idx = start + c * stride;
                            const T gy = node.grad[idx] * gamma->data[c];
                            sum_g += gy;
                            sum_gx += gy * (*xhat)[idx];
                            if (gamma->requires_grad)
                                gamma->grad[c] += node.grad[idx] * (*xhat)[idx];
                            if (beta->requires_grad) beta->grad[c] += node.grad[idx];
                        }
                        if (!gx) continue;
                        const T invC = T(1) / static_cast<T>(C);
                        for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t idx = start + c * stride;
                            const T gy = node.grad[idx] * gamma->data[c];
                            x->grad[idx] +=
                                is * (gy - invC * sum_g - (*xhat)[idx] * invC * sum_gx);
                        }
                    }
                }
            };
        });
}

}  // namespace detail

// Normalizes over the last axis; x is (..., C).
template <typename T>
Ptr<T> layer_norm_lastdim(const Ptr<T>& x, const Ptr<T>& gamma, const Ptr<T>& beta,
                          T eps = T(1e-6)) {
    if (x->ndim() < 1) throw dim_error("layer_norm: scalar input");
    const std::size_t C = static_cast<std::size_t>(x->shape.back());
    const std::size_t rows = x->numel() / C;
    return detail::layer_norm_rows(x, gamma, beta, eps, rows, C, 1, 1, "layer_norm");
}

// Normalizes over the channel axis of an NCHW tensor, per spatial position.
template <typename T>
Ptr<T> layer_norm_nchw(const Ptr<T>& x, const Ptr<T>& gamma, const Ptr<T>& beta,
                       T eps = T(1e-6)) {
    if (x->ndim() != 4) throw dim_error("layer_norm_nchw: expects NCHW, got " + shape_str(x->shape));
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t C = static_cast<std::size_t>(x->dim(1));
    const std::size_t HW = static_cast<std::size_t>(x->dim(2)) * static_cast<std::size_t>(x->dim(3));
    return detail::layer_norm_rows(x, gamma, beta, eps, HW, C, HW, N, "layer_norm_nchw");
}

// (N,C,H,W) -> (N, H*W, C)
template <typename T>
Ptr<T> nchw_to_nlc(const Ptr<T>& x) {
    if (x->ndim() != 4) throw dim_error("nchw_to_nlc: expects NCHW, got " + shape_str(x->shape));
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t C = static_cast<std::size_t>(x->dim(1));
    const std::size_t HW = static_cast<std::size_t>(x->dim(2)) * static_cast<std::size_t>(x->dim(3));
    std::vector<T> out(x->numel());
    for (std::size_t n = 0; n < N; ++n) {
        const T* src = x->data.data() + n * C * HW;
        T* dst = out.data() + n * HW * C;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < HW; ++l) dst[l * C + c] = src[c * HW + l];
    }
    return make_op_result<T>(
        {static_cast<int>(N), static_cast<int>(HW), static_cast<int>(C)}, std::move(out), {x},
        "nchw_to_nlc", [x, N, C, HW](Tensor<T>& node) {
            node.backward_fn = [&node, x, N, C, HW] {
                x->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    const T* g = node.grad.data() + n * HW * C;
                    T* dst = x->grad.data() + n * C * HW;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t l = 0; l < HW; ++l) dst[c * HW + l] += g[l * C + c];
                }
            };
        });
}

// (N, L, C) -> (N, C, H, W) with L == H*W
template <typename T>
Ptr<T> nlc_to_nchw(const Ptr<T>& x, int H, int W) {
    if (x->ndim() != 3 || x->dim(1) != H * W) {
        throw dim_error("nlc_to_nchw: input " + shape_str(x->shape) + " vs spatial " +
                        std::to_string(H) + "x" + std::to_string(W));
    }
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t C = static_cast<std::size_t>(x->dim(2));
    const std::size_t HW = static_cast<std::size_t>(H) * static_cast<std::size_t>(W);
    std::vector<T> out(x->numel());
    for (std::size_t n = 0; n < N; ++n) {
        const T* src = x->data.data() + n * HW * C;
        T* dst = out.data() + n * C * HW;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < HW; ++l) dst[c * HW + l] = src[l * C + c];
    }
    return make_op_result<T>(
        {static_cast<int>(N), static_cast<int>(C), H, W}, std::move(out), {x}, "nlc_to_nchw",
        [x, N, C, HW](Tensor<T>& node) {
            node.backward_fn = [&node, x, N, C, HW] {
                x->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    const T* g = node.grad.data() + n * C * HW;
                    T* dst = x->grad.data() + n * HW * C;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t l = 0; l < HW; ++l) dst[l * C + c] += g[c * HW + l];
                }
            };
        });
}

// (N,C,H,W) -> (N,C), mean over spatial positions
template <typename T>
Ptr<T> global_avg_pool(const Ptr<T>& x) {
    if (x->ndim() != 4) throw dim_error("global_avg_pool: expects NCHW, got " + shape_str(x->shape));
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t C = static_cast<std::size_t>(x->dim(1));
    const std::size_t HW = static_cast<std::size_t>(x->dim(2)) * static_cast<std::size_t>(x->dim(3));
    std::vector<T> out(N * C);
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = x->data.data() + (n * C + c) * HW;
            T s = T(0);
            for (std::size_t l = 0; l < HW; ++l) s += src[l];
            out[n * C + c] = s * inv;
        }
    return make_op_result<T>(
        {static_cast<int>(N), static_cast<int>(C)}, std::move(out), {x}, "global_avg_pool",
        [x, N, C, HW, inv](Tensor<T>& node) {
            node.backward_fn = [&node, x, N, C, HW, inv] {
                x->ensure_grad();
                for (std::size_t nc = 0; nc < N * C; ++nc) {
                    const T g = node.grad[nc] * inv;
                    T* dst = x->grad.data() + nc * HW;
                    for (std::size_t l = 0; l < HW; ++l) dst[l] += g;
                }
            };
        });
}

// Global response normalization over a channels-last (N, L, C) tensor:
// per-channel spatial L2 norm, divided by the per-sample mean norm, applied
// as a gated residual. gamma = beta = 0 is the identity.
template <typename T>
Ptr<T> grn_nlc(const Ptr<T>& x, const Ptr<T>& gamma, const Ptr<T>& beta, T eps = T(1e-6)) {
    if (x->ndim() != 3) throw dim_error("grn: expects (N,L,C), got " + shape_str(x->shape));
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t L = static_cast<std::size_t>(x->dim(1));
    const std::size_t C = static_cast<std::size_t>(x->dim(2));
    if (gamma->numel() != C || beta->numel() != C) {
        throw dim_error("grn: gamma/beta length " + std::to_string(gamma->numel()) +
                        " vs channels " + std::to_string(C));
    }
    auto gx = std::make_shared<std::vector<T>>(N * C);   // per-channel L2 norm
    auto nx = std::make_shared<std::vector<T>>(N * C);   // normalized response
    auto msum = std::make_shared<std::vector<T>>(N);     // mean norm + eps
    std::vector<T> out(x->numel());
    for (std::size_t n = 0; n < N; ++n) {
        T mean_norm = T(0);
        for (std::size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (std::size_t l = 0; l < L; ++l) {
                const T v = x->data[(n * L + l) * C + c];
                s += v * v;
            }
            const T g = std::sqrt(s);
            (*gx)[n * C + c] = g;
            mean_norm += g;
        }
        mean_norm = mean_norm / static_cast<T>(C) + eps;
        (*msum)[n] = mean_norm;
        for (std::size_t c = 0; c < C; ++c) (*nx)[n * C + c] = (*gx)[n * C + c] / mean_norm;
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t base = (n * L + l) * C;
            for (std::size_t c = 0; c < C; ++c) {
                const T v = x->data[base + c];
                out[base + c] = gamma->data[c] * (v * (*nx)[n * C + c]) + beta->data[c] + v;
            }
        }
    }
    return make_op_result<T>(
        x->shape, std::move(out), {x, gamma, beta}, "grn",
        [x, gamma, beta, N, L, C, gx, nx, msum](Tensor<T>& node) {
            node.backward_fn = [&node, x, gamma, beta, N, L, C, gx, nx, msum] {
                if (x->requires_grad) x->ensure_grad();
                if (gamma->requires_grad) gamma->ensure_grad();
                if (beta->requires_grad) beta->ensure_grad();
                std::vector<T> a(C);  // per-channel sum of gamma*g*x
                for (std::size_t n = 0; n < N; ++n) {
                    const T m = (*msum)[n];
                    for (std::size_t c = 0; c < C; ++c) a[c] = T(0);
                    for (std::size_t l = 0; l < L; ++l) {
                        const std::size_t base = (n * L + l) * C;
                        for (std::size_t c = 0; c < C; ++c) {
                            const T g = node.grad[base + c];
                            a[c] += gamma->data[c] * g * x->data[base + c];
                            if (gamma->requires_grad)
                                gamma->grad[c] += g * x->data[base + c] * (*nx)[n * C + c];
                            if (beta->requires_grad) beta->grad[c] += g;
                        }
                    }
                    if (!x->requires_grad) continue;
                    T dot_ag = T(0);
                    for (std::size_t c = 0; c < C; ++c) dot_ag += a[c] * (*gx)[n * C + c];
                    const T m2c = dot_ag / (static_cast<T>(C) * m * m);
                    for (std::size_t l = 0; l < L; ++l) {
                        const std::size_t base = (n * L + l) * C;
                        for (std::size_t c = 0; c < C; ++c) {
                            const T g = node.grad[base + c];
                            const T gnorm = (*gx)[n * C + c];
                            T via_norm = T(0);
                            if (gnorm > T(0)) {
                                via_norm = (a[c] / m - m2c) * x->data[base + c] / gnorm;
                            }
                            x->grad[base + c] +=
                                g * (T(1) + gamma->data[c] * (*nx)[n * C + c]) + via_norm;
                        }
                    }
                }
            };
        });
}

// GRN on an NCHW tensor, routed through the channels-last kernel.
template <typename T>
Ptr<T> grn(const Ptr<T>& x, const Ptr<T>& gamma, const Ptr<T>& beta, T eps = T(1e-6)) {
    if (x->ndim() != 4) throw dim_error("grn: expects NCHW, got " + shape_str(x->shape));
    auto t = nchw_to_nlc(x);
    auto y = grn_nlc(t, gamma, beta, eps);
    return nlc_to_nchw(y, x->dim(2), x->dim(3));
}

// Zero an NCHW tensor at spatial positions where vis is 0 (broadcast over
// channels). Gated positions pass no gradient, which is what makes the
// zero-fill sparse-conv semantics hold.
template <typename T>
Ptr<T> mask_spatial(const Ptr<T>& x, std::shared_ptr<const std::vector<std::uint8_t>> vis) {
    if (x->ndim() != 4) throw dim_error("mask_spatial: expects NCHW, got " + shape_str(x->shape));
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t C = static_cast<std::size_t>(x->dim(1));
    const std::size_t HW = static_cast<std::size_t>(x->dim(2)) * x->dim(3);
    if (vis->size() != N * HW) {
        throw dim_error("mask_spatial: mask length " + std::to_string(vis->size()) +
                        " != N*H*W " + std::to_string(N * HW));
    }
    std::vector<T> out(x->numel());
    for (std::size_t n = 0; n < N; ++n) {
        const std::uint8_t* vn = vis->data() + n * HW;
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = x->data.data() + (n * C + c) * HW;
            T* dst = out.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) dst[i] = vn[i] ? src[i] : T(0);
        }
    }
    return make_op_result<T>(
        x->shape, std::move(out), {x}, "mask_spatial", [x, vis, N, C, HW](Tensor<T>& node) {
            node.backward_fn = [&node, x, vis, N, C, HW] {
                x->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    const std::uint8_t* vn = vis->data() + n * HW;
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* g = node.grad.data() + (n * C + c) * HW;
                        T* dx = x->grad.data() + (n * C + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i)
                            if (vn[i]) dx[i] += g[i];
                    }
                }
            };
        });
}

// Replace masked spatial positions with a learned per-channel token vector.
template <typename T>
Ptr<T> mask_token_fill(const Ptr<T>& x, const Ptr<T>& token,
                       std::shared_ptr<const std::vector<std::uint8_t>> vis) {
    if (x->ndim() != 4) throw dim_error("mask_token_fill: expects NCHW, got " + shape_str(x->shape));
    const std::size_t N = static_cast<std::size_t>(x->dim(0));
    const std::size_t C = static_cast<std::size_t>(x->dim(1));
    const std::size_t HW = static_cast<std::size_t>(x->dim(2)) * x->dim(3);
    if (token->numel() != C) {
        throw dim_error("mask_token_fill: token length " + std::to_string(token->numel()) +
                        " != channels " + std::to_string(C));
    }
    if (vis->size() != N * HW) {
        throw dim_error("mask_token_fill: mask length " + std::to_string(vis->size()) +
                        " != N*H*W " + std::to_string(N * HW));
    }
    std::vector<T> out(x->numel());
    for (std::size_t n = 0; n < N; ++n) {
        const std::uint8_t* vn = vis->data() + n * HW;
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = x->data.data() + (n * C + c) * HW;
            const T tk = token->data[c];
            T* dst = out.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) dst[i] = vn[i] ? src[i] : tk;
        }
    }
    return make_op_result<T>(
        x->shape, std::move(out), {x, token}, "mask_token_fill",
        [x, token, vis, N, C, HW](Tensor<T>& node) {
            node.backward_fn = [&node, x, token, vis, N, C, HW] {
                if (x->requires_grad) x->ensure_grad();
                if (token->requires_grad) token->ensure_grad();
                for (std::size_t n = 0; n < N; ++n) {
                    const std::uint8_t* vn = vis->data() + n * HW;
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* g = node.grad.data() + (n * C + c) * HW;
                        T* dx = x->requires_grad ? x->grad.data() + (n * C + c) * HW : nullptr;
                        T tsum = T(0);
                        for (std::size_t i = 0; i < HW; ++i) {
                            if (vn[i]) {
                                if (dx) dx[i] += g[i];
                            } else {
                                tsum += g[i];
                            }
                        }
                        if (token->requires_grad) token->grad[c] += tsum;
                    }
                }
            };
        });
}

}  // namespace mednvc
