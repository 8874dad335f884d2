#pragma once

// Fused scaled dot-product attention over (N, L, C) tensors. Queries and
// keys/values may have different sequence lengths; heads split the channel
// axis. Softmax rows can be exported for inspection.

#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "mednvc/gemm.hpp"
#include "mednvc/tensor.hpp"

namespace mednvc {

namespace detail {

// Gather one head slice: dst(L x d) from src(N,L,C) at sample n, head h.
template <typename T>
void pack_head(const T* src, int L, int C, int h, int d, T* dst) {
    for (int i = 0; i < L; ++i) {
        const T* s = src + static_cast<std::size_t>(i) * C + h * d;
        T* o = dst + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) o[j] = s[j];
    }
}

template <typename T>
void scatter_head_add(const T* src, int L, int C, int h, int d, T* dst) {
    for (int i = 0; i < L; ++i) {
        const T* s = src + static_cast<std::size_t>(i) * d;
        T* o = dst + static_cast<std::size_t>(i) * C + h * d;
        for (int j = 0; j < d; ++j) o[j] += s[j];
    }
}

}  // namespace detail

// out(N,Lq,C) = softmax(Q K^T / sqrt(C/heads)) V per head. When probs_out is
// given it receives the softmax rows laid out (N, heads, Lq, Lk).
template <typename T>
Ptr<T> attention(const Ptr<T>& q, const Ptr<T>& k, const Ptr<T>& v, int heads,
                 std::vector<T>* probs_out = nullptr) {
    if (q->ndim() != 3 || k->ndim() != 3 || v->ndim() != 3) {
        throw dim_error("attention: q/k/v must be (N,L,C), got " + shape_str(q->shape) + ", " +
                        shape_str(k->shape) + ", " + shape_str(v->shape));
    }
    const int N = q->dim(0), Lq = q->dim(1), C = q->dim(2);
    const int Lk = k->dim(1);
    if (k->dim(0) != N || v->dim(0) != N) {
        throw dim_error("attention: batch axes differ: " + shape_str(q->shape) + " vs " +
                        shape_str(k->shape) + " vs " + shape_str(v->shape));
    }
    if (k->dim(2) != C || v->dim(2) != C) {
        throw dim_error("attention: channel axes differ: q has " + std::to_string(C) +
                        ", k has " + std::to_string(k->dim(2)) + ", v has " +
                        std::to_string(v->dim(2)));
    }
    if (v->dim(1) != Lk) {
        throw dim_error("attention: key/value lengths differ: " + std::to_string(Lk) + " vs " +
                        std::to_string(v->dim(1)));
    }
    if (heads < 1 || C % heads != 0) {
        throw dim_error("attention: channels " + std::to_string(C) +
                        " not divisible by heads " + std::to_string(heads));
    }
    const int d = C / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));

    const std::size_t probs_n = static_cast<std::size_t>(N) * heads * Lq * Lk;
    auto probs = std::make_shared<std::vector<T>>(probs_n);
    std::vector<T> out(static_cast<std::size_t>(N) * Lq * C, T(0));

    std::vector<T> Qh(static_cast<std::size_t>(Lq) * d);
    std::vector<T> Kh(static_cast<std::size_t>(Lk) * d);
    std::vector<T> Vh(static_cast<std::size_t>(Lk) * d);
    std::vector<T> KhT(static_cast<std::size_t>(d) * Lk);
    std::vector<T> ctx(static_cast<std::size_t>(Lq) * d);
    for (int n = 0; n < N; ++n) {
        const T* qn = q->data.data() + static_cast<std::size_t>(n) * Lq * C;
        const T* kn = k->data.data() + static_cast<std::size_t>(n) * Lk * C;
        const T* vn = v->data.data() + static_cast<std::size_t>(n) * Lk * C;
        for (int h = 0; h < heads; ++h) {
            detail::pack_head(qn, Lq, C, h, d, Qh.data());
            detail::pack_head(kn, Lk, C, h, d, Kh.data());
            detail::pack_head(vn, Lk, C, h, d, Vh.data());
            pack_transpose(static_cast<std::size_t>(Lk), static_cast<std::size_t>(d), Kh.data(),
                           KhT.data());
            T* P = probs->data() + (static_cast<std::size_t>(n) * heads + h) * Lq * Lk;
            gemm_nn(static_cast<std::size_t>(Lq), static_cast<std::size_t>(Lk),
                    static_cast<std::size_t>(d), Qh.data(), KhT.data(), P);
            for (int i = 0; i < Lq; ++i) {
                T* row = P + static_cast<std::size_t>(i) * Lk;
                T mx = row[0] * scale;
                for (int j = 0; j < Lk; ++j) {
                    row[j] *= scale;
                    if (row[j] > mx) mx = row[j];
                }
                T s = T(0);
                for (int j = 0; j < Lk; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    s += row[j];
                }
                const T inv = T(1) / s;
                for (int j = 0; j < Lk; ++j) row[j] *= inv;
            }
            gemm_nn(static_cast<std::size_t>(Lq), static_cast<std::size_t>(d),
                    static_cast<std::size_t>(Lk), P, Vh.data(), ctx.data());
            detail::scatter_head_add(ctx.data(), Lq, C, h, d,
                                     out.data() + static_cast<std::size_t>(n) * Lq * C);
        }
    }
    if (probs_out) *probs_out = *probs;

    return make_op_result<T>(
        {N, Lq, C}, std::move(out), {q, k, v}, "attention",
        [q, k, v, heads, N, Lq, Lk, C, d, scale, probs](Tensor<T>& node) {
            node.backward_fn = [&node, q, k, v, heads, N, Lq, Lk, C, d, scale, probs] {
                if (q->requires_grad) q->ensure_grad();
                if (k->requires_grad) k->ensure_grad();
                if (v->requires_grad) v->ensure_grad();
                std::vector<T> Qh(static_cast<std::size_t>(Lq) * d);
                std::vector<T> Kh(static_cast<std::size_t>(Lk) * d);
                std::vector<T> Vh(static_cast<std::size_t>(Lk) * d);
                std::vector<T> VhT(static_cast<std::size_t>(d) * Lk);
                std::vector<T> dctx(static_cast<std::size_t>(Lq) * d);
                std::vector<T> PT(static_cast<std::size_t>(Lk) * Lq);
                std::vector<T> dV(static_cast<std::size_t>(Lk) * d);
                std::vector<T> dP(static_cast<std::size_t>(Lq) * Lk);
                std::vector<T> dS(static_cast<std::size_t>(Lq) * Lk);
                std::vector<T> dST(static_cast<std::size_t>(Lk) * Lq);
                std::vector<T> dQ(static_cast<std::size_t>(Lq) * d);
                std::vector<T> dK(static_cast<std::size_t>(Lk) * d);
                for (int n = 0; n < N; ++n) {
                    const T* qn = q->data.data() + static_cast<std::size_t>(n) * Lq * C;
                    const T* kn = k->data.data() + static_cast<std::size_t>(n) * Lk * C;
                    const T* vn = v->data.data() + static_cast<std::size_t>(n) * Lk * C;
                    const T* gn = node.grad.data() + static_cast<std::size_t>(n) * Lq * C;
                    for (int h = 0; h < heads; ++h) {
                        detail::pack_head(qn, Lq, C, h, d, Qh.data());
                        detail::pack_head(kn, Lk, C, h, d, Kh.data());
                        detail::pack_head(vn, Lk, C, h, d, Vh.data());
                        detail::pack_head(gn, Lq, C, h, d, dctx.data());
                        const T* P = probs->data() + (static_cast<std::size_t>(n) * heads + h) * Lq * Lk;
                        if (v->requires_grad) {
                            pack_transpose(static_cast<std::size_t>(Lq),
                                           static_cast<std::size_t>(Lk), P, PT.data());
                            gemm_nn(static_cast<std::size_t>(Lk), static_cast<std::size_t>(d),
                                    static_cast<std::size_t>(Lq), PT.data(), dctx.data(), dV.data());
                            detail::scatter_head_add(
                                dV.data(), Lk, C, h, d,
                                v->grad.data() + static_cast<std::size_t>(n) * Lk * C);
                        }
                        if (!q->requires_grad && !k->requires_grad) continue;
                        pack_transpose(static_cast<std::size_t>(Lk), static_cast<std::size_t>(d),
                                       Vh.data(), VhT.data());
                        gemm_nn(static_cast<std::size_t>(Lq), static_cast<std::size_t>(Lk),
                                static_cast<std::size_t>(d), dctx.data(), VhT.data(), dP.data());
                        for (int i = 0; i < Lq; ++i) {
                            const T* prow = P + static_cast<std::size_t>(i) * Lk;
                            const T* dprow = dP.data() + static_cast<std::size_t>(i) * Lk;
                            T* dsrow = dS.data() + static_cast<std::size_t>(i) * Lk;
                            T dot = T(0);
                            for (int j = 0; j < Lk; ++j) dot += dprow[j] * prow[j];
                            for (int j = 0; j < Lk; ++j)
                                dsrow[j] = prow[j] * (dprow[j] - dot) * scale;
                        }
                        if (q->requires_grad) {
                            gemm_nn(static_cast<std::size_t>(Lq), static_cast<std::size_t>(d),
                                    static_cast<std::size_t>(Lk), dS.data(), Kh.data(), dQ.data());
                            detail::scatter_head_add(
                                dQ.data(), Lq, C, h, d,
                                q->grad.data() + static_cast<std::size_t>(n) * Lq * C);
                        }
                        if (k->requires_grad) {
                            pack_transpose(static_cast<std::size_t>(Lq),
                                           static_cast<std::size_t>(Lk), dS.data(), dST.data());
                            gemm_nn(static_cast<std::size_t>(Lk), static_cast<std::size_t>(d),
                                    static_cast<std::size_t>(Lq), dST.data(), Qh.data(), dK.data());
                            detail::scatter_head_add(
                                dK.data(), Lk, C, h, d,
                                k->grad.data() + static_cast<std::size_t>(n) * Lk * C);
                        }
                    }
                }
            };
        });
}

}  // namespace mednvc
