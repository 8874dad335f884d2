#pragma once

// Scalar training losses. Cross-entropy works on raw logits via the
// log-sum-exp trick; the reconstruction loss averages squared error over
// masked grid cells only.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mednvc/tensor.hpp"

namespace mednvc {

// Mean negative log-likelihood of the true class, logits (N, K).
template <typename T>
Ptr<T> ce_loss(const Ptr<T>& logits, const std::vector<int>& labels) {
    if (logits->ndim() != 2) {
        throw dim_error("ce_loss: logits must be (N,K), got " + shape_str(logits->shape));
    }
    const int N = logits->dim(0), K = logits->dim(1);
    if (labels.size() != static_cast<std::size_t>(N)) {
        throw dim_error("ce_loss: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(N) + " rows");
    }
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * K);
    T loss = T(0);
    for (int i = 0; i < N; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= K) {
            throw dim_error("ce_loss: label " + std::to_string(y) + " at row " +
                            std::to_string(i) + " outside [0," + std::to_string(K) + ")");
        }
        const T* row = logits->data.data() + static_cast<std::size_t>(i) * K;
        T mx = row[0];
        for (int j = 1; j < K; ++j)
            if (row[j] > mx) mx = row[j];
        T s = T(0);
        T* prow = probs->data() + static_cast<std::size_t>(i) * K;
        for (int j = 0; j < K; ++j) {
            prow[j] = std::exp(row[j] - mx);
            s += prow[j];
        }
        const T inv = T(1) / s;
        for (int j = 0; j < K; ++j) prow[j] *= inv;
        loss += std::log(s) + mx - row[y];
    }
    loss /= static_cast<T>(N);

    return make_op_result<T>(
        {1}, {loss}, {logits}, "ce_loss", [logits, labels, probs, N, K](Tensor<T>& node) {
            node.backward_fn = [&node, logits, labels, probs, N, K] {
                logits->ensure_grad();
                const T g = node.grad[0] / static_cast<T>(N);
                for (int i = 0; i < N; ++i) {
                    const T* prow = probs->data() + static_cast<std::size_t>(i) * K;
                    T* grow = logits->grad.data() + static_cast<std::size_t>(i) * K;
                    for (int j = 0; j < K; ++j) grow[j] += g * prow[j];
                    grow[labels[static_cast<std::size_t>(i)]] -= g;
                }
            };
        });
}

// Squared error between pred (N, P, GH, GW) and target, averaged over the P
// values of every masked cell and over masked cells. cell_mask is (N, GH, GW)
// with 1 = masked (scored), 0 = visible (skipped).
template <typename T>
Ptr<T> masked_patch_mse(const Ptr<T>& pred, const std::vector<T>& target,
                        const std::vector<std::uint8_t>& cell_mask) {
    if (pred->ndim() != 4) {
        throw dim_error("masked_patch_mse: pred must be (N,P,GH,GW), got " +
                        shape_str(pred->shape));
    }
    const int N = pred->dim(0), P = pred->dim(1);
    const std::size_t G = static_cast<std::size_t>(pred->dim(2)) * pred->dim(3);
    if (target.size() != pred->numel()) {
        throw dim_error("masked_patch_mse: target length " + std::to_string(target.size()) +
                        " != pred numel " + std::to_string(pred->numel()));
    }
    if (cell_mask.size() != static_cast<std::size_t>(N) * G) {
        throw dim_error("masked_patch_mse: mask length " + std::to_string(cell_mask.size()) +
                        " != N*GH*GW " + std::to_string(static_cast<std::size_t>(N) * G));
    }
    std::size_t n_masked = 0;
    for (std::uint8_t m : cell_mask) n_masked += m ? 1 : 0;
    if (n_masked == 0) throw dim_error("masked_patch_mse: mask has no masked cells");

    // double accumulation keeps the reduction stable across large N*P
    double acc = 0.0;
    for (int n = 0; n < N; ++n) {
        const std::uint8_t* mrow = cell_mask.data() + static_cast<std::size_t>(n) * G;
        for (int p = 0; p < P; ++p) {
            const std::size_t base = (static_cast<std::size_t>(n) * P + p) * G;
            for (std::size_t c = 0; c < G; ++c) {
                if (!mrow[c]) continue;
                const double diff = static_cast<double>(pred->data[base + c]) -
                                    static_cast<double>(target[base + c]);
                acc += diff * diff;
            }
        }
    }
    const T denom = static_cast<T>(P) * static_cast<T>(n_masked);
    const T loss = static_cast<T>(acc / static_cast<double>(denom));

    auto targ = std::make_shared<std::vector<T>>(target);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(cell_mask);
    return make_op_result<T>(
        {1}, {loss}, {pred}, "masked_patch_mse",
        [pred, targ, mask, N, P, G, denom](Tensor<T>& node) {
            node.backward_fn = [&node, pred, targ, mask, N, P, G, denom] {
                pred->ensure_grad();
                const T g = node.grad[0] * T(2) / denom;
                for (int n = 0; n < N; ++n) {
                    const std::uint8_t* mrow = mask->data() + static_cast<std::size_t>(n) * G;
                    for (int p = 0; p < P; ++p) {
                        const std::size_t base = (static_cast<std::size_t>(n) * P + p) * G;
                        for (std::size_t c = 0; c < G; ++c) {
                            if (!mrow[c]) continue;
                            pred->grad[base + c] +=
                                g * (pred->data[base + c] - (*targ)[base + c]);
                        }
                    }
                }
            };
        });
}

}  // namespace mednvc
