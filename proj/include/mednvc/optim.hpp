#pragma once

// Lion optimizer: sign of the beta1-interpolated momentum drives the update,
// momentum itself decays with beta2. Defaults follow the reference
// implementation (beta1 0.9, beta2 0.99, no decoupled weight decay).

#include <cmath>
#include <cstdint>
#include <vector>

#include "mednvc/errors.hpp"
#include "mednvc/params.hpp"

namespace mednvc {

template <typename T>
struct LionConfig {
    T beta1 = T(0.9);
    T beta2 = T(0.99);
    T weight_decay = T(0);
};

template <typename T>
class Lion {
public:
    explicit Lion(const ParamSet<T>& params, LionConfig<T> cfg = {}) : cfg_(cfg) {
        m_.reserve(params.size());
        for (const auto& [name, p] : params) m_.emplace_back(p->numel(), T(0));
    }

    // Missing grads (param never touched by the loss) count as zero.
    void step(const ParamSet<T>& params, T lr) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& [name, p] = params.at(i);
            std::vector<T>& m = m_[i];
            const bool has_grad = p->grad.size() == p->data.size();
            for (std::size_t j = 0; j < p->data.size(); ++j) {
                const T g = has_grad ? p->grad[j] : T(0);
                if (!std::isfinite(static_cast<double>(g))) {
                    throw train_error("lion_step: non-finite gradient in " + name);
                }
                const T c = cfg_.beta1 * m[j] + (T(1) - cfg_.beta1) * g;
                const T update = (c > T(0)) ? T(1) : (c < T(0) ? T(-1) : T(0));
                p->data[j] -= lr * (update + cfg_.weight_decay * p->data[j]);
                m[j] = cfg_.beta2 * m[j] + (T(1) - cfg_.beta2) * g;
            }
        }
        ++step_count_;
    }

    std::uint64_t step_count() const { return step_count_; }
    const LionConfig<T>& config() const { return cfg_; }

private:
    LionConfig<T> cfg_;
    std::vector<std::vector<T>> m_;
    std::uint64_t step_count_ = 0;
};

}  // namespace mednvc
