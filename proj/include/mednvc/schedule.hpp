#pragma once

// Per-epoch learning-rate schedule: linear warmup to the peak, then a cosine
// decay that lands exactly on the floor at the last epoch.

#include <cmath>
#include <stdexcept>
#include <string>

namespace mednvc {

struct LrSchedule {
    int total_epochs = 1;
    int warmup_epochs = 0;
    double peak_lr = 0.0;
    double floor_lr = 0.0;
};

inline void validate(const LrSchedule& s) {
    if (s.total_epochs < 1)
        throw std::invalid_argument("lr schedule: total_epochs must be >= 1, got " +
                                    std::to_string(s.total_epochs));
    if (s.warmup_epochs < 0 || s.warmup_epochs > s.total_epochs)
        throw std::invalid_argument("lr schedule: warmup_epochs " +
                                    std::to_string(s.warmup_epochs) + " outside [0, " +
                                    std::to_string(s.total_epochs) + "]");
    if (s.peak_lr < 0.0 || s.floor_lr < 0.0 || s.floor_lr > s.peak_lr)
        throw std::invalid_argument("lr schedule: need 0 <= floor_lr <= peak_lr");
}

inline double lr_at(const LrSchedule& s, int epoch) {
    if (epoch < 0 || epoch >= s.total_epochs)
        throw std::invalid_argument("lr schedule: epoch " + std::to_string(epoch) +
                                    " outside [0, " + std::to_string(s.total_epochs) + ")");
    if (epoch < s.warmup_epochs)
        return s.peak_lr * (static_cast<double>(epoch + 1) / s.warmup_epochs);
    const int denom = s.total_epochs - s.warmup_epochs - 1;
    // cosine start and the degenerate single post-warmup epoch both sit at the peak
    if (epoch == s.warmup_epochs || denom <= 0) return s.peak_lr;
    const double t = static_cast<double>(epoch - s.warmup_epochs) / denom;
    return s.floor_lr + 0.5 * (s.peak_lr - s.floor_lr) * (1.0 + std::cos(t * 3.14159265358979323846));
}

}  // namespace mednvc
