#pragma once

// AdamW with decoupled weight decay and the warmup + cosine learning-rate
// schedule. Moment state lives in the same precision as the parameters so a
// float run checkpointed and resumed is bit-identical to an uninterrupted one.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "pd/params.hpp"
#include "pd/tensor.hpp"

namespace pd {

struct LrSchedule {
    double base_lr = 1e-3;
    double min_lr = 1e-6;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;
};

// Linear warmup from 0 to base over the first warmup_steps optimizer steps
// (step t takes the fraction (t+1)/warmup), then cosine decay to min_lr.
inline double lr_at(const LrSchedule& s, std::int64_t step) {
    if (s.warmup_steps > 0 && step < s.warmup_steps)
        return s.base_lr * double(step + 1) / double(s.warmup_steps);
    if (step >= s.total_steps) return s.min_lr;
    const double progress = double(step - s.warmup_steps) /
                            double(std::max<std::int64_t>(1, s.total_steps - s.warmup_steps));
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(M_PI * progress));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    std::int64_t step_count() const { return step_; }
    const std::map<std::string, Tensor<T>>& m() const { return m_; }
    const std::map<std::string, Tensor<T>>& v() const { return v_; }

    // Restores optimizer state from a checkpoint blob.
    void restore(std::int64_t step, std::map<std::string, Tensor<T>> m,
                 std::map<std::string, Tensor<T>> v) {
        step_ = step;
        m_ = std::move(m);
        v_ = std::move(v);
    }

    // One decoupled-decay update over every gradient entry whose parameter is
    // trainable. Decay applies only to entries flagged for it.
    void update(ParamStore<T>& store, const GradMap<T>& grads, double lr) {
        ++step_;
        const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2), eps = T(cfg_.eps);
        const T bc1 = T(1.0 - std::pow(cfg_.beta1, double(step_)));
        const T bc2 = T(1.0 - std::pow(cfg_.beta2, double(step_)));
        const T lrt = T(lr);
        for (const auto& [name, g] : grads) {
            auto& e = store.entry(name);
            if (!e.trainable) continue;
            auto& m = state(m_, name, e.value.shape);
            auto& v = state(v_, name, e.value.shape);
            const T wd = e.decay ? T(cfg_.weight_decay) : T(0);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                e.value[i] -= lrt * (mhat / (std::sqrt(vhat) + eps) + wd * e.value[i]);
            }
        }
    }

private:
    AdamWConfig cfg_;
    std::int64_t step_ = 0;
    std::map<std::string, Tensor<T>> m_, v_;

    Tensor<T>& state(std::map<std::string, Tensor<T>>& s, const std::string& name,
                     const Shape& shape) {
        auto it = s.find(name);
        if (it == s.end()) it = s.emplace(name, Tensor<T>::zeros(shape)).first;
        return it->second;
    }
};

}  // namespace pd
