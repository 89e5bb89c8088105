#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "lfinet/params.hpp"

namespace lfinet {

// Adam with bias correction. State is keyed by parameter name so checkpoints
// and resumed runs address the same slots.
template <typename T>
class Adam {
public:
    struct Slot {
        std::vector<T> m, v;
    };

    Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void register_params(const ParamSet<T>& params) {
        for (const auto& p : params.items()) {
            Slot slot;
            slot.m.assign(p.tensor.data().size(), T(0));
            slot.v.assign(p.tensor.data().size(), T(0));
            state_.emplace(p.name, std::move(slot));
        }
    }

    // Applies one update from the gradients currently stored on the params.
    void step(ParamSet<T>& params) {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (auto& p : params.items_mut()) {
            auto it = state_.find(p.name);
            require(it != state_.end(), "adam: no state entry for parameter '", p.name, "'");
            Slot& slot = it->second;
            auto w = p.tensor.data();
            auto g = p.tensor.grad();
            require(slot.m.size() == w.size(), "adam: state size mismatch for '", p.name, "'");
            for (size_t i = 0; i < w.size(); ++i) {
                slot.m[i] = beta1_ * slot.m[i] + (T(1) - beta1_) * g[i];
                slot.v[i] = beta2_ * slot.v[i] + (T(1) - beta2_) * g[i] * g[i];
                const T mhat = slot.m[i] / bc1;
                const T vhat = slot.v[i] / bc2;
                w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    long step_count() const { return t_; }
    T lr() const { return lr_; }

private:
    T lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::unordered_map<std::string, Slot> state_;
};

}  // namespace lfinet
