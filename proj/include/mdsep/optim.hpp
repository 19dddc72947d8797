#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdsep/tensor.hpp"

namespace mdsep {

// SGD with classical momentum and L2 weight decay folded into the gradient:
//   v <- momentum * v + grad + wd * param
//   param <- param - lr * v
// Learning rate follows a step schedule: divide by decay_factor at each epoch
// listed in decay_epochs.

struct OptimConfig {
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t epochs = 1;
    std::vector<std::size_t> decay_epochs;
    double decay_factor = 10.0;
    std::size_t batch_size = 64;

    void validate() const {
        if (lr0 <= 0) throw ConfigError("optim: lr0 must be > 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("optim: momentum must be in [0,1)");
        if (batch_size == 0) throw ConfigError("optim: batch_size must be >= 1");
        for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
            if (decay_epochs[i] >= epochs)
                throw ConfigError("optim: decay epoch beyond training length");
            if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
                throw ConfigError("optim: decay_epochs must be strictly increasing");
        }
    }
};

// Training schedules as reported for the reference experiments, plus shrunk
// desk-scale counterparts used by the synthetic runs.
inline OptimConfig preset_base_pretrain() {
    return OptimConfig{0.1, 0.9, 1e-4, 120, {80, 100}, 10.0, 256};
}
inline OptimConfig preset_domain_finetune(double weight_decay = 1e-4) {
    return OptimConfig{0.1, 0.9, weight_decay, 100, {60, 80}, 10.0, 256};
}
inline OptimConfig preset_gate_training() {
    return OptimConfig{0.1, 0.9, 1e-4, 10, {5}, 10.0, 256};
}
inline OptimConfig preset_desk_pretrain() {
    return OptimConfig{0.05, 0.9, 1e-4, 20, {12, 17}, 10.0, 64};
}
inline OptimConfig preset_desk_finetune(double weight_decay = 1e-4) {
    return OptimConfig{0.02, 0.9, weight_decay, 15, {9, 13}, 10.0, 64};
}
inline OptimConfig preset_desk_gate() {
    return OptimConfig{0.02, 0.9, 0.0, 10, {5}, 10.0, 64};
}

inline double lr_at(const OptimConfig& cfg, std::size_t epoch) {
    if (epoch >= cfg.epochs) throw ConfigError("lr_at: epoch out of range");
    double lr = cfg.lr0;
    for (std::size_t e : cfg.decay_epochs)
        if (e <= epoch) lr /= cfg.decay_factor;
    return lr;
}

// Velocity tensors keyed by parameter name; allocated lazily on first step.
struct MomentumState {
    std::map<std::string, Tensor<float>> velocity;
};

inline void sgd_step(const std::string& name, Tensor<float>& param, const Tensor<float>& grad,
                     MomentumState& state, double lr, double momentum, double weight_decay) {
    if (!param.same_shape(grad)) throw ShapeError("sgd_step: grad shape mismatch for " + name);
    auto it = state.velocity.find(name);
    if (it == state.velocity.end())
        it = state.velocity.emplace(name, Tensor<float>(param.shape(), 0.0f)).first;
    Tensor<float>& v = it->second;
    const float m = static_cast<float>(momentum);
    const float wd = static_cast<float>(weight_decay);
    const float step = static_cast<float>(lr);
    for (std::size_t i = 0; i < param.size(); ++i) {
        v[i] = m * v[i] + grad[i] + wd * param[i];
        param[i] -= step * v[i];
        if (!std::isfinite(param[i])) throw NumericError("sgd_step: non-finite value in " + name);
    }
}

}  // namespace mdsep
