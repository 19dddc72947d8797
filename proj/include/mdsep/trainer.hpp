#pragma once

#include <string>
#include <vector>

#include "mdsep/data.hpp"
#include "mdsep/model.hpp"
#include "mdsep/optim.hpp"

namespace mdsep {

struct EpochMetrics {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    double accuracy = 0.0;
};

std::string metrics_csv(const std::vector<EpochMetrics>& rows);

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    // largest |sum(scales) - 1| observed across gate evaluations (gate phase)
    double worst_simplex_deviation = 0.0;
};

// One SGD step on the tensor a handle points at; depthwise-stack slices are
// extracted, stepped, and written back so sibling domains stay untouched.
void apply_update(const ParamHandle& h, const Tensor<float>& grad, MomentumState& state,
                  double lr, double momentum, double weight_decay);

struct EvalStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

EvalStats evaluate_split(Model& model, std::size_t d, const Dataset& ds, std::size_t batch_size,
                         bool gated);

// Runs one full phase. pretrain_base updates shared and domain-0 parameters;
// finetune_domain updates the domain's own set per the sharing mode (with a
// cached-feature fast path when only the classifier trains); gate_train
// updates gate parameters against the frozen network. The eval split is
// scored after every epoch when given.
TrainResult train_phase(Model& model, Phase phase, std::size_t d, const Dataset& train,
                        const Dataset* eval_split, const OptimConfig& opt, std::uint64_t seed);

}  // namespace mdsep
