#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plab/network.hpp"
#include "plab/rng.hpp"

namespace plab {

enum class OptAlgo { sgd, adam };

struct OptimizerState {
    OptAlgo algo = OptAlgo::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    std::vector<Tensor> m;  // first moments,  aligned with net.params()
    std::vector<Tensor> v;  // second moments, aligned with net.params()
};

OptimizerState make_optimizer(const Network& net, OptAlgo algo, double lr);

// In-place parameter update. Adam is bias-corrected; t increments once per
// call. NaN/Inf gradients abort with the parameter's name.
void adam_step(OptimizerState& state, Network& net, const Gradients& grads);
void sgd_step(OptimizerState& state, Network& net, const Gradients& grads);
void optimizer_step(OptimizerState& state, Network& net, const Gradients& grads);

// g <- g + lambda * theta for weight tensors only; biases and norm
// gains/shifts are exempt.
void apply_l2(Gradients& grads, const Network& net, double lambda);

struct RescaleOutcome {
    std::vector<std::string> rescaled;  // params whose norm was restored
    std::vector<std::string> skipped;   // near-zero-norm params left alone
};

// Scales each weight tensor so its Frobenius norm matches the recorded init
// norm. Weight tensors with current norm < 1e-12 are skipped with a warning
// record (direction undefined).
RescaleOutcome rescale_weights_to_init(Network& net);

struct RedoOutcome {
    std::size_t reset_count = 0;
    std::vector<std::pair<std::size_t, std::size_t>> reset_units;  // (layer, unit)
};

// ReDO on a probe trace: per hidden unit behind each activation layer, score
// s_i = mean|a_i| / layer mean of mean|a|; units with s <= tau get incoming
// weights redrawn from the init distribution (bias zeroed), outgoing weights
// zeroed, and both optimizer moment slices zeroed. An all-zero layer resets
// every unit (0/0 scored as 0).
RedoOutcome redo_reset(Network& net, const ForwardTrace& trace, OptimizerState& state,
                       double tau, Rng& rng);

// Moments zeroed, t = 0; hyperparameters kept.
void reset_optimizer_state(OptimizerState& state);

}  // namespace plab
