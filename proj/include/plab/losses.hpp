#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "plab/tensor.hpp"

namespace plab {

enum class LossKind { mse, xent, two_hot };

struct LossResult {
    double loss = 0.0;
    Tensor grad;  // d loss / d pred, same shape as pred
};

// loss = mean over batch of squared error summed over outputs.
LossResult mse_loss(const Tensor& pred, const Tensor& target);

// Softmax cross-entropy against (1-k)·onehot + k·uniform, mean over batch.
LossResult xent_loss(const Tensor& logits, const std::vector<int>& labels,
                     double smoothing = 0.0);

// Row-wise softmax (shift-stable).
Tensor softmax(const Tensor& logits);

// Real scalar c in [-M, M] encoded as a categorical over the integer grid
// {-M..M}: mass ceil(c)-c on floor(c) and c-floor(c) on ceil(c). Smoothing
// mixes kappa of a uniform distribution over all atoms.
class TwoHotCodec {
public:
    TwoHotCodec(int bound, double smoothing);

    int bound() const { return m_; }
    double smoothing() const { return kappa_; }
    std::size_t num_atoms() const { return static_cast<std::size_t>(2 * m_ + 1); }
    double atom(std::size_t i) const { return static_cast<double>(static_cast<int>(i) - m_); }

    std::vector<double> encode(double c) const;           // kappa ignored
    std::vector<double> encode_smoothed(double c) const;  // (1-kappa)·encode + kappa·uniform
    double decode(const std::vector<double>& probs) const;  // expectation over atoms

    // Cross-entropy of softmax(logits) against encode_smoothed(c), mean over
    // batch; logits shape {N, 2M+1}, one real target per row.
    LossResult loss(const Tensor& logits, const std::vector<double>& targets) const;

    // Expected atom value under softmax(logits) per row.
    std::vector<double> decode_logits(const Tensor& logits) const;

private:
    int m_;
    double kappa_;
};

}  // namespace plab
