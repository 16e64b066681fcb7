#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plab/losses.hpp"
#include "plab/network.hpp"

namespace plab {

// One finite-difference comparison: a small random network, a random batch,
// and one loss head. Relative error uses max(|analytic|, |numeric|, floor)
// in the denominator so near-zero coordinates compare on an absolute scale.
struct GradcheckCase {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t param_count = 0;
    std::size_t reseeds = 0;  // batches redrawn to clear activation kinks
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GradcheckCase> cases;
    double worst_rel_err = 0.0;
    bool all_pass = false;
    double tolerance = 1e-5;
};

// Central finite differences (step h) of the scalar loss over every parameter
// coordinate, compared against the analytic backward pass. Also checks the
// input gradient by differencing the batch entries. Returns the max relative
// error across both.
double gradcheck_max_rel_err(const NetworkSpec& spec, LossKind loss, double smoothing,
                             int two_hot_bound, const Tensor& batch, std::uint64_t target_seed,
                             Mode mode = Mode::train, double h = 1e-5);

// The shipped suite: >= `min_cases` configurations covering every layer kind
// (Dense with/without bias, Conv2D valid/same/strided, Flatten, all five
// activations with and without input offsets, LayerNorm, BatchNorm,
// DecomposedNorm axis combinations) and every loss head. Deterministic in
// seed. Batches are redrawn when a kink-activation preactivation sits within
// the finite-difference margin.
GradcheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t min_cases = 100,
                                    double tolerance = 1e-5);

}  // namespace plab
