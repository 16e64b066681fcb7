#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "plab/losses.hpp"
#include "plab/network.hpp"
#include "plab/tensor.hpp"

namespace plab {

// ---------------------------------------------------------------------------
// Unit census
// ---------------------------------------------------------------------------

// One hidden unit (dense feature or conv channel) of an activation layer.
// Statistics and classifications use the activation argument z +
// input_offset, pooled over batch and any spatial extent. Variance is the
// population variance (divide by n).
struct UnitStat {
    double mean = 0.0;
    double var = 0.0;
    bool dead = false;
    bool zombie = false;
    bool saturated = false;
};

struct LayerCensus {
    std::size_t layer = 0;  // index into spec().layers
    ActKind kind = ActKind::relu;
    std::vector<UnitStat> units;
    double dead_fraction = 0.0;
    double zombie_fraction = 0.0;
    double saturated_fraction = 0.0;
};

struct UnitCensus {
    std::vector<LayerCensus> layers;
    std::size_t total_units = 0;
    double dead_fraction = 0.0;
    double zombie_fraction = 0.0;
};

// Classification rules per activation kind:
//   relu:        dead <=> all args <= 0; zombie <=> all args > 0
//   leaky/abs:   never dead; zombie <=> all args strictly one sign
//   tanh/gelu:   saturated <=> all |arg| > 3; zombie <=> unit std <
//                0.05 * median unit std within the layer; tanh never dead;
//                gelu dead <=> saturated with all args negative
// Requires probe_batch with at least min_batch rows.
UnitCensus unit_census(const Network& net, const Tensor& probe_batch,
                       std::size_t min_batch = 32);

// ---------------------------------------------------------------------------
// Preactivation statistics and drift
// ---------------------------------------------------------------------------

struct PreactStats {
    struct Layer {
        std::size_t layer = 0;
        std::vector<double> mean;  // per unit
        std::vector<double> var;   // population variance per unit
    };
    std::vector<Layer> layers;
};

PreactStats preactivation_stats(const Network& net, const ForwardTrace& trace);

// Per-layer drift: mean over units of sqrt((mu - mu_ref)^2 + (sd - sd_ref)^2)
// where sd = sqrt(var). Shapes must match the reference.
std::vector<double> preactivation_drift(const PreactStats& current,
                                        const PreactStats& reference);

// ---------------------------------------------------------------------------
// Parameter norms
// ---------------------------------------------------------------------------

struct ParamNorms {
    struct Entry {
        std::size_t layer = 0;
        double norm = 0.0;  // Frobenius over all params of the layer
    };
    std::vector<Entry> per_layer;
    std::vector<std::pair<std::string, double>> per_param;
    double total = 0.0;  // total^2 == sum of per-layer norms squared
};

ParamNorms param_norms(const Network& net);

// ---------------------------------------------------------------------------
// Empirical NTK gram
// ---------------------------------------------------------------------------

struct ENTKReport {
    Tensor gram;                       // n x n, K[i][j] = <g_i, g_j>
    Tensor cosine;                     // D^{-1/2} K D^{-1/2}; masked rows 0
    std::vector<bool> cosine_defined;  // false where the gradient norm is 0
    std::vector<double> eigenvalues;   // descending
    double diag_rank1_residual = 0.0;
    int output_index = 0;

    // #eigenvalues above threshold * max eigenvalue
    std::size_t numeric_rank(double threshold = 1e-8) const;
};

// Per-sample output gradients of the designated scalar output (default 0)
// over a batch of at most 64 rows.
ENTKReport entk_gram(const Network& net, const Tensor& batch, int output_index = 0);

// ---------------------------------------------------------------------------
// Diagonal + rank-1 structure fit
// ---------------------------------------------------------------------------

struct DiagRank1Fit {
    std::vector<double> diag;
    std::vector<double> direction;  // unit vector v of R = scale * v v^T
    double scale = 0.0;
    double residual = 0.0;  // ||K - diag - R||_F / ||K||_F
    std::size_t iterations = 0;
};

// Alternating fit: given d, best rank-1 part from the dominant eigenpair of
// K - diag(d); given R, d = diag(K - R). Runs 50 iterations or until the
// residual stalls below 1e-10. The single-argument form takes the best fit
// over a fixed deterministic portfolio of starting diagonals (zero, diag(K),
// and 32 seeded random draws); the zero start recovers exactly diagonal or
// exactly rank-1 inputs in one iteration.
DiagRank1Fit fit_diag_rank1(const Tensor& k, const std::vector<double>& initial_diag);
DiagRank1Fit fit_diag_rank1(const Tensor& k);
double diag_rank1_residual(const Tensor& k);

// ---------------------------------------------------------------------------
// Feature SVD
// ---------------------------------------------------------------------------

struct SVDReport {
    std::vector<double> singular_values;  // descending, non-negative
    std::size_t srank = 0;                // #{i : s_i / s_0 > delta}
    double delta = 0.01;
    // readout output (index 0) of each input's features projected onto the
    // top singular direction
    std::vector<double> top_direction_outputs;
    std::size_t feature_layer = 0;
};

// Features are the inputs to the final Dense (readout) layer; batch of
// n = 128 rows is the convention for reports.
SVDReport feature_svd(const Network& net, const Tensor& batch, double delta = 0.01);

// ---------------------------------------------------------------------------
// Predictive entropy
// ---------------------------------------------------------------------------

// Mean over the batch of the softmax entropy -sum p ln p. Uniform logits
// over k classes give ln k.
double predictive_entropy(const Tensor& logits);

// ---------------------------------------------------------------------------
// Gradient alignment census
// ---------------------------------------------------------------------------

struct AlignmentCensus {
    struct Layer {
        std::size_t layer = 0;
        std::vector<int> flags;  // -1 all-negative, +1 all-positive, 0 mixed
        double negative_fraction = 0.0;
        double positive_fraction = 0.0;
    };
    std::vector<Layer> layers;
};

// Flags hidden units whose preactivation gradients keep one strict sign for
// every input in the batch (zeros break the flag).
AlignmentCensus gradient_alignment_census(const Network& net, const ForwardTrace& trace,
                                          const Tensor& loss_grad);

// ---------------------------------------------------------------------------
// Sharpness (top Hessian eigenvalue)
// ---------------------------------------------------------------------------

struct SharpnessReport {
    double top_eigenvalue = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
};

using GradFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Power iteration on finite-difference Hessian-vector products
//   Hv ~ (grad(theta + h v) - grad(theta - h v)) / (2h),
//   h = 1e-4 * (1 + ||theta||) / ||v||.
// Reports the Rayleigh quotient; converged when successive estimates differ
// by < 1e-4 relative. Non-convergence is reported, never thrown.
SharpnessReport sharpness_top_eig(const GradFn& grad_fn, const std::vector<double>& theta,
                                  std::size_t iters = 100, std::uint64_t seed = 0);

// Network adapter: eval-mode loss over the batch, loss_fn maps the network
// output to (loss, output gradient).
using LossFn = std::function<LossResult(const Tensor& output)>;
SharpnessReport sharpness_top_eig(const Network& net, const LossFn& loss_fn,
                                  const Tensor& batch, std::size_t iters = 100,
                                  std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Linearization probe and eNTK rank bound
// ---------------------------------------------------------------------------

struct LinearizationProbe {
    struct Layer {
        std::size_t layer = 0;
        std::vector<bool> constant_slope;  // per unit, across the whole batch
        double constant_fraction = 0.0;
    };
    std::vector<Layer> layers;
    bool fully_linearized = true;
};

LinearizationProbe linearization_probe(const Network& net, const Tensor& batch);

struct RankBoundReport {
    std::size_t rank_k = 0;  // numeric rank of the eNTK gram
    std::size_t rank_x = 0;  // numeric rank of the input matrix
    bool bound_holds = false;
};

// Requires a bias-free net of Dense/Flatten/Activation layers whose
// activation layers are all fully linearized on X (checked with the probe;
// std::invalid_argument otherwise) — with bias or normalization parameters
// the per-sample gradient is affine in x and the bound does not apply.
// Numeric ranks use threshold 1e-8 * largest singular value.
RankBoundReport rank_bound_check(const Network& net, const Tensor& x);

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

struct DiagnosticsReport {
    UnitCensus census;
    PreactStats preact;
    ParamNorms norms;
    double entropy = 0.0;  // classification outputs only, else 0
    std::optional<ENTKReport> entk;
    std::optional<SVDReport> svd;
};

struct DiagnosticsOptions {
    bool with_entk = false;
    bool with_svd = false;
    int entk_output_index = 0;
    std::size_t entk_max_batch = 64;
    std::size_t census_min_batch = 32;
    bool classification = false;
};

DiagnosticsReport collect_diagnostics(const Network& net, const Tensor& batch,
                                      const DiagnosticsOptions& opts = {});

}  // namespace plab
