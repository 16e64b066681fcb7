#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "plab/tensor.hpp"

namespace plab {

// ---------------------------------------------------------------------------
// Layer and network specification
// ---------------------------------------------------------------------------

enum class ActKind { relu, leaky_relu, gelu, tanh_fn, abs_fn };
enum class PadMode { valid, same };
enum class NormAxis { none, batch, feature };
enum class InitScheme { fan_in_gaussian, he_gaussian };

struct DenseSpec {
    std::size_t in = 0;
    std::size_t out = 0;
    bool has_bias = true;
};

struct Conv2DSpec {
    std::size_t in_ch = 0;
    std::size_t out_ch = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    PadMode padding = PadMode::valid;
};

struct FlattenSpec {};

// Elementwise nonlinearity phi(z + input_offset). The offset shifts the
// unit's receptive region relative to the kink/saturation point; census and
// linearization diagnostics classify against the shifted argument.
struct ActivationSpec {
    ActKind kind = ActKind::relu;
    double slope = 0.01;        // leaky_relu only; must be in (0,1)
    double input_offset = 0.0;
};

struct LayerNormSpec {
    double eps = 1e-5;
    bool affine = true;
};

struct BatchNormSpec {
    double eps = 1e-5;
    double momentum = 0.1;      // running <- (1-m)*running + m*batch_stat
    bool affine = true;
};

// Normalization split into independent centering and scaling axes.
// center subtracts the mean over the chosen axis; scale divides by the
// standard deviation (about its own axis mean) of the centered values.
// Batch-axis statistics keep BatchNorm-style running buffers for eval mode.
struct DecomposedNormSpec {
    NormAxis center = NormAxis::none;
    NormAxis scale = NormAxis::none;
    double eps = 1e-5;
    double momentum = 0.1;
};

using LayerSpec = std::variant<DenseSpec, Conv2DSpec, FlattenSpec, ActivationSpec,
                               LayerNormSpec, BatchNormSpec, DecomposedNormSpec>;

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    InitScheme init = InitScheme::he_gaussian;
    std::uint64_t seed = 0;
};

// Throws std::invalid_argument naming the first offending layer index.
void validate_spec(const NetworkSpec& spec);
const char* layer_kind_name(const LayerSpec& spec);
const char* act_kind_name(ActKind kind);

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct Param {
    std::string name;   // "L<i>.W" | "L<i>.b" | "L<i>.gamma" | "L<i>.beta"
    Tensor value;
};

// Per-layer indices into the parameter/buffer lists (-1 when absent).
struct LayerBinding {
    int w = -1;
    int b = -1;
    int gamma = -1;
    int beta = -1;
    int run_mean = -1;
    int run_var = -1;
};

class Network {
public:
    Network() = default;

    const NetworkSpec& spec() const { return spec_; }
    std::size_t num_layers() const { return spec_.layers.size(); }

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& buffers() { return buffers_; }
    const std::vector<Param>& buffers() const { return buffers_; }
    const std::vector<LayerBinding>& bindings() const { return bindings_; }

    // Frobenius norm of each weight tensor at construction, keyed by
    // parameter name. Immutable after init.
    const std::map<std::string, double>& init_layer_norms() const {
        return init_layer_norms_;
    }

    std::size_t param_count() const;           // total scalar parameters
    std::vector<double> flat_params() const;   // layer order, row-major
    void set_flat_params(const std::vector<double>& theta);

    // Gaussian std for re-drawing weights of layer `layer_index` (ReDO).
    double init_stddev(std::size_t layer_index) const;

    friend Network init_network(const NetworkSpec& spec, std::uint64_t seed);
    friend Network restore_network(const NetworkSpec& spec, std::vector<Param> params,
                                   std::vector<Param> buffers,
                                   std::map<std::string, double> init_norms);

private:
    NetworkSpec spec_;
    std::vector<Param> params_;
    std::vector<Param> buffers_;
    std::vector<LayerBinding> bindings_;
    std::map<std::string, double> init_layer_norms_;
};

// Weights ~ N(0, s^2/fan_in) with s^2 = 2 (he_gaussian) or 1 (fan_in_gaussian);
// biases and norm shifts zero, norm gains one. Deterministic in seed.
Network init_network(const NetworkSpec& spec, std::uint64_t seed);
Network init_network(const NetworkSpec& spec);  // uses spec.seed

// Rebuilds a network from serialized state: exact parameter/buffer tensors
// plus the recorded init norms (checkpoint loading). Names and shapes must
// match the spec's canonical layout.
Network restore_network(const NetworkSpec& spec, std::vector<Param> params,
                        std::vector<Param> buffers,
                        std::map<std::string, double> init_norms);

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

enum class Mode { train, eval };

struct NormCache {
    std::vector<double> mean;       // centering-stage means, per group
    std::vector<double> inv_std;    // scaling-stage 1/sqrt(var+eps), per group
    std::vector<double> scale_mean; // DecomposedNorm: mean of centered values
    Tensor normalized;              // pre-affine output
    Tensor centered;                // DecomposedNorm: after centering stage
};

// Caches every layer boundary: io[0] is the input batch, io[i+1] the output
// of layer i. The input to an Activation layer (its preactivation) is
// io[layer_index].
struct ForwardTrace {
    Mode mode = Mode::train;
    std::vector<Tensor> io;
    std::vector<NormCache> norm_cache;   // one slot per layer, used by norms
};

struct ForwardResult {
    Tensor output;
    ForwardTrace trace;
};

// Shape mismatches throw naming the layer. Train mode updates BatchNorm /
// DecomposedNorm running buffers; eval mode never mutates the network.
// Train-mode BatchNorm requires batch >= 2.
ForwardResult forward(Network& net, const Tensor& batch, Mode mode);
// Eval-only forward for const networks.
ForwardResult forward_eval(const Network& net, const Tensor& batch);

struct Gradients {
    std::vector<Tensor> by_param;          // aligned with net.params()
    Tensor input_grad;
    std::vector<Tensor> layer_input_grads; // grad w.r.t. io[i] for each layer i

    std::vector<double> flat() const;      // layer order, row-major
};

// Reverse-mode pass through the trace. Optional `injected` adds an extra
// gradient to the flow at the *input* of the named layer indices (used by the
// feature-norm regularizer). Eval-mode traces treat running stats as
// constants.
Gradients backward(const Network& net, const ForwardTrace& trace,
                   const Tensor& output_grad,
                   const std::map<std::size_t, Tensor>* injected = nullptr);

// Gradient of output coordinate `output_index` for one input, flattened over
// all parameters in the canonical order: layers in order, weight before bias
// (gamma before beta), row-major within each tensor. Uses eval-mode
// statistics for batch-stat layers.
std::vector<double> per_sample_output_gradient(const Network& net, const Tensor& x,
                                               std::size_t output_index);

// Elementwise activation helpers (shared with diagnostics).
double activation_value(const ActivationSpec& spec, double z);
double activation_slope(const ActivationSpec& spec, double z);

// Index of the last Dense layer (the readout); its input activations are the
// "features" used by feature-norm regularization and feature SVD.
std::optional<std::size_t> readout_layer(const Network& net);

}  // namespace plab
