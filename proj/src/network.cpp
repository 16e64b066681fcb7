#include "plab/network.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "plab/rng.hpp"

namespace plab {

namespace {

[[noreturn]] void layer_error(std::size_t index, const char* kind, const std::string& msg) {
    std::ostringstream os;
    os << "layer " << index << " (" << kind << "): " << msg;
    throw std::invalid_argument(os.str());
}

// Static shape knowledge while walking a spec. Spatial extents are only known
// at forward time, so a conv stack tracks channels and a post-Flatten stack
// tracks nothing until the next Dense pins the width.
struct ShapeState {
    enum Kind { dense, conv, flat_unknown, start } kind = start;
    std::size_t dim = 0;  // dense feature width
    std::size_t ch = 0;   // conv channel count
};

}  // namespace

const char* act_kind_name(ActKind kind) {
    switch (kind) {
        case ActKind::relu: return "relu";
        case ActKind::leaky_relu: return "leaky_relu";
        case ActKind::gelu: return "gelu";
        case ActKind::tanh_fn: return "tanh";
        case ActKind::abs_fn: return "abs";
    }
    return "?";
}

const char* layer_kind_name(const LayerSpec& spec) {
    if (std::holds_alternative<DenseSpec>(spec)) return "Dense";
    if (std::holds_alternative<Conv2DSpec>(spec)) return "Conv2D";
    if (std::holds_alternative<FlattenSpec>(spec)) return "Flatten";
    if (std::holds_alternative<ActivationSpec>(spec)) return "Activation";
    if (std::holds_alternative<LayerNormSpec>(spec)) return "LayerNorm";
    if (std::holds_alternative<BatchNormSpec>(spec)) return "BatchNorm";
    return "DecomposedNorm";
}

// ---------------------------------------------------------------------------
// Spec validation
// ---------------------------------------------------------------------------

void validate_spec(const NetworkSpec& spec) {
    if (spec.layers.empty()) throw std::invalid_argument("network spec has no layers");
    ShapeState st;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& ls = spec.layers[i];
        const char* kind = layer_kind_name(ls);
        if (const auto* d = std::get_if<DenseSpec>(&ls)) {
            if (d->in == 0 || d->out == 0) layer_error(i, kind, "dimensions must be positive");
            if (st.kind == ShapeState::dense && st.dim != d->in) {
                std::ostringstream os;
                os << "expects input width " << d->in << " but previous layer produces " << st.dim;
                layer_error(i, kind, os.str());
            }
            if (st.kind == ShapeState::conv)
                layer_error(i, kind, "needs a Flatten between Conv2D output and Dense input");
            st = {ShapeState::dense, d->out, 0};
        } else if (const auto* c = std::get_if<Conv2DSpec>(&ls)) {
            if (c->in_ch == 0 || c->out_ch == 0 || c->kernel == 0)
                layer_error(i, kind, "dimensions must be positive");
            if (c->stride < 1) layer_error(i, kind, "stride must be >= 1");
            if (st.kind == ShapeState::conv && st.ch != c->in_ch) {
                std::ostringstream os;
                os << "expects " << c->in_ch << " input channels but previous layer produces "
                   << st.ch;
                layer_error(i, kind, os.str());
            }
            if (st.kind == ShapeState::dense || st.kind == ShapeState::flat_unknown)
                layer_error(i, kind, "convolution after flat features is unsupported");
            st = {ShapeState::conv, 0, c->out_ch};
        } else if (std::holds_alternative<FlattenSpec>(ls)) {
            if (st.kind == ShapeState::conv) st = {ShapeState::flat_unknown, 0, 0};
            // flattening rank-2 features is the identity; state unchanged
        } else if (const auto* a = std::get_if<ActivationSpec>(&ls)) {
            if (a->kind == ActKind::leaky_relu && !(a->slope > 0.0 && a->slope < 1.0))
                layer_error(i, kind, "leaky_relu slope must lie in (0,1)");
            if (!std::isfinite(a->input_offset))
                layer_error(i, kind, "input_offset must be finite");
        } else if (const auto* ln = std::get_if<LayerNormSpec>(&ls)) {
            if (!(ln->eps > 0.0)) layer_error(i, kind, "eps must be positive");
            if (ln->affine && st.kind != ShapeState::dense)
                layer_error(i, kind,
                            "affine LayerNorm needs a statically known feature width "
                            "(place it after a Dense layer or set affine=false)");
        } else if (const auto* bn = std::get_if<BatchNormSpec>(&ls)) {
            if (!(bn->eps > 0.0)) layer_error(i, kind, "eps must be positive");
            if (!(bn->momentum > 0.0 && bn->momentum < 1.0))
                layer_error(i, kind, "momentum must lie in (0,1)");
            if (st.kind != ShapeState::dense && st.kind != ShapeState::conv)
                layer_error(i, kind, "BatchNorm needs a preceding Dense or Conv2D layer");
        } else if (const auto* dn = std::get_if<DecomposedNormSpec>(&ls)) {
            if (!(dn->eps > 0.0)) layer_error(i, kind, "eps must be positive");
            if (!(dn->momentum > 0.0 && dn->momentum < 1.0))
                layer_error(i, kind, "momentum must lie in (0,1)");
            bool batch_axis = dn->center == NormAxis::batch || dn->scale == NormAxis::batch;
            if (batch_axis && st.kind != ShapeState::dense)
                layer_error(i, kind,
                            "batch-axis DecomposedNorm needs a statically known feature width");
            if (st.kind == ShapeState::conv)
                layer_error(i, kind, "DecomposedNorm supports flat features only");
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

std::size_t Network::param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::vector<double> Network::flat_params() const {
    std::vector<double> out;
    out.reserve(param_count());
    for (const auto& p : params_)
        out.insert(out.end(), p.value.vec().begin(), p.value.vec().end());
    return out;
}

void Network::set_flat_params(const std::vector<double>& theta) {
    if (theta.size() != param_count())
        throw std::invalid_argument("flat parameter vector has wrong length");
    std::size_t off = 0;
    for (auto& p : params_) {
        std::memcpy(p.value.data(), theta.data() + off, p.value.size() * sizeof(double));
        off += p.value.size();
    }
}

double Network::init_stddev(std::size_t layer_index) const {
    if (layer_index >= spec_.layers.size())
        throw std::invalid_argument("init_stddev: layer index out of range");
    const LayerSpec& ls = spec_.layers[layer_index];
    double s2 = spec_.init == InitScheme::he_gaussian ? 2.0 : 1.0;
    if (const auto* d = std::get_if<DenseSpec>(&ls))
        return std::sqrt(s2 / static_cast<double>(d->in));
    if (const auto* c = std::get_if<Conv2DSpec>(&ls))
        return std::sqrt(s2 / static_cast<double>(c->in_ch * c->kernel * c->kernel));
    layer_error(layer_index, layer_kind_name(ls), "has no weight tensor");
}

Network init_network(const NetworkSpec& spec, std::uint64_t seed) {
    validate_spec(spec);
    Network net;
    net.spec_ = spec;
    Rng rng(seed);

    ShapeState st;
    auto pname = [](std::size_t i, const char* suffix) {
        std::ostringstream os;
        os << "L" << i << "." << suffix;
        return os.str();
    };

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& ls = spec.layers[i];
        LayerBinding bind;
        if (const auto* d = std::get_if<DenseSpec>(&ls)) {
            double sd = std::sqrt((spec.init == InitScheme::he_gaussian ? 2.0 : 1.0) /
                                  static_cast<double>(d->in));
            Tensor w = Tensor::zeros({d->out, d->in});
            for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, sd);
            bind.w = static_cast<int>(net.params_.size());
            net.params_.push_back({pname(i, "W"), std::move(w)});
            if (d->has_bias) {
                bind.b = static_cast<int>(net.params_.size());
                net.params_.push_back({pname(i, "b"), Tensor::zeros({d->out})});
            }
            st = {ShapeState::dense, d->out, 0};
        } else if (const auto* c = std::get_if<Conv2DSpec>(&ls)) {
            double sd = std::sqrt((spec.init == InitScheme::he_gaussian ? 2.0 : 1.0) /
                                  static_cast<double>(c->in_ch * c->kernel * c->kernel));
            Tensor w = Tensor::zeros({c->out_ch, c->in_ch, c->kernel, c->kernel});
            for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, sd);
            bind.w = static_cast<int>(net.params_.size());
            net.params_.push_back({pname(i, "W"), std::move(w)});
            bind.b = static_cast<int>(net.params_.size());
            net.params_.push_back({pname(i, "b"), Tensor::zeros({c->out_ch})});
            st = {ShapeState::conv, 0, c->out_ch};
        } else if (std::holds_alternative<FlattenSpec>(ls)) {
            if (st.kind == ShapeState::conv) st = {ShapeState::flat_unknown, 0, 0};
        } else if (const auto* ln = std::get_if<LayerNormSpec>(&ls)) {
            if (ln->affine) {
                bind.gamma = static_cast<int>(net.params_.size());
                net.params_.push_back({pname(i, "gamma"), Tensor::full({st.dim}, 1.0)});
                bind.beta = static_cast<int>(net.params_.size());
                net.params_.push_back({pname(i, "beta"), Tensor::zeros({st.dim})});
            }
        } else if (const auto* bn = std::get_if<BatchNormSpec>(&ls)) {
            std::size_t width = st.kind == ShapeState::conv ? st.ch : st.dim;
            if (bn->affine) {
                bind.gamma = static_cast<int>(net.params_.size());
                net.params_.push_back({pname(i, "gamma"), Tensor::full({width}, 1.0)});
                bind.beta = static_cast<int>(net.params_.size());
                net.params_.push_back({pname(i, "beta"), Tensor::zeros({width})});
            }
            bind.run_mean = static_cast<int>(net.buffers_.size());
            net.buffers_.push_back({pname(i, "run_mean"), Tensor::zeros({width})});
            bind.run_var = static_cast<int>(net.buffers_.size());
            net.buffers_.push_back({pname(i, "run_var"), Tensor::full({width}, 1.0)});
        } else if (const auto* dn = std::get_if<DecomposedNormSpec>(&ls)) {
            if (dn->center == NormAxis::batch) {
                bind.run_mean = static_cast<int>(net.buffers_.size());
                net.buffers_.push_back({pname(i, "run_mean"), Tensor::zeros({st.dim})});
            }
            if (dn->scale == NormAxis::batch) {
                bind.run_var = static_cast<int>(net.buffers_.size());
                net.buffers_.push_back({pname(i, "run_var"), Tensor::full({st.dim}, 1.0)});
            }
        }
        net.bindings_.push_back(bind);
    }
    for (const auto& p : net.params_)
        net.init_layer_norms_[p.name] = p.value.frobenius_norm();
    return net;
}

Network init_network(const NetworkSpec& spec) { return init_network(spec, spec.seed); }

Network restore_network(const NetworkSpec& spec, std::vector<Param> params,
                        std::vector<Param> buffers,
                        std::map<std::string, double> init_norms) {
    Network net = init_network(spec, 0);  // canonical layout for this spec
    auto check = [](const std::vector<Param>& got, const std::vector<Param>& want,
                    const char* what) {
        if (got.size() != want.size()) {
            throw std::runtime_error("restore_network: expected " +
                                     std::to_string(want.size()) + " " + what +
                                     " tensors, got " + std::to_string(got.size()));
        }
        for (std::size_t i = 0; i < got.size(); ++i) {
            if (got[i].name != want[i].name) {
                throw std::runtime_error("restore_network: " + std::string(what) + " " +
                                         std::to_string(i) + " is named \"" + got[i].name +
                                         "\"; the spec expects \"" + want[i].name + "\"");
            }
            if (!got[i].value.same_shape(want[i].value)) {
                throw std::runtime_error("restore_network: " + got[i].name + " has shape " +
                                         got[i].value.shape_str() + "; the spec expects " +
                                         want[i].value.shape_str());
            }
        }
    };
    check(params, net.params_, "parameter");
    check(buffers, net.buffers_, "buffer");
    for (const auto& [name, unused] : net.init_layer_norms_) {
        (void)unused;
        if (init_norms.find(name) == init_norms.end()) {
            throw std::runtime_error("restore_network: missing init norm for " + name);
        }
    }
    net.params_ = std::move(params);
    net.buffers_ = std::move(buffers);
    net.init_layer_norms_ = std::move(init_norms);
    return net;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

double activation_value(const ActivationSpec& spec, double z) {
    double x = z + spec.input_offset;
    switch (spec.kind) {
        case ActKind::relu: return x > 0.0 ? x : 0.0;
        case ActKind::leaky_relu: return x > 0.0 ? x : spec.slope * x;
        case ActKind::gelu: {
            double u = kGeluC * (x + 0.044715 * x * x * x);
            return 0.5 * x * (1.0 + std::tanh(u));
        }
        case ActKind::tanh_fn: return std::tanh(x);
        case ActKind::abs_fn: return std::fabs(x);
    }
    return 0.0;
}

double activation_slope(const ActivationSpec& spec, double z) {
    double x = z + spec.input_offset;
    switch (spec.kind) {
        case ActKind::relu: return x > 0.0 ? 1.0 : 0.0;
        case ActKind::leaky_relu: return x > 0.0 ? 1.0 : spec.slope;
        case ActKind::gelu: {
            double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
            double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        }
        case ActKind::tanh_fn: {
            double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case ActKind::abs_fn: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    }
    return 0.0;
}

std::optional<std::size_t> readout_layer(const Network& net) {
    const auto& layers = net.spec().layers;
    for (std::size_t i = layers.size(); i-- > 0;)
        if (std::holds_alternative<DenseSpec>(layers[i])) return i;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
    std::size_t h_in, w_in, h_out, w_out;
    long pad;  // symmetric leading pad (same-padding), 0 for valid
};

ConvGeometry conv_geometry(std::size_t layer, const Conv2DSpec& c, const Tensor& x) {
    if (x.rank() != 4) layer_error(layer, "Conv2D", "expects a {N,C,H,W} input tensor");
    if (x.dim(1) != c.in_ch) {
        std::ostringstream os;
        os << "expects " << c.in_ch << " input channels, got " << x.dim(1);
        layer_error(layer, "Conv2D", os.str());
    }
    ConvGeometry g{};
    g.h_in = x.dim(2);
    g.w_in = x.dim(3);
    if (c.padding == PadMode::valid) {
        if (g.h_in < c.kernel || g.w_in < c.kernel)
            layer_error(layer, "Conv2D", "input smaller than kernel under valid padding");
        g.h_out = (g.h_in - c.kernel) / c.stride + 1;
        g.w_out = (g.w_in - c.kernel) / c.stride + 1;
        g.pad = 0;
    } else {
        g.h_out = (g.h_in + c.stride - 1) / c.stride;
        g.w_out = (g.w_in + c.stride - 1) / c.stride;
        long total = static_cast<long>((g.h_out - 1) * c.stride + c.kernel) -
                     static_cast<long>(g.h_in);
        g.pad = total > 0 ? total / 2 : 0;
    }
    return g;
}

// Group iteration for normalization layers. rank-2: feature groups are
// columns; rank-4 BatchNorm: channel groups over (N,H,W).
void batch_group_stats(const Tensor& x, std::size_t width, std::vector<double>& mean,
                       std::vector<double>& var) {
    std::size_t n = x.dim(0);
    std::size_t spatial = x.size() / (n * width);  // 1 for rank-2
    std::size_t per_group = n * spatial;
    mean.assign(width, 0.0);
    var.assign(width, 0.0);
    const double* d = x.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < width; ++c) {
            const double* p = d + (i * width + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) mean[c] += p[s];
        }
    for (std::size_t c = 0; c < width; ++c) mean[c] /= static_cast<double>(per_group);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < width; ++c) {
            const double* p = d + (i * width + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
                double dv = p[s] - mean[c];
                var[c] += dv * dv;
            }
        }
    for (std::size_t c = 0; c < width; ++c) var[c] /= static_cast<double>(per_group);
}

ForwardResult forward_impl(const Network& net, const Tensor& batch, Mode mode,
                           std::vector<Param>* mutable_buffers) {
    if (batch.rank() < 2 || batch.dim(0) < 1)
        throw std::invalid_argument("forward: batch must have a leading sample dimension");
    if (batch.has_nonfinite())
        throw std::invalid_argument("forward: batch contains non-finite entries");

    ForwardResult res;
    res.trace.mode = mode;
    res.trace.io.reserve(net.num_layers() + 1);
    res.trace.norm_cache.resize(net.num_layers());
    res.trace.io.push_back(batch);

    const auto& layers = net.spec().layers;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const Tensor& x = res.trace.io.back();
        const LayerBinding& bind = net.bindings()[li];
        Tensor y;

        if (const auto* d = std::get_if<DenseSpec>(&layers[li])) {
            if (x.rank() != 2 || x.dim(1) != d->in) {
                std::ostringstream os;
                os << "expects {N," << d->in << "} input, got " << x.shape_str();
                layer_error(li, "Dense", os.str());
            }
            const Tensor& w = net.params()[bind.w].value;
            y = Tensor::zeros({x.dim(0), d->out});
            matmul_bt_acc(y, x, w);
            if (bind.b >= 0) {
                const Tensor& b = net.params()[bind.b].value;
                for (std::size_t i = 0; i < x.dim(0); ++i)
                    for (std::size_t j = 0; j < d->out; ++j) y.at(i, j) += b[j];
            }
        } else if (const auto* c = std::get_if<Conv2DSpec>(&layers[li])) {
            ConvGeometry g = conv_geometry(li, *c, x);
            std::size_t n = x.dim(0);
            const Tensor& w = net.params()[bind.w].value;
            const Tensor& b = net.params()[bind.b].value;
            y = Tensor::zeros({n, c->out_ch, g.h_out, g.w_out});
            const double* xd = x.data();
            const double* wd = w.data();
            double* yd = y.data();
            std::size_t k = c->kernel;
            for (std::size_t ni = 0; ni < n; ++ni)
                for (std::size_t oc = 0; oc < c->out_ch; ++oc)
                    for (std::size_t oh = 0; oh < g.h_out; ++oh)
                        for (std::size_t ow = 0; ow < g.w_out; ++ow) {
                            double acc = b[oc];
                            for (std::size_t ic = 0; ic < c->in_ch; ++ic)
                                for (std::size_t kh = 0; kh < k; ++kh) {
                                    long ih = static_cast<long>(oh * c->stride + kh) - g.pad;
                                    if (ih < 0 || ih >= static_cast<long>(g.h_in)) continue;
                                    for (std::size_t kw = 0; kw < k; ++kw) {
                                        long iw = static_cast<long>(ow * c->stride + kw) - g.pad;
                                        if (iw < 0 || iw >= static_cast<long>(g.w_in)) continue;
                                        acc += xd[((ni * c->in_ch + ic) * g.h_in + ih) * g.w_in +
                                                  iw] *
                                               wd[((oc * c->in_ch + ic) * k + kh) * k + kw];
                                    }
                                }
                            yd[((ni * c->out_ch + oc) * g.h_out + oh) * g.w_out + ow] = acc;
                        }
        } else if (std::holds_alternative<FlattenSpec>(layers[li])) {
            y = x.reshaped({x.dim(0), x.row_size()});
        } else if (const auto* a = std::get_if<ActivationSpec>(&layers[li])) {
            y = x;
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = activation_value(*a, x[i]);
        } else if (const auto* ln = std::get_if<LayerNormSpec>(&layers[li])) {
            std::size_t n = x.dim(0);
            std::size_t dfeat = x.row_size();
            NormCache& cache = res.trace.norm_cache[li];
            cache.mean.resize(n);
            cache.inv_std.resize(n);
            cache.normalized = Tensor::zeros(x.shape());
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = x.data() + i * dfeat;
                double m = 0.0;
                for (std::size_t j = 0; j < dfeat; ++j) m += row[j];
                m /= static_cast<double>(dfeat);
                double v = 0.0;
                for (std::size_t j = 0; j < dfeat; ++j) {
                    double dv = row[j] - m;
                    v += dv * dv;
                }
                v /= static_cast<double>(dfeat);
                double inv = 1.0 / std::sqrt(v + ln->eps);
                cache.mean[i] = m;
                cache.inv_std[i] = inv;
                double* out = cache.normalized.data() + i * dfeat;
                for (std::size_t j = 0; j < dfeat; ++j) out[j] = (row[j] - m) * inv;
            }
            y = cache.normalized;
            if (bind.gamma >= 0) {
                const Tensor& gamma = net.params()[bind.gamma].value;
                const Tensor& beta = net.params()[bind.beta].value;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < dfeat; ++j)
                        y.at(i, j) = gamma[j] * y.at(i, j) + beta[j];
            }
        } else if (const auto* bn = std::get_if<BatchNormSpec>(&layers[li])) {
            std::size_t n = x.dim(0);
            std::size_t width = x.rank() == 4 ? x.dim(1) : x.row_size();
            NormCache& cache = res.trace.norm_cache[li];
            cache.normalized = Tensor::zeros(x.shape());
            std::vector<double> mean, var;
            if (mode == Mode::train) {
                if (n < 2) layer_error(li, "BatchNorm", "train mode requires batch >= 2");
                batch_group_stats(x, width, mean, var);
                if (mutable_buffers) {
                    Tensor& rm = (*mutable_buffers)[bind.run_mean].value;
                    Tensor& rv = (*mutable_buffers)[bind.run_var].value;
                    for (std::size_t c = 0; c < width; ++c) {
                        rm[c] = (1.0 - bn->momentum) * rm[c] + bn->momentum * mean[c];
                        rv[c] = (1.0 - bn->momentum) * rv[c] + bn->momentum * var[c];
                    }
                }
            } else {
                const Tensor& rm = net.buffers()[bind.run_mean].value;
                const Tensor& rv = net.buffers()[bind.run_var].value;
                mean.assign(rm.data(), rm.data() + width);
                var.assign(rv.data(), rv.data() + width);
            }
            cache.mean = mean;
            cache.inv_std.resize(width);
            for (std::size_t c = 0; c < width; ++c)
                cache.inv_std[c] = 1.0 / std::sqrt(var[c] + bn->eps);
            std::size_t spatial = x.size() / (n * width);
            const double* xd = x.data();
            double* nd = cache.normalized.data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < width; ++c) {
                    std::size_t base = (i * width + c) * spatial;
                    for (std::size_t s = 0; s < spatial; ++s)
                        nd[base + s] = (xd[base + s] - mean[c]) * cache.inv_std[c];
                }
            y = cache.normalized;
            if (bind.gamma >= 0) {
                const Tensor& gamma = net.params()[bind.gamma].value;
                const Tensor& beta = net.params()[bind.beta].value;
                double* yd = y.data();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < width; ++c) {
                        std::size_t base = (i * width + c) * spatial;
                        for (std::size_t s = 0; s < spatial; ++s)
                            yd[base + s] = gamma[c] * yd[base + s] + beta[c];
                    }
            }
        } else if (const auto* dn = std::get_if<DecomposedNormSpec>(&layers[li])) {
            if (x.rank() != 2) layer_error(li, "DecomposedNorm", "expects flat {N,d} input");
            std::size_t n = x.dim(0);
            std::size_t dfeat = x.dim(1);
            bool batch_axis = dn->center == NormAxis::batch || dn->scale == NormAxis::batch;
            if (mode == Mode::train && batch_axis && n < 2)
                layer_error(li, "DecomposedNorm", "batch-axis statistics require batch >= 2");
            NormCache& cache = res.trace.norm_cache[li];

            // Stage 1: centering.
            Tensor centered = x;
            if (dn->center == NormAxis::batch) {
                std::vector<double> mean(dfeat, 0.0);
                if (mode == Mode::train) {
                    std::vector<double> var;
                    batch_group_stats(x, dfeat, mean, var);
                    if (mutable_buffers && bind.run_mean >= 0) {
                        Tensor& rm = (*mutable_buffers)[bind.run_mean].value;
                        for (std::size_t c = 0; c < dfeat; ++c)
                            rm[c] = (1.0 - dn->momentum) * rm[c] + dn->momentum * mean[c];
                    }
                } else {
                    const Tensor& rm = net.buffers()[bind.run_mean].value;
                    mean.assign(rm.data(), rm.data() + dfeat);
                }
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < dfeat; ++j) centered.at(i, j) -= mean[j];
                cache.mean = mean;
            } else if (dn->center == NormAxis::feature) {
                cache.mean.resize(n);
                for (std::size_t i = 0; i < n; ++i) {
                    double m = 0.0;
                    for (std::size_t j = 0; j < dfeat; ++j) m += x.at(i, j);
                    m /= static_cast<double>(dfeat);
                    cache.mean[i] = m;
                    for (std::size_t j = 0; j < dfeat; ++j) centered.at(i, j) -= m;
                }
            }
            cache.centered = centered;

            // Stage 2: scaling by std of centered values about its axis mean.
            y = centered;
            if (dn->scale == NormAxis::batch) {
                std::vector<double> m2(dfeat, 0.0), var(dfeat, 0.0);
                if (mode == Mode::train) {
                    batch_group_stats(centered, dfeat, m2, var);
                    if (mutable_buffers && bind.run_var >= 0) {
                        Tensor& rv = (*mutable_buffers)[bind.run_var].value;
                        for (std::size_t c = 0; c < dfeat; ++c)
                            rv[c] = (1.0 - dn->momentum) * rv[c] + dn->momentum * var[c];
                    }
                } else {
                    const Tensor& rv = net.buffers()[bind.run_var].value;
                    var.assign(rv.data(), rv.data() + dfeat);
                    m2.assign(dfeat, 0.0);  // eval treats the scale as a constant
                }
                cache.scale_mean = m2;
                cache.inv_std.resize(dfeat);
                for (std::size_t c = 0; c < dfeat; ++c)
                    cache.inv_std[c] = 1.0 / std::sqrt(var[c] + dn->eps);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < dfeat; ++j) y.at(i, j) *= cache.inv_std[j];
            } else if (dn->scale == NormAxis::feature) {
                cache.scale_mean.resize(n);
                cache.inv_std.resize(n);
                for (std::size_t i = 0; i < n; ++i) {
                    double m = 0.0;
                    for (std::size_t j = 0; j < dfeat; ++j) m += centered.at(i, j);
                    m /= static_cast<double>(dfeat);
                    double v = 0.0;
                    for (std::size_t j = 0; j < dfeat; ++j) {
                        double dv = centered.at(i, j) - m;
                        v += dv * dv;
                    }
                    v /= static_cast<double>(dfeat);
                    cache.scale_mean[i] = m;
                    cache.inv_std[i] = 1.0 / std::sqrt(v + dn->eps);
                    for (std::size_t j = 0; j < dfeat; ++j) y.at(i, j) *= cache.inv_std[i];
                }
            }
            cache.normalized = y;
        }

        res.trace.io.push_back(std::move(y));
    }
    res.output = res.trace.io.back();
    return res;
}

}  // namespace

ForwardResult forward(Network& net, const Tensor& batch, Mode mode) {
    return forward_impl(net, batch, mode, mode == Mode::train ? &net.buffers() : nullptr);
}

ForwardResult forward_eval(const Network& net, const Tensor& batch) {
    return forward_impl(net, batch, Mode::eval, nullptr);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

std::vector<double> Gradients::flat() const {
    std::vector<double> out;
    std::size_t total = 0;
    for (const auto& g : by_param) total += g.size();
    out.reserve(total);
    for (const auto& g : by_param) out.insert(out.end(), g.vec().begin(), g.vec().end());
    return out;
}

Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor& output_grad,
                   const std::map<std::size_t, Tensor>* injected) {
    const auto& layers = net.spec().layers;
    if (trace.io.size() != layers.size() + 1)
        throw std::invalid_argument("backward: trace does not match network depth");
    if (!same_shape(output_grad, trace.io.back()))
        throw std::invalid_argument("backward: output_grad shape mismatch with traced output");

    Gradients grads;
    grads.by_param.reserve(net.params().size());
    for (const auto& p : net.params()) grads.by_param.push_back(Tensor::zeros(p.value.shape()));
    grads.layer_input_grads.resize(layers.size());

    Tensor g = output_grad;
    for (std::size_t li = layers.size(); li-- > 0;) {
        const Tensor& x = trace.io[li];
        const LayerBinding& bind = net.bindings()[li];
        Tensor gx;

        if (const auto* d = std::get_if<DenseSpec>(&layers[li])) {
            const Tensor& w = net.params()[bind.w].value;
            gx = Tensor::zeros(x.shape());
            matmul_acc(gx, g, w);                       // dX = dY * W
            matmul_at_acc(grads.by_param[bind.w], g, x);  // dW = dY^T * X
            if (bind.b >= 0) {
                Tensor& gb = grads.by_param[bind.b];
                for (std::size_t i = 0; i < g.dim(0); ++i)
                    for (std::size_t j = 0; j < d->out; ++j) gb[j] += g.at(i, j);
            }
        } else if (const auto* c = std::get_if<Conv2DSpec>(&layers[li])) {
            ConvGeometry geo = conv_geometry(li, *c, x);
            std::size_t n = x.dim(0);
            std::size_t k = c->kernel;
            const Tensor& w = net.params()[bind.w].value;
            gx = Tensor::zeros(x.shape());
            Tensor& gw = grads.by_param[bind.w];
            Tensor& gb = grads.by_param[bind.b];
            const double* xd = x.data();
            const double* wd = w.data();
            const double* gd = g.data();
            double* gxd = gx.data();
            for (std::size_t ni = 0; ni < n; ++ni)
                for (std::size_t oc = 0; oc < c->out_ch; ++oc)
                    for (std::size_t oh = 0; oh < geo.h_out; ++oh)
                        for (std::size_t ow = 0; ow < geo.w_out; ++ow) {
                            double gv =
                                gd[((ni * c->out_ch + oc) * geo.h_out + oh) * geo.w_out + ow];
                            if (gv == 0.0) continue;
                            gb[oc] += gv;
                            for (std::size_t ic = 0; ic < c->in_ch; ++ic)
                                for (std::size_t kh = 0; kh < k; ++kh) {
                                    long ih = static_cast<long>(oh * c->stride + kh) - geo.pad;
                                    if (ih < 0 || ih >= static_cast<long>(geo.h_in)) continue;
                                    for (std::size_t kw = 0; kw < k; ++kw) {
                                        long iw =
                                            static_cast<long>(ow * c->stride + kw) - geo.pad;
                                        if (iw < 0 || iw >= static_cast<long>(geo.w_in))
                                            continue;
                                        std::size_t xi =
                                            ((ni * c->in_ch + ic) * geo.h_in + ih) * geo.w_in +
                                            iw;
                                        std::size_t wi = ((oc * c->in_ch + ic) * k + kh) * k + kw;
                                        gw[wi] += gv * xd[xi];
                                        gxd[xi] += gv * wd[wi];
                                    }
                                }
                        }
        } else if (std::holds_alternative<FlattenSpec>(layers[li])) {
            gx = g.reshaped(x.shape());
        } else if (const auto* a = std::get_if<ActivationSpec>(&layers[li])) {
            gx = Tensor::zeros(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * activation_slope(*a, x[i]);
        } else if (const auto* ln = std::get_if<LayerNormSpec>(&layers[li])) {
            (void)ln;
            const NormCache& cache = trace.norm_cache[li];
            std::size_t n = x.dim(0);
            std::size_t dfeat = x.row_size();
            Tensor gnorm = g;  // gradient w.r.t. pre-affine normalized values
            if (bind.gamma >= 0) {
                const Tensor& gamma = net.params()[bind.gamma].value;
                Tensor& ggamma = grads.by_param[bind.gamma];
                Tensor& gbeta = grads.by_param[bind.beta];
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < dfeat; ++j) {
                        double gv = g.data()[i * dfeat + j];
                        ggamma[j] += gv * cache.normalized.data()[i * dfeat + j];
                        gbeta[j] += gv;
                        gnorm.data()[i * dfeat + j] = gv * gamma[j];
                    }
            }
            gx = Tensor::zeros(x.shape());
            for (std::size_t i = 0; i < n; ++i) {
                const double* gn = gnorm.data() + i * dfeat;
                const double* nm = cache.normalized.data() + i * dfeat;
                double mean_g = 0.0, mean_gn = 0.0;
                for (std::size_t j = 0; j < dfeat; ++j) {
                    mean_g += gn[j];
                    mean_gn += gn[j] * nm[j];
                }
                mean_g /= static_cast<double>(dfeat);
                mean_gn /= static_cast<double>(dfeat);
                double* out = gx.data() + i * dfeat;
                for (std::size_t j = 0; j < dfeat; ++j)
                    out[j] = cache.inv_std[i] * (gn[j] - mean_g - nm[j] * mean_gn);
            }
        } else if (const auto* bn = std::get_if<BatchNormSpec>(&layers[li])) {
            (void)bn;
            const NormCache& cache = trace.norm_cache[li];
            std::size_t n = x.dim(0);
            std::size_t width = x.rank() == 4 ? x.dim(1) : x.row_size();
            std::size_t spatial = x.size() / (n * width);
            std::size_t per_group = n * spatial;
            Tensor gnorm = g;
            if (bind.gamma >= 0) {
                const Tensor& gamma = net.params()[bind.gamma].value;
                Tensor& ggamma = grads.by_param[bind.gamma];
                Tensor& gbeta = grads.by_param[bind.beta];
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < width; ++c) {
                        std::size_t base = (i * width + c) * spatial;
                        for (std::size_t s = 0; s < spatial; ++s) {
                            double gv = g.data()[base + s];
                            ggamma[c] += gv * cache.normalized.data()[base + s];
                            gbeta[c] += gv;
                            gnorm.data()[base + s] = gv * gamma[c];
                        }
                    }
            }
            gx = Tensor::zeros(x.shape());
            if (trace.mode == Mode::train) {
                std::vector<double> mean_g(width, 0.0), mean_gn(width, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < width; ++c) {
                        std::size_t base = (i * width + c) * spatial;
                        for (std::size_t s = 0; s < spatial; ++s) {
                            mean_g[c] += gnorm.data()[base + s];
                            mean_gn[c] += gnorm.data()[base + s] * cache.normalized.data()[base + s];
                        }
                    }
                for (std::size_t c = 0; c < width; ++c) {
                    mean_g[c] /= static_cast<double>(per_group);
                    mean_gn[c] /= static_cast<double>(per_group);
                }
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < width; ++c) {
                        std::size_t base = (i * width + c) * spatial;
                        for (std::size_t s = 0; s < spatial; ++s)
                            gx.data()[base + s] =
                                cache.inv_std[c] *
                                (gnorm.data()[base + s] - mean_g[c] -
                                 cache.normalized.data()[base + s] * mean_gn[c]);
                    }
            } else {
                // running stats are constants: d/dx ((x-m)/s) = 1/s
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < width; ++c) {
                        std::size_t base = (i * width + c) * spatial;
                        for (std::size_t s = 0; s < spatial; ++s)
                            gx.data()[base + s] = gnorm.data()[base + s] * cache.inv_std[c];
                    }
            }
        } else if (const auto* dn = std::get_if<DecomposedNormSpec>(&layers[li])) {
            const NormCache& cache = trace.norm_cache[li];
            std::size_t n = x.dim(0);
            std::size_t dfeat = x.dim(1);
            bool train = trace.mode == Mode::train;

            // Undo stage 2 (scaling): y = z / s(z); gradient to centered z.
            Tensor gz = g;
            if (dn->scale == NormAxis::batch) {
                if (train) {
                    std::vector<double> dot(dfeat, 0.0);
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < dfeat; ++j)
                            dot[j] += g.at(i, j) * cache.centered.at(i, j);
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < dfeat; ++j) {
                            double s = cache.inv_std[j];
                            double zc = cache.centered.at(i, j) - cache.scale_mean[j];
                            gz.at(i, j) = g.at(i, j) * s -
                                          zc * s * s * s * dot[j] / static_cast<double>(n);
                        }
                } else {
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < dfeat; ++j) gz.at(i, j) *= cache.inv_std[j];
                }
            } else if (dn->scale == NormAxis::feature) {
                for (std::size_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < dfeat; ++j)
                        dot += g.at(i, j) * cache.centered.at(i, j);
                    double s = cache.inv_std[i];
                    for (std::size_t j = 0; j < dfeat; ++j) {
                        double zc = cache.centered.at(i, j) - cache.scale_mean[i];
                        gz.at(i, j) = g.at(i, j) * s -
                                      zc * s * s * s * dot / static_cast<double>(dfeat);
                    }
                }
            }

            // Undo stage 1 (centering): y = x - mean(x); dx = dy - mean(dy).
            gx = gz;
            if (dn->center == NormAxis::batch && train) {
                for (std::size_t j = 0; j < dfeat; ++j) {
                    double m = 0.0;
                    for (std::size_t i = 0; i < n; ++i) m += gz.at(i, j);
                    m /= static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) gx.at(i, j) -= m;
                }
            } else if (dn->center == NormAxis::feature) {
                for (std::size_t i = 0; i < n; ++i) {
                    double m = 0.0;
                    for (std::size_t j = 0; j < dfeat; ++j) m += gz.at(i, j);
                    m /= static_cast<double>(dfeat);
                    for (std::size_t j = 0; j < dfeat; ++j) gx.at(i, j) -= m;
                }
            }
        }

        if (injected) {
            auto it = injected->find(li);
            if (it != injected->end()) {
                if (!same_shape(gx, it->second))
                    layer_error(li, layer_kind_name(layers[li]),
                                "injected gradient shape mismatch");
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += it->second[i];
            }
        }
        grads.layer_input_grads[li] = gx;
        g = std::move(gx);
    }
    grads.input_grad = g;
    return grads;
}

// ---------------------------------------------------------------------------
// Per-sample output gradients
// ---------------------------------------------------------------------------

std::vector<double> per_sample_output_gradient(const Network& net, const Tensor& x,
                                               std::size_t output_index) {
    Tensor batch = x;
    if (batch.rank() == 1) batch = batch.reshaped({1, batch.size()});
    if (batch.dim(0) != 1)
        throw std::invalid_argument("per_sample_output_gradient: expects a single sample");
    ForwardResult fr = forward_eval(net, batch);
    if (output_index >= fr.output.row_size())
        throw std::invalid_argument("per_sample_output_gradient: output_index out of range");
    Tensor seed = Tensor::zeros(fr.output.shape());
    seed[output_index] = 1.0;
    Gradients grads = backward(net, fr.trace, seed);
    return grads.flat();
}

}  // namespace plab
