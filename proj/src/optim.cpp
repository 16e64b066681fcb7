#include "plab/optim.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace plab {

namespace {

void check_finite(const Tensor& g, const std::string& name) {
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(g[i])) {
            std::ostringstream os;
            os << "non-finite gradient for parameter " << name;
            throw std::runtime_error(os.str());
        }
}

bool is_weight(const std::string& name) {
    return name.size() >= 2 && name.compare(name.size() - 2, 2, ".W") == 0;
}

}  // namespace

OptimizerState make_optimizer(const Network& net, OptAlgo algo, double lr) {
    OptimizerState st;
    st.algo = algo;
    st.lr = lr;
    st.m.reserve(net.params().size());
    st.v.reserve(net.params().size());
    for (const auto& p : net.params()) {
        st.m.push_back(Tensor::zeros(p.value.shape()));
        st.v.push_back(Tensor::zeros(p.value.shape()));
    }
    return st;
}

void adam_step(OptimizerState& state, Network& net, const Gradients& grads) {
    if (grads.by_param.size() != net.params().size())
        throw std::invalid_argument("adam_step: gradient/parameter count mismatch");
    state.t += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t pi = 0; pi < net.params().size(); ++pi) {
        Tensor& theta = net.params()[pi].value;
        const Tensor& g = grads.by_param[pi];
        check_finite(g, net.params()[pi].name);
        Tensor& m = state.m[pi];
        Tensor& v = state.v[pi];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            theta[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

void sgd_step(OptimizerState& state, Network& net, const Gradients& grads) {
    if (grads.by_param.size() != net.params().size())
        throw std::invalid_argument("sgd_step: gradient/parameter count mismatch");
    state.t += 1;
    for (std::size_t pi = 0; pi < net.params().size(); ++pi) {
        Tensor& theta = net.params()[pi].value;
        const Tensor& g = grads.by_param[pi];
        check_finite(g, net.params()[pi].name);
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= state.lr * g[i];
    }
}

void optimizer_step(OptimizerState& state, Network& net, const Gradients& grads) {
    if (state.algo == OptAlgo::adam)
        adam_step(state, net, grads);
    else
        sgd_step(state, net, grads);
}

void apply_l2(Gradients& grads, const Network& net, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("apply_l2: lambda must be >= 0");
    if (lambda == 0.0) return;
    for (std::size_t pi = 0; pi < net.params().size(); ++pi) {
        if (!is_weight(net.params()[pi].name)) continue;
        const Tensor& theta = net.params()[pi].value;
        Tensor& g = grads.by_param[pi];
        for (std::size_t i = 0; i < theta.size(); ++i) g[i] += lambda * theta[i];
    }
}

RescaleOutcome rescale_weights_to_init(Network& net) {
    RescaleOutcome out;
    for (auto& p : net.params()) {
        if (!is_weight(p.name)) continue;
        double target = net.init_layer_norms().at(p.name);
        double cur = p.value.frobenius_norm();
        if (cur < 1e-12) {
            out.skipped.push_back(p.name);
            continue;
        }
        double s = target / cur;
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] *= s;
        out.rescaled.push_back(p.name);
    }
    return out;
}

void reset_optimizer_state(OptimizerState& state) {
    state.t = 0;
    for (auto& t : state.m)
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
    for (auto& t : state.v)
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
}

// ---------------------------------------------------------------------------
// ReDO
// ---------------------------------------------------------------------------

namespace {

bool parameterized(const LayerSpec& ls) {
    return std::holds_alternative<DenseSpec>(ls) || std::holds_alternative<Conv2DSpec>(ls);
}

}  // namespace

RedoOutcome redo_reset(Network& net, const ForwardTrace& trace, OptimizerState& state,
                       double tau, Rng& rng) {
    if (tau < 0.0) throw std::invalid_argument("redo_reset: tau must be >= 0");
    if (trace.io.size() != net.num_layers() + 1)
        throw std::invalid_argument("redo_reset: trace does not match network");
    RedoOutcome out;
    const auto& layers = net.spec().layers;

    for (std::size_t li = 0; li < layers.size(); ++li) {
        if (!std::holds_alternative<ActivationSpec>(layers[li])) continue;

        // Incoming parameterized layer (skipping norm layers in between).
        std::ptrdiff_t in_li = -1;
        for (std::size_t j = li; j-- > 0;) {
            if (parameterized(layers[j])) {
                in_li = static_cast<std::ptrdiff_t>(j);
                break;
            }
            if (std::holds_alternative<FlattenSpec>(layers[j])) break;
        }
        if (in_li < 0) continue;  // activation acts on raw inputs; nothing to redraw

        // Outgoing parameterized layer, tracking an intervening Flatten.
        std::ptrdiff_t out_li = -1;
        bool via_flatten = false;
        for (std::size_t j = li + 1; j < layers.size(); ++j) {
            if (parameterized(layers[j])) {
                out_li = static_cast<std::ptrdiff_t>(j);
                break;
            }
            if (std::holds_alternative<FlattenSpec>(layers[j])) via_flatten = true;
        }

        const Tensor& act = trace.io[li + 1];
        std::size_t n = act.dim(0);
        bool conv_act = act.rank() == 4;
        std::size_t units = conv_act ? act.dim(1) : act.row_size();
        std::size_t spatial = conv_act ? act.dim(2) * act.dim(3) : 1;

        // Mean |activation| per unit over batch (and spatial extent).
        std::vector<double> mean_abs(units, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t u = 0; u < units; ++u) {
                const double* p = act.data() + (i * units + u) * spatial;
                for (std::size_t s = 0; s < spatial; ++s) mean_abs[u] += std::fabs(p[s]);
            }
        double layer_mean = 0.0;
        for (std::size_t u = 0; u < units; ++u) {
            mean_abs[u] /= static_cast<double>(n * spatial);
            layer_mean += mean_abs[u];
        }
        layer_mean /= static_cast<double>(units);

        const LayerBinding& in_bind = net.bindings()[static_cast<std::size_t>(in_li)];
        Tensor& w_in = net.params()[in_bind.w].value;
        std::size_t fan = w_in.size() / units;  // row length for dense, per-channel for conv
        double sd = net.init_stddev(static_cast<std::size_t>(in_li));

        for (std::size_t u = 0; u < units; ++u) {
            double score = layer_mean > 0.0 ? mean_abs[u] / layer_mean : 0.0;
            if (score > tau) continue;
            out.reset_count += 1;
            out.reset_units.emplace_back(li, u);

            // Incoming weights redrawn, bias zeroed, moments zeroed.
            for (std::size_t k = 0; k < fan; ++k) {
                w_in[u * fan + k] = rng.normal(0.0, sd);
                state.m[in_bind.w][u * fan + k] = 0.0;
                state.v[in_bind.w][u * fan + k] = 0.0;
            }
            if (in_bind.b >= 0) {
                net.params()[in_bind.b].value[u] = 0.0;
                state.m[in_bind.b][u] = 0.0;
                state.v[in_bind.b][u] = 0.0;
            }

            // Outgoing weights zeroed, moments zeroed.
            if (out_li >= 0) {
                const LayerBinding& ob = net.bindings()[static_cast<std::size_t>(out_li)];
                Tensor& w_out = net.params()[ob.w].value;
                auto zero_out = [&](std::size_t flat) {
                    w_out[flat] = 0.0;
                    state.m[ob.w][flat] = 0.0;
                    state.v[ob.w][flat] = 0.0;
                };
                if (const auto* dnext = std::get_if<DenseSpec>(&layers[out_li])) {
                    std::size_t in_w = dnext->in;
                    if (via_flatten && conv_act) {
                        for (std::size_t r = 0; r < dnext->out; ++r)
                            for (std::size_t s = 0; s < spatial; ++s)
                                zero_out(r * in_w + u * spatial + s);
                    } else {
                        for (std::size_t r = 0; r < dnext->out; ++r) zero_out(r * in_w + u);
                    }
                } else if (const auto* cnext = std::get_if<Conv2DSpec>(&layers[out_li])) {
                    std::size_t kk = cnext->kernel * cnext->kernel;
                    for (std::size_t oc = 0; oc < cnext->out_ch; ++oc)
                        for (std::size_t k = 0; k < kk; ++k)
                            zero_out((oc * cnext->in_ch + u) * kk + k);
                }
            }
        }
    }
    return out;
}

}  // namespace plab
