#include "plab/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "plab/rng.hpp"

namespace plab {

namespace {

constexpr double kKinkMargin = 1e-3;  // min |preact| near relu/leaky/abs kinks
constexpr double kRelFloor = 1e-3;    // denominator floor for relative error

double rel_err(double a, double b) {
    double denom = std::max({kRelFloor, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / denom;
}

struct CaseTargets {
    LossKind kind;
    double smoothing = 0.0;
    Tensor mse_target;
    std::vector<int> labels;
    std::vector<double> reals;
    int bound = 1;
};

double eval_loss(const Network& proto, const std::vector<double>& theta, const Tensor& batch,
                 const CaseTargets& tgt, Mode mode) {
    Network net = proto;  // scratch copy: train-mode buffer updates are discarded
    net.set_flat_params(theta);
    ForwardResult fr = mode == Mode::train ? forward(net, batch, Mode::train)
                                           : forward_eval(net, batch);
    switch (tgt.kind) {
        case LossKind::mse: return mse_loss(fr.output, tgt.mse_target).loss;
        case LossKind::xent: return xent_loss(fr.output, tgt.labels, tgt.smoothing).loss;
        case LossKind::two_hot: {
            TwoHotCodec codec(tgt.bound, tgt.smoothing);
            return codec.loss(fr.output, tgt.reals).loss;
        }
    }
    return 0.0;
}

// True when every kink-activation preactivation stays clear of its kink, so
// finite differences cannot cross a non-smooth point.
bool kinks_clear(const Network& net, const ForwardTrace& trace) {
    const auto& layers = net.spec().layers;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto* a = std::get_if<ActivationSpec>(&layers[li]);
        if (!a) continue;
        if (a->kind == ActKind::gelu || a->kind == ActKind::tanh_fn) continue;
        const Tensor& z = trace.io[li];
        for (std::size_t i = 0; i < z.size(); ++i)
            if (std::fabs(z[i] + a->input_offset) < kKinkMargin) return false;
    }
    return true;
}

struct CaseTemplate {
    std::string name;
    std::function<NetworkSpec()> build;
    std::size_t batch;
    std::size_t input_dim;          // flat width, or channel count for image inputs
    std::size_t image_hw = 0;       // nonzero -> {N, C, H, W} input
    Mode mode = Mode::train;
};

NetworkSpec mlp(std::vector<LayerSpec> layers) {
    NetworkSpec s;
    s.layers = std::move(layers);
    return s;
}

std::vector<CaseTemplate> case_templates() {
    std::vector<CaseTemplate> t;
    auto act = [](ActKind k, double offset = 0.0) {
        ActivationSpec a;
        a.kind = k;
        a.input_offset = offset;
        if (k == ActKind::leaky_relu) a.slope = 0.2;
        return LayerSpec{a};
    };
    auto dn = [](NormAxis center, NormAxis scale) {
        DecomposedNormSpec d;
        d.center = center;
        d.scale = scale;
        return LayerSpec{d};
    };

    t.push_back({"dense_bias", [&] { return mlp({DenseSpec{5, 3, true}}); }, 4, 5});
    t.push_back({"dense_nobias", [&] { return mlp({DenseSpec{5, 3, false}}); }, 4, 5});
    t.push_back({"mlp_relu", [&] {
                     return mlp({DenseSpec{6, 7}, ActivationSpec{ActKind::relu},
                                 DenseSpec{7, 3}});
                 },
                 5, 6});
    t.push_back({"mlp_leaky", [&] {
                     return mlp({DenseSpec{6, 7}, act(ActKind::leaky_relu), DenseSpec{7, 3}});
                 },
                 5, 6});
    t.push_back({"mlp_gelu", [&] {
                     return mlp({DenseSpec{6, 7}, act(ActKind::gelu), DenseSpec{7, 3}});
                 },
                 5, 6});
    t.push_back({"mlp_tanh", [&] {
                     return mlp({DenseSpec{6, 7}, act(ActKind::tanh_fn), DenseSpec{7, 3}});
                 },
                 5, 6});
    t.push_back({"mlp_abs", [&] {
                     return mlp({DenseSpec{6, 7}, act(ActKind::abs_fn), DenseSpec{7, 3}});
                 },
                 5, 6});
    t.push_back({"relu_offset", [&] {
                     return mlp({DenseSpec{6, 7}, act(ActKind::relu, 0.5), DenseSpec{7, 3}});
                 },
                 5, 6});
    t.push_back({"abs_offset", [&] {
                     return mlp({DenseSpec{6, 7}, act(ActKind::abs_fn, -0.3), DenseSpec{7, 3}});
                 },
                 5, 6});
    t.push_back({"layernorm_affine", [&] {
                     return mlp({DenseSpec{6, 8}, LayerNormSpec{1e-5, true},
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 3}});
                 },
                 5, 6});
    t.push_back({"layernorm_plain", [&] {
                     return mlp({DenseSpec{6, 8}, LayerNormSpec{1e-5, false},
                                 act(ActKind::gelu), DenseSpec{8, 3}});
                 },
                 5, 6});
    t.push_back({"batchnorm_affine", [&] {
                     return mlp({DenseSpec{6, 8}, BatchNormSpec{1e-5, 0.1, true},
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 3}});
                 },
                 6, 6});
    t.push_back({"batchnorm_plain", [&] {
                     return mlp({DenseSpec{6, 8}, BatchNormSpec{1e-5, 0.1, false},
                                 act(ActKind::tanh_fn), DenseSpec{8, 3}});
                 },
                 6, 6});
    t.push_back({"batchnorm_eval", [&] {
                     return mlp({DenseSpec{6, 8}, BatchNormSpec{1e-5, 0.1, true},
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 3}});
                 },
                 5, 6, 0, Mode::eval});
    t.push_back({"decnorm_bb", [&] {
                     return mlp({DenseSpec{6, 8}, dn(NormAxis::batch, NormAxis::batch),
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 3}});
                 },
                 6, 6});
    t.push_back({"decnorm_ff", [&] {
                     return mlp({DenseSpec{6, 8}, dn(NormAxis::feature, NormAxis::feature),
                                 act(ActKind::gelu), DenseSpec{8, 3}});
                 },
                 5, 6});
    t.push_back({"decnorm_bf", [&] {
                     return mlp({DenseSpec{6, 8}, dn(NormAxis::batch, NormAxis::feature),
                                 act(ActKind::tanh_fn), DenseSpec{8, 3}});
                 },
                 6, 6});
    t.push_back({"decnorm_fb", [&] {
                     return mlp({DenseSpec{6, 8}, dn(NormAxis::feature, NormAxis::batch),
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 3}});
                 },
                 6, 6});
    t.push_back({"decnorm_center_only", [&] {
                     return mlp({DenseSpec{6, 8}, dn(NormAxis::batch, NormAxis::none),
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 3}});
                 },
                 6, 6});
    t.push_back({"decnorm_scale_only", [&] {
                     return mlp({DenseSpec{6, 8}, dn(NormAxis::none, NormAxis::feature),
                                 act(ActKind::leaky_relu), DenseSpec{8, 3}});
                 },
                 5, 6});
    t.push_back({"decnorm_eval", [&] {
                     return mlp({DenseSpec{6, 8}, dn(NormAxis::batch, NormAxis::batch),
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 3}});
                 },
                 5, 6, 0, Mode::eval});
    t.push_back({"conv_valid", [&] {
                     return mlp({Conv2DSpec{2, 3, 3, 1, PadMode::valid},
                                 ActivationSpec{ActKind::relu}, FlattenSpec{},
                                 DenseSpec{48, 3}});
                 },
                 3, 2, 6});
    t.push_back({"conv_same", [&] {
                     return mlp({Conv2DSpec{2, 3, 3, 1, PadMode::same}, act(ActKind::gelu),
                                 FlattenSpec{}, DenseSpec{108, 3}});
                 },
                 3, 2, 6});
    t.push_back({"conv_stride2", [&] {
                     return mlp({Conv2DSpec{1, 4, 3, 2, PadMode::valid},
                                 act(ActKind::leaky_relu), FlattenSpec{}, DenseSpec{16, 3}});
                 },
                 3, 1, 5});
    t.push_back({"conv_stride2_same", [&] {
                     return mlp({Conv2DSpec{2, 3, 3, 2, PadMode::same}, act(ActKind::abs_fn),
                                 FlattenSpec{}, DenseSpec{27, 3}});
                 },
                 3, 2, 6});
    t.push_back({"conv_batchnorm", [&] {
                     return mlp({Conv2DSpec{1, 3, 3, 1, PadMode::valid},
                                 BatchNormSpec{1e-5, 0.1, true}, ActivationSpec{ActKind::relu},
                                 FlattenSpec{}, DenseSpec{27, 3}});
                 },
                 3, 1, 5});
    t.push_back({"deep_mixed", [&] {
                     return mlp({DenseSpec{6, 8}, LayerNormSpec{1e-5, true},
                                 act(ActKind::gelu), DenseSpec{8, 8},
                                 ActivationSpec{ActKind::relu}, DenseSpec{8, 5}});
                 },
                 4, 6});
    return t;
}

}  // namespace

double gradcheck_max_rel_err(const NetworkSpec& spec, LossKind loss, double smoothing,
                             int two_hot_bound, const Tensor& batch, std::uint64_t target_seed,
                             Mode mode, double h) {
    Network net = init_network(spec, spec.seed);
    std::vector<double> theta = net.flat_params();

    ForwardResult fr = mode == Mode::train ? forward(net, batch, Mode::train)
                                           : forward_eval(net, batch);
    std::size_t n = fr.output.dim(0);
    std::size_t k = fr.output.row_size();

    CaseTargets tgt;
    tgt.kind = loss;
    tgt.smoothing = smoothing;
    tgt.bound = two_hot_bound;
    Rng trng(target_seed);
    if (loss == LossKind::mse) {
        tgt.mse_target = Tensor::zeros(fr.output.shape());
        for (std::size_t i = 0; i < tgt.mse_target.size(); ++i)
            tgt.mse_target[i] = trng.normal();
    } else if (loss == LossKind::xent) {
        for (std::size_t i = 0; i < n; ++i)
            tgt.labels.push_back(static_cast<int>(trng.index(k)));
    } else {
        double m = static_cast<double>(two_hot_bound);
        for (std::size_t i = 0; i < n; ++i) tgt.reals.push_back(trng.uniform(-m, m));
    }

    // Analytic gradient.
    LossResult lr;
    switch (loss) {
        case LossKind::mse: lr = mse_loss(fr.output, tgt.mse_target); break;
        case LossKind::xent: lr = xent_loss(fr.output, tgt.labels, smoothing); break;
        case LossKind::two_hot: {
            TwoHotCodec codec(two_hot_bound, smoothing);
            lr = codec.loss(fr.output, tgt.reals);
            break;
        }
    }
    Gradients grads = backward(net, fr.trace, lr.grad);
    std::vector<double> analytic = grads.flat();

    double worst = 0.0;
    std::vector<double> probe = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        probe[i] = theta[i] + h;
        double lp = eval_loss(net, probe, batch, tgt, mode);
        probe[i] = theta[i] - h;
        double lm = eval_loss(net, probe, batch, tgt, mode);
        probe[i] = theta[i];
        worst = std::max(worst, rel_err(analytic[i], (lp - lm) / (2.0 * h)));
    }

    // Input gradient by differencing the batch.
    Tensor pbatch = batch;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        pbatch[i] = batch[i] + h;
        double lp = eval_loss(net, theta, pbatch, tgt, mode);
        pbatch[i] = batch[i] - h;
        double lm = eval_loss(net, theta, pbatch, tgt, mode);
        pbatch[i] = batch[i];
        worst = std::max(worst, rel_err(grads.input_grad[i], (lp - lm) / (2.0 * h)));
    }
    return worst;
}

GradcheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t min_cases,
                                    double tolerance) {
    GradcheckReport report;
    report.tolerance = tolerance;
    std::vector<CaseTemplate> templates = case_templates();
    const LossKind losses[3] = {LossKind::mse, LossKind::xent, LossKind::two_hot};

    for (std::size_t i = 0; i < min_cases; ++i) {
        const CaseTemplate& tmpl = templates[i % templates.size()];
        LossKind loss = losses[i % 3];
        double smoothing = loss == LossKind::mse ? 0.0 : (i % 2 == 0 ? 0.1 : 0.0);
        std::uint64_t case_seed = derive_seed(seed, "gradcheck", i);

        NetworkSpec spec = tmpl.build();
        spec.seed = derive_seed(case_seed, "init");

        // Redraw the batch until kink activations sit clear of their kinks.
        Network probe_net = init_network(spec, spec.seed);
        Tensor batch;
        std::size_t attempts = 0;
        for (; attempts < 50; ++attempts) {
            Rng brng(derive_seed(case_seed, "batch", attempts));
            if (tmpl.image_hw > 0) {
                batch = Tensor::zeros({tmpl.batch, tmpl.input_dim, tmpl.image_hw, tmpl.image_hw});
            } else {
                batch = Tensor::zeros({tmpl.batch, tmpl.input_dim});
            }
            for (std::size_t j = 0; j < batch.size(); ++j) batch[j] = brng.normal();
            Network scratch = probe_net;
            ForwardResult fr = tmpl.mode == Mode::train
                                   ? forward(scratch, batch, Mode::train)
                                   : forward_eval(scratch, batch);
            if (kinks_clear(probe_net, fr.trace)) break;
        }

        // two-hot bound from the output width (odd by construction).
        std::size_t out_width = 3;
        for (const auto& ls : spec.layers)
            if (const auto* d = std::get_if<DenseSpec>(&ls)) out_width = d->out;
        int m = static_cast<int>((out_width - 1) / 2);
        if (m < 1) m = 1;

        GradcheckCase gc;
        std::ostringstream nm;
        nm << tmpl.name << "/"
           << (loss == LossKind::mse ? "mse" : loss == LossKind::xent ? "xent" : "two_hot")
           << "#" << i;
        gc.name = nm.str();
        gc.reseeds = attempts;
        gc.param_count = probe_net.param_count();
        gc.max_rel_err = gradcheck_max_rel_err(spec, loss, smoothing, m, batch,
                                               derive_seed(case_seed, "target"), tmpl.mode);
        gc.pass = gc.max_rel_err < tolerance;
        report.worst_rel_err = std::max(report.worst_rel_err, gc.max_rel_err);
        report.cases.push_back(std::move(gc));
    }
    report.all_pass = true;
    for (const auto& c : report.cases) report.all_pass = report.all_pass && c.pass;
    return report;
}

}  // namespace plab
