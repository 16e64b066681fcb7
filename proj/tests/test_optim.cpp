#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "plab/losses.hpp"
#include "plab/network.hpp"
#include "plab/optim.hpp"
#include "plab/rng.hpp"

using namespace plab;

namespace {

NetworkSpec probe_mlp() {
    NetworkSpec spec;
    spec.layers = {DenseSpec{4, 6}, ActivationSpec{ActKind::relu}, DenseSpec{6, 3}};
    return spec;
}

Gradients zero_grads(const Network& net) {
    Gradients g;
    for (const auto& p : net.params()) g.by_param.push_back(Tensor::zeros(p.value.shape()));
    return g;
}

}  // namespace

TEST_CASE("adam first step moves each coordinate by about lr") {
    NetworkSpec spec;
    spec.layers = {DenseSpec{2, 2, false}};
    Network net = init_network(spec, 1);
    std::vector<double> before = net.flat_params();
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);

    Gradients g = zero_grads(net);
    for (std::size_t i = 0; i < 4; ++i) g.by_param[0][i] = 0.7;  // constant gradient
    adam_step(st, net, g);
    CHECK(st.t == 1);
    std::vector<double> after = net.flat_params();
    for (std::size_t i = 0; i < 4; ++i) {
        double delta = before[i] - after[i];
        // m-hat = g, v-hat = g^2 -> update = lr * g / (|g| + eps) ~ lr
        CHECK(delta == doctest::Approx(1e-3 * 0.7 / (0.7 + 1e-8)).epsilon(1e-9));
    }
}

TEST_CASE("zero gradients leave parameters unchanged forever") {
    Network net = init_network(probe_mlp(), 7);
    std::vector<double> before = net.flat_params();
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-2);
    Gradients g = zero_grads(net);
    for (int i = 0; i < 50; ++i) adam_step(st, net, g);
    CHECK(net.flat_params() == before);

    OptimizerState sg = make_optimizer(net, OptAlgo::sgd, 1e-2);
    for (int i = 0; i < 50; ++i) sgd_step(sg, net, g);
    CHECK(net.flat_params() == before);
}

TEST_CASE("sgd steps along the negative gradient") {
    NetworkSpec spec;
    spec.layers = {DenseSpec{1, 1, false}};
    Network net = init_network(spec, 1);
    net.params()[0].value[0] = 1.0;
    OptimizerState st = make_optimizer(net, OptAlgo::sgd, 0.1);
    Gradients g = zero_grads(net);
    g.by_param[0][0] = 1.0;
    sgd_step(st, net, g);
    CHECK(net.params()[0].value[0] == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("adam solves a 1-d quadratic to 1e-3 within 5000 steps") {
    NetworkSpec spec;
    spec.layers = {DenseSpec{1, 1, false}};
    Network net = init_network(spec, 1);
    net.params()[0].value[0] = 0.0;
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-2);
    Gradients g = zero_grads(net);
    for (int i = 0; i < 5000; ++i) {
        double theta = net.params()[0].value[0];
        g.by_param[0][0] = 2.0 * (theta - 3.0);  // d/dtheta (theta-3)^2
        adam_step(st, net, g);
    }
    CHECK(std::fabs(net.params()[0].value[0] - 3.0) < 1e-3);
}

TEST_CASE("adam update magnitude stays bounded by lr * 10") {
    Network net = init_network(probe_mlp(), 3);
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);
    Rng rng(9);
    for (int step = 0; step < 200; ++step) {
        Gradients g = zero_grads(net);
        for (auto& t : g.by_param)
            for (std::size_t i = 0; i < t.size(); ++i)
                t[i] = rng.normal() * std::pow(10.0, rng.uniform(-3.0, 3.0));
        std::vector<double> before = net.flat_params();
        adam_step(st, net, g);
        std::vector<double> after = net.flat_params();
        for (std::size_t i = 0; i < before.size(); ++i)
            CHECK(std::fabs(after[i] - before[i]) <= 1e-3 * 10.0);
    }
}

TEST_CASE("nan gradient aborts naming the parameter") {
    Network net = init_network(probe_mlp(), 3);
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);
    Gradients g = zero_grads(net);
    g.by_param[2][1] = std::nan("");
    CHECK_THROWS_WITH_AS(adam_step(st, net, g), doctest::Contains("L2.W"),
                         std::runtime_error);
}

TEST_CASE("apply_l2 touches weights only") {
    Network net = init_network(probe_mlp(), 5);
    Gradients g = zero_grads(net);

    apply_l2(g, net, 0.0);
    for (const auto& t : g.by_param)
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);

    net.params()[0].value[0] = 2.0;
    apply_l2(g, net, 0.5);
    CHECK(g.by_param[0][0] == doctest::Approx(1.0).epsilon(1e-15));
    // bias gradients untouched
    for (std::size_t i = 0; i < g.by_param[1].size(); ++i) CHECK(g.by_param[1][i] == 0.0);
}

TEST_CASE("apply_l2 exempts norm gains and shifts") {
    NetworkSpec spec;
    spec.layers = {DenseSpec{4, 6}, LayerNormSpec{1e-5, true}, ActivationSpec{ActKind::relu},
                   DenseSpec{6, 2}};
    Network net = init_network(spec, 6);
    Gradients g = zero_grads(net);
    apply_l2(g, net, 1.0);
    for (std::size_t pi = 0; pi < net.params().size(); ++pi) {
        const auto& name = net.params()[pi].name;
        bool is_w = name.ends_with(".W");
        for (std::size_t i = 0; i < g.by_param[pi].size(); ++i) {
            if (is_w)
                CHECK(g.by_param[pi][i] == net.params()[pi].value[i]);
            else
                CHECK(g.by_param[pi][i] == 0.0);
        }
    }
}

TEST_CASE("gradient flow on the pure l2 penalty shrinks the norm monotonically") {
    Network net = init_network(probe_mlp(), 8);
    OptimizerState st = make_optimizer(net, OptAlgo::sgd, 0.1);
    double prev = net.params()[0].value.frobenius_norm();
    for (int i = 0; i < 20; ++i) {
        Gradients g = zero_grads(net);
        apply_l2(g, net, 0.5);
        sgd_step(st, net, g);
        double cur = net.params()[0].value.frobenius_norm();
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("rescale restores init norms and preserves direction") {
    Network net = init_network(probe_mlp(), 11);
    double init_norm = net.init_layer_norms().at("L0.W");
    Tensor doubled = net.params()[0].value;
    for (std::size_t i = 0; i < doubled.size(); ++i) doubled[i] *= 2.0;
    net.params()[0].value = doubled;

    RescaleOutcome out = rescale_weights_to_init(net);
    CHECK(out.skipped.empty());
    CHECK(net.params()[0].value.frobenius_norm() == doctest::Approx(init_norm).epsilon(1e-12));
    for (std::size_t i = 0; i < doubled.size(); ++i)
        CHECK(net.params()[0].value[i] == doctest::Approx(doubled[i] * 0.5).epsilon(1e-12));
}

TEST_CASE("rescale right after init is a no-op") {
    Network net = init_network(probe_mlp(), 12);
    std::vector<double> before = net.flat_params();
    rescale_weights_to_init(net);
    std::vector<double> after = net.flat_params();
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-12));
}

TEST_CASE("rescale skips zero-norm layers with a warning record") {
    Network net = init_network(probe_mlp(), 13);
    for (std::size_t i = 0; i < net.params()[0].value.size(); ++i)
        net.params()[0].value[i] = 0.0;
    RescaleOutcome out = rescale_weights_to_init(net);
    REQUIRE(out.skipped.size() == 1);
    CHECK(out.skipped[0] == "L0.W");
    for (std::size_t i = 0; i < net.params()[0].value.size(); ++i)
        CHECK(net.params()[0].value[i] == 0.0);
}

// ---------------------------------------------------------------------------
// ReDO
// ---------------------------------------------------------------------------

namespace {

ForwardTrace probe_trace(Network& net, std::uint64_t seed, std::size_t batch = 16) {
    Rng rng(seed);
    std::size_t in_dim = std::get<DenseSpec>(net.spec().layers[0]).in;
    Tensor x = Tensor::zeros({batch, in_dim});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    return forward(net, x, Mode::train).trace;
}

}  // namespace

TEST_CASE("redo resets a silenced unit and leaves active nets untouched") {
    Network net = init_network(probe_mlp(), 21);
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);
    // silence unit 2: zero incoming weights and bias -> activation always 0
    for (std::size_t k = 0; k < 4; ++k) net.params()[0].value.at(2, k) = 0.0;
    net.params()[1].value[2] = 0.0;
    st.m[0].at(2, 0) = 0.5;  // stale moment that must be cleared
    st.v[2].at(0, 2) = 0.9;  // outgoing weight moment (L2.W column 2)

    ForwardTrace trace = probe_trace(net, 31);
    Rng rng(77);
    RedoOutcome out = redo_reset(net, trace, st, 0.1, rng);
    REQUIRE(out.reset_count == 1);
    CHECK(out.reset_units[0].first == 1);   // activation layer index
    CHECK(out.reset_units[0].second == 2);  // unit index

    // incoming weights redrawn (nonzero with overwhelming probability)
    double norm = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
        double w = net.params()[0].value.at(2, k);
        norm += w * w;
    }
    CHECK(norm > 0.0);
    CHECK(net.params()[1].value[2] == 0.0);
    // outgoing column zeroed
    for (std::size_t r = 0; r < 3; ++r) CHECK(net.params()[2].value.at(r, 2) == 0.0);
    // moments cleared
    CHECK(st.m[0].at(2, 0) == 0.0);
    CHECK(st.v[2].at(0, 2) == 0.0);
}

TEST_CASE("redo with all units active changes nothing") {
    Network net = init_network(probe_mlp(), 22);
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);
    ForwardTrace trace = probe_trace(net, 32);
    std::vector<double> before = net.flat_params();
    Rng rng(78);
    RedoOutcome out = redo_reset(net, trace, st, 1e-6, rng);
    CHECK(out.reset_count == 0);
    CHECK(net.flat_params() == before);
}

TEST_CASE("redo keeps probe-batch outputs unchanged") {
    Network net = init_network(probe_mlp(), 23);
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);
    for (std::size_t k = 0; k < 4; ++k) net.params()[0].value.at(0, k) = 0.0;
    net.params()[1].value[0] = 0.0;

    Rng rng0(33);
    Tensor x = Tensor::zeros({16, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng0.normal();
    Tensor before = forward_eval(net, x).output;
    ForwardTrace trace = forward(net, x, Mode::train).trace;
    Rng rng(79);
    redo_reset(net, trace, st, 0.1, rng);
    Tensor after = forward_eval(net, x).output;
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-12));
}

TEST_CASE("redo resets every unit of an all-zero layer") {
    Network net = init_network(probe_mlp(), 24);
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);
    // zero the entire first layer: all activations vanish
    for (std::size_t i = 0; i < net.params()[0].value.size(); ++i)
        net.params()[0].value[i] = 0.0;
    for (std::size_t i = 0; i < net.params()[1].value.size(); ++i)
        net.params()[1].value[i] = 0.0;
    ForwardTrace trace = probe_trace(net, 34);
    Rng rng(80);
    RedoOutcome out = redo_reset(net, trace, st, 0.1, rng);
    CHECK(out.reset_count == 6);
}

TEST_CASE("reset_optimizer_state zeroes moments and is idempotent") {
    Network net = init_network(probe_mlp(), 25);
    OptimizerState st = make_optimizer(net, OptAlgo::adam, 1e-3);
    Rng rng(10);
    for (int i = 0; i < 5; ++i) {
        Gradients g = zero_grads(net);
        for (auto& t : g.by_param)
            for (std::size_t j = 0; j < t.size(); ++j) t[j] = rng.normal();
        adam_step(st, net, g);
    }
    CHECK(st.t == 5);

    reset_optimizer_state(st);
    CHECK(st.t == 0);
    for (const auto& t : st.m)
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);

    // next step equals a fresh optimizer's first step
    Network clone = net;
    OptimizerState fresh = make_optimizer(clone, OptAlgo::adam, 1e-3);
    Gradients g = zero_grads(net);
    for (auto& t : g.by_param)
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = 0.3;
    adam_step(st, net, g);
    adam_step(fresh, clone, g);
    CHECK(net.flat_params() == clone.flat_params());

    reset_optimizer_state(st);
    OptimizerState copy = st;
    reset_optimizer_state(st);
    CHECK(st.t == copy.t);
}
