#include "plab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

#include "plab/diagnostics.hpp"
#include "plab/rng.hpp"

namespace plab {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
    std::vector<std::size_t> shape = src.shape();
    shape[0] = rows.size();
    Tensor out = Tensor::zeros(shape);
    const std::size_t rs = src.row_size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* s = src.data() + rows[i] * rs;
        std::copy(s, s + rs, out.data() + i * rs);
    }
    return out;
}

Tensor head_rows(const Tensor& src, std::size_t count) {
    std::vector<std::size_t> rows(count);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return gather_rows(src, rows);
}

std::vector<std::size_t> sample_rows(Rng& rng, std::size_t n, std::size_t count) {
    std::vector<std::size_t> rows(count);
    for (auto& r : rows) r = rng.index(n);
    return rows;
}

// ---------------------------------------------------------------------------
// Loss dispatch
// ---------------------------------------------------------------------------

struct BatchLoss {
    double loss = 0.0;
    Tensor grad;
    double accuracy = kNaN;  // NaN for regression
};

double argmax_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.dim(0);
    const std::size_t k = logits.row_size();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data() + i * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

// Shared machinery of the experiment drivers: validated config plus the
// loss/accuracy computation for one forward output.
class TrainContext {
public:
    explicit TrainContext(const ExperimentConfig& config) : cfg_(config) {
        if (cfg_.cadence < 1) {
            throw std::invalid_argument("harness: cadence must be >= 1");
        }
        if (cfg_.batch_size < 1) {
            throw std::invalid_argument("harness: batch_size must be >= 1");
        }
        if (cfg_.probe_rows < 1) {
            throw std::invalid_argument("harness: probe_rows must be >= 1");
        }
        if (!(cfg_.lr > 0.0) || !std::isfinite(cfg_.lr)) {
            throw std::invalid_argument("harness: lr must be positive and finite");
        }
        if (cfg_.targets.has_value()) {
            if (cfg_.loss == LossKind::xent) {
                throw std::invalid_argument(
                    "harness: regression targets require an mse or two_hot loss");
            }
            if (cfg_.loss == LossKind::two_hot) {
                codec_.emplace(cfg_.two_hot_bound, cfg_.smoothing);
            }
        } else {
            if (!cfg_.stream.base.classification()) {
                throw std::invalid_argument(
                    "harness: a classification stream needs labelled data "
                    "(or provide a regression target generator)");
            }
            if (cfg_.loss != LossKind::xent) {
                throw std::invalid_argument(
                    "harness: classification streams use the xent loss");
            }
        }
    }

    const ExperimentConfig& cfg() const { return cfg_; }
    bool regression() const { return cfg_.targets.has_value(); }

    // Loss of `out` (a forward pass over `xb`) against the configured
    // objective. `labels` are the rows' labels (classification only);
    // `step` feeds step-dependent target generators.
    BatchLoss batch_loss(const Tensor& out, const Tensor& xb,
                         const std::vector<int>& labels, std::uint64_t step) const {
        BatchLoss bl;
        if (!regression()) {
            LossResult r = xent_loss(out, labels, cfg_.smoothing);
            bl.loss = r.loss;
            bl.grad = std::move(r.grad);
            bl.accuracy = argmax_accuracy(out, labels);
            return bl;
        }
        const Tensor y = gen_regression_targets(*cfg_.targets, xb, step);
        if (cfg_.loss == LossKind::mse) {
            LossResult r = mse_loss(out, y);
            bl.loss = r.loss;
            bl.grad = std::move(r.grad);
        } else {
            std::vector<double> targets(y.vec());
            LossResult r = codec_->loss(out, targets);
            bl.loss = r.loss;
            bl.grad = std::move(r.grad);
        }
        return bl;
    }

private:
    ExperimentConfig cfg_;
    std::optional<TwoHotCodec> codec_;
};

// One minibatch training step; mutates net/opt and consumes the batch stream.
// Returns the training loss (possibly non-finite).
double train_step(const TrainContext& ctx, Network& net, OptimizerState& opt,
                  Rng& batch_rng, const Dataset& data, std::uint64_t global_step) {
    const ExperimentConfig& cfg = ctx.cfg();
    const std::vector<std::size_t> rows = sample_rows(batch_rng, data.size(), cfg.batch_size);
    const Tensor xb = gather_rows(data.inputs, rows);
    std::vector<int> labels;
    if (!ctx.regression()) {
        labels.reserve(rows.size());
        for (const std::size_t r : rows) labels.push_back(data.labels[r]);
    }
    ForwardResult fr = forward(net, xb, Mode::train);
    BatchLoss bl = ctx.batch_loss(fr.output, xb, labels, global_step);
    if (!std::isfinite(bl.loss)) return bl.loss;

    std::map<std::size_t, Tensor> injected;
    const std::map<std::size_t, Tensor>* inj = nullptr;
    if (cfg.reg.feature_norm > 0.0) {
        const auto ro = readout_layer(net);
        if (!ro) {
            throw std::invalid_argument(
                "harness: feature_norm regularization needs a Dense readout layer");
        }
        Tensor g = fr.trace.io[*ro];
        const double scale = 2.0 * cfg.reg.feature_norm / static_cast<double>(g.dim(0));
        for (auto& v : g.vec()) v *= scale;
        injected.emplace(*ro, std::move(g));
        inj = &injected;
    }
    Gradients grads = backward(net, fr.trace, bl.grad, inj);
    if (cfg.reg.l2 > 0.0) apply_l2(grads, net, cfg.reg.l2);
    optimizer_step(opt, net, grads);
    return bl.loss;
}

std::pair<std::size_t, std::size_t> census_counts(const UnitCensus& census) {
    std::size_t dead = 0;
    std::size_t zombie = 0;
    for (const LayerCensus& layer : census.layers) {
        for (const UnitStat& u : layer.units) {
            if (u.dead) ++dead;
            if (u.zombie) ++zombie;
        }
    }
    return {dead, zombie};
}

}  // namespace

// ---------------------------------------------------------------------------
// Iterated nonstationary training
// ---------------------------------------------------------------------------

RunResult run_iterated_training(const ExperimentConfig& config, const MetricSink& sink) {
    const TrainContext ctx(config);
    Network net = init_network(config.net, derive_seed(config.seed, "init"));
    OptimizerState opt = make_optimizer(net, config.algo, config.lr);

    RunResult result;
    auto emit = [&](MetricRecord rec) {
        if (sink) sink(rec);
        result.records.push_back(std::move(rec));
    };
    if (config.stream.num_tasks == 0) {
        result.net = std::move(net);
        result.opt = std::move(opt);
        return result;
    }

    TaskCursor cursor(config.stream);
    Rng batch_rng = derive_rng(config.seed, "batch");
    std::uint64_t global = 0;

    Tensor probe_x;
    std::vector<int> probe_labels;
    auto rebuild_probe = [&]() {
        const Dataset& d = cursor.current();
        const std::size_t rows = std::min(config.probe_rows, d.size());
        probe_x = head_rows(d.inputs, rows);
        probe_labels.clear();
        if (!ctx.regression()) {
            probe_labels.assign(d.labels.begin(),
                                d.labels.begin() + static_cast<std::ptrdiff_t>(rows));
        }
    };
    auto measure = [&](std::size_t task, std::string boundary) {
        MetricRecord rec;
        rec.step = global;
        rec.task = task;
        rec.boundary = std::move(boundary);
        const Tensor out = forward_eval(net, probe_x).output;
        const BatchLoss bl = ctx.batch_loss(out, probe_x, probe_labels, global);
        rec.loss = bl.loss;
        rec.accuracy = bl.accuracy;
        const UnitCensus census =
            unit_census(net, probe_x, std::min<std::size_t>(32, probe_x.batch()));
        rec.dead_frac = census.dead_fraction;
        rec.zombie_frac = census.zombie_fraction;
        const ParamNorms norms = param_norms(net);
        rec.param_norm = norms.total;
        for (const auto& e : norms.per_layer) rec.layer_norms.emplace_back(e.layer, e.norm);
        rec.entropy = (!ctx.regression() && out.row_size() > 1) ? predictive_entropy(out) : 0.0;
        return rec;
    };

    rebuild_probe();
    emit(measure(0, ""));  // initial state

    for (std::size_t t = 0; t < config.stream.num_tasks; ++t) {
        const Dataset& data = cursor.current();
        for (std::size_t s = 1; s <= config.stream.steps_per_task; ++s) {
            const double loss = train_step(ctx, net, opt, batch_rng, data, global);
            if (!std::isfinite(loss)) {
                MetricRecord rec;
                rec.step = global;
                rec.task = t;
                rec.loss = loss;
                rec.accuracy = kNaN;
                rec.diverged = true;
                emit(std::move(rec));
                result.diverged = true;
                result.net = std::move(net);
                result.opt = std::move(opt);
                return result;
            }
            ++global;
            if (s != config.stream.steps_per_task && global % config.cadence == 0) {
                emit(measure(t, ""));
            }
        }
        if (t + 1 == config.stream.num_tasks) {
            emit(measure(t, ""));  // end of the run; no boundary to pair
        } else {
            emit(measure(t, "before_switch"));
            cursor.advance();
            rebuild_probe();
            emit(measure(t + 1, "after_switch"));
            if (config.resets.reset_optimizer) reset_optimizer_state(opt);
            if (config.resets.rescale_weights) rescale_weights_to_init(net);
            if (config.resets.redo_tau >= 0.0) {
                const ForwardResult fr = forward_eval(net, probe_x);
                Rng redo_rng = derive_rng(config.seed, "redo", t);
                redo_reset(net, fr.trace, opt, config.resets.redo_tau, redo_rng);
            }
        }
    }
    result.net = std::move(net);
    result.opt = std::move(opt);
    return result;
}

// ---------------------------------------------------------------------------
// Plasticity probe
// ---------------------------------------------------------------------------

ProbeResult probe_plasticity(const Network& checkpoint, const ProbeConfig& probe) {
    if (!(probe.rho > 0.0) || !std::isfinite(probe.rho)) {
        throw std::invalid_argument("probe_plasticity: rho must be positive and finite");
    }
    if (probe.steps < 1) {
        throw std::invalid_argument("probe_plasticity: steps must be >= 1");
    }
    if (probe.inputs.batch() == 0) {
        throw std::invalid_argument("probe_plasticity: probe input set is empty");
    }

    const Tensor f_ref = forward_eval(checkpoint, probe.inputs).output;
    const std::size_t n = f_ref.dim(0);
    const std::size_t width = f_ref.row_size();

    // Perturbation: one frozen sine-feature net per output column, rescaled
    // so the whole matrix has Frobenius norm rho.
    Tensor eta = Tensor::zeros(f_ref.shape());
    for (std::size_t c = 0; c < width; ++c) {
        RegressionTargetGen gen;
        gen.kind = TargetKind::offset_sine;
        gen.b = 0.0;
        gen.seed = derive_seed(probe.seed, "eta", c);
        const Tensor col = gen_regression_targets(gen, probe.inputs, 0);
        for (std::size_t i = 0; i < n; ++i) eta[i * width + c] = col[i];
    }
    const double norm = eta.frobenius_norm();
    if (!(norm > 0.0)) {
        throw std::runtime_error("probe_plasticity: perturbation has zero norm");
    }
    const double scale = probe.rho / norm;
    for (auto& v : eta.vec()) v *= scale;

    Tensor target = f_ref;
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += eta[i];

    Network net = checkpoint;  // the checkpoint is never touched
    OptimizerState opt = make_optimizer(net, OptAlgo::adam, probe.lr);

    auto eval_loss = [&]() {
        const Tensor out = forward_eval(net, probe.inputs).output;
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double d = out[i] - target[i];
            acc += d * d;
        }
        return acc;
    };

    std::vector<std::size_t> marks{0};
    for (std::size_t p = 1; p < probe.steps; p *= 2) marks.push_back(p);
    marks.push_back(probe.steps);

    ProbeResult res;
    std::size_t mark_at = 0;
    for (std::size_t step = 0; step <= probe.steps; ++step) {
        if (mark_at < marks.size() && marks[mark_at] == step) {
            const double loss = eval_loss();
            res.loss_curve.emplace_back(step, loss);
            ++mark_at;
            if (!std::isfinite(loss)) {
                res.diverged = true;
                break;
            }
        }
        if (step == probe.steps) break;
        const ForwardResult fr = forward(net, probe.inputs, Mode::train);
        Tensor grad = Tensor::zeros(fr.output.shape());
        for (std::size_t i = 0; i < grad.size(); ++i) {
            grad[i] = 2.0 * (fr.output[i] - target[i]);
        }
        if (grad.has_nonfinite()) {
            res.loss_curve.emplace_back(step + 1, kNaN);
            res.diverged = true;
            break;
        }
        const Gradients grads = backward(net, fr.trace, grad);
        optimizer_step(opt, net, grads);
    }
    res.initial_loss = res.loss_curve.front().second;
    res.final_loss = res.loss_curve.back().second;
    return res;
}

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : cap_(capacity) {
    if (capacity == 0) {
        throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
    }
}

void ReplayBuffer::push(const Transition& t) {
    if (buf_.size() < cap_) {
        buf_.push_back(t);
        return;
    }
    buf_[head_] = t;  // overwrite the oldest entry
    head_ = (head_ + 1) % cap_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
    if (i >= buf_.size()) {
        throw std::out_of_range("ReplayBuffer: index " + std::to_string(i) +
                                " out of range for size " + std::to_string(buf_.size()));
    }
    if (buf_.size() < cap_) return buf_[i];
    return buf_[(head_ + i) % cap_];
}

const Transition& ReplayBuffer::sample(Rng& rng) const {
    if (buf_.empty()) {
        throw std::out_of_range("ReplayBuffer: cannot sample from an empty buffer");
    }
    return buf_[rng.index(buf_.size())];
}

// ---------------------------------------------------------------------------
// Bandit DQN
// ---------------------------------------------------------------------------

Tensor bandit_q_values(const Network& net, const Tensor& states, LossKind head,
                       int two_hot_bound) {
    Tensor out = forward_eval(net, states).output;
    if (head == LossKind::mse) return out;
    if (head != LossKind::two_hot) {
        throw std::invalid_argument("bandit_q_values: head must be mse or two_hot");
    }
    const TwoHotCodec codec(two_hot_bound, 0.0);
    const std::size_t atoms = codec.num_atoms();
    const std::size_t width = out.row_size();
    if (width % atoms != 0) {
        throw std::invalid_argument("bandit_q_values: output width " +
                                    std::to_string(width) +
                                    " is not a multiple of the atom count " +
                                    std::to_string(atoms));
    }
    const std::size_t n = out.dim(0);
    const std::size_t actions = width / atoms;
    Tensor q = Tensor::zeros({n, actions});
    Tensor block = Tensor::zeros({n, atoms});
    for (std::size_t a = 0; a < actions; ++a) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = out.data() + i * width + a * atoms;
            std::copy(row, row + atoms, block.data() + i * atoms);
        }
        const std::vector<double> vals = codec.decode_logits(block);
        for (std::size_t i = 0; i < n; ++i) q.at(i, a) = vals[i];
    }
    return q;
}

BanditResult run_bandit_dqn(const BanditMDP& mdp, const BanditConfig& config) {
    if (!mdp.dataset.classification()) {
        throw std::invalid_argument("run_bandit_dqn: the bandit needs a labelled dataset");
    }
    if (!(mdp.gamma >= 0.0 && mdp.gamma < 1.0)) {
        throw std::invalid_argument("run_bandit_dqn: gamma must be in [0, 1)");
    }
    if (config.head != LossKind::mse && config.head != LossKind::two_hot) {
        throw std::invalid_argument("run_bandit_dqn: head must be mse or two_hot");
    }
    if (config.batch_size < 1 || config.target_period < 1 || config.cadence < 1) {
        throw std::invalid_argument(
            "run_bandit_dqn: batch_size, target_period and cadence must be >= 1");
    }
    const std::size_t actions = static_cast<std::size_t>(mdp.num_actions());

    int bound = config.two_hot_bound;
    std::optional<TwoHotCodec> codec;
    if (config.head == LossKind::two_hot) {
        const double vmax = mdp.alpha / (1.0 - mdp.gamma);
        if (bound <= 0) bound = static_cast<int>(std::ceil(vmax));
        if (static_cast<double>(bound) < vmax) {
            throw std::invalid_argument(
                "run_bandit_dqn: two-hot bound M = " + std::to_string(bound) +
                " is below alpha/(1-gamma) = " + std::to_string(vmax) +
                "; value targets would leave the atom range");
        }
        codec.emplace(bound, config.smoothing);
    }
    const std::size_t width =
        config.head == LossKind::mse ? actions : actions * codec->num_atoms();

    Network net = init_network(config.net, derive_seed(config.seed, "init"));
    {
        const Tensor out = forward_eval(net, mdp.dataset.inputs.slice_batch(0)).output;
        if (out.row_size() != width) {
            throw std::invalid_argument("run_bandit_dqn: Q network emits " +
                                        std::to_string(out.row_size()) +
                                        " outputs per state; expected " +
                                        std::to_string(width));
        }
    }
    Network target_net = net;
    OptimizerState opt = make_optimizer(net, OptAlgo::adam, config.lr);
    ReplayBuffer buffer(config.buffer_capacity);

    Rng env_rng = derive_rng(config.seed, "env");
    Rng act_rng = derive_rng(config.seed, "action");
    Rng replay_rng = derive_rng(config.seed, "replay");

    const std::size_t probe_n = std::min<std::size_t>(64, mdp.dataset.size());
    const Tensor probe_states = head_rows(mdp.dataset.inputs, probe_n);

    BanditResult res;
    auto record_point = [&](std::size_t step, double td_loss) {
        MetricRecord rec;
        rec.step = step;
        rec.loss = td_loss;
        rec.accuracy = kNaN;
        const UnitCensus census =
            unit_census(net, probe_states, std::min<std::size_t>(32, probe_n));
        rec.dead_frac = census.dead_fraction;
        rec.zombie_frac = census.zombie_fraction;
        const ParamNorms norms = param_norms(net);
        rec.param_norm = norms.total;
        for (const auto& e : norms.per_layer) rec.layer_norms.emplace_back(e.layer, e.norm);
        res.records.push_back(std::move(rec));

        const Tensor q = bandit_q_values(net, probe_states, config.head, bound);
        double mean_greedy = 0.0;
        for (std::size_t i = 0; i < q.dim(0); ++i) {
            const double* row = q.row(i);
            mean_greedy += *std::max_element(row, row + q.dim(1));
        }
        mean_greedy /= static_cast<double>(q.dim(0));
        res.value_curve.emplace_back(step, mean_greedy);
    };

    BanditObservation cur = bandit_transition(mdp, env_rng);
    const std::size_t learn_after = std::max(config.warmup, config.batch_size);
    std::size_t learner_steps = 0;
    double last_loss = kNaN;

    for (std::size_t step = 1; step <= config.steps; ++step) {
        const int a = static_cast<int>(act_rng.index(actions));
        const double r = bandit_reward(mdp, a, cur.label);
        const BanditObservation next = bandit_transition(mdp, env_rng);
        buffer.push({cur.index, a, r, next.index});
        cur = next;
        if (buffer.size() < learn_after) continue;

        std::vector<std::size_t> state_rows(config.batch_size);
        std::vector<std::size_t> next_rows(config.batch_size);
        std::vector<int> taken(config.batch_size);
        std::vector<double> rewards(config.batch_size);
        for (std::size_t i = 0; i < config.batch_size; ++i) {
            const Transition& tr = buffer.sample(replay_rng);
            state_rows[i] = tr.obs;
            next_rows[i] = tr.next_obs;
            taken[i] = tr.action;
            rewards[i] = tr.reward;
        }
        const Tensor states = gather_rows(mdp.dataset.inputs, state_rows);
        const Tensor next_states = gather_rows(mdp.dataset.inputs, next_rows);

        // Bootstrapped TD target from the frozen target network.
        std::vector<double> y(config.batch_size);
        if (mdp.gamma > 0.0) {
            const Tensor qn = bandit_q_values(target_net, next_states, config.head, bound);
            for (std::size_t i = 0; i < config.batch_size; ++i) {
                const double* row = qn.row(i);
                y[i] = rewards[i] + mdp.gamma * *std::max_element(row, row + qn.dim(1));
            }
        } else {
            y = rewards;
        }

        const ForwardResult fr = forward(net, states, Mode::train);
        Tensor ograd = Tensor::zeros(fr.output.shape());
        double loss = 0.0;
        if (config.head == LossKind::mse) {
            for (std::size_t i = 0; i < config.batch_size; ++i) {
                const std::size_t col = static_cast<std::size_t>(taken[i]);
                const double d = fr.output.at(i, col) - y[i];
                loss += d * d;
                ograd.at(i, col) = 2.0 * d / static_cast<double>(config.batch_size);
            }
            loss /= static_cast<double>(config.batch_size);
        } else {
            const std::size_t atoms = codec->num_atoms();
            Tensor block = Tensor::zeros({config.batch_size, atoms});
            for (std::size_t i = 0; i < config.batch_size; ++i) {
                const double* row =
                    fr.output.data() + i * width + static_cast<std::size_t>(taken[i]) * atoms;
                std::copy(row, row + atoms, block.data() + i * atoms);
            }
            const LossResult lr = codec->loss(block, y);
            loss = lr.loss;
            for (std::size_t i = 0; i < config.batch_size; ++i) {
                double* row =
                    ograd.data() + i * width + static_cast<std::size_t>(taken[i]) * atoms;
                const double* g = lr.grad.data() + i * atoms;
                std::copy(g, g + atoms, row);
            }
        }
        if (!std::isfinite(loss)) {
            MetricRecord rec;
            rec.step = step;
            rec.loss = loss;
            rec.accuracy = kNaN;
            rec.diverged = true;
            res.records.push_back(std::move(rec));
            res.diverged = true;
            res.net = std::move(net);
            return res;
        }
        const Gradients grads = backward(net, fr.trace, ograd);
        optimizer_step(opt, net, grads);
        last_loss = loss;
        ++learner_steps;
        if (learner_steps % config.target_period == 0) target_net = net;
        if (learner_steps % config.cadence == 0) record_point(step, loss);
    }
    if (learner_steps > 0 && learner_steps % config.cadence != 0) {
        record_point(config.steps, last_loss);
    }
    res.net = std::move(net);
    return res;
}

// ---------------------------------------------------------------------------
// Offset dose-response
// ---------------------------------------------------------------------------

std::vector<DoseRow> run_offset_dose_response(const DoseConfig& config) {
    if (config.offsets.empty() || config.seeds.empty()) {
        throw std::invalid_argument(
            "run_offset_dose_response: offsets and seeds must be non-empty");
    }
    if (config.inputs.batch() == 0) {
        throw std::invalid_argument("run_offset_dose_response: input set is empty");
    }
    if (config.pretrain_steps < 1 || config.finetune_steps < 1 || config.batch_size < 1) {
        throw std::invalid_argument(
            "run_offset_dose_response: step and batch counts must be >= 1");
    }
    const std::size_t n = config.inputs.batch();

    // Trains in place with a fresh Adam; returns the mean training loss of
    // the final (up to) 10 steps, NaN on divergence.
    auto train_phase = [&](Network& net, const RegressionTargetGen& gen,
                           std::size_t steps, Rng& rng) {
        OptimizerState opt = make_optimizer(net, OptAlgo::adam, config.lr);
        double tail = 0.0;
        std::size_t tail_n = 0;
        for (std::size_t s = 1; s <= steps; ++s) {
            const std::vector<std::size_t> rows = sample_rows(rng, n, config.batch_size);
            const Tensor xb = gather_rows(config.inputs, rows);
            const Tensor y = gen_regression_targets(gen, xb, s);
            const ForwardResult fr = forward(net, xb, Mode::train);
            const LossResult lr = mse_loss(fr.output, y);
            if (!std::isfinite(lr.loss)) return kNaN;
            const Gradients grads = backward(net, fr.trace, lr.grad);
            optimizer_step(opt, net, grads);
            if (s + 10 > steps) {
                tail += lr.loss;
                ++tail_n;
            }
        }
        return tail / static_cast<double>(tail_n);
    };

    std::vector<DoseRow> rows;
    for (const double b : config.offsets) {
        DoseRow row;
        row.b = b;
        for (const std::uint64_t seed : config.seeds) {
            Network net = init_network(config.net, derive_seed(seed, "init"));

            RegressionTargetGen pre;
            pre.kind = TargetKind::offset_sine;
            pre.m = config.m;
            pre.b = b;
            pre.seed = derive_seed(seed, "pretrain");
            Rng pre_rng = derive_rng(seed, "batch-pre");
            row.pretrain_final += train_phase(net, pre, config.pretrain_steps, pre_rng);

            RegressionTargetGen fine = pre;
            fine.b = config.finetune_zero_offset ? 0.0 : b;
            fine.seed = derive_seed(seed, "finetune");
            Rng fine_rng = derive_rng(seed, "batch-fine");
            row.finetune_final += train_phase(net, fine, config.finetune_steps, fine_rng);
        }
        row.pretrain_final /= static_cast<double>(config.seeds.size());
        row.finetune_final /= static_cast<double>(config.seeds.size());
        rows.push_back(row);
    }
    std::sort(rows.begin(), rows.end(),
              [](const DoseRow& a, const DoseRow& b) { return a.b < b.b; });
    return rows;
}

// ---------------------------------------------------------------------------
// Task-switch microscope
// ---------------------------------------------------------------------------

MicroscopeResult run_task_switch_microscope(const MicroscopeConfig& config) {
    const TrainContext ctx(config.base);
    const ExperimentConfig& base = config.base;
    if (base.stream.num_tasks < 2) {
        throw std::invalid_argument(
            "run_task_switch_microscope: the stream must contain at least 2 tasks");
    }

    Network net = init_network(base.net, derive_seed(base.seed, "init"));
    OptimizerState opt = make_optimizer(net, base.algo, base.lr);
    TaskCursor cursor(base.stream);
    Rng pre_rng = derive_rng(base.seed, "batch");
    for (std::size_t s = 1; s <= config.converge_steps; ++s) {
        const double loss = train_step(ctx, net, opt, pre_rng, cursor.current(), s - 1);
        if (!std::isfinite(loss)) {
            throw std::runtime_error(
                "run_task_switch_microscope: training diverged before the switch");
        }
    }

    cursor.advance();
    const Dataset& task1 = cursor.current();
    const std::size_t probe_n = std::min(base.probe_rows, task1.size());
    const Tensor probe_x = head_rows(task1.inputs, probe_n);
    std::vector<int> probe_labels;
    if (!ctx.regression()) {
        probe_labels.assign(task1.labels.begin(),
                            task1.labels.begin() + static_cast<std::ptrdiff_t>(probe_n));
    }

    auto log_state = [&](const Network& n, std::size_t k) {
        MicroscopeStep entry;
        entry.step = k;
        const ForwardResult fr = forward_eval(n, probe_x);
        const BatchLoss bl =
            ctx.batch_loss(fr.output, probe_x, probe_labels, config.converge_steps + k);
        entry.loss = bl.loss;
        entry.entropy = (!ctx.regression() && fr.output.row_size() > 1)
                            ? predictive_entropy(fr.output)
                            : 0.0;
        const UnitCensus census =
            unit_census(n, probe_x, std::min<std::size_t>(32, probe_n));
        const auto [dead, zombie] = census_counts(census);
        entry.dead_units = dead;
        entry.zombie_units = zombie;
        const AlignmentCensus align = gradient_alignment_census(n, fr.trace, bl.grad);
        std::size_t units = 0;
        std::size_t neg = 0;
        std::size_t pos = 0;
        for (const auto& layer : align.layers) {
            units += layer.flags.size();
            for (const int f : layer.flags) {
                if (f < 0) ++neg;
                if (f > 0) ++pos;
            }
        }
        if (units > 0) {
            entry.negative_alignment = static_cast<double>(neg) / static_cast<double>(units);
            entry.positive_alignment = static_cast<double>(pos) / static_cast<double>(units);
        }
        return entry;
    };

    // Both branches replay the same batch substream, so they differ only in
    // the optimizer moments carried across the switch.
    auto run_branch = [&](bool reset) {
        Network n = net;
        OptimizerState o = opt;
        if (reset) reset_optimizer_state(o);
        Rng rng = derive_rng(base.seed, "post");
        std::vector<MicroscopeStep> log;
        log.push_back(log_state(n, 0));
        for (std::size_t k = 1; k <= config.post_steps; ++k) {
            const double loss = train_step(ctx, n, o, rng, task1, config.converge_steps + k - 1);
            if (!std::isfinite(loss)) {
                MicroscopeStep entry;
                entry.step = k;
                entry.loss = loss;
                log.push_back(entry);
                break;
            }
            log.push_back(log_state(n, k));
        }
        return log;
    };

    MicroscopeResult res;
    res.stale = run_branch(false);
    res.reset = run_branch(true);
    return res;
}

}  // namespace plab
