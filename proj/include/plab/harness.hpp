#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "plab/losses.hpp"
#include "plab/network.hpp"
#include "plab/optim.hpp"
#include "plab/tasks.hpp"
#include "plab/tensor.hpp"

namespace plab {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RegularizerConfig {
    double l2 = 0.0;            // weight decay added to weight gradients
    double feature_norm = 0.0;  // coeff * mean ||penultimate features||^2
};

// Interventions applied at every task boundary (after the paired boundary
// records are taken, before training on the new task).
struct ResetPolicy {
    bool reset_optimizer = false;
    bool rescale_weights = false;
    double redo_tau = -1.0;  // >= 0 enables ReDO with this threshold
};

struct ExperimentConfig {
    NetworkSpec net;
    TaskStream stream;  // steps_per_task * num_tasks = total budget
    // present -> regression targets; absent -> classification labels
    std::optional<RegressionTargetGen> targets;

    OptAlgo algo = OptAlgo::adam;
    double lr = 1e-3;
    LossKind loss = LossKind::xent;
    double smoothing = 0.0;   // label smoothing / two-hot kappa
    int two_hot_bound = 100;  // codec M for two_hot
    RegularizerConfig reg;
    ResetPolicy resets;

    std::size_t batch_size = 128;
    std::size_t cadence = 100;      // metric records every `cadence` steps
    std::size_t probe_rows = 256;   // rows of the task data used for metrics
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Metric records
// ---------------------------------------------------------------------------

// One measurement of the run. `step` counts completed optimizer steps; it is
// strictly increasing except for the paired task-boundary records, where the
// before_switch/after_switch pair shares one step (same parameters, old vs
// new task data).
struct MetricRecord {
    std::size_t step = 0;
    std::size_t task = 0;
    double loss = 0.0;
    double accuracy = 0.0;  // NaN for regression tasks
    double dead_frac = 0.0;
    double zombie_frac = 0.0;
    double param_norm = 0.0;
    double entropy = 0.0;  // 0 for regression tasks
    std::vector<std::pair<std::size_t, double>> layer_norms;
    std::string boundary;  // "", "before_switch", or "after_switch"
    bool diverged = false;
};

using MetricSink = std::function<void(const MetricRecord&)>;

struct RunResult {
    std::vector<MetricRecord> records;
    bool diverged = false;
    Network net;  // final parameters
    OptimizerState opt;
};

// Iterated nonstationary training: for each task of the stream, train
// steps_per_task minibatch steps, recording metrics at the cadence and as a
// before/after pair at every task boundary. Optimizer state persists across
// boundaries unless the reset policy says otherwise. NaN loss aborts the run
// with a final record flagged diverged. Fully deterministic in config.seed.
RunResult run_iterated_training(const ExperimentConfig& config,
                                const MetricSink& sink = nullptr);

// ---------------------------------------------------------------------------
// Plasticity probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
    double rho = 1.0;          // perturbation norm, > 0
    std::uint64_t seed = 0;    // perturbation generator seed
    std::size_t steps = 2000;  // probe optimizer steps
    double lr = 1e-3;          // fresh Adam
    Tensor inputs;             // fixed probe input set X
};

struct ProbeResult {
    std::vector<std::pair<std::size_t, double>> loss_curve;  // geometric steps
    double initial_loss = 0.0;  // == rho^2
    double final_loss = 0.0;
    bool diverged = false;
};

// Trains a copy of the checkpoint to move its outputs onto
// f(theta_T; X) + eta(X), i.e. minimizes ||f(theta_T;X) - f(theta;X) +
// eta(X)||^2 summed over X. eta is a frozen-random-net sine feature
// (offset_sine, b=0) rescaled so ||eta(X)|| = rho exactly, which makes the
// step-0 loss rho^2. The checkpoint itself is never mutated.
ProbeResult probe_plasticity(const Network& checkpoint, const ProbeConfig& probe);

// ---------------------------------------------------------------------------
// Replay buffer and bandit DQN
// ---------------------------------------------------------------------------

struct Transition {
    std::size_t obs = 0;  // dataset row of the state
    int action = 0;
    double reward = 0.0;
    std::size_t next_obs = 0;
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 100000);
    void push(const Transition& t);  // evicts strictly oldest-first when full
    std::size_t size() const { return buf_.size(); }
    std::size_t capacity() const { return cap_; }
    const Transition& at(std::size_t i) const;  // 0 is the oldest
    const Transition& sample(Rng& rng) const;

private:
    std::vector<Transition> buf_;
    std::size_t cap_;
    std::size_t head_ = 0;  // next slot to overwrite once full
};

struct BanditConfig {
    NetworkSpec net;  // Q net: inputs -> A (mse) or A * num_atoms (two_hot)
    LossKind head = LossKind::mse;  // mse or two_hot
    double smoothing = 0.0;         // two-hot kappa
    int two_hot_bound = 0;          // codec M; <= 0 picks ceil(alpha/(1-gamma))

    std::size_t steps = 20000;  // environment steps (1 learner step each)
    std::size_t batch_size = 128;
    std::size_t target_period = 500;  // learner steps between target copies
    std::size_t buffer_capacity = 100000;
    std::size_t warmup = 1000;  // transitions collected before learning
    double lr = 1e-3;
    std::size_t cadence = 500;
    std::uint64_t seed = 0;
};

struct BanditResult {
    std::vector<MetricRecord> records;  // TD loss curve
    // mean over probe states of the decoded greedy value max_a Q(s, a)
    std::vector<std::pair<std::size_t, double>> value_curve;
    Network net;  // final Q network
    bool diverged = false;
};

// Uniform behavior policy; transitions go into a FIFO ReplayBuffer; each
// learner step regresses Q(s, a) onto r + gamma * max_a' Q_target(s', a')
// with an MSE or two-hot head; the target net is copied every target_period
// learner steps. Requires M >= alpha / (1 - gamma) for the two-hot head.
BanditResult run_bandit_dqn(const BanditMDP& mdp, const BanditConfig& config);

// Q values of every action for a batch of states (decoded for two-hot heads).
Tensor bandit_q_values(const Network& net, const Tensor& states, LossKind head,
                       int two_hot_bound);

// ---------------------------------------------------------------------------
// Offset dose-response
// ---------------------------------------------------------------------------

struct DoseConfig {
    NetworkSpec net;  // scalar-output regression net
    std::vector<double> offsets{0.0, 8.0, 16.0, 32.0};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    Tensor inputs;  // shared input set
    double m = 1e5;
    std::size_t pretrain_steps = 2000;
    std::size_t finetune_steps = 2000;
    std::size_t batch_size = 512;
    double lr = 1e-3;
    bool finetune_zero_offset = true;  // fine-tune on b = 0 (else same b)
};

struct DoseRow {
    double b = 0.0;
    double pretrain_final = 0.0;  // mean over seeds of final-10-step loss
    double finetune_final = 0.0;
};

// Pretrains one net per (b, seed) on offset_sine targets, then fine-tunes on
// a fresh target seed (offset 0 by default) with a fresh optimizer; rows
// report the final-10-step loss average across seeds, sorted by b.
std::vector<DoseRow> run_offset_dose_response(const DoseConfig& config);

// ---------------------------------------------------------------------------
// Task-switch microscope
// ---------------------------------------------------------------------------

struct MicroscopeConfig {
    ExperimentConfig base;             // net / stream / loss / optimizer
    std::size_t converge_steps = 2000; // steps on task 0 before the switch
    std::size_t post_steps = 500;      // densely logged steps after it
};

struct MicroscopeStep {
    std::size_t step = 0;  // 0 is the pre-step state right after the switch
    double loss = 0.0;
    double entropy = 0.0;
    std::size_t dead_units = 0;
    std::size_t zombie_units = 0;
    double negative_alignment = 0.0;  // uniform-push unit fractions
    double positive_alignment = 0.0;
};

struct MicroscopeResult {
    std::vector<MicroscopeStep> stale;  // optimizer state persisted
    std::vector<MicroscopeStep> reset;  // optimizer state zeroed at the switch
};

// Trains to convergence on task 0, switches to task 1, then runs the same
// post-switch window twice from the shared checkpoint: once keeping the Adam
// moments and once resetting them. Logs every step.
MicroscopeResult run_task_switch_microscope(const MicroscopeConfig& config);

}  // namespace plab
