#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {

// Classification (num_classes > 0, labels used) or regression (num_classes
// == 0, targets used). Inputs are {N, d} rows; image data is kept flat and
// reshaped by the consumer when a conv stack needs {N, C, H, W}.
struct Dataset {
    Tensor inputs;
    std::vector<int> labels;
    Tensor targets;
    int num_classes = 0;

    bool classification() const { return num_classes > 0; }
    std::size_t size() const { return inputs.empty() ? 0 : inputs.dim(0); }
};

// Gaussian class clusters with unit within-class variance and pairwise mean
// separation 4. Two classes sit at -2/+2 along the first axis; k > 2 classes
// sit at 2*sqrt(2) along k orthogonal axes (requires input_dim >= k). Labels
// are balanced exactly, class-major.
Dataset synth_dataset(int num_classes, std::size_t input_dim, std::size_t n_per_class,
                      std::uint64_t seed);

// IDX (big-endian magic 2051 images / 2049 labels) and CIFAR-10 binary
// (3073-byte records, channel-major pixels). Pixels scaled to [0,1].
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);
Dataset load_cifar10_bin(const std::vector<std::string>& paths);

// Exactly floor(eps*N) indices drawn uniformly without replacement get their
// label resampled uniformly over all classes (the old label may recur).
Dataset randomize_labels(const Dataset& ds, double eps, std::uint64_t seed);

enum class TaskMode {
    stationary,
    random_labels,
    permute_classes,
    permute_pixels,
    continual,
    composite,
    growing,
};

const char* task_mode_name(TaskMode mode);

struct TaskStream {
    Dataset base;
    TaskMode mode = TaskMode::stationary;
    double eps = 1.0;       // random_labels re-randomized fraction
    double fraction = 0.5;  // continual / composite transformed input fraction
    std::size_t steps_per_task = 2000;
    std::size_t num_tasks = 1;
    std::uint64_t seed = 0;
};

// Pure construction of task `task_index`; the base dataset is never mutated.
// random_labels is a cumulative chain: one full re-randomization at task 0,
// then floor(eps*N) labels redrawn per boundary. Other modes draw fresh
// transformations per task from (seed, task_index).
Dataset next_task(const TaskStream& stream, std::size_t task_index);

// Sequential accessor that reuses the previous task's labels for the
// random_labels chain, making per-boundary cost O(N) instead of O(tN).
class TaskCursor {
public:
    explicit TaskCursor(const TaskStream& stream);
    const Dataset& current() const { return current_; }
    std::size_t index() const { return index_; }
    void advance();  // move to the next task

private:
    const TaskStream* stream_;
    Dataset current_;
    std::size_t index_ = 0;
};

// ---------------------------------------------------------------------------
// Regression target generators
// ---------------------------------------------------------------------------

enum class TargetKind { offset_sine, centered_scaled, moving_sine };

// Targets built from a frozen random MLP f(x) (tanh hidden layer, scalar
// output) drawn from `seed`:
//   offset_sine:     sin(M * f(x)) + b
//   centered_scaled: c + alpha * f(x) + sigma(x), sigma a second frozen
//                    high-frequency net (offset_sine with b = 0)
//   moving_sine:     f(x) + sin(step / period)
struct RegressionTargetGen {
    TargetKind kind = TargetKind::offset_sine;
    double m = 1e5;
    double b = 0.0;
    double c = 0.0;
    double alpha = 1.0;
    double period = 20.0;
    std::size_t hidden = 64;
    std::uint64_t seed = 0;
};

Tensor gen_regression_targets(const RegressionTargetGen& gen, const Tensor& inputs,
                              std::uint64_t step);

// ---------------------------------------------------------------------------
// Contextual bandit
// ---------------------------------------------------------------------------

// Each step presents a uniformly drawn dataset example; the action guesses
// its class; reward alpha on a match, 0 otherwise. The next state is
// independent of the action.
struct BanditMDP {
    Dataset dataset;
    double alpha = 1.0;
    double gamma = 0.0;

    int num_actions() const { return dataset.num_classes; }
};

struct BanditObservation {
    std::size_t index = 0;  // row into dataset.inputs
    int label = 0;
};

BanditObservation bandit_transition(const BanditMDP& mdp, Rng& rng);
double bandit_reward(const BanditMDP& mdp, int action, int label);

}  // namespace plab
