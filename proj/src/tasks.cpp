#include "plab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "plab/network.hpp"

namespace plab {

const char* task_mode_name(TaskMode mode) {
    switch (mode) {
        case TaskMode::stationary: return "stationary";
        case TaskMode::random_labels: return "random_labels";
        case TaskMode::permute_classes: return "permute_classes";
        case TaskMode::permute_pixels: return "permute_pixels";
        case TaskMode::continual: return "continual";
        case TaskMode::composite: return "composite";
        case TaskMode::growing: return "growing";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Synthetic clusters
// ---------------------------------------------------------------------------

Dataset synth_dataset(int num_classes, std::size_t input_dim, std::size_t n_per_class,
                      std::uint64_t seed) {
    if (num_classes < 1 || input_dim < 1 || n_per_class < 1)
        throw std::invalid_argument("synth_dataset: all sizes must be positive");
    if (num_classes > 2 && input_dim < static_cast<std::size_t>(num_classes))
        throw std::invalid_argument(
            "synth_dataset: k > 2 classes need input_dim >= k for orthogonal means");

    std::size_t n = static_cast<std::size_t>(num_classes) * n_per_class;
    Dataset ds;
    ds.num_classes = num_classes;
    ds.inputs = Tensor::zeros({n, input_dim});
    ds.labels.resize(n);

    auto mean_of = [&](int c, std::size_t j) -> double {
        if (num_classes == 1) return 0.0;
        if (num_classes == 2) return j == 0 ? (c == 0 ? -2.0 : 2.0) : 0.0;
        return j == static_cast<std::size_t>(c) ? 2.0 * std::sqrt(2.0) : 0.0;
    };

    Rng rng(seed);
    std::size_t row = 0;
    for (int c = 0; c < num_classes; ++c)
        for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
            ds.labels[row] = c;
            for (std::size_t j = 0; j < input_dim; ++j)
                ds.inputs.at(row, j) = mean_of(c, j) + rng.normal();
        }
    return ds;
}

// ---------------------------------------------------------------------------
// External dataset formats
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void format_error(const std::string& path, std::size_t offset,
                               const std::string& what) {
    std::ostringstream os;
    os << path << ": " << what << " at byte offset " << offset;
    throw std::runtime_error(os.str());
}

std::uint32_t read_be32(std::ifstream& in, const std::string& path, std::size_t& offset) {
    unsigned char buf[4];
    if (!in.read(reinterpret_cast<char*>(buf), 4))
        format_error(path, offset, "truncated header");
    offset += 4;
    return (static_cast<std::uint32_t>(buf[0]) << 24) |
           (static_cast<std::uint32_t>(buf[1]) << 16) |
           (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error(images_path + ": cannot open");
    std::size_t off = 0;
    std::uint32_t magic = read_be32(img, images_path, off);
    if (magic != 2051) format_error(images_path, 0, "bad image magic (want 2051)");
    std::uint32_t n = read_be32(img, images_path, off);
    std::uint32_t rows = read_be32(img, images_path, off);
    std::uint32_t cols = read_be32(img, images_path, off);
    if (n == 0 || rows == 0 || cols == 0) format_error(images_path, 4, "empty dimensions");

    std::size_t pixels = static_cast<std::size_t>(n) * rows * cols;
    std::vector<unsigned char> raw(pixels);
    if (!img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels))) {
        std::size_t got = static_cast<std::size_t>(img.gcount());
        format_error(images_path, off + got, "truncated pixel data");
    }

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error(labels_path + ": cannot open");
    std::size_t loff = 0;
    std::uint32_t lmagic = read_be32(lab, labels_path, loff);
    if (lmagic != 2049) format_error(labels_path, 0, "bad label magic (want 2049)");
    std::uint32_t ln = read_be32(lab, labels_path, loff);
    if (ln != n) {
        std::ostringstream os;
        os << "image/label count mismatch: " << n << " images vs " << ln << " labels";
        throw std::runtime_error(os.str());
    }
    std::vector<unsigned char> lraw(ln);
    if (!lab.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(ln))) {
        std::size_t got = static_cast<std::size_t>(lab.gcount());
        format_error(labels_path, loff + got, "truncated label data");
    }

    Dataset ds;
    ds.num_classes = 10;
    ds.inputs = Tensor::zeros({n, static_cast<std::size_t>(rows) * cols});
    for (std::size_t i = 0; i < pixels; ++i) ds.inputs[i] = raw[i] / 255.0;
    ds.labels.resize(n);
    for (std::size_t i = 0; i < ln; ++i) {
        if (lraw[i] > 9) format_error(labels_path, loff + i, "label byte out of range");
        ds.labels[i] = lraw[i];
    }
    return ds;
}

Dataset load_cifar10_bin(const std::vector<std::string>& paths) {
    constexpr std::size_t kRecord = 3073;  // 1 label byte + 3*32*32 pixels
    if (paths.empty()) throw std::invalid_argument("load_cifar10_bin: no paths given");

    std::vector<unsigned char> raw;
    std::vector<std::pair<std::string, std::size_t>> spans;  // path, record count
    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary | std::ios::ate);
        if (!in) throw std::runtime_error(path + ": cannot open");
        std::size_t bytes = static_cast<std::size_t>(in.tellg());
        if (bytes % kRecord != 0)
            format_error(path, bytes - bytes % kRecord, "partial 3073-byte record");
        in.seekg(0);
        std::size_t base = raw.size();
        raw.resize(base + bytes);
        if (!in.read(reinterpret_cast<char*>(raw.data() + base),
                     static_cast<std::streamsize>(bytes)))
            format_error(path, static_cast<std::size_t>(in.gcount()), "read failure");
        spans.emplace_back(path, bytes / kRecord);
    }

    std::size_t n = raw.size() / kRecord;
    Dataset ds;
    ds.num_classes = 10;
    ds.inputs = Tensor::zeros({n, 3072});
    ds.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const unsigned char* rec = raw.data() + r * kRecord;
        if (rec[0] > 9) {
            // locate the owning file for the error offset
            std::size_t rec_idx = r;
            for (const auto& [path, count] : spans) {
                if (rec_idx < count) format_error(path, rec_idx * kRecord, "label byte out of range");
                rec_idx -= count;
            }
        }
        ds.labels[r] = rec[0];
        for (std::size_t j = 0; j < 3072; ++j) ds.inputs.at(r, j) = rec[1 + j] / 255.0;
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Label randomization and task streams
// ---------------------------------------------------------------------------

namespace {

// First `count` entries of a uniformly shuffled index range (partial
// Fisher-Yates; O(count) swaps).
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < count && i + 1 < n; ++i) {
        std::size_t j = i + rng.index(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(std::min(count, n));
    return idx;
}

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p);
    return p;
}

void permute_row_pixels(Tensor& inputs, std::size_t row, const std::vector<std::size_t>& perm,
                        std::vector<double>& scratch) {
    std::size_t d = inputs.row_size();
    double* r = inputs.data() + row * d;
    scratch.assign(r, r + d);
    for (std::size_t j = 0; j < d; ++j) r[j] = scratch[perm[j]];
}

}  // namespace

Dataset randomize_labels(const Dataset& ds, double eps, std::uint64_t seed) {
    if (!ds.classification())
        throw std::invalid_argument("randomize_labels: needs a classification dataset");
    if (eps < 0.0 || eps > 1.0)
        throw std::invalid_argument("randomize_labels: eps must lie in [0,1]");
    Dataset out = ds;
    std::size_t n = ds.size();
    std::size_t count = static_cast<std::size_t>(std::floor(eps * static_cast<double>(n)));
    Rng rng(seed);
    std::vector<std::size_t> picked = sample_indices(n, count, rng);
    for (std::size_t i : picked)
        out.labels[i] = static_cast<int>(rng.index(static_cast<std::size_t>(ds.num_classes)));
    return out;
}

namespace {

Dataset random_labels_task(const TaskStream& s, std::size_t t) {
    // Full re-randomization at task 0 makes every task a memorization
    // problem; each later boundary redraws floor(eps*N) labels cumulatively.
    Dataset ds = randomize_labels(s.base, 1.0, derive_seed(s.seed, "labels", 0));
    for (std::size_t j = 1; j <= t; ++j)
        ds = randomize_labels(ds, s.eps, derive_seed(s.seed, "labels", j));
    return ds;
}

}  // namespace

Dataset next_task(const TaskStream& stream, std::size_t task_index) {
    if (task_index >= stream.num_tasks)
        throw std::invalid_argument("next_task: task_index out of range");
    const Dataset& base = stream.base;
    switch (stream.mode) {
        case TaskMode::stationary:
            return base;

        case TaskMode::random_labels:
            return random_labels_task(stream, task_index);

        case TaskMode::permute_classes: {
            Dataset out = base;
            Rng rng(derive_seed(stream.seed, "perm", task_index));
            std::vector<std::size_t> p =
                random_permutation(static_cast<std::size_t>(base.num_classes), rng);
            for (auto& l : out.labels) l = static_cast<int>(p[static_cast<std::size_t>(l)]);
            return out;
        }

        case TaskMode::permute_pixels: {
            Dataset out = base;
            Rng rng(derive_seed(stream.seed, "pixels", task_index));
            std::vector<std::size_t> p = random_permutation(base.inputs.row_size(), rng);
            std::vector<double> scratch;
            for (std::size_t r = 0; r < out.size(); ++r)
                permute_row_pixels(out.inputs, r, p, scratch);
            return out;
        }

        case TaskMode::continual: {
            Dataset out = base;
            std::size_t n = base.size();
            std::size_t count =
                static_cast<std::size_t>(std::floor(stream.fraction * static_cast<double>(n)));
            Rng rrows(derive_seed(stream.seed, "rows", task_index));
            std::vector<std::size_t> rows = sample_indices(n, count, rrows);
            Rng rpix(derive_seed(stream.seed, "pixels", task_index));
            std::vector<std::size_t> p = random_permutation(base.inputs.row_size(), rpix);
            std::vector<double> scratch;
            for (std::size_t r : rows) permute_row_pixels(out.inputs, r, p, scratch);
            return out;
        }

        case TaskMode::composite: {
            Dataset out = base;
            std::size_t n = base.size();
            std::size_t count =
                static_cast<std::size_t>(std::floor(stream.fraction * static_cast<double>(n)));
            Rng rrows(derive_seed(stream.seed, "subset"));  // fixed across tasks
            std::vector<std::size_t> rows = sample_indices(n, count, rrows);
            Rng rpix(derive_seed(stream.seed, "pixels", task_index));
            std::vector<std::size_t> p = random_permutation(base.inputs.row_size(), rpix);
            std::vector<double> scratch;
            for (std::size_t r : rows) permute_row_pixels(out.inputs, r, p, scratch);
            return out;
        }

        case TaskMode::growing: {
            if (!base.classification())
                throw std::invalid_argument("next_task: growing mode needs labels");
            int max_class = static_cast<int>(
                std::min<std::size_t>(task_index, static_cast<std::size_t>(base.num_classes - 1)));
            std::vector<std::size_t> rows;
            for (std::size_t r = 0; r < base.size(); ++r)
                if (base.labels[r] <= max_class) rows.push_back(r);
            Dataset out;
            out.num_classes = base.num_classes;
            out.inputs = Tensor::zeros({rows.size(), base.inputs.row_size()});
            out.labels.resize(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                out.labels[i] = base.labels[rows[i]];
                const double* src = base.inputs.data() + rows[i] * base.inputs.row_size();
                double* dst = out.inputs.data() + i * out.inputs.row_size();
                std::copy(src, src + base.inputs.row_size(), dst);
            }
            Rng rpix(derive_seed(stream.seed, "pixels", task_index));
            std::vector<std::size_t> p = random_permutation(out.inputs.row_size(), rpix);
            std::vector<double> scratch;
            for (std::size_t r = 0; r < out.size(); ++r)
                permute_row_pixels(out.inputs, r, p, scratch);
            return out;
        }
    }
    throw std::logic_error("next_task: unhandled mode");
}

TaskCursor::TaskCursor(const TaskStream& stream) : stream_(&stream) {
    current_ = next_task(stream, 0);
}

void TaskCursor::advance() {
    index_ += 1;
    if (index_ >= stream_->num_tasks)
        throw std::invalid_argument("TaskCursor: advanced past the last task");
    if (stream_->mode == TaskMode::random_labels) {
        current_ = randomize_labels(current_, stream_->eps,
                                    derive_seed(stream_->seed, "labels", index_));
    } else {
        current_ = next_task(*stream_, index_);
    }
}

// ---------------------------------------------------------------------------
// Regression targets
// ---------------------------------------------------------------------------

namespace {

// Frozen random feature net: tanh MLP with a scalar head, fan-in init.
Tensor frozen_net_outputs(std::uint64_t seed, std::size_t hidden, const Tensor& inputs) {
    if (inputs.rank() != 2)
        throw std::invalid_argument("gen_regression_targets: inputs must be {N,d}");
    NetworkSpec spec;
    spec.layers = {DenseSpec{inputs.dim(1), hidden}, ActivationSpec{ActKind::tanh_fn},
                   DenseSpec{hidden, 1}};
    spec.init = InitScheme::fan_in_gaussian;
    Network net = init_network(spec, seed);
    return forward_eval(net, inputs).output;  // {N, 1}
}

}  // namespace

Tensor gen_regression_targets(const RegressionTargetGen& gen, const Tensor& inputs,
                              std::uint64_t step) {
    if (gen.m < 1.0)
        throw std::invalid_argument("gen_regression_targets: M must be >= 1");
    if (gen.period <= 0.0)
        throw std::invalid_argument("gen_regression_targets: period must be positive");

    Tensor f = frozen_net_outputs(derive_seed(gen.seed, "target_net"), gen.hidden, inputs);
    Tensor out = Tensor::zeros(f.shape());
    switch (gen.kind) {
        case TargetKind::offset_sine:
            for (std::size_t i = 0; i < f.size(); ++i) out[i] = std::sin(gen.m * f[i]) + gen.b;
            break;
        case TargetKind::centered_scaled: {
            Tensor g = frozen_net_outputs(derive_seed(gen.seed, "sigma"), gen.hidden, inputs);
            for (std::size_t i = 0; i < f.size(); ++i)
                out[i] = gen.c + gen.alpha * f[i] + std::sin(gen.m * g[i]);
            break;
        }
        case TargetKind::moving_sine: {
            double wave = std::sin(static_cast<double>(step) / gen.period);
            for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i] + wave;
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bandit MDP
// ---------------------------------------------------------------------------

BanditObservation bandit_transition(const BanditMDP& mdp, Rng& rng) {
    if (!mdp.dataset.classification())
        throw std::invalid_argument("bandit_transition: needs a classification dataset");
    BanditObservation obs;
    obs.index = rng.index(mdp.dataset.size());
    obs.label = mdp.dataset.labels[obs.index];
    return obs;
}

double bandit_reward(const BanditMDP& mdp, int action, int label) {
    return action == label ? mdp.alpha : 0.0;
}

}  // namespace plab
