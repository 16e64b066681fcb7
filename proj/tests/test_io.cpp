#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "plab/io.hpp"
#include "plab/losses.hpp"
#include "plab/network.hpp"
#include "plab/optim.hpp"
#include "plab/rng.hpp"

using namespace plab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("plab_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "plab");
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const std::string& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

const char* kSmallConfig = R"({
  "schema_version": 1,
  "seed": 3,
  "net": {"layers": [
    {"kind": "dense", "in": 6, "out": 16},
    {"kind": "activation", "act": "relu"},
    {"kind": "dense", "in": 16, "out": 3}]},
  "stream": {"dataset": {"kind": "synthetic", "classes": 3, "input_dim": 6, "per_class": 20},
             "mode": "random_labels", "steps_per_task": 40, "num_tasks": 2},
  "batch_size": 30, "cadence": 20, "probe_rows": 60
})";

// Checkpoint fixture: BatchNorm in the stack so buffers and affine params are
// exercised, a few Adam steps so moments and running stats are nonzero.
struct TrainedNet {
    Network net;
    OptimizerState opt;
    Tensor probe;

    TrainedNet() {
        NetworkSpec spec;
        spec.layers = {DenseSpec{5, 8}, ActivationSpec{ActKind::relu}, BatchNormSpec{},
                       DenseSpec{8, 2}};
        spec.seed = 11;
        net = init_network(spec);
        opt = make_optimizer(net, OptAlgo::adam, 1e-3);
        Rng rng(21);
        Tensor x = Tensor::zeros({16, 5});
        for (auto& v : x.vec()) v = rng.normal();
        Tensor y = Tensor::zeros({16, 2});
        for (auto& v : y.vec()) v = rng.normal();
        for (int s = 0; s < 3; ++s) {
            ForwardResult fr = forward(net, x, Mode::train);
            const LossResult lr = mse_loss(fr.output, y);
            const Gradients grads = backward(net, fr.trace, lr.grad);
            optimizer_step(opt, net, grads);
        }
        probe = x;
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

TEST_CASE("parse_config applies defaults and reports them") {
    const ParsedConfig p = parse_config(kSmallConfig);
    CHECK(p.config.seed == 3);
    CHECK(p.config.batch_size == 30);
    CHECK(p.config.cadence == 20);
    CHECK(p.config.probe_rows == 60);
    CHECK(p.config.net.layers.size() == 3);
    CHECK(p.config.stream.num_tasks == 2);
    CHECK(p.config.stream.steps_per_task == 40);
    CHECK(p.config.stream.mode == TaskMode::random_labels);
    CHECK(p.config.stream.base.size() == 60);
    CHECK(p.config.loss == LossKind::xent);
    CHECK(p.config.algo == OptAlgo::adam);
    CHECK(p.config.lr == doctest::Approx(1e-3));
    CHECK_FALSE(p.config.targets.has_value());

    auto applied = [&](const char* path) {
        return std::find(p.applied_defaults.begin(), p.applied_defaults.end(), path) !=
               p.applied_defaults.end();
    };
    CHECK(applied("$.optimizer.lr"));
    CHECK(applied("$.optimizer.algo"));
    CHECK(applied("$.loss.kind"));
    CHECK(applied("$.net.layers[0].bias"));
    CHECK_FALSE(applied("$.batch_size"));
}

TEST_CASE("canonical document round-trips to itself with no defaults left") {
    const ParsedConfig p1 = parse_config(kSmallConfig);
    const ParsedConfig p2 = parse_config(p1.canonical);
    CHECK(p2.canonical == p1.canonical);
    CHECK(p2.applied_defaults.empty());
    CHECK(p2.config.batch_size == p1.config.batch_size);
    CHECK(p2.config.stream.mode == p1.config.stream.mode);
    // The canonical tree is the source tree plus defaults: every original
    // key survives with its value.
    const json orig = json::parse(kSmallConfig);
    const json canon = json::parse(p1.canonical);
    CHECK(canon["seed"] == orig["seed"]);
    CHECK(canon["batch_size"] == orig["batch_size"]);
    CHECK(canon["stream"]["steps_per_task"] == orig["stream"]["steps_per_task"]);
    CHECK(canon["net"]["layers"][0]["in"] == orig["net"]["layers"][0]["in"]);
    CHECK(canon["optimizer"]["lr"] == 1e-3);
}

TEST_CASE("unknown keys are rejected with their path") {
    json cfg = json::parse(kSmallConfig);
    cfg["optimizer"] = {{"lrr", 0.1}};
    CHECK_THROWS_WITH_AS(parse_config(cfg.dump()),
                         doctest::Contains("unknown key \"lrr\" at $.optimizer"),
                         std::invalid_argument);
    json cfg2 = json::parse(kSmallConfig);
    cfg2["net"]["layers"][1]["slop"] = 0.2;
    CHECK_THROWS_WITH_AS(parse_config(cfg2.dump()),
                         doctest::Contains("unknown key \"slop\" at $.net.layers[1]"),
                         std::invalid_argument);
}

TEST_CASE("missing required keys are named") {
    json cfg = json::parse(kSmallConfig);
    cfg["net"].erase("layers");
    CHECK_THROWS_WITH_AS(parse_config(cfg.dump()),
                         doctest::Contains("missing required key \"layers\" at $.net"),
                         std::invalid_argument);
    json cfg2 = json::parse(kSmallConfig);
    cfg2.erase("schema_version");
    CHECK_THROWS_WITH_AS(parse_config(cfg2.dump()),
                         doctest::Contains("missing required key \"schema_version\""),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config("{\"schema_version\": 2}"),
                         doctest::Contains("unsupported schema_version 2"),
                         std::invalid_argument);
}

TEST_CASE("range violations name the key, path, and value") {
    json cfg = json::parse(kSmallConfig);
    cfg["optimizer"] = {{"lr", -1}};
    CHECK_THROWS_WITH_AS(parse_config(cfg.dump()),
                         doctest::Contains("lr = -1 out of range at $.optimizer.lr"),
                         std::invalid_argument);
    json cfg2 = json::parse(kSmallConfig);
    cfg2["stream"]["eps"] = 1.5;
    CHECK_THROWS_WITH_AS(parse_config(cfg2.dump()), doctest::Contains("$.stream.eps"),
                         std::invalid_argument);
    json cfg3 = json::parse(kSmallConfig);
    cfg3["batch_size"] = 0;
    CHECK_THROWS_WITH_AS(parse_config(cfg3.dump()),
                         doctest::Contains("batch_size = 0 out of range"),
                         std::invalid_argument);
    json cfg4 = json::parse(kSmallConfig);
    cfg4["loss"] = {{"kind", "mse"}, {"smoothing", 1.0}};
    CHECK_THROWS_WITH_AS(parse_config(cfg4.dump()), doctest::Contains("$.loss.smoothing"),
                         std::invalid_argument);
}

TEST_CASE("enum tokens list the accepted values") {
    json cfg = json::parse(kSmallConfig);
    cfg["stream"]["mode"] = "wobbly";
    CHECK_THROWS_WITH_AS(parse_config(cfg.dump()),
                         doctest::Contains("unknown value \"wobbly\" at $.stream.mode"),
                         std::invalid_argument);
    json cfg2 = json::parse(kSmallConfig);
    cfg2["net"]["layers"][0]["kind"] = "denze";
    CHECK_THROWS_WITH_AS(parse_config(cfg2.dump()),
                         doctest::Contains("unknown layer kind \"denze\""),
                         std::invalid_argument);
}

TEST_CASE("invalid JSON reports a byte offset") {
    CHECK_THROWS_WITH_AS(parse_config("{\"schema_version\": 1,,}"),
                         doctest::Contains("byte offset"), std::invalid_argument);
}

TEST_CASE("gaussian dataset with regression targets parses into a runnable config") {
    const char* text = R"({
      "schema_version": 1,
      "net": {"layers": [
        {"kind": "dense", "in": 4, "out": 8},
        {"kind": "activation", "act": "relu"},
        {"kind": "dense", "in": 8, "out": 1}]},
      "stream": {"dataset": {"kind": "gaussian", "rows": 32, "dim": 4},
                 "mode": "stationary", "steps_per_task": 10, "num_tasks": 1},
      "targets": {"kind": "offset_sine", "m": 50, "b": 2},
      "loss": {"kind": "mse"},
      "batch_size": 16, "cadence": 5, "probe_rows": 16
    })";
    const ParsedConfig p = parse_config(text);
    REQUIRE(p.config.targets.has_value());
    CHECK(p.config.targets->b == 2.0);
    CHECK(p.config.stream.base.size() == 32);
    CHECK_FALSE(p.config.stream.base.classification());
    const RunResult res = run_iterated_training(p.config);
    CHECK_FALSE(res.diverged);
    CHECK(res.records.back().step == 10);
}

TEST_CASE("targets with xent loss are rejected during config validation") {
    json cfg = json::parse(kSmallConfig);
    cfg["targets"] = {{"kind", "offset_sine"}};
    CHECK_THROWS_AS((void)run_iterated_training(parse_config(cfg.dump()).config),
                    std::invalid_argument);
    json cfg2 = json::parse(kSmallConfig);
    cfg2["targets"] = {{"kind", "offset_sine"}, {"m", 0.5}};
    CHECK_THROWS_WITH_AS(parse_config(cfg2.dump()), doctest::Contains("$.targets.m"),
                         std::invalid_argument);
}

TEST_CASE("relative dataset paths resolve against PLAB_DATA_DIR") {
    TempDir dir;
    auto be32 = [](std::ofstream& os, std::uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) {
            os.put(static_cast<char>((v >> s) & 0xff));
        }
    };
    {
        std::ofstream img(dir.file("img.idx"), std::ios::binary);
        be32(img, 2051);
        be32(img, 4);
        be32(img, 2);
        be32(img, 2);
        for (int i = 0; i < 16; ++i) img.put(static_cast<char>(i * 16));
        std::ofstream lab(dir.file("lab.idx"), std::ios::binary);
        be32(lab, 2049);
        be32(lab, 4);
        for (int i = 0; i < 4; ++i) lab.put(static_cast<char>(i));
    }
    ::setenv("PLAB_DATA_DIR", dir.path.string().c_str(), 1);
    const char* text = R"({
      "schema_version": 1,
      "net": {"layers": [
        {"kind": "flatten"},
        {"kind": "dense", "in": 4, "out": 10}]},
      "stream": {"dataset": {"kind": "mnist", "images": "img.idx", "labels": "lab.idx"},
                 "mode": "stationary", "steps_per_task": 1, "num_tasks": 1}
    })";
    const ParsedConfig p = parse_config(text);
    ::unsetenv("PLAB_DATA_DIR");
    CHECK(p.config.stream.base.size() == 4);
    CHECK(p.config.stream.base.classification());
    CHECK(p.config.stream.base.num_classes == 10);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round trip is bit-exact") {
    TrainedNet t;
    TempDir dir;
    const std::string path = dir.file("ck.json");
    save_checkpoint(path, t.net, t.opt, 123, 77);
    const Checkpoint ck = load_checkpoint(path);

    CHECK(ck.step == 123);
    CHECK(ck.seed == 77);
    CHECK(ck.net.spec().layers.size() == 4);

    const std::vector<double> a = t.net.flat_params();
    const std::vector<double> b = ck.net.flat_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    REQUIRE(ck.net.buffers().size() == t.net.buffers().size());
    for (std::size_t i = 0; i < t.net.buffers().size(); ++i) {
        const Tensor& u = t.net.buffers()[i].value;
        const Tensor& v = ck.net.buffers()[i].value;
        REQUIRE(u.same_shape(v));
        for (std::size_t k = 0; k < u.size(); ++k) CHECK(u[k] == v[k]);
    }

    CHECK(ck.opt.algo == t.opt.algo);
    CHECK(ck.opt.t == t.opt.t);
    CHECK(ck.opt.lr == t.opt.lr);
    REQUIRE(ck.opt.m.size() == t.opt.m.size());
    for (std::size_t i = 0; i < t.opt.m.size(); ++i) {
        for (std::size_t k = 0; k < t.opt.m[i].size(); ++k) {
            CHECK(ck.opt.m[i][k] == t.opt.m[i][k]);
            CHECK(ck.opt.v[i][k] == t.opt.v[i][k]);
        }
    }
    CHECK(ck.net.init_layer_norms() == t.net.init_layer_norms());

    // Same network state implies bitwise-identical eval outputs.
    const Tensor y0 = forward_eval(t.net, t.probe).output;
    const Tensor y1 = forward_eval(ck.net, t.probe).output;
    for (std::size_t k = 0; k < y0.size(); ++k) CHECK(y0[k] == y1[k]);
}

TEST_CASE("save, load, save produces byte-identical files") {
    TrainedNet t;
    TempDir dir;
    save_checkpoint(dir.file("a.json"), t.net, t.opt, 5, 9);
    const Checkpoint ck = load_checkpoint(dir.file("a.json"));
    save_checkpoint(dir.file("b.json"), ck.net, ck.opt, ck.step, ck.seed);
    CHECK(read_file(dir.file("a.json")) == read_file(dir.file("b.json")));
}

TEST_CASE("awkward doubles survive the decimal round trip") {
    TrainedNet t;
    const std::vector<double> awkward = {0.1 + 0.2, 1.0 / 3.0,  -0.0, 5e-324,
                                         1e308,     -2.5e-17,   M_PI, 1e-300};
    for (std::size_t i = 0; i < awkward.size(); ++i) {
        t.net.params()[0].value[i] = awkward[i];
    }
    TempDir dir;
    save_checkpoint(dir.file("ck.json"), t.net, t.opt);
    const Checkpoint ck = load_checkpoint(dir.file("ck.json"));
    for (std::size_t i = 0; i < awkward.size(); ++i) {
        const double v = ck.net.params()[0].value[i];
        CHECK(v == awkward[i]);
        CHECK(std::signbit(v) == std::signbit(awkward[i]));
    }
}

TEST_CASE("checkpoint saving refuses overwrites and non-finite state") {
    TrainedNet t;
    TempDir dir;
    const std::string path = dir.file("ck.json");
    save_checkpoint(path, t.net, t.opt);
    CHECK_THROWS_WITH_AS(save_checkpoint(path, t.net, t.opt),
                         doctest::Contains("refusing to overwrite"), std::runtime_error);
    save_checkpoint(path, t.net, t.opt, 0, 0, true);  // force

    t.net.params()[0].value[0] = std::nan("");
    CHECK_THROWS_WITH_AS(save_checkpoint(dir.file("bad.json"), t.net, t.opt),
                         doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("checkpoint loading rejects version, truncation, and spec tampering") {
    TrainedNet t;
    TempDir dir;
    const std::string path = dir.file("ck.json");
    save_checkpoint(path, t.net, t.opt);
    const std::string text = read_file(path);

    {
        std::string bad = text;
        const auto pos = bad.find("\"schema_version\": 1");
        REQUIRE(pos != std::string::npos);
        bad.replace(pos, std::string("\"schema_version\": 1").size(),
                    "\"schema_version\": 9");
        write_file(dir.file("ver.json"), bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("ver.json")),
                             doctest::Contains("schema_version 9 is not supported"),
                             std::runtime_error);
    }
    {
        write_file(dir.file("trunc.json"), text.substr(0, text.size() / 2));
        CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("trunc.json")),
                             doctest::Contains("byte offset"), std::runtime_error);
    }
    {
        // Editing the embedded spec invalidates the stored hash.
        std::string bad = text;
        const auto pos = bad.find("he_gaussian");
        REQUIRE(pos != std::string::npos);
        bad.replace(pos, std::string("he_gaussian").size(), "fan_in_gaussian");
        write_file(dir.file("tamper.json"), bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("tamper.json")),
                             doctest::Contains("spec hash mismatch"), std::runtime_error);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("absent.json")),
                         doctest::Contains("cannot open"), std::runtime_error);
}

// ---------------------------------------------------------------------------
// Metric files
// ---------------------------------------------------------------------------

TEST_CASE("metric writer emits the fixed header and nan-safe rows") {
    TempDir dir;
    {
        MetricWriter w(dir.file("m.csv"), dir.file("m.jsonl"), false);
        MetricRecord rec;
        rec.step = 7;
        rec.task = 1;
        rec.loss = 0.5;
        rec.accuracy = std::nan("");
        rec.param_norm = 3.25;
        rec.entropy = 0.0;
        w.write(rec);

        MetricRecord boundary = rec;
        boundary.step = 8;
        boundary.boundary = "before_switch";
        boundary.layer_norms = {{0, 1.5}, {2, 2.5}};
        w.write(boundary);
        w.flush();
    }
    const auto csv = lines_of(read_file(dir.file("m.csv")));
    REQUIRE(csv.size() == 3);
    CHECK(csv[0] == kMetricCsvHeader);
    CHECK(csv[1] == "7,1,0.5,nan,0,0,3.25,0");
    CHECK(csv[2].substr(0, 2) == "8,");

    const auto events = lines_of(read_file(dir.file("m.jsonl")));
    REQUIRE(events.size() == 1);
    const json e = json::parse(events[0]);
    CHECK(e["step"] == 8);
    CHECK(e["kind"] == "boundary");
    CHECK(e["payload"]["tag"] == "before_switch");
    CHECK(e["payload"]["layer_norms"].size() == 2);

    CHECK_THROWS_WITH_AS(MetricWriter(dir.file("m.csv"), dir.file("m.jsonl"), false),
                         doctest::Contains("refusing to overwrite"), std::runtime_error);
    MetricWriter forced(dir.file("m.csv"), dir.file("m.jsonl"), true);
}

// ---------------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------------

TEST_CASE("cli run writes config, metrics, and a loadable checkpoint") {
    TempDir dir;
    write_file(dir.file("cfg.json"), kSmallConfig);
    const std::string out = dir.file("out");

    REQUIRE(run_cli({"run", "--config", dir.file("cfg.json"), "--out", out}) == 0);
    const auto csv = lines_of(read_file(out + "/metrics.csv"));
    REQUIRE(csv.size() >= 2);
    CHECK(csv[0] == kMetricCsvHeader);
    CHECK(fs::exists(out + "/config.json"));
    CHECK(fs::exists(out + "/metrics.jsonl"));

    const Checkpoint ck = load_checkpoint(out + "/checkpoint.json");
    CHECK(ck.step == 80);  // 40 steps/task x 2 tasks
    CHECK(ck.seed == 3);

    // The emitted config is the canonical document and parses identically.
    const ParsedConfig again = parse_config(read_file(out + "/config.json"));
    CHECK(again.applied_defaults.empty());
    CHECK(again.config.batch_size == 30);

    // Existing outputs are protected; --force overwrites.
    CHECK(run_cli({"run", "--config", dir.file("cfg.json"), "--out", out}) == 1);
    CHECK(run_cli({"run", "--config", dir.file("cfg.json"), "--out", out, "--force"}) ==
          0);
}

TEST_CASE("cli run is byte-deterministic for a fixed seed") {
    TempDir dir;
    write_file(dir.file("cfg.json"), kSmallConfig);
    REQUIRE(run_cli({"run", "--config", dir.file("cfg.json"), "--out", dir.file("a")}) ==
            0);
    REQUIRE(run_cli({"run", "--config", dir.file("cfg.json"), "--out", dir.file("b")}) ==
            0);
    CHECK(read_file(dir.file("a/metrics.csv")) == read_file(dir.file("b/metrics.csv")));
    CHECK(read_file(dir.file("a/metrics.jsonl")) ==
          read_file(dir.file("b/metrics.jsonl")));
    CHECK(read_file(dir.file("a/checkpoint.json")) ==
          read_file(dir.file("b/checkpoint.json")));

    // A different seed changes the trajectory.
    REQUIRE(run_cli({"run", "--config", dir.file("cfg.json"), "--out", dir.file("c"),
                     "--seed", "99"}) == 0);
    CHECK(read_file(dir.file("a/metrics.csv")) != read_file(dir.file("c/metrics.csv")));
    const json cfg = json::parse(read_file(dir.file("c/config.json")));
    CHECK(cfg["seed"] == 99);
}

TEST_CASE("cli run returns 2 when training diverges") {
    TempDir dir;
    write_file(dir.file("cfg.json"), R"({
      "schema_version": 1,
      "net": {"layers": [
        {"kind": "dense", "in": 4, "out": 8},
        {"kind": "activation", "act": "relu"},
        {"kind": "dense", "in": 8, "out": 1}]},
      "stream": {"dataset": {"kind": "gaussian", "rows": 32, "dim": 4},
                 "mode": "stationary", "steps_per_task": 50, "num_tasks": 1},
      "targets": {"kind": "offset_sine", "m": 100000},
      "optimizer": {"algo": "sgd", "lr": 1e8},
      "loss": {"kind": "mse"},
      "batch_size": 16, "cadence": 10
    })");
    CHECK(run_cli({"run", "--config", dir.file("cfg.json"), "--out", dir.file("out")}) ==
          2);
    const std::string csv = read_file(dir.file("out/metrics.csv"));
    CHECK(csv.find("nan") != std::string::npos);
    const std::string events = read_file(dir.file("out/metrics.jsonl"));
    CHECK(events.find("divergence") != std::string::npos);
}

TEST_CASE("cli probe reproduces rho squared at step zero") {
    TempDir dir;
    write_file(dir.file("cfg.json"), kSmallConfig);
    REQUIRE(run_cli({"run", "--config", dir.file("cfg.json"), "--out", dir.file("out")}) ==
            0);
    REQUIRE(run_cli({"probe", "--checkpoint", dir.file("out/checkpoint.json"), "--out",
                     dir.file("probe"), "--rho", "2", "--steps", "32", "--rows", "24"}) ==
            0);
    const auto csv = lines_of(read_file(dir.file("probe/probe.csv")));
    REQUIRE(csv.size() >= 3);
    CHECK(csv[0] == "step,loss");
    CHECK(csv[1] == "0,4");  // sum-of-squares perturbation norm rho^2 = 4, exactly
    const auto last = csv.back();
    CHECK(last.substr(0, 3) == "32,");
}

TEST_CASE("cli export-plot folds metrics into per-figure tables") {
    TempDir dir;
    write_file(dir.file("cfg.json"), kSmallConfig);
    REQUIRE(run_cli({"run", "--config", dir.file("cfg.json"), "--out", dir.file("out")}) ==
            0);
    REQUIRE(run_cli({"export-plot", "--in", dir.file("out/metrics.csv"), "--out",
                     dir.file("plots")}) == 0);
    const auto summary = lines_of(read_file(dir.file("plots/task_summary.csv")));
    REQUIRE(summary.size() == 3);  // header + one row per task
    CHECK(summary[0] ==
          "task,step,loss,accuracy,dead_frac,zombie_frac,param_norm,entropy");
    CHECK(summary[1].substr(0, 2) == "0,");
    CHECK(summary[2].substr(0, 2) == "1,");

    const auto drops = lines_of(read_file(dir.file("plots/boundary_drops.csv")));
    REQUIRE(drops.size() == 2);  // header + one switch
    CHECK(drops[1].substr(0, 3) == "40,");

    write_file(dir.file("bogus.csv"), "nope\n1,2\n");
    CHECK(run_cli({"export-plot", "--in", dir.file("bogus.csv"), "--out",
                   dir.file("plots2")}) == 1);
}

TEST_CASE("cli microscope writes both branch logs") {
    TempDir dir;
    write_file(dir.file("cfg.json"), kSmallConfig);
    REQUIRE(run_cli({"microscope", "--config", dir.file("cfg.json"), "--out",
                     dir.file("mic"), "--converge", "30", "--post", "8"}) == 0);
    const auto stale = lines_of(read_file(dir.file("mic/microscope_stale.csv")));
    const auto reset = lines_of(read_file(dir.file("mic/microscope_reset.csv")));
    REQUIRE(stale.size() == 10);  // header + post_steps + 1
    REQUIRE(reset.size() == 10);
    CHECK(stale[0].substr(0, 5) == "step,");
    CHECK(stale[1] == reset[1]);  // shared step-0 state before the branches diverge
}

TEST_CASE("cli dose and bandit produce their tables") {
    TempDir dir;
    REQUIRE(run_cli({"dose", "--out", dir.file("dose"), "--offsets", "0,2", "--seeds",
                     "1", "--pretrain", "30", "--finetune", "30", "--batch", "32",
                     "--rows", "48", "--hidden", "12"}) == 0);
    const auto dose = lines_of(read_file(dir.file("dose/dose.csv")));
    REQUIRE(dose.size() == 3);
    CHECK(dose[0] == "b,pretrain_final,finetune_final");
    CHECK(dose[1].substr(0, 2) == "0,");
    CHECK(dose[2].substr(0, 2) == "2,");

    REQUIRE(run_cli({"bandit", "--out", dir.file("bandit"), "--gamma", "0", "--loss",
                     "mse", "--steps", "300", "--classes", "3", "--per-class", "8",
                     "--batch", "16", "--warmup", "32", "--target-period", "50"}) == 0);
    const auto csv = lines_of(read_file(dir.file("bandit/metrics.csv")));
    CHECK(csv[0] == kMetricCsvHeader);
    CHECK(csv.size() >= 2);
    const std::string events = read_file(dir.file("bandit/metrics.jsonl"));
    CHECK(events.find("greedy_value") != std::string::npos);
}

TEST_CASE("cli gradcheck passes on the default suite and fails on absurd tolerance") {
    CHECK(run_cli({"gradcheck", "--cases", "4"}) == 0);
    CHECK(run_cli({"gradcheck", "--cases", "4", "--tolerance", "1e-18"}) == 1);
}

TEST_CASE("cli rejects unknown subcommands and bad flags with exit 1") {
    CHECK(run_cli({"frobnicate"}) == 1);
    CHECK(run_cli({}) == 1);
    CHECK(run_cli({"run", "--config"}) == 1);        // missing value
    CHECK(run_cli({"run", "--out", "somewhere"}) == 1);  // missing --config
    CHECK(run_cli({"probe", "--checkpoint", "/nonexistent.json", "--out", "x"}) == 1);
}
