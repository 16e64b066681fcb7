#include "plab/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <initializer_list>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "plab/diagnostics.hpp"
#include "plab/gradcheck.hpp"
#include "plab/rng.hpp"
#include "plab/tasks.hpp"

namespace plab {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void ensure_fresh(const std::string& path, bool force) {
    if (!force && fs::exists(path)) {
        throw std::runtime_error("refusing to overwrite " + path + " (pass --force)");
    }
}

void write_text_file(const std::string& path, const std::string& text, bool force) {
    ensure_fresh(path, force);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << text;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string resolve_data_path(const std::string& p) {
    if (p.empty() || fs::path(p).is_absolute()) return p;
    if (const char* dir = std::getenv("PLAB_DATA_DIR")) {
        return (fs::path(dir) / p).string();
    }
    return p;
}

[[noreturn]] void cfg_fail(const std::string& msg) {
    throw std::invalid_argument("config: " + msg);
}

// ---------------------------------------------------------------------------
// Config section reader: validates keys, applies defaults, builds the
// canonical (fully defaulted) document alongside.
// ---------------------------------------------------------------------------

class Section {
public:
    Section(const json& src, std::string path, json* canon,
            std::vector<std::string>* defaults)
        : src_(&src), path_(std::move(path)), canon_(canon), defaults_(defaults) {
        if (!src.is_object()) cfg_fail(path_ + " must be a JSON object");
    }

    void allow(std::initializer_list<const char*> keys) const {
        for (auto it = src_->begin(); it != src_->end(); ++it) {
            const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) {
                return it.key() == k;
            });
            if (!known) cfg_fail("unknown key \"" + it.key() + "\" at " + path_);
        }
    }

    bool has(const char* key) const { return src_->contains(key); }
    const std::string& path() const { return path_; }
    std::string kp(const char* key) const { return path_ + "." + key; }

    const json& require(const char* key) const {
        if (!has(key)) {
            cfg_fail("missing required key \"" + std::string(key) + "\" at " + path_);
        }
        return (*src_)[key];
    }

    double num(const char* key, double def) {
        const double v = has(key) ? to_num((*src_)[key], key) : defaulted(key, def);
        if (canon_) (*canon_)[key] = v;
        return v;
    }
    double req_num(const char* key) {
        const double v = to_num(require(key), key);
        if (canon_) (*canon_)[key] = v;
        return v;
    }
    std::uint64_t uint(const char* key, std::uint64_t def) {
        const std::uint64_t v =
            has(key) ? to_uint((*src_)[key], key) : defaulted(key, def);
        if (canon_) (*canon_)[key] = v;
        return v;
    }
    std::uint64_t req_uint(const char* key) {
        const std::uint64_t v = to_uint(require(key), key);
        if (canon_) (*canon_)[key] = v;
        return v;
    }
    bool flag(const char* key, bool def) {
        bool v = def;
        if (has(key)) {
            const json& j = (*src_)[key];
            if (!j.is_boolean()) cfg_fail(kp(key) + " must be a boolean");
            v = j.get<bool>();
        } else {
            note(key);
        }
        if (canon_) (*canon_)[key] = v;
        return v;
    }
    std::string str(const char* key, const char* def) {
        std::string v = def;
        if (has(key)) {
            v = to_str((*src_)[key], key);
        } else {
            note(key);
        }
        if (canon_) (*canon_)[key] = v;
        return v;
    }
    std::string req_str(const char* key) {
        std::string v = to_str(require(key), key);
        if (canon_) (*canon_)[key] = v;
        return v;
    }

    [[noreturn]] void bad(const char* key, const std::string& got,
                          const std::string& need) const {
        cfg_fail(std::string(key) + " = " + got + " out of range at " + kp(key) + " (" +
                 need + ")");
    }

private:
    double to_num(const json& j, const char* key) const {
        if (!j.is_number()) cfg_fail(kp(key) + " must be a number");
        return j.get<double>();
    }
    std::uint64_t to_uint(const json& j, const char* key) const {
        if (j.is_number_unsigned()) return j.get<std::uint64_t>();
        if (j.is_number_integer()) {
            const std::int64_t v = j.get<std::int64_t>();
            if (v < 0) bad(key, std::to_string(v), "must be >= 0");
            return static_cast<std::uint64_t>(v);
        }
        cfg_fail(kp(key) + " must be a non-negative integer");
    }
    std::string to_str(const json& j, const char* key) const {
        if (!j.is_string()) cfg_fail(kp(key) + " must be a string");
        return j.get<std::string>();
    }
    template <typename T>
    T defaulted(const char* key, T def) {
        note(key);
        return def;
    }
    void note(const char* key) {
        if (defaults_) defaults_->push_back(kp(key));
    }

    const json* src_;
    std::string path_;
    json* canon_;
    std::vector<std::string>* defaults_;
};

const json& sub_or_empty(const json& src, const char* key) {
    static const json empty = json::object();
    if (src.contains(key)) {
        return src[key];
    }
    return empty;
}

// ---------------------------------------------------------------------------
// Enum token maps
// ---------------------------------------------------------------------------

template <typename T>
T token(const Section& s, const char* key, const std::string& got,
        std::initializer_list<std::pair<const char*, T>> options) {
    for (const auto& [name, value] : options) {
        if (got == name) return value;
    }
    std::string expected;
    for (const auto& [name, value] : options) {
        (void)value;
        if (!expected.empty()) expected += "|";
        expected += name;
    }
    cfg_fail("unknown value \"" + got + "\" at " + s.kp(key) + " (expected " + expected +
             ")");
}

// ---------------------------------------------------------------------------
// Network spec <-> JSON
// ---------------------------------------------------------------------------

NetworkSpec parse_net_spec(const json& j, const std::string& path, json* canon,
                           std::vector<std::string>* defaults) {
    Section net(j, path, canon, defaults);
    net.allow({"init", "seed", "layers"});
    NetworkSpec spec;
    spec.init = token<InitScheme>(net, "init", net.str("init", "he_gaussian"),
                                  {{"he_gaussian", InitScheme::he_gaussian},
                                   {"fan_in_gaussian", InitScheme::fan_in_gaussian}});
    spec.seed = net.uint("seed", 0);

    const json& layers = net.require("layers");
    if (!layers.is_array() || layers.empty()) {
        cfg_fail(net.kp("layers") + " must be a non-empty array");
    }
    json canon_layers = json::array();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string lp = net.kp("layers") + "[" + std::to_string(i) + "]";
        json lc = json::object();
        Section layer(layers[i], lp, &lc, defaults);
        const std::string kind = layer.req_str("kind");
        if (kind == "dense") {
            layer.allow({"kind", "in", "out", "bias"});
            DenseSpec d;
            d.in = layer.req_uint("in");
            d.out = layer.req_uint("out");
            if (d.in == 0) layer.bad("in", "0", "must be >= 1");
            if (d.out == 0) layer.bad("out", "0", "must be >= 1");
            d.has_bias = layer.flag("bias", true);
            spec.layers.push_back(d);
        } else if (kind == "conv2d") {
            layer.allow({"kind", "in_ch", "out_ch", "kernel", "stride", "padding"});
            Conv2DSpec c;
            c.in_ch = layer.req_uint("in_ch");
            c.out_ch = layer.req_uint("out_ch");
            if (c.in_ch == 0) layer.bad("in_ch", "0", "must be >= 1");
            if (c.out_ch == 0) layer.bad("out_ch", "0", "must be >= 1");
            c.kernel = layer.uint("kernel", 3);
            if (c.kernel == 0) layer.bad("kernel", "0", "must be >= 1");
            c.stride = layer.uint("stride", 1);
            if (c.stride == 0) layer.bad("stride", "0", "must be >= 1");
            c.padding = token<PadMode>(layer, "padding", layer.str("padding", "valid"),
                                       {{"valid", PadMode::valid}, {"same", PadMode::same}});
            spec.layers.push_back(c);
        } else if (kind == "flatten") {
            layer.allow({"kind"});
            spec.layers.push_back(FlattenSpec{});
        } else if (kind == "activation") {
            layer.allow({"kind", "act", "slope", "offset"});
            ActivationSpec a;
            a.kind = token<ActKind>(layer, "act", layer.req_str("act"),
                                    {{"relu", ActKind::relu},
                                     {"leaky_relu", ActKind::leaky_relu},
                                     {"gelu", ActKind::gelu},
                                     {"tanh", ActKind::tanh_fn},
                                     {"abs", ActKind::abs_fn}});
            a.slope = layer.num("slope", 0.01);
            if (!(a.slope > 0.0 && a.slope < 1.0)) {
                layer.bad("slope", format_double(a.slope), "must be in (0, 1)");
            }
            a.input_offset = layer.num("offset", 0.0);
            if (!std::isfinite(a.input_offset)) {
                layer.bad("offset", format_double(a.input_offset), "must be finite");
            }
            spec.layers.push_back(a);
        } else if (kind == "layer_norm") {
            layer.allow({"kind", "eps", "affine"});
            LayerNormSpec n;
            n.eps = layer.num("eps", 1e-5);
            if (!(n.eps > 0.0)) layer.bad("eps", format_double(n.eps), "must be > 0");
            n.affine = layer.flag("affine", true);
            spec.layers.push_back(n);
        } else if (kind == "batch_norm") {
            layer.allow({"kind", "eps", "momentum", "affine"});
            BatchNormSpec n;
            n.eps = layer.num("eps", 1e-5);
            if (!(n.eps > 0.0)) layer.bad("eps", format_double(n.eps), "must be > 0");
            n.momentum = layer.num("momentum", 0.1);
            if (!(n.momentum > 0.0 && n.momentum <= 1.0)) {
                layer.bad("momentum", format_double(n.momentum), "must be in (0, 1]");
            }
            n.affine = layer.flag("affine", true);
            spec.layers.push_back(n);
        } else if (kind == "decomposed_norm") {
            layer.allow({"kind", "center", "scale", "eps", "momentum"});
            DecomposedNormSpec n;
            n.center = token<NormAxis>(layer, "center", layer.str("center", "none"),
                                       {{"none", NormAxis::none},
                                        {"batch", NormAxis::batch},
                                        {"feature", NormAxis::feature}});
            n.scale = token<NormAxis>(layer, "scale", layer.str("scale", "none"),
                                      {{"none", NormAxis::none},
                                       {"batch", NormAxis::batch},
                                       {"feature", NormAxis::feature}});
            n.eps = layer.num("eps", 1e-5);
            if (!(n.eps > 0.0)) layer.bad("eps", format_double(n.eps), "must be > 0");
            n.momentum = layer.num("momentum", 0.1);
            if (!(n.momentum > 0.0 && n.momentum <= 1.0)) {
                layer.bad("momentum", format_double(n.momentum), "must be in (0, 1]");
            }
            spec.layers.push_back(n);
        } else {
            cfg_fail("unknown layer kind \"" + kind + "\" at " + lp +
                     " (expected dense|conv2d|flatten|activation|layer_norm|"
                     "batch_norm|decomposed_norm)");
        }
        canon_layers.push_back(std::move(lc));
    }
    if (canon) (*canon)["layers"] = std::move(canon_layers);

    try {
        validate_spec(spec);
    } catch (const std::invalid_argument& e) {
        cfg_fail(path + ": " + e.what());
    }
    return spec;
}

json layer_to_json(const LayerSpec& ls) {
    json j = json::object();
    if (const auto* d = std::get_if<DenseSpec>(&ls)) {
        j["kind"] = "dense";
        j["in"] = d->in;
        j["out"] = d->out;
        j["bias"] = d->has_bias;
    } else if (const auto* c = std::get_if<Conv2DSpec>(&ls)) {
        j["kind"] = "conv2d";
        j["in_ch"] = c->in_ch;
        j["out_ch"] = c->out_ch;
        j["kernel"] = c->kernel;
        j["stride"] = c->stride;
        j["padding"] = c->padding == PadMode::valid ? "valid" : "same";
    } else if (std::holds_alternative<FlattenSpec>(ls)) {
        j["kind"] = "flatten";
    } else if (const auto* a = std::get_if<ActivationSpec>(&ls)) {
        j["kind"] = "activation";
        j["act"] = act_kind_name(a->kind);
        j["slope"] = a->slope;
        j["offset"] = a->input_offset;
    } else if (const auto* n = std::get_if<LayerNormSpec>(&ls)) {
        j["kind"] = "layer_norm";
        j["eps"] = n->eps;
        j["affine"] = n->affine;
    } else if (const auto* n = std::get_if<BatchNormSpec>(&ls)) {
        j["kind"] = "batch_norm";
        j["eps"] = n->eps;
        j["momentum"] = n->momentum;
        j["affine"] = n->affine;
    } else if (const auto* n = std::get_if<DecomposedNormSpec>(&ls)) {
        auto axis_name = [](NormAxis a) {
            return a == NormAxis::none ? "none" : (a == NormAxis::batch ? "batch" : "feature");
        };
        j["kind"] = "decomposed_norm";
        j["center"] = axis_name(n->center);
        j["scale"] = axis_name(n->scale);
        j["eps"] = n->eps;
        j["momentum"] = n->momentum;
    }
    return j;
}

json net_spec_to_json(const NetworkSpec& spec) {
    json j = json::object();
    j["init"] = spec.init == InitScheme::he_gaussian ? "he_gaussian" : "fan_in_gaussian";
    j["seed"] = spec.seed;
    json layers = json::array();
    for (const LayerSpec& ls : spec.layers) layers.push_back(layer_to_json(ls));
    j["layers"] = std::move(layers);
    return j;
}

// ---------------------------------------------------------------------------
// Dataset / stream / target parsing
// ---------------------------------------------------------------------------

Dataset parse_dataset(const json& j, const std::string& path, json* canon,
                      std::vector<std::string>* defaults) {
    Section ds(j, path, canon, defaults);
    const std::string kind = ds.req_str("kind");
    if (kind == "synthetic") {
        ds.allow({"kind", "classes", "input_dim", "per_class", "seed"});
        const std::uint64_t classes = ds.uint("classes", 2);
        const std::uint64_t dim = ds.uint("input_dim", 8);
        const std::uint64_t per_class = ds.uint("per_class", 64);
        const std::uint64_t seed = ds.uint("seed", 0);
        if (classes == 0) ds.bad("classes", "0", "must be >= 1");
        if (dim == 0) ds.bad("input_dim", "0", "must be >= 1");
        if (per_class == 0) ds.bad("per_class", "0", "must be >= 1");
        return synth_dataset(static_cast<int>(classes), dim, per_class, seed);
    }
    if (kind == "gaussian") {
        ds.allow({"kind", "rows", "dim", "seed"});
        const std::uint64_t rows = ds.uint("rows", 256);
        const std::uint64_t dim = ds.uint("dim", 8);
        const std::uint64_t seed = ds.uint("seed", 0);
        if (rows == 0) ds.bad("rows", "0", "must be >= 1");
        if (dim == 0) ds.bad("dim", "0", "must be >= 1");
        Rng rng(seed);
        Dataset d;
        d.inputs = Tensor::zeros({rows, dim});
        for (auto& v : d.inputs.vec()) v = rng.normal();
        return d;
    }
    if (kind == "mnist") {
        ds.allow({"kind", "images", "labels"});
        const std::string images = ds.req_str("images");
        const std::string labels = ds.req_str("labels");
        return load_mnist_idx(resolve_data_path(images), resolve_data_path(labels));
    }
    if (kind == "cifar10") {
        ds.allow({"kind", "files"});
        const json& files = ds.require("files");
        if (!files.is_array() || files.empty()) {
            cfg_fail(ds.kp("files") + " must be a non-empty array of paths");
        }
        std::vector<std::string> paths;
        for (const json& f : files) {
            if (!f.is_string()) cfg_fail(ds.kp("files") + " must contain strings");
            paths.push_back(resolve_data_path(f.get<std::string>()));
        }
        if (canon) (*canon)["files"] = files;
        return load_cifar10_bin(paths);
    }
    cfg_fail("unknown value \"" + kind + "\" at " + ds.kp("kind") +
             " (expected synthetic|gaussian|mnist|cifar10)");
}

TaskStream parse_stream(const json& j, const std::string& path, json* canon,
                        std::vector<std::string>* defaults) {
    Section st(j, path, canon, defaults);
    st.allow({"dataset", "mode", "eps", "fraction", "steps_per_task", "num_tasks"});
    TaskStream stream;
    json canon_ds = json::object();
    stream.base = parse_dataset(st.require("dataset"), st.kp("dataset"),
                                canon ? &canon_ds : nullptr, defaults);
    if (canon) (*canon)["dataset"] = std::move(canon_ds);
    stream.mode = token<TaskMode>(st, "mode", st.str("mode", "stationary"),
                                  {{"stationary", TaskMode::stationary},
                                   {"random_labels", TaskMode::random_labels},
                                   {"permute_classes", TaskMode::permute_classes},
                                   {"permute_pixels", TaskMode::permute_pixels},
                                   {"continual", TaskMode::continual},
                                   {"composite", TaskMode::composite},
                                   {"growing", TaskMode::growing}});
    stream.eps = st.num("eps", 1.0);
    if (!(stream.eps >= 0.0 && stream.eps <= 1.0)) {
        st.bad("eps", format_double(stream.eps), "must be in [0, 1]");
    }
    stream.fraction = st.num("fraction", 0.5);
    if (!(stream.fraction >= 0.0 && stream.fraction <= 1.0)) {
        st.bad("fraction", format_double(stream.fraction), "must be in [0, 1]");
    }
    stream.steps_per_task = st.uint("steps_per_task", 2000);
    if (stream.steps_per_task == 0) st.bad("steps_per_task", "0", "must be >= 1");
    stream.num_tasks = st.uint("num_tasks", 1);
    stream.seed = 0;  // filled from the root seed after parsing
    return stream;
}

RegressionTargetGen parse_targets(const json& j, const std::string& path, json* canon,
                                  std::vector<std::string>* defaults) {
    Section t(j, path, canon, defaults);
    t.allow({"kind", "m", "b", "c", "alpha", "period", "hidden", "seed"});
    RegressionTargetGen gen;
    gen.kind = token<TargetKind>(t, "kind", t.str("kind", "offset_sine"),
                                 {{"offset_sine", TargetKind::offset_sine},
                                  {"centered_scaled", TargetKind::centered_scaled},
                                  {"moving_sine", TargetKind::moving_sine}});
    gen.m = t.num("m", 1e5);
    if (!(gen.m >= 1.0)) t.bad("m", format_double(gen.m), "must be >= 1");
    gen.b = t.num("b", 0.0);
    if (!std::isfinite(gen.b)) t.bad("b", format_double(gen.b), "must be finite");
    gen.c = t.num("c", 0.0);
    gen.alpha = t.num("alpha", 1.0);
    gen.period = t.num("period", 20.0);
    if (!(gen.period > 0.0)) t.bad("period", format_double(gen.period), "must be > 0");
    gen.hidden = t.uint("hidden", 64);
    if (gen.hidden == 0) t.bad("hidden", "0", "must be >= 1");
    gen.seed = t.uint("seed", 0);
    return gen;
}

}  // namespace

// ---------------------------------------------------------------------------
// parse_config
// ---------------------------------------------------------------------------

std::string format_double(double v) {
    // "-0" would reload as integer zero and drop the sign; keep the float form.
    if (v == 0.0 && std::signbit(v)) return "-0.0";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

ParsedConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config: invalid JSON at byte offset " +
                                    std::to_string(e.byte));
    }

    ParsedConfig out;
    json canon = json::object();
    Section top(root, "$", &canon, &out.applied_defaults);
    top.allow({"schema_version", "seed", "net", "stream", "targets", "optimizer", "loss",
               "regularizer", "resets", "batch_size", "cadence", "probe_rows"});

    const std::uint64_t version = top.req_uint("schema_version");
    if (version != static_cast<std::uint64_t>(kConfigSchemaVersion)) {
        cfg_fail("unsupported schema_version " + std::to_string(version) +
                 " (supported: " + std::to_string(kConfigSchemaVersion) + ")");
    }

    ExperimentConfig& cfg = out.config;
    cfg.seed = top.uint("seed", 0);

    {
        json canon_net = json::object();
        cfg.net = parse_net_spec(top.require("net"), "$.net", &canon_net,
                                 &out.applied_defaults);
        canon["net"] = std::move(canon_net);
    }
    {
        json canon_stream = json::object();
        cfg.stream = parse_stream(top.require("stream"), "$.stream", &canon_stream,
                                  &out.applied_defaults);
        canon["stream"] = std::move(canon_stream);
        cfg.stream.seed = derive_seed(cfg.seed, "task");
    }
    if (top.has("targets")) {
        json canon_targets = json::object();
        cfg.targets = parse_targets(top.require("targets"), "$.targets", &canon_targets,
                                    &out.applied_defaults);
        canon["targets"] = std::move(canon_targets);
    }
    {
        json c = json::object();
        Section opt(sub_or_empty(root, "optimizer"), "$.optimizer", &c,
                    &out.applied_defaults);
        opt.allow({"algo", "lr"});
        cfg.algo = token<OptAlgo>(opt, "algo", opt.str("algo", "adam"),
                                  {{"sgd", OptAlgo::sgd}, {"adam", OptAlgo::adam}});
        cfg.lr = opt.num("lr", 1e-3);
        if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) {
            opt.bad("lr", format_double(cfg.lr), "must be > 0");
        }
        canon["optimizer"] = std::move(c);
    }
    {
        json c = json::object();
        Section loss(sub_or_empty(root, "loss"), "$.loss", &c, &out.applied_defaults);
        loss.allow({"kind", "smoothing", "two_hot_bound"});
        cfg.loss = token<LossKind>(loss, "kind", loss.str("kind", "xent"),
                                   {{"xent", LossKind::xent},
                                    {"mse", LossKind::mse},
                                    {"two_hot", LossKind::two_hot}});
        cfg.smoothing = loss.num("smoothing", 0.0);
        if (!(cfg.smoothing >= 0.0 && cfg.smoothing < 1.0)) {
            loss.bad("smoothing", format_double(cfg.smoothing), "must be in [0, 1)");
        }
        const std::uint64_t bound = loss.uint("two_hot_bound", 100);
        if (bound == 0) loss.bad("two_hot_bound", "0", "must be >= 1");
        cfg.two_hot_bound = static_cast<int>(bound);
        canon["loss"] = std::move(c);
    }
    {
        json c = json::object();
        Section reg(sub_or_empty(root, "regularizer"), "$.regularizer", &c,
                    &out.applied_defaults);
        reg.allow({"l2", "feature_norm"});
        cfg.reg.l2 = reg.num("l2", 0.0);
        if (!(cfg.reg.l2 >= 0.0)) {
            reg.bad("l2", format_double(cfg.reg.l2), "must be >= 0");
        }
        cfg.reg.feature_norm = reg.num("feature_norm", 0.0);
        if (!(cfg.reg.feature_norm >= 0.0)) {
            reg.bad("feature_norm", format_double(cfg.reg.feature_norm), "must be >= 0");
        }
        canon["regularizer"] = std::move(c);
    }
    {
        json c = json::object();
        Section resets(sub_or_empty(root, "resets"), "$.resets", &c,
                       &out.applied_defaults);
        resets.allow({"optimizer", "rescale_weights", "redo_tau"});
        cfg.resets.reset_optimizer = resets.flag("optimizer", false);
        cfg.resets.rescale_weights = resets.flag("rescale_weights", false);
        cfg.resets.redo_tau = resets.num("redo_tau", -1.0);
        canon["resets"] = std::move(c);
    }
    cfg.batch_size = top.uint("batch_size", 128);
    if (cfg.batch_size == 0) top.bad("batch_size", "0", "must be >= 1");
    cfg.cadence = top.uint("cadence", 100);
    if (cfg.cadence == 0) top.bad("cadence", "0", "must be >= 1");
    cfg.probe_rows = top.uint("probe_rows", 256);
    if (cfg.probe_rows == 0) top.bad("probe_rows", "0", "must be >= 1");

    out.canonical = canon.dump(2) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void emit_tensor(std::ostream& os, const Tensor& t) {
    os << "{\"shape\": [";
    for (std::size_t i = 0; i < t.rank(); ++i) {
        if (i) os << ", ";
        os << t.dim(i);
    }
    os << "], \"data\": [";
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (i) os << ", ";
        os << format_double(t[i]);
    }
    os << "]}";
}

Tensor parse_tensor(const json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("shape") || !j.contains("data")) {
        throw std::runtime_error(what + ": expected an object with shape and data");
    }
    std::vector<std::size_t> shape;
    for (const json& d : j["shape"]) shape.push_back(d.get<std::size_t>());
    std::vector<double> data;
    data.reserve(j["data"].size());
    for (const json& v : j["data"]) data.push_back(v.get<double>());
    try {
        return Tensor::from_data(std::move(shape), std::move(data));
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(what + ": " + e.what());
    }
}

void check_finite(const Tensor& t, const std::string& name) {
    if (t.has_nonfinite()) {
        throw std::runtime_error("checkpoint: non-finite values in " + name);
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const Network& net,
                     const OptimizerState& opt, std::uint64_t step, std::uint64_t seed,
                     bool force) {
    ensure_fresh(path, force);
    for (const Param& p : net.params()) check_finite(p.value, p.name);
    for (const Param& p : net.buffers()) check_finite(p.value, p.name);
    for (std::size_t i = 0; i < opt.m.size(); ++i) {
        check_finite(opt.m[i], "optimizer.m[" + std::to_string(i) + "]");
    }
    for (std::size_t i = 0; i < opt.v.size(); ++i) {
        check_finite(opt.v[i], "optimizer.v[" + std::to_string(i) + "]");
    }

    const std::string spec_text = net_spec_to_json(net.spec()).dump();
    std::ostringstream os;
    os << "{\n";
    os << "\"schema_version\": " << kCheckpointSchemaVersion << ",\n";
    os << "\"step\": " << step << ",\n";
    os << "\"seed\": " << seed << ",\n";
    os << "\"spec_hash\": \"" << hex64(detail::fnv1a(spec_text)) << "\",\n";
    os << "\"spec\": " << spec_text << ",\n";
    os << "\"params\": [\n";
    for (std::size_t i = 0; i < net.params().size(); ++i) {
        const Param& p = net.params()[i];
        os << "{\"name\": \"" << p.name << "\", \"tensor\": ";
        emit_tensor(os, p.value);
        os << "}" << (i + 1 < net.params().size() ? "," : "") << "\n";
    }
    os << "],\n";
    os << "\"buffers\": [\n";
    for (std::size_t i = 0; i < net.buffers().size(); ++i) {
        const Param& p = net.buffers()[i];
        os << "{\"name\": \"" << p.name << "\", \"tensor\": ";
        emit_tensor(os, p.value);
        os << "}" << (i + 1 < net.buffers().size() ? "," : "") << "\n";
    }
    os << "],\n";
    os << "\"init_norms\": {";
    bool first = true;
    for (const auto& [name, norm] : net.init_layer_norms()) {
        if (!first) os << ", ";
        first = false;
        os << "\"" << name << "\": " << format_double(norm);
    }
    os << "},\n";
    os << "\"optimizer\": {\"algo\": \"" << (opt.algo == OptAlgo::sgd ? "sgd" : "adam")
       << "\", \"lr\": " << format_double(opt.lr) << ", \"beta1\": "
       << format_double(opt.beta1) << ", \"beta2\": " << format_double(opt.beta2)
       << ", \"eps\": " << format_double(opt.eps) << ", \"t\": " << opt.t << ",\n";
    os << "\"m\": [\n";
    for (std::size_t i = 0; i < opt.m.size(); ++i) {
        emit_tensor(os, opt.m[i]);
        os << (i + 1 < opt.m.size() ? "," : "") << "\n";
    }
    os << "],\n";
    os << "\"v\": [\n";
    for (std::size_t i = 0; i < opt.v.size(); ++i) {
        emit_tensor(os, opt.v[i]);
        os << (i + 1 < opt.v.size() ? "," : "") << "\n";
    }
    os << "]}\n";
    os << "}\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << os.str();
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string text = read_text_file(path);
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("checkpoint " + path +
                                 ": truncated or malformed at byte offset " +
                                 std::to_string(e.byte));
    }
    auto field = [&](const char* key) -> const json& {
        if (!root.is_object() || !root.contains(key)) {
            throw std::runtime_error("checkpoint " + path + ": missing field \"" + key +
                                     "\"");
        }
        return root[key];
    };

    const std::int64_t version = field("schema_version").get<std::int64_t>();
    if (version != kCheckpointSchemaVersion) {
        throw std::runtime_error("checkpoint " + path + ": schema_version " +
                                 std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointSchemaVersion) + ")");
    }

    const json& spec_json = field("spec");
    const std::string spec_text = spec_json.dump();
    const std::string want_hash = hex64(detail::fnv1a(spec_text));
    const std::string stored_hash = field("spec_hash").get<std::string>();
    if (stored_hash != want_hash) {
        throw std::runtime_error("checkpoint " + path + ": spec hash mismatch (stored " +
                                 stored_hash + ", computed " + want_hash + ")");
    }
    NetworkSpec spec;
    try {
        spec = parse_net_spec(spec_json, "$.spec", nullptr, nullptr);
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("checkpoint " + path + ": " + e.what());
    }

    auto read_named = [&](const json& arr, const char* what) {
        std::vector<Param> out;
        for (const json& item : arr) {
            if (!item.is_object() || !item.contains("name") || !item.contains("tensor")) {
                throw std::runtime_error("checkpoint " + path + ": malformed " + what +
                                         " entry");
            }
            Param p;
            p.name = item["name"].get<std::string>();
            p.value = parse_tensor(item["tensor"], "checkpoint " + path + ": " + p.name);
            out.push_back(std::move(p));
        }
        return out;
    };
    std::vector<Param> params = read_named(field("params"), "params");
    std::vector<Param> buffers = read_named(field("buffers"), "buffers");

    std::map<std::string, double> init_norms;
    for (auto it = field("init_norms").begin(); it != field("init_norms").end(); ++it) {
        init_norms[it.key()] = it.value().get<double>();
    }

    Checkpoint ck;
    try {
        ck.net = restore_network(spec, std::move(params), std::move(buffers),
                                 std::move(init_norms));
    } catch (const std::runtime_error& e) {
        throw std::runtime_error("checkpoint " + path + ": " + e.what());
    }

    const json& oj = field("optimizer");
    const std::string algo = oj.at("algo").get<std::string>();
    ck.opt.algo = algo == "sgd" ? OptAlgo::sgd : OptAlgo::adam;
    ck.opt.lr = oj.at("lr").get<double>();
    ck.opt.beta1 = oj.at("beta1").get<double>();
    ck.opt.beta2 = oj.at("beta2").get<double>();
    ck.opt.eps = oj.at("eps").get<double>();
    ck.opt.t = oj.at("t").get<std::uint64_t>();
    for (const json& t : oj.at("m")) {
        ck.opt.m.push_back(parse_tensor(t, "checkpoint " + path + ": optimizer.m"));
    }
    for (const json& t : oj.at("v")) {
        ck.opt.v.push_back(parse_tensor(t, "checkpoint " + path + ": optimizer.v"));
    }
    const auto& net_params = ck.net.params();
    if (ck.opt.m.size() != net_params.size() || ck.opt.v.size() != net_params.size()) {
        throw std::runtime_error("checkpoint " + path +
                                 ": optimizer moments do not match the parameter list");
    }
    for (std::size_t i = 0; i < net_params.size(); ++i) {
        if (!ck.opt.m[i].same_shape(net_params[i].value) ||
            !ck.opt.v[i].same_shape(net_params[i].value)) {
            throw std::runtime_error("checkpoint " + path + ": moment shape mismatch at " +
                                     net_params[i].name);
        }
    }

    ck.step = field("step").get<std::uint64_t>();
    ck.seed = field("seed").get<std::uint64_t>();
    return ck;
}

// ---------------------------------------------------------------------------
// MetricWriter
// ---------------------------------------------------------------------------

MetricWriter::MetricWriter(const std::string& csv_path, const std::string& jsonl_path,
                           bool force) {
    ensure_fresh(csv_path, force);
    ensure_fresh(jsonl_path, force);
    csv_.open(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv_) throw std::runtime_error("cannot open " + csv_path + " for writing");
    jsonl_.open(jsonl_path, std::ios::binary | std::ios::trunc);
    if (!jsonl_) throw std::runtime_error("cannot open " + jsonl_path + " for writing");
    csv_ << kMetricCsvHeader << "\n";
}

void MetricWriter::write(const MetricRecord& rec) {
    csv_ << rec.step << ',' << rec.task << ',' << format_double(rec.loss) << ','
         << format_double(rec.accuracy) << ',' << format_double(rec.dead_frac) << ','
         << format_double(rec.zombie_frac) << ',' << format_double(rec.param_norm) << ','
         << format_double(rec.entropy) << '\n';
    if (!rec.boundary.empty()) {
        json payload{{"tag", rec.boundary}, {"task", rec.task}};
        json norms = json::array();
        for (const auto& [layer, norm] : rec.layer_norms) {
            norms.push_back(json::array({layer, norm}));
        }
        payload["layer_norms"] = std::move(norms);
        event(rec.step, "boundary", payload.dump());
        flush();  // partial runs stay analyzable at every boundary
    }
    if (rec.diverged) {
        const json payload{{"loss", std::isfinite(rec.loss) ? json(rec.loss) : json()}};
        event(rec.step, "divergence", payload.dump());
        flush();
    }
}

void MetricWriter::event(std::size_t step, const std::string& kind,
                         const std::string& payload_json) {
    jsonl_ << "{\"step\": " << step << ", \"kind\": \"" << kind
           << "\", \"payload\": " << payload_json << "}\n";
}

void MetricWriter::flush() {
    csv_.flush();
    jsonl_.flush();
}

// ---------------------------------------------------------------------------
// CLI commands
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> probe_input_shape(const Network& net,
                                           const std::string& shape_flag,
                                           std::size_t rows) {
    if (!shape_flag.empty()) {
        std::vector<std::size_t> shape{rows};
        std::stringstream ss(shape_flag);
        std::string part;
        while (std::getline(ss, part, ',')) {
            const long v = std::strtol(part.c_str(), nullptr, 10);
            if (v <= 0) {
                throw std::invalid_argument("--shape must be positive integers, got \"" +
                                            shape_flag + "\"");
            }
            shape.push_back(static_cast<std::size_t>(v));
        }
        return shape;
    }
    for (const LayerSpec& ls : net.spec().layers) {
        if (const auto* d = std::get_if<DenseSpec>(&ls)) return {rows, d->in};
        if (std::holds_alternative<Conv2DSpec>(ls)) {
            throw std::invalid_argument(
                "pass --shape C,H,W to probe a convolutional checkpoint");
        }
    }
    throw std::invalid_argument("cannot infer the input width of this network");
}

Tensor gaussian_inputs(const std::vector<std::size_t>& shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::zeros(shape);
    for (auto& v : x.vec()) v = rng.normal();
    return x;
}

std::vector<double> parse_double_list(const std::string& s, const char* flag) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        char* end = nullptr;
        const double v = std::strtod(part.c_str(), &end);
        if (end == part.c_str() || !std::isfinite(v)) {
            throw std::invalid_argument(std::string(flag) + ": cannot parse \"" + part +
                                        "\" as a number");
        }
        out.push_back(v);
    }
    if (out.empty()) {
        throw std::invalid_argument(std::string(flag) + ": empty list");
    }
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s, const char* flag) {
    std::vector<std::uint64_t> out;
    for (const double v : parse_double_list(s, flag)) {
        if (v < 0 || v != std::floor(v)) {
            throw std::invalid_argument(std::string(flag) +
                                        ": seeds must be non-negative integers");
        }
        out.push_back(static_cast<std::uint64_t>(v));
    }
    return out;
}

struct RunArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool force = false;
};

int cmd_run(const RunArgs& a) {
    ParsedConfig parsed = parse_config(read_text_file(a.config));
    if (a.seed_set) {
        parsed.config.seed = a.seed;
        parsed.config.stream.seed = derive_seed(a.seed, "task");
        json c = json::parse(parsed.canonical);
        c["seed"] = a.seed;
        parsed.canonical = c.dump(2) + "\n";
    }
    fs::create_directories(a.out);
    const fs::path dir(a.out);
    const std::string ckpt_path = (dir / "checkpoint.json").string();
    ensure_fresh(ckpt_path, a.force);
    write_text_file((dir / "config.json").string(), parsed.canonical, a.force);

    MetricWriter metrics((dir / "metrics.csv").string(), (dir / "metrics.jsonl").string(),
                         a.force);
    if (!parsed.applied_defaults.empty()) {
        json defaults = parsed.applied_defaults;
        metrics.event(0, "applied_defaults", defaults.dump());
    }
    const RunResult res = run_iterated_training(
        parsed.config, [&](const MetricRecord& r) { metrics.write(r); });
    metrics.flush();
    if (res.diverged) {
        std::cerr << "run diverged; partial metrics written to " << a.out << "\n";
        return 2;
    }
    const std::uint64_t budget = static_cast<std::uint64_t>(
        parsed.config.stream.steps_per_task * parsed.config.stream.num_tasks);
    save_checkpoint(ckpt_path, res.net, res.opt, budget, parsed.config.seed, true);
    std::cout << "run complete: " << res.records.size() << " records, final loss "
              << format_double(res.records.empty() ? 0.0 : res.records.back().loss)
              << "\n";
    return 0;
}

struct ProbeArgs {
    std::string checkpoint;
    std::string out;
    std::string shape;
    double rho = 1.0;
    std::size_t steps = 2000;
    std::size_t rows = 256;
    std::uint64_t seed = 0;
    bool force = false;
};

int cmd_probe(const ProbeArgs& a) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    ProbeConfig pc;
    pc.rho = a.rho;
    pc.steps = a.steps;
    pc.seed = derive_seed(a.seed, "probe");
    pc.inputs = gaussian_inputs(probe_input_shape(ck.net, a.shape, a.rows),
                                derive_seed(a.seed, "probe-inputs"));
    const ProbeResult res = probe_plasticity(ck.net, pc);

    fs::create_directories(a.out);
    const std::string csv_path = (fs::path(a.out) / "probe.csv").string();
    ensure_fresh(csv_path, a.force);
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    csv << "step,loss\n";
    for (const auto& [step, loss] : res.loss_curve) {
        csv << step << ',' << format_double(loss) << '\n';
    }
    std::cout << "probe: initial " << format_double(res.initial_loss) << ", final "
              << format_double(res.final_loss) << "\n";
    return res.diverged ? 2 : 0;
}

struct BanditArgs {
    std::string out;
    std::string loss = "mse";
    double gamma = 0.0;
    double smoothing = 0.0;
    double alpha = 1.0;
    int bound = 0;
    std::size_t steps = 20000;
    std::size_t classes = 4;
    std::size_t dim = 8;
    std::size_t per_class = 64;
    std::size_t batch = 128;
    std::size_t target_period = 500;
    std::size_t warmup = 1000;
    std::uint64_t seed = 0;
    bool force = false;
};

int cmd_bandit(const BanditArgs& a) {
    BanditMDP mdp;
    mdp.dataset = synth_dataset(static_cast<int>(a.classes), a.dim, a.per_class,
                                derive_seed(a.seed, "data"));
    mdp.alpha = a.alpha;
    mdp.gamma = a.gamma;

    BanditConfig cfg;
    if (a.loss == "mse") {
        cfg.head = LossKind::mse;
    } else if (a.loss == "two_hot") {
        cfg.head = LossKind::two_hot;
    } else {
        throw std::invalid_argument("--loss must be mse or two_hot, got \"" + a.loss +
                                    "\"");
    }
    cfg.smoothing = a.smoothing;
    cfg.two_hot_bound = a.bound;
    cfg.steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.target_period = a.target_period;
    cfg.warmup = a.warmup;
    cfg.seed = a.seed;

    std::size_t width = a.classes;
    if (cfg.head == LossKind::two_hot) {
        const int m = a.bound > 0 ? a.bound
                                  : static_cast<int>(std::ceil(a.alpha / (1.0 - a.gamma)));
        width = a.classes * static_cast<std::size_t>(2 * m + 1);
    }
    NetworkSpec spec;
    spec.layers = {DenseSpec{a.dim, 64}, ActivationSpec{ActKind::relu},
                   DenseSpec{64, 64}, ActivationSpec{ActKind::relu},
                   DenseSpec{64, width}};
    cfg.net = spec;

    const BanditResult res = run_bandit_dqn(mdp, cfg);
    fs::create_directories(a.out);
    const fs::path dir(a.out);
    MetricWriter metrics((dir / "metrics.csv").string(), (dir / "metrics.jsonl").string(),
                         a.force);
    for (const MetricRecord& r : res.records) metrics.write(r);
    for (const auto& [step, value] : res.value_curve) {
        metrics.event(step, "value", json{{"greedy_value", value}}.dump());
    }
    metrics.flush();
    if (res.diverged) {
        std::cerr << "bandit run diverged\n";
        return 2;
    }
    std::cout << "bandit: final greedy value "
              << format_double(res.value_curve.empty() ? 0.0
                                                       : res.value_curve.back().second)
              << "\n";
    return 0;
}

struct DoseArgs {
    std::string out;
    std::string offsets = "0,8,16,32";
    std::string seeds = "1,2,3";
    double m = 1e5;
    std::size_t pretrain = 2000;
    std::size_t finetune = 2000;
    std::size_t batch = 512;
    std::size_t rows = 512;
    std::size_t dim = 8;
    std::size_t hidden = 64;
    std::uint64_t seed = 0;
    bool force = false;
};

int cmd_dose(const DoseArgs& a) {
    DoseConfig cfg;
    cfg.offsets = parse_double_list(a.offsets, "--offsets");
    cfg.seeds = parse_seed_list(a.seeds, "--seeds");
    cfg.m = a.m;
    cfg.pretrain_steps = a.pretrain;
    cfg.finetune_steps = a.finetune;
    cfg.batch_size = a.batch;
    cfg.inputs = gaussian_inputs({a.rows, a.dim}, derive_seed(a.seed, "inputs"));
    NetworkSpec spec;
    spec.layers = {DenseSpec{a.dim, a.hidden}, ActivationSpec{ActKind::relu},
                   DenseSpec{a.hidden, a.hidden}, ActivationSpec{ActKind::relu},
                   DenseSpec{a.hidden, 1}};
    cfg.net = spec;

    const std::vector<DoseRow> rows = run_offset_dose_response(cfg);
    fs::create_directories(a.out);
    const std::string csv_path = (fs::path(a.out) / "dose.csv").string();
    ensure_fresh(csv_path, a.force);
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    csv << "b,pretrain_final,finetune_final\n";
    for (const DoseRow& row : rows) {
        csv << format_double(row.b) << ',' << format_double(row.pretrain_final) << ','
            << format_double(row.finetune_final) << '\n';
    }
    std::cout << "dose: " << rows.size() << " offsets written\n";
    return 0;
}

struct MicroscopeArgs {
    std::string config;
    std::string out;
    std::string branches = "both";
    std::size_t converge = 2000;
    std::size_t post = 500;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool force = false;
};

void write_microscope_csv(const std::string& path, const std::vector<MicroscopeStep>& log,
                          bool force) {
    ensure_fresh(path, force);
    std::ofstream csv(path, std::ios::binary | std::ios::trunc);
    csv << "step,loss,entropy,dead_units,zombie_units,negative_alignment,"
           "positive_alignment\n";
    for (const MicroscopeStep& s : log) {
        csv << s.step << ',' << format_double(s.loss) << ',' << format_double(s.entropy)
            << ',' << s.dead_units << ',' << s.zombie_units << ','
            << format_double(s.negative_alignment) << ','
            << format_double(s.positive_alignment) << '\n';
    }
}

int cmd_microscope(const MicroscopeArgs& a) {
    if (a.branches != "both" && a.branches != "on" && a.branches != "off") {
        throw std::invalid_argument("--reset-optimizer must be on, off, or both");
    }
    ParsedConfig parsed = parse_config(read_text_file(a.config));
    if (a.seed_set) {
        parsed.config.seed = a.seed;
        parsed.config.stream.seed = derive_seed(a.seed, "task");
    }
    MicroscopeConfig cfg;
    cfg.base = parsed.config;
    cfg.converge_steps = a.converge;
    cfg.post_steps = a.post;
    const MicroscopeResult res = run_task_switch_microscope(cfg);

    fs::create_directories(a.out);
    const fs::path dir(a.out);
    if (a.branches != "on") {
        write_microscope_csv((dir / "microscope_stale.csv").string(), res.stale, a.force);
    }
    if (a.branches != "off") {
        write_microscope_csv((dir / "microscope_reset.csv").string(), res.reset, a.force);
    }
    std::cout << "microscope: " << res.stale.size() << " steps logged per branch\n";
    return 0;
}

struct DiagnoseArgs {
    std::string checkpoint;
    std::string out;
    std::string shape;
    std::size_t rows = 64;
    std::uint64_t seed = 0;
    bool force = false;
};

int cmd_diagnose(const DiagnoseArgs& a) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const Tensor x = gaussian_inputs(probe_input_shape(ck.net, a.shape, a.rows),
                                     derive_seed(a.seed, "diagnose"));
    const Tensor out = forward_eval(ck.net, x).output;

    DiagnosticsOptions opts;
    opts.with_entk = true;
    opts.with_svd = true;
    opts.classification = out.row_size() > 1;
    opts.census_min_batch = std::min<std::size_t>(32, x.batch());
    const DiagnosticsReport report = collect_diagnostics(ck.net, x, opts);

    fs::create_directories(a.out);
    const std::string jsonl_path = (fs::path(a.out) / "diagnose.jsonl").string();
    ensure_fresh(jsonl_path, a.force);
    std::ofstream jsonl(jsonl_path, std::ios::binary | std::ios::trunc);
    auto emit = [&](const std::string& kind, const json& payload) {
        jsonl << json{{"step", 0}, {"kind", kind}, {"payload", payload}}.dump() << "\n";
    };

    {
        json layers = json::array();
        for (const LayerCensus& lc : report.census.layers) {
            layers.push_back({{"layer", lc.layer},
                              {"kind", act_kind_name(lc.kind)},
                              {"units", lc.units.size()},
                              {"dead_fraction", lc.dead_fraction},
                              {"zombie_fraction", lc.zombie_fraction},
                              {"saturated_fraction", lc.saturated_fraction}});
        }
        emit("census", {{"total_units", report.census.total_units},
                        {"dead_fraction", report.census.dead_fraction},
                        {"zombie_fraction", report.census.zombie_fraction},
                        {"layers", layers}});
    }
    {
        json layers = json::array();
        for (const auto& l : report.preact.layers) {
            layers.push_back({{"layer", l.layer}, {"mean", l.mean}, {"var", l.var}});
        }
        emit("preact", {{"layers", layers}});
    }
    {
        json per_layer = json::array();
        for (const auto& e : report.norms.per_layer) {
            per_layer.push_back(json::array({e.layer, e.norm}));
        }
        emit("param_norms", {{"total", report.norms.total}, {"per_layer", per_layer}});
    }
    if (opts.classification) emit("entropy", {{"value", report.entropy}});
    if (report.entk) {
        const ENTKReport& k = *report.entk;
        json gram = json::array();
        for (std::size_t i = 0; i < k.gram.dim(0); ++i) {
            json row = json::array();
            for (std::size_t j = 0; j < k.gram.dim(1); ++j) row.push_back(k.gram.at(i, j));
            gram.push_back(std::move(row));
        }
        emit("entk", {{"output_index", k.output_index},
                      {"eigenvalues", k.eigenvalues},
                      {"diag_rank1_residual", k.diag_rank1_residual},
                      {"numeric_rank", k.numeric_rank()},
                      {"gram", gram}});
    }
    if (report.svd) {
        emit("svd", {{"singular_values", report.svd->singular_values},
                     {"srank", report.svd->srank},
                     {"delta", report.svd->delta},
                     {"feature_layer", report.svd->feature_layer}});
    }
    std::cout << "diagnose: report written to " << jsonl_path << "\n";
    return 0;
}

struct GradcheckArgs {
    std::size_t cases = 100;
    double tolerance = 1e-5;
    std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    const GradcheckReport report = run_gradcheck_suite(a.seed, a.cases, a.tolerance);
    for (const GradcheckCase& c : report.cases) {
        if (!c.pass) {
            std::cout << "FAIL " << c.name << ": max rel err "
                      << format_double(c.max_rel_err) << "\n";
        }
    }
    std::cout << "gradcheck: " << report.cases.size() << " cases, worst rel err "
              << format_double(report.worst_rel_err) << ", tolerance "
              << format_double(report.tolerance) << ": "
              << (report.all_pass ? "PASS" : "FAIL") << "\n";
    return report.all_pass ? 0 : 1;
}

struct ExportArgs {
    std::string in;
    std::string out;
    bool force = false;
};

int cmd_export_plot(const ExportArgs& a) {
    std::istringstream in(read_text_file(a.in));
    std::string line;
    if (!std::getline(in, line) || line != kMetricCsvHeader) {
        throw std::invalid_argument("unexpected CSV header in " + a.in);
    }
    struct Row {
        std::vector<std::string> fields;  // 8 columns, kept verbatim
    };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Row row;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) row.fields.push_back(field);
        if (row.fields.size() != 8) {
            throw std::invalid_argument("malformed CSV row in " + a.in + ": " + line);
        }
        rows.push_back(std::move(row));
    }

    fs::create_directories(a.out);
    const fs::path dir(a.out);

    // Last row of each task: the per-task summary figure.
    std::vector<std::pair<std::string, Row>> last_by_task;
    for (const Row& row : rows) {
        const std::string& task = row.fields[1];
        if (!last_by_task.empty() && last_by_task.back().first == task) {
            last_by_task.back().second = row;
        } else {
            last_by_task.emplace_back(task, row);
        }
    }
    {
        const std::string path = (dir / "task_summary.csv").string();
        ensure_fresh(path, a.force);
        std::ofstream csv(path, std::ios::binary | std::ios::trunc);
        csv << "task,step,loss,accuracy,dead_frac,zombie_frac,param_norm,entropy\n";
        for (const auto& [task, row] : last_by_task) {
            csv << task << ',' << row.fields[0];
            for (std::size_t i = 2; i < 8; ++i) csv << ',' << row.fields[i];
            csv << '\n';
        }
    }

    // Boundary pairs (equal step, different task): the switch-spike figure.
    {
        const std::string path = (dir / "boundary_drops.csv").string();
        ensure_fresh(path, a.force);
        std::ofstream csv(path, std::ios::binary | std::ios::trunc);
        csv << "step,task_before,task_after,loss_before,loss_after,accuracy_before,"
               "accuracy_after\n";
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const Row& prev = rows[i - 1];
            const Row& cur = rows[i];
            if (prev.fields[0] == cur.fields[0] && prev.fields[1] != cur.fields[1]) {
                csv << cur.fields[0] << ',' << prev.fields[1] << ',' << cur.fields[1]
                    << ',' << prev.fields[2] << ',' << cur.fields[2] << ','
                    << prev.fields[3] << ',' << cur.fields[3] << '\n';
            }
        }
    }
    std::cout << "export-plot: " << last_by_task.size() << " task summaries written\n";
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// cli_main
// ---------------------------------------------------------------------------

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"plab: a desk-scale laboratory for neural-network plasticity"};
    app.require_subcommand(1);

    RunArgs run_args;
    CLI::App* run = app.add_subcommand("run", "iterated nonstationary training");
    run->add_option("--config", run_args.config, "JSON experiment config")->required();
    run->add_option("--out", run_args.out, "output directory")->required();
    CLI::Option* run_seed =
        run->add_option("--seed", run_args.seed, "override the config seed");
    run->add_flag("--force", run_args.force, "overwrite existing outputs");

    ProbeArgs probe_args;
    CLI::App* probe = app.add_subcommand("probe", "plasticity probe on a checkpoint");
    probe->add_option("--checkpoint", probe_args.checkpoint, "checkpoint file")
        ->required();
    probe->add_option("--out", probe_args.out, "output directory")->required();
    probe->add_option("--rho", probe_args.rho, "perturbation norm");
    probe->add_option("--steps", probe_args.steps, "probe optimizer steps");
    probe->add_option("--rows", probe_args.rows, "probe input rows");
    probe->add_option("--shape", probe_args.shape, "input shape C,H,W for conv nets");
    probe->add_option("--seed", probe_args.seed, "probe seed");
    probe->add_flag("--force", probe_args.force, "overwrite existing outputs");

    BanditArgs bandit_args;
    CLI::App* bandit = app.add_subcommand("bandit", "contextual bandit DQN");
    bandit->add_option("--out", bandit_args.out, "output directory")->required();
    bandit->add_option("--gamma", bandit_args.gamma, "discount factor");
    bandit->add_option("--loss", bandit_args.loss, "value head: mse or two_hot");
    bandit->add_option("--smoothing", bandit_args.smoothing, "two-hot kappa");
    bandit->add_option("--alpha", bandit_args.alpha, "reward scale");
    bandit->add_option("--bound", bandit_args.bound, "two-hot bound M (0 = auto)");
    bandit->add_option("--steps", bandit_args.steps, "environment steps");
    bandit->add_option("--classes", bandit_args.classes, "bandit arms");
    bandit->add_option("--dim", bandit_args.dim, "state dimension");
    bandit->add_option("--per-class", bandit_args.per_class, "states per class");
    bandit->add_option("--batch", bandit_args.batch, "replay minibatch size");
    bandit->add_option("--target-period", bandit_args.target_period,
                       "learner steps between target copies");
    bandit->add_option("--warmup", bandit_args.warmup,
                       "transitions collected before learning starts");
    bandit->add_option("--seed", bandit_args.seed, "run seed");
    bandit->add_flag("--force", bandit_args.force, "overwrite existing outputs");

    DoseArgs dose_args;
    CLI::App* dose = app.add_subcommand("dose", "offset dose-response sweep");
    dose->add_option("--out", dose_args.out, "output directory")->required();
    dose->add_option("--offsets", dose_args.offsets, "comma-separated target offsets");
    dose->add_option("--seeds", dose_args.seeds, "comma-separated replicate seeds");
    dose->add_option("--m", dose_args.m, "sine frequency multiplier");
    dose->add_option("--pretrain", dose_args.pretrain, "pretraining steps");
    dose->add_option("--finetune", dose_args.finetune, "fine-tuning steps");
    dose->add_option("--batch", dose_args.batch, "minibatch size");
    dose->add_option("--rows", dose_args.rows, "input rows");
    dose->add_option("--dim", dose_args.dim, "input dimension");
    dose->add_option("--hidden", dose_args.hidden, "hidden width");
    dose->add_option("--seed", dose_args.seed, "input-generation seed");
    dose->add_flag("--force", dose_args.force, "overwrite existing outputs");

    MicroscopeArgs mic_args;
    CLI::App* mic = app.add_subcommand("microscope", "dense task-switch logging");
    mic->add_option("--config", mic_args.config, "JSON experiment config")->required();
    mic->add_option("--out", mic_args.out, "output directory")->required();
    mic->add_option("--converge", mic_args.converge, "steps before the switch");
    mic->add_option("--post", mic_args.post, "densely logged steps after it");
    mic->add_option("--reset-optimizer", mic_args.branches,
                    "which branch to write: on, off, or both");
    CLI::Option* mic_seed =
        mic->add_option("--seed", mic_args.seed, "override the config seed");
    mic->add_flag("--force", mic_args.force, "overwrite existing outputs");

    DiagnoseArgs diag_args;
    CLI::App* diag = app.add_subcommand("diagnose", "eNTK/SVD/census report");
    diag->add_option("--checkpoint", diag_args.checkpoint, "checkpoint file")->required();
    diag->add_option("--out", diag_args.out, "output directory")->required();
    diag->add_option("--rows", diag_args.rows, "probe input rows");
    diag->add_option("--shape", diag_args.shape, "input shape C,H,W for conv nets");
    diag->add_option("--seed", diag_args.seed, "probe-input seed");
    diag->add_flag("--force", diag_args.force, "overwrite existing outputs");

    GradcheckArgs gc_args;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    gc->add_option("--cases", gc_args.cases, "minimum case count");
    gc->add_option("--tolerance", gc_args.tolerance, "max relative error");
    gc->add_option("--seed", gc_args.seed, "suite seed");

    ExportArgs export_args;
    CLI::App* exp = app.add_subcommand("export-plot", "fold metrics into plot tables");
    exp->add_option("--in", export_args.in, "metrics.csv to fold")->required();
    exp->add_option("--out", export_args.out, "output directory")->required();
    exp->add_flag("--force", export_args.force, "overwrite existing outputs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        run_args.seed_set = run_seed->count() > 0;
        mic_args.seed_set = mic_seed->count() > 0;
        if (run->parsed()) return cmd_run(run_args);
        if (probe->parsed()) return cmd_probe(probe_args);
        if (bandit->parsed()) return cmd_bandit(bandit_args);
        if (dose->parsed()) return cmd_dose(dose_args);
        if (mic->parsed()) return cmd_microscope(mic_args);
        if (diag->parsed()) return cmd_diagnose(diag_args);
        if (gc->parsed()) return cmd_gradcheck(gc_args);
        if (exp->parsed()) return cmd_export_plot(export_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace plab
