#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "plab/harness.hpp"
#include "plab/network.hpp"
#include "plab/optim.hpp"

namespace plab {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kCheckpointSchemaVersion = 1;
inline constexpr const char* kMetricCsvHeader =
    "step,task,loss,accuracy,dead_frac,zombie_frac,param_norm,entropy";

// 17-significant-digit decimal; round-trips any finite double bit-exactly.
std::string format_double(double v);

// ---------------------------------------------------------------------------
// Configuration documents
// ---------------------------------------------------------------------------

struct ParsedConfig {
    ExperimentConfig config;
    // The fully-defaulted document: every key present, alphabetical order.
    // Parsing it back reproduces the same value tree.
    std::string canonical;
    std::vector<std::string> applied_defaults;  // dotted paths of defaulted keys
};

// JSON text -> validated ExperimentConfig with defaults applied. Unknown
// keys, missing required keys, and range violations throw
// std::invalid_argument naming the key and its path. File-backed datasets
// (mnist / cifar10) are loaded immediately; relative paths resolve against
// $PLAB_DATA_DIR when it is set.
ParsedConfig parse_config(const std::string& text);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    Network net;
    OptimizerState opt;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
};

// JSON checkpoint with every float printed as 17-significant-digit decimal,
// so load(save(x)) is bit-exact and save -> load -> save is byte-identical.
// Saving refuses to overwrite an existing file unless `force`, and rejects
// non-finite state. Loading checks the schema version, verifies the stored
// spec hash against the embedded spec, and reports truncated or malformed
// files with a byte offset.
void save_checkpoint(const std::string& path, const Network& net,
                     const OptimizerState& opt, std::uint64_t step = 0,
                     std::uint64_t seed = 0, bool force = false);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Metric persistence
// ---------------------------------------------------------------------------

// Fixed-header CSV of per-step metrics plus a JSONL sidecar of structured
// events ({"step", "kind", "payload"} per line). Boundary records flush both
// streams so partial runs stay analyzable. Construction refuses to overwrite
// existing files unless `force`.
class MetricWriter {
public:
    MetricWriter(const std::string& csv_path, const std::string& jsonl_path, bool force);

    void write(const MetricRecord& rec);  // one CSV row (+ boundary events)
    void event(std::size_t step, const std::string& kind,
               const std::string& payload_json);
    void flush();

private:
    std::ofstream csv_;
    std::ofstream jsonl_;
};

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

// Subcommands: run, probe, bandit, dose, microscope, diagnose, gradcheck,
// export-plot. Every source of randomness derives from one 64-bit --seed via
// named substreams. Returns 0 on success, 1 on validation/usage errors, 2
// when a run diverges.
int cli_main(int argc, const char* const* argv);

}  // namespace plab
