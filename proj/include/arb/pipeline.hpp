#pragma once

// Experiment orchestration: configuration, scenario batteries, staged runs,
// cube caching and report emission.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "arb/lens.hpp"
#include "arb/probes.hpp"
#include "arb/steering.hpp"
#include "arb/substrate.hpp"

namespace arb {

using Json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvariant = 1;
inline constexpr int kExitConfig = 2;

/// Bad or inconsistent configuration (exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A stage aborted; the message names the stage.
struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Stage { mac, probes, patching, steering_linear, steering_sae };

const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

/// One scenario together with the model it runs on.
struct BatteryEntry {
    ModelConfig model;
    ScenarioSpec scenario;
};

struct DepthOptions {
    DepthAnchor anchor = DepthAnchor::mean_mac;
    std::vector<double> fractions{0.25, 0.5, 0.75};
    int grid = 20;
    double probe_fraction = 0.1;
    int folds = 5;
};

struct PatchOptions {
    std::optional<int> layer;  ///< default: per-scenario mean MAC
    std::vector<TokenScope> scopes{TokenScope::all, TokenScope::last, TokenScope::image_only, TokenScope::text_only};
};

struct SteerOptions {
    std::vector<int> layers;  ///< empty: {early layer, mean MAC}
    std::vector<double> alphas{kLinearAlphaSweep.begin(), kLinearAlphaSweep.end()};
    std::vector<double> sae_alphas{kSaeAlphaSweep.begin(), kSaeAlphaSweep.end()};
    double train_fraction = 0.4;
    SaeConfig sae;
    std::size_t top_k = 50;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::vector<BatteryEntry> battery;
    std::size_t samples = 100;
    std::uint64_t seed = 42;
    std::vector<Stage> stages{Stage::mac, Stage::probes, Stage::patching, Stage::steering_linear, Stage::steering_sae};
    DepthOptions depth;
    PatchOptions patching;
    SteerOptions steering;
    std::filesystem::path output;
    bool cache = false;
    unsigned workers = 0;  ///< 0: hardware concurrency
    Json echo;             ///< configuration as read, for the report

    bool has(Stage s) const;
    void validate() const;
};

/// Parses a configuration document. Relative file references resolve against
/// `base`. Throws ConfigError.
ExperimentConfig parse_config(const Json& doc, const std::filesystem::path& base = {});
ExperimentConfig load_config(const std::filesystem::path& path);

ModelConfig model_config_from_json(const Json& j, ModelConfig defaults = {});
Json to_json(const ModelConfig& cfg);
ScenarioSpec scenario_from_json(const Json& j, const ModelConfig& cfg);
Json to_json(const ScenarioSpec& sc);

/// Output root: $ARBITER_OUT if set, otherwise ./arbiter-out.
std::filesystem::path default_output_root();
inline constexpr const char* kOutputEnvVar = "ARBITER_OUT";

// Built-in batteries.

/// Twelve MAC scenarios with transient-crossing traps, final-layer-only and
/// never-crossing schedules. Every schedule keeps |v - p| >= min gap.
std::vector<BatteryEntry> mac_battery(double noise_sigma = 0.0);
/// Smallest |v_pred - p_pred| over all layers and scenarios of a battery.
double min_schedule_gap(const std::vector<BatteryEntry>& battery);
/// Late-heavy visual evidence: full and image-only patches at the crossover
/// flip, last-token patches do not.
std::vector<BatteryEntry> patch_battery(double noise_sigma = 0.0);
/// Prior-pathway noise with fixed encoding; rows differ in prior mass.
std::vector<BatteryEntry> arbitration_battery();
/// Baseline accuracy around 85% with a late jump of visual evidence.
std::vector<BatteryEntry> degraded_battery();
/// Scenario for the scaling sweep; the visual ramp starts earlier at larger L.
BatteryEntry scaling_entry(int layers, int d_model);

std::vector<BatteryEntry> builtin_battery(const std::string& name);
std::vector<std::string> builtin_battery_names();

// Cube cache: "ARBCUBE1", u64 fingerprint, u64 layers+1, u64 tokens, u64 dim,
// then row-major f64 little-endian states. Written to a temp file and renamed.

std::uint64_t cube_fingerprint(const Model& model, const SamplePair& pair, bool counterfactual);
void save_cube(const std::filesystem::path& path, const HiddenStateCube& cube, std::uint64_t fingerprint);
/// Empty when the file is missing, malformed or written for another input.
std::optional<HiddenStateCube> load_cube(const std::filesystem::path& path, std::uint64_t fingerprint);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written to per-index slots; the first exception is rethrown.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn);

struct InvariantCheck {
    std::string name;
    std::string scope;  ///< scenario or battery
    bool passed = true;
    std::string detail;
};

struct Report {
    Json doc;
    std::vector<InvariantCheck> checks;

    bool ok() const;
    int exit_code() const { return ok() ? kExitOk : kExitInvariant; }
};

/// Report JSON without the wall-clock section.
Json strip_timing(const Json& report);

/// Per-scenario trajectory traces for plotting.
struct TrajectorySet {
    std::string scenario;
    std::vector<std::pair<std::uint64_t, Trajectory>> traces;
};

struct GridSet {
    std::string scenario;
    std::vector<std::vector<GridPoint>> samples;
};

/// Writes <dir>/<scenario>_logits.csv (per-sample traces, then per-layer
/// mean/std rows) and <dir>/<scenario>_depth_grid.csv.
void emit_plot_data(const std::filesystem::path& dir, const std::vector<TrajectorySet>& trajectories,
                    const std::vector<GridSet>& grids);

inline constexpr const char* kPlotCsvHeader = "row,sample_id,layer,logit_v,logit_p,logit_v_std,logit_p_std";
inline constexpr const char* kGridCsvHeader = "fraction,layer,l2_mean,l2_std,cosine_mean,samples";
void write_plot_csv(std::ostream& os, const TrajectorySet& set);
void write_grid_csv(std::ostream& os, const GridSet& set);

/// Runs the enabled stages in order and writes report.json last.
Report run_experiment(const ExperimentConfig& cfg);

struct ScalingRow {
    std::string name;
    int layers = 0;
    int d_model = 0;
    std::optional<double> mean_mac;
    std::optional<int> depth_pct;
    double win_rate = 0.0;
    double mean_gap = 0.0;
    std::size_t samples = 0;
};

/// MAC-stage summary per configuration, pooled over each battery.
std::vector<ScalingRow> scaling_sweep(const std::vector<ExperimentConfig>& cfgs, std::vector<std::string>* warnings = nullptr);
Json to_json(const ScalingRow& row);

void write_json_file(const std::filesystem::path& path, const Json& doc);

}  // namespace arb
