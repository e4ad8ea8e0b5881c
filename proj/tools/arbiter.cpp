// arbiter: runs the analysis stages on the toy substrate and writes report.json
// plus per-stage CSVs under the output directory.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "arb/pipeline.hpp"

namespace {

struct Common {
    std::string config;
    std::string out;
    std::string battery;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> samples;
    std::optional<unsigned> workers;
    bool cache = false;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("-c,--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("-o,--out", c.out, "output directory (default: $ARBITER_OUT/<name>)");
    app->add_option("-b,--battery", c.battery, "built-in battery (replaces any config battery)");
    app->add_option("-s,--seed", c.seed, "root seed");
    app->add_option("-n,--samples", c.samples, "samples per scenario");
    app->add_option("-w,--workers", c.workers, "worker threads (0: all cores)");
    app->add_flag("--cache", c.cache, "cache hidden-state cubes under <out>/cache");
}

arb::ExperimentConfig resolve(const Common& c, std::vector<arb::Stage> stages) {
    arb::ExperimentConfig cfg;
    if (!c.config.empty()) cfg = arb::load_config(c.config);
    if (!c.battery.empty()) cfg.battery = arb::builtin_battery(c.battery);
    if (cfg.battery.empty()) cfg.battery = arb::builtin_battery("mac");
    if (c.seed) cfg.seed = *c.seed;
    if (c.samples) cfg.samples = *c.samples;
    if (c.workers) cfg.workers = *c.workers;
    if (c.cache) cfg.cache = true;
    if (!c.out.empty()) cfg.output = c.out;
    if (!stages.empty()) cfg.stages = std::move(stages);
    cfg.echo["cli"] = {{"seed", cfg.seed}, {"samples", cfg.samples}, {"battery_override", c.battery}};
    cfg.validate();
    return cfg;
}

void print_summary(const arb::Report& report, const std::filesystem::path& out) {
    std::size_t failed = 0;
    for (const auto& c : report.checks) {
        if (c.passed) continue;
        ++failed;
        std::cerr << "FAILED " << c.name << " [" << c.scope << "]: " << c.detail << '\n';
    }
    std::cout << "report: " << (out / "report.json").string() << '\n'
              << "checks: " << report.checks.size() - failed << '/' << report.checks.size() << " passed\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Modality arbitration analysis on a constructed transformer substrate"};
    app.require_subcommand(1);
    app.set_version_flag("--version", ARBITER_VERSION);

    Common common;
    std::vector<double> alphas;
    std::vector<int> steer_layers;
    std::optional<int> patch_layer;
    std::vector<int> sweep_layers{8, 16, 32};
    std::vector<int> sweep_dims{64};

    struct Sub {
        const char* name;
        const char* help;
        std::vector<arb::Stage> stages;
    };
    const std::vector<Sub> subs{
        {"mac", "crossover detection with the logit lens", {arb::Stage::mac}},
        {"probes", "latent distances, probes and cross-stage statistics", {arb::Stage::probes}},
        {"patch", "activation patching at the crossover layer", {arb::Stage::patching}},
        {"steer", "linear and SAE steering sweeps", {arb::Stage::steering_linear, arb::Stage::steering_sae}},
        {"all", "every stage listed in the config (default: all)", {}},
    };
    std::vector<CLI::App*> stage_apps;
    for (const Sub& s : subs) {
        CLI::App* sub = app.add_subcommand(s.name, s.help);
        add_common(sub, common);
        stage_apps.push_back(sub);
    }
    stage_apps[2]->add_option("--layer", patch_layer, "patch layer (default: rounded mean MAC)");
    stage_apps[3]->add_option("--alphas", alphas, "linear alpha sweep")->delimiter(',');
    stage_apps[3]->add_option("--layers", steer_layers, "steering layers")->delimiter(',');

    CLI::App* sweep = app.add_subcommand("sweep", "MAC summary across model depths and widths");
    add_common(sweep, common);
    sweep->add_option("--layers", sweep_layers, "layer counts")->delimiter(',');
    sweep->add_option("--dims", sweep_dims, "model widths")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? arb::kExitOk : arb::kExitConfig;
    }

    try {
        if (sweep->parsed()) {
            std::vector<arb::ExperimentConfig> cfgs;
            for (int L : sweep_layers)
                for (int d : sweep_dims) {
                    arb::ExperimentConfig cfg;
                    if (!common.config.empty()) cfg = arb::load_config(common.config);
                    cfg.name = "L" + std::to_string(L) + "_d" + std::to_string(d);
                    cfg.battery = {arb::scaling_entry(L, d)};
                    cfg.stages = {arb::Stage::mac};
                    if (common.seed) cfg.seed = *common.seed;
                    if (common.samples) cfg.samples = *common.samples;
                    if (common.workers) cfg.workers = *common.workers;
                    cfgs.push_back(std::move(cfg));
                }
            std::vector<std::string> warnings;
            const auto rows = arb::scaling_sweep(cfgs, &warnings);
            for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
            arb::Json doc;
            doc["tool"] = {{"name", "arbiter"}, {"version", ARBITER_VERSION}};
            doc["seed"] = cfgs.front().seed;
            doc["rows"] = arb::Json::array();
            for (const auto& r : rows) doc["rows"].push_back(arb::to_json(r));
            doc["warnings"] = warnings;
            const std::filesystem::path out = common.out.empty() ? arb::default_output_root() / "sweep" : std::filesystem::path(common.out);
            arb::write_json_file(out / "sweep.json", doc);
            std::cout << "L,d,mean_mac,depth_pct,win_rate_pct,mean_final_gap\n";
            for (const auto& r : rows) {
                std::cout << r.layers << ',' << r.d_model << ',' << (r.mean_mac ? std::to_string(*r.mean_mac) : "") << ','
                          << (r.depth_pct ? std::to_string(*r.depth_pct) : "") << ',' << 100.0 * r.win_rate << ','
                          << r.mean_gap << '\n';
            }
            return arb::kExitOk;
        }

        for (std::size_t k = 0; k < subs.size(); ++k) {
            if (!stage_apps[k]->parsed()) continue;
            arb::ExperimentConfig cfg = resolve(common, subs[k].stages);
            if (patch_layer) cfg.patching.layer = patch_layer;
            if (!alphas.empty()) cfg.steering.alphas = alphas;
            if (!steer_layers.empty()) cfg.steering.layers = steer_layers;
            const arb::Report report = arb::run_experiment(cfg);
            print_summary(report, cfg.output.empty() ? arb::default_output_root() / cfg.name : cfg.output);
            return report.exit_code();
        }
    } catch (const arb::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return arb::kExitConfig;
    } catch (const arb::StageError& e) {
        std::cerr << e.what() << '\n';
        return arb::kExitInvariant;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return arb::kExitInvariant;
    }
    return arb::kExitOk;
}
