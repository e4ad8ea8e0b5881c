#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "arb/pipeline.hpp"
#include "fixtures.hpp"

using namespace arb;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("arbiter_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

ExperimentConfig small(const std::string& battery, std::vector<Stage> stages, std::size_t samples, const fs::path& out) {
    ExperimentConfig cfg;
    cfg.name = "t";
    cfg.battery = builtin_battery(battery);
    cfg.stages = std::move(stages);
    cfg.samples = samples;
    cfg.output = out;
    cfg.workers = 1;
    return cfg;
}

ExperimentConfig sweep_cfg(const BatteryEntry& e, std::uint64_t seed, std::size_t samples = 40) {
    ExperimentConfig cfg;
    cfg.name = e.scenario.name + "_s" + std::to_string(seed);
    cfg.battery = {e};
    cfg.samples = samples;
    cfg.seed = seed;
    cfg.stages = {Stage::mac};
    cfg.workers = 1;
    return cfg;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("parse_config: defaults, builtins and inline scenarios") {
    const Json doc = Json::parse(R"({
        "name": "x", "seed": 7, "samples": 12, "stages": ["mac", "patching", "mac"],
        "model": {"layers": 8},
        "battery": ["builtin:patch", {"name": "inline", "visual_schedule": [0,0,0,0,1,1,1,1],
                                      "prior_schedule": [1,0,0,0,0,0,0,0]}],
        "patching": {"layer": 5, "scopes": ["full", "image_only"]}
    })");
    const ExperimentConfig cfg = parse_config(doc);
    CHECK(cfg.name == "x");
    CHECK(cfg.seed == 7);
    CHECK(cfg.samples == 12);
    CHECK(cfg.stages == std::vector<Stage>{Stage::mac, Stage::patching});
    CHECK(cfg.battery.size() == patch_battery().size() + 1);
    CHECK(cfg.battery.back().model.layers == 8);
    CHECK(cfg.battery.back().scenario.evidence_weights.size() == 8);
    CHECK(*cfg.patching.layer == 5);
    CHECK(cfg.patching.scopes.size() == 2);
    CHECK(cfg.echo == doc);
}

TEST_CASE("parse_config rejects bad input") {
    auto bad = [](const char* text) { CHECK_THROWS_AS(parse_config(Json::parse(text)), ConfigError); };
    bad(R"({"battery": "builtin:mac", "bogus": 1})");
    bad(R"({"samples": 10})");
    bad(R"({"battery": "builtin:nope"})");
    bad(R"({"battery": "builtin:mac", "stages": []})");
    bad(R"({"battery": "builtin:mac", "stages": ["lens"]})");
    bad(R"({"battery": "builtin:mac", "samples": "ten"})");
    bad(R"({"battery": "builtin:mac", "samples": 1})");
    bad(R"({"battery": "no/such/file.json"})");
    bad(R"({"battery": ["builtin:mac", "builtin:mac"]})");
    bad(R"({"battery": {"name": "s", "visual_schedule": [1, 1]}})");
    bad(R"({"battery": {"name": "s", "visual_schedule": [1, 1], "prior_schedule": [0]}})");
    bad(R"({"battery": "builtin:mac", "depth": {"anchor": "middle"}})");
    bad(R"({"battery": "builtin:mac", "depth": {"fractions": [0.5, 1.5]}})");
    bad(R"({"battery": "builtin:mac", "steering": {"sae_alphas": [-1]}})");
    bad(R"({"battery": "builtin:mac", "steering": {"train_fraction": 1.0}})");
    bad(R"({"battery": "builtin:mac", "patching": {"scopes": ["half"]}})");
}

TEST_CASE("load_config resolves files relative to the config") {
    const fs::path dir = scratch("load");
    fs::create_directories(dir / "sc");
    std::ofstream(dir / "sc" / "one.json") << R"({"name": "one", "visual_schedule": [0,0,1,1], "prior_schedule": [1,0,0,0]})";
    std::ofstream(dir / "model.json") << R"({"layers": 4})";
    std::ofstream(dir / "exp.json") << R"({"model": "model.json", "battery": ["sc/one.json"], "output": "out"})";
    const ExperimentConfig cfg = load_config(dir / "exp.json");
    REQUIRE(cfg.battery.size() == 1);
    CHECK(cfg.battery[0].scenario.name == "one");
    CHECK(cfg.battery[0].model.layers == 4);
    CHECK(cfg.output == dir / "out");
    CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("stages={mac} report carries MAC, R% and D% columns and nothing else") {
    const fs::path out = scratch("mac_only");
    const Report r = run_experiment(small("mac", {Stage::mac}, 100, out));
    CHECK(r.ok());
    CHECK(r.exit_code() == kExitOk);
    REQUIRE(r.doc.contains("mac"));
    CHECK_FALSE(r.doc.contains("probes"));
    CHECK_FALSE(r.doc.contains("patching"));
    CHECK_FALSE(r.doc.contains("steering_linear"));
    CHECK(r.doc["seed"] == 42);
    CHECK(r.doc["status"] == "ok");
    const Json& rows = r.doc["mac"]["rows"];
    CHECK(rows.size() == mac_battery().size());
    for (const Json& row : rows) {
        for (const char* k : {"mean_mac", "win_rate_pct", "depth_pct", "recovered_pct", "sample_set"}) CHECK(row.contains(k));
        CHECK(row["recovered_pct"] == 100.0);
        CHECK(row["samples"] == 100);
    }
    for (const auto& [key, cell] : r.doc["mac"]["cells"].items()) CHECK_FALSE(cell.get<std::string>().empty());
    CHECK(fs::exists(out / "report.json"));
    CHECK(fs::exists(out / "mac" / ("trajectories_" + rows[0]["scenario"].get<std::string>() + ".csv")));
    CHECK(Json::parse(slurp(out / "report.json")) == r.doc);
    fs::remove_all(out);
}

TEST_CASE("same config twice gives the same report apart from timing") {
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    ExperimentConfig cfg = small("patch", {Stage::mac, Stage::probes, Stage::patching, Stage::steering_linear}, 20, a);
    cfg.battery.resize(3);
    const Report ra = run_experiment(cfg);
    cfg.output = b;
    cfg.workers = 3;
    const Report rb = run_experiment(cfg);
    CHECK(strip_timing(ra.doc).dump() == strip_timing(rb.doc).dump());
    CHECK(ra.doc.contains("timing"));
    CHECK_FALSE(strip_timing(ra.doc).contains("timing"));
    CHECK(slurp(a / "patching" / "outcomes_patch_skewed.csv") == slurp(b / "patching" / "outcomes_patch_skewed.csv"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("a failing stage names itself and keeps earlier outputs") {
    const fs::path out = scratch("fail");
    ExperimentConfig cfg = small("patch", {Stage::mac, Stage::patching}, 4, out);
    cfg.battery.resize(1);
    cfg.patching.layer = 99;
    try {
        run_experiment(cfg);
        FAIL("expected a stage error");
    } catch (const StageError& e) {
        CHECK(std::string(e.what()).find("patching") != std::string::npos);
    }
    CHECK(fs::exists(out / "mac"));
    fs::remove_all(out);
}

TEST_CASE("exit status follows the checks") {
    Report r;
    CHECK(r.exit_code() == kExitOk);
    r.checks.push_back({"a", "s", true, ""});
    CHECK(r.exit_code() == kExitOk);
    r.checks.push_back({"b", "s", false, "x"});
    CHECK_FALSE(r.ok());
    CHECK(r.exit_code() == kExitInvariant);
}

TEST_CASE("plot csv: trace and summary rows") {
    ModelConfig cfg;
    const ScenarioSpec sc = fx::late_ramp(cfg);
    const Model m = build_toy_vlm(cfg, sc);
    TrajectorySet set{"s", {}};
    for (std::uint64_t i = 0; i < 100; ++i) {
        const ForwardResult r = forward(m, generate_pair(m, i, i).cf);
        set.traces.emplace_back(i, layer_logits(r.cube, m, sc.visual_set, sc.prior_set));
    }
    std::ostringstream os;
    write_plot_csv(os, set);
    const auto rows = lines(os.str());
    REQUIRE(rows.size() == 1 + 100 * 16 + 16);
    CHECK(rows[0] == kPlotCsvHeader);
    int traces = 0, means = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto cells = split(rows[i]);
        REQUIRE(cells.size() == 7);
        if (cells[0] == "trace") ++traces;
        if (cells[0] == "mean") {
            ++means;
            CHECK(std::stod(cells[5]) < 1e-9);
            CHECK(std::stod(cells[6]) < 1e-9);
        }
    }
    CHECK(traces == 1600);
    CHECK(means == 16);

    std::ostringstream empty;
    write_plot_csv(empty, TrajectorySet{"e", {}});
    CHECK(empty.str() == std::string(kPlotCsvHeader) + "\n");
    std::ostringstream grid;
    write_grid_csv(grid, GridSet{"e", {}});
    CHECK(grid.str() == std::string(kGridCsvHeader) + "\n");

    const fs::path dir = scratch("plots");
    emit_plot_data(dir, {TrajectorySet{"e", {}}}, {GridSet{"e", {}}});
    CHECK(slurp(dir / "e_logits.csv") == std::string(kPlotCsvHeader) + "\n");
    CHECK(slurp(dir / "e_depth_grid.csv") == std::string(kGridCsvHeader) + "\n");
    fs::remove_all(dir);
}

TEST_CASE("cube cache round trip and fingerprint guard") {
    ModelConfig cfg;
    const Model m = build_toy_vlm(cfg, fx::late_ramp(cfg));
    const SamplePair p = generate_pair(m, 5, 5);
    const ForwardResult r = forward(m, p.cf);
    const std::uint64_t fp = cube_fingerprint(m, p, true);
    CHECK(fp != cube_fingerprint(m, p, false));
    CHECK(fp != cube_fingerprint(m, generate_pair(m, 6, 5), true));

    const fs::path dir = scratch("cache");
    const fs::path path = dir / "c.cube";
    save_cube(path, r.cube, fp);
    const auto back = load_cube(path, fp);
    REQUIRE(back);
    CHECK(fx::same_cube(*back, r.cube));
    CHECK_FALSE(load_cube(path, fp + 1));
    CHECK_FALSE(load_cube(dir / "none.cube", fp));
    {
        std::ofstream trunc(dir / "short.cube", std::ios::binary);
        trunc << "ARBCUBE1";
    }
    CHECK_FALSE(load_cube(dir / "short.cube", fp));
    fs::remove_all(dir);
}

TEST_CASE("cached runs match uncached runs") {
    const fs::path a = scratch("nocache"), b = scratch("cache_run");
    ExperimentConfig cfg = small("mac", {Stage::mac, Stage::probes}, 10, a);
    cfg.battery.resize(2);
    const Report plain = run_experiment(cfg);
    cfg.output = b;
    cfg.cache = true;
    const Report first = run_experiment(cfg);
    CHECK(fs::exists(b / "cache" / cfg.battery[0].scenario.name / "0_cf.cube"));
    const Report second = run_experiment(cfg);
    Json x = strip_timing(plain.doc), y = strip_timing(first.doc), z = strip_timing(second.doc);
    x["resolved"].erase("cache");
    y["resolved"].erase("cache");
    x.erase("config");
    y.erase("config");
    CHECK(x.dump() == y.dump());
    CHECK(strip_timing(first.doc).dump() == z.dump());
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("parallel_for covers every index once and rethrows") {
    for (unsigned w : {0u, 1u, 4u}) {
        std::vector<std::atomic<int>> hits(97);
        parallel_for(hits.size(), w, [&](std::size_t i) { hits[i]++; });
        for (auto& h : hits) CHECK(h.load() == 1);
    }
    CHECK_THROWS(parallel_for(10, 3, [](std::size_t i) {
        if (i == 7) throw std::runtime_error("boom");
    }));
    parallel_for(0, 2, [](std::size_t) { FAIL("no work expected"); });
}

TEST_CASE("scaling sweep") {
    SUBCASE("seed-only change gives matching rows") {
        const BatteryEntry e = scaling_entry(16, 64);
        const auto rows = scaling_sweep({sweep_cfg(e, 1), sweep_cfg(e, 2)});
        REQUIRE(rows.size() == 2);
        CHECK(rows[0].mean_mac == rows[1].mean_mac);
        CHECK(rows[0].depth_pct == rows[1].depth_pct);
        CHECK(rows[0].win_rate == rows[1].win_rate);
        CHECK(rows[0].mean_gap == doctest::Approx(rows[1].mean_gap).epsilon(0.01));
    }
    SUBCASE("earlier schedules at larger L lower D%") {
        std::vector<ExperimentConfig> cfgs;
        for (int L : {8, 16, 32}) cfgs.push_back(sweep_cfg(scaling_entry(L, 64), 3, 20));
        const auto rows = scaling_sweep(cfgs);
        REQUIRE(rows.size() == 3);
        for (const auto& r : rows) REQUIRE(r.depth_pct);
        CHECK(*rows[0].depth_pct > *rows[1].depth_pct);
        CHECK(*rows[1].depth_pct > *rows[2].depth_pct);
        CHECK(rows[2].layers == 32);
    }
    SUBCASE("doubling the visual schedule raises the final gap") {
        const BatteryEntry e = scaling_entry(16, 64);
        BatteryEntry twice = e;
        for (double& a : twice.scenario.visual_schedule) a *= 2.0;
        const auto rows = scaling_sweep({sweep_cfg(e, 4, 20), sweep_cfg(twice, 4, 20)});
        CHECK(rows[1].mean_gap > rows[0].mean_gap);
        // the closed form is linear in the schedule
        const ClosedForm c1 = closed_form_trajectory(e.scenario), c2 = closed_form_trajectory(twice.scenario);
        const double g1 = c1.visual.back() - c1.prior.back(), g2 = c2.visual.back() - c2.prior.back();
        CHECK(rows[0].mean_gap == doctest::Approx(g1).epsilon(0.02));
        CHECK(rows[1].mean_gap == doctest::Approx(g2).epsilon(0.02));
    }
    SUBCASE("guards") {
        const BatteryEntry e = scaling_entry(16, 64);
        CHECK_THROWS_AS(scaling_sweep({sweep_cfg(e, 1)}), ConfigError);
        ExperimentConfig big = sweep_cfg(e, 1, 10);
        big.battery.push_back(scaling_entry(8, 64));
        std::vector<std::string> warnings;
        const auto rows = scaling_sweep({sweep_cfg(e, 1, 10), big}, &warnings);
        CHECK(rows.size() == 2);
        CHECK(warnings.size() == 2);
    }
}

TEST_CASE("builtin batteries") {
    CHECK(mac_battery().size() == 12);
    CHECK(min_schedule_gap(mac_battery()) > 0.0);
    for (const std::string& name : builtin_battery_names()) CHECK_FALSE(builtin_battery(name).empty());
    CHECK_THROWS(builtin_battery("nope"));
    const auto noisy = builtin_battery("mac_noisy");
    CHECK(noisy[0].scenario.noise_sigma == doctest::Approx(0.1 * min_schedule_gap(mac_battery())));
}

TEST_CASE("default output root honours the environment") {
    ::setenv(kOutputEnvVar, "/tmp/arb-env-root", 1);
    CHECK(default_output_root() == fs::path("/tmp/arb-env-root"));
    ::unsetenv(kOutputEnvVar);
    CHECK(default_output_root() == fs::path("arbiter-out"));
}

}
