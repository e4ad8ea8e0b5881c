#include <algorithm>
#include <cmath>
#include <limits>

#include "arb/pipeline.hpp"

namespace arb {

namespace {

struct Builder {
    ModelConfig model;
    ScenarioSpec sc;

    Builder(std::string name, ModelConfig cfg = {}) : model(cfg) {
        sc.name = std::move(name);
        sc.visual_schedule.assign(static_cast<std::size_t>(model.layers), 0.0);
        sc.prior_schedule.assign(static_cast<std::size_t>(model.layers), 0.0);
        uniform();
    }
    // Layers are 1-based and inclusive.
    Builder& a(int from, int to, double v) {
        for (int l = from; l <= to; ++l) sc.visual_schedule[static_cast<std::size_t>(l - 1)] += v;
        return *this;
    }
    Builder& b(int from, int to, double v) {
        for (int l = from; l <= to; ++l) sc.prior_schedule[static_cast<std::size_t>(l - 1)] += v;
        return *this;
    }
    Builder& uniform() {
        sc.evidence_weights.assign(static_cast<std::size_t>(model.n_img), 1.0 / model.n_img);
        return *this;
    }
    Builder& linear_weights() {
        const double n = model.n_img;
        sc.evidence_weights.clear();
        for (int i = 0; i < model.n_img; ++i) sc.evidence_weights.push_back((i + 1) / (n * (n + 1) / 2));
        return *this;
    }
    Builder& concentrated(double head) {
        sc.evidence_weights.assign(static_cast<std::size_t>(model.n_img), (1.0 - head) / (model.n_img - 1));
        sc.evidence_weights[0] = head;
        return *this;
    }
    BatteryEntry done() const { return {model, sc}; }
};

}  // namespace

std::vector<BatteryEntry> mac_battery(double noise_sigma) {
    std::vector<BatteryEntry> out{
        Builder("early_cross").a(1, 16, 1.0).b(1, 1, 1.5).done(),
        Builder("mid_cross").a(1, 16, 0.5).b(1, 1, 2.25).done(),
        Builder("late_ramp").a(1, 8, 0.1).a(9, 16, 1.0).b(1, 4, 0.35).done(),
        // crosses at 5 only, falls back at 6..8, stable from 9
        Builder("transient_trap").a(1, 16, 0.2).a(5, 5, 2.0).a(9, 9, 2.0).b(1, 1, 1.5).b(6, 6, 2.5).done(),
        Builder("double_trap")
            .a(1, 16, 0.1).a(3, 3, 1.5).a(8, 8, 1.2).a(12, 12, 1.0)
            .b(1, 1, 1.0).b(4, 4, 1.5).b(9, 9, 1.5).done(),
        Builder("final_only").a(1, 15, 0.1).a(16, 16, 1.0).b(1, 1, 2.0).done(),
        Builder("never_cross").a(1, 16, 0.1).b(1, 1, 2.0).done(),
        Builder("never_cross_tracking").a(1, 16, 0.3).b(1, 1, 0.5).b(2, 16, 0.3).done(),
        Builder("cross_then_revert").a(1, 16, 0.05).a(4, 4, 2.0).b(1, 1, 1.0).b(8, 8, 2.0).done(),
        Builder("concentrated_evidence").concentrated(0.93).a(1, 16, 0.6).b(1, 1, 2.7).done(),
        Builder("skewed_weights").linear_weights().a(6, 16, 1.0).b(1, 2, 0.6).done(),
        Builder("steep_jump").a(13, 13, 4.0).b(1, 8, 0.25).done(),
    };
    for (auto& e : out) e.scenario.noise_sigma = noise_sigma;
    return out;
}

double min_schedule_gap(const std::vector<BatteryEntry>& battery) {
    double gap = std::numeric_limits<double>::infinity();
    for (const auto& e : battery) {
        const ClosedForm cf = closed_form_trajectory(e.scenario);
        for (std::size_t l = 0; l < cf.visual.size(); ++l) gap = std::min(gap, std::abs(cf.visual[l] - cf.prior[l]));
    }
    return gap;
}

std::vector<BatteryEntry> patch_battery(double noise_sigma) {
    // Conditions at the crossover m: A(<=m) <= B + A(>m) (image-only flips) and
    // A(>m) > B + A(<=m) (the readout token alone cannot flip).
    std::vector<BatteryEntry> out{
        Builder("patch_skewed").linear_weights().b(1, 4, 0.25).a(6, 6, 1.5).a(9, 16, 0.4).done(),
        Builder("patch_uniform").b(1, 4, 0.25).a(6, 6, 1.5).a(9, 16, 0.4).done(),
        Builder("patch_later").linear_weights().b(1, 5, 0.3).a(8, 8, 2.0).a(10, 16, 0.6).done(),
    };
    for (auto& e : out) e.scenario.noise_sigma = noise_sigma;
    return out;
}

std::vector<BatteryEntry> arbitration_battery() {
    std::vector<BatteryEntry> out;
    for (double prior : {1.2, 1.6, 2.0, 2.4, 2.8}) {
        Builder bld("arbitration_b" + std::to_string(static_cast<int>(std::lround(prior * 10))));
        bld.a(1, 16, 0.25).b(1, 4, prior / 4);
        bld.sc.prior_noise_sigma = 1.0;
        bld.sc.payload_jitter = 0.05;
        out.push_back(bld.done());
    }
    return out;
}

std::vector<BatteryEntry> degraded_battery() {
    ModelConfig cfg;
    cfg.n_img = 16;
    cfg.n_txt = 48;
    Builder bld("degraded_arbitration", cfg);
    bld.a(1, 10, 0.1).a(11, 11, 6.0).b(1, 5, 1.0);
    bld.sc.prior_noise_sigma = 0.385;
    bld.sc.payload_jitter = 0.05;
    bld.sc.noise_sigma = 0.01;
    return {bld.done()};
}

BatteryEntry scaling_entry(int layers, int d_model) {
    ModelConfig cfg;
    cfg.layers = layers;
    cfg.d_model = d_model;
    const int onset = std::clamp(static_cast<int>(std::lround(0.55 * layers * std::sqrt(16.0 / layers))), 1, layers);
    Builder bld("scaling_L" + std::to_string(layers) + "_d" + std::to_string(d_model), cfg);
    bld.b(1, 2, 0.5).a(onset, layers, 0.5);
    return bld.done();
}

std::vector<std::string> builtin_battery_names() { return {"mac", "mac_noisy", "patch", "arbitration", "degraded", "standard"}; }

std::vector<BatteryEntry> builtin_battery(const std::string& name) {
    if (name == "mac") return mac_battery(0.0);
    if (name == "mac_noisy") {
        const auto clean = mac_battery(0.0);
        return mac_battery(0.1 * min_schedule_gap(clean));
    }
    if (name == "patch") return patch_battery(0.0);
    if (name == "arbitration") return arbitration_battery();
    if (name == "degraded") return degraded_battery();
    if (name == "standard") {
        std::vector<BatteryEntry> all = mac_battery(0.0);
        for (auto part : {patch_battery(0.0), arbitration_battery(), degraded_battery()})
            all.insert(all.end(), part.begin(), part.end());
        return all;
    }
    throw ConfigError("unknown builtin battery '" + name + "'");
}

}  // namespace arb
