#pragma once

#include <string>
#include <vector>

#include "arb/substrate.hpp"

namespace fx {

// Scenario with per-layer schedules (index 0 = layer 1) and uniform weights.
inline arb::ScenarioSpec scenario(const arb::ModelConfig& cfg, std::vector<double> a, std::vector<double> b,
                                  std::string name = "fixture") {
    arb::ScenarioSpec sc;
    sc.name = std::move(name);
    sc.visual_schedule = std::move(a);
    sc.prior_schedule = std::move(b);
    sc.evidence_weights.assign(static_cast<std::size_t>(cfg.n_img), 1.0 / cfg.n_img);
    return sc;
}

// Constant value v on layers [from, to] (1-based, inclusive) of an L-layer schedule.
inline std::vector<double> band(int L, int from, int to, double v) {
    std::vector<double> s(static_cast<std::size_t>(L), 0.0);
    for (int l = from; l <= to; ++l) s[static_cast<std::size_t>(l - 1)] = v;
    return s;
}

inline std::vector<double> plus(std::vector<double> x, const std::vector<double>& y) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
    return x;
}

// Visual ramp from mid-depth against front-loaded prior mass.
inline arb::ScenarioSpec late_ramp(const arb::ModelConfig& cfg) {
    const int L = cfg.layers;
    return scenario(cfg, band(L, L / 2, L, 0.5), band(L, 1, 2, 1.0), "late_ramp");
}

inline bool same_cube(const arb::HiddenStateCube& a, const arb::HiddenStateCube& b) { return a.states == b.states; }

}  // namespace fx
