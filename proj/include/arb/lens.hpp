#pragma once

// Logit-lens readout of the competing answers and crossover detection.

#include <iosfwd>
#include <optional>
#include <vector>

#include "arb/substrate.hpp"

namespace arb {

/// Per-layer maxima over each variant set at the readout position.
/// Index i describes layer i + 1.
struct Trajectory {
    Vector logit_v;
    Vector logit_p;
    std::vector<int> v_variant;  ///< winning slot within the visual set
    std::vector<int> p_variant;

    int layers() const { return static_cast<int>(logit_v.size()); }
};

struct MacResult {
    std::optional<int> mac_layer;
    std::optional<double> depth_pct;  ///< mac_layer / L, in (0, 1]
    Role final_winner = Role::prior;
    double final_gap = 0.0;           ///< logit_v(L) - logit_p(L)
};

struct MacAggregate {
    std::optional<double> mean_mac;   ///< over samples that have a crossover
    double win_rate = 0.0;            ///< fraction with a visual final winner
    std::optional<double> depth_pct;  ///< mean_mac / L
    std::size_t crossed = 0;
    std::size_t samples = 0;
};

/// Max over a set's six variants; ties resolve to the lowest token id.
struct VariantMax {
    double value = 0.0;
    int slot = 0;
};
VariantMax variant_max(std::span<const double> logits, const VariantSet& set);

Trajectory layer_logits(const HiddenStateCube& cube, const Model& model,
                        const VariantSet& visual, const VariantSet& prior);

MacResult detect_mac(const Trajectory& traj);

MacAggregate aggregate_mac(const std::vector<MacResult>& results, int layers);

/// Integer percent with halves rounded up, as printed in the tables.
int round_percent(double fraction);

/// 1-based rank of the best visual variant among all logits; ties share the
/// better rank.
int visual_rank(std::span<const double> logits, const VariantSet& visual);

int final_rank(const HiddenStateCube& cube, const Model& model, const VariantSet& visual);

/// CSV rows: sample_id,layer,logit_v,logit_p,v_variant,p_variant
void write_trajectory_csv(std::ostream& os, const std::vector<std::pair<std::uint64_t, Trajectory>>& rows);
inline constexpr const char* kTrajectoryCsvHeader = "sample_id,layer,logit_v,logit_p,v_variant,p_variant";

}  // namespace arb
