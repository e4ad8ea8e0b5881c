#pragma once

// Causal validation by activation patching: states captured from the
// standard-image run replace the counterfactual run's states at one layer.

#include <iosfwd>
#include <optional>
#include <vector>

#include "arb/substrate.hpp"

namespace arb {

/// Residual stream at one layer, all positions.
struct DonorStates {
    int layer = 0;
    Matrix states;
};

DonorStates capture_states(const Model& model, const InputSequence& input, int layer);

struct PatchOutcome {
    std::uint64_t sample_id = 0;
    TokenScope scope = TokenScope::all;
    int layer = 0;
    int baseline_answer = -1;
    int patched_answer = -1;
    bool changed = false;
    bool flip_v_to_p = false;
    bool flip_p_to_v = false;
};

/// Injects the donor rows for `scope` at donor.layer into the cf run.
/// `baseline` (the unhooked cf run) may be passed to skip recomputing it.
PatchOutcome patch_run(const Model& model, const InputSequence& cf, const DonorStates& donor, TokenScope scope,
                       std::uint64_t sample_id = 0, const ForwardResult* baseline = nullptr);

struct ScopeCounts {
    std::size_t samples = 0;
    std::size_t changed = 0;
    std::size_t flips = 0;
    std::size_t reverse_flips = 0;
};

struct PatchSummary {
    std::size_t samples = 0;            ///< full-scope outcomes
    std::size_t baseline_visual = 0;
    double chg_pct = 0.0;
    double flip_pct = 0.0;
    std::optional<double> cond_pct;     ///< flips among baseline-visual samples
    ScopeCounts full, last, image, text;
    std::optional<double> retention;    ///< image flips / full flips
    std::size_t reverse_flips = 0;      ///< across every scope
};

/// img / full flip counts; null when there are no full-scope flips.
std::optional<double> retention_ratio(std::size_t image_flips, std::size_t full_flips);

/// Chg/Flip/Cond use the full-scope outcomes; per-scope counts and retention
/// use whatever scopes are present.
PatchSummary summarize_patches(const Model& model, const std::vector<PatchOutcome>& outcomes);

inline constexpr const char* kPatchCsvHeader =
    "sample_id,scope,layer,baseline_answer,patched_answer,changed,flip_v_to_p,flip_p_to_v";
void write_patch_csv(std::ostream& os, const std::vector<PatchOutcome>& outcomes);

}  // namespace arb
