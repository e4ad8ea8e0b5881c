#pragma once

// Encoding-versus-grounding analytics: how strongly the hidden state encodes
// the image attribute, and whether that strength predicts the answer.

#include <optional>
#include <string>
#include <vector>

#include "arb/substrate.hpp"

namespace arb {

enum class DepthAnchor { mean_mac, total_layers };

const char* to_string(DepthAnchor a);

struct DepthPoint {
    double fraction = 1.0;
    int layer = 1;
};

/// round-half-up(fraction * reference), clamped to [1, L].
DepthPoint resolve_depth(double fraction, double reference, int layers);

struct LatentDistance {
    double l2 = 0.0;
    double cosine = 1.0;
};

/// Distance between the readout-position states of a cf/std pair.
LatentDistance latent_distance(const HiddenStateCube& cf, const HiddenStateCube& standard, const DepthPoint& depth);

struct GridPoint {
    double fraction = 0.0;
    int layer = 0;
    double l2 = 0.0;
    double cosine = 1.0;
};

/// k evenly spaced fractions of the total layer count, ending at 1.0.
std::vector<GridPoint> depth_grid(const HiddenStateCube& cf, const HiddenStateCube& standard, int k);

struct GroupSample {
    bool success = false;  ///< final answer followed the image
    double l2 = 0.0;
};

struct GroupStats {
    std::optional<double> mean_l2_visual;
    std::size_t n_visual = 0;
    std::optional<double> mean_l2_prior;
    std::size_t n_prior = 0;
    std::optional<double> ratio;  ///< visual / prior
    std::optional<double> p_mw;
    bool degenerate = false;      ///< one group empty
};

GroupStats group_compare(const std::vector<GroupSample>& samples);

struct ProbeResult {
    double auc = 0.5;
    std::optional<double> confidence_success;  ///< mean P(visual) on success rows
    std::optional<double> confidence_failure;
    std::optional<double> confidence_delta;    ///< success - failure
};

/// Stratified assignment of rows to folds (seeded shuffle within each class).
std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed);

/// Out-of-fold AUC of a standardized logistic probe. `groups` tags rows as
/// success (1), failure (0) or ungrouped (-1) for the confidence split.
ProbeResult probe_auc(const Matrix& states, std::span<const int> labels, std::span<const int> groups,
                      int folds, std::uint64_t seed, const LogisticOptions& opts = {});

/// Model-level (or scenario-level) summary row for cross-stage correlation.
struct ModelRow {
    std::string name;
    double success_rate = 0.0;
    double l2_75 = 0.0;
    double final_gap = 0.0;
    double visual_rank = 1.0;
};

struct CrossStageRow {
    std::string metric;
    std::optional<double> rho;
    std::optional<double> p;
    std::string error;  ///< set instead of rho when the column is constant
};

struct CrossStageResult {
    std::vector<CrossStageRow> rows;
    std::optional<double> encoding_predictor_auc;
};

/// Spearman of each metric column against success rate, plus the sample-level
/// AUC of l2 as a success predictor. Strict mode throws on a constant column;
/// lenient mode records the error in the row.
CrossStageResult cross_stage(const std::vector<ModelRow>& rows, const std::vector<GroupSample>& samples,
                             bool lenient = false);

}  // namespace arb
