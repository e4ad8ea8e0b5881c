#pragma once

// Training-free interventions on the residual stream: contrastive linear
// steering and SAE-guided bidirectional residual steering.

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <vector>

#include "arb/substrate.hpp"

namespace arb {

inline const std::vector<double> kLinearAlphaSweep{0.0, 0.2, 0.5, 1.0, 1.5, 2.0, 3.0};
inline const std::vector<double> kSaeAlphaSweep{0.0, 1.0, 2.0, 3.0, 5.0};

struct SteeringDirection {
    int layer = 1;
    Vector direction;
    std::size_t n_cf = 0;
    std::size_t n_std = 0;
};

/// mean over cf samples of the token-mean state minus the same for std.
SteeringDirection linear_direction(const Model& model, const std::vector<SamplePair>& train, int layer);
/// Same arithmetic from precomputed token-mean rows.
SteeringDirection linear_direction(const Matrix& cf_means, const Matrix& std_means, int layer);

Hook linear_hook(const SteeringDirection& dir, double alpha, TokenScope scope = TokenScope::all);

/// Answer with alpha * d added at every scoped position for the whole pass.
int apply_linear(const Model& model, const InputSequence& input, const SteeringDirection& dir, double alpha,
                 TokenScope scope = TokenScope::all);

struct SaeConfig {
    int expansion = 4;
    double lambda = 0.04;
    int epochs = 200;
    double step = 0.05;
    std::uint64_t seed = 42;
};

/// z = ReLU(W_enc (h - center) + b_enc), h_hat = W_dec z + b_dec.
/// `center` is the training-data mean, fixed before training; it is the same
/// as folding -W_enc*center into b_enc.
struct SaeModel {
    Matrix w_enc;  ///< d_sae x d
    Vector b_enc;
    Matrix w_dec;  ///< d x d_sae
    Vector b_dec;
    Vector center;
    double lambda = 0.04;
    std::vector<double> loss_log;  ///< objective after each epoch, index 0 = initial

    std::size_t d() const { return w_dec.rows(); }
    std::size_t d_sae() const { return w_dec.cols(); }
    Vector encode(std::span<const double> h) const;
    Vector decode(std::span<const double> z) const;
};

struct SaeGradients {
    Matrix w_enc;
    Vector b_enc;
    Matrix w_dec;
    Vector b_dec;
};

/// Mean over rows of |h - h_hat|^2 + lambda * |z|_1.
double sae_loss(const SaeModel& sae, const Matrix& data);
SaeGradients sae_gradients(const SaeModel& sae, const Matrix& data);
SaeModel sae_init(const Matrix& data, const SaeConfig& cfg);
/// Full-batch gradient descent, one step per epoch; a step that would raise
/// the loss is retried at half the step size.
SaeModel sae_train(const Matrix& states, const SaeConfig& cfg);

/// Mean count of active features per row.
double sae_mean_l0(const SaeModel& sae, const Matrix& data);
double sae_reconstruction_mse(const SaeModel& sae, const Matrix& data);

/// Binary layout (little-endian): "ARBSAE01", u64 d, u64 d_sae, f64 lambda,
/// then f64 row-major W_enc, b_enc, W_dec, b_dec, center.
void save_sae(const SaeModel& sae, const std::filesystem::path& path);
SaeModel load_sae(const std::filesystem::path& path);

struct FeatureSelection {
    Vector delta;   ///< mean cf activation - mean std activation
    Vector scores;  ///< |delta| * |W_dec[:, j]|
    std::vector<int> visual;  ///< top-k with delta > 0, best first
    std::vector<int> prior;   ///< top-k with delta < 0
};

FeatureSelection sae_select_features(const SaeModel& sae, const Matrix& cf_states, const Matrix& std_states,
                                     std::size_t k = 50);

enum class SaeApplication { residual, replacement };

/// Feature-space edit z' (visual features + alpha_v, prior features - alpha_p,
/// clamped at 0) applied to the token-mean state of the current pass.
/// residual: h_t += decode(z') - decode(z) at every position.
/// replacement: h_t = decode(z') at every position.
Hook sae_residual_hook(std::shared_ptr<const SaeModel> sae, const FeatureSelection& selection, int layer,
                       double alpha_v, double alpha_p, SaeApplication mode = SaeApplication::residual);

struct Transition {
    std::uint64_t sample_id = 0;
    int baseline_answer = -1;
    int steered_answer = -1;
    bool baseline_visual = false;
    bool steered_visual = false;
};

struct SteerOutcome {
    double baseline_acc = 0.0;
    double steered_acc = 0.0;
    double delta_acc = 0.0;  ///< percentage points
    std::size_t improved = 0;
    std::size_t degraded = 0;
    std::vector<Transition> transitions;
};

struct TrainEvalSplit {
    std::vector<SamplePair> train;
    std::vector<SamplePair> eval;
};

/// Seeded shuffle; the first `train_fraction` go to training.
TrainEvalSplit train_eval_split(std::vector<SamplePair> pairs, std::uint64_t seed, double train_fraction = 0.4);

/// Accuracy = share of cf inputs answered with any visual variant. Throws if
/// an eval sample id appears in `train_ids`. `baseline` (one unhooked run per
/// eval sample, see steering_baseline) lets repeated sweeps skip the shared
/// prefix of each pass.
SteerOutcome evaluate_steering(const Model& model, const std::vector<SamplePair>& eval, const std::vector<Hook>& hooks,
                               const std::vector<std::uint64_t>& train_ids,
                               const std::vector<ForwardResult>* baseline = nullptr);

std::vector<ForwardResult> steering_baseline(const Model& model, const std::vector<SamplePair>& eval);

/// Bookkeeping from baseline/steered answer lists (no forward passes).
SteerOutcome score_transitions(std::vector<Transition> transitions);

inline constexpr const char* kTransitionCsvHeader = "sample_id,baseline_answer,steered_answer,baseline_visual,steered_visual";
void write_transition_csv(std::ostream& os, const std::vector<Transition>& transitions);

}  // namespace arb
