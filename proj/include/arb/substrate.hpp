#pragma once

// Inspectable toy multimodal transformer with analytically planted circuits.
//
// The residual stream is spanned by a seeded orthonormal basis of zero-mean
// directions. Each layer is a genuine single-head softmax attention block
// followed by a ReLU MLP. The attention head lets the readout token attend to
// image tokens in proportion to their planted salience and copies their
// payload into the answer directions. The MLP writes prior mass into the
// prior-answer direction of every question token.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "arb/numkit.hpp"

namespace arb {

enum class Role { visual, prior };

const char* to_string(Role r);

inline constexpr std::size_t kVariantCount = 6;

/// Six surface forms of one answer word: lowercase, Capitalized, UPPERCASE,
/// space-lowercase, space-Capitalized and one extra synthetic slot.
struct VariantSet {
    Role role = Role::visual;
    std::array<int, kVariantCount> ids{};

    bool contains(int token) const;
};

/// Reserved vocabulary ids.
inline constexpr int kImageTokenId = 0;
inline constexpr int kAnswerTokenId = 1;

struct ModelConfig {
    int layers = 16;
    int d_model = 64;
    int vocab = 64;
    int n_img = 8;
    int n_txt = 4;
    std::uint64_t seed = 1234;

    int seq_len() const { return n_img + n_txt; }
    void validate() const;
};

struct ScenarioSpec {
    std::string name = "scenario";
    Vector visual_schedule;   ///< per-layer visual evidence injection (logit units)
    Vector prior_schedule;    ///< per-layer prior injection (logit units)
    Vector evidence_weights;  ///< share of visual evidence per image token, sums to 1
    double evidence_sign_cf = 1.0;
    double evidence_sign_std = -1.0;
    VariantSet visual_set{Role::visual, {2, 3, 4, 5, 6, 7}};
    VariantSet prior_set{Role::prior, {8, 9, 10, 11, 12, 13}};
    /// Isotropic jitter on every embedding coordinate, shared by cf and std.
    double noise_sigma = 0.0;
    /// Relative jitter of the question feature on text tokens: perturbs only
    /// the prior pathway. Shared by cf and std.
    double prior_noise_sigma = 0.0;
    /// Relative jitter of each image token's payload magnitude, drawn
    /// independently for the cf and std image.
    double payload_jitter = 0.0;
    std::uint64_t seed = 0;

    void validate(const ModelConfig& cfg) const;
};

struct AttentionHead {
    Matrix query;   ///< d x h
    Matrix key;     ///< d x h
    Matrix value;   ///< d x h
    Matrix output;  ///< h x d
    Vector sink_key;  ///< learned bias key slot; its value is zero
};

struct Mlp {
    Matrix w_in;   ///< d x f
    Vector b_in;   ///< f
    Matrix w_out;  ///< f x d
};

struct Layer {
    AttentionHead attn;
    Mlp mlp;
};

/// Named directions of the residual stream.
struct Basis {
    enum Slot : std::size_t {
        anchor = 0,
        visual_answer,
        prior_answer,
        question,
        readout,
        salience,
        payload_visual,
        payload_standard,
        first_free,
    };
    std::vector<Vector> dirs;  ///< orthonormal, each orthogonal to the all-ones vector

    const Vector& operator[](std::size_t slot) const { return dirs.at(slot); }
    std::size_t free_count() const { return dirs.size() - first_free; }
};

/// Construction constants of the planted circuit.
struct Circuit {
    static constexpr double anchor = 1000.0;        ///< keeps final-LN scale nearly constant
    static constexpr double salience_offset = 60.0; ///< image keys: log w_i + offset
    static constexpr double text_salience = -40.0;
    static constexpr double sink_score = 30.0;
    static constexpr double min_weight = 1e-20;
    static constexpr double overflow_limit = 1e4;
    /// Payload and question features are carried at this magnitude and read
    /// out at 1/scale, so embedding jitter enters the logits scaled down.
    static constexpr double payload_scale = 10.0;
    static constexpr double question_scale = 10.0;
    static constexpr std::array<double, kVariantCount> variant_scale{1.0, 0.92, 0.81, 0.97, 0.88, 0.7};
};

struct Model {
    ModelConfig config;
    ScenarioSpec scenario;
    Basis basis;
    std::vector<Layer> layers;
    Matrix token_embed;  ///< V x d
    Matrix unembed;      ///< V x d (W_lm)
    Vector final_gain;
    Vector final_bias;
    std::vector<int> question_ids;  ///< text segment, last entry is the answer slot

    int layer_count() const { return config.layers; }
    int d_model() const { return config.d_model; }
};

/// Token-level input: ids for bookkeeping plus the embedded rows fed to layer 1.
struct InputSequence {
    std::vector<int> ids;
    Matrix embeddings;  ///< T x d
    int n_img = 0;

    int length() const { return static_cast<int>(ids.size()); }
};

struct GroundTruth {
    std::optional<int> crossover_layer;
    Role final_winner = Role::prior;
    Vector causal_shares;
    Vector visual_pred;
    Vector prior_pred;
};

struct SamplePair {
    std::uint64_t sample_id = 0;
    std::uint64_t seed = 0;
    InputSequence cf;
    InputSequence standard;
    GroundTruth truth;
};

/// states[0] holds the embeddings, states[l] the residual stream after layer l.
struct HiddenStateCube {
    std::vector<Matrix> states;

    int layers() const { return static_cast<int>(states.size()) - 1; }
    int tokens() const { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
    int dim() const { return states.empty() ? 0 : static_cast<int>(states[0].cols()); }
    const Matrix& at(int layer) const { return states.at(static_cast<std::size_t>(layer)); }
    std::span<const double> last_token(int layer) const {
        return at(layer).row(static_cast<std::size_t>(tokens() - 1));
    }
    /// Mean over token positions at a layer.
    Vector token_mean(int layer) const { return column_mean(at(layer)); }
};

enum class TokenScope { all, last, image_only, text_only, explicit_set };

const char* to_string(TokenScope s);
std::vector<int> scope_tokens(TokenScope scope, int n_img, int length,
                              const std::vector<int>& explicit_tokens = {});

enum class HookKind { inject, add, edit };

/// Intervention on the residual stream after `layer` has been computed, before
/// layer + 1 (or the final readout) consumes it. At one layer, inject hooks run
/// before add hooks, which run before edit hooks.
struct Hook {
    HookKind kind = HookKind::add;
    int layer = 1;
    TokenScope scope = TokenScope::all;
    std::vector<int> tokens;  ///< for explicit_set
    /// inject: one row per scoped token. add: one row (broadcast) or one per scoped token.
    Matrix payload;
    /// edit: rewrites the full T x d state in place.
    std::function<void(Matrix&)> edit;
    bool active = true;

    static Hook inject(int layer, TokenScope scope, Matrix rows, std::vector<int> tokens = {});
    static Hook add(int layer, TokenScope scope, const Vector& delta, std::vector<int> tokens = {});
    static Hook make_edit(int layer, std::function<void(Matrix&)> fn);
};

struct ForwardResult {
    HiddenStateCube cube;
    Vector final_logits;
    int answer = -1;
};

struct ClosedForm {
    Vector visual;  ///< cumulative visual logit per layer (index 0 = layer 1)
    Vector prior;
    std::optional<int> crossover;
};

Model build_toy_vlm(const ModelConfig& cfg, const ScenarioSpec& scenario);

/// Noise-free cumulative competition implied by the schedules.
ClosedForm closed_form_trajectory(const ScenarioSpec& scenario);

ForwardResult forward(const Model& model, const InputSequence& input,
                      const std::vector<Hook>& hooks = {});

/// Resumes an unhooked run from its state after `layer`, applying hooks at
/// layers >= `layer`. Bit-identical to a full forward with the same hooks; the
/// returned cube is left empty.
ForwardResult forward_from(const Model& model, const HiddenStateCube& base, int layer, int n_img,
                           const std::vector<Hook>& hooks);

/// Logits over the vocabulary for one residual vector (final LN + unembedding).
Vector readout_logits(const Model& model, std::span<const double> state);

/// Argmax with ties broken toward the lowest id.
int argmax_lowest(std::span<const double> values);

SamplePair generate_pair(const Model& model, std::uint64_t seed, std::uint64_t sample_id = 0);

/// Embedding of one image token (before jitter).
Vector image_embedding(const Model& model, double weight, double sign, double magnitude);

/// Which answer set a token belongs to, if any.
std::optional<Role> classify_answer(const Model& model, int token);

}  // namespace arb
