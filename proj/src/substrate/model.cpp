#include "arb/substrate.hpp"

#include <algorithm>
#include <stdexcept>

namespace arb {

namespace {

// Seeded orthonormal basis of the zero-mean subspace (everything the final
// layer norm does not project away).
Basis make_basis(int d, Rng& rng) {
    const auto n = static_cast<std::size_t>(d);
    const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
    Vector ones(n, inv_sqrt_n);
    std::vector<Vector> accepted{ones};
    Basis basis;
    while (accepted.size() < n) {
        Vector v(n);
        for (double& x : v) x = rng.normal();
        for (int pass = 0; pass < 2; ++pass) {
            for (const Vector& u : accepted) {
                const double proj = dot(v, u);
                for (std::size_t i = 0; i < n; ++i) v[i] -= proj * u[i];
            }
        }
        const double len = norm(v);
        if (len < 1e-6) continue;
        for (double& x : v) x /= len;
        accepted.push_back(v);
        basis.dirs.push_back(std::move(v));
    }
    return basis;
}

void axpy(double a, const Vector& x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

Matrix column_pair(const Vector& c0, const Vector& c1) {
    Matrix m(c0.size(), 2);
    for (std::size_t i = 0; i < c0.size(); ++i) {
        m(i, 0) = c0[i];
        m(i, 1) = c1[i];
    }
    return m;
}

Vector random_free_direction(const Basis& basis, Rng& rng) {
    Vector v(basis.dirs.front().size(), 0.0);
    for (std::size_t k = Basis::first_free; k < basis.dirs.size(); ++k) axpy(rng.normal(), basis[k], v);
    const double len = norm(v);
    for (double& x : v) x /= len;
    return v;
}

}  // namespace

const char* to_string(Role r) { return r == Role::visual ? "visual" : "prior"; }

bool VariantSet::contains(int token) const {
    return std::find(ids.begin(), ids.end(), token) != ids.end();
}

void ModelConfig::validate() const {
    if (layers < 4) throw std::invalid_argument("ModelConfig: layers must be >= 4");
    if (d_model < 16) throw std::invalid_argument("ModelConfig: d_model must be >= 16");
    if (vocab < 16) throw std::invalid_argument("ModelConfig: vocab must be >= 16");
    if (n_img < 2) throw std::invalid_argument("ModelConfig: n_img must be >= 2");
    if (n_txt < 2) throw std::invalid_argument("ModelConfig: n_txt must be >= 2");
}

void ScenarioSpec::validate(const ModelConfig& cfg) const {
    const auto L = static_cast<std::size_t>(cfg.layers);
    if (visual_schedule.size() != L || prior_schedule.size() != L)
        throw std::invalid_argument("scenario '" + name + "': schedules must have one entry per layer");
    for (std::size_t i = 0; i < L; ++i) {
        if (!(visual_schedule[i] >= 0.0) || !(prior_schedule[i] >= 0.0) ||
            !std::isfinite(visual_schedule[i]) || !std::isfinite(prior_schedule[i]))
            throw std::invalid_argument("scenario '" + name + "': schedules must be finite and >= 0");
    }
    if (evidence_weights.size() != static_cast<std::size_t>(cfg.n_img))
        throw std::invalid_argument("scenario '" + name + "': evidence_weights must have n_img entries");
    double total = 0.0;
    for (double w : evidence_weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("scenario '" + name + "': negative evidence weight");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument("scenario '" + name + "': evidence_weights must sum to 1");
    if (evidence_sign_cf == 0.0 || evidence_sign_std == 0.0)
        throw std::invalid_argument("scenario '" + name + "': evidence signs must be nonzero");
    if (noise_sigma < 0.0 || prior_noise_sigma < 0.0 || payload_jitter < 0.0)
        throw std::invalid_argument("scenario '" + name + "': noise levels must be >= 0");
    std::vector<int> all;
    for (const VariantSet* set : {&visual_set, &prior_set}) {
        for (int id : set->ids) {
            if (id < 0 || id >= cfg.vocab)
                throw std::invalid_argument("scenario '" + name + "': variant id out of vocabulary");
            if (id == kImageTokenId || id == kAnswerTokenId)
                throw std::invalid_argument("scenario '" + name + "': variant id collides with a reserved id");
            all.push_back(id);
        }
    }
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end())
        throw std::invalid_argument("scenario '" + name + "': variant ids must be unique and the sets disjoint");
    if (cfg.vocab - 2 - static_cast<int>(all.size()) < 1)
        throw std::invalid_argument("scenario '" + name + "': vocabulary leaves no room for question tokens");
}

Model build_toy_vlm(const ModelConfig& cfg, const ScenarioSpec& scenario) {
    cfg.validate();
    scenario.validate(cfg);
    double cum_v = 0.0, cum_p = 0.0;
    for (int l = 0; l < cfg.layers; ++l) {
        cum_v += scenario.visual_schedule[static_cast<std::size_t>(l)];
        cum_p += scenario.prior_schedule[static_cast<std::size_t>(l)];
        if (cum_v > Circuit::overflow_limit || cum_p > Circuit::overflow_limit)
            throw std::invalid_argument("scenario '" + scenario.name +
                                        "': cumulative schedule exceeds the logit overflow limit");
    }

    Model model;
    model.config = cfg;
    model.scenario = scenario;
    Rng rng(cfg.seed);
    Rng basis_rng = rng.split("basis");
    model.basis = make_basis(cfg.d_model, basis_rng);
    const Basis& B = model.basis;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto V = static_cast<std::size_t>(cfg.vocab);
    const Vector zero(d, 0.0);

    // Attention: the readout token queries salience; every token also scores
    // the sink slot, which wins unless salience applies.
    Vector anchor_unit = B[Basis::anchor];
    for (double& x : anchor_unit) x /= Circuit::anchor;
    Rng mlp_rng = rng.split("mlp");
    constexpr std::size_t kExtraUnits = 3;
    for (int l = 0; l < cfg.layers; ++l) {
        const double a = scenario.visual_schedule[static_cast<std::size_t>(l)];
        const double b = scenario.prior_schedule[static_cast<std::size_t>(l)];
        Layer layer;
        layer.attn.query = column_pair(B[Basis::readout], anchor_unit);
        layer.attn.key = column_pair(B[Basis::salience], zero);
        layer.attn.value = column_pair(B[Basis::payload_visual], B[Basis::payload_standard]);
        layer.attn.output = Matrix(2, d);
        axpy(a / Circuit::payload_scale, B[Basis::visual_answer], layer.attn.output.row(0));
        axpy(a / Circuit::payload_scale, B[Basis::prior_answer], layer.attn.output.row(1));
        layer.attn.sink_key = {0.0, Circuit::sink_score};

        // Unit 0 gates prior mass on the question feature; the remaining units
        // are small seeded mixers confined to the free subspace.
        const std::size_t f = 1 + kExtraUnits;
        layer.mlp.w_in = Matrix(d, f);
        layer.mlp.b_in = Vector(f, 0.0);
        layer.mlp.w_out = Matrix(f, d);
        for (std::size_t i = 0; i < d; ++i) layer.mlp.w_in(i, 0) = B[Basis::question][i];
        axpy(b / Circuit::question_scale, B[Basis::prior_answer], layer.mlp.w_out.row(0));
        if (B.free_count() > 0) {
            for (std::size_t u = 1; u < f; ++u) {
                const Vector in = random_free_direction(B, mlp_rng);
                const Vector out = random_free_direction(B, mlp_rng);
                for (std::size_t i = 0; i < d; ++i) layer.mlp.w_in(i, u) = in[i];
                layer.mlp.b_in[u] = -0.1;
                axpy(0.05, out, layer.mlp.w_out.row(u));
            }
        }
        model.layers.push_back(std::move(layer));
    }

    // Token embeddings: anchor everywhere; text tokens carry the question
    // feature, a low salience key and a free-subspace identity.
    Rng embed_rng = rng.split("embed");
    model.token_embed = Matrix(V, d);
    for (std::size_t id = 0; id < V; ++id) {
        auto row = model.token_embed.row(id);
        axpy(Circuit::anchor, B[Basis::anchor], row);
        if (static_cast<int>(id) == kImageTokenId) continue;
        axpy(Circuit::question_scale, B[Basis::question], row);
        axpy(Circuit::text_salience, B[Basis::salience], row);
        if (B.free_count() > 0) axpy(0.5, random_free_direction(B, embed_rng), row);
        if (static_cast<int>(id) == kAnswerTokenId) axpy(1.0, B[Basis::readout], row);
    }

    // Unembedding: variant rows are scaled copies of the answer directions;
    // every other token gets a small free-subspace row.
    Rng lm_rng = rng.split("unembed");
    model.unembed = Matrix(V, d);
    for (std::size_t id = 0; id < V; ++id) {
        auto row = model.unembed.row(id);
        bool assigned = false;
        for (std::size_t j = 0; j < kVariantCount; ++j) {
            if (scenario.visual_set.ids[j] == static_cast<int>(id)) {
                axpy(Circuit::variant_scale[j], B[Basis::visual_answer], row);
                assigned = true;
            } else if (scenario.prior_set.ids[j] == static_cast<int>(id)) {
                axpy(Circuit::variant_scale[j], B[Basis::prior_answer], row);
                assigned = true;
            }
        }
        if (!assigned && B.free_count() > 0) axpy(0.05, random_free_direction(B, lm_rng), row);
    }

    // Question: fixed per model. Answer slot last.
    std::vector<int> pool;
    for (int id = 2; id < cfg.vocab; ++id)
        if (!scenario.visual_set.contains(id) && !scenario.prior_set.contains(id)) pool.push_back(id);
    Rng question_rng = rng.split("question");
    for (int t = 0; t + 1 < cfg.n_txt; ++t) model.question_ids.push_back(pool[question_rng.below(pool.size())]);
    model.question_ids.push_back(kAnswerTokenId);

    // Final LN gain chosen so the answer slot's noise-free scale maps to 1.
    const auto h0 = model.token_embed.row(kAnswerTokenId);
    const double gamma = norm(h0) / std::sqrt(static_cast<double>(d));
    model.final_gain.assign(d, gamma);
    model.final_bias.assign(d, 0.0);
    return model;
}

Vector image_embedding(const Model& model, double weight, double sign, double magnitude) {
    const Basis& B = model.basis;
    Vector v(model.token_embed.row(kImageTokenId).begin(), model.token_embed.row(kImageTokenId).end());
    axpy(std::log(std::max(weight, Circuit::min_weight)) + Circuit::salience_offset, B[Basis::salience], v);
    axpy(magnitude * Circuit::payload_scale, sign > 0 ? B[Basis::payload_visual] : B[Basis::payload_standard], v);
    return v;
}

std::optional<Role> classify_answer(const Model& model, int token) {
    if (model.scenario.visual_set.contains(token)) return Role::visual;
    if (model.scenario.prior_set.contains(token)) return Role::prior;
    return std::nullopt;
}

}  // namespace arb
